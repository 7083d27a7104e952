//! Second-stage classification head.
//!
//! ```text
//! feature-map crop with context margin (area pooling to CROP x CROP x FEATURES)
//!   -> per-crop standardization
//!   -> 3x3 valid conv, CONV_CHANNELS maps, tanh
//!   -> 2x2 average pool
//!   -> dense HIDDEN, tanh
//!   -> dense K -> softmax
//! ```
//!
//! Every stage is smooth in the feature values, so the analytic gradient
//! agrees with finite differences everywhere. The crop is a fixed linear map
//! once the proposal geometry is known.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{FeatureMap, FEATURES, PATCH};
use crate::geometry::BoxGeometry;

const CHANNELS: usize = FEATURES;
pub(crate) const CROP: usize = 12;
pub(crate) const CONV_CHANNELS: usize = 8;
pub(crate) const HIDDEN: usize = 32;
const CONV_OUT: usize = CROP - 2;
const POOL_OUT: usize = CONV_OUT / 2;
pub(crate) const CROP_LEN: usize = CROP * CROP * CHANNELS;
const POOLED_LEN: usize = POOL_OUT * POOL_OUT * CONV_CHANNELS;
const KERNEL_LEN: usize = 3 * 3 * CHANNELS;
const STANDARDIZE_EPS: f64 = 1e-4;

/// Per-axis pixel weights of each crop cell.
#[derive(Debug, Clone)]
pub(crate) struct CropPlan {
    cols: Vec<Vec<(usize, f64)>>,
    rows: Vec<Vec<(usize, f64)>>,
}

fn axis_weights(lo: f64, hi: f64, limit: usize) -> Vec<Vec<(usize, f64)>> {
    let step = (hi - lo) / CROP as f64;
    let last_px = limit as i64 - 1;
    (0..CROP)
        .map(|i| {
            let a = lo + step * i as f64;
            let b = lo + step * (i + 1) as f64;
            let mut w: Vec<(usize, f64)> = Vec::new();
            for p in a.floor() as i64..b.ceil() as i64 {
                let overlap = (b.min(p as f64 + 1.0) - a.max(p as f64)).max(0.0);
                if overlap <= 0.0 {
                    continue;
                }
                // outside the image the border pixel is repeated
                let q = p.clamp(0, last_px) as usize;
                match w.last_mut() {
                    Some(last) if last.0 == q => last.1 += overlap / step,
                    _ => w.push((q, overlap / step)),
                }
            }
            w
        })
        .collect()
}

impl CropPlan {
    /// Crops `geometry` (pixel coordinates) grown by `context` times its side
    /// on every edge from a `map_width x map_height` feature map.
    pub(crate) fn new(
        geometry: &BoxGeometry,
        context: f64,
        map_width: usize,
        map_height: usize,
    ) -> Self {
        let gx = context * geometry.width();
        let gy = context * geometry.height();
        let p = PATCH as f64;
        CropPlan {
            cols: axis_weights(
                (geometry.x_min - gx) / p,
                (geometry.x_max + gx) / p,
                map_width,
            ),
            rows: axis_weights(
                (geometry.y_min - gy) / p,
                (geometry.y_max + gy) / p,
                map_height,
            ),
        }
    }

    pub(crate) fn extract(&self, map: &FeatureMap) -> [f64; CROP_LEN] {
        let mut out = [0.0; CROP_LEN];
        for (i, row_w) in self.rows.iter().enumerate() {
            for (j, col_w) in self.cols.iter().enumerate() {
                let mut acc = [0.0; CHANNELS];
                for &(y, wy) in row_w {
                    let base = y * map.width;
                    for &(x, wx) in col_w {
                        let cell = &map.data[(base + x) * CHANNELS..][..CHANNELS];
                        let ww = wy * wx;
                        for (a, v) in acc.iter_mut().zip(cell) {
                            *a += ww * v;
                        }
                    }
                }
                out[(i * CROP + j) * CHANNELS..][..CHANNELS].copy_from_slice(&acc);
            }
        }
        out
    }

    /// Adds the transpose of [`CropPlan::extract`] applied to `d_crop`.
    pub(crate) fn scatter(&self, d_crop: &[f64; CROP_LEN], map_width: usize, grad: &mut [f64]) {
        for (i, row_w) in self.rows.iter().enumerate() {
            for (j, col_w) in self.cols.iter().enumerate() {
                let d = &d_crop[(i * CROP + j) * CHANNELS..][..CHANNELS];
                for &(y, wy) in row_w {
                    let base = y * map_width;
                    for &(x, wx) in col_w {
                        let g = &mut grad[(base + x) * CHANNELS..][..CHANNELS];
                        let ww = wy * wx;
                        for (gv, dv) in g.iter_mut().zip(d) {
                            *gv += ww * dv;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct HeadParams {
    pub categories: usize,
    /// `[out][ky][kx][in]`
    pub conv_w: Vec<f64>,
    pub conv_b: Vec<f64>,
    /// `[HIDDEN][POOLED_LEN]`
    pub fc1_w: Vec<f64>,
    pub fc1_b: Vec<f64>,
    /// `[K][HIDDEN]`
    pub fc2_w: Vec<f64>,
    pub fc2_b: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
pub(crate) struct HeadCache {
    z: [f64; CROP_LEN],
    inv_std: f64,
    conv: Vec<f64>,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    pub probs: Vec<f64>,
}

fn uniform(rng: &mut impl Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

impl HeadParams {
    pub(crate) fn init(categories: usize, rng: &mut impl Rng) -> Self {
        HeadParams {
            categories,
            conv_w: uniform(
                rng,
                CONV_CHANNELS * KERNEL_LEN,
                KERNEL_LEN,
                CONV_CHANNELS * 9,
            ),
            conv_b: vec![0.0; CONV_CHANNELS],
            fc1_w: uniform(rng, HIDDEN * POOLED_LEN, POOLED_LEN, HIDDEN),
            fc1_b: vec![0.0; HIDDEN],
            fc2_w: uniform(rng, categories * HIDDEN, HIDDEN, categories),
            fc2_b: vec![0.0; categories],
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        HeadParams {
            categories: self.categories,
            conv_w: vec![0.0; self.conv_w.len()],
            conv_b: vec![0.0; self.conv_b.len()],
            fc1_w: vec![0.0; self.fc1_w.len()],
            fc1_b: vec![0.0; self.fc1_b.len()],
            fc2_w: vec![0.0; self.fc2_w.len()],
            fc2_b: vec![0.0; self.fc2_b.len()],
        }
    }

    pub(crate) fn check_shapes(&self) -> bool {
        self.conv_w.len() == CONV_CHANNELS * KERNEL_LEN
            && self.conv_b.len() == CONV_CHANNELS
            && self.fc1_w.len() == HIDDEN * POOLED_LEN
            && self.fc1_b.len() == HIDDEN
            && self.fc2_w.len() == self.categories * HIDDEN
            && self.fc2_b.len() == self.categories
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.conv_w,
            &mut self.conv_b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }

    pub(crate) fn forward(&self, crop: &[f64; CROP_LEN]) -> HeadCache {
        let n = CROP_LEN as f64;
        let mean = crop.iter().sum::<f64>() / n;
        let var = crop.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + STANDARDIZE_EPS).sqrt();
        let mut z = [0.0; CROP_LEN];
        for (zi, ci) in z.iter_mut().zip(crop) {
            *zi = (ci - mean) * inv_std;
        }

        let mut conv = vec![0.0; CONV_CHANNELS * CONV_OUT * CONV_OUT];
        for o in 0..CONV_CHANNELS {
            let kernel = &self.conv_w[o * KERNEL_LEN..][..KERNEL_LEN];
            for y in 0..CONV_OUT {
                for x in 0..CONV_OUT {
                    let mut acc = self.conv_b[o];
                    for ky in 0..3 {
                        let zrow = &z[((y + ky) * CROP + x) * CHANNELS..][..3 * CHANNELS];
                        let krow = &kernel[ky * 3 * CHANNELS..][..3 * CHANNELS];
                        for (a, b) in zrow.iter().zip(krow) {
                            acc += a * b;
                        }
                    }
                    conv[(o * CONV_OUT + y) * CONV_OUT + x] = acc.tanh();
                }
            }
        }

        let mut pooled = vec![0.0; POOLED_LEN];
        for o in 0..CONV_CHANNELS {
            for y in 0..POOL_OUT {
                for x in 0..POOL_OUT {
                    let at = |dy: usize, dx: usize| {
                        conv[(o * CONV_OUT + 2 * y + dy) * CONV_OUT + 2 * x + dx]
                    };
                    pooled[(o * POOL_OUT + y) * POOL_OUT + x] =
                        0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }

        let hidden: Vec<f64> = (0..HIDDEN)
            .map(|h| {
                let row = &self.fc1_w[h * POOLED_LEN..][..POOLED_LEN];
                let a: f64 = row.iter().zip(&pooled).map(|(w, p)| w * p).sum();
                (a + self.fc1_b[h]).tanh()
            })
            .collect();

        let logits: Vec<f64> = (0..self.categories)
            .map(|k| {
                let row = &self.fc2_w[k * HIDDEN..][..HIDDEN];
                row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + self.fc2_b[k]
            })
            .collect();

        HeadCache {
            z,
            inv_std,
            conv,
            pooled,
            hidden,
            probs: softmax(&logits),
        }
    }

    /// Backpropagates `d_logits` through the head. Accumulates parameter
    /// gradients into `grads` when given and returns the crop gradient.
    pub(crate) fn backward(
        &self,
        cache: &HeadCache,
        d_logits: &[f64],
        mut grads: Option<&mut HeadParams>,
    ) -> [f64; CROP_LEN] {
        let mut d_hidden = vec![0.0; HIDDEN];
        for (k, &dl) in d_logits.iter().enumerate() {
            if dl == 0.0 {
                continue;
            }
            let row = &self.fc2_w[k * HIDDEN..][..HIDDEN];
            for h in 0..HIDDEN {
                d_hidden[h] += row[h] * dl;
            }
            if let Some(g) = grads.as_deref_mut() {
                g.fc2_b[k] += dl;
                for h in 0..HIDDEN {
                    g.fc2_w[k * HIDDEN + h] += dl * cache.hidden[h];
                }
            }
        }

        let mut d_pooled = vec![0.0; POOLED_LEN];
        for (h, dh) in d_hidden.iter().enumerate() {
            let da = dh * (1.0 - cache.hidden[h] * cache.hidden[h]);
            if da == 0.0 {
                continue;
            }
            let row = &self.fc1_w[h * POOLED_LEN..][..POOLED_LEN];
            for (dp, w) in d_pooled.iter_mut().zip(row) {
                *dp += w * da;
            }
            if let Some(g) = grads.as_deref_mut() {
                g.fc1_b[h] += da;
                let grow = &mut g.fc1_w[h * POOLED_LEN..][..POOLED_LEN];
                for (gw, p) in grow.iter_mut().zip(&cache.pooled) {
                    *gw += da * p;
                }
            }
        }

        let mut dz = [0.0; CROP_LEN];
        for o in 0..CONV_CHANNELS {
            let kernel = &self.conv_w[o * KERNEL_LEN..][..KERNEL_LEN];
            for y in 0..CONV_OUT {
                for x in 0..CONV_OUT {
                    let t = cache.conv[(o * CONV_OUT + y) * CONV_OUT + x];
                    let dp = d_pooled[(o * POOL_OUT + y / 2) * POOL_OUT + x / 2];
                    let da = 0.25 * dp * (1.0 - t * t);
                    if da == 0.0 {
                        continue;
                    }
                    for ky in 0..3 {
                        let off = ((y + ky) * CROP + x) * CHANNELS;
                        let krow = &kernel[ky * 3 * CHANNELS..][..3 * CHANNELS];
                        for (i, kv) in krow.iter().enumerate() {
                            dz[off + i] += kv * da;
                        }
                    }
                    if let Some(g) = grads.as_deref_mut() {
                        g.conv_b[o] += da;
                        let gk = &mut g.conv_w[o * KERNEL_LEN..][..KERNEL_LEN];
                        for ky in 0..3 {
                            let off = ((y + ky) * CROP + x) * CHANNELS;
                            for i in 0..3 * CHANNELS {
                                gk[ky * 3 * CHANNELS + i] += da * cache.z[off + i];
                            }
                        }
                    }
                }
            }
        }

        // standardization: dx = (dz - mean(dz) - z * mean(dz * z)) / std
        let n = CROP_LEN as f64;
        let mean_dz = dz.iter().sum::<f64>() / n;
        let mean_dzz = dz.iter().zip(&cache.z).map(|(d, z)| d * z).sum::<f64>() / n;
        let mut d_crop = [0.0; CROP_LEN];
        for i in 0..CROP_LEN {
            d_crop[i] = cache.inv_std * (dz[i] - mean_dz - cache.z[i] * mean_dzz);
        }
        d_crop
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
