//! Shared feature map for the second stage.
//!
//! Non-overlapping `PATCH x PATCH` pixel patches are embedded into `FEATURES`
//! channels with a tanh. Every proposal is cropped from this one map, so a
//! perturbation of an object's pixels reaches every window that covers it.
//! Images whose sides are not multiples of `PATCH` repeat the last row or
//! column.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::{ImageTensor, CHANNELS};

pub(crate) const PATCH: usize = 4;
pub(crate) const FEATURES: usize = 8;
const PATCH_LEN: usize = PATCH * PATCH * CHANNELS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct BackboneParams {
    /// `[FEATURES][PATCH][PATCH][CHANNELS]`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// `height x width x FEATURES` activations, row-major.
pub(crate) struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

fn map_side(pixels: usize) -> usize {
    pixels.div_ceil(PATCH)
}

/// Flat pixel offsets of the patch at cell `(cy, cx)`, clamped to the image.
fn patch_offsets(image_h: usize, image_w: usize, cy: usize, cx: usize) -> [usize; PATCH * PATCH] {
    std::array::from_fn(|i| {
        let y = (cy * PATCH + i / PATCH).min(image_h - 1);
        let x = (cx * PATCH + i % PATCH).min(image_w - 1);
        (y * image_w + x) * CHANNELS
    })
}

impl BackboneParams {
    pub(crate) fn init(rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (PATCH_LEN + FEATURES) as f64).sqrt();
        BackboneParams {
            weights: (0..FEATURES * PATCH_LEN)
                .map(|_| rng.random_range(-limit..limit))
                .collect(),
            bias: vec![0.0; FEATURES],
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        BackboneParams {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub(crate) fn check_shapes(&self) -> bool {
        self.weights.len() == FEATURES * PATCH_LEN && self.bias.len() == FEATURES
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Vec<f64>; 2] {
        [&mut self.weights, &mut self.bias]
    }

    pub(crate) fn forward(&self, image: &ImageTensor) -> FeatureMap {
        let (ih, iw) = (image.height(), image.width());
        let (h, w) = (map_side(ih), map_side(iw));
        let px = image.as_slice();
        let mut data = vec![0.0; h * w * FEATURES];
        let mut patch = [0.0; PATCH_LEN];
        for cy in 0..h {
            for cx in 0..w {
                for (i, &off) in patch_offsets(ih, iw, cy, cx).iter().enumerate() {
                    for c in 0..CHANNELS {
                        patch[i * CHANNELS + c] = px[off + c] - 0.5;
                    }
                }
                let out = &mut data[(cy * w + cx) * FEATURES..][..FEATURES];
                for (f, o) in out.iter_mut().enumerate() {
                    let row = &self.weights[f * PATCH_LEN..][..PATCH_LEN];
                    let a: f64 = row.iter().zip(&patch).map(|(a, b)| a * b).sum();
                    *o = (a + self.bias[f]).tanh();
                }
            }
        }
        FeatureMap {
            height: h,
            width: w,
            data,
        }
    }

    /// Backpropagates `d_map`. Adds parameter gradients into `grads` and the
    /// pixel gradient into `d_image` when given.
    pub(crate) fn backward(
        &self,
        image: &ImageTensor,
        map: &FeatureMap,
        d_map: &[f64],
        mut grads: Option<&mut BackboneParams>,
        mut d_image: Option<&mut [f64]>,
    ) {
        let (ih, iw) = (image.height(), image.width());
        let px = image.as_slice();
        for cy in 0..map.height {
            for cx in 0..map.width {
                let cell = (cy * map.width + cx) * FEATURES;
                let offsets = patch_offsets(ih, iw, cy, cx);
                for f in 0..FEATURES {
                    let t = map.data[cell + f];
                    let da = d_map[cell + f] * (1.0 - t * t);
                    if da == 0.0 {
                        continue;
                    }
                    let row = &self.weights[f * PATCH_LEN..][..PATCH_LEN];
                    if let Some(d) = d_image.as_deref_mut() {
                        for (i, &off) in offsets.iter().enumerate() {
                            for c in 0..CHANNELS {
                                d[off + c] += da * row[i * CHANNELS + c];
                            }
                        }
                    }
                    if let Some(g) = grads.as_deref_mut() {
                        g.bias[f] += da;
                        let grow = &mut g.weights[f * PATCH_LEN..][..PATCH_LEN];
                        for (i, &off) in offsets.iter().enumerate() {
                            for c in 0..CHANNELS {
                                grow[i * CHANNELS + c] += da * (px[off + c] - 0.5);
                            }
                        }
                    }
                }
            }
        }
    }
}
