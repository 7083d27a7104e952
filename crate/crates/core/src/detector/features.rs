//! Sliding-window features for the objectness stage.
//!
//! Features come from the image averaged over `CELL x CELL` blocks, which
//! keeps the ranking of windows stable under small pixel-level changes.
//! Everything is computed from summed-area tables over that block image, so
//! scoring every window costs a constant amount per window. Window corners
//! and sides must be multiples of `CELL`.

use crate::geometry::BoxGeometry;
use crate::image::{ImageTensor, CHANNELS};

pub(crate) const CELL: usize = 4;

pub(crate) const FEATURE_COUNT: usize = 8;

/// Summed-area table with a zero row and column prepended.
struct Integral {
    width: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn build(height: usize, width: usize, value: impl Fn(usize, usize) -> f64) -> Self {
        let stride = width + 1;
        let mut sums = vec![0.0; (height + 1) * stride];
        for y in 0..height {
            let mut row = 0.0;
            for x in 0..width {
                row += value(y, x);
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Integral { width, sums }
    }

    /// Sum over `[x0, x1) x [y0, y1)`.
    #[inline]
    fn rect(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let s = self.width + 1;
        self.sums[y1 * s + x1] - self.sums[y0 * s + x1] - self.sums[y1 * s + x0]
            + self.sums[y0 * s + x0]
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    fn area(&self) -> f64 {
        ((self.x1 - self.x0) * (self.y1 - self.y0)) as f64
    }
}

/// Per-image tables needed to featurize any window.
pub(crate) struct WindowFeaturizer {
    height: usize,
    width: usize,
    edge: Integral,
    color: [Integral; 3],
    energy: Integral,
    edge_scale: f64,
    color_scale: f64,
}

impl WindowFeaturizer {
    pub(crate) fn new(image: &ImageTensor) -> Self {
        let (h, w) = (image.height().div_ceil(CELL), image.width().div_ceil(CELL));
        let mut blocks = vec![0.0; h * w * CHANNELS];
        let mut counts = vec![0.0; h * w];
        for y in 0..image.height() {
            for x in 0..image.width() {
                let b = (y / CELL) * w + x / CELL;
                counts[b] += 1.0;
                for c in 0..CHANNELS {
                    blocks[b * CHANNELS + c] += image.get(y, x, c);
                }
            }
        }
        for (b, n) in counts.iter().enumerate() {
            for c in 0..CHANNELS {
                blocks[b * CHANNELS + c] /= n;
            }
        }
        let at = |y: usize, x: usize, c: usize| blocks[(y * w + x) * CHANNELS + c];
        let edge_at = |y: usize, x: usize| {
            let mut e = 0.0;
            for c in 0..CHANNELS {
                let v = at(y, x, c);
                if x + 1 < w {
                    e += (at(y, x + 1, c) - v).abs();
                }
                if y + 1 < h {
                    e += (at(y + 1, x, c) - v).abs();
                }
            }
            e
        };
        let edge = Integral::build(h, w, edge_at);
        let color = [0, 1, 2].map(|c| Integral::build(h, w, |y, x| at(y, x, c)));
        let energy = Integral::build(h, w, |y, x| {
            (0..CHANNELS).map(|c| at(y, x, c).powi(2)).sum::<f64>()
        });

        let n = (h * w) as f64;
        let edge_mean = edge.rect(0, 0, w, h) / n;
        let mean_sq: f64 = (0..3)
            .map(|c| (color[c].rect(0, 0, w, h) / n).powi(2))
            .sum();
        let var = (energy.rect(0, 0, w, h) / n - mean_sq).max(0.0);

        WindowFeaturizer {
            height: h,
            width: w,
            edge,
            color,
            energy,
            edge_scale: 1.0 / (edge_mean + 1e-4),
            color_scale: 1.0 / (var.sqrt() + 1e-3),
        }
    }

    fn mean_rgb(&self, r: Rect) -> [f64; 3] {
        let a = r.area();
        [0, 1, 2].map(|c| self.color[c].rect(r.x0, r.y0, r.x1, r.y1) / a)
    }

    fn ring_mean_rgb(&self, outer: Rect, inner: Rect) -> ([f64; 3], f64) {
        let a = outer.area() - inner.area();
        let m = [0, 1, 2].map(|c| {
            (self.color[c].rect(outer.x0, outer.y0, outer.x1, outer.y1)
                - self.color[c].rect(inner.x0, inner.y0, inner.x1, inner.y1))
                / a
        });
        (m, a)
    }

    fn spread(&self, sum_energy: f64, mean: [f64; 3], area: f64) -> f64 {
        let e = sum_energy / area;
        (e - mean.iter().map(|m| m * m).sum::<f64>())
            .max(0.0)
            .sqrt()
    }

    /// Features of the square window with top-left `(x0, y0)` and side
    /// `size`, all in pixels.
    pub(crate) fn features(&self, x0: usize, y0: usize, size: usize) -> [f64; FEATURE_COUNT] {
        debug_assert!(
            x0.is_multiple_of(CELL) && y0.is_multiple_of(CELL) && size.is_multiple_of(CELL)
        );
        let (x0, y0, size) = (x0 / CELL, y0 / CELL, size / CELL);
        let win = Rect {
            x0,
            y0,
            x1: x0 + size,
            y1: y0 + size,
        };
        let inset = (size / 6).max(1);
        let inner = Rect {
            x0: x0 + inset,
            y0: y0 + inset,
            x1: x0 + size - inset,
            y1: y0 + size - inset,
        };
        let outer = Rect {
            x0: x0.saturating_sub(inset),
            y0: y0.saturating_sub(inset),
            x1: (x0 + size + inset).min(self.width),
            y1: (y0 + size + inset).min(self.height),
        };

        let e_win = self.edge.rect(win.x0, win.y0, win.x1, win.y1);
        let e_inner = self.edge.rect(inner.x0, inner.y0, inner.x1, inner.y1);
        let e_outer = self.edge.rect(outer.x0, outer.y0, outer.x1, outer.y1);
        let band = (e_win - e_inner).max(0.0) / (win.area() - inner.area()) * self.edge_scale;
        let interior = e_inner / inner.area() * self.edge_scale;
        let ring_area = outer.area() - win.area();
        let ring = if ring_area > 0.0 {
            (e_outer - e_win).max(0.0) / ring_area * self.edge_scale
        } else {
            0.0
        };

        let m_inner = self.mean_rgb(inner);
        let (m_ring, color_ring_area, std_ring) = if ring_area > 0.0 {
            let (m, a) = self.ring_mean_rgb(outer, win);
            let en = self.energy.rect(outer.x0, outer.y0, outer.x1, outer.y1)
                - self.energy.rect(win.x0, win.y0, win.x1, win.y1);
            (m, a, self.spread(en, m, a))
        } else {
            (m_inner, 0.0, 0.0)
        };
        let contrast = if color_ring_area > 0.0 {
            m_inner
                .iter()
                .zip(&m_ring)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
                * self.color_scale
        } else {
            0.0
        };
        let std_inner = self.spread(
            self.energy.rect(inner.x0, inner.y0, inner.x1, inner.y1),
            m_inner,
            inner.area(),
        ) * self.color_scale;

        [
            band,
            interior,
            ring,
            contrast,
            std_inner,
            std_ring * self.color_scale,
            band - ring,
            (band * contrast).sqrt(),
        ]
    }
}

/// Every square window of the configured sizes at the configured stride.
pub(crate) fn window_grid(
    height: usize,
    width: usize,
    sizes: &[usize],
    stride: usize,
) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for &s in sizes {
        if s > width || s > height {
            continue;
        }
        for y0 in (0..=height - s).step_by(stride) {
            for x0 in (0..=width - s).step_by(stride) {
                out.push((x0, y0, s));
            }
        }
    }
    out
}

pub(crate) fn window_box(x0: usize, y0: usize, size: usize) -> BoxGeometry {
    BoxGeometry {
        x_min: x0 as f64,
        y_min: y0 as f64,
        x_max: (x0 + size) as f64,
        y_max: (y0 + size) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integral_rect_matches_direct_sum() {
        let vals = |y: usize, x: usize| ((y * 7 + x * 3) % 11) as f64;
        let t = Integral::build(9, 13, vals);
        let mut direct = 0.0;
        for y in 2..7 {
            for x in 3..10 {
                direct += vals(y, x);
            }
        }
        assert_eq!(t.rect(3, 2, 10, 7), direct);
    }

    #[test]
    fn grid_counts() {
        let g = window_grid(32, 32, &[16, 40], 4);
        assert_eq!(g.len(), 5 * 5);
        assert!(g.iter().all(|&(x, y, s)| x + s <= 32 && y + s <= 32));
    }

    #[test]
    fn tight_window_has_stronger_band_than_offset_window() {
        let img = ImageTensor::from_fn(64, 64, |y, x| {
            if (16..40).contains(&y) && (16..40).contains(&x) {
                [0.9, 0.1, 0.1]
            } else {
                [0.4, 0.4, 0.4]
            }
        })
        .unwrap();
        let f = WindowFeaturizer::new(&img);
        let tight = f.features(16, 16, 24);
        let off = f.features(32, 32, 24);
        assert!(tight[0] > off[0]);
        assert!(tight[3] > off[3]);
    }
}
