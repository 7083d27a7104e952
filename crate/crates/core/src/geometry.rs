use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates. Pixel `(x, y)` covers
/// `[x, x + 1) x [y, y + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxGeometry {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoxGeometry {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BoxGeometry {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    /// COCO-style `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::invalid(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &BoxGeometry) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BoxGeometry) -> f64 {
        let inter = self.intersection(other);
        if inter == 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    /// Whether the box lies inside a `width x height` image.
    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= width as f64
            && self.y_max <= height as f64
    }

    /// Intersects with the image rectangle; `None` if nothing remains.
    pub fn clipped(&self, width: usize, height: usize) -> Option<BoxGeometry> {
        let b = BoxGeometry {
            x_min: self.x_min.max(0.0),
            y_min: self.y_min.max(0.0),
            x_max: self.x_max.min(width as f64),
            y_max: self.y_max.min(height as f64),
        };
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }
}

/// Greedy non-maximum suppression.
///
/// `order` must already be sorted by descending score. Returns the kept
/// positions (indices into `boxes`) in that order.
pub fn greedy_nms(boxes: &[BoxGeometry], order: &[usize], iou_threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for &i in order {
        if kept
            .iter()
            .all(|&k| boxes[k].iou(&boxes[i]) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

/// Indices of `scores` sorted descending; ties keep ascending index order.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BoxGeometry {
        BoxGeometry::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&b(10.0, 0.0, 20.0, 10.0)), 0.0);
        let half = a.iou(&b(5.0, 0.0, 15.0, 10.0));
        assert!((half - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_rejected() {
        assert!(BoxGeometry::new(1.0, 0.0, 1.0, 4.0).is_err());
        assert!(BoxGeometry::new(0.0, 0.0, f64::NAN, 4.0).is_err());
    }

    #[test]
    fn nms_keeps_highest_of_cluster() {
        let boxes = [
            b(0.0, 0.0, 10.0, 10.0),
            b(1.0, 0.0, 11.0, 10.0),
            b(30.0, 30.0, 40.0, 40.0),
        ];
        let order = descending_order(&[0.5, 0.9, 0.7]);
        assert_eq!(order, vec![1, 2, 0]);
        assert_eq!(greedy_nms(&boxes, &order, 0.5), vec![1, 2]);
    }

    #[test]
    fn clipping() {
        let c = b(-5.0, 2.0, 8.0, 30.0).clipped(20, 20).unwrap();
        assert_eq!(c, b(0.0, 2.0, 8.0, 20.0));
        assert!(b(25.0, 0.0, 30.0, 5.0).clipped(20, 20).is_none());
    }
}
