//! Two-stage detector contract.
//!
//! A detector first proposes candidate regions, then scores every region
//! against `K` categories. The attack only touches the second stage: it holds
//! proposals fixed and differentiates the classification loss with respect to
//! the pixels.

mod backbone;
mod features;
mod head;
pub mod toy;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{descending_order, greedy_nms, BoxGeometry};
use crate::image::{ImageGradient, ImageTensor};

pub use toy::{ToyDetector, ToyDetectorConfig, CHECKPOINT_VERSION};
pub use train::{train_toy_detector, TrainConfig, TrainingLog};

/// IoU above which [`detect`] suppresses the lower-scoring of two boxes.
pub const DETECTION_NMS_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub geometry: BoxGeometry,
    pub objectness: f64,
}

/// `m x K` per-proposal category distribution. Rows sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    scores: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, scores: Vec<f64>) -> Result<Self> {
        if cols < 2 {
            return Err(Error::invalid(
                "a score matrix needs at least two categories",
            ));
        }
        if scores.len() != rows * cols {
            return Err(Error::invalid(format!(
                "score buffer has {} entries, expected {rows}x{cols}",
                scores.len()
            )));
        }
        Ok(ScoreMatrix { rows, cols, scores })
    }

    pub fn empty(cols: usize) -> Self {
        ScoreMatrix {
            rows: 0,
            cols,
            scores: Vec::new(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[f64] {
        &self.scores[j * self.cols..(j + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.scores[j * self.cols + k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }

    /// Largest entry over every row, restricted to the columns accepted by
    /// `include`. Returns 0 for an empty matrix.
    pub fn max_where(&self, include: impl Fn(usize) -> bool) -> f64 {
        let mut best = 0.0f64;
        for j in 0..self.rows {
            for (k, &s) in self.row(j).iter().enumerate() {
                if include(k) && s > best {
                    best = s;
                }
            }
        }
        best
    }

    /// Mean over rows of `-ln p[target]`.
    pub fn mean_cross_entropy(&self, target: usize) -> f64 {
        if self.rows == 0 {
            return 0.0;
        }
        let total: f64 = (0..self.rows)
            .map(|j| -self.get(j, target).max(f64::MIN_POSITIVE).ln())
            .sum();
        total / self.rows as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub geometry: BoxGeometry,
    pub category_index: usize,
    pub score: f64,
}

/// A two-stage detector.
///
/// Implementations must be deterministic and reentrant: the same inputs give
/// bit-identical outputs, and a shared reference may be used from several
/// threads at once.
pub trait Detector: Send + Sync {
    /// Names of all `K` score columns, background included if the model has one.
    fn category_names(&self) -> &[String];

    /// Column holding the "no object" score, if any. It never yields detections
    /// and is ignored by the stopping rules.
    fn background(&self) -> Option<usize>;

    /// Stage one: candidate regions sorted by descending objectness.
    fn propose(&self, image: &ImageTensor) -> Result<Vec<Proposal>>;

    /// Stage two: per-proposal category distribution. Never re-proposes.
    fn classify(&self, image: &ImageTensor, proposals: &[Proposal]) -> Result<ScoreMatrix>;

    /// Mean cross-entropy of every proposal's row against `target_label`,
    /// together with its exact derivative with respect to every pixel value.
    fn loss_and_gradient(
        &self,
        image: &ImageTensor,
        proposals: &[Proposal],
        target_label: usize,
    ) -> Result<(f64, ImageGradient)>;

    fn category_count(&self) -> usize {
        self.category_names().len()
    }

    fn category_index(&self, name: &str) -> Option<usize> {
        self.category_names().iter().position(|n| n == name)
    }

    fn is_object_category(&self, k: usize) -> bool {
        k < self.category_count() && Some(k) != self.background()
    }
}

impl<D: Detector + ?Sized> Detector for &D {
    fn category_names(&self) -> &[String] {
        (**self).category_names()
    }
    fn background(&self) -> Option<usize> {
        (**self).background()
    }
    fn propose(&self, image: &ImageTensor) -> Result<Vec<Proposal>> {
        (**self).propose(image)
    }
    fn classify(&self, image: &ImageTensor, proposals: &[Proposal]) -> Result<ScoreMatrix> {
        (**self).classify(image, proposals)
    }
    fn loss_and_gradient(
        &self,
        image: &ImageTensor,
        proposals: &[Proposal],
        target_label: usize,
    ) -> Result<(f64, ImageGradient)> {
        (**self).loss_and_gradient(image, proposals, target_label)
    }
}

/// One candidate per proposal whose row maximum (lowest index on ties) is an
/// object category. Rows won by the background column yield nothing. No
/// thresholding.
pub fn candidates(
    proposals: &[Proposal],
    scores: &ScoreMatrix,
    background: Option<usize>,
) -> Vec<Detection> {
    debug_assert_eq!(proposals.len(), scores.rows());
    proposals
        .iter()
        .enumerate()
        .filter_map(|(j, p)| {
            let row = scores.row(j);
            let category_index = argmax(row);
            (Some(category_index) != background).then(|| Detection {
                geometry: p.geometry,
                category_index,
                score: row[category_index],
            })
        })
        .collect()
}

/// Keeps candidates scoring at least `threshold`.
pub fn apply_threshold(candidates: &[Detection], threshold: f64) -> Vec<Detection> {
    candidates
        .iter()
        .filter(|d| d.score >= threshold)
        .copied()
        .collect()
}

/// Greedy NMS at [`DETECTION_NMS_IOU`], output sorted by descending score.
pub fn suppress(detections: &[Detection]) -> Vec<Detection> {
    let scores: Vec<f64> = detections.iter().map(|d| d.score).collect();
    let boxes: Vec<BoxGeometry> = detections.iter().map(|d| d.geometry).collect();
    let order = descending_order(&scores);
    greedy_nms(&boxes, &order, DETECTION_NMS_IOU)
        .into_iter()
        .map(|i| detections[i])
        .collect()
}

/// Thresholded, suppressed detections from an already computed score matrix.
pub fn detections_from_scores(
    proposals: &[Proposal],
    scores: &ScoreMatrix,
    background: Option<usize>,
    threshold: f64,
) -> Vec<Detection> {
    suppress(&apply_threshold(
        &candidates(proposals, scores, background),
        threshold,
    ))
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = k;
        }
    }
    best
}

pub(crate) fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "detection threshold {threshold} must lie in (0, 1)"
        )))
    }
}

/// Full pipeline: propose, classify, per-proposal argmax, threshold, NMS.
pub fn detect<D: Detector + ?Sized>(
    detector: &D,
    image: &ImageTensor,
    threshold: f64,
) -> Result<Vec<Detection>> {
    check_threshold(threshold)?;
    let proposals = detector.propose(image)?;
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let scores = detector.classify(image, &proposals)?;
    Ok(detections_from_scores(
        &proposals,
        &scores,
        detector.background(),
        threshold,
    ))
}

/// Pre-NMS candidates for every proposal, unthresholded.
pub fn detect_candidates<D: Detector + ?Sized>(
    detector: &D,
    image: &ImageTensor,
) -> Result<Vec<Detection>> {
    let proposals = detector.propose(image)?;
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let scores = detector.classify(image, &proposals)?;
    Ok(candidates(&proposals, &scores, detector.background()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proposal(x: f64) -> Proposal {
        Proposal {
            geometry: BoxGeometry::new(x, 0.0, x + 10.0, 10.0).unwrap(),
            objectness: 0.9,
        }
    }

    #[test]
    fn argmax_threshold_example() {
        let props = [proposal(0.0)];
        let s = ScoreMatrix::new(1, 3, vec![0.05, 0.80, 0.15]).unwrap();
        let dets = detections_from_scores(&props, &s, None, 0.3);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].category_index, 1);
        assert_eq!(dets[0].score, 0.80);
    }

    #[test]
    fn below_threshold_gives_nothing() {
        let props = [proposal(0.0), proposal(40.0)];
        let s = ScoreMatrix::new(2, 4, vec![0.25, 0.25, 0.25, 0.25, 0.4, 0.2, 0.2, 0.2]).unwrap();
        // column 0 is background; every object score is < 0.3
        assert!(detections_from_scores(&props, &s, Some(0), 0.3).is_empty());
        // without a background column the 0.4 entry survives
        assert_eq!(detections_from_scores(&props, &s, None, 0.3).len(), 1);
    }

    #[test]
    fn background_rows_yield_nothing() {
        let props = [proposal(0.0)];
        // an object column clears the threshold but background wins the row
        let s = ScoreMatrix::new(1, 3, vec![0.6, 0.35, 0.05]).unwrap();
        assert!(candidates(&props, &s, Some(0)).is_empty());
        assert!(detections_from_scores(&props, &s, Some(0), 0.3).is_empty());
        assert_eq!(candidates(&props, &s, None)[0].category_index, 0);
    }

    #[test]
    fn ties_pick_lowest_index() {
        let props = [proposal(0.0)];
        let s = ScoreMatrix::new(1, 3, vec![0.2, 0.4, 0.4]).unwrap();
        let c = candidates(&props, &s, Some(0));
        assert_eq!(c[0].category_index, 1);
        let s = ScoreMatrix::new(1, 3, vec![0.4, 0.4, 0.2]).unwrap();
        assert!(candidates(&props, &s, Some(0)).is_empty());
    }

    #[test]
    fn suppression_orders_by_score() {
        let props = [proposal(0.0), proposal(1.0), proposal(50.0)];
        let s = ScoreMatrix::new(3, 2, vec![0.4, 0.6, 0.1, 0.9, 0.3, 0.7]).unwrap();
        let dets = detections_from_scores(&props, &s, Some(0), 0.5);
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        assert_eq!(scores, vec![0.9, 0.7]);
    }

    #[test]
    fn cross_entropy_and_max() {
        let s = ScoreMatrix::new(2, 2, vec![0.5, 0.5, 0.25, 0.75]).unwrap();
        let ce = s.mean_cross_entropy(1);
        assert!((ce - (-(0.5f64.ln()) - 0.75f64.ln()) / 2.0).abs() < 1e-15);
        assert_eq!(s.max_where(|k| k != 0), 0.75);
        assert_eq!(s.max_where(|k| k == 0), 0.5);
        assert_eq!(ScoreMatrix::empty(4).max_where(|_| true), 0.0);
    }

    #[test]
    fn rejects_bad_threshold() {
        assert!(check_threshold(0.0).is_err());
        assert!(check_threshold(1.0).is_err());
        assert!(check_threshold(0.3).is_ok());
    }
}
