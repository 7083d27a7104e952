//! Desk-scale two-stage detector for synthetic shape scenes.
//!
//! Stage one scores every square window of a fixed grid with a logistic
//! model over edge and color-contrast features, then keeps the best windows
//! after a loose NMS. Stage two embeds the whole image once (`backbone.rs`)
//! and classifies each proposal's crop of that map (`head.rs`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::backbone::{BackboneParams, FeatureMap, FEATURES};
use super::features::{window_box, window_grid, WindowFeaturizer, CELL, FEATURE_COUNT};
use super::head::{CropPlan, HeadParams};
use super::{Detector, Proposal, ScoreMatrix};
use crate::error::{Error, Result};
use crate::geometry::BoxGeometry;
use crate::image::{ImageGradient, ImageTensor};

/// Format version written into every checkpoint.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDetectorConfig {
    /// Side lengths of the square sliding windows.
    pub window_sizes: Vec<usize>,
    pub stride: usize,
    pub max_proposals: usize,
    /// Overlap above which a lower-ranked window is dropped from the proposals.
    pub proposal_nms_iou: f64,
    /// Margin added around each proposal before cropping, as a fraction of its side.
    pub crop_context: f64,
}

impl ToyDetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_sizes.is_empty()
            || self.stride == 0
            || !self.stride.is_multiple_of(CELL)
            || self.window_sizes.iter().any(|s| s % CELL != 0 || *s == 0)
        {
            return Err(Error::invalid(format!(
                "window sizes and stride must be positive multiples of {CELL}"
            )));
        }
        if self.max_proposals == 0 {
            return Err(Error::invalid("max_proposals must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.crop_context)
            || !(0.0..=1.0).contains(&self.proposal_nms_iou)
        {
            return Err(Error::invalid(
                "crop_context and proposal_nms_iou must lie in [0, 1]",
            ));
        }
        Ok(())
    }
}

impl Default for ToyDetectorConfig {
    fn default() -> Self {
        ToyDetectorConfig {
            window_sizes: (0..9).map(|i| 56 + 8 * i).collect(),
            stride: 4,
            max_proposals: 64,
            proposal_nms_iou: 0.7,
            crop_context: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct ObjectnessModel {
    pub mean: [f64; FEATURE_COUNT],
    pub scale: [f64; FEATURE_COUNT],
    pub weights: [f64; FEATURE_COUNT],
    pub bias: f64,
}

impl ObjectnessModel {
    pub(crate) fn logit(&self, f: &[f64; FEATURE_COUNT]) -> f64 {
        let mut acc = self.bias;
        for (i, v) in f.iter().enumerate() {
            acc += self.weights[i] * (v - self.mean[i]) * self.scale[i];
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDetector {
    category_names: Vec<String>,
    config: ToyDetectorConfig,
    pub(crate) objectness: ObjectnessModel,
    pub(crate) backbone: BackboneParams,
    pub(crate) head: HeadParams,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    category_names: Vec<String>,
    background: usize,
    config: ToyDetectorConfig,
    objectness: ObjectnessModel,
    backbone: BackboneParams,
    head: HeadParams,
}

/// Column 0 of every toy detector is the background class.
pub const BACKGROUND: usize = 0;

static BUNDLED: &str = include_str!("../../assets/toy_detector.json");

impl ToyDetector {
    pub(crate) fn from_parts(
        category_names: Vec<String>,
        config: ToyDetectorConfig,
        objectness: ObjectnessModel,
        backbone: BackboneParams,
        head: HeadParams,
    ) -> Self {
        ToyDetector {
            category_names,
            config,
            objectness,
            backbone,
            head,
        }
    }

    /// The detector shipped with the crate, trained on the default synthetic
    /// corpus (see `assets/toy_detector.log`).
    pub fn bundled() -> ToyDetector {
        Self::from_json(BUNDLED).expect("bundled checkpoint is valid")
    }

    pub fn config(&self) -> &ToyDetectorConfig {
        &self.config
    }

    /// Same weights with different inference settings. The window grid must
    /// keep the trained cell alignment.
    pub fn with_config(mut self, config: ToyDetectorConfig) -> Result<Self> {
        config.validate()?;
        self.config = config;
        Ok(self)
    }

    /// Smallest side an input image must have.
    pub fn min_side(&self) -> usize {
        self.config.window_sizes.iter().copied().min().unwrap_or(1)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&Checkpoint {
            format_version: CHECKPOINT_VERSION,
            category_names: self.category_names.clone(),
            background: BACKGROUND,
            config: self.config.clone(),
            objectness: self.objectness.clone(),
            backbone: self.backbone.clone(),
            head: self.head.clone(),
        })
        .expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<ToyDetector> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::invalid("checkpoint has no format_version"))?;
        if found != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::VersionMismatch {
                found: found as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ck: Checkpoint = serde_json::from_value(value)?;
        if ck.background != BACKGROUND
            || ck.category_names.len() != ck.head.categories
            || ck.category_names.len() < 2
            || !ck.head.check_shapes()
            || !ck.backbone.check_shapes()
        {
            return Err(Error::invalid("checkpoint tensors are inconsistent"));
        }
        ck.config.validate()?;
        Ok(ToyDetector::from_parts(
            ck.category_names,
            ck.config,
            ck.objectness,
            ck.backbone,
            ck.head,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ToyDetector> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        let min = self.min_side();
        if image.height() < min || image.width() < min {
            return Err(Error::invalid(format!(
                "image {}x{} is smaller than the detector minimum {min}x{min}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    fn crop_plans(&self, image: &ImageTensor, proposals: &[Proposal]) -> Result<Vec<CropPlan>> {
        let (map_h, map_w) = self.map_size(image);
        proposals
            .iter()
            .map(|p| {
                p.geometry.validate()?;
                if !p.geometry.within(image.width(), image.height()) {
                    return Err(Error::invalid(format!(
                        "proposal {:?} extends outside the {}x{} image",
                        p.geometry,
                        image.width(),
                        image.height()
                    )));
                }
                Ok(CropPlan::new(
                    &p.geometry,
                    self.config.crop_context,
                    map_w,
                    map_h,
                ))
            })
            .collect()
    }

    fn map_size(&self, image: &ImageTensor) -> (usize, usize) {
        let side = |n: usize| n.div_ceil(super::backbone::PATCH);
        (side(image.height()), side(image.width()))
    }

    pub(crate) fn features(&self, image: &ImageTensor) -> FeatureMap {
        self.backbone.forward(image)
    }

    /// Windows with their objectness logits, sorted best first (before NMS).
    pub(crate) fn ranked_windows(&self, image: &ImageTensor) -> Vec<(BoxGeometry, f64)> {
        let feat = WindowFeaturizer::new(image);
        let grid = window_grid(
            image.height(),
            image.width(),
            &self.config.window_sizes,
            self.config.stride,
        );
        let mut scored: Vec<(BoxGeometry, f64)> = grid
            .into_iter()
            .map(|(x0, y0, s)| {
                let logit = self.objectness.logit(&feat.features(x0, y0, s));
                (window_box(x0, y0, s), logit)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        scored
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Detector for ToyDetector {
    fn category_names(&self) -> &[String] {
        &self.category_names
    }

    fn background(&self) -> Option<usize> {
        Some(BACKGROUND)
    }

    fn propose(&self, image: &ImageTensor) -> Result<Vec<Proposal>> {
        self.check_image(image)?;
        let mut kept: Vec<Proposal> = Vec::with_capacity(self.config.max_proposals);
        for (geometry, logit) in self.ranked_windows(image) {
            if kept.len() == self.config.max_proposals {
                break;
            }
            if kept
                .iter()
                .all(|k| k.geometry.iou(&geometry) <= self.config.proposal_nms_iou)
            {
                kept.push(Proposal {
                    geometry,
                    objectness: sigmoid(logit),
                });
            }
        }
        Ok(kept)
    }

    fn classify(&self, image: &ImageTensor, proposals: &[Proposal]) -> Result<ScoreMatrix> {
        let k = self.category_count();
        if proposals.is_empty() {
            return Ok(ScoreMatrix::empty(k));
        }
        let plans = self.crop_plans(image, proposals)?;
        let map = self.features(image);
        let mut scores = Vec::with_capacity(proposals.len() * k);
        for plan in &plans {
            scores.extend(self.head.forward(&plan.extract(&map)).probs);
        }
        ScoreMatrix::new(proposals.len(), k, scores)
    }

    fn loss_and_gradient(
        &self,
        image: &ImageTensor,
        proposals: &[Proposal],
        target_label: usize,
    ) -> Result<(f64, ImageGradient)> {
        if proposals.is_empty() {
            return Err(Error::invalid(
                "loss_and_gradient needs at least one proposal",
            ));
        }
        if target_label >= self.category_count() {
            return Err(Error::invalid(format!(
                "target label {target_label} out of range for {} categories",
                self.category_count()
            )));
        }
        let plans = self.crop_plans(image, proposals)?;
        let map = self.features(image);
        let m = proposals.len() as f64;
        let mut d_map = vec![0.0; map.height * map.width * FEATURES];
        let mut loss = 0.0;
        for plan in &plans {
            let cache = self.head.forward(&plan.extract(&map));
            loss -= cache.probs[target_label].max(f64::MIN_POSITIVE).ln();
            let mut d_logits: Vec<f64> = cache.probs.iter().map(|p| p / m).collect();
            d_logits[target_label] -= 1.0 / m;
            let d_crop = self.head.backward(&cache, &d_logits, None);
            plan.scatter(&d_crop, map.width, &mut d_map);
        }
        let mut grad = ImageGradient::zeros_like(image);
        self.backbone
            .backward(image, &map, &d_map, None, Some(&mut grad.data));
        Ok((loss / m, grad))
    }
}
