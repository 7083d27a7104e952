//! Privacy and image-quality metrics.
//!
//! Success and leakage rates are computed over per-image [`ImageOutcome`]s.
//! Rates whose denominator is zero come back as 0 with a flag instead of an
//! error, so a batch over object-free images still aggregates.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attack::AttackMode;
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, CHANNELS};
use crate::scene::Annotation;

/// When a detection counts as a ground-truth object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchCriterion {
    pub iou_threshold: f64,
    pub require_category_match: bool,
}

impl Default for MatchCriterion {
    fn default() -> Self {
        MatchCriterion {
            iou_threshold: 0.5,
            require_category_match: true,
        }
    }
}

impl MatchCriterion {
    pub fn validate(&self) -> Result<()> {
        if self.iou_threshold > 0.0 && self.iou_threshold < 1.0 {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "match IoU threshold {} must lie in (0, 1)",
                self.iou_threshold
            )))
        }
    }
}

/// Greedy one-to-one matching. Detections are visited by descending score
/// (ties keep input order) and each takes the unused ground-truth box with
/// the highest qualifying IoU. Returns `(detection, ground_truth)` index pairs
/// in visiting order.
pub fn match_boxes(
    detections: &[Detection],
    ground_truth: &[Annotation],
    criterion: &MatchCriterion,
) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut used = vec![false; ground_truth.len()];
    let mut pairs = Vec::new();
    for d in order {
        let det = &detections[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truth.iter().enumerate() {
            if used[g]
                || (criterion.require_category_match && gt.category_index != det.category_index)
            {
                continue;
            }
            let iou = det.geometry.iou(&gt.geometry);
            if iou >= criterion.iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
            pairs.push((d, g));
        }
    }
    pairs
}

/// Detections and ground truth for one processed image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageOutcome {
    pub image_id: u64,
    pub mode: AttackMode,
    pub original_detections: Vec<Detection>,
    pub adversarial_detections: Vec<Detection>,
    /// Present iff `mode` is sensitive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitive_categories: Option<BTreeSet<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<Annotation>>,
}

impl ImageOutcome {
    pub fn validate(&self) -> Result<()> {
        let sensitive = self.mode == AttackMode::Sensitive;
        if sensitive != self.sensitive_categories.is_some() {
            return Err(Error::invalid(format!(
                "image {}: sensitive categories must be given exactly in sensitive mode",
                self.image_id
            )));
        }
        Ok(())
    }

    fn sensitive(&self) -> &BTreeSet<usize> {
        static EMPTY: BTreeSet<usize> = BTreeSet::new();
        self.sensitive_categories.as_ref().unwrap_or(&EMPTY)
    }

    fn sensitive_truth(&self) -> Option<Vec<Annotation>> {
        let set = self.sensitive();
        self.ground_truth.as_ref().map(|gt| {
            gt.iter()
                .filter(|a| set.contains(&a.category_index))
                .copied()
                .collect()
        })
    }

    /// True when no adversarial detection matches a sensitive ground-truth
    /// box. Without ground truth, true when no adversarial detection carries
    /// a sensitive category.
    pub fn sensitive_hidden(&self, criterion: &MatchCriterion) -> bool {
        match self.sensitive_truth() {
            Some(truth) => match_boxes(&self.adversarial_detections, &truth, criterion).is_empty(),
            None => !self
                .adversarial_detections
                .iter()
                .any(|d| self.sensitive().contains(&d.category_index)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricFlag {
    /// The denominator was zero; the value is reported as 0.
    DegenerateDenominator,
    /// Some images lacked ground truth and were judged by category presence.
    CategoryPresenceFallback,
}

/// A ratio together with its counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub numerator: usize,
    pub denominator: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<MetricFlag>,
}

impl Rate {
    pub fn new(numerator: usize, denominator: usize) -> Rate {
        if denominator == 0 {
            Rate {
                value: 0.0,
                numerator,
                denominator,
                flag: Some(MetricFlag::DegenerateDenominator),
            }
        } else {
            Rate {
                value: numerator as f64 / denominator as f64,
                numerator,
                denominator,
                flag: None,
            }
        }
    }
}

fn check_mode(outcomes: &[ImageOutcome], mode: AttackMode) -> Result<()> {
    if let Some(o) = outcomes.iter().find(|o| o.mode != mode) {
        return Err(Error::invalid(format!(
            "image {} has mode {}, expected {mode}",
            o.image_id, o.mode
        )));
    }
    Ok(())
}

/// R_all: share of images with no adversarial detection at all.
pub fn success_rate_all(outcomes: &[ImageOutcome]) -> Result<Rate> {
    if outcomes.is_empty() {
        return Err(Error::UndefinedMetric(
            "success rate over zero images".into(),
        ));
    }
    check_mode(outcomes, AttackMode::All)?;
    let hidden = outcomes
        .iter()
        .filter(|o| o.adversarial_detections.is_empty())
        .count();
    Ok(Rate::new(hidden, outcomes.len()))
}

/// R_sen: share of images where every sensitive object is absent or
/// mislabeled.
pub fn success_rate_sensitive(
    outcomes: &[ImageOutcome],
    criterion: &MatchCriterion,
) -> Result<Rate> {
    if outcomes.is_empty() {
        return Err(Error::UndefinedMetric(
            "success rate over zero images".into(),
        ));
    }
    check_mode(outcomes, AttackMode::Sensitive)?;
    let hidden = outcomes
        .iter()
        .filter(|o| o.sensitive_hidden(criterion))
        .count();
    let mut rate = Rate::new(hidden, outcomes.len());
    if outcomes.iter().any(|o| o.ground_truth.is_none()) {
        rate.flag = Some(MetricFlag::CategoryPresenceFallback);
    }
    Ok(rate)
}

/// P_all: adversarial boxes over original boxes, correct or not.
pub fn leakage_all(outcomes: &[ImageOutcome]) -> Result<Rate> {
    check_mode(outcomes, AttackMode::All)?;
    let a = outcomes
        .iter()
        .map(|o| o.adversarial_detections.len())
        .sum();
    let o = outcomes.iter().map(|o| o.original_detections.len()).sum();
    Ok(Rate::new(a, o))
}

fn sensitive_matches(
    detections: &[Detection],
    truth: &[Annotation],
    sensitive: &BTreeSet<usize>,
    criterion: &MatchCriterion,
) -> usize {
    let dets: Vec<Detection> = detections
        .iter()
        .filter(|d| sensitive.contains(&d.category_index))
        .copied()
        .collect();
    match_boxes(&dets, truth, criterion).len()
}

/// P_sen: correctly detected sensitive boxes after the attack over those
/// before it.
pub fn leakage_sensitive(outcomes: &[ImageOutcome], criterion: &MatchCriterion) -> Result<Rate> {
    leakage_sensitive_where(outcomes, criterion, |_| true)
}

/// P_sen restricted to the sensitive categories accepted by `keep`.
pub fn leakage_sensitive_where(
    outcomes: &[ImageOutcome],
    criterion: &MatchCriterion,
    keep: impl Fn(usize) -> bool,
) -> Result<Rate> {
    check_mode(outcomes, AttackMode::Sensitive)?;
    let (mut a, mut o) = (0, 0);
    for out in outcomes {
        let truth = out.sensitive_truth().ok_or_else(|| {
            Error::UndefinedMetric(format!(
                "sensitive leakage needs ground truth; image {} has none",
                out.image_id
            ))
        })?;
        let cats: BTreeSet<usize> = out
            .sensitive()
            .iter()
            .copied()
            .filter(|&c| keep(c))
            .collect();
        let truth: Vec<Annotation> = truth
            .into_iter()
            .filter(|t| cats.contains(&t.category_index))
            .collect();
        a += sensitive_matches(&out.adversarial_detections, &truth, &cats, criterion);
        o += sensitive_matches(&out.original_detections, &truth, &cats, criterion);
    }
    Ok(Rate::new(a, o))
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, peak: f64) -> Result<f64> {
    a.ensure_same_shape(b)
        .map_err(|e| Error::invalid(e.to_string()))?;
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::invalid(format!("PSNR peak {peak} must be positive")));
    }
    let n = a.len() as f64;
    let mse = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    /// Side of the square uniform window.
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 8,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

/// Summed-area table of one channel, zero row and column prepended.
fn integral(width: usize, height: usize, value: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let s = width + 1;
    let mut t = vec![0.0; (height + 1) * s];
    for y in 0..height {
        let mut row = 0.0;
        for x in 0..width {
            row += value(y, x);
            t[(y + 1) * s + x + 1] = t[y * s + x + 1] + row;
        }
    }
    t
}

/// Mean structural similarity over every `window x window` patch at stride
/// 1, computed per channel and averaged. Window statistics use population
/// (divide by `n`) variances.
pub fn ssim(a: &ImageTensor, b: &ImageTensor, params: &SsimParams) -> Result<f64> {
    a.ensure_same_shape(b)
        .map_err(|e| Error::invalid(e.to_string()))?;
    let (h, w, win) = (a.height(), a.width(), params.window);
    if win == 0 || h < win || w < win {
        return Err(Error::invalid(format!(
            "{h}x{w} image is smaller than the {win}x{win} SSIM window"
        )));
    }
    let c1 = (params.k1 * params.peak).powi(2);
    let c2 = (params.k2 * params.peak).powi(2);
    let n = (win * win) as f64;
    let s = w + 1;
    let rect = |t: &[f64], x: usize, y: usize| {
        t[(y + win) * s + x + win] - t[y * s + x + win] - t[(y + win) * s + x] + t[y * s + x]
    };
    let mut total = 0.0;
    for c in 0..CHANNELS {
        let pa = |y, x| a.get(y, x, c);
        let pb = |y, x| b.get(y, x, c);
        let sa = integral(w, h, pa);
        let sb = integral(w, h, pb);
        let saa = integral(w, h, |y, x| pa(y, x) * pa(y, x));
        let sbb = integral(w, h, |y, x| pb(y, x) * pb(y, x));
        let sab = integral(w, h, |y, x| pa(y, x) * pb(y, x));
        for y in 0..=h - win {
            for x in 0..=w - win {
                let ma = rect(&sa, x, y) / n;
                let mb = rect(&sb, x, y) / n;
                let va = rect(&saa, x, y) / n - ma * ma;
                let vb = rect(&sbb, x, y) / n - mb * mb;
                let cov = rect(&sab, x, y) / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    let windows = ((h - win + 1) * (w - win + 1) * CHANNELS) as f64;
    Ok(total / windows)
}

/// Serializes non-finite dB values as the strings `"inf"` and `"-inf"`.
pub mod db_serde {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(D::Error::custom(format!("not a dB value: {t}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxGeometry;

    fn bx(x: f64, y: f64, s: f64) -> BoxGeometry {
        BoxGeometry::new(x, y, x + s, y + s).unwrap()
    }

    fn det(x: f64, cat: usize, score: f64) -> Detection {
        Detection {
            geometry: bx(x, 0.0, 10.0),
            category_index: cat,
            score,
        }
    }

    fn gt(x: f64, cat: usize) -> Annotation {
        Annotation {
            geometry: bx(x, 0.0, 10.0),
            category_index: cat,
        }
    }

    fn all_outcome(orig: usize, adv: usize) -> ImageOutcome {
        ImageOutcome {
            image_id: 1,
            mode: AttackMode::All,
            original_detections: (0..orig).map(|i| det(20.0 * i as f64, 1, 0.9)).collect(),
            adversarial_detections: (0..adv).map(|i| det(20.0 * i as f64, 1, 0.9)).collect(),
            sensitive_categories: None,
            ground_truth: None,
        }
    }

    #[test]
    fn exact_box_matches() {
        let m = match_boxes(
            &[det(0.0, 1, 0.9)],
            &[gt(0.0, 1)],
            &MatchCriterion::default(),
        );
        assert_eq!(m, vec![(0, 0)]);
    }

    #[test]
    fn low_iou_does_not_match() {
        // 10x10 boxes offset so that IoU = 30/130
        let d = Detection {
            geometry: bx(0.0, 0.0, 10.0),
            category_index: 1,
            score: 0.9,
        };
        let g = Annotation {
            geometry: BoxGeometry::new(7.0, 0.0, 17.0, 10.0).unwrap(),
            category_index: 1,
        };
        assert!(match_boxes(&[d], &[g], &MatchCriterion::default()).is_empty());
    }

    #[test]
    fn higher_score_wins_contested_box() {
        let dets = [det(0.0, 1, 0.6), det(1.0, 1, 0.8)];
        let m = match_boxes(&dets, &[gt(0.0, 1)], &MatchCriterion::default());
        assert_eq!(m, vec![(1, 0)]);
    }

    #[test]
    fn category_mismatch_blocks_only_when_required() {
        let mut c = MatchCriterion::default();
        assert!(match_boxes(&[det(0.0, 2, 0.9)], &[gt(0.0, 1)], &c).is_empty());
        c.require_category_match = false;
        assert_eq!(match_boxes(&[det(0.0, 2, 0.9)], &[gt(0.0, 1)], &c).len(), 1);
    }

    #[test]
    fn r_all_counts_empty_outputs() {
        let outs = vec![
            all_outcome(2, 0),
            all_outcome(1, 0),
            all_outcome(3, 1),
            all_outcome(1, 0),
        ];
        assert_eq!(success_rate_all(&outs).unwrap().value, 0.75);
        assert!(matches!(
            success_rate_all(&[]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn p_all_ratio_and_degenerate() {
        let outs = vec![all_outcome(6, 1), all_outcome(4, 0)];
        assert_eq!(leakage_all(&outs).unwrap().value, 0.1);
        let r = leakage_all(&[all_outcome(0, 0)]).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.flag, Some(MetricFlag::DegenerateDenominator));
    }

    fn sensitive_outcome(
        orig: Vec<Detection>,
        adv: Vec<Detection>,
        truth: Vec<Annotation>,
    ) -> ImageOutcome {
        ImageOutcome {
            image_id: 7,
            mode: AttackMode::Sensitive,
            original_detections: orig,
            adversarial_detections: adv,
            sensitive_categories: Some([1].into()),
            ground_truth: Some(truth),
        }
    }

    #[test]
    fn r_sen_and_p_sen_fixtures() {
        let c = MatchCriterion::default();
        let truth = vec![gt(0.0, 1), gt(20.0, 1), gt(40.0, 2)];
        let orig = vec![det(0.0, 1, 0.9), det(20.0, 1, 0.9), det(40.0, 2, 0.9)];
        let leaked = sensitive_outcome(
            orig.clone(),
            vec![det(20.0, 1, 0.5), det(40.0, 2, 0.9)],
            truth.clone(),
        );
        let hidden = sensitive_outcome(orig, vec![det(0.0, 3, 0.5), det(40.0, 2, 0.9)], truth);
        let outs = vec![leaked, hidden];
        assert_eq!(success_rate_sensitive(&outs, &c).unwrap().value, 0.5);
        let p = leakage_sensitive(&outs, &c).unwrap();
        assert_eq!((p.numerator, p.denominator), (1, 4));
        assert_eq!(p.value, 0.25);
    }

    #[test]
    fn image_without_sensitive_objects_counts_as_hidden() {
        let o = sensitive_outcome(
            vec![det(40.0, 2, 0.9)],
            vec![det(40.0, 2, 0.9)],
            vec![gt(40.0, 2)],
        );
        assert_eq!(
            success_rate_sensitive(std::slice::from_ref(&o), &MatchCriterion::default())
                .unwrap()
                .value,
            1.0
        );
        let p = leakage_sensitive(&[o], &MatchCriterion::default()).unwrap();
        assert_eq!(p.flag, Some(MetricFlag::DegenerateDenominator));
    }

    #[test]
    fn missing_truth_falls_back_or_errors() {
        let mut o = sensitive_outcome(vec![det(0.0, 1, 0.9)], vec![det(50.0, 1, 0.9)], vec![]);
        o.ground_truth = None;
        let r =
            success_rate_sensitive(std::slice::from_ref(&o), &MatchCriterion::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.flag, Some(MetricFlag::CategoryPresenceFallback));
        assert!(matches!(
            leakage_sensitive(&[o], &MatchCriterion::default()),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn mode_mismatch_rejected() {
        let o = all_outcome(1, 0);
        assert!(success_rate_sensitive(&[o], &MatchCriterion::default()).is_err());
    }

    #[test]
    fn psnr_closed_forms() {
        let a = ImageTensor::filled(16, 16, 0.25).unwrap();
        let b = ImageTensor::filled(16, 16, 0.75).unwrap();
        assert!((psnr(&a, &b, 1.0).unwrap() - 6.0206).abs() < 1e-3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let c = ImageTensor::filled(16, 17, 0.25).unwrap();
        assert!(psnr(&a, &c, 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_window_check() {
        let a = ImageTensor::from_fn(18, 16, |y, x| {
            [(y * x) as f64 / 288.0, 0.3, x as f64 / 16.0]
        })
        .unwrap();
        assert!((ssim(&a, &a, &SsimParams::default()).unwrap() - 1.0).abs() < 1e-12);
        let wide = SsimParams {
            window: 17,
            ..SsimParams::default()
        };
        assert!(ssim(&a, &a, &wide).is_err());
    }

    #[test]
    fn db_values_round_trip() {
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct W(#[serde(with = "db_serde")] f64);
        assert_eq!(serde_json::to_string(&W(f64::INFINITY)).unwrap(), "\"inf\"");
        for v in [f64::INFINITY, 31.5, f64::NEG_INFINITY] {
            let back: W = serde_json::from_str(&serde_json::to_string(&W(v)).unwrap()).unwrap();
            assert_eq!(back.0, v);
        }
    }
}
