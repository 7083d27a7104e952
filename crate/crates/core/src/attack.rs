//! Iterative signed-gradient attack on the classification stage.
//!
//! Both modes hold the proposals of the original image fixed and push every
//! proposal's category distribution towards some label the user does not
//! mind being seen. Each step is clamped to an L-infinity ball of radius
//! `epsilon` around the previous iterate and to the unit interval.
//!
//! * [`hide_all`] steers towards the categories that were not detected in the
//!   original image, visiting them round-robin, until no object category
//!   scores at least `threshold` on any proposal.
//! * [`hide_sensitive`] steers towards one fixed label until the chosen
//!   sensitive categories stay below `threshold` everywhere.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::detector::{check_threshold, detect, Detection, Detector, Proposal};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, STORAGE_LEVELS};

/// Largest accepted per-step bound.
pub const MAX_EPSILON: f64 = 16.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    All,
    Sensitive,
}

impl std::fmt::Display for AttackMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackMode::All => "all",
            AttackMode::Sensitive => "sensitive",
        })
    }
}

impl std::str::FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(AttackMode::All),
            "sensitive" => Ok(AttackMode::Sensitive),
            other => Err(Error::invalid(format!(
                "unknown mode `{other}` (expected `all` or `sensitive`)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Per-step L-infinity bound on the [0, 1] pixel scale.
    pub epsilon: f64,
    pub threshold: f64,
    pub max_iterations: usize,
    /// Signed-gradient step; `None` means `epsilon`.
    #[serde(default)]
    pub step_size: Option<f64>,
    pub mode: AttackMode,
    /// Optional bound on the distance to the original image, on top of the
    /// per-step bound.
    #[serde(default)]
    pub total_budget: Option<f64>,
    /// Round each iterate towards the previous one onto the `n / 65535`
    /// grid, so a 16-bit PNG stores it exactly.
    #[serde(default = "default_true")]
    pub storage_lattice: bool,
}

fn default_true() -> bool {
    true
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 3.0 / 255.0,
            threshold: 0.3,
            max_iterations: 150,
            step_size: None,
            mode: AttackMode::All,
            total_budget: None,
            storage_lattice: true,
        }
    }
}

impl AttackConfig {
    pub fn new(mode: AttackMode, epsilon: f64) -> Self {
        AttackConfig {
            mode,
            epsilon,
            ..AttackConfig::default()
        }
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= MAX_EPSILON) {
            return Err(Error::invalid(format!(
                "epsilon {} must lie in (0, 16/255]",
                self.epsilon
            )));
        }
        check_threshold(self.threshold)?;
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        let step = self.step();
        if !(step > 0.0 && step <= self.epsilon) {
            return Err(Error::invalid(format!(
                "step size {step} must lie in (0, epsilon]"
            )));
        }
        if let Some(b) = self.total_budget {
            if b.is_nan() || b <= 0.0 {
                return Err(Error::invalid(format!("total budget {b} must be positive")));
            }
        }
        Ok(())
    }
}

/// Parses `"8/255"`, any other `a/b` fraction, or a plain decimal.
pub fn parse_epsilon(text: &str) -> Result<f64> {
    let text = text.trim();
    let bad = || Error::invalid(format!("cannot parse `{text}` as a number or fraction"));
    let value = match text.split_once('/') {
        Some((num, den)) => {
            let num: f64 = num.trim().parse().map_err(|_| bad())?;
            let den: f64 = den.trim().parse().map_err(|_| bad())?;
            if den == 0.0 {
                return Err(bad());
            }
            num / den
        }
        None => text.parse().map_err(|_| bad())?,
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(bad())
    }
}

/// Labels the hide-all loop may steer towards, visited in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NonSensitiveSet {
    labels: Vec<usize>,
}

impl NonSensitiveSet {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("non-sensitive set is empty"));
        }
        let distinct: BTreeSet<_> = labels.iter().collect();
        if distinct.len() != labels.len() {
            return Err(Error::invalid("non-sensitive set has duplicate labels"));
        }
        Ok(NonSensitiveSet { labels })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Target of iteration `i` (1-based), round-robin.
    pub fn label_for(&self, i: usize) -> usize {
        self.labels[(i - 1) % self.labels.len()]
    }
}

/// Every category index absent from `pre_detections`, ascending.
pub fn select_nonsensitive_set(
    pre_detections: &[Detection],
    category_count: usize,
) -> Result<NonSensitiveSet> {
    if category_count < 2 {
        return Err(Error::invalid(format!(
            "need at least two categories, got {category_count}"
        )));
    }
    let mut detected = BTreeSet::new();
    for d in pre_detections {
        if d.category_index >= category_count {
            return Err(Error::invalid(format!(
                "detection category {} out of range for {category_count} categories",
                d.category_index
            )));
        }
        detected.insert(d.category_index);
    }
    let labels: Vec<usize> = (0..category_count)
        .filter(|k| !detected.contains(k))
        .collect();
    if labels.is_empty() {
        return Err(Error::EmptyNonSensitiveSet(category_count));
    }
    Ok(NonSensitiveSet { labels })
}

/// Largest value `v <= prev + eps` with `v - prev <= eps` in floating point.
fn upper_bound(prev: f64, eps: f64) -> f64 {
    let mut hi = prev + eps;
    while hi - prev > eps {
        hi = hi.next_down();
    }
    hi
}

fn lower_bound(prev: f64, eps: f64) -> f64 {
    let mut lo = prev - eps;
    while prev - lo > eps {
        lo = lo.next_up();
    }
    lo
}

#[inline]
fn clamp_value(candidate: f64, previous: f64, epsilon: f64) -> f64 {
    candidate
        .clamp(
            lower_bound(previous, epsilon),
            upper_bound(previous, epsilon),
        )
        .clamp(0.0, 1.0)
}

/// Clamps `candidate` into `[previous - epsilon, previous + epsilon]` and
/// into [0, 1]. The bound holds exactly for the computed differences.
pub fn clamp_step(
    candidate: &ImageTensor,
    previous: &ImageTensor,
    epsilon: f64,
) -> Result<ImageTensor> {
    candidate.ensure_same_shape(previous)?;
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(Error::invalid(format!("epsilon {epsilon} must be >= 0")));
    }
    let data = candidate
        .as_slice()
        .iter()
        .zip(previous.as_slice())
        .map(|(&c, &p)| clamp_value(c, p, epsilon))
        .collect();
    Ok(ImageTensor::from_raw_clamped(
        candidate.height(),
        candidate.width(),
        data,
    ))
}

/// Nearest storage level from `value` in the direction of `previous`.
/// Never moves further from `previous` than `value` is.
fn project_towards(value: f64, previous: f64) -> f64 {
    let level = (value * STORAGE_LEVELS).round();
    if level / STORAGE_LEVELS == value || value == previous {
        return value;
    }
    if value > previous {
        let mut n = (value * STORAGE_LEVELS).floor();
        while n / STORAGE_LEVELS > value {
            n -= 1.0;
        }
        (n / STORAGE_LEVELS).max(previous)
    } else {
        let mut n = (value * STORAGE_LEVELS).ceil();
        while n / STORAGE_LEVELS < value {
            n += 1.0;
        }
        (n / STORAGE_LEVELS).min(previous)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// 1-based iteration index.
    pub i: usize,
    pub target_label: usize,
    /// Objective at the iterate the step was taken from.
    pub loss: f64,
    /// Largest stop-relevant score after the step.
    pub s_max: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttackTrace {
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitiveTarget {
    pub sensitive_categories: Vec<usize>,
    pub target_category: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub adversarial_image: ImageTensor,
    pub config: AttackConfig,
    /// Stop condition met and confirmed by re-running the full detector.
    pub succeeded: bool,
    /// Stop condition met on the frozen proposals.
    pub stop_condition_met: bool,
    pub iterations_used: usize,
    pub trace: AttackTrace,
    /// `detect` on the adversarial image.
    pub final_detections: Vec<Detection>,
    /// Labels steered towards (Y' in hide-all, the single target otherwise).
    pub steering_labels: Vec<usize>,
    pub sensitive: Option<SensitiveTarget>,
}

/// JSON form of an [`AttackResult`], without the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub mode: AttackMode,
    pub epsilon: f64,
    pub threshold: f64,
    pub max_iterations: usize,
    pub step_size: f64,
    pub iterations_used: usize,
    pub succeeded: bool,
    pub stop_condition_met: bool,
    pub trace: AttackTrace,
    pub detections: Vec<Detection>,
    pub steering_labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitive_categories: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_category: Option<usize>,
    /// Sensitive mode: whether the target label shows up among the final
    /// detections.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_appeared: Option<bool>,
}

impl AttackResult {
    /// Sensitive mode only: whether `target_category` was detected in the
    /// adversarial image.
    pub fn target_appeared(&self) -> Option<bool> {
        self.sensitive.as_ref().map(|s| {
            self.final_detections
                .iter()
                .any(|d| d.category_index == s.target_category)
        })
    }

    pub fn record(&self) -> AttackRecord {
        AttackRecord {
            mode: self.config.mode,
            epsilon: self.config.epsilon,
            threshold: self.config.threshold,
            max_iterations: self.config.max_iterations,
            step_size: self.config.step(),
            iterations_used: self.iterations_used,
            succeeded: self.succeeded,
            stop_condition_met: self.stop_condition_met,
            trace: self.trace.clone(),
            detections: self.final_detections.clone(),
            steering_labels: self.steering_labels.clone(),
            sensitive_categories: self
                .sensitive
                .as_ref()
                .map(|s| s.sensitive_categories.clone()),
            target_category: self.sensitive.as_ref().map(|s| s.target_category),
            target_appeared: self.target_appeared(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.record()).expect("attack record serializes")
    }
}

/// Receives each iteration's record and the new iterate.
pub type Observer<'a> = &'a mut dyn FnMut(&TraceRecord, &ImageTensor);

struct LoopOutcome {
    image: ImageTensor,
    iterations: usize,
    trace: AttackTrace,
    stopped: bool,
}

fn attack_loop<D: Detector + ?Sized>(
    detector: &D,
    original: &ImageTensor,
    proposals: &[Proposal],
    config: &AttackConfig,
    targets: &NonSensitiveSet,
    stop_column: impl Fn(usize) -> bool,
    observer: Observer<'_>,
) -> Result<LoopOutcome> {
    let step = config.step();
    let mut current = original.clone();
    let mut trace = AttackTrace::default();
    for i in 1..=config.max_iterations {
        let target = targets.label_for(i);
        let (loss, grad) = detector.loss_and_gradient(&current, proposals, target)?;
        let prev = current.as_slice();
        let base = original.as_slice();
        let data: Vec<f64> = prev
            .iter()
            .zip(&grad.data)
            .zip(base)
            .map(|((&p, &g), &b)| {
                let moved = if g > 0.0 {
                    p - step
                } else if g < 0.0 {
                    p + step
                } else {
                    p
                };
                let mut v = clamp_value(moved, p, config.epsilon);
                if let Some(budget) = config.total_budget {
                    v = v.clamp(lower_bound(b, budget), upper_bound(b, budget));
                }
                if config.storage_lattice {
                    v = project_towards(v, p);
                }
                v
            })
            .collect();
        current = ImageTensor::from_raw_clamped(original.height(), original.width(), data);

        let scores = detector.classify(&current, proposals)?;
        let s_max = scores.max_where(&stop_column);
        let record = TraceRecord {
            i,
            target_label: target,
            loss,
            s_max,
        };
        trace.records.push(record);
        observer(&record, &current);
        if s_max < config.threshold {
            return Ok(LoopOutcome {
                image: current,
                iterations: i,
                trace,
                stopped: true,
            });
        }
    }
    Ok(LoopOutcome {
        image: current,
        iterations: config.max_iterations,
        trace,
        stopped: false,
    })
}

fn check_mode(config: &AttackConfig, expected: AttackMode) -> Result<()> {
    config.validate()?;
    if config.mode != expected {
        return Err(Error::invalid(format!(
            "config mode is `{}` but the `{expected}` attack was requested",
            config.mode
        )));
    }
    Ok(())
}

/// Makes every detection in `image` disappear.
pub fn hide_all<D: Detector + ?Sized>(
    detector: &D,
    image: &ImageTensor,
    config: &AttackConfig,
) -> Result<AttackResult> {
    hide_all_observed(detector, image, config, &mut |_, _| {})
}

pub fn hide_all_observed<D: Detector + ?Sized>(
    detector: &D,
    image: &ImageTensor,
    config: &AttackConfig,
    observer: Observer<'_>,
) -> Result<AttackResult> {
    check_mode(config, AttackMode::All)?;
    let pre = detect(detector, image, config.threshold)?;
    if pre.is_empty() {
        return Ok(AttackResult {
            adversarial_image: image.clone(),
            config: config.clone(),
            succeeded: true,
            stop_condition_met: true,
            iterations_used: 0,
            trace: AttackTrace::default(),
            final_detections: Vec::new(),
            steering_labels: Vec::new(),
            sensitive: None,
        });
    }
    let targets = select_nonsensitive_set(&pre, detector.category_count())?;
    let proposals = detector.propose(image)?;
    if proposals.is_empty() {
        return Err(Error::Inconsistent(
            "detector returned no proposals for an image with detections".into(),
        ));
    }
    let out = attack_loop(
        detector,
        image,
        &proposals,
        config,
        &targets,
        |k| detector.is_object_category(k),
        observer,
    )?;
    let final_detections = detect(detector, &out.image, config.threshold)?;
    Ok(AttackResult {
        succeeded: out.stopped && final_detections.is_empty(),
        adversarial_image: out.image,
        config: config.clone(),
        stop_condition_met: out.stopped,
        iterations_used: out.iterations,
        trace: out.trace,
        final_detections,
        steering_labels: targets.labels,
        sensitive: None,
    })
}

/// Pushes the chosen categories below the threshold by steering every
/// proposal towards `target_category`. Other objects may stay detectable.
pub fn hide_sensitive<D: Detector + ?Sized>(
    detector: &D,
    image: &ImageTensor,
    sensitive_categories: &[usize],
    target_category: usize,
    config: &AttackConfig,
) -> Result<AttackResult> {
    hide_sensitive_observed(
        detector,
        image,
        sensitive_categories,
        target_category,
        config,
        &mut |_, _| {},
    )
}

pub fn hide_sensitive_observed<D: Detector + ?Sized>(
    detector: &D,
    image: &ImageTensor,
    sensitive_categories: &[usize],
    target_category: usize,
    config: &AttackConfig,
    observer: Observer<'_>,
) -> Result<AttackResult> {
    check_mode(config, AttackMode::Sensitive)?;
    let k = detector.category_count();
    let sensitive: BTreeSet<usize> = sensitive_categories.iter().copied().collect();
    for &c in &sensitive {
        if !detector.is_object_category(c) {
            return Err(Error::invalid(format!(
                "sensitive category {c} is not an object category of this detector"
            )));
        }
    }
    if target_category >= k {
        return Err(Error::invalid(format!(
            "target category {target_category} out of range for {k} categories"
        )));
    }
    if sensitive.contains(&target_category) {
        return Err(Error::invalid(format!(
            "target category {target_category} is itself sensitive"
        )));
    }
    let target_info = SensitiveTarget {
        sensitive_categories: sensitive.iter().copied().collect(),
        target_category,
    };
    let unchanged = |final_detections: Vec<Detection>| AttackResult {
        adversarial_image: image.clone(),
        config: config.clone(),
        succeeded: true,
        stop_condition_met: true,
        iterations_used: 0,
        trace: AttackTrace::default(),
        final_detections,
        steering_labels: vec![target_category],
        sensitive: Some(target_info.clone()),
    };
    if sensitive.is_empty() {
        return Ok(unchanged(detect(detector, image, config.threshold)?));
    }

    let proposals = detector.propose(image)?;
    let is_sensitive = |c: usize| sensitive.contains(&c);
    let start = if proposals.is_empty() {
        0.0
    } else {
        detector
            .classify(image, &proposals)?
            .max_where(is_sensitive)
    };
    if start < config.threshold {
        return Ok(unchanged(detect(detector, image, config.threshold)?));
    }

    let targets = NonSensitiveSet::new(vec![target_category])?;
    let out = attack_loop(
        detector,
        image,
        &proposals,
        config,
        &targets,
        is_sensitive,
        observer,
    )?;
    let final_detections = detect(detector, &out.image, config.threshold)?;
    let clean = !final_detections
        .iter()
        .any(|d| is_sensitive(d.category_index));
    Ok(AttackResult {
        succeeded: out.stopped && clean,
        adversarial_image: out.image,
        config: config.clone(),
        stop_condition_met: out.stopped,
        iterations_used: out.iterations,
        trace: out.trace,
        final_detections,
        steering_labels: targets.labels,
        sensitive: Some(target_info),
    })
}

/// Dispatches on `config.mode`. `sensitive` is required in sensitive mode.
pub fn run_attack<D: Detector + ?Sized>(
    detector: &D,
    image: &ImageTensor,
    config: &AttackConfig,
    sensitive: Option<&SensitiveTarget>,
    observer: Observer<'_>,
) -> Result<AttackResult> {
    match (config.mode, sensitive) {
        (AttackMode::All, _) => hide_all_observed(detector, image, config, observer),
        (AttackMode::Sensitive, Some(s)) => hide_sensitive_observed(
            detector,
            image,
            &s.sensitive_categories,
            s.target_category,
            config,
            observer,
        ),
        (AttackMode::Sensitive, None) => Err(Error::invalid(
            "sensitive mode needs sensitive categories and a target category",
        )),
    }
}
