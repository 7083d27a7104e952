//! Attack parameters as users spell them, resolved against a detector.
//!
//! The command line and the HTTP service both go through [`AttackRequest`],
//! so identical inputs yield identical attack configurations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use vanish_core::attack::{parse_epsilon, AttackConfig, AttackMode, SensitiveTarget, MAX_EPSILON};
use vanish_core::detector::{Detection, Detector};

/// A number or a `k/255` style fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Epsilon {
    Number(f64),
    Text(String),
}

impl Epsilon {
    pub fn value(&self) -> Result<f64, String> {
        match self {
            Epsilon::Number(v) => Ok(*v),
            Epsilon::Text(t) => parse_epsilon(t).map_err(|e| e.to_string()),
        }
    }
}

fn default_epsilon() -> Epsilon {
    Epsilon::Text("3/255".into())
}

fn default_threshold() -> f64 {
    AttackConfig::default().threshold
}

fn default_iterations() -> usize {
    AttackConfig::default().max_iterations
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackRequest {
    pub mode: AttackMode,
    /// Sensitive category names.
    #[serde(default)]
    pub sensitive: Vec<String>,
    /// Indices into the pre-detections; each adds its category.
    #[serde(default)]
    pub sensitive_boxes: Vec<usize>,
    /// y_non, by name.
    #[serde(default)]
    pub target_class: Option<String>,
    #[serde(default = "default_epsilon")]
    pub epsilon: Epsilon,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_iterations")]
    pub max_iterations: usize,
    #[serde(default)]
    pub step_size: Option<f64>,
}

impl AttackRequest {
    pub fn new(mode: AttackMode) -> Self {
        AttackRequest {
            mode,
            sensitive: Vec::new(),
            sensitive_boxes: Vec::new(),
            target_class: None,
            epsilon: default_epsilon(),
            threshold: default_threshold(),
            max_iterations: default_iterations(),
            step_size: None,
        }
    }
}

/// Field-level validation messages.
pub type FieldErrors = BTreeMap<String, String>;

fn category_index(names: &[String], name: &str) -> Option<usize> {
    names.iter().position(|n| n == name)
}

/// Checks every field and maps names onto category indices.
/// `pre_detections` backs `sensitive_boxes`.
pub fn resolve(
    request: &AttackRequest,
    detector: &dyn Detector,
    pre_detections: &[Detection],
) -> Result<(AttackConfig, Option<SensitiveTarget>), FieldErrors> {
    let names = detector.category_names();
    let background = detector.background();
    let mut errors = FieldErrors::new();

    let mut config = AttackConfig {
        mode: request.mode,
        threshold: request.threshold,
        max_iterations: request.max_iterations,
        step_size: request.step_size,
        ..AttackConfig::default()
    };
    match request.epsilon.value() {
        Ok(e) if e > 0.0 && e <= MAX_EPSILON => config.epsilon = e,
        Ok(e) => {
            errors.insert("epsilon".into(), format!("{e} must lie in (0, 16/255]"));
        }
        Err(e) => {
            errors.insert("epsilon".into(), e);
        }
    }
    if !(request.threshold > 0.0 && request.threshold < 1.0) {
        errors.insert(
            "threshold".into(),
            format!("{} must lie in (0, 1)", request.threshold),
        );
    }
    if request.max_iterations == 0 {
        errors.insert("max_iterations".into(), "must be at least 1".into());
    }
    if let Some(a) = request.step_size {
        if !(a > 0.0 && (errors.contains_key("epsilon") || a <= config.epsilon)) {
            errors.insert("step_size".into(), format!("{a} must lie in (0, epsilon]"));
        }
    }

    let mut target = None;
    if request.mode == AttackMode::Sensitive {
        let mut sensitive = Vec::new();
        for n in &request.sensitive {
            match category_index(names, n) {
                Some(i) if Some(i) != background => sensitive.push(i),
                Some(_) => {
                    errors.insert(
                        "sensitive".into(),
                        format!("`{n}` is not an object category"),
                    );
                }
                None => {
                    errors.insert("sensitive".into(), format!("unknown category `{n}`"));
                }
            }
        }
        for &b in &request.sensitive_boxes {
            match pre_detections.get(b) {
                Some(d) => sensitive.push(d.category_index),
                None => {
                    errors.insert(
                        "sensitive_boxes".into(),
                        format!(
                            "box {b} out of range ({} pre-detections)",
                            pre_detections.len()
                        ),
                    );
                }
            }
        }
        sensitive.sort_unstable();
        sensitive.dedup();
        if sensitive.is_empty()
            && !errors.contains_key("sensitive")
            && !errors.contains_key("sensitive_boxes")
        {
            errors.insert(
                "sensitive".into(),
                "sensitive mode needs at least one category or box".into(),
            );
        }
        match &request.target_class {
            None => {
                errors.insert(
                    "target_class".into(),
                    "sensitive mode needs a target class".into(),
                );
            }
            Some(t) => match category_index(names, t) {
                None => {
                    errors.insert("target_class".into(), format!("unknown category `{t}`"));
                }
                Some(i) if sensitive.contains(&i) => {
                    errors.insert(
                        "target_class".into(),
                        format!("target class `{t}` is also sensitive"),
                    );
                }
                Some(i) => {
                    target = Some(SensitiveTarget {
                        sensitive_categories: sensitive,
                        target_category: i,
                    })
                }
            },
        }
    } else if !request.sensitive.is_empty()
        || !request.sensitive_boxes.is_empty()
        || request.target_class.is_some()
    {
        errors.insert(
            "mode".into(),
            "sensitive categories and target class only apply in sensitive mode".into(),
        );
    }

    if errors.is_empty() {
        config
            .validate()
            .map_err(|e| FieldErrors::from([("parameters".to_string(), e.to_string())]))?;
        Ok((config, target))
    } else {
        Err(errors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use vanish_core::detector::ToyDetector;

    #[test]
    fn sensitive_request_resolves() {
        let det = ToyDetector::bundled();
        let mut r = AttackRequest::new(AttackMode::Sensitive);
        r.sensitive = vec!["circle".into()];
        r.target_class = Some("triangle".into());
        r.epsilon = Epsilon::Text("8/255".into());
        let (c, t) = resolve(&r, &det, &[]).unwrap();
        assert_eq!(c.epsilon, 8.0 / 255.0);
        let t = t.unwrap();
        assert_eq!((t.sensitive_categories, t.target_category), (vec![1], 3));
    }

    #[test]
    fn field_errors_are_named() {
        let det = ToyDetector::bundled();
        let mut r = AttackRequest::new(AttackMode::Sensitive);
        r.sensitive = vec!["circle".into()];
        r.target_class = Some("circle".into());
        r.epsilon = Epsilon::Number(0.0);
        let e = resolve(&r, &det, &[]).unwrap_err();
        assert!(e.contains_key("epsilon"));
        assert!(e.contains_key("target_class"));

        let mut r = AttackRequest::new(AttackMode::Sensitive);
        r.sensitive = vec!["person".into()];
        r.target_class = Some("triangle".into());
        assert!(resolve(&r, &det, &[])
            .unwrap_err()
            .contains_key("sensitive"));
    }

    #[test]
    fn epsilon_accepts_both_spellings() {
        let j: AttackRequest = serde_json::from_str(r#"{"mode":"all","epsilon":"4/255"}"#).unwrap();
        assert_eq!(j.epsilon.value().unwrap(), 4.0 / 255.0);
        let j: AttackRequest = serde_json::from_str(r#"{"mode":"all","epsilon":0.01}"#).unwrap();
        assert_eq!(j.epsilon.value().unwrap(), 0.01);
    }
}
