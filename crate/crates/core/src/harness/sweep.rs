//! Parameter sweeps and threshold re-scoring.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::report::{Curve, EvaluationReport, RunLabel, ADVERSARIAL_METHOD};
use super::{run_records, DatasetManifest, ImageRecord, RunConfig};
use crate::attack::{AttackMode, MAX_EPSILON};
use crate::baselines::{BaselineMethod, BaselineSpec};
use crate::detector::{apply_threshold, suppress, Detector};
use crate::error::{Error, Result};
use crate::metrics::{
    leakage_all, leakage_sensitive, success_rate_all, success_rate_sensitive, ImageOutcome,
    MatchCriterion,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    Epsilon,
    /// Re-scores one attack run at each threshold.
    Threshold,
    Baseline(BaselineMethod),
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepParameter::Epsilon => f.write_str("epsilon"),
            SweepParameter::Threshold => f.write_str("threshold"),
            SweepParameter::Baseline(m) => write!(f, "baseline:{m}"),
        }
    }
}

impl FromStr for SweepParameter {
    type Err = Error;

    /// `epsilon`, `threshold`, or `baseline:<method>` (the bare method name
    /// works too).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" => Ok(SweepParameter::Epsilon),
            "threshold" => Ok(SweepParameter::Threshold),
            _ => s
                .strip_prefix("baseline:")
                .unwrap_or(s)
                .parse()
                .map(SweepParameter::Baseline)
                .map_err(|_| Error::invalid(format!("unknown sweep parameter `{s}`"))),
        }
    }
}

fn check_values(parameter: SweepParameter, base: &RunConfig, values: &[f64]) -> Result<()> {
    if values.len() < 2 {
        return Err(Error::invalid("a sweep needs at least two values"));
    }
    for &v in values {
        match parameter {
            SweepParameter::Epsilon => {
                if !(v > 0.0 && v <= MAX_EPSILON) {
                    return Err(Error::invalid(format!(
                        "epsilon {v} outside (0, {MAX_EPSILON}]"
                    )));
                }
                if base.attack.step_size.is_some_and(|a| a > v) {
                    return Err(Error::invalid(format!(
                        "step size {} exceeds swept epsilon {v}",
                        base.attack.step_size.unwrap_or_default()
                    )));
                }
            }
            SweepParameter::Threshold => {
                if !(v > 0.0 && v < 1.0) {
                    return Err(Error::invalid(format!("threshold {v} outside (0, 1)")));
                }
            }
            SweepParameter::Baseline(m) => BaselineSpec::new(m, v).validate()?,
        }
    }
    Ok(())
}

fn config_for(parameter: SweepParameter, base: &RunConfig, value: f64) -> RunConfig {
    let mut c = base.clone();
    match parameter {
        SweepParameter::Epsilon => c.attack.epsilon = value,
        SweepParameter::Threshold => {}
        SweepParameter::Baseline(m) => {
            c.run_attack = false;
            c.baselines = vec![BaselineSpec {
                parameter: value,
                ..base
                    .baselines
                    .iter()
                    .find(|b| b.method == m)
                    .copied()
                    .unwrap_or_else(|| BaselineSpec::with_default(m))
            }];
        }
    }
    c
}

/// Evaluates `base` once per value, or once in total for thresholds, and
/// attaches the resulting curve. Every value is checked before any work
/// starts.
pub fn sweep_parameter<D: Detector + ?Sized>(
    detector: &D,
    manifest: &DatasetManifest,
    base: &RunConfig,
    parameter: SweepParameter,
    values: &[f64],
) -> Result<EvaluationReport> {
    check_values(parameter, base, values)?;
    let name = parameter.to_string();
    let (runs, records) = if parameter == SweepParameter::Threshold {
        let records = run_records(detector, manifest, base, 0, false)?;
        (vec![RunLabel::single()], records)
    } else {
        let configs: Vec<RunConfig> = values
            .iter()
            .map(|&v| config_for(parameter, base, v))
            .collect();
        for c in &configs {
            c.validate(detector.category_names().len())?;
        }
        let mut records = Vec::new();
        let mut runs = Vec::new();
        for (run, (c, &v)) in configs.iter().zip(values).enumerate() {
            records.extend(run_records(detector, manifest, c, run, true)?);
            runs.push(RunLabel {
                parameter: Some(name.clone()),
                value: Some(v),
            });
        }
        (runs, records)
    };
    let mut report =
        EvaluationReport::assemble(detector, manifest, base, runs, records, Vec::new());
    let curve = recompute_curve(&report, &name, values)?;
    report.curves.push(curve);
    Ok(report)
}

pub(crate) fn recompute_curve(
    report: &EvaluationReport,
    parameter: &str,
    values: &[f64],
) -> Result<Curve> {
    let mode = report.config.attack.mode;
    let criterion = &report.config.criterion;
    if parameter == "threshold" {
        let records: Vec<ImageRecord> = report.records_of(0).cloned().collect();
        return rethreshold_curve(&records, values, mode, criterion);
    }
    if report.runs.len() != values.len() {
        return Err(Error::Inconsistent(format!(
            "{} runs for {} swept values",
            report.runs.len(),
            values.len()
        )));
    }
    let mut series: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in 0..values.len() {
        let rows: Vec<_> = report.rows.iter().filter(|r| r.run == run).collect();
        if rows.is_empty() {
            return Err(Error::Inconsistent(format!(
                "run {run} of the {parameter} sweep has no evaluated images"
            )));
        }
        for r in rows {
            // baseline labels carry their parameter; curves key on the method
            let method = r.method.split('(').next().unwrap_or(&r.method);
            let mut push = |metric: &str, v: f64| {
                series
                    .entry(format!("{method}.{metric}"))
                    .or_default()
                    .push(v)
            };
            push("success_rate", r.success_rate.value);
            if let Some(l) = r.leakage_rate {
                push("leakage_rate", l.value);
            }
            push("mean_psnr", r.mean_psnr);
            push("mean_ssim", r.mean_ssim);
        }
    }
    if let Some((k, v)) = series.iter().find(|(_, v)| v.len() != values.len()) {
        return Err(Error::Inconsistent(format!(
            "series {k} has {} points for {} values",
            v.len(),
            values.len()
        )));
    }
    Ok(Curve {
        parameter: parameter.to_string(),
        values: values.to_vec(),
        series,
    })
}

/// Success and leakage of the stored attack when its pre-NMS candidates are
/// re-thresholded at each value. The leakage denominator stays the original
/// detections at the run's own threshold, so a higher threshold can only
/// lower the series.
pub fn rethreshold_curve(
    records: &[ImageRecord],
    thresholds: &[f64],
    mode: AttackMode,
    criterion: &MatchCriterion,
) -> Result<Curve> {
    let done: Vec<&ImageRecord> = records
        .iter()
        .filter(|r| r.skipped.is_none() && r.attack.is_some())
        .collect();
    if done.is_empty() {
        return Err(Error::UndefinedMetric(
            "threshold curve needs at least one attacked image".into(),
        ));
    }
    let mut success = Vec::with_capacity(thresholds.len());
    let mut leakage = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let outs: Vec<ImageOutcome> = done
            .iter()
            .map(|r| ImageOutcome {
                image_id: r.image_id,
                mode,
                original_detections: r.original_detections.clone(),
                adversarial_detections: suppress(&apply_threshold(
                    &r.attack.as_ref().expect("filtered").candidates,
                    t,
                )),
                sensitive_categories: r.sensitive_categories.clone(),
                ground_truth: r.ground_truth.clone(),
            })
            .collect();
        match mode {
            AttackMode::All => {
                success.push(success_rate_all(&outs)?.value);
                leakage.push(leakage_all(&outs)?.value);
            }
            AttackMode::Sensitive => {
                success.push(success_rate_sensitive(&outs, criterion)?.value);
                if outs.iter().all(|o| o.ground_truth.is_some()) {
                    leakage.push(leakage_sensitive(&outs, criterion)?.value);
                }
            }
        }
    }
    let mut series = BTreeMap::new();
    series.insert(format!("{ADVERSARIAL_METHOD}.success_rate"), success);
    if leakage.len() == thresholds.len() {
        series.insert(format!("{ADVERSARIAL_METHOD}.leakage_rate"), leakage);
    }
    Ok(Curve {
        parameter: "threshold".into(),
        values: thresholds.to_vec(),
        series,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackConfig;

    #[test]
    fn parameter_names_round_trip() {
        for p in [
            SweepParameter::Epsilon,
            SweepParameter::Threshold,
            SweepParameter::Baseline(BaselineMethod::Mosaic),
        ] {
            assert_eq!(p.to_string().parse::<SweepParameter>().unwrap(), p);
        }
        assert_eq!(
            "gaussian_blur".parse::<SweepParameter>().unwrap(),
            SweepParameter::Baseline(BaselineMethod::GaussianBlur)
        );
        assert!("gamma".parse::<SweepParameter>().is_err());
    }

    #[test]
    fn values_checked_up_front() {
        let base = RunConfig::new(AttackConfig::default());
        assert!(check_values(SweepParameter::Epsilon, &base, &[0.01]).is_err());
        assert!(check_values(SweepParameter::Epsilon, &base, &[0.01, 0.5]).is_err());
        assert!(check_values(SweepParameter::Threshold, &base, &[0.2, 1.0]).is_err());
        assert!(check_values(
            SweepParameter::Baseline(BaselineMethod::JpegCompression),
            &base,
            &[10.0, 10.5]
        )
        .is_err());
        check_values(SweepParameter::Threshold, &base, &[0.2, 0.4]).unwrap();
    }

    #[test]
    fn baseline_sweeps_skip_the_attack() {
        let base = RunConfig::new(AttackConfig::default());
        let c = config_for(SweepParameter::Baseline(BaselineMethod::Mosaic), &base, 4.0);
        assert!(!c.run_attack);
        assert_eq!(
            c.baselines,
            vec![BaselineSpec::new(BaselineMethod::Mosaic, 4.0)]
        );
    }
}
