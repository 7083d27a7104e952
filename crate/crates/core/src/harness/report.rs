//! Report assembly, persistence and verification.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ImageRecord, RunConfig};
use crate::attack::AttackMode;
use crate::detector::{Detection, Detector};
use crate::error::{Error, Result};
use crate::metrics::{
    db_serde, leakage_all, leakage_sensitive, leakage_sensitive_where, success_rate_all,
    success_rate_sensitive, ImageOutcome, MatchCriterion, Rate,
};

pub const REPORT_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";
pub const TABLES_FILE: &str = "tables.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const PARTIAL_FILE: &str = "report.partial.json";
/// Method name of the attack's table rows.
pub const ADVERSARIAL_METHOD: &str = "adversarial";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub package_version: String,
    pub os: String,
    pub arch: String,
}

impl Environment {
    fn current() -> Self {
        Environment {
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
        }
    }
}

/// One configuration inside a report. Sweeps have one per value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLabel {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

impl RunLabel {
    pub(crate) fn single() -> Self {
        RunLabel {
            parameter: None,
            value: None,
        }
    }
}

/// Aggregate line of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub run: usize,
    pub method: String,
    /// Images that entered the denominators.
    pub images: usize,
    pub success_rate: Rate,
    /// Absent in sensitive mode when some image lacks ground truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leakage_rate: Option<Rate>,
    /// Mean over images with finite PSNR; infinite when none is finite.
    #[serde(with = "db_serde")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// A metric series against a swept parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub parameter: String,
    pub values: Vec<f64>,
    /// Keyed `<method>.<metric>`.
    #[serde(with = "series_serde")]
    pub series: BTreeMap<String, Vec<f64>>,
}

/// Curve values may be infinite (PSNR of untouched images).
mod series_serde {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Db(#[serde(with = "crate::metrics::db_serde")] f64);

    pub fn serialize<S: Serializer>(
        m: &BTreeMap<String, Vec<f64>>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        m.iter()
            .map(|(k, v)| (k, v.iter().map(|&x| Db(x)).collect::<Vec<_>>()))
            .collect::<BTreeMap<_, _>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<String, Vec<f64>>, D::Error> {
        let m = BTreeMap::<String, Vec<Db>>::deserialize(d)?;
        Ok(m.into_iter()
            .map(|(k, v)| (k, v.into_iter().map(|x| x.0).collect()))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub format_version: u32,
    pub environment: Environment,
    pub config: RunConfig,
    pub category_names: Vec<String>,
    pub runs: Vec<RunLabel>,
    /// Ids of the evaluated images, in order.
    pub selected_ids: Vec<u64>,
    pub skipped: usize,
    pub records: Vec<ImageRecord>,
    pub rows: Vec<TableRow>,
    #[serde(default)]
    pub curves: Vec<Curve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryLeakage {
    pub category: usize,
    pub name: String,
    pub rate: Rate,
}

fn outcome(rec: &ImageRecord, mode: AttackMode, adversarial: &[Detection]) -> ImageOutcome {
    ImageOutcome {
        image_id: rec.image_id,
        mode,
        original_detections: rec.original_detections.clone(),
        adversarial_detections: adversarial.to_vec(),
        sensitive_categories: rec.sensitive_categories.clone(),
        ground_truth: rec.ground_truth.clone(),
    }
}

fn finite_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.filter(|v| v.is_finite()) {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

fn row_for(
    run: usize,
    method: String,
    outcomes: &[ImageOutcome],
    quality: &[(f64, f64)],
    mode: AttackMode,
    criterion: &MatchCriterion,
) -> Result<TableRow> {
    let (success_rate, leakage_rate) = match mode {
        AttackMode::All => (success_rate_all(outcomes)?, Some(leakage_all(outcomes)?)),
        AttackMode::Sensitive => (
            success_rate_sensitive(outcomes, criterion)?,
            if outcomes.iter().all(|o| o.ground_truth.is_some()) {
                Some(leakage_sensitive(outcomes, criterion)?)
            } else {
                None
            },
        ),
    };
    Ok(TableRow {
        run,
        method,
        images: outcomes.len(),
        success_rate,
        leakage_rate,
        mean_psnr: finite_mean(quality.iter().map(|q| q.0)),
        mean_ssim: quality.iter().map(|q| q.1).sum::<f64>() / quality.len() as f64,
    })
}

/// Table rows recomputed from per-image records: per run, the attack first
/// and then each baseline in configuration order. Runs where every image
/// was skipped produce no rows.
pub fn aggregate_rows(
    records: &[ImageRecord],
    runs: usize,
    mode: AttackMode,
    criterion: &MatchCriterion,
) -> Result<Vec<TableRow>> {
    let mut rows = Vec::new();
    for run in 0..runs {
        let done: Vec<&ImageRecord> = records
            .iter()
            .filter(|r| r.run == run && r.skipped.is_none())
            .collect();
        if done.is_empty() {
            continue;
        }
        if done.iter().all(|r| r.attack.is_some()) {
            let outs: Vec<_> = done
                .iter()
                .map(|r| {
                    outcome(
                        r,
                        mode,
                        &r.attack.as_ref().expect("checked").record.detections,
                    )
                })
                .collect();
            let q: Vec<_> = done
                .iter()
                .map(|r| {
                    let a = r.attack.as_ref().expect("checked");
                    (a.psnr, a.ssim)
                })
                .collect();
            rows.push(row_for(
                run,
                ADVERSARIAL_METHOD.into(),
                &outs,
                &q,
                mode,
                criterion,
            )?);
        }
        let baselines = done[0].baselines.len();
        for b in 0..baselines {
            let label = done[0].baselines[b].spec.label();
            if done
                .iter()
                .any(|r| r.baselines.get(b).map(|x| x.spec.label()) != Some(label.clone()))
            {
                return Err(Error::Inconsistent(format!(
                    "run {run}: images disagree on baseline {b}"
                )));
            }
            let outs: Vec<_> = done
                .iter()
                .map(|r| outcome(r, mode, &r.baselines[b].detections))
                .collect();
            let q: Vec<_> = done
                .iter()
                .map(|r| (r.baselines[b].psnr, r.baselines[b].ssim))
                .collect();
            rows.push(row_for(run, label, &outs, &q, mode, criterion)?);
        }
    }
    Ok(rows)
}

impl EvaluationReport {
    pub(crate) fn assemble<D: Detector + ?Sized>(
        detector: &D,
        manifest: &DatasetManifest,
        config: &RunConfig,
        runs: Vec<RunLabel>,
        records: Vec<ImageRecord>,
        curves: Vec<Curve>,
    ) -> EvaluationReport {
        debug_assert_eq!(manifest.category_names, detector.category_names());
        let selected_ids = records
            .iter()
            .filter(|r| r.run == 0)
            .map(|r| r.image_id)
            .collect();
        let skipped = records.iter().filter(|r| r.skipped.is_some()).count();
        EvaluationReport {
            format_version: REPORT_VERSION,
            environment: Environment::current(),
            config: config.clone(),
            category_names: detector.category_names().to_vec(),
            runs,
            selected_ids,
            skipped,
            records,
            rows: Vec::new(),
            curves,
        }
        .with_rows()
    }

    fn with_rows(mut self) -> Self {
        // every input was validated on the way in, so aggregation cannot fail
        self.rows = aggregate_rows(
            &self.records,
            self.runs.len(),
            self.config.attack.mode,
            &self.config.criterion,
        )
        .expect("aggregating validated records");
        self
    }

    pub fn row(&self, run: usize, method: &str) -> Option<&TableRow> {
        self.rows
            .iter()
            .find(|r| r.run == run && r.method == method)
    }

    pub fn records_of(&self, run: usize) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.run == run)
    }

    /// Recomputes every aggregate and compares it with the stored one.
    pub fn verify(&self) -> Result<()> {
        if self.format_version != REPORT_VERSION {
            return Err(Error::VersionMismatch {
                found: self.format_version,
                expected: REPORT_VERSION,
            });
        }
        let fresh = aggregate_rows(
            &self.records,
            self.runs.len(),
            self.config.attack.mode,
            &self.config.criterion,
        )?;
        let key = |r: &TableRow| format!("run {} {}", r.run, r.method);
        for stored in &self.rows {
            match fresh
                .iter()
                .find(|f| f.run == stored.run && f.method == stored.method)
            {
                Some(f) if f == stored => {}
                Some(f) => {
                    return Err(Error::ReportVerification {
                        row: stored.method.clone(),
                        detail: format!(
                            "{}: stored {} does not match recomputed {}",
                            key(stored),
                            serde_json::to_string(stored)?,
                            serde_json::to_string(f)?
                        ),
                    })
                }
                None => {
                    return Err(Error::ReportVerification {
                        row: stored.method.clone(),
                        detail: format!("{} has no per-image records", key(stored)),
                    })
                }
            }
        }
        if let Some(missing) = fresh.iter().find(|f| {
            !self
                .rows
                .iter()
                .any(|s| s.run == f.run && s.method == f.method)
        }) {
            return Err(Error::ReportVerification {
                row: missing.method.clone(),
                detail: format!("{} is missing from the stored table", key(missing)),
            });
        }
        if self.skipped != self.records.iter().filter(|r| r.skipped.is_some()).count() {
            return Err(Error::ReportVerification {
                row: "skipped".into(),
                detail: "skipped count differs from the records".into(),
            });
        }
        for c in &self.curves {
            let fresh = super::sweep::recompute_curve(self, &c.parameter, &c.values)?;
            if &fresh != c {
                return Err(Error::ReportVerification {
                    row: format!("curve {}", c.parameter),
                    detail: "stored series differ from recomputation".into(),
                });
            }
        }
        Ok(())
    }

    pub fn tables_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "run",
            "parameter",
            "value",
            "method",
            "images",
            "success_rate",
            "leakage_rate",
            "mean_psnr",
            "mean_ssim",
        ])
        .expect("in-memory write");
        for r in &self.rows {
            let label = &self.runs[r.run];
            w.write_record([
                r.run.to_string(),
                label.parameter.clone().unwrap_or_default(),
                label.value.map_or(String::new(), |v| v.to_string()),
                r.method.clone(),
                r.images.to_string(),
                r.success_rate.value.to_string(),
                r.leakage_rate
                    .map_or(String::new(), |l| l.value.to_string()),
                r.mean_psnr.to_string(),
                r.mean_ssim.to_string(),
            ])
            .expect("in-memory write");
        }
        into_string(w)
    }

    /// One block per curve: a header, then one row per swept value.
    pub fn curves_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .flexible(true)
            .from_writer(Vec::new());
        for c in &self.curves {
            let mut header = vec!["parameter".to_string(), "value".to_string()];
            header.extend(c.series.keys().cloned());
            w.write_record(&header).expect("in-memory write");
            for (i, v) in c.values.iter().enumerate() {
                let mut row = vec![c.parameter.clone(), v.to_string()];
                row.extend(c.series.values().map(|s| s[i].to_string()));
                w.write_record(&row).expect("in-memory write");
            }
        }
        into_string(w)
    }
}

fn into_string(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv of utf-8 fields")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `tables.csv` and, for sweeps, `curves.csv`.
/// Adversarial images are written by the run itself into its output
/// directory.
pub fn write_report(report: &EvaluationReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(
        &dir.join(REPORT_FILE),
        &serde_json::to_string_pretty(report)?,
    )?;
    write_file(&dir.join(TABLES_FILE), &report.tables_csv())?;
    if !report.curves.is_empty() {
        write_file(&dir.join(CURVES_FILE), &report.curves_csv())?;
    }
    Ok(())
}

/// Reads `report.json` and re-verifies its aggregates.
pub fn read_report(dir: impl AsRef<Path>) -> Result<EvaluationReport> {
    let path = dir.as_ref().join(REPORT_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Dataset(format!("{}: no format_version", path.display())))?;
    if found != REPORT_VERSION as u64 {
        return Err(Error::VersionMismatch {
            found: found as u32,
            expected: REPORT_VERSION,
        });
    }
    let report: EvaluationReport = serde_json::from_value(value)?;
    report.verify()?;
    Ok(report)
}

/// Best effort: keeps whatever records finished before a failure.
pub(crate) fn salvage(dir: &Path, config: &RunConfig, records: &[ImageRecord]) {
    let body = serde_json::json!({
        "format_version": REPORT_VERSION,
        "config": config,
        "records": records,
    });
    let path = dir.join(PARTIAL_FILE);
    match serde_json::to_string_pretty(&body) {
        Ok(text) => {
            if let Err(e) = std::fs::write(&path, text) {
                log::error!(
                    "could not salvage partial report to {}: {e}",
                    path.display()
                );
            } else {
                log::warn!("partial report written to {}", path.display());
            }
        }
        Err(e) => log::error!("could not serialize partial report: {e}"),
    }
}

/// Sensitive leakage of the attack restricted to each listed category.
pub fn per_category_leakage(
    report: &EvaluationReport,
    categories: &[usize],
) -> Result<Vec<CategoryLeakage>> {
    if report.config.attack.mode != AttackMode::Sensitive {
        return Err(Error::invalid(
            "per-category leakage needs a sensitive-mode report",
        ));
    }
    let outs: Vec<ImageOutcome> = report
        .records_of(0)
        .filter(|r| r.skipped.is_none())
        .filter_map(|r| {
            r.attack
                .as_ref()
                .map(|a| outcome(r, AttackMode::Sensitive, &a.record.detections))
        })
        .collect();
    categories
        .iter()
        .map(|&c| {
            let name = report
                .category_names
                .get(c)
                .ok_or_else(|| Error::invalid(format!("category {c} out of range")))?
                .clone();
            let rate = leakage_sensitive_where(&outs, &report.config.criterion, |k| k == c)?;
            Ok(CategoryLeakage {
                category: c,
                name,
                rate,
            })
        })
        .collect()
}
