//! Batch evaluation: attacks and baselines over a dataset, aggregated into a
//! persisted report.

mod dataset;
mod report;
mod sweep;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig, AttackMode, AttackRecord, SensitiveTarget};
use crate::baselines::{apply_baseline, BaselineSpec};
use crate::detector::{detect, detect_candidates, Detection, Detector};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metrics::{db_serde, psnr, ssim, MatchCriterion, SsimParams};
use crate::par::{map_indexed, Workers};
use crate::scene::Annotation;

pub use dataset::{
    load_dataset, write_corpus, CocoAnnotation, CocoCategory, CocoFile, CocoImage, DatasetManifest,
    ImageEntry, ANNOTATION_FILE,
};
pub use report::{
    aggregate_rows, per_category_leakage, read_report, write_report, CategoryLeakage, Curve,
    EvaluationReport, TableRow, ADVERSARIAL_METHOD, REPORT_FILE, REPORT_VERSION,
};
pub use sweep::{rethreshold_curve, sweep_parameter, SweepParameter};

/// Which categories count as sensitive in sensitive mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "categories")]
pub enum SensitivePolicy {
    Fixed(BTreeSet<usize>),
    PerImage(BTreeMap<u64, BTreeSet<usize>>),
    /// Everything the pre-detection finds.
    AllPreDetected,
}

/// The y_non label for sensitive mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "category")]
pub enum TargetChoice {
    Fixed(usize),
    /// Lowest-index object category outside the image's sensitive set.
    FirstNonSensitive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub attack: AttackConfig,
    /// When false only baselines run; the attack rows are absent.
    #[serde(default = "default_true")]
    pub run_attack: bool,
    pub baselines: Vec<BaselineSpec>,
    pub sensitive_policy: SensitivePolicy,
    pub target: TargetChoice,
    pub criterion: MatchCriterion,
    pub ssim: SsimParams,
    pub seed: u64,
    /// Evaluate a seeded random subset of this many images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
    /// Adversarial images are written below this directory when set.
    #[serde(skip)]
    pub output_dir: Option<PathBuf>,
    /// `0` uses every core, `1` runs sequentially.
    #[serde(skip, default)]
    pub workers: usize,
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn new(attack: AttackConfig) -> Self {
        RunConfig {
            attack,
            run_attack: true,
            baselines: BaselineSpec::defaults(),
            sensitive_policy: SensitivePolicy::AllPreDetected,
            target: TargetChoice::FirstNonSensitive,
            criterion: MatchCriterion::default(),
            ssim: SsimParams::default(),
            seed: 0,
            sample: None,
            output_dir: None,
            workers: 0,
        }
    }

    pub fn validate(&self, categories: usize) -> Result<()> {
        self.attack.validate()?;
        self.criterion.validate()?;
        for b in &self.baselines {
            b.validate()?;
        }
        let check = |c: usize, what: &str| {
            if c == 0 || c >= categories {
                Err(Error::invalid(format!(
                    "{what} category {c} is not an object category (1..{categories})"
                )))
            } else {
                Ok(())
            }
        };
        match &self.sensitive_policy {
            SensitivePolicy::Fixed(set) => set.iter().try_for_each(|&c| check(c, "sensitive"))?,
            SensitivePolicy::PerImage(map) => map
                .values()
                .flatten()
                .try_for_each(|&c| check(c, "sensitive"))?,
            SensitivePolicy::AllPreDetected => {}
        }
        if let TargetChoice::Fixed(t) = self.target {
            if t >= categories {
                return Err(Error::invalid(format!(
                    "target category {t} out of range (0..{categories})"
                )));
            }
        }
        if self.sample == Some(0) {
            return Err(Error::invalid("sample size must be positive"));
        }
        Ok(())
    }
}

/// Output of the configured attack on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub record: AttackRecord,
    #[serde(with = "db_serde")]
    pub psnr: f64,
    pub ssim: f64,
    /// Unthresholded pre-NMS candidates on the adversarial image.
    pub candidates: Vec<Detection>,
    /// Relative to the report directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineOutcome {
    pub spec: BaselineSpec,
    pub detections: Vec<Detection>,
    #[serde(with = "db_serde")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub file_name: String,
    /// Index into [`EvaluationReport::runs`].
    #[serde(default)]
    pub run: usize,
    /// Set when the image was excluded from every metric.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<Annotation>>,
    pub original_detections: Vec<Detection>,
    pub original_candidates: Vec<Detection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitive_categories: Option<BTreeSet<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackOutcome>,
    pub baselines: Vec<BaselineOutcome>,
}

/// Mixes run seed, spec seed and image id into one noise seed.
fn baseline_seed(run_seed: u64, spec_seed: u64, image_id: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed ^ spec_seed.rotate_left(32));
    rng.set_stream(image_id);
    rand::Rng::random(&mut rng)
}

/// Indices of the manifest entries to evaluate, in manifest order.
pub fn select_images(count: usize, config: &RunConfig) -> Vec<usize> {
    match config.sample {
        Some(n) if n < count => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut idx = sample(&mut rng, count, n).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..count).collect(),
    }
}

fn image_path(run: usize, id: u64, multi_run: bool) -> String {
    if multi_run {
        format!("images/run{run}/{id}.png")
    } else {
        format!("images/{id}.png")
    }
}

fn sensitive_for(
    policy: &SensitivePolicy,
    id: u64,
    original: &[Detection],
) -> std::result::Result<BTreeSet<usize>, String> {
    match policy {
        SensitivePolicy::Fixed(s) => Ok(s.clone()),
        SensitivePolicy::PerImage(map) => map
            .get(&id)
            .cloned()
            .ok_or_else(|| format!("no sensitive categories listed for image {id}")),
        SensitivePolicy::AllPreDetected => Ok(original.iter().map(|d| d.category_index).collect()),
    }
}

fn target_for(
    choice: TargetChoice,
    sensitive: &BTreeSet<usize>,
    categories: usize,
) -> std::result::Result<usize, String> {
    match choice {
        TargetChoice::Fixed(t) if sensitive.contains(&t) => {
            Err(format!("target category {t} is itself sensitive"))
        }
        TargetChoice::Fixed(t) => Ok(t),
        TargetChoice::FirstNonSensitive => (1..categories)
            .find(|c| !sensitive.contains(c))
            .ok_or_else(|| "every object category is sensitive".to_string()),
    }
}

struct ImageJob<'a> {
    run: usize,
    multi_run: bool,
    index: usize,
    out_dir: Option<&'a Path>,
}

fn process_image<D: Detector + ?Sized>(
    detector: &D,
    manifest: &DatasetManifest,
    config: &RunConfig,
    job: ImageJob<'_>,
) -> Result<ImageRecord> {
    let entry = &manifest.images[job.index];
    let image = manifest.load_image(job.index)?;
    let threshold = config.attack.threshold;
    let original_detections = detect(detector, &image, threshold)?;
    let original_candidates = detect_candidates(detector, &image)?;
    let mut record = ImageRecord {
        image_id: entry.id,
        file_name: entry.file_name.clone(),
        run: job.run,
        skipped: None,
        ground_truth: manifest.ground_truth_for(entry.id).map(<[_]>::to_vec),
        original_detections,
        original_candidates,
        sensitive_categories: None,
        attack: None,
        baselines: Vec::new(),
    };

    let mut target = None;
    if config.attack.mode == AttackMode::Sensitive {
        let k = detector.category_names().len();
        let chosen = sensitive_for(
            &config.sensitive_policy,
            entry.id,
            &record.original_detections,
        )
        .and_then(|s| target_for(config.target, &s, k).map(|t| (s, t)));
        match chosen {
            Ok((s, t)) => {
                record.sensitive_categories = Some(s.clone());
                target = Some(SensitiveTarget {
                    sensitive_categories: s.into_iter().collect(),
                    target_category: t,
                });
            }
            Err(reason) => {
                record.skipped = Some(reason);
                return Ok(record);
            }
        }
    }

    if config.run_attack {
        let result = match run_attack(
            detector,
            &image,
            &config.attack,
            target.as_ref(),
            &mut |_, _| {},
        ) {
            Ok(r) => r,
            Err(e @ (Error::EmptyNonSensitiveSet(_) | Error::InvalidInput(_))) => {
                record.skipped = Some(e.to_string());
                return Ok(record);
            }
            Err(e) => return Err(e),
        };
        let adv = &result.adversarial_image;
        let image_file = match job.out_dir {
            Some(dir) => {
                let rel = image_path(job.run, entry.id, job.multi_run);
                adv.write_png(dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        record.attack = Some(AttackOutcome {
            psnr: psnr(&image, adv, 1.0)?,
            ssim: ssim(&image, adv, &config.ssim)?,
            candidates: detect_candidates(detector, adv)?,
            record: result.record(),
            image_file,
        });
    }

    for spec in &config.baselines {
        let seeded = BaselineSpec {
            seed: baseline_seed(config.seed, spec.seed, entry.id),
            ..*spec
        };
        let processed: ImageTensor = apply_baseline(&image, &seeded)?;
        record.baselines.push(BaselineOutcome {
            spec: *spec,
            detections: detect(detector, &processed, threshold)?,
            psnr: psnr(&image, &processed, 1.0)?,
            ssim: ssim(&image, &processed, &config.ssim)?,
        });
    }
    Ok(record)
}

/// Runs one configuration over every selected image. Records are in
/// manifest order whatever the worker count.
pub fn run_batch<D: Detector + ?Sized>(
    detector: &D,
    manifest: &DatasetManifest,
    config: &RunConfig,
) -> Result<EvaluationReport> {
    let records = run_records(detector, manifest, config, 0, false)?;
    Ok(EvaluationReport::assemble(
        detector,
        manifest,
        config,
        vec![report::RunLabel::single()],
        records,
        Vec::new(),
    ))
}

pub(crate) fn run_records<D: Detector + ?Sized>(
    detector: &D,
    manifest: &DatasetManifest,
    config: &RunConfig,
    run: usize,
    multi_run: bool,
) -> Result<Vec<ImageRecord>> {
    config.validate(detector.category_names().len())?;
    if manifest.category_names != detector.category_names() {
        return Err(Error::invalid(
            "dataset was mapped onto a different category table than the detector's",
        ));
    }
    let selected = select_images(manifest.len(), config);
    let out_dir = config.output_dir.as_deref();
    if let Some(dir) = out_dir {
        let images = dir.join(if multi_run {
            format!("images/run{run}")
        } else {
            "images".to_string()
        });
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    }
    let results = map_indexed(selected.len(), Workers(config.workers), |i| {
        process_image(
            detector,
            manifest,
            config,
            ImageJob {
                run,
                multi_run,
                index: selected[i],
                out_dir,
            },
        )
    });
    let mut records = Vec::with_capacity(results.len());
    let mut failure = None;
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
    }
    if let Some(e) = failure {
        if let Some(dir) = out_dir {
            report::salvage(dir, config, &records);
        }
        return Err(e);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_selection_is_seeded_and_sorted() {
        let mut c = RunConfig::new(AttackConfig::default());
        c.sample = Some(5);
        c.seed = 11;
        let a = select_images(40, &c);
        assert_eq!(a, select_images(40, &c));
        assert_eq!(a.len(), 5);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        c.sample = Some(100);
        assert_eq!(select_images(3, &c), vec![0, 1, 2]);
    }

    #[test]
    fn target_rules() {
        let s: BTreeSet<usize> = [1].into();
        assert_eq!(target_for(TargetChoice::FirstNonSensitive, &s, 4), Ok(2));
        assert!(target_for(TargetChoice::Fixed(1), &s, 4).is_err());
        let all: BTreeSet<usize> = [1, 2, 3].into();
        assert!(target_for(TargetChoice::FirstNonSensitive, &all, 4).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = RunConfig::new(AttackConfig::default());
        c.validate(4).unwrap();
        c.sensitive_policy = SensitivePolicy::Fixed([0].into());
        assert!(c.validate(4).is_err());
        c.sensitive_policy = SensitivePolicy::Fixed([3].into());
        c.target = TargetChoice::Fixed(4);
        assert!(c.validate(4).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let mut c = RunConfig::new(AttackConfig::default());
        c.sensitive_policy = SensitivePolicy::Fixed([1].into());
        c.target = TargetChoice::Fixed(3);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
