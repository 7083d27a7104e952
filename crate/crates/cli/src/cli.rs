//! Subcommands of the `vanish` binary.

use std::collections::BTreeSet;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vanish_core::attack::{parse_epsilon, run_attack, AttackMode, AttackRecord};
use vanish_core::baselines::{BaselineMethod, BaselineSpec};
use vanish_core::detector::{detect, train_toy_detector, Detector, ToyDetector, TrainConfig};
use vanish_core::harness::{
    load_dataset, run_batch, sweep_parameter, write_corpus, write_report, EvaluationReport,
    RunConfig, SensitivePolicy, SweepParameter, TargetChoice,
};
use vanish_core::image::ImageTensor;
use vanish_core::metrics::{db_serde, psnr, ssim, SsimParams};
use vanish_core::scene::SyntheticCorpus;

use crate::request::{resolve, AttackRequest, Epsilon};
use crate::server::{router, AppState, DetectionView, ServerOptions};

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    /// Ran to completion but some image kept a detection it should not have.
    AttackFailed = 1,
    Error = 2,
}

#[derive(Debug, Parser)]
#[command(
    name = "vanish",
    version,
    about = "Perturb photos so object detectors miss what you choose"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Perturb one image or every PNG/JPEG in a directory.
    Protect(ProtectArgs),
    /// Run the attack and baselines over a dataset and write a report.
    Evaluate(EvaluateArgs),
    /// Repeat an evaluation across values of one parameter.
    Sweep(SweepArgs),
    /// Local HTTP service under /v1.
    Serve(ServeArgs),
    /// Write a synthetic scene corpus with annotations.
    Generate(GenerateArgs),
    /// Train a toy detector checkpoint.
    Train(TrainArgs),
}

#[derive(Debug, Clone, Args)]
pub struct AttackArgs {
    /// `all` hides every detection, `sensitive` only the chosen categories.
    #[arg(long, default_value = "all")]
    pub mode: String,
    /// Per-step bound, as `k/255` or a decimal.
    #[arg(long, default_value = "3/255")]
    pub epsilon: String,
    #[arg(long, default_value_t = 0.3)]
    pub threshold: f64,
    #[arg(long = "max-iters", default_value_t = 150)]
    pub max_iters: usize,
    /// Signed-gradient step; defaults to epsilon.
    #[arg(long)]
    pub step_size: Option<String>,
    /// Sensitive category name; repeat for several.
    #[arg(long)]
    pub sensitive: Vec<String>,
    /// Category the sensitive objects are steered towards.
    #[arg(long = "target-class")]
    pub target_class: Option<String>,
    /// Detector checkpoint; the bundled toy detector by default.
    #[arg(long)]
    pub detector: Option<PathBuf>,
}

impl AttackArgs {
    fn request(&self) -> anyhow::Result<AttackRequest> {
        let mode = self.mode.parse::<AttackMode>()?;
        let step_size = self.step_size.as_deref().map(parse_epsilon).transpose()?;
        Ok(AttackRequest {
            mode,
            sensitive: self.sensitive.clone(),
            sensitive_boxes: Vec::new(),
            target_class: self.target_class.clone(),
            epsilon: Epsilon::Text(self.epsilon.clone()),
            threshold: self.threshold,
            max_iterations: self.max_iters,
            step_size,
        })
    }
}

#[derive(Debug, Args)]
pub struct ProtectArgs {
    #[command(flatten)]
    pub attack: AttackArgs,
    /// Image file or directory of images.
    pub input: PathBuf,
    #[arg(short, long = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub attack: AttackArgs,
    /// Directory with `annotations.json` and images, a bare image directory,
    /// or an annotations file.
    pub dataset: PathBuf,
    #[arg(short, long = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate a seeded random subset of this many images.
    #[arg(long)]
    pub sample: Option<usize>,
    /// `0` uses every core, `1` runs sequentially.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Baselines as `method` or `method=parameter`, comma separated.
    /// `none` disables them.
    #[arg(long)]
    pub baselines: Option<String>,
    /// Skip writing adversarial images.
    #[arg(long)]
    pub no_images: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub eval: EvaluateArgs,
    /// `epsilon`, `threshold`, or a baseline method name.
    #[arg(long)]
    pub param: String,
    /// Comma separated values; `a..b` expands a range of `k/n` fractions
    /// in steps of `1/n`, `a..b:step` uses an explicit step.
    #[arg(long)]
    pub values: String,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8765)]
    pub port: u16,
    /// Interface to bind. Loopback unless told otherwise.
    #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
    pub host: IpAddr,
    #[arg(long)]
    pub detector: Option<PathBuf>,
    /// Sessions attacking concurrently.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Refuse a second job for a busy session with 409 instead of queueing.
    #[arg(long)]
    pub no_queue: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long, default_value_t = 2000)]
    pub seed: u64,
    #[arg(short, long = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 400)]
    pub scenes: usize,
    /// Seed of the training corpus.
    #[arg(long, default_value_t = 1000)]
    pub corpus_seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(short, long = "out")]
    pub out: PathBuf,
}

pub fn load_detector(path: Option<&Path>) -> anyhow::Result<ToyDetector> {
    match path {
        None => Ok(ToyDetector::bundled()),
        Some(p) => {
            ToyDetector::load(p).with_context(|| format!("loading detector {}", p.display()))
        }
    }
}

/// Runs a parsed command. Errors map to [`Status::Error`].
pub fn run(cli: Cli) -> anyhow::Result<Status> {
    match cli.command {
        Command::Protect(a) => protect(&a),
        Command::Evaluate(a) => {
            evaluate(&a)?;
            Ok(Status::Ok)
        }
        Command::Sweep(a) => {
            sweep(&a)?;
            Ok(Status::Ok)
        }
        Command::Serve(a) => serve(&a),
        Command::Generate(a) => {
            let names = ToyDetector::bundled().category_names().to_vec();
            let manifest = write_corpus(&SyntheticCorpus::new(a.seed, a.count), &names, &a.out)?;
            println!("wrote {} scenes to {}", manifest.len(), a.out.display());
            Ok(Status::Ok)
        }
        Command::Train(a) => {
            let mut config = TrainConfig::default();
            if let Some(e) = a.epochs {
                config.epochs = e;
            }
            if let Some(s) = a.seed {
                config.seed = s;
            }
            let (det, log) =
                train_toy_detector(&SyntheticCorpus::new(a.corpus_seed, a.scenes), &config)?;
            det.save(&a.out)?;
            println!("{}", serde_json::to_string_pretty(&log)?);
            Ok(Status::Ok)
        }
    }
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Per-image entry of `summary.json`.
#[derive(Debug, Serialize)]
pub struct ProtectSummary {
    pub input: PathBuf,
    pub output: PathBuf,
    pub original_detections: Vec<DetectionView>,
    pub final_detections: Vec<DetectionView>,
    #[serde(with = "db_serde")]
    pub psnr: f64,
    pub ssim: f64,
    pub record: AttackRecord,
}

fn protect(args: &ProtectArgs) -> anyhow::Result<Status> {
    let detector = load_detector(args.attack.detector.as_deref())?;
    let request = args.attack.request()?;
    let inputs: Vec<PathBuf> = if args.input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&args.input)
            .with_context(|| format!("reading {}", args.input.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        v.sort();
        if v.is_empty() {
            bail!("no PNG or JPEG images in {}", args.input.display());
        }
        v
    } else {
        vec![args.input.clone()]
    };
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let mut summaries = Vec::with_capacity(inputs.len());
    for input in &inputs {
        let image = ImageTensor::read(input)?;
        let pre = detect(&detector, &image, request.threshold)?;
        let (config, target) = resolve(&request, &detector, &pre).map_err(|errors| {
            let lines: Vec<String> = errors.iter().map(|(k, v)| format!("{k}: {v}")).collect();
            anyhow!("invalid parameters\n  {}", lines.join("\n  "))
        })?;
        let result = run_attack(&detector, &image, &config, target.as_ref(), &mut |_, _| {})?;
        let stem = input
            .file_stem()
            .ok_or_else(|| anyhow!("{} has no file name", input.display()))?;
        let output = args.out.join(Path::new(stem).with_extension("png"));
        result.adversarial_image.write_png(&output)?;
        let summary = ProtectSummary {
            input: input.clone(),
            output,
            original_detections: to_views(&detector, &pre),
            final_detections: to_views(&detector, &result.final_detections),
            psnr: psnr(&image, &result.adversarial_image, 1.0)?,
            ssim: ssim(&image, &result.adversarial_image, &SsimParams::default())?,
            record: result.record(),
        };
        println!(
            "{}: {} after {} iterations, {} detections left, PSNR {:.2} dB",
            input.display(),
            if result.succeeded {
                "hidden"
            } else {
                "NOT hidden"
            },
            result.iterations_used,
            result.final_detections.len(),
            summary.psnr
        );
        summaries.push(summary);
    }
    std::fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&summaries)?,
    )?;
    Ok(if summaries.iter().all(|s| s.record.succeeded) {
        Status::Ok
    } else {
        Status::AttackFailed
    })
}

fn to_views(
    detector: &dyn Detector,
    dets: &[vanish_core::detector::Detection],
) -> Vec<DetectionView> {
    crate::server::views(detector, dets)
}

fn parse_baselines(text: &str) -> anyhow::Result<Vec<BaselineSpec>> {
    if text.trim() == "none" {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|item| {
            let (name, value) = match item.split_once('=') {
                Some((n, v)) => (n.trim(), Some(v.trim())),
                None => (item.trim(), None),
            };
            let method: BaselineMethod = name.parse()?;
            let spec = match value {
                Some(v) => BaselineSpec::new(
                    method,
                    v.parse()
                        .with_context(|| format!("baseline parameter `{v}`"))?,
                ),
                None => BaselineSpec::with_default(method),
            };
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

fn run_config(args: &EvaluateArgs, detector: &ToyDetector) -> anyhow::Result<RunConfig> {
    let request = args.attack.request()?;
    // Sensitive sets and targets vary per image, so only the scalar
    // parameters go through the shared resolver here.
    let scalar = AttackRequest {
        mode: AttackMode::All,
        sensitive: Vec::new(),
        sensitive_boxes: Vec::new(),
        target_class: None,
        ..request.clone()
    };
    let (mut attack, _) = resolve(&scalar, detector, &[]).map_err(field_error)?;
    attack.mode = request.mode;
    if request.mode == AttackMode::All
        && (!request.sensitive.is_empty() || request.target_class.is_some())
    {
        bail!("mode: sensitive categories and target class only apply in sensitive mode");
    }
    let mut config = RunConfig::new(attack);
    config.seed = args.seed;
    config.sample = args.sample;
    config.workers = args.workers;
    if let Some(b) = &args.baselines {
        config.baselines = parse_baselines(b)?;
    }
    if !args.no_images {
        config.output_dir = Some(args.out.clone());
    }
    let index = |n: &str| {
        detector
            .category_index(n)
            .ok_or_else(|| anyhow!("unknown category `{n}`"))
    };
    if !args.attack.sensitive.is_empty() {
        let set: BTreeSet<usize> = args
            .attack
            .sensitive
            .iter()
            .map(|n| index(n))
            .collect::<anyhow::Result<_>>()?;
        config.sensitive_policy = SensitivePolicy::Fixed(set);
    }
    if let Some(t) = &args.attack.target_class {
        let t = index(t)?;
        if let SensitivePolicy::Fixed(set) = &config.sensitive_policy {
            if set.contains(&t) {
                bail!("target_class: target class is also sensitive");
            }
        }
        config.target = TargetChoice::Fixed(t);
    }
    config.validate(detector.category_count())?;
    Ok(config)
}

fn field_error(errors: crate::request::FieldErrors) -> anyhow::Error {
    let lines: Vec<String> = errors.iter().map(|(k, v)| format!("{k}: {v}")).collect();
    anyhow!("invalid parameters\n  {}", lines.join("\n  "))
}

fn print_rows(report: &EvaluationReport) {
    for row in &report.rows {
        let leak = row
            .leakage_rate
            .map_or_else(|| "-".to_string(), |l| format!("{:.3}", l.value));
        println!(
            "run {} {:<24} images {:>4}  success {:.3}  leakage {}  PSNR {:.2}  SSIM {:.4}",
            row.run,
            row.method,
            row.images,
            row.success_rate.value,
            leak,
            row.mean_psnr,
            row.mean_ssim
        );
    }
}

pub fn evaluate(args: &EvaluateArgs) -> anyhow::Result<EvaluationReport> {
    let detector = load_detector(args.attack.detector.as_deref())?;
    let config = run_config(args, &detector)?;
    let manifest = load_dataset(&args.dataset, detector.category_names())?;
    let report = run_batch(&detector, &manifest, &config)?;
    write_report(&report, &args.out)?;
    print_rows(&report);
    Ok(report)
}

pub fn sweep(args: &SweepArgs) -> anyhow::Result<EvaluationReport> {
    let detector = load_detector(args.eval.attack.detector.as_deref())?;
    let parameter: SweepParameter = args.param.parse()?;
    let values = parse_values(&args.values)?;
    let config = run_config(&args.eval, &detector)?;
    let manifest = load_dataset(&args.eval.dataset, detector.category_names())?;
    let report = sweep_parameter(&detector, &manifest, &config, parameter, &values)?;
    write_report(&report, &args.eval.out)?;
    print_rows(&report);
    Ok(report)
}

/// Expands a `--values` list. `1/255..4/255` gives four values.
pub fn parse_values(text: &str) -> anyhow::Result<Vec<f64>> {
    let mut out = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let Some((lo, rest)) = item.split_once("..") else {
            out.push(parse_epsilon(item)?);
            continue;
        };
        let (hi, step) = match rest.split_once(':') {
            Some((h, s)) => (h, Some(parse_epsilon(s)?)),
            None => (rest, None),
        };
        let step = match step {
            Some(s) => s,
            None => {
                let den = |t: &str| t.split_once('/').map(|(_, d)| d.trim().to_string());
                match (den(lo), den(hi)) {
                    (Some(a), Some(b)) if a == b => 1.0 / a.parse::<f64>()?,
                    _ => {
                        bail!("range `{item}` needs `a..b:step` unless both ends are k/n fractions")
                    }
                }
            }
        };
        let (lo, hi) = (parse_epsilon(lo)?, parse_epsilon(hi)?);
        if step.is_nan() || step <= 0.0 || hi < lo {
            bail!("empty range `{item}`");
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        out.extend((0..=n).map(|k| lo + k as f64 * step));
    }
    if out.is_empty() {
        bail!("no values given");
    }
    Ok(out)
}

fn serve(args: &ServeArgs) -> anyhow::Result<Status> {
    let detector = load_detector(args.detector.as_deref())?;
    let state = AppState::new(
        Arc::new(detector),
        ServerOptions {
            workers: args.workers,
            queueing: !args.no_queue,
        },
    );
    let addr = SocketAddr::new(args.host, args.port);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        log::info!("listening on http://{addr}/v1");
        println!("listening on http://{addr}/v1");
        axum::serve(listener, router(state)).await?;
        anyhow::Ok(())
    })?;
    Ok(Status::Ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fraction_ranges_expand() {
        let v = parse_values("1/255..10/255").unwrap();
        assert_eq!(v.len(), 10);
        assert_eq!(v[0], 1.0 / 255.0);
        assert!((v[9] - 10.0 / 255.0).abs() < 1e-12);
        assert_eq!(parse_values("0.2,0.4").unwrap(), vec![0.2, 0.4]);
        assert_eq!(parse_values("0.1..0.3:0.1").unwrap().len(), 3);
        assert!(parse_values("0.1..0.3").is_err());
        assert!(parse_values("").is_err());
    }

    #[test]
    fn baseline_lists_parse() {
        let b = parse_baselines("mosaic=8,gaussian_blur").unwrap();
        assert_eq!(b[0], BaselineSpec::new(BaselineMethod::Mosaic, 8.0));
        assert_eq!(
            b[1],
            BaselineSpec::with_default(BaselineMethod::GaussianBlur)
        );
        assert!(parse_baselines("none").unwrap().is_empty());
        assert!(parse_baselines("sepia").is_err());
    }
}
