use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::BackboneParams;
use super::features::{window_box, window_grid, WindowFeaturizer, FEATURE_COUNT};
use super::head::{CropPlan, HeadParams};
use super::toy::{ObjectnessModel, ToyDetector, ToyDetectorConfig, BACKGROUND};
use super::Detector;
use crate::error::{Error, Result};
use crate::geometry::BoxGeometry;
use crate::image::ImageTensor;
use crate::scene::{Annotation, SceneSource, SHAPE_CATEGORIES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub detector: ToyDetectorConfig,
    /// Category names, background first.
    pub category_names: Vec<String>,
    pub objectness_negatives_per_image: usize,
    pub objectness_iterations: usize,
    pub objectness_positive_iou: f64,
    pub objectness_negative_iou: f64,
    /// Crops at or above this IoU with an object are labeled with its category.
    pub positive_iou: f64,
    /// Crops below this IoU with every object are labeled background.
    pub negative_iou: f64,
    pub jitter_per_object: usize,
    pub random_windows_per_image: usize,
    /// Signed-gradient steps, each toward a shape absent from the image,
    /// whose results teach the object crops as background. Zero disables.
    pub perturbed_steps: usize,
    pub perturbation: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            detector: ToyDetectorConfig::default(),
            category_names: SHAPE_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            objectness_negatives_per_image: 200,
            objectness_iterations: 600,
            objectness_positive_iou: 0.5,
            objectness_negative_iou: 0.3,
            positive_iou: 0.7,
            negative_iou: 0.5,
            jitter_per_object: 10,
            random_windows_per_image: 24,
            perturbed_steps: 1,
            perturbation: 8.0 / 255.0,
            epochs: 30,
            learning_rate: 3e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub images: usize,
    pub objectness_samples: usize,
    /// Fraction of training objects covered by a proposal with IoU >= 0.5.
    pub proposal_recall: f64,
    pub head_samples: usize,
    pub head_samples_per_class: Vec<usize>,
    pub epochs: Vec<EpochStats>,
}

fn best_match(b: &BoxGeometry, annotations: &[Annotation]) -> Option<(f64, usize)> {
    annotations
        .iter()
        .map(|a| (a.geometry.iou(b), a.category_index))
        .max_by(|x, y| x.0.total_cmp(&y.0))
}

fn validate_corpus(corpus: &dyn SceneSource, categories: usize) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Training("training corpus is empty".into()));
    }
    let mut seen = BTreeSet::new();
    for i in 0..corpus.len() {
        for a in corpus.scene(i)?.annotations {
            if a.category_index >= categories || a.category_index == BACKGROUND {
                return Err(Error::Training(format!(
                    "scene {i} has annotation category {} outside 1..{categories}",
                    a.category_index
                )));
            }
            seen.insert(a.category_index);
        }
    }
    if seen.len() < 2 {
        return Err(Error::Training(format!(
            "corpus covers {} object categories; at least two are required",
            seen.len()
        )));
    }
    Ok(())
}

fn fit_objectness(
    corpus: &dyn SceneSource,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ObjectnessModel, usize)> {
    let mut feats: Vec<[f64; FEATURE_COUNT]> = Vec::new();
    let mut labels: Vec<bool> = Vec::new();
    for i in 0..corpus.len() {
        let scene = corpus.scene(i)?;
        let img = &scene.image;
        let featurizer = WindowFeaturizer::new(img);
        let grid = window_grid(
            img.height(),
            img.width(),
            &config.detector.window_sizes,
            config.detector.stride,
        );
        let mut negatives = Vec::new();
        for &(x0, y0, s) in &grid {
            let iou = best_match(&window_box(x0, y0, s), &scene.annotations).map_or(0.0, |m| m.0);
            if iou >= config.objectness_positive_iou {
                feats.push(featurizer.features(x0, y0, s));
                labels.push(true);
            } else if iou < config.objectness_negative_iou {
                negatives.push((x0, y0, s));
            }
        }
        negatives.shuffle(rng);
        for &(x0, y0, s) in negatives.iter().take(config.objectness_negatives_per_image) {
            feats.push(featurizer.features(x0, y0, s));
            labels.push(false);
        }
    }
    let n = feats.len();
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == n {
        return Err(Error::Training(
            "objectness training needs positive and negative windows".into(),
        ));
    }

    let mut mean = [0.0; FEATURE_COUNT];
    for f in &feats {
        for k in 0..FEATURE_COUNT {
            mean[k] += f[k] / n as f64;
        }
    }
    let mut scale = [0.0; FEATURE_COUNT];
    for k in 0..FEATURE_COUNT {
        let var = feats.iter().map(|f| (f[k] - mean[k]).powi(2)).sum::<f64>() / n as f64;
        scale[k] = 1.0 / (var.sqrt() + 1e-9);
    }
    let xs: Vec<[f64; FEATURE_COUNT]> = feats
        .iter()
        .map(|f| std::array::from_fn(|k| (f[k] - mean[k]) * scale[k]))
        .collect();

    // class-balanced logistic regression, full-batch gradient descent
    let w_pos = 0.5 / positives as f64;
    let w_neg = 0.5 / (n - positives) as f64;
    let mut weights = [0.0; FEATURE_COUNT];
    let mut bias = 0.0;
    let lr = 1.0;
    let l2 = 1e-4;
    for _ in 0..config.objectness_iterations {
        let mut gw = [0.0; FEATURE_COUNT];
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(&labels) {
            let z = bias + (0..FEATURE_COUNT).map(|k| weights[k] * x[k]).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let (t, w) = if y { (1.0, w_pos) } else { (0.0, w_neg) };
            let d = w * (p - t);
            gb += d;
            for k in 0..FEATURE_COUNT {
                gw[k] += d * x[k];
            }
        }
        bias -= lr * gb;
        for k in 0..FEATURE_COUNT {
            weights[k] -= lr * (gw[k] + l2 * weights[k]);
        }
    }
    Ok((
        ObjectnessModel {
            mean,
            scale,
            weights,
            bias,
        },
        n,
    ))
}

/// Randomly shifted and rescaled copy of `b`, clipped to the image.
/// `spread` bounds the relative shift.
fn jittered(
    b: &BoxGeometry,
    spread: f64,
    rng: &mut ChaCha8Rng,
    width: usize,
    height: usize,
) -> Option<BoxGeometry> {
    let s = b.width().max(b.height());
    let dx = rng.random_range(-spread..spread) * s;
    let dy = rng.random_range(-spread..spread) * s;
    let scale = rng.random_range(1.0 - spread..1.0 + 1.5 * spread);
    let cx = (b.x_min + b.x_max) / 2.0 + dx;
    let cy = (b.y_min + b.y_max) / 2.0 + dy;
    let hw = b.width() * scale / 2.0;
    let hh = b.height() * scale / 2.0;
    BoxGeometry {
        x_min: cx - hw,
        y_min: cy - hh,
        x_max: cx + hw,
        y_max: cy + hh,
    }
    .clipped(width, height)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &[&mut Vec<f64>]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Applies one update and clears `grads`.
    fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: Vec<&mut Vec<f64>>, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + 1e-8);
                g[i] = 0.0;
            }
        }
    }
}

fn all_tensors<'a>(
    backbone: &'a mut BackboneParams,
    head: &'a mut HeadParams,
) -> Vec<&'a mut Vec<f64>> {
    backbone
        .tensors_mut()
        .into_iter()
        .chain(head.tensors_mut())
        .collect()
}

struct PassGrads<'a> {
    backbone: &'a mut BackboneParams,
    head: &'a mut HeadParams,
}

/// Mean cross-entropy of `samples` on `img`. Accumulates parameter gradients
/// when `params` is given and returns the pixel gradient when `pixels` is set.
fn sample_pass(
    detector: &ToyDetector,
    img: &ImageTensor,
    samples: &[(BoxGeometry, usize)],
    background_mix: f64,
    params: Option<PassGrads<'_>>,
    pixels: bool,
) -> (f64, usize, Option<Vec<f64>>) {
    let map = detector.backbone.forward(img);
    let mut d_map = vec![0.0; map.data.len()];
    let inv = 1.0 / samples.len() as f64;
    let (mut loss, mut correct) = (0.0, 0);
    let (bg, mut hg) = match params {
        Some(PassGrads { backbone, head }) => (Some(backbone), Some(head)),
        None => (None, None),
    };
    for &(b, label) in samples {
        let plan = CropPlan::new(&b, detector.config().crop_context, map.width, map.height);
        let cache = detector.head.forward(&plan.extract(&map));
        let keep = 1.0 - background_mix;
        loss -= keep * cache.probs[label].max(f64::MIN_POSITIVE).ln()
            + background_mix * cache.probs[BACKGROUND].max(f64::MIN_POSITIVE).ln();
        if super::argmax(&cache.probs) == label {
            correct += 1;
        }
        let mut d: Vec<f64> = cache.probs.iter().map(|p| p * inv).collect();
        d[label] -= keep * inv;
        d[BACKGROUND] -= background_mix * inv;
        let d_crop = detector.head.backward(&cache, &d, hg.as_deref_mut());
        plan.scatter(&d_crop, map.width, &mut d_map);
    }
    let mut d_img = pixels.then(|| vec![0.0; img.len()]);
    detector
        .backbone
        .backward(img, &map, &d_map, bg, d_img.as_deref_mut());
    (loss, correct, d_img)
}

/// Trains both stages of a [`ToyDetector`] on a labeled corpus.
///
/// Deterministic for a fixed `config.seed`. Fails on an empty corpus, on
/// annotation categories outside the table, or when fewer than two object
/// categories occur (attacks need at least one category absent from an image).
pub fn train_toy_detector(
    corpus: &dyn SceneSource,
    config: &TrainConfig,
) -> Result<(ToyDetector, TrainingLog)> {
    let k = config.category_names.len();
    if k < 3 || config.category_names[BACKGROUND] != "background" {
        return Err(Error::Training(
            "category table must start with `background` and name at least two objects".into(),
        ));
    }
    config
        .detector
        .validate()
        .map_err(|e| Error::Training(e.to_string()))?;
    validate_corpus(corpus, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let (objectness, objectness_samples) = fit_objectness(corpus, config, &mut rng)?;
    let backbone = BackboneParams::init(&mut rng);
    let head = HeadParams::init(k, &mut rng);
    let mut detector = ToyDetector::from_parts(
        config.category_names.clone(),
        config.detector.clone(),
        objectness,
        backbone,
        head,
    );

    // stage-two samples: the detector's own proposals plus jittered truths
    let mut samples: Vec<Vec<(BoxGeometry, usize)>> = Vec::with_capacity(corpus.len());
    let mut per_class = vec![0usize; k];
    let (mut objects, mut covered) = (0usize, 0usize);
    for i in 0..corpus.len() {
        let scene = corpus.scene(i)?;
        let img = &scene.image;
        let proposals = detector.propose(img)?;
        objects += scene.annotations.len();
        covered += scene
            .annotations
            .iter()
            .filter(|a| proposals.iter().any(|p| p.geometry.iou(&a.geometry) >= 0.5))
            .count();

        let mut boxes: Vec<BoxGeometry> = proposals.iter().map(|p| p.geometry).collect();
        for a in &scene.annotations {
            boxes.push(a.geometry);
            for _ in 0..config.jitter_per_object {
                boxes.extend(jittered(
                    &a.geometry,
                    0.15,
                    &mut rng,
                    img.width(),
                    img.height(),
                ));
                // mostly partial overlaps, which must read as background
                boxes.extend(jittered(
                    &a.geometry,
                    0.5,
                    &mut rng,
                    img.width(),
                    img.height(),
                ));
            }
        }
        let grid = window_grid(
            img.height(),
            img.width(),
            &config.detector.window_sizes,
            config.detector.stride,
        );
        for _ in 0..config.random_windows_per_image {
            let (x0, y0, s) = grid[rng.random_range(0..grid.len())];
            boxes.push(window_box(x0, y0, s));
        }
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for b in boxes {
            match best_match(&b, &scene.annotations) {
                Some((iou, cat)) if iou >= config.positive_iou => positives.push((b, cat)),
                Some((iou, _)) if iou >= config.negative_iou => {}
                _ => negatives.push((b, BACKGROUND)),
            }
        }
        negatives.shuffle(&mut rng);
        negatives.truncate((3 * positives.len()).max(24));
        let mut image_samples: Vec<(BoxGeometry, usize)> =
            positives.into_iter().chain(negatives).collect();
        image_samples.shuffle(&mut rng);
        for &(_, label) in &image_samples {
            per_class[label] += 1;
        }
        samples.push(image_samples);
    }

    // end to end, one image per update
    let n: usize = samples.iter().map(Vec::len).sum();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut backbone_grads = detector.backbone.zeros_like();
    let mut head_grads = detector.head.zeros_like();
    let mut adam = Adam::new(&all_tensors(&mut detector.backbone, &mut detector.head));
    let total_steps = (config.epochs * order.len()).max(1);
    let mut step = 0usize;
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for &img_idx in &order {
            let batch = &samples[img_idx];
            if batch.is_empty() {
                continue;
            }
            let scene = corpus.scene(img_idx)?;
            let (loss, ok, _) = sample_pass(
                &detector,
                &scene.image,
                batch,
                0.0,
                Some(PassGrads {
                    backbone: &mut backbone_grads,
                    head: &mut head_grads,
                }),
                false,
            );
            loss_sum += loss;
            correct += ok;

            let absent: Vec<usize> = (1..k)
                .filter(|c| !scene.annotations.iter().any(|a| a.category_index == *c))
                .collect();
            let objects: Vec<(BoxGeometry, usize)> = batch
                .iter()
                .filter(|s| s.1 != BACKGROUND)
                .copied()
                .collect();
            if !absent.is_empty() && !objects.is_empty() {
                let mut x = scene.image.clone();
                for step in 1..=config.perturbed_steps {
                    let target = absent[rng.random_range(0..absent.len())];
                    let steered: Vec<_> = objects.iter().map(|&(b, _)| (b, target)).collect();
                    let (_, _, g) = sample_pass(&detector, &x, &steered, 0.0, None, true);
                    let g = g.expect("pixel gradient requested");
                    let data: Vec<f64> = x
                        .as_slice()
                        .iter()
                        .zip(&g)
                        .map(|(v, d)| {
                            let sign = if *d > 0.0 {
                                1.0
                            } else if *d < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            v - config.perturbation * sign
                        })
                        .collect();
                    x = ImageTensor::from_raw_clamped(x.height(), x.width(), data);
                    sample_pass(
                        &detector,
                        &x,
                        &objects,
                        step as f64 / config.perturbed_steps as f64,
                        Some(PassGrads {
                            backbone: &mut backbone_grads,
                            head: &mut head_grads,
                        }),
                        false,
                    );
                }
            }
            // cosine decay to a tenth of the base rate
            let progress = step as f64 / total_steps as f64;
            let lr = config.learning_rate
                * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            adam.step(
                all_tensors(&mut detector.backbone, &mut detector.head),
                all_tensors(&mut backbone_grads, &mut head_grads),
                lr,
            );
            step += 1;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} accuracy {:.4}",
            stats.mean_loss,
            stats.accuracy
        );
        epochs.push(stats);
    }

    let log = TrainingLog {
        images: corpus.len(),
        objectness_samples,
        proposal_recall: if objects == 0 {
            0.0
        } else {
            covered as f64 / objects as f64
        },
        head_samples: n,
        head_samples_per_class: per_class,
        epochs,
    };
    Ok((detector, log))
}
