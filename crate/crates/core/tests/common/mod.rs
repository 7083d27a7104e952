#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vanish_core::attack::AttackMode;
use vanish_core::detector::{Detection, Detector, Proposal, ScoreMatrix, ToyDetector};
use vanish_core::geometry::BoxGeometry;
use vanish_core::image::{ImageGradient, ImageTensor};
use vanish_core::metrics::{
    leakage_all, leakage_sensitive, success_rate_all, success_rate_sensitive, ImageOutcome,
    MatchCriterion, Rate,
};
use vanish_core::scene::Annotation;
use vanish_core::Result;

/// Fixed proposals, logits linear in each box's per-channel mean.
/// Column 0 is background.
pub struct LinearDetector {
    names: Vec<String>,
    pub boxes: Vec<BoxGeometry>,
    /// `K x 3` weights and `K` biases.
    pub weights: Vec<[f64; 3]>,
    pub bias: Vec<f64>,
    pub propose_calls: AtomicUsize,
}

impl LinearDetector {
    pub fn new(boxes: Vec<BoxGeometry>, weights: Vec<[f64; 3]>, bias: Vec<f64>) -> Self {
        let names = (0..weights.len())
            .map(|k| {
                if k == 0 {
                    "background".into()
                } else {
                    format!("c{k}")
                }
            })
            .collect();
        LinearDetector {
            names,
            boxes,
            weights,
            bias,
            propose_calls: AtomicUsize::new(0),
        }
    }

    /// Red and green patches score as categories 1 and 2; grey is background.
    pub fn colour_detector(boxes: Vec<BoxGeometry>) -> Self {
        LinearDetector::new(
            boxes,
            vec![[0.0, 0.0, 0.0], [12.0, -6.0, -6.0], [-6.0, 12.0, -6.0]],
            vec![0.0, -2.0, -2.0],
        )
    }

    pub fn calls(&self) -> usize {
        self.propose_calls.load(Ordering::SeqCst)
    }

    fn pixels(b: &BoxGeometry, image: &ImageTensor) -> Vec<(usize, usize)> {
        let (x0, y0) = (b.x_min.max(0.0) as usize, b.y_min.max(0.0) as usize);
        let x1 = (b.x_max.ceil() as usize).min(image.width());
        let y1 = (b.y_max.ceil() as usize).min(image.height());
        (y0..y1)
            .flat_map(|y| (x0..x1).map(move |x| (y, x)))
            .collect()
    }

    fn probabilities(&self, image: &ImageTensor, b: &BoxGeometry) -> Vec<f64> {
        let px = Self::pixels(b, image);
        let mut mean = [0.0; 3];
        for &(y, x) in &px {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += image.get(y, x, c);
            }
        }
        mean.iter_mut().for_each(|m| *m /= px.len() as f64);
        let logits: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(&mean).map(|(w, m)| w * m).sum::<f64>() + b)
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|z| (z - top).exp()).collect();
        let sum: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / sum).collect()
    }
}

impl Detector for LinearDetector {
    fn category_names(&self) -> &[String] {
        &self.names
    }

    fn background(&self) -> Option<usize> {
        Some(0)
    }

    fn propose(&self, _image: &ImageTensor) -> Result<Vec<Proposal>> {
        self.propose_calls.fetch_add(1, Ordering::SeqCst);
        Ok(self
            .boxes
            .iter()
            .map(|&geometry| Proposal {
                geometry,
                objectness: 1.0,
            })
            .collect())
    }

    fn classify(&self, image: &ImageTensor, proposals: &[Proposal]) -> Result<ScoreMatrix> {
        let k = self.weights.len();
        let scores = proposals
            .iter()
            .flat_map(|p| self.probabilities(image, &p.geometry))
            .collect();
        ScoreMatrix::new(proposals.len(), k, scores)
    }

    fn loss_and_gradient(
        &self,
        image: &ImageTensor,
        proposals: &[Proposal],
        target_label: usize,
    ) -> Result<(f64, ImageGradient)> {
        let mut grad = ImageGradient::zeros_like(image);
        let mut loss = 0.0;
        let m = proposals.len() as f64;
        for p in proposals {
            let probs = self.probabilities(image, &p.geometry);
            loss -= probs[target_label].ln() / m;
            let px = Self::pixels(&p.geometry, image);
            // d(-log p_t)/d mean_c = sum_k (p_k - [k = t]) w_kc
            let mut d_mean = [0.0; 3];
            for (k, w) in self.weights.iter().enumerate() {
                let coeff = probs[k] - f64::from(k == target_label);
                for c in 0..3 {
                    d_mean[c] += coeff * w[c];
                }
            }
            for &(y, x) in &px {
                for (c, dm) in d_mean.iter().enumerate() {
                    grad.data[image.index(y, x, c)] += dm / px.len() as f64 / m;
                }
            }
        }
        Ok((loss, grad))
    }
}

/// Grey canvas with a coloured square.
pub fn patch_image(size: usize, colour: [f64; 3], at: (usize, usize), side: usize) -> ImageTensor {
    ImageTensor::from_fn(size, size, |y, x| {
        if (at.1..at.1 + side).contains(&y) && (at.0..at.0 + side).contains(&x) {
            colour
        } else {
            [0.5; 3]
        }
    })
    .unwrap()
}

pub fn square(x: f64, y: f64, side: f64) -> BoxGeometry {
    BoxGeometry::new(x, y, x + side, y + side).unwrap()
}

pub fn random_pair(rng: &mut ChaCha8Rng) -> (ImageTensor, ImageTensor) {
    let (h, w) = (rng.random_range(16..28), rng.random_range(16..28));
    let a: Vec<f64> = (0..h * w * 3).map(|_| rng.random::<f64>()).collect();
    // b is a perturbed copy so the structure term is non-trivial
    let b = a
        .iter()
        .map(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0))
        .collect();
    (
        ImageTensor::new(h, w, a).unwrap(),
        ImageTensor::new(h, w, b).unwrap(),
    )
}

pub fn naive_psnr(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let mut sq = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            for c in 0..3 {
                let d = a.get(y, x, c) - b.get(y, x, c);
                sq += d * d;
            }
        }
    }
    let mse = sq / (a.height() * a.width() * 3) as f64;
    10.0 * (1.0 / mse).log10()
}

pub fn naive_ssim(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let win = 8;
    let mut total = 0.0;
    let mut count = 0.0;
    for c in 0..3 {
        for y0 in 0..=a.height() - win {
            for x0 in 0..=a.width() - win {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for y in y0..y0 + win {
                    for x in x0..x0 + win {
                        xs.push(a.get(y, x, c));
                        ys.push(b.get(y, x, c));
                    }
                }
                let n = xs.len() as f64;
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
                let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
                let cov = xs
                    .iter()
                    .zip(&ys)
                    .map(|(p, q)| (p - mx) * (q - my))
                    .sum::<f64>()
                    / n;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
    }
    total / count
}

pub fn bx(x: f64, y: f64) -> BoxGeometry {
    BoxGeometry::new(x, y, x + 10.0, y + 10.0).unwrap()
}

pub fn det(x: f64, y: f64, c: usize, score: f64) -> Detection {
    Detection {
        geometry: bx(x, y),
        category_index: c,
        score,
    }
}

pub fn gt(x: f64, y: f64, c: usize) -> Annotation {
    Annotation {
        geometry: bx(x, y),
        category_index: c,
    }
}

pub fn outcome(
    id: u64,
    mode: AttackMode,
    before: Vec<Detection>,
    after: Vec<Detection>,
) -> ImageOutcome {
    ImageOutcome {
        image_id: id,
        mode,
        original_detections: before,
        adversarial_detections: after,
        sensitive_categories: None,
        ground_truth: None,
    }
}

/// Four hide-all images: 3 boxes -> 0, 2 -> 1, 1 -> 0, 0 -> 0.
/// Hand count: R_all = 3/4, P_all = 1/6.
pub fn hand_counted_all() -> (Rate, Rate) {
    let outs = vec![
        outcome(
            1,
            AttackMode::All,
            vec![
                det(0.0, 0.0, 1, 0.9),
                det(20.0, 0.0, 2, 0.8),
                det(40.0, 0.0, 1, 0.7),
            ],
            vec![],
        ),
        outcome(
            2,
            AttackMode::All,
            vec![det(0.0, 0.0, 1, 0.9), det(20.0, 0.0, 2, 0.8)],
            vec![det(21.0, 0.0, 3, 0.4)],
        ),
        outcome(3, AttackMode::All, vec![det(0.0, 0.0, 3, 0.9)], vec![]),
        outcome(4, AttackMode::All, vec![], vec![]),
    ];
    (
        success_rate_all(&outs).unwrap(),
        leakage_all(&outs).unwrap(),
    )
}

/// Four sensitive images with circle (1) sensitive.
/// Hand count: R_sen = 2/4, P_sen = 2/5.
pub fn hand_counted_sensitive() -> (Rate, Rate) {
    let crit = MatchCriterion::default();
    let with = |id, before, after, truth: Vec<Annotation>| ImageOutcome {
        sensitive_categories: Some(BTreeSet::from([1])),
        ground_truth: Some(truth),
        ..outcome(id, AttackMode::Sensitive, before, after)
    };
    let outs = vec![
        // circle relabelled as triangle: hidden
        with(
            1,
            vec![det(0.0, 0.0, 1, 0.9)],
            vec![det(0.0, 0.0, 3, 0.8)],
            vec![gt(0.0, 0.0, 1)],
        ),
        // circle still found at IoU >= 0.5: leaked
        with(
            2,
            vec![det(0.0, 0.0, 1, 0.9), det(30.0, 0.0, 2, 0.9)],
            vec![det(1.0, 1.0, 1, 0.5), det(30.0, 0.0, 2, 0.9)],
            vec![gt(0.0, 0.0, 1), gt(30.0, 0.0, 2)],
        ),
        // circle found only far from its ground truth: hidden, not leaked
        with(
            3,
            vec![det(0.0, 0.0, 1, 0.9)],
            vec![det(50.0, 50.0, 1, 0.6)],
            vec![gt(0.0, 0.0, 1)],
        ),
        // two circles, one survives
        with(
            4,
            vec![det(0.0, 0.0, 1, 0.9), det(40.0, 0.0, 1, 0.9)],
            vec![det(40.0, 0.0, 1, 0.7)],
            vec![gt(0.0, 0.0, 1), gt(40.0, 0.0, 1)],
        ),
    ];
    (
        success_rate_sensitive(&outs, &crit).unwrap(),
        leakage_sensitive(&outs, &crit).unwrap(),
    )
}

const FD_STEP: f64 = 1e-3;

pub fn probe(seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..32 * 32 * 3)
        .map(|_| rng.random_range(0.05..0.95))
        .collect();
    ImageTensor::new(32, 32, data).unwrap()
}

pub fn probe_proposals() -> Vec<Proposal> {
    [
        (0.0, 0.0, 32.0, 32.0),
        (4.0, 4.0, 28.0, 28.0),
        (8.0, 2.0, 30.0, 20.0),
        (1.5, 9.0, 17.5, 31.0),
    ]
    .iter()
    .map(|&(a, b, c, d)| Proposal {
        geometry: BoxGeometry::new(a, b, c, d).unwrap(),
        objectness: 1.0,
    })
    .collect()
}

fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Fraction of sampled pixels where the analytic gradient agrees with
/// central differences.
pub fn gradient_agreement(det: &ToyDetector, seed: u64, samples: usize) -> (usize, f64) {
    let img = probe(seed);
    let props = probe_proposals();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let target = rng.random_range(0..det.category_count());
    let (_, grad) = det.loss_and_gradient(&img, &props, target).unwrap();
    let loss = |x: &ImageTensor| det.loss_and_gradient(x, &props, target).unwrap().0;
    let mut good = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let i = rng.random_range(0..img.len());
        let v = img.as_slice()[i];
        let fd = (loss(&img.with_value(i, v + FD_STEP)) - loss(&img.with_value(i, v - FD_STEP)))
            / (2.0 * FD_STEP);
        let e = relative_error(fd, grad.data[i]);
        worst = worst.max(e);
        good += usize::from(e < 1e-3);
    }
    (good, worst)
}
