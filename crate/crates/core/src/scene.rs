//! Synthetic shape scenes with exact box annotations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxGeometry;
use crate::image::ImageTensor;

/// Category table of the synthetic world; index 0 is the background column.
pub const SHAPE_CATEGORIES: [&str; 4] = ["background", "circle", "square", "triangle"];

/// Largest IoU allowed between two shapes of one scene.
pub const MAX_SHAPE_IOU: f64 = 0.2;

const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn category_index(self) -> usize {
        match self {
            ShapeKind::Circle => 1,
            ShapeKind::Square => 2,
            ShapeKind::Triangle => 3,
        }
    }

    pub fn name(self) -> &'static str {
        SHAPE_CATEGORIES[self.category_index()]
    }

    /// Whether the point lies inside a shape occupying `[0, 1]^2`.
    fn contains_unit(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            ShapeKind::Square => (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v),
            // apex at top centre, base along the bottom edge
            ShapeKind::Triangle => (0.0..=1.0).contains(&v) && (u - 0.5).abs() <= 0.5 * v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: [f64; 3],
    /// Top-left corner of the bounding square.
    pub x: f64,
    pub y: f64,
    pub size: f64,
}

impl ShapeSpec {
    pub fn bounds(&self) -> BoxGeometry {
        BoxGeometry {
            x_min: self.x,
            y_min: self.y,
            x_max: self.x + self.size,
            y_max: self.y + self.size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    /// Per-channel change of the background across the canvas diagonal.
    pub tilt: [f64; 3],
    pub texture_seed: u64,
    pub texture_amplitude: f64,
    pub shapes: Vec<ShapeSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub geometry: BoxGeometry,
    pub category_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: u64,
    pub image: ImageTensor,
    pub annotations: Vec<Annotation>,
}

/// Parameters of [`SceneSpec::random`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneOptions {
    pub canvas: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub texture_amplitude: f64,
    /// Minimum RGB distance between a shape and the background base color.
    pub min_contrast: f64,
}

impl Default for SceneOptions {
    fn default() -> Self {
        SceneOptions {
            canvas: 224,
            min_shapes: 1,
            max_shapes: 3,
            min_size: 64,
            max_size: 96,
            texture_amplitude: 0.04,
            min_contrast: 0.4,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < crate::image::MIN_SIDE || self.height < crate::image::MIN_SIDE {
            return Err(Error::invalid(format!(
                "canvas {}x{} is too small",
                self.width, self.height
            )));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            let b = s.bounds();
            if s.size <= 0.0 || !b.within(self.width, self.height) {
                return Err(Error::Generation(format!(
                    "shape {i} at {b:?} does not fit the canvas"
                )));
            }
            if s.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::invalid(format!("shape {i} color outside [0, 1]")));
            }
            for (j, other) in self.shapes.iter().enumerate().take(i) {
                let iou = b.iou(&other.bounds());
                if iou > MAX_SHAPE_IOU {
                    return Err(Error::Generation(format!(
                        "shapes {j} and {i} overlap with IoU {iou:.3}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Samples a scene. Shapes never touch each other; fails if they cannot
    /// be placed within a bounded number of attempts.
    pub fn random(rng: &mut impl Rng, opts: &SceneOptions) -> Result<SceneSpec> {
        let background: [f64; 3] = [0; 3].map(|_| rng.random_range(0.25..0.75));
        let tilt: [f64; 3] = [0; 3].map(|_| rng.random_range(-0.1..0.1));
        let count = rng.random_range(opts.min_shapes..=opts.max_shapes);
        let mut shapes: Vec<ShapeSpec> = Vec::with_capacity(count);
        const GAP: f64 = 6.0;
        // a bad early placement can make the rest impossible, so start over
        // a bounded number of times before giving up
        let (mut attempts, mut restarts) = (0, 0);
        while shapes.len() < count {
            attempts += 1;
            if attempts > 200 {
                restarts += 1;
                if restarts > 50 {
                    return Err(Error::Generation(format!(
                        "could not place {count} shapes on a {} canvas",
                        opts.canvas
                    )));
                }
                shapes.clear();
                attempts = 0;
            }
            let size = rng.random_range(opts.min_size..=opts.max_size) as f64;
            let room = opts.canvas as f64 - size;
            if room < 0.0 {
                return Err(Error::Generation(format!(
                    "shape size {size} exceeds canvas {}",
                    opts.canvas
                )));
            }
            let x = rng.random_range(0..=room as usize) as f64;
            let y = rng.random_range(0..=room as usize) as f64;
            let kind = ShapeKind::ALL[rng.random_range(0..3)];
            let color = loop {
                let c: [f64; 3] = [0; 3].map(|_| rng.random_range(0.0..1.0));
                let d: f64 = c
                    .iter()
                    .zip(&background)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if d >= opts.min_contrast {
                    break c;
                }
            };
            let cand = ShapeSpec {
                kind,
                color,
                x,
                y,
                size,
            };
            let padded = BoxGeometry {
                x_min: x - GAP,
                y_min: y - GAP,
                x_max: x + size + GAP,
                y_max: y + size + GAP,
            };
            if shapes
                .iter()
                .all(|s| s.bounds().intersection(&padded) == 0.0)
            {
                shapes.push(cand);
            }
        }
        Ok(SceneSpec {
            width: opts.canvas,
            height: opts.canvas,
            background,
            tilt,
            texture_seed: rng.random(),
            texture_amplitude: opts.texture_amplitude,
            shapes,
        })
    }

    pub fn annotations(&self) -> Vec<Annotation> {
        self.shapes
            .iter()
            .map(|s| Annotation {
                geometry: s.bounds(),
                category_index: s.kind.category_index(),
            })
            .collect()
    }
}

/// Renders `spec` into an 8-bit-quantized image plus its box annotations.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<(ImageTensor, Vec<Annotation>)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed ^ seed.rotate_left(29));

    // low-frequency value noise on a coarse lattice, bilinearly interpolated
    const COARSE: usize = 7;
    let coarse: Vec<f64> = (0..COARSE * COARSE * 3)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let amp = spec.texture_amplitude;
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let gy = y as f64 / (h - 1) as f64 * (COARSE - 1) as f64;
            let gx = x as f64 / (w - 1) as f64 * (COARSE - 1) as f64;
            let (y0, x0) = ((gy as usize).min(COARSE - 2), (gx as usize).min(COARSE - 2));
            let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
            let diag = (x + y) as f64 / (w + h - 2) as f64 - 0.5;
            for c in 0..3 {
                let at = |yy: usize, xx: usize| coarse[(yy * COARSE + xx) * 3 + c];
                let smooth = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
                let grain: f64 = rng.random_range(-1.0..1.0);
                data.push(
                    spec.background[c] + spec.tilt[c] * diag + amp * smooth + amp * 0.35 * grain,
                );
            }
        }
    }

    let samples = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for shape in &spec.shapes {
        let b = shape.bounds();
        let (px0, py0) = (b.x_min.floor() as usize, b.y_min.floor() as usize);
        let (px1, py1) = (
            (b.x_max.ceil() as usize).min(w),
            (b.y_max.ceil() as usize).min(h),
        );
        for py in py0..py1 {
            for px in px0..px1 {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let fx = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        let fy = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        let u = (fx - shape.x) / shape.size;
                        let v = (fy - shape.y) / shape.size;
                        if shape.kind.contains_unit(u, v) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    let alpha = hits as f64 / samples;
                    let k = (py * w + px) * 3;
                    for c in 0..3 {
                        data[k + c] = (1.0 - alpha) * data[k + c] + alpha * shape.color[c];
                    }
                }
            }
        }
    }

    let image = ImageTensor::from_raw_clamped(h, w, data).quantized_u8();
    Ok((image, spec.annotations()))
}

/// Random access to labeled images, so large corpora need not sit in memory.
pub trait SceneSource: Sync {
    fn len(&self) -> usize;

    fn scene(&self, index: usize) -> Result<LabeledImage>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SceneSource for [LabeledImage] {
    fn len(&self) -> usize {
        <[LabeledImage]>::len(self)
    }

    fn scene(&self, index: usize) -> Result<LabeledImage> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("scene index {index} out of range")))
    }
}

impl SceneSource for Vec<LabeledImage> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn scene(&self, index: usize) -> Result<LabeledImage> {
        self.as_slice().scene(index)
    }
}

/// Lazily rendered scenes; scene `i` depends only on `(seed, i, options)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub seed: u64,
    pub count: usize,
    pub options: SceneOptions,
}

impl SyntheticCorpus {
    pub fn new(seed: u64, count: usize) -> Self {
        SyntheticCorpus {
            seed,
            count,
            options: SceneOptions::default(),
        }
    }

    pub fn spec(&self, index: usize) -> Result<SceneSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        SceneSpec::random(&mut rng, &self.options)
    }
}

impl SceneSource for SyntheticCorpus {
    fn len(&self) -> usize {
        self.count
    }

    fn scene(&self, index: usize) -> Result<LabeledImage> {
        if index >= self.count {
            return Err(Error::invalid(format!("scene index {index} out of range")));
        }
        let spec = self.spec(index)?;
        let (image, annotations) = generate_scene(&spec, self.seed)?;
        Ok(LabeledImage {
            id: index as u64 + 1,
            image,
            annotations,
        })
    }
}
