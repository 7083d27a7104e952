//! Conventional obfuscation filters used as comparison points.

use std::fmt;
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use image::ImageFormat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    LowBrightness,
    GaussianBlur,
    Mosaic,
    AdditiveNoise,
    JpegCompression,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 5] = [
        BaselineMethod::LowBrightness,
        BaselineMethod::GaussianBlur,
        BaselineMethod::Mosaic,
        BaselineMethod::AdditiveNoise,
        BaselineMethod::JpegCompression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::LowBrightness => "low_brightness",
            BaselineMethod::GaussianBlur => "gaussian_blur",
            BaselineMethod::Mosaic => "mosaic",
            BaselineMethod::AdditiveNoise => "additive_noise",
            BaselineMethod::JpegCompression => "jpeg_compression",
        }
    }

    /// Brightness factor, blur sigma, block size, noise sigma or quality.
    pub fn default_parameter(self) -> f64 {
        match self {
            BaselineMethod::LowBrightness => 0.1,
            BaselineMethod::GaussianBlur => 3.0,
            BaselineMethod::Mosaic => 16.0,
            BaselineMethod::AdditiveNoise => 0.08,
            BaselineMethod::JpegCompression => 10.0,
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown baseline method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub method: BaselineMethod,
    pub parameter: f64,
    /// Only used by additive noise.
    #[serde(default)]
    pub seed: u64,
}

impl BaselineSpec {
    pub fn new(method: BaselineMethod, parameter: f64) -> Self {
        BaselineSpec {
            method,
            parameter,
            seed: 0,
        }
    }

    pub fn with_default(method: BaselineMethod) -> Self {
        Self::new(method, method.default_parameter())
    }

    /// All five methods at their default parameters.
    pub fn defaults() -> Vec<BaselineSpec> {
        BaselineMethod::ALL.map(Self::with_default).to_vec()
    }

    /// Short row label, e.g. `mosaic(16)`.
    pub fn label(&self) -> String {
        format!("{}({})", self.method, self.parameter)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.parameter;
        let integer = p.fract() == 0.0;
        let ok = p.is_finite()
            && match self.method {
                BaselineMethod::LowBrightness => p > 0.0 && p < 1.0,
                BaselineMethod::GaussianBlur | BaselineMethod::AdditiveNoise => p > 0.0,
                BaselineMethod::Mosaic => integer && p >= 2.0,
                BaselineMethod::JpegCompression => integer && (1.0..=100.0).contains(&p),
            };
        if ok {
            Ok(())
        } else {
            let want = match self.method {
                BaselineMethod::LowBrightness => "a factor in (0, 1)",
                BaselineMethod::GaussianBlur => "a positive sigma",
                BaselineMethod::AdditiveNoise => "a positive noise sigma",
                BaselineMethod::Mosaic => "an integer block size of at least 2",
                BaselineMethod::JpegCompression => "an integer quality in [1, 100]",
            };
            Err(Error::invalid(format!(
                "{} parameter {p} invalid: expected {want}",
                self.method
            )))
        }
    }
}

pub fn apply_baseline(image: &ImageTensor, spec: &BaselineSpec) -> Result<ImageTensor> {
    spec.validate()?;
    let (h, w) = (image.height(), image.width());
    match spec.method {
        BaselineMethod::LowBrightness => Ok(ImageTensor::from_raw_clamped(
            h,
            w,
            image
                .as_slice()
                .iter()
                .map(|v| v * spec.parameter)
                .collect(),
        )),
        BaselineMethod::GaussianBlur => Ok(gaussian_blur(image, spec.parameter)),
        BaselineMethod::Mosaic => Ok(mosaic(image, spec.parameter as usize)),
        BaselineMethod::AdditiveNoise => {
            let normal = Normal::new(0.0, spec.parameter)
                .map_err(|e| Error::invalid(format!("noise sigma: {e}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            Ok(ImageTensor::from_raw_clamped(
                h,
                w,
                image
                    .as_slice()
                    .iter()
                    .map(|v| v + normal.sample(&mut rng))
                    .collect(),
            ))
        }
        BaselineMethod::JpegCompression => jpeg_round_trip(image, spec.parameter as u8),
    }
}

/// Normalized kernel of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

fn gaussian_blur(image: &ImageTensor, sigma: f64) -> ImageTensor {
    let (h, w) = (image.height(), image.width());
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let src = image.as_slice();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                tmp[(y * w + x) * CHANNELS + c] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| {
                        kv * src[(y * w + reflect(x as i64 + i as i64 - r, w)) * CHANNELS + c]
                    })
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                out[(y * w + x) * CHANNELS + c] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| {
                        kv * tmp[(reflect(y as i64 + i as i64 - r, h) * w + x) * CHANNELS + c]
                    })
                    .sum();
            }
        }
    }
    ImageTensor::from_raw_clamped(h, w, out)
}

/// Tiles start at the top-left corner; edge tiles may be smaller.
fn mosaic(image: &ImageTensor, block: usize) -> ImageTensor {
    let (h, w) = (image.height(), image.width());
    let mut out = image.as_slice().to_vec();
    for ty in (0..h).step_by(block) {
        for tx in (0..w).step_by(block) {
            let (y1, x1) = ((ty + block).min(h), (tx + block).min(w));
            let n = ((y1 - ty) * (x1 - tx)) as f64;
            for c in 0..CHANNELS {
                let mut sum = 0.0;
                for y in ty..y1 {
                    for x in tx..x1 {
                        sum += image.get(y, x, c);
                    }
                }
                for y in ty..y1 {
                    for x in tx..x1 {
                        out[(y * w + x) * CHANNELS + c] = sum / n;
                    }
                }
            }
        }
    }
    ImageTensor::from_raw_clamped(h, w, out)
}

fn jpeg_round_trip(image: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    let codec = |e: image::ImageError| Error::Codec {
        path: "<jpeg round trip>".into(),
        source: e,
    };
    let mut bytes = Vec::new();
    JpegEncoder::new_with_quality(&mut bytes, quality)
        .encode_image(&image.to_rgb8())
        .map_err(codec)?;
    let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Jpeg).map_err(codec)?;
    ImageTensor::from_dynamic(&decoded)
}
