//! RGB images on the unit interval.
//!
//! Pixels are stored row-major, channel-interleaved (`H x W x 3`) as `f64`.
//! Files are read from any format the `image` crate understands and written
//! as 16-bit PNG. Values on the 16-bit storage lattice (`n / 65535`, which
//! includes every 8-bit value `k / 255`) survive a write/read cycle exactly.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Rgb};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Smallest side length accepted by [`ImageTensor::new`].
pub const MIN_SIDE: usize = 16;

/// Number of intervals in the lossless storage lattice.
pub const STORAGE_LEVELS: f64 = 65535.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::invalid(format!(
                "image {height}x{width} is smaller than the {MIN_SIDE}x{MIN_SIDE} minimum"
            )));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::invalid(format!(
                "pixel buffer has {} values, expected {}",
                data.len(),
                height * width * CHANNELS
            )));
        }
        if let Some(pos) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!(
                "pixel value {} at flat index {pos} is outside [0, 1]",
                data[pos]
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * CHANNELS])
    }

    /// Builds an image from a per-pixel closure returning an RGB triple.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    /// Clamps every value into [0, 1] instead of rejecting out-of-range input.
    pub(crate) fn from_raw_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * CHANNELS);
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        ImageTensor {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * CHANNELS + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                left_h: self.height,
                left_w: self.width,
                right_h: other.height,
                right_w: other.width,
            })
        }
    }

    /// Returns a copy with one value replaced, clamped into [0, 1].
    pub fn with_value(&self, flat_index: usize, value: f64) -> ImageTensor {
        let mut data = self.data.clone();
        data[flat_index] = value.clamp(0.0, 1.0);
        ImageTensor {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Maximum absolute per-value difference.
    pub fn linf_distance(&self, other: &ImageTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Mean of every channel value.
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Snaps every value to the nearest 8-bit level.
    pub fn quantized_u8(&self) -> ImageTensor {
        let data = self
            .data
            .iter()
            .map(|v| (v * 255.0).round() / 255.0)
            .collect();
        ImageTensor {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let raw = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn to_rgb16(&self) -> ImageBuffer<Rgb<u16>, Vec<u16>> {
        let raw = self.data.iter().map(|&v| to_storage_level(v)).collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn from_dynamic(img: &DynamicImage) -> Result<ImageTensor> {
        let rgb = img.to_rgb16();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(from_storage_level).collect();
        ImageTensor::new(h as usize, w as usize, data)
    }

    /// Encodes as a 16-bit RGB PNG.
    pub fn encode_png(&self) -> Vec<u8> {
        let mut out = Cursor::new(Vec::new());
        DynamicImage::ImageRgb16(self.to_rgb16())
            .write_to(&mut out, ImageFormat::Png)
            .expect("in-memory PNG encoding cannot fail");
        out.into_inner()
    }

    pub fn decode(bytes: &[u8]) -> Result<ImageTensor> {
        let img = image::load_from_memory(bytes).map_err(|source| Error::Codec {
            path: "<memory>".into(),
            source,
        })?;
        Self::from_dynamic(&img)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<ImageTensor> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Codec {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_dynamic(&img)
    }

    /// Writes a lossless 16-bit PNG.
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode_png()).map_err(|e| Error::io(path, e))
    }

    /// Writes an 8-bit PNG (lossy unless the image is already 8-bit).
    pub fn write_png8(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save_with_format(path, ImageFormat::Png)
            .map_err(|source| Error::Codec {
                path: path.to_path_buf(),
                source,
            })
    }
}

#[inline]
pub fn to_storage_level(v: f64) -> u16 {
    (v * STORAGE_LEVELS).round().clamp(0.0, STORAGE_LEVELS) as u16
}

#[inline]
pub fn from_storage_level(n: u16) -> f64 {
    f64::from(n) / STORAGE_LEVELS
}

/// Same layout as an [`ImageTensor`], unconstrained values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGradient {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageGradient {
    pub fn zeros_like(image: &ImageTensor) -> Self {
        ImageGradient {
            height: image.height,
            width: image.width,
            data: vec![0.0; image.len()],
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}
