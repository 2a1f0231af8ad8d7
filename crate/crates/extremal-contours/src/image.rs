//! Dense image tensor in `[0,1]` with HWC layout.

use std::path::Path;

use crate::error::{Error, Result};

/// H×W×C image with scalar values in `[0,1]`, row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    values: Vec<f64>,
    height: usize,
    width: usize,
    channels: usize,
}

impl ImageTensor {
    pub fn new(values: Vec<f64>, height: usize, width: usize, channels: usize) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::ShapeMismatch {
                what: "channels",
                got: channels.to_string(),
                expected: "1 or 3".into(),
            });
        }
        if values.len() != height * width * channels {
            return Err(Error::ShapeMismatch {
                what: "image buffer",
                got: values.len().to_string(),
                expected: (height * width * channels).to_string(),
            });
        }
        if !values.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Config("image values must lie in [0,1]".into()));
        }
        Ok(ImageTensor {
            values,
            height,
            width,
            channels,
        })
    }

    /// Construct without scanning values; callers guarantee range.
    pub(crate) fn from_parts(
        values: Vec<f64>,
        height: usize,
        width: usize,
        channels: usize,
    ) -> Self {
        debug_assert_eq!(values.len(), height * width * channels);
        ImageTensor {
            values,
            height,
            width,
            channels,
        }
    }

    pub fn constant(value: f64, height: usize, width: usize, channels: usize) -> Result<Self> {
        ImageTensor::new(
            vec![value; height * width * channels],
            height,
            width,
            channels,
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.values[self.index(row, col, channel)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        let i = self.index(row, col, channel);
        self.values[i] = value;
    }

    /// Channel mean at a pixel.
    #[inline]
    pub fn luminance(&self, row: usize, col: usize) -> f64 {
        let base = (row * self.width + col) * self.channels;
        let mut s = 0.0;
        for c in 0..self.channels {
            s += self.values[base + c];
        }
        s / self.channels as f64
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
    }

    /// Load an 8-bit PNG/PPM file. Grayscale stays single-channel, color is
    /// read as RGB; values map to `v/255` with no color-space transform.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::ImageDecode {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(match img {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = (g.width() as usize, g.height() as usize);
                let values = g.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
                ImageTensor::from_parts(values, h, w, 1)
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let values = rgb.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
                ImageTensor::from_parts(values, h, w, 3)
            }
        })
    }

    /// Encode as 8-bit PNG (`round(255·v)`).
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<u8> = self
            .values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let mut out = Vec::new();
        let enc = image::codecs::png::PngEncoder::new(&mut out);
        use image::ImageEncoder;
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        enc.write_image(&raw, self.width as u32, self.height as u32, color)
            .map_err(|e| Error::Config(format!("png encode: {e}")))?;
        Ok(out)
    }

    /// Image buffer as little-endian f32 HWC bytes (the wire format).
    pub fn to_f32_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_f32_bytes(
        bytes: &[u8],
        height: usize,
        width: usize,
        channels: usize,
    ) -> Result<Self> {
        if bytes.len() != height * width * channels * 4 {
            return Err(Error::ShapeMismatch {
                what: "f32 image buffer",
                got: bytes.len().to_string(),
                expected: (height * width * channels * 4).to_string(),
            });
        }
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Ok(ImageTensor::from_parts(values, height, width, channels))
    }
}
