use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};

/// Row-major image with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawHeader {
    width: usize,
    height: usize,
    channels: usize,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let channels = value.len();
        let mut data = Vec::with_capacity(width * height * channels);
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        Self { width, height, channels, data }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}×{height}×{channels} image",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if (self.width, self.height, self.channels) != (other.width, other.height, other.channels) {
            return Err(Error::DimensionMismatch(format!(
                "{}×{}×{} vs {}×{}×{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )));
        }
        Ok(())
    }

    /// One channel as a single-channel image.
    pub fn channel(&self, c: usize) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { data: self.data.iter().map(|v| f(*v)).collect(), ..self.clone() }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let bytes: Vec<u8> = self.data.iter().map(|v| q(*v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes)
                .ok_or_else(|| Error::Format("buffer size".into()))?
                .save(path)?,
            3 => image::RgbImage::from_raw(w, h, bytes)
                .ok_or_else(|| Error::Format("buffer size".into()))?
                .save(path)?,
            c => return Err(Error::InvalidArgument(format!("cannot write {c}-channel PNG"))),
        }
        Ok(())
    }

    /// Loads a PNG as RGB (`channels = 3`) or luminance (`channels = 1`).
    pub fn load_png(path: &Path, channels: usize) -> Result<Self> {
        let img = image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data: Vec<f64> = match channels {
            1 => img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
            3 => img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
            c => return Err(Error::InvalidArgument(format!("cannot read {c}-channel PNG"))),
        };
        Self::from_data(w, h, channels, data)
    }

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let header = RawHeader { width: self.width, height: self.height, channels: self.channels };
        binio::write(path, &header, &binio::f64s_to_bytes(&self.data))
    }

    pub fn load_raw(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let (h, payload): (RawHeader, _) = binio::decode(&bytes)?;
        let data = binio::bytes_to_f64s(payload, h.width * h.height * h.channels)?;
        Self::from_data(h.width, h.height, h.channels, data)
    }
}
