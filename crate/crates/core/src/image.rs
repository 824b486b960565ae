//! Float images and their on-disk forms.
//!
//! Every image is stored twice: an 8-bit PNG for viewing and a raw
//! little-endian `f32` sidecar (`<stem>.f32`, row-major, channels
//! interleaved) with a JSON header next to it (`<stem>.f32.json`). Metrics
//! only ever read the sidecar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, IoContext, Result};

/// Row-major float image with `channels` interleaved values per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct SidecarHeader {
    width: usize,
    height: usize,
    channels: usize,
    dtype: String,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f32]) -> Self {
        let mut img = Image::new(width, height, value.len());
        for px in img.data.chunks_exact_mut(value.len()) {
            px.copy_from_slice(value);
        }
        img
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(invalid(format!(
                "factor {factor} does not divide {}x{}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = Image::new(w, h, self.channels);
        let norm = 1.0 / (factor * factor) as f32;
        for y in 0..h {
            for x in 0..w {
                let dst = out.pixel_mut(x, y);
                for dy in 0..factor {
                    for dx in 0..factor {
                        let src = self.pixel(x * factor + dx, y * factor + dy);
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                for d in dst.iter_mut() {
                    *d *= norm;
                }
            }
        }
        Ok(out)
    }

    /// Nearest-neighbour upscaling to `width`×`height`.
    pub fn upscale_nearest(&self, width: usize, height: usize) -> Image {
        let mut out = Image::new(width, height, self.channels);
        for y in 0..height {
            let sy = (y * self.height / height).min(self.height - 1);
            for x in 0..width {
                let sx = (x * self.width / width).min(self.width - 1);
                out.pixel_mut(x, y).copy_from_slice(self.pixel(sx, sy));
            }
        }
        out
    }

    /// Channel mean, producing a single-channel image.
    pub fn luma_mean(&self) -> Image {
        let c = self.channels as f32;
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f32>() / c)
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes).at(path)?;
        let header = SidecarHeader {
            width: self.width,
            height: self.height,
            channels: self.channels,
            dtype: "f32le".into(),
        };
        let hpath = header_path(path);
        std::fs::write(&hpath, serde_json::to_string_pretty(&header)?).at(&hpath)
    }

    pub fn read_sidecar(path: &Path) -> Result<Image> {
        let hpath = header_path(path);
        let header: SidecarHeader = serde_json::from_str(&std::fs::read_to_string(&hpath).at(&hpath)?)?;
        if header.dtype != "f32le" {
            return Err(invalid(format!("unsupported sidecar dtype {}", header.dtype)));
        }
        let bytes = std::fs::read(path).at(path)?;
        if bytes.len() != header.width * header.height * header.channels * 4 {
            return Err(Error::DimensionMismatch(format!(
                "{}: {} bytes does not match header",
                path.display(),
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Image::from_data(header.width, header.height, header.channels, data)
    }

    /// 8-bit PNG, values clamped to [0, 1]. Single-channel images are
    /// written as grey.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let to8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self.channels {
            1 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| to8(v)).collect();
                ::image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
                    .expect("buffer sized from image")
                    .save(path)?;
            }
            3 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| to8(v)).collect();
                ::image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
                    .expect("buffer sized from image")
                    .save(path)?;
            }
            c => return Err(invalid(format!("cannot write {c}-channel PNG"))),
        }
        Ok(())
    }

    /// Writes `<stem>.png` and `<stem>.f32` (+ header) into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.write_png(&dir.join(format!("{stem}.png")))?;
        self.write_sidecar(&dir.join(format!("{stem}.f32")))
    }

    /// Maps a single-channel image through a blue-to-yellow ramp, scaled so
    /// `max` reaches the top of the ramp.
    pub fn heatmap(&self, max: f32) -> Image {
        assert_eq!(self.channels, 1, "heatmap needs a single channel");
        let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
        let mut out = Image::new(self.width, self.height, 3);
        for (dst, &v) in out.data.chunks_exact_mut(3).zip(&self.data) {
            let t = (v * scale).clamp(0.0, 1.0);
            // piecewise-linear approximation of a viridis-like ramp
            let stops = [
                [0.267, 0.005, 0.329],
                [0.229, 0.322, 0.546],
                [0.128, 0.567, 0.551],
                [0.369, 0.789, 0.383],
                [0.993, 0.906, 0.144],
            ];
            let f = t * 4.0;
            let i = (f.floor() as usize).min(3);
            let a = f - i as f32;
            for c in 0..3 {
                dst[c] = stops[i][c] * (1.0 - a) + stops[i + 1][c] * a;
            }
        }
        out
    }
}

fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}
