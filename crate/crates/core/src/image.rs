//! Float images and PNG input/output.
//!
//! Pixels are stored row-major, channels interleaved (`H×W×C`), with values
//! nominally in `[0, 1]`. The pixel/NDC convention used everywhere in the
//! crate: column `c`, row `r` of a `W×H` raster has its center at
//! `x = (2c+1)/W − 1`, `y = 1 − (2r+1)/H` (y up, origin at the center).

use std::io::Cursor;
use std::path::Path;

use thiserror::Error;

use crate::geom::Point2;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("unsupported png layout: {0}")]
    Unsupported(String),
    #[error("image shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let channels = value.len();
        let mut data = Vec::with_capacity(width * height * channels);
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        Image {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn from_data(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, ImageError> {
        if data.len() != width * height * channels {
            return Err(ImageError::Shape(format!(
                "{}x{}x{} needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(col, row)` per pixel.
    pub fn from_fn<F>(width: usize, height: usize, channels: usize, mut f: F) -> Self
    where
        F: FnMut(usize, usize) -> Vec<f64>,
    {
        let mut img = Image::new(width, height, channels);
        for r in 0..height {
            for c in 0..width {
                let px = f(c, r);
                img.pixel_mut(c, r).copy_from_slice(&px[..channels]);
            }
        }
        img
    }

    #[inline]
    pub fn pixel(&self, col: usize, row: usize) -> &[f64] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, col: usize, row: usize) -> &mut [f64] {
        let i = (row * self.width + col) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.width, self.height, self.channels)
    }

    /// Composites onto an opaque background color and drops alpha. Images
    /// without an alpha channel are returned as RGB unchanged.
    pub fn to_rgb_over(&self, background: [f64; 3]) -> Image {
        match self.channels {
            3 => self.clone(),
            4 => {
                let mut out = Image::new(self.width, self.height, 3);
                for (src, dst) in self.data.chunks(4).zip(out.data.chunks_mut(3)) {
                    let a = src[3];
                    for k in 0..3 {
                        dst[k] = a * src[k] + (1.0 - a) * background[k];
                    }
                }
                out
            }
            1 => {
                let mut out = Image::new(self.width, self.height, 3);
                for (src, dst) in self.data.iter().zip(out.data.chunks_mut(3)) {
                    dst.fill(*src);
                }
                out
            }
            2 => {
                let mut out = Image::new(self.width, self.height, 3);
                for (src, dst) in self.data.chunks(2).zip(out.data.chunks_mut(3)) {
                    dst.fill(src[1] * src[0] + (1.0 - src[1]) * background[0]);
                }
                out
            }
            _ => panic!("unsupported channel count {}", self.channels),
        }
    }

    /// Converts to RGBA; images without alpha become opaque.
    pub fn to_rgba(&self) -> Image {
        match self.channels {
            4 => self.clone(),
            2 => {
                let mut out = Image::new(self.width, self.height, 4);
                for (s, d) in self.data.chunks(2).zip(out.data.chunks_mut(4)) {
                    d[..3].fill(s[0]);
                    d[3] = s[1];
                }
                out
            }
            _ => {
                let rgb = self.to_rgb_over([0.0; 3]);
                let mut out = Image::new(self.width, self.height, 4);
                for (s, d) in rgb.data.chunks(3).zip(out.data.chunks_mut(4)) {
                    d[..3].copy_from_slice(s);
                    d[3] = 1.0;
                }
                out
            }
        }
    }

    /// Keeps the first `n` channels.
    pub fn take_channels(&self, n: usize) -> Image {
        assert!(n <= self.channels);
        let mut out = Image::new(self.width, self.height, n);
        for (src, dst) in self.data.chunks(self.channels).zip(out.data.chunks_mut(n)) {
            dst.copy_from_slice(&src[..n]);
        }
        out
    }

    /// Bilinear resampling to a new size (pixel-center aligned).
    pub fn resample(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Image::new(width, height, self.channels);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for r in 0..height {
            let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for c in 0..width {
                let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for k in 0..self.channels {
                    let v00 = self.pixel(x0, y0)[k];
                    let v10 = self.pixel(x1, y0)[k];
                    let v01 = self.pixel(x0, y1)[k];
                    let v11 = self.pixel(x1, y1)[k];
                    let top = v00 + (v10 - v00) * tx;
                    let bot = v01 + (v11 - v01) * tx;
                    out.pixel_mut(c, r)[k] = top + (bot - top) * ty;
                }
            }
        }
        out
    }

    /// Decodes an 8- or 16-bit PNG into a float image with 1–4 channels.
    pub fn decode_png(bytes: &[u8]) -> Result<Image, ImageError> {
        let mut decoder = png::Decoder::new(Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::normalize_to_color8());
        let mut reader = decoder.read_info()?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| ImageError::Unsupported("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf)?;
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(ImageError::Unsupported(format!("{other:?}"))),
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let mut img = Image::new(w, h, channels);
        for r in 0..h {
            let row = &buf[r * info.line_size..r * info.line_size + w * channels];
            for (i, v) in row.iter().enumerate() {
                img.data[r * w * channels + i] = *v as f64 / 255.0;
            }
        }
        Ok(img)
    }

    /// Encodes as an 8-bit PNG (gray, gray+alpha, RGB or RGBA by channel count).
    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            2 => png::ColorType::GrayscaleAlpha,
            3 => png::ColorType::Rgb,
            4 => png::ColorType::Rgba,
            n => return Err(ImageError::Unsupported(format!("{n} channels"))),
        };
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(color);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header()?;
            writer.write_image_data(&self.to_u8())?;
            writer.finish()?;
        }
        Ok(out)
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image, ImageError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Image::decode_png(&bytes)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let path = path.as_ref();
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// NDC coordinates of the center of pixel (`col`, `row`).
#[inline]
pub fn pixel_center(col: usize, row: usize, width: usize, height: usize) -> Point2 {
    [
        (2 * col + 1) as f64 / width as f64 - 1.0,
        1.0 - (2 * row + 1) as f64 / height as f64,
    ]
}

/// Continuous pixel coordinates `[col, row]` of an NDC point; pixel centers
/// map to integers.
#[inline]
pub fn ndc_to_pixel(p: Point2, width: usize, height: usize) -> Point2 {
    [
        ((p[0] + 1.0) * width as f64 - 1.0) * 0.5,
        ((1.0 - p[1]) * height as f64 - 1.0) * 0.5,
    ]
}

/// Inverse of [`ndc_to_pixel`].
#[inline]
pub fn pixel_to_ndc(p: Point2, width: usize, height: usize) -> Point2 {
    [
        (2.0 * p[0] + 1.0) / width as f64 - 1.0,
        1.0 - (2.0 * p[1] + 1.0) / height as f64,
    ]
}
