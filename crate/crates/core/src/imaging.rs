//! Multi-channel float images, resampling, and the on-disk tensor format.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

/// Magic prefix of the raw tensor format: 4 bytes, then H, W, C as u32 LE.
pub const RAW_MAGIC: &[u8; 4] = b"C2FT";

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad raw tensor header")]
    BadMagic,
    #[error("truncated tensor data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("png encoding failed: {0}")]
    Png(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// H×W×C image of 32-bit reals, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != height * width * channels {
            return Err(ImageError::Shape(format!(
                "{} values for {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    /// Value at signed coordinates, zero outside the image.
    #[inline]
    pub fn get_or_zero(&self, y: i64, x: i64, c: usize) -> f32 {
        if y < 0 || x < 0 || y >= self.height as i64 || x >= self.width as i64 {
            0.0
        } else {
            self.get(y as usize, x as usize, c)
        }
    }

    /// Bilinear sample at continuous pixel-centre coordinates; zero outside.
    pub fn bilinear(&self, y: f64, x: f64, c: usize) -> f32 {
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = (y - y0) as f32;
        let fx = (x - x0) as f32;
        let (y0, x0) = (y0 as i64, x0 as i64);
        let a = self.get_or_zero(y0, x0, c);
        let b = self.get_or_zero(y0, x0 + 1, c);
        let cc = self.get_or_zero(y0 + 1, x0, c);
        let d = self.get_or_zero(y0 + 1, x0 + 1, c);
        let top = if fx == 0.0 { a } else { a + (b - a) * fx };
        let bot = if fx == 0.0 { cc } else { cc + (d - cc) * fx };
        if fy == 0.0 {
            top
        } else {
            top + (bot - top) * fy
        }
    }

    pub fn channel(&self, c: usize) -> Image {
        let mut out = Image::new(self.height, self.width, 1);
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            out.data[i] = px[c];
        }
        out
    }

    /// Concatenates images with equal H×W along the channel axis.
    pub fn concat_channels(images: &[&Image]) -> Result<Image, ImageError> {
        let first = images.first().ok_or_else(|| ImageError::Shape("no images".into()))?;
        let (h, w) = (first.height, first.width);
        if images.iter().any(|im| im.height != h || im.width != w) {
            return Err(ImageError::Shape("concat of images with different sizes".into()));
        }
        let c: usize = images.iter().map(|im| im.channels).sum();
        let mut out = Image::new(h, w, c);
        for p in 0..h * w {
            let mut k = 0;
            for im in images {
                for ci in 0..im.channels {
                    out.data[p * c + k] = im.data[p * im.channels + ci];
                    k += 1;
                }
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Resizes with bilinear interpolation, half-pixel aligned.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        let mut out = Image::new(out_h, out_w, self.channels);
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        for oy in 0..out_h {
            let y = (oy as f64 + 0.5) * sy - 0.5;
            for ox in 0..out_w {
                let x = (ox as f64 + 0.5) * sx - 0.5;
                for c in 0..self.channels {
                    let v = self.bilinear_clamped(y, x, c);
                    out.set(oy, ox, c, v);
                }
            }
        }
        out
    }

    fn bilinear_clamped(&self, y: f64, x: f64, c: usize) -> f32 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        self.bilinear(y, x, c)
    }

    /// Writes the image as 8-bit PNG; values are clamped to [0, 1] after `scale`.
    pub fn save_png(&self, path: &Path, scale: f32) -> Result<(), ImageError> {
        let to_u8 = |v: f32| ((v * scale).clamp(0.0, 1.0) * 255.0).round() as u8;
        let res = match self.channels {
            1 => image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
                image::Luma([to_u8(self.get(y as usize, x as usize, 0))])
            })
            .save(path),
            _ => image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
                let (y, x) = (y as usize, x as usize);
                let c = |k: usize| to_u8(self.get(y, x, k.min(self.channels - 1)));
                image::Rgb([c(0), c(1), c(2)])
            })
            .save(path),
        };
        res.map_err(|e| ImageError::Png(e.to_string()))
    }

    pub fn raw_byte_len(&self) -> usize {
        16 + 4 * self.data.len()
    }

    pub fn write_raw<W: Write>(&self, mut w: W) -> Result<(), ImageError> {
        w.write_all(RAW_MAGIC)?;
        for d in [self.height, self.width, self.channels] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * self.data.len());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_raw<R: Read>(mut r: R) -> Result<Image, ImageError> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|_| ImageError::Truncated {
            expected: 16,
            found: 0,
        })?;
        if &header[..4] != RAW_MAGIC {
            return Err(ImageError::BadMagic);
        }
        let dim = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (h, w, c) = (dim(0), dim(1), dim(2));
        let n = h * w * c;
        let mut buf = vec![0u8; 4 * n];
        let mut got = 0;
        while got < buf.len() {
            let k = r.read(&mut buf[got..])?;
            if k == 0 {
                return Err(ImageError::Truncated {
                    expected: 4 * n,
                    found: got,
                });
            }
            got += k;
        }
        let data = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Image::from_vec(h, w, c, data)
    }
}

/// Crops a `crop`×`crop` window centred on `center` = (u, v) and bilinearly resizes it
/// to `out`×`out`. Window pixels outside the frame are zero.
pub fn crop_and_resize(frame: &Image, center: (f64, f64), crop: usize, out: usize) -> Image {
    let x0 = (center.0 - crop as f64 / 2.0).round() as i64;
    let y0 = (center.1 - crop as f64 / 2.0).round() as i64;
    let s = crop as f64 / out as f64;
    let mut img = Image::new(out, out, frame.channels);
    for oy in 0..out {
        let y = y0 as f64 + (oy as f64 + 0.5) * s - 0.5;
        for ox in 0..out {
            let x = x0 as f64 + (ox as f64 + 0.5) * s - 0.5;
            for c in 0..frame.channels {
                img.set(oy, ox, c, crop_sample(frame, y, x, y0, x0, crop, c));
            }
        }
    }
    img
}

// Bilinear sample restricted to the crop window: taps outside the frame read zero,
// taps beyond the window edge are clamped to the window.
fn crop_sample(frame: &Image, y: f64, x: f64, y0: i64, x0: i64, crop: usize, c: usize) -> f32 {
    let lo_y = y0 as f64;
    let lo_x = x0 as f64;
    let hi_y = (y0 + crop as i64 - 1) as f64;
    let hi_x = (x0 + crop as i64 - 1) as f64;
    frame.bilinear(y.clamp(lo_y, hi_y), x.clamp(lo_x, hi_x), c)
}

/// Letterboxes to a square with zero padding (content centred), then resizes to `out`×`out`.
pub fn pad_and_resize(frame: &Image, out: usize) -> Image {
    let side = frame.height.max(frame.width) as f64;
    let content_h = ((frame.height as f64) * out as f64 / side).round().max(1.0) as usize;
    let content_w = ((frame.width as f64) * out as f64 / side).round().max(1.0) as usize;
    let content = frame.resize(content_h, content_w);
    let top = (out - content_h) / 2;
    let left = (out - content_w) / 2;
    let mut img = Image::new(out, out, frame.channels);
    for y in 0..content_h {
        for x in 0..content_w {
            for c in 0..frame.channels {
                img.set(top + y, left + x, c, content.get(y, x, c));
            }
        }
    }
    img
}

/// Maps a pixel of the source frame into the padded-resized square image.
pub fn padded_coords(src_h: usize, src_w: usize, out: usize, u: f64, v: f64) -> (f64, f64) {
    let side = src_h.max(src_w) as f64;
    let content_h = ((src_h as f64) * out as f64 / side).round().max(1.0) as usize;
    let content_w = ((src_w as f64) * out as f64 / side).round().max(1.0) as usize;
    let top = ((out - content_h) / 2) as f64;
    let left = ((out - content_w) / 2) as f64;
    let su = content_w as f64 / src_w as f64;
    let sv = content_h as f64 / src_h as f64;
    (left + (u + 0.5) * su - 0.5, top + (v + 0.5) * sv - 0.5)
}
