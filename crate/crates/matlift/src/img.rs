//! Dense row-major image buffers with PNG and float-raster i/o.
//!
//! Two storage conventions exist on disk:
//! - 8-bit PNG for LDR material maps (basecolor is sRGB-encoded, single
//!   channel maps are linear grayscale),
//! - a small float32 raster format (`F32R`) for HDR radiance and linear
//!   reference images.
//!
//! All in-memory math is linear.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::real::Real;

pub const F32R_MAGIC: &[u8; 4] = b"F32R";
pub const F32R_VERSION: u32 = 1;

/// Row-major interleaved image, `channels` floats per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf<R> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<R>,
}

/// The on-disk precision; decoded inputs and HDR rasters live here.
pub type Raster = ImageBuf<f32>;

impl<R: Real> ImageBuf<R> {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        ImageBuf {
            width,
            height,
            channels,
            data: vec![R::zero(); width * height * channels],
        }
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> R) -> Self {
        let mut img = Self::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        img
    }

    #[inline]
    pub fn pixel_index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> R {
        self.data[self.pixel_index(x, y) + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: R) {
        let i = self.pixel_index(x, y) + c;
        self.data[i] = v;
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape<T>(&self, other: &ImageBuf<T>) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn map<T: Real>(&self, f: impl Fn(R) -> T) -> ImageBuf<T> {
        ImageBuf {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<T: Real>(&self) -> ImageBuf<T> {
        self.map(|v| T::of(v.as_f64()))
    }
}

// ---------------------------------------------------------------------------
// sRGB transfer
// ---------------------------------------------------------------------------

pub fn srgb_to_linear(v: f32) -> f32 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(v: f32) -> f32 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_u8_to_linear(v: u8) -> f32 {
    srgb_to_linear(v as f32 / 255.0)
}

pub fn linear_to_srgb_u8(v: f32) -> u8 {
    (linear_to_srgb(v) * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn unit_u8_to_f32(v: u8) -> f32 {
    v as f32 / 255.0
}

pub fn f32_to_unit_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

// ---------------------------------------------------------------------------
// PNG i/o
// ---------------------------------------------------------------------------

/// How pixel values map to the 8-bit PNG payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PngTransfer {
    /// sRGB transfer curve (color data: basecolor maps, preview renders).
    Srgb,
    /// Plain `round(v * 255)` (parameter maps: roughness, metallic).
    Linear,
}

pub fn save_png(img: &Raster, path: &Path, transfer: PngTransfer) -> Result<()> {
    let w = img.width as u32;
    let h = img.height as u32;
    let encode = |v: f32| match transfer {
        PngTransfer::Srgb => linear_to_srgb_u8(v),
        PngTransfer::Linear => f32_to_unit_u8(v),
    };
    let result = match img.channels {
        1 => {
            let buf: Vec<u8> = img.data.iter().map(|&v| encode(v)).collect();
            image::GrayImage::from_raw(w, h, buf)
                .expect("buffer size matches")
                .save(path)
        }
        3 => {
            let buf: Vec<u8> = img.data.iter().map(|&v| encode(v)).collect();
            image::RgbImage::from_raw(w, h, buf)
                .expect("buffer size matches")
                .save(path)
        }
        c => {
            return Err(Error::validation(format!(
                "cannot encode {c}-channel image as PNG"
            )))
        }
    };
    result.map_err(|e| Error::validation(format!("png encode {}: {e}", path.display())))
}

pub fn load_png(path: &Path, transfer: PngTransfer) -> Result<Raster> {
    let dyn_img = image::open(path)
        .map_err(|e| Error::validation(format!("png decode {}: {e}", path.display())))?;
    let decode = |v: u8| match transfer {
        PngTransfer::Srgb => srgb_u8_to_linear(v),
        PngTransfer::Linear => unit_u8_to_f32(v),
    };
    let (width, height, channels, data) = match dyn_img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            let data = g.into_raw().into_iter().map(decode).collect();
            (w, h, 1, data)
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            let data = rgb.into_raw().into_iter().map(decode).collect();
            (w, h, 3, data)
        }
    };
    Ok(Raster {
        width: width as usize,
        height: height as usize,
        channels,
        data,
    })
}

// ---------------------------------------------------------------------------
// Float raster i/o
// ---------------------------------------------------------------------------

pub fn save_f32r(img: &Raster, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(F32R_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(F32R_VERSION).map_err(io)?;
    w.write_u32::<LittleEndian>(img.width as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(img.height as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(img.channels as u32).map_err(io)?;
    for &v in &img.data {
        w.write_f32::<LittleEndian>(v).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_f32r(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::Cursor::new(&bytes);
    let parse = |offset: u64, message: &str| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as usize,
        message: message.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| parse(0, "truncated header"))?;
    if &magic != F32R_MAGIC {
        return Err(parse(0, "bad magic, not an F32R raster"));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| parse(4, "truncated header"))?;
    if version != F32R_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: F32R_VERSION,
        });
    }
    let width = r.read_u32::<LittleEndian>().map_err(|_| parse(8, "truncated header"))? as usize;
    let height = r.read_u32::<LittleEndian>().map_err(|_| parse(12, "truncated header"))? as usize;
    let channels =
        r.read_u32::<LittleEndian>().map_err(|_| parse(16, "truncated header"))? as usize;
    let count = width * height * channels;
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        data.push(
            r.read_f32::<LittleEndian>()
                .map_err(|_| parse(20 + 4 * i as u64, "truncated pixel data"))?,
        );
    }
    Ok(Raster {
        width,
        height,
        channels,
        data,
    })
}
