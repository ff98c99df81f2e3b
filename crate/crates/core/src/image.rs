//! Grayscale images in `[0, 1]` and their 8-bit on-disk forms (binary PGM, PPM, PNG).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A luma image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{} pixels for a {height}x{width} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(GrayImage {
            height,
            width,
            data,
        })
    }

    /// Builds an image from arbitrary reals, clamping into `[0, 1]`. NaN is an error.
    pub fn from_clamped(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite {
                context: "image pixels".into(),
            });
        }
        Self::new(height, width, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    /// Pixel at `(i, j)` with coordinates clamped into the image (edge replication).
    #[inline]
    pub fn get_clamped(&self, i: isize, j: isize) -> f64 {
        let i = i.clamp(0, self.height as isize - 1) as usize;
        let j = j.clamp(0, self.width as isize - 1) as usize;
        self.get(i, j)
    }

    /// `round(clamp(v, 0, 1) * 255)` with ties away from zero.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_byte(v)).collect()
    }

    /// The image snapped to the 8-bit grid, as it would be after a save/load cycle.
    pub fn quantized(&self) -> GrayImage {
        GrayImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| to_byte(v) as f64 / 255.0).collect(),
        }
    }

    /// Edge-replicating pad.
    pub fn pad_replicate(&self, top: usize, bottom: usize, left: usize, right: usize) -> GrayImage {
        let h = self.height + top + bottom;
        let w = self.width + left + right;
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                data.push(self.get_clamped(i as isize - top as isize, j as isize - left as isize));
            }
        }
        GrayImage {
            height: h,
            width: w,
            data,
        }
    }

    /// Largest absolute pixel difference; infinite when the sizes differ.
    pub fn max_abs_diff(&self, other: &GrayImage) -> f64 {
        if self.dims() != other.dims() {
            return f64::INFINITY;
        }
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<GrayImage> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width);
        for i in top..top + height {
            data.extend_from_slice(&self.data[i * self.width + left..i * self.width + left + width]);
        }
        Ok(GrayImage {
            height,
            width,
            data,
        })
    }
}

pub(crate) fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// BT.601 full-range luma of an 8-bit RGB triple, scaled to `[0, 1]`.
pub fn rgb_to_luma(r: u8, g: u8, b: u8) -> f64 {
    let y = (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0;
    y.clamp(0.0, 1.0)
}

/// Loads a binary PGM/PPM or an 8-bit PNG. Color input is reduced to luma.
pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Image {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes).map_err(bad)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(&bytes).map_err(bad)
    } else {
        Err(bad("not a binary PGM/PPM or PNG file".into()))
    }
}

/// Writes an 8-bit binary PGM (`P5`, maxval 255).
pub fn save_gray(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let write = || -> std::io::Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        write!(out, "P5\n{} {}\n255\n", img.width, img.height)?;
        out.write_all(&img.to_bytes())?;
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

fn decode_pnm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let channels = if bytes[1] == b'5' { 1 } else { 3 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| "truncated header".to_string())?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}; only 8-bit images are supported"));
    }
    if width == 0 || height == 0 {
        return Err("zero-sized image".into());
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err("missing separator after header".into());
    }
    pos += 1;
    let need = width * height * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("expected {need} raster bytes"))?;
    raster_to_gray(height, width, channels, raster)
}

fn decode_png(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or("image too large")?];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format!("unsupported bit depth {:?}", info.bit_depth));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(format!("unsupported color type {other:?}")),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    if w == 0 || h == 0 {
        return Err("zero-sized image".into());
    }
    raster_to_gray(h, w, channels, &buf[..info.buffer_size()])
}

fn raster_to_gray(
    height: usize,
    width: usize,
    channels: usize,
    raster: &[u8],
) -> std::result::Result<GrayImage, String> {
    let data = raster
        .chunks_exact(channels)
        .map(|px| match channels {
            1 | 2 => px[0] as f64 / 255.0,
            _ => rgb_to_luma(px[0], px[1], px[2]),
        })
        .collect();
    GrayImage::new(height, width, data).map_err(|e| e.to_string())
}
