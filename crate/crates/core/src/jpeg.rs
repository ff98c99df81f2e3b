//! Luma-only JPEG degradation: blockwise DCT, quality-scaled quantization and
//! reconstruction. Entropy coding is lossless and therefore omitted.

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// ITU-T T.81 Annex K luminance table (quality 50), row-major.
pub const BASE_LUMINANCE: [[u16; 8]; 8] = [
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
];

/// 8x8 quantization divisors, each in `1..=255`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantTable {
    pub values: [[u16; 8]; 8],
}

impl QuantTable {
    /// IJG quality scaling of the Annex K luminance table.
    pub fn for_quality(quality: u8) -> Result<Self> {
        if !(1..=100).contains(&quality) {
            return Err(Error::invalid(format!(
                "JPEG quality {quality} outside 1..=100"
            )));
        }
        let q = quality as u32;
        let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
        let mut values = [[0u16; 8]; 8];
        for (row, base_row) in values.iter_mut().zip(BASE_LUMINANCE.iter()) {
            for (v, &b) in row.iter_mut().zip(base_row.iter()) {
                *v = ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16;
            }
        }
        Ok(QuantTable { values })
    }
}

pub fn quant_table(quality: u8) -> Result<QuantTable> {
    QuantTable::for_quality(quality)
}

/// Coefficients of an orthonormal 8x8 DCT-II; `coefficients[u][v]` is vertical
/// frequency `u`, horizontal frequency `v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DctBlock {
    pub coefficients: [[f64; 8]; 8],
}

/// `BASIS[u][x] = a(u) cos((2x + 1) u pi / 16)`, orthonormal rows.
fn basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = a * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        b
    })
}

pub fn dct8_forward(block: &[[f64; 8]; 8]) -> DctBlock {
    let b = basis();
    // rows first: tmp = block * B^T, then out = B * tmp
    let mut tmp = [[0.0; 8]; 8];
    for x in 0..8 {
        for v in 0..8 {
            tmp[x][v] = (0..8).map(|y| block[x][y] * b[v][y]).sum();
        }
    }
    let mut out = [[0.0; 8]; 8];
    for u in 0..8 {
        for v in 0..8 {
            out[u][v] = (0..8).map(|x| b[u][x] * tmp[x][v]).sum();
        }
    }
    DctBlock { coefficients: out }
}

pub fn dct8_inverse(block: &DctBlock) -> [[f64; 8]; 8] {
    let b = basis();
    let c = &block.coefficients;
    let mut tmp = [[0.0; 8]; 8];
    for u in 0..8 {
        for y in 0..8 {
            tmp[u][y] = (0..8).map(|v| c[u][v] * b[v][y]).sum();
        }
    }
    let mut out = [[0.0; 8]; 8];
    for x in 0..8 {
        for y in 0..8 {
            out[x][y] = (0..8).map(|u| b[u][x] * tmp[u][y]).sum();
        }
    }
    out
}

/// Quantizes and reconstructs one level-shifted 8x8 block in place.
fn requantize(block: &mut [[f64; 8]; 8], table: &QuantTable) {
    let mut coef = dct8_forward(block);
    for (row, qrow) in coef.coefficients.iter_mut().zip(table.values.iter()) {
        for (c, &q) in row.iter_mut().zip(qrow.iter()) {
            let q = q as f64;
            *c = (*c / q).round() * q;
        }
    }
    *block = dct8_inverse(&coef);
}

/// Simulates a JPEG encode/decode of the luma plane at `quality`.
///
/// The image is edge-padded to a multiple of 8, every block is level-shifted,
/// transformed, quantized (ties away from zero), reconstructed, clamped and
/// rounded to 8 bits like a decoder would, then cropped back.
pub fn jpeg_degrade(img: &GrayImage, quality: u8) -> Result<GrayImage> {
    let table = QuantTable::for_quality(quality)?;
    let (h, w) = img.dims();
    let bw = w.div_ceil(8);
    let mut out = vec![0.0; h * w];
    out.par_chunks_mut(8 * w)
        .enumerate()
        .for_each(|(by, band)| {
            for bx in 0..bw {
                let mut block = [[0.0; 8]; 8];
                for (x, row) in block.iter_mut().enumerate() {
                    for (y, v) in row.iter_mut().enumerate() {
                        let px = img.get_clamped((by * 8 + x) as isize, (bx * 8 + y) as isize);
                        *v = px * 255.0 - 128.0;
                    }
                }
                requantize(&mut block, &table);
                for (x, row) in block.iter().enumerate() {
                    let i = by * 8 + x;
                    if i >= h {
                        break;
                    }
                    for (y, &v) in row.iter().enumerate() {
                        let j = bx * 8 + y;
                        if j >= w {
                            break;
                        }
                        band[x * w + j] = (v + 128.0).clamp(0.0, 255.0).round() / 255.0;
                    }
                }
            }
        });
    GrayImage::new(h, w, out)
}
