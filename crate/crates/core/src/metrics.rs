//! Full-reference quality metrics on the 8-bit scale.
//!
//! Images are compared on `[0, 255]` reals. Identical images have infinite
//! PSNR; that value is reported as `f64::INFINITY` and left out of means.

use std::sync::OnceLock;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::GrayImage;

const PEAK: f64 = 255.0;

fn same_dims(a: &GrayImage, b: &GrayImage) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "image sizes differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean squared difference on the `[0, 255]` scale.
pub fn mse(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    same_dims(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = (x - y) * PEAK;
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PEAK * PEAK / mse).log10()
    }
}

pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Blocking effect factor of `img` for a block grid anchored at the origin.
///
/// Squared differences of horizontally and vertically adjacent pixels are
/// split into pairs that straddle a block boundary and pairs that do not; the
/// excess of the boundary mean over the interior mean is weighted by
/// `log2(block) / log2(min(H, W))`.
pub fn blocking_effect_factor(img: &GrayImage, block: usize) -> Result<f64> {
    if block < 2 {
        return Err(Error::invalid(format!("block size {block} must be at least 2")));
    }
    let (h, w) = img.dims();
    let px = |i: usize, j: usize| img.get(i, j) * PEAK;
    let (mut boundary, mut n_boundary) = (0.0, 0usize);
    let (mut interior, mut n_interior) = (0.0, 0usize);
    // pair (j, j+1) straddles a boundary when j+1 is a multiple of `block`
    for i in 0..h {
        for j in 0..w.saturating_sub(1) {
            let d = px(i, j) - px(i, j + 1);
            if (j + 1) % block == 0 {
                boundary += d * d;
                n_boundary += 1;
            } else {
                interior += d * d;
                n_interior += 1;
            }
        }
    }
    for i in 0..h.saturating_sub(1) {
        for j in 0..w {
            let d = px(i, j) - px(i + 1, j);
            if (i + 1) % block == 0 {
                boundary += d * d;
                n_boundary += 1;
            } else {
                interior += d * d;
                n_interior += 1;
            }
        }
    }
    if n_boundary == 0 || n_interior == 0 {
        return Ok(0.0);
    }
    let db = boundary / n_boundary as f64;
    let dbc = interior / n_interior as f64;
    let min_side = h.min(w) as f64;
    if db <= dbc || min_side <= 1.0 {
        return Ok(0.0);
    }
    let eta = (block as f64).log2() / min_side.log2();
    Ok(eta * (db - dbc))
}

/// PSNR penalized by the blocking effect factor of `restored`.
pub fn psnr_b(restored: &GrayImage, reference: &GrayImage, block: usize) -> Result<f64> {
    let m = mse(restored, reference)?;
    let bef = blocking_effect_factor(restored, block)?;
    Ok(psnr_from_mse(m + bef))
}

/// Normalized 11-tap Gaussian, sigma 1.5.
fn gaussian_window() -> &'static [f64; 11] {
    static WINDOW: OnceLock<[f64; 11]> = OnceLock::new();
    WINDOW.get_or_init(|| {
        let mut g = [0.0; 11];
        for (i, v) in g.iter_mut().enumerate() {
            let x = i as f64 - 5.0;
            *v = (-(x * x) / (2.0 * 1.5 * 1.5)).exp();
        }
        let s: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= s);
        g
    })
}

/// Valid separable filtering of a `h x w` plane with the SSIM window.
fn filter_valid(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let g = gaussian_window();
    let (ho, wo) = (h - 10, w - 10);
    let mut rows = vec![0.0; h * wo];
    for i in 0..h {
        let line = &src[i * w..(i + 1) * w];
        for j in 0..wo {
            rows[i * wo + j] = g.iter().zip(&line[j..j + 11]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            out[i * wo + j] = (0..11).map(|u| g[u] * rows[(i + u) * wo + j]).sum();
        }
    }
    out
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
/// averaged over all fully interior window positions.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = a.dims();
    if h < 11 || w < 11 {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            min_height: 11,
            min_width: 11,
        });
    }
    let c1 = (0.01 * PEAK).powi(2);
    let c2 = (0.03 * PEAK).powi(2);
    let x: Vec<f64> = a.data().iter().map(|v| v * PEAK).collect();
    let y: Vec<f64> = b.data().iter().map(|v| v * PEAK).collect();
    let mu_x = filter_valid(&x, h, w);
    let mu_y = filter_valid(&y, h, w);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let e_xx = filter_valid(&xx, h, w);
    let e_yy = filter_valid(&yy, h, w);
    let e_xy = filter_valid(&xy, h, w);
    let mut total = 0.0;
    for k in 0..mu_x.len() {
        let (mx, my) = (mu_x[k], mu_y[k]);
        let sxx = e_xx[k] - mx * mx;
        let syy = e_yy[k] - my * my;
        let sxy = e_xy[k] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * sxy + c2))
            / ((mx * mx + my * my + c1) * (sxx + syy + c2));
    }
    Ok(total / mu_x.len() as f64)
}

/// PSNR gain of `restored` over `distorted`, both measured against `reference`.
///
/// A perfect restoration of an imperfect input is `+inf`.
pub fn ipsnr(restored: &GrayImage, distorted: &GrayImage, reference: &GrayImage) -> Result<f64> {
    same_dims(restored, distorted)?;
    let after = psnr(restored, reference)?;
    let before = psnr(distorted, reference)?;
    if after.is_infinite() && before.is_infinite() {
        return Ok(0.0);
    }
    Ok(after - before)
}

/// How images are prepared before [`ImageMetrics::compute_with`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MetricOptions {
    /// Round every image to 8-bit values first, as a saved file would be.
    pub quantize: bool,
    /// Pixels removed from every side before comparison.
    pub border: usize,
}

/// Metrics for one restored image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr: f64,
    pub psnr_b: f64,
    pub ssim: f64,
    pub ipsnr: f64,
}

impl ImageMetrics {
    pub fn compute(
        name: impl Into<String>,
        restored: &GrayImage,
        distorted: &GrayImage,
        reference: &GrayImage,
    ) -> Result<Self> {
        Self::compute_with(name, restored, distorted, reference, MetricOptions::default())
    }

    pub fn compute_with(
        name: impl Into<String>,
        restored: &GrayImage,
        distorted: &GrayImage,
        reference: &GrayImage,
        opts: MetricOptions,
    ) -> Result<Self> {
        same_dims(restored, reference)?;
        same_dims(distorted, reference)?;
        let prep = |img: &GrayImage| -> Result<GrayImage> {
            let (h, w) = img.dims();
            let c = opts.border;
            if 2 * c >= h || 2 * c >= w {
                return Err(Error::invalid(format!("border {c} leaves nothing of a {h}x{w} image")));
            }
            let img = if c > 0 { img.crop(c, c, h - 2 * c, w - 2 * c)? } else { img.clone() };
            Ok(if opts.quantize { img.quantized() } else { img })
        };
        let (restored, distorted, reference) = (prep(restored)?, prep(distorted)?, prep(reference)?);
        let (restored, distorted, reference) = (&restored, &distorted, &reference);
        Ok(ImageMetrics {
            name: name.into(),
            psnr: psnr(restored, reference)?,
            psnr_b: psnr_b(restored, reference, 8)?,
            ssim: ssim(restored, reference)?,
            ipsnr: ipsnr(restored, distorted, reference)?,
        })
    }
}

/// Per-image metrics plus their means.
#[derive(Clone, Debug, Default, Serialize)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
}

/// Mean of the finite values; `None` when there are none.
pub fn finite_mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for v in values {
        if v.is_finite() {
            sum += v;
            n += 1;
        } else {
            skipped += 1;
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} infinite metric value(s) left out of the mean");
    }
    (n > 0).then(|| sum / n as f64)
}

impl MetricsReport {
    pub fn push(&mut self, m: ImageMetrics) {
        self.images.push(m);
    }

    pub fn mean_psnr(&self) -> Option<f64> {
        finite_mean(self.images.iter().map(|m| m.psnr))
    }
    pub fn mean_psnr_b(&self) -> Option<f64> {
        finite_mean(self.images.iter().map(|m| m.psnr_b))
    }
    pub fn mean_ssim(&self) -> Option<f64> {
        finite_mean(self.images.iter().map(|m| m.ssim))
    }
    pub fn mean_ipsnr(&self) -> Option<f64> {
        finite_mean(self.images.iter().map(|m| m.ipsnr))
    }

    /// `image,psnr,psnr_b,ssim,ipsnr` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let fmt = |v: f64| {
            if v.is_infinite() {
                if v > 0.0 { "inf".to_string() } else { "-inf".to_string() }
            } else {
                format!("{v:.6}")
            }
        };
        let opt = |v: Option<f64>| v.map(fmt).unwrap_or_else(|| "nan".to_string());
        let mut s = String::from("image,psnr,psnr_b,ssim,ipsnr\n");
        for m in &self.images {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                m.name,
                fmt(m.psnr),
                fmt(m.psnr_b),
                fmt(m.ssim),
                fmt(m.ipsnr)
            ));
        }
        s.push_str(&format!(
            "mean,{},{},{},{}\n",
            opt(self.mean_psnr()),
            opt(self.mean_psnr_b()),
            opt(self.mean_ssim()),
            opt(self.mean_ipsnr())
        ));
        s
    }
}
