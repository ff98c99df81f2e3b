//! Shift-and-recompress deblocking ("simple postprocessing").

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::jpeg::jpeg_degrade;

/// Grid offsets used for a given shift count: 1, 4, 16 or 64 shifts on an
/// evenly spaced subgrid of the 8x8 block.
pub fn shift_set(shifts: usize) -> Result<Vec<(usize, usize)>> {
    let step = match shifts {
        1 => 8,
        4 => 4,
        16 => 2,
        64 => 1,
        _ => {
            return Err(Error::invalid(format!(
                "spp supports 1, 4, 16 or 64 shifts, not {shifts}"
            )))
        }
    };
    let offsets: Vec<usize> = (0..8).step_by(step).collect();
    Ok(offsets
        .iter()
        .flat_map(|&dy| offsets.iter().map(move |&dx| (dx, dy)))
        .collect())
}

/// Moves the image content down/right by `(dx, dy)` with edge replication,
/// re-compresses it at `quality` and moves the result back.
fn shifted_recompress(img: &GrayImage, quality: u8, dx: usize, dy: usize) -> Result<GrayImage> {
    let (h, w) = img.dims();
    let shifted = img.pad_replicate(dy, 0, dx, 0);
    let degraded = jpeg_degrade(&shifted, quality)?;
    degraded.crop(dy, dx, h, w)
}

/// Averages re-compressions of `shifts` translated copies of `img`.
///
/// The per-shift images are computed in parallel and summed in a fixed order,
/// so the result does not depend on the thread count.
pub fn spp_filter(img: &GrayImage, quality: u8, shifts: usize) -> Result<GrayImage> {
    let set = shift_set(shifts)?;
    let parts = set
        .par_iter()
        .map(|&(dx, dy)| shifted_recompress(img, quality, dx, dy))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = img.dims();
    let mut acc = vec![0.0f64; h * w];
    for p in &parts {
        for (a, v) in acc.iter_mut().zip(p.data()) {
            *a += v;
        }
    }
    let n = parts.len() as f64;
    GrayImage::from_clamped(h, w, acc.into_iter().map(|v| v / n).collect())
}
