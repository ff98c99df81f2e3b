//! Experiment drivers: quality generalization, training-set size, and
//! first-layer filter visualization.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arch::Network;
use crate::dataset::ImagePair;
use crate::error::{Error, Result};
use crate::image::{load_gray, GrayImage};
use crate::jpeg::jpeg_degrade;
use crate::train::{mean_ipsnr, train, TrainConfig, TrainOptions};

/// A clean image with the file stem it was loaded from.
#[derive(Clone, Debug)]
pub struct NamedImage {
    pub name: String,
    pub image: GrayImage,
}

/// Loads every `.pgm`, `.ppm`, `.pnm` and `.png` file of a directory, sorted by name.
pub fn load_image_dir(dir: impl AsRef<Path>) -> Result<Vec<NamedImage>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm" | "pnm" | "png"))
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            Ok(NamedImage {
                name: p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                image: load_gray(&p)?,
            })
        })
        .collect()
}

/// Degrades every image at every quality.
pub fn synthesize_pairs(images: &[NamedImage], qualities: &[u8]) -> Result<Vec<ImagePair>> {
    let mut pairs = Vec::with_capacity(images.len() * qualities.len());
    for &q in qualities {
        for img in images {
            let distorted = jpeg_degrade(&img.image, q)?;
            pairs.push(ImagePair::new(img.name.clone(), img.image.clone(), distorted, q)?);
        }
    }
    Ok(pairs)
}

/// A `split<TAB>name` file assigning images to `train` or `test`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn parse(text: &str) -> Result<Self> {
        let mut split = Split::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (kind, name) = line.split_once('\t').ok_or(Error::Manifest {
                line: i + 1,
                reason: "expected split<TAB>name".into(),
            })?;
            match kind {
                "train" => split.train.push(name.to_string()),
                "test" => split.test.push(name.to_string()),
                other => {
                    return Err(Error::Manifest {
                        line: i + 1,
                        reason: format!("unknown split '{other}'"),
                    })
                }
            }
        }
        Ok(split)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// `(train, test)` images in split order.
    pub fn apply(&self, images: &[NamedImage]) -> Result<(Vec<NamedImage>, Vec<NamedImage>)> {
        let pick = |names: &[String]| {
            names
                .iter()
                .map(|n| {
                    images
                        .iter()
                        .find(|i| &i.name == n)
                        .cloned()
                        .ok_or_else(|| Error::invalid(format!("image '{n}' listed in the split is missing")))
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok((pick(&self.train)?, pick(&self.test)?))
    }
}

/// Held-out IPSNR of every model on every quality.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QualityMatrix {
    pub models: Vec<String>,
    pub qualities: Vec<u8>,
    /// `values[model][quality]`.
    pub values: Vec<Vec<f64>>,
}

impl QualityMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model");
        for q in &self.qualities {
            let _ = write!(s, ",q{q}");
        }
        s.push('\n');
        for (name, row) in self.models.iter().zip(&self.values) {
            s.push_str(name);
            for v in row {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }
}

/// Evaluates every named model on every `(quality, pairs)` set.
pub fn run_quality_generalization(
    models: &[(String, Network<f32>)],
    eval_sets: &[(u8, Vec<ImagePair>)],
) -> Result<QualityMatrix> {
    if models.is_empty() {
        return Err(Error::invalid("no models to evaluate"));
    }
    let values = models
        .iter()
        .map(|(name, net)| {
            eval_sets
                .iter()
                .map(|(q, pairs)| {
                    let v = mean_ipsnr(net, pairs)?;
                    log::info!("{name} on q{q}: {v:.3} dB");
                    Ok(v)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QualityMatrix {
        models: models.iter().map(|(n, _)| n.clone()).collect(),
        qualities: eval_sets.iter().map(|(q, _)| *q).collect(),
        values,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SizeResult {
    pub size: usize,
    pub train_ipsnr: f64,
    pub test_ipsnr: f64,
}

pub fn size_results_csv(rows: &[SizeResult]) -> String {
    let mut s = String::from("size,train_ipsnr,test_ipsnr\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6}", r.size, r.train_ipsnr, r.test_ipsnr);
    }
    s
}

/// Trains one model per subset size and scores it on its own training images
/// and on `test`.
///
/// Subsets are nested prefixes of `pool` after a shuffle keyed by `config.seed`.
pub fn run_dataset_size_study(
    sizes: &[usize],
    config: &TrainConfig,
    pool: &[ImagePair],
    test: &[ImagePair],
) -> Result<Vec<SizeResult>> {
    if let Some(&too_big) = sizes.iter().find(|&&s| s > pool.len() || s == 0) {
        return Err(Error::invalid(format!(
            "subset size {too_big} is not within 1..={}",
            pool.len()
        )));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    sizes
        .iter()
        .map(|&size| {
            let subset: Vec<ImagePair> = order[..size].iter().map(|&i| pool[i].clone()).collect();
            let (net, _) = train(config, &subset, &TrainOptions::default())?;
            let r = SizeResult {
                size,
                train_ipsnr: mean_ipsnr(&net, &subset)?,
                test_ipsnr: mean_ipsnr(&net, test)?,
            };
            log::info!("size {size}: train {:.3} dB, test {:.3} dB", r.train_ipsnr, r.test_ipsnr);
            Ok(r)
        })
        .collect()
}

/// Tiles the first-layer filters into one image.
///
/// Each filter (summed over input channels) is min-max normalized on its own;
/// a constant filter becomes mid-gray. Tiles are laid out row-major in
/// `ceil(sqrt(n))` columns with 1-pixel black separators.
pub fn export_first_layer_filters(net: &Network<f32>) -> Result<GrayImage> {
    let w = &net.layers()[0].weights;
    let [cout, cin, kh, kw] = w.shape();
    let cols = (cout as f64).sqrt().ceil() as usize;
    let rows = cout.div_ceil(cols);
    let (gh, gw) = (rows * (kh + 1) + 1, cols * (kw + 1) + 1);
    let mut grid = vec![0.0; gh * gw];
    for co in 0..cout {
        let filter: Vec<f64> = (0..kh * kw)
            .map(|t| (0..cin).map(|ci| w.get(co, ci, t / kw, t % kw) as f64).sum())
            .collect();
        let lo = filter.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = filter.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (top, left) = (1 + (co / cols) * (kh + 1), 1 + (co % cols) * (kw + 1));
        for (t, v) in filter.iter().enumerate() {
            let norm = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            grid[(top + t / kw) * gw + left + t % kw] = norm;
        }
    }
    GrayImage::new(gh, gw, grid)
}
