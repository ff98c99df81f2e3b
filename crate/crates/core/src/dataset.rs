//! Paired clean/distorted training data and deterministic patch sampling.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{load_gray, GrayImage};
use crate::nn::{Real, Tensor};

/// One line of a manifest: `clean<TAB>distorted<TAB>quality`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub clean: PathBuf,
    pub distorted: PathBuf,
    pub quality: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Parses tab-separated lines. Blank lines and `#` comments are skipped;
    /// relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| Error::Manifest {
                line: idx + 1,
                reason: reason.to_string(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad("expected clean<TAB>distorted<TAB>quality"));
            }
            let quality: u8 = fields[2]
                .trim()
                .parse()
                .map_err(|_| bad("quality is not an integer"))?;
            if !(1..=100).contains(&quality) {
                return Err(bad("quality must be within 1..=100"));
            }
            entries.push(ManifestEntry {
                clean: base.join(fields[0]),
                distorted: base.join(fields[1]),
                quality,
            });
        }
        Ok(DatasetManifest { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}",
                e.clean.display(),
                e.distorted.display(),
                e.quality
            );
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Keeps only entries whose quality is listed; an empty list keeps everything.
    pub fn with_qualities(&self, qualities: &[u8]) -> Self {
        if qualities.is_empty() {
            return self.clone();
        }
        DatasetManifest {
            entries: self
                .entries
                .iter()
                .filter(|e| qualities.contains(&e.quality))
                .cloned()
                .collect(),
        }
    }
}

/// A clean image and its degraded counterpart.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub name: String,
    pub clean: GrayImage,
    pub distorted: GrayImage,
    pub quality: u8,
}

impl ImagePair {
    pub fn new(name: impl Into<String>, clean: GrayImage, distorted: GrayImage, quality: u8) -> Result<Self> {
        if clean.dims() != distorted.dims() {
            return Err(Error::shape(format!(
                "paired images differ in size: {:?} vs {:?}",
                clean.dims(),
                distorted.dims()
            )));
        }
        Ok(ImagePair {
            name: name.into(),
            clean,
            distorted,
            quality,
        })
    }
}

/// Loads every pair listed in a manifest.
pub fn load_pairs(manifest: &DatasetManifest) -> Result<Vec<ImagePair>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let name = e
                .distorted
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            ImagePair::new(name, load_gray(&e.clean)?, load_gray(&e.distorted)?, e.quality)
        })
        .collect()
}

/// Draws aligned patch batches.
///
/// Every batch comes from a ChaCha8 stream keyed by `(seed, iteration)`, so a
/// batch depends only on the seed, the pair list and the iteration index,
/// never on how many batches were drawn before.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSampler {
    pub seed: u64,
    pub patch_size: usize,
    pub batch_size: usize,
}

impl PatchSampler {
    pub fn new(seed: u64, patch_size: usize, batch_size: usize) -> Self {
        PatchSampler {
            seed,
            patch_size,
            batch_size,
        }
    }

    pub fn check(&self, pairs: &[ImagePair]) -> Result<()> {
        if pairs.is_empty() {
            return Err(Error::invalid("no training pairs"));
        }
        if self.patch_size == 0 || self.batch_size == 0 {
            return Err(Error::invalid("patch and batch size must be positive"));
        }
        for p in pairs {
            let (h, w) = p.clean.dims();
            if h < self.patch_size || w < self.patch_size {
                return Err(Error::TooSmall {
                    height: h,
                    width: w,
                    min_height: self.patch_size,
                    min_width: self.patch_size,
                });
            }
        }
        Ok(())
    }

    fn rng(&self, iteration: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(iteration);
        rng
    }

    /// Image index and top-left corner of every patch in batch `iteration`.
    pub fn positions(&self, pairs: &[ImagePair], iteration: u64) -> Result<Vec<(usize, usize, usize)>> {
        self.check(pairs)?;
        let mut rng = self.rng(iteration);
        Ok((0..self.batch_size)
            .map(|_| {
                let idx = rng.random_range(0..pairs.len());
                let (h, w) = pairs[idx].clean.dims();
                let top = rng.random_range(0..=h - self.patch_size);
                let left = rng.random_range(0..=w - self.patch_size);
                (idx, top, left)
            })
            .collect())
    }

    /// Returns `(distorted, clean)` tensors of shape `(batch, 1, patch, patch)`.
    pub fn sample_batch<T: Real>(&self, pairs: &[ImagePair], iteration: u64) -> Result<(Tensor<T>, Tensor<T>)> {
        let p = self.patch_size;
        let shape = [self.batch_size, 1, p, p];
        let mut distorted = Vec::with_capacity(shape.iter().product());
        let mut clean = Vec::with_capacity(distorted.capacity());
        for (idx, top, left) in self.positions(pairs, iteration)? {
            let pair = &pairs[idx];
            let w = pair.clean.width();
            for i in top..top + p {
                let row = i * w + left..i * w + left + p;
                distorted.extend(pair.distorted.data()[row.clone()].iter().map(|&v| T::from_f64(v)));
                clean.extend(pair.clean.data()[row].iter().map(|&v| T::from_f64(v)));
            }
        }
        Ok((Tensor::from_vec(shape, distorted)?, Tensor::from_vec(shape, clean)?))
    }
}
