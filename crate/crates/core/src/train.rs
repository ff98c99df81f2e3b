//! Training loop: patch sampling, objective-specific targets and losses, SGD
//! with a step-halving learning rate, logging, checkpoints and validation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{training_target, Arch, Network, Objective};
use crate::dataset::{load_pairs, DatasetManifest, ImagePair, PatchSampler};
use crate::error::{Error, Result};
use crate::metrics::{finite_mean, ipsnr};
use crate::model::{load_model, save_model};
use crate::nn::{mse_loss, sobel_loss, Sgd, Tensor};

/// `(learning rate, weight decay)` from the published grid search.
pub fn default_lr_wd(objective: Objective) -> (f64, f64) {
    match objective {
        Objective::Direct => (0.4, 5e-7),
        Objective::Residual => (8.0, 5e-7),
        Objective::EdgePreserving => (0.05, 5e-4),
    }
}

/// `(batch size, patch size)` used for each architecture.
pub fn default_batch_patch(arch: Arch) -> (usize, usize) {
    match arch {
        Arch::L4 => (64, 64),
        Arch::L8 => (4, 128),
    }
}

/// `base * 0.5^floor(t / period)`.
pub fn lr_schedule(base: f64, period: u64, t: u64) -> f64 {
    if period == 0 {
        return base;
    }
    let halvings = (t / period).min(i32::MAX as u64) as i32;
    base * 0.5f64.powi(halvings)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// The published protocol: 250K iterations, halving every 50K.
    Paper,
    /// 10K iterations for a single CPU; same schedule and hyperparameters.
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::invalid(format!("unknown preset '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Arch,
    pub objective: Objective,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub iterations: u64,
    pub lr_halving_period: u64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    /// Qualities kept from the manifest; empty keeps every entry.
    pub qualities: Vec<u8>,
    /// Checkpoint and validation period; 0 disables both.
    pub checkpoint_period: u64,
    /// Loss logging period; 0 logs only the first and last iteration.
    pub log_period: u64,
}

impl TrainConfig {
    pub fn preset(preset: Preset, arch: Arch, objective: Objective) -> Self {
        let (base_lr, weight_decay) = default_lr_wd(objective);
        let (batch_size, patch_size) = default_batch_patch(arch);
        let (iterations, checkpoint_period, log_period) = match preset {
            Preset::Paper => (250_000, 10_000, 1_000),
            Preset::Desk => (10_000, 1_000, 100),
        };
        TrainConfig {
            arch,
            objective,
            base_lr,
            weight_decay,
            momentum: 0.0,
            iterations,
            lr_halving_period: 50_000,
            batch_size,
            patch_size,
            seed: 1,
            qualities: vec![10],
            checkpoint_period,
            log_period,
        }
    }

    pub fn paper(arch: Arch, objective: Objective) -> Self {
        Self::preset(Preset::Paper, arch, objective)
    }

    pub fn desk(arch: Arch, objective: Objective) -> Self {
        Self::preset(Preset::Desk, arch, objective)
    }

    pub fn lr_at(&self, t: u64) -> f64 {
        lr_schedule(self.base_lr, self.lr_halving_period, t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.base_lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let (rf, _) = self.arch.build(self.objective).receptive_field();
        if self.patch_size < rf + 2 {
            return Err(Error::invalid(format!(
                "patch size {} leaves too small an output for a {rf}-pixel receptive field",
                self.patch_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// Zero-based index of the update.
    pub iteration: u64,
    pub lr: f64,
    /// Loss of that iteration's batch, before the update.
    pub loss: f64,
    pub val_ipsnr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "iteration,lr,loss,val_ipsnr";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let val = r.val_ipsnr.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{},{},{:.9e},{}", r.iteration, r.lr, r.loss, val);
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Training state stored next to each checkpointed model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Completed updates; training resumes at this iteration index.
    pub iteration: u64,
    /// Learning rate of the next update.
    pub lr: f64,
}

pub fn checkpoint_paths(dir: &Path, iteration: u64) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("ckpt_{iteration:07}.model")),
        dir.join(format!("ckpt_{iteration:07}.json")),
    )
}

pub fn load_checkpoint(model: &Path) -> Result<(Network<f32>, Checkpoint)> {
    let net = load_model(model)?;
    let side = model.with_extension("json");
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let ckpt = serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", side.display())))?;
    Ok((net, ckpt))
}

/// Restores every distorted image and returns its IPSNR against the clean one,
/// measured on the 8-bit restored output.
pub fn pair_ipsnrs(net: &Network<f32>, pairs: &[ImagePair]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|p| {
            let restored = net.restore(&p.distorted)?.quantized();
            ipsnr(&restored, &p.distorted, &p.clean)
        })
        .collect()
}

pub fn mean_ipsnr(net: &Network<f32>, pairs: &[ImagePair]) -> Result<f64> {
    finite_mean(pair_ipsnrs(net, pairs)?).ok_or_else(|| Error::invalid("no finite IPSNR to average"))
}

/// Optional side outputs of a training run.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Held-out pairs scored at every checkpoint.
    pub validation: &'a [ImagePair],
    pub checkpoint_dir: Option<PathBuf>,
}

/// Owns one network and advances it one SGD update at a time.
pub struct Trainer {
    config: TrainConfig,
    net: Network<f32>,
    sgd: Sgd<f32>,
    sampler: PatchSampler,
    iteration: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = Network::init(config.arch.build(config.objective), config.seed)?;
        Self::resume(config, net, 0)
    }

    /// Continues from `net` with `iteration` updates already done.
    pub fn resume(config: TrainConfig, net: Network<f32>, iteration: u64) -> Result<Self> {
        config.validate()?;
        if net.spec() != &config.arch.build(config.objective) {
            return Err(Error::invalid("model does not match the configured architecture and objective"));
        }
        let sampler = PatchSampler::new(config.seed, config.patch_size, config.batch_size);
        Ok(Trainer {
            sgd: Sgd::new(config.momentum),
            config,
            net,
            sampler,
            iteration,
        })
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }
    pub fn into_network(self) -> Network<f32> {
        self.net
    }
    pub fn iteration(&self) -> u64 {
        self.iteration
    }
    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Loss and its gradient w.r.t. the prediction for one batch.
    fn loss(&self, pred: &Tensor<f32>, y: &Tensor<f32>, x: &Tensor<f32>) -> Result<crate::nn::LossValue<f32>> {
        let target = training_target(self.config.objective, y, x, (pred.height(), pred.width()))?;
        let l = mse_loss(pred, &target)?;
        match self.config.objective {
            Objective::EdgePreserving => l.combine(sobel_loss(pred, &target)?),
            Objective::Direct | Objective::Residual => Ok(l),
        }
    }

    /// Runs one update and returns the batch loss before it.
    pub fn step(&mut self, pairs: &[ImagePair]) -> Result<f64> {
        let t = self.iteration;
        let (y, x) = self.sampler.sample_batch::<f32>(pairs, t)?;
        let cache = self.net.forward_cached(&y)?;
        let loss = self.loss(cache.prediction(), &y, &x)?;
        if !loss.value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("training loss at iteration {t}"),
            });
        }
        self.net.backward(&cache, &loss.gradient)?;
        self.sgd
            .step(self.net.layers_mut(), self.config.lr_at(t), self.config.weight_decay)
            .map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("{context} at iteration {t}"),
                },
                other => other,
            })?;
        self.iteration += 1;
        Ok(loss.value)
    }

    fn checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (model, side) = checkpoint_paths(dir, self.iteration);
        save_model(&self.net, &model)?;
        let state = Checkpoint {
            iteration: self.iteration,
            lr: self.config.lr_at(self.iteration),
        };
        let json = serde_json::to_string_pretty(&state).expect("checkpoint state serializes");
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    /// Trains until `config.iterations` updates are done.
    pub fn run(&mut self, pairs: &[ImagePair], opts: &TrainOptions<'_>) -> Result<TrainLog> {
        self.sampler.check(pairs)?;
        let mut log = TrainLog::default();
        let total = self.config.iterations;
        let (log_period, ckpt_period) = (self.config.log_period, self.config.checkpoint_period);
        while self.iteration < total {
            let t = self.iteration;
            let loss = self.step(pairs)?;
            let done = self.iteration;
            let at_ckpt = ckpt_period > 0 && done.is_multiple_of(ckpt_period);
            let val_ipsnr = if at_ckpt && !opts.validation.is_empty() {
                Some(mean_ipsnr(&self.net, opts.validation)?)
            } else {
                None
            };
            if at_ckpt {
                if let Some(dir) = &opts.checkpoint_dir {
                    self.checkpoint(dir)?;
                }
            }
            let logged = t == 0 || done == total || (log_period > 0 && t.is_multiple_of(log_period));
            if logged || val_ipsnr.is_some() {
                log::info!(
                    "iteration {t} lr {:.4e} loss {loss:.6e}{}",
                    self.config.lr_at(t),
                    val_ipsnr.map(|v| format!(" val_ipsnr {v:.3}")).unwrap_or_default()
                );
                log.rows.push(LogRow {
                    iteration: t,
                    lr: self.config.lr_at(t),
                    loss,
                    val_ipsnr,
                });
            }
        }
        Ok(log)
    }
}

/// Initializes a network from `config` and trains it on `pairs`.
pub fn train(config: &TrainConfig, pairs: &[ImagePair], opts: &TrainOptions<'_>) -> Result<(Network<f32>, TrainLog)> {
    let mut trainer = Trainer::new(config.clone())?;
    let log = trainer.run(pairs, opts)?;
    Ok((trainer.into_network(), log))
}

/// As [`train`], reading pairs (filtered to `config.qualities`) from a manifest.
pub fn train_from_manifest(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    opts: &TrainOptions<'_>,
) -> Result<(Network<f32>, TrainLog)> {
    let selected = manifest.with_qualities(&config.qualities);
    if selected.entries.is_empty() {
        return Err(Error::invalid(format!(
            "manifest has no entries at qualities {:?}",
            config.qualities
        )));
    }
    let pairs = load_pairs(&selected)?;
    train(config, &pairs, opts)
}
