//! Desk-scale training loop: L1 loss on random aligned crops, AdamW with
//! cosine annealing, progressive patch scheduling, augmentation, periodic
//! validation PSNR, and best/final checkpointing. Runs are bit-reproducible
//! from the seed.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_model_expecting, save_model};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::metrics::psnr;
use crate::models::{Model, ModelConfig};
use crate::rng::{derive_seed, derive_seed_indexed, rng_from_seed};
use crate::synth::{augment_pair, DatasetManifest};
use crate::tensor::optim::{adamw_step, AdamWHyper, LrSchedule, OptimizerState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub patch_size: usize,
    pub batch_size: usize,
    pub start_iter: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub total_iters: u64,
    pub stages: Vec<StageSpec>,
    pub initial_lr: f64,
    pub final_lr: f64,
    pub hyper: AdamWHyper,
    pub loss: LossKind,
    pub seed: u64,
    pub log_every: u64,
    /// Validation cadence; defaults to every 10% of the run.
    pub val_every: Option<u64>,
    /// Start from an existing checkpoint (transfer learning entry point).
    pub init_from: Option<PathBuf>,
}

impl TrainConfig {
    /// Desk-scale single-stage preset: constant (64, 8).
    pub fn desk(model: ModelConfig, total_iters: u64, seed: u64) -> TrainConfig {
        TrainConfig {
            model,
            total_iters,
            stages: vec![StageSpec {
                patch_size: 64,
                batch_size: 8,
                start_iter: 0,
            }],
            initial_lr: 3e-4,
            final_lr: 1e-6,
            hyper: AdamWHyper::default(),
            loss: LossKind::L1,
            seed,
            log_every: 20,
            val_every: None,
            init_from: None,
        }
    }

    /// The published six-stage progressive schedule, stage boundaries
    /// splitting the run evenly.
    pub fn progressive_paper(model: ModelConfig, seed: u64) -> TrainConfig {
        let total: u64 = 400_000;
        let pairs: [(usize, usize); 6] = [(128, 64), (160, 40), (192, 32), (256, 16), (320, 8), (384, 8)];
        let stages = pairs
            .iter()
            .enumerate()
            .map(|(i, (p, b))| StageSpec {
                patch_size: *p,
                batch_size: *b,
                start_iter: i as u64 * total / pairs.len() as u64,
            })
            .collect();
        TrainConfig {
            model,
            total_iters: total,
            stages,
            initial_lr: 3e-4,
            final_lr: 1e-6,
            hyper: AdamWHyper::default(),
            loss: LossKind::L1,
            seed,
            log_every: 1000,
            val_every: None,
            init_from: None,
        }
    }

    /// The published fixed-patch schedule used for the lightweight network:
    /// 256x256 patches, batch 8.
    pub fn lenet_paper_schedule(model: ModelConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            model,
            total_iters: 1_000_000,
            stages: vec![StageSpec {
                patch_size: 256,
                batch_size: 8,
                start_iter: 0,
            }],
            initial_lr: 3e-4,
            final_lr: 1e-6,
            hyper: AdamWHyper::default(),
            loss: LossKind::L1,
            seed,
            log_every: 1000,
            val_every: None,
            init_from: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.total_iters == 0 {
            return Err(Error::Parameter("total_iters must be >= 1".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Parameter("at least one schedule stage required".into()));
        }
        if self.stages[0].start_iter != 0 {
            return Err(Error::Parameter("first stage must start at iteration 0".into()));
        }
        for w in self.stages.windows(2) {
            if w[1].start_iter <= w[0].start_iter {
                return Err(Error::Parameter(
                    "stage start iterations must be strictly increasing".into(),
                ));
            }
        }
        for s in &self.stages {
            if s.patch_size % 8 != 0 || s.patch_size == 0 {
                return Err(Error::Parameter(format!(
                    "patch size {} must be a positive multiple of 8",
                    s.patch_size
                )));
            }
            if s.batch_size == 0 {
                return Err(Error::Parameter("batch size must be >= 1".into()));
            }
            if s.start_iter >= self.total_iters {
                return Err(Error::Parameter(format!(
                    "stage start {} beyond total iterations {}",
                    s.start_iter, self.total_iters
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn parse_str(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Format {
            offset: 0,
            message: format!("train config parse: {}", e),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            initial_lr: self.initial_lr,
            final_lr: self.final_lr,
            total_steps: self.total_iters,
        }
    }
}

/// Piecewise-constant (patch, batch) lookup for iteration `t`.
pub fn progressive_schedule(config: &TrainConfig, t: u64) -> Result<(usize, usize)> {
    if t >= config.total_iters {
        return Err(Error::Contract(format!(
            "iteration {} out of range 0..{}",
            t, config.total_iters
        )));
    }
    let stage = config
        .stages
        .iter()
        .rev()
        .find(|s| s.start_iter <= t)
        .ok_or_else(|| Error::Contract("no stage covers iteration 0".into()))?;
    Ok((stage.patch_size, stage.batch_size))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub resolved_config: PathBuf,
    /// Mean training loss over the opening window of iterations.
    pub initial_loss: f64,
    /// Mean training loss over the closing window of iterations.
    pub final_loss: f64,
    pub best_val_psnr: Option<f64>,
}

struct LoadedPair {
    sharp: ImageBuffer,
    blur: ImageBuffer,
}

fn load_pairs(manifest: &DatasetManifest, dir: &Path) -> Result<Vec<LoadedPair>> {
    (0..manifest.samples.len())
        .map(|i| {
            let (sharp, blur) = manifest.load_pair(dir, i)?;
            Ok(LoadedPair {
                sharp: sharp.expand3(),
                blur: blur.expand3(),
            })
        })
        .collect()
}

fn batch_tensor(images: &[ImageBuffer]) -> Tensor<f32> {
    let (h, w) = (images[0].height(), images[0].width());
    let hw = h * w;
    let mut data = vec![0.0f32; images.len() * 3 * hw];
    for (n, img) in images.iter().enumerate() {
        let src = img.data();
        for c in 0..3 {
            let dst = &mut data[(n * 3 + c) * hw..(n * 3 + c + 1) * hw];
            for i in 0..hw {
                dst[i] = src[i * 3 + c];
            }
        }
    }
    Tensor::constant(data, &[images.len(), 3, h, w]).expect("batch shape")
}

/// Mean validation PSNR of full restored images against their sharp targets.
pub fn validation_psnr(model: &Model<f32>, manifest: &DatasetManifest, dir: &Path) -> Result<f64> {
    if manifest.samples.is_empty() {
        return Err(Error::Contract("empty validation manifest".into()));
    }
    let mut total = 0.0f64;
    for i in 0..manifest.samples.len() {
        let (sharp, blur) = manifest.load_pair(dir, i)?;
        let restored = model.restore(&blur)?;
        total += psnr(&restored, &sharp.expand3())?;
    }
    Ok(total / manifest.samples.len() as f64)
}

/// Run the training loop. Writes `train.log`, `config.toml`, `best.ckpt`
/// and `final.ckpt` under `out_dir`.
pub fn train(
    config: &TrainConfig,
    train_manifest: &DatasetManifest,
    train_dir: &Path,
    val_manifest: Option<(&DatasetManifest, &Path)>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train.log");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    let resolved_config = out_dir.join("config.toml");
    std::fs::write(&resolved_config, config.to_toml_string())?;

    let pairs = load_pairs(train_manifest, train_dir)?;
    if pairs.is_empty() {
        return Err(Error::Manifest("training manifest has no samples".into()));
    }

    let model = match &config.init_from {
        Some(path) => load_model_expecting(path, &config.model)?,
        None => Model::init(config.model.clone(), derive_seed(config.seed, "train-model"))?,
    };
    let params = model.params();
    let mut opt = OptimizerState::new(&params, config.hyper);
    let schedule = config.lr_schedule();

    let mut order_rng = rng_from_seed(derive_seed(config.seed, "train-order"));
    let mut crop_rng = rng_from_seed(derive_seed(config.seed, "train-crop"));
    let mut queue: Vec<usize> = Vec::new();

    let best_path = out_dir.join("best.ckpt");
    let final_path = out_dir.join("final.ckpt");
    let val_every = config
        .val_every
        .unwrap_or_else(|| (config.total_iters / 10).max(1));
    let window = ((config.total_iters / 10).clamp(1, 100)) as usize;
    let mut opening: Vec<f64> = Vec::new();
    let mut closing: std::collections::VecDeque<f64> = std::collections::VecDeque::new();
    let mut best_val: Option<f64> = None;
    let mut last_good: Option<PathBuf> = None;

    for t in 0..config.total_iters {
        let (patch, batch) = progressive_schedule(config, t)?;
        let mut sharp_crops = Vec::with_capacity(batch);
        let mut blur_crops = Vec::with_capacity(batch);
        for slot in 0..batch {
            if queue.is_empty() {
                queue = (0..pairs.len()).collect();
                queue.shuffle(&mut order_rng);
            }
            let idx = queue.pop().expect("refilled above");
            let pair = &pairs[idx];
            let (h, w) = (pair.sharp.height(), pair.sharp.width());
            if h < patch || w < patch {
                return Err(Error::Contract(format!(
                    "patch {} does not fit training image {}x{}",
                    patch, h, w
                )));
            }
            let y0 = crop_rng.random_range(0..=h - patch);
            let x0 = crop_rng.random_range(0..=w - patch);
            let sharp = pair.sharp.crop_at(y0, x0, patch, patch)?;
            let blur = pair.blur.crop_at(y0, x0, patch, patch)?;
            let aug_seed = derive_seed_indexed(config.seed, "train-aug", t * batch as u64 + slot as u64);
            let (sharp, blur) = augment_pair(&sharp, &blur, aug_seed)?;
            sharp_crops.push(sharp);
            blur_crops.push(blur);
        }
        let input = batch_tensor(&blur_crops);
        let target = batch_tensor(&sharp_crops);
        let out = model.forward_tensor(&input)?;
        let loss = match config.loss {
            LossKind::L1 => out.sub(&target)?.abs().mean_all(),
        };
        let loss_val = loss.item()? as f64;
        if !loss_val.is_finite() {
            return Err(Error::Diverged {
                iteration: t,
                last_good: last_good.clone(),
            });
        }
        loss.backward()?;
        let lr = schedule.cosine_lr(t);
        adamw_step(&mut opt, &params, lr)?;

        if opening.len() < window {
            opening.push(loss_val);
        }
        closing.push_back(loss_val);
        if closing.len() > window {
            closing.pop_front();
        }

        if t % config.log_every == 0 || t + 1 == config.total_iters {
            writeln!(log, "iter={} lr={:.6e} loss={:.6}", t, lr, loss_val)?;
        }
        let at_val = (t + 1) % val_every == 0 || t + 1 == config.total_iters;
        if at_val {
            if let Some((vm, vd)) = val_manifest {
                let vp = validation_psnr(&model, vm, vd)?;
                writeln!(log, "iter={} val_psnr={:.4}", t, vp)?;
                if best_val.map(|b| vp > b).unwrap_or(true) {
                    best_val = Some(vp);
                    save_model(&model, t + 1, Some(&opt), &best_path)?;
                    last_good = Some(best_path.clone());
                }
            } else {
                save_model(&model, t + 1, Some(&opt), &best_path)?;
                last_good = Some(best_path.clone());
            }
        }
    }

    save_model(&model, config.total_iters, Some(&opt), &final_path)?;
    if !best_path.exists() {
        save_model(&model, config.total_iters, Some(&opt), &best_path)?;
    }
    let initial_loss = opening.iter().sum::<f64>() / opening.len() as f64;
    let final_loss = closing.iter().sum::<f64>() / closing.len() as f64;
    writeln!(
        log,
        "done total_iters={} initial_loss={:.6} final_loss={:.6}",
        config.total_iters, initial_loss, final_loss
    )?;
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        log_path,
        resolved_config,
        initial_loss,
        final_loss,
        best_val_psnr: best_val,
    })
}

/// Convenience wrapper reading both manifests from their directories.
pub fn train_from_dirs(
    config: &TrainConfig,
    train_dir: &Path,
    val_dir: Option<&Path>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let train_manifest = DatasetManifest::load(train_dir)?;
    match val_dir {
        Some(vd) => {
            let val_manifest = DatasetManifest::load(vd)?;
            train(config, &train_manifest, train_dir, Some((&val_manifest, vd)), out_dir)
        }
        None => train(config, &train_manifest, train_dir, None, out_dir),
    }
}
