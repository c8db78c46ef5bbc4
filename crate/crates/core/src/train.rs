//! Flow-matching training: per-sample flow steps, AdamW with a cosine
//! learning-rate schedule, per-epoch validation on a frozen mask plan and
//! best-NRMSE checkpoint selection.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::score_model;
use crate::flow::{cfm_loss, cfm_loss_grad, sample_path, target_velocity, NoiseSchedule};
use crate::forecast::{DiscreteTimes, ForecastSpec, Forecaster, Variant};
use crate::metrics::MetricTriple;
use crate::net::params::ParamSet;
use crate::net::{checkpoint, NetConfig, VelocityNet};
use crate::rng::{derive, derive_stream, Stream};
use crate::series::{hex_digest, MaskPlan, SplitManifest, VolumeSequence};
use crate::synth::sample_mask_row;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub model: ForecastSpec,
    pub net: NetConfig,
    pub lr: f64,
    /// Floor reached by the cosine schedule at the last step.
    pub lr_min: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    /// Path noise amplitude during training.
    pub sigma0: f64,
    /// Euler steps used for validation forecasts.
    pub n_steps_infer: usize,
    pub seed: u64,
    /// Probability of hiding each training context, redrawn every epoch.
    pub missing_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ForecastSpec::default(),
            net: NetConfig::default(),
            lr: 1e-4,
            lr_min: 0.0,
            batch_size: 4,
            epochs: 10,
            weight_decay: 1e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            sigma0: 0.0,
            n_steps_infer: 10,
            seed: 0,
            missing_prob: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return Err(Error::Config(format!("need 0 <= lr_min <= lr and lr > 0, got {} / {}", self.lr_min, self.lr)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.n_steps_infer < 1 {
            return Err(Error::Config("inference needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&self.missing_prob) {
            return Err(Error::Config(format!("missing probability {} outside [0, 1)", self.missing_prob)));
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) || self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        if !(self.sigma0 >= 0.0) || !self.sigma0.is_finite() {
            return Err(Error::Config(format!("sigma0 must be finite and >= 0, got {}", self.sigma0)));
        }
        self.net.validate()?;
        self.model.validate(&self.net)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Fills a missing discrete grid from the dataset manifest.
    pub fn resolve_grid(&mut self, manifest: &SplitManifest) {
        if self.model.variant == Variant::Discrete
            && self.model.discrete_times == DiscreteTimes::Timestamps
            && self.model.grid.is_none()
        {
            self.model.grid = manifest.grid;
        }
    }
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let p = (step.min(total) as f64) / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * p).cos())
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    m: ParamSet<f32>,
    v: ParamSet<f32>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ParamSet<f32>, betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        AdamW {
            betas,
            eps,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &ParamSet<f32>, lr: f64) {
        self.t += 1;
        let [b1, b2] = self.betas;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let decay = 1.0 - lr * self.weight_decay;
        let layers = params.iter_mut().zip(grads.iter()).zip(self.m.iter_mut().zip(self.v.iter_mut()));
        for ((p, g), (m, v)) in layers {
            for i in 0..p.data.len() {
                let gi = g.data[i] as f64;
                let mi = b1 * m.data[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v.data[i] as f64 + (1.0 - b2) * gi * gi;
                m.data[i] = mi as f32;
                v.data[i] = vi as f32;
                let update = (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p.data[i] = (decay * p.data[i] as f64 - lr * update) as f32;
            }
        }
    }
}

/// One training example: a sequence and an optional context mask.
pub type Example<'a> = (&'a VolumeSequence, Option<&'a [bool]>);

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Forecaster,
    opt: AdamW,
    rng: Stream,
    noise: NoiseSchedule,
    step: usize,
    total_steps: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = VelocityNet::<f32>::init(&cfg.net, derive(cfg.seed, "init"))?;
        let model = Forecaster::new(net, cfg.model.clone())?;
        let opt = AdamW::new(model.net.params(), cfg.betas, cfg.eps, cfg.weight_decay);
        Ok(Trainer {
            rng: derive_stream(cfg.seed, "train"),
            noise: NoiseSchedule::new(cfg.sigma0, derive(cfg.seed, "path-noise"))?,
            model,
            opt,
            cfg,
            step: 0,
            total_steps: 0,
        })
    }

    /// Number of optimizer steps the cosine schedule spans.
    pub fn set_schedule(&mut self, total_steps: usize) {
        self.total_steps = total_steps;
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(self.step, self.total_steps, self.cfg.lr, self.cfg.lr_min)
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Mean loss over `batch` at the given flow steps and its parameter gradient.
    pub fn loss_and_grads(&self, batch: &[Example], taus: &[f64], noise: &mut NoiseSchedule) -> Result<(f64, ParamSet<f32>)> {
        if batch.is_empty() || batch.len() != taus.len() {
            return Err(Error::Shape(format!("{} examples with {} flow steps", batch.len(), taus.len())));
        }
        let net = &self.model.net;
        let spec = &self.model.spec;
        let frames = self.model.frames();
        let inv_b = 1.0 / batch.len() as f32;
        let mut grads = net.params().zeros_like();
        let mut total = 0.0;
        for (&(seq, mask), &tau) in batch.iter().zip(taus) {
            let prepared = spec.prepare::<f32>(seq, mask, frames)?;
            let x1 = spec.target_stack::<f32>(seq, frames)?;
            let state = sample_path(&prepared.x0, &x1, tau, noise)?;
            let u = target_velocity(&prepared.x0, &x1)?;
            let code = spec.code::<f32>(&prepared, seq.target_time(), tau)?;
            let (pred, trace) = net.forward_trace(&state.x_tau, &code)?;
            total += cfm_loss(&pred, &u)? as f64;
            let g = cfm_loss_grad(&pred, &u)?.scale(inv_b);
            grads.add_assign(&net.backward_trace(&trace, &g)?);
        }
        Ok((total / batch.len() as f64, grads))
    }

    /// One optimizer update with flow steps drawn uniformly per example.
    pub fn step(&mut self, batch: &[Example]) -> Result<f64> {
        let taus: Vec<f64> = (0..batch.len()).map(|_| self.rng.random::<f64>()).collect();
        self.step_with_taus(batch, &taus)
    }

    pub fn step_with_taus(&mut self, batch: &[Example], taus: &[f64]) -> Result<f64> {
        let mut noise = self.noise.clone();
        let (loss, grads) = self.loss_and_grads(batch, taus, &mut noise)?;
        self.noise = noise;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged(format!("loss {loss} at step {}", self.step)));
        }
        let lr = self.lr();
        self.opt.step(self.model.net.params_mut(), &grads, lr);
        self.step += 1;
        Ok(loss)
    }

    fn draw_mask(&mut self, len: usize) -> Option<Vec<bool>> {
        (self.cfg.missing_prob > 0.0).then(|| sample_mask_row(len, self.cfg.missing_prob, &mut self.rng))
    }

    /// One pass over `data` in a shuffled order. Returns the mean batch loss.
    pub fn epoch(&mut self, data: &[VolumeSequence]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("no training sequences".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, self.rng.random_range(0..=i));
        }
        let masks: Vec<Option<Vec<bool>>> = order.iter().map(|&i| self.draw_mask(data[i].context_len())).collect();
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.iter().zip(&masks).collect::<Vec<_>>().chunks(self.cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|(&i, m)| (&data[i], m.as_deref())).collect();
            sum += self.step(&batch)?;
            batches += 1;
        }
        Ok(sum / batches as f64)
    }
}

fn require_variant(trainer: &Trainer, v: Variant) -> Result<()> {
    if trainer.cfg.model.variant == v {
        Ok(())
    } else {
        Err(Error::Config(format!("trainer is configured for the {} variant", trainer.cfg.model.variant)))
    }
}

/// Grid-embedded, carry-forward-filled update conditioned on the flow step.
pub fn train_step_discrete(trainer: &mut Trainer, batch: &[Example]) -> Result<f64> {
    require_variant(trainer, Variant::Discrete)?;
    trainer.step(batch)
}

/// Raw-context update conditioned on the encoded interpolated time vector.
pub fn train_step_continuous(trainer: &mut Trainer, batch: &[Example]) -> Result<f64> {
    require_variant(trainer, Variant::Continuous)?;
    trainer.step(batch)
}

/// One line of the JSON-lines metrics log. Epoch 0 is the initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_nrmse: f64,
    pub val_ssim: f64,
    pub val_psnr: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Forecaster,
    pub epoch: usize,
    pub val: Option<MetricTriple>,
    pub config: TrainConfig,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    epoch: usize,
    val: Option<MetricTriple>,
    config_hash: String,
    config: TrainConfig,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            epoch: self.epoch,
            val: self.val,
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
        };
        checkpoint::encode(&self.model.net, serde_json::to_value(meta).map_err(|e| Error::json("checkpoint meta", e))?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (net, header) = checkpoint::decode(bytes)?;
        let meta: CheckpointMeta = serde_json::from_value(header.meta).map_err(|e| Error::json("checkpoint meta", e))?;
        if meta.config.hash() != meta.config_hash {
            return Err(Error::Format("checkpoint config hash does not match its config".into()));
        }
        if meta.config.net != header.net {
            return Err(Error::Format("checkpoint net layout differs from its training config".into()));
        }
        Ok(Checkpoint {
            model: Forecaster::new(net, meta.config.model.clone())?,
            epoch: meta.epoch,
            val: meta.val,
            config: meta.config,
            config_hash: meta.config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Trains on the manifest's train split and keeps the epoch with the lowest
/// validation NRMSE under `val_masks`. Ties keep the earlier epoch.
pub fn fit(manifest: &SplitManifest, cfg: &TrainConfig, val_masks: &MaskPlan, log_path: Option<&Path>) -> Result<FitOutcome> {
    let mut cfg = cfg.clone();
    cfg.resolve_grid(manifest);
    let train = manifest.load_split("train")?;
    let val = manifest.load_split("val")?;
    fit_sequences(&train, &val, &cfg, val_masks, log_path)
}

pub fn fit_sequences(
    train: &[VolumeSequence],
    val: &[VolumeSequence],
    cfg: &TrainConfig,
    val_masks: &MaskPlan,
    log_path: Option<&Path>,
) -> Result<FitOutcome> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    trainer.set_schedule(cfg.epochs * per_epoch);
    let mut log_file = match log_path {
        Some(p) => Some(fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let mut log = Vec::new();
    let mut best: Option<(usize, MetricTriple, Vec<f32>)> = None;
    for epoch in 0..=cfg.epochs {
        let lr = trainer.lr();
        let train_loss = if epoch == 0 { None } else { Some(trainer.epoch(train)?) };
        let scores = score_model(&trainer.model, val, val_masks, cfg.n_steps_infer)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_nrmse: scores.nrmse,
            val_ssim: scores.ssim,
            val_psnr: scores.psnr,
            lr,
        };
        if let (Some(f), Some(p)) = (log_file.as_mut(), log_path) {
            let line = serde_json::to_string(&record).map_err(|e| Error::json("metrics log", e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        log.push(record);
        if best.as_ref().is_none_or(|(_, b, _)| scores.nrmse < b.nrmse) {
            best = Some((epoch, scores, trainer.model.net.params().flatten()));
        }
    }
    let (epoch, scores, flat) = best.expect("at least the initial epoch is scored");
    let mut model = trainer.model.clone();
    model.net.load_flat(&flat)?;
    Ok(FitOutcome {
        checkpoint: Checkpoint {
            model,
            epoch,
            val: Some(scores),
            config_hash: cfg.hash(),
            config: cfg.clone(),
        },
        log,
    })
}
