//! Synthetic longitudinal volumes whose content depends on real-valued time,
//! and frozen mask plans for evaluation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::rng::{derive, derive_stream, stream};
use crate::series::{write_series, MaskPlan, SplitManifest, Volume, VolumeSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DynamicsKind {
    /// Radius `r0 (1 + a sin(2 pi t / period))`.
    Pulse,
    /// Center moves along a random unit direction at `a * rate` voxels per time unit.
    Drift,
    /// Radius `r0 (1 + a * rate * t)`.
    Growth,
}

impl std::str::FromStr for DynamicsKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pulse" => Ok(DynamicsKind::Pulse),
            "drift" => Ok(DynamicsKind::Drift),
            "growth" => Ok(DynamicsKind::Growth),
            _ => Err(Error::Config(format!("unknown dynamics {s:?}"))),
        }
    }
}

/// How acquisition times are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum TimeSampling {
    /// Sorted uniform context times in `[0, 0.7 horizon]`, target uniform in
    /// `(last context, horizon]`.
    #[default]
    Irregular,
    /// `slots` equally spaced times over `[0, horizon]`; `frames + 1` distinct
    /// slots are drawn, the latest is the target.
    GridSubset { slots: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSpec {
    pub kind: DynamicsKind,
    pub amplitude: f64,
    /// Period for pulse, rate for drift and growth.
    pub period: f64,
    pub noise_sd: f64,
    pub shape: [usize; 3],
    pub frames: usize,
    pub horizon: f64,
    #[serde(default)]
    pub sampling: TimeSampling,
}

impl Default for DynamicsSpec {
    fn default() -> Self {
        DynamicsSpec {
            kind: DynamicsKind::Pulse,
            amplitude: 0.3,
            period: 8.0,
            noise_sd: 0.05,
            shape: [16, 16, 16],
            frames: 8,
            horizon: 10.0,
            sampling: TimeSampling::Irregular,
        }
    }
}

impl DynamicsSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind == DynamicsKind::Pulse && !(self.period > 0.0) {
            return Err(Error::Config("pulse period must be positive".into()));
        }
        if self.shape.iter().any(|&d| d == 0 || d % 8 != 0) {
            return Err(Error::Config(format!("shape {:?} must be positive multiples of 8", self.shape)));
        }
        if self.frames == 0 || !(self.horizon > 0.0) || !(self.noise_sd >= 0.0) || !self.amplitude.is_finite() {
            return Err(Error::Config("frames, horizon must be positive and noise_sd non-negative".into()));
        }
        if let TimeSampling::GridSubset { slots } = self.sampling {
            if slots < self.frames + 1 {
                return Err(Error::Config(format!("{slots} slots cannot hold {} contexts plus a target", self.frames)));
            }
        }
        Ok(())
    }

    /// Grid matching the context window: `frames` slots over `[0, 0.7 horizon]`,
    /// or the slot grid itself for grid-subset sampling.
    pub fn default_grid(&self) -> Result<GridSpec> {
        match self.sampling {
            TimeSampling::Irregular => {
                let delta = if self.frames > 1 {
                    0.7 * self.horizon / (self.frames - 1) as f64
                } else {
                    self.horizon
                };
                GridSpec::new(0.0, delta, self.frames)
            }
            TimeSampling::GridSubset { slots } => GridSpec::new(0.0, self.horizon / (slots - 1).max(1) as f64, slots),
        }
    }
}

/// Per-patient geometry, fixed across that patient's frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Anatomy {
    pub center: [f64; 3],
    pub axes: [f64; 3],
    pub radius: f64,
    pub direction: [f64; 3],
    pub foreground: f64,
    pub background: f64,
}

impl Anatomy {
    pub fn sample<R: Rng>(spec: &DynamicsSpec, rng: &mut R) -> Self {
        let s = spec.shape;
        let min_dim = *s.iter().min().expect("three dims") as f64;
        let center = s.map(|n| (n as f64 - 1.0) / 2.0 + rng.random_range(-1.5..1.5));
        let axes = [0; 3].map(|_| rng.random_range(0.85..1.15));
        let mut direction = [0; 3].map(|_| rng.random_range(-1.0..1.0f64));
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        direction.iter_mut().for_each(|v| *v /= norm);
        Anatomy {
            center,
            axes,
            radius: min_dim * rng.random_range(0.18..0.26),
            direction,
            foreground: rng.random_range(0.6..0.9),
            background: 0.1,
        }
    }
}

/// Noise-free rendering of the scene at time `t`.
pub fn render(spec: &DynamicsSpec, anatomy: &Anatomy, t: f64) -> Volume {
    let a = spec.amplitude;
    let (mut radius, mut center) = (anatomy.radius, anatomy.center);
    match spec.kind {
        DynamicsKind::Pulse => radius *= 1.0 + a * (2.0 * PI * t / spec.period).sin(),
        DynamicsKind::Growth => radius *= 1.0 + a * spec.period * t,
        DynamicsKind::Drift => {
            for (c, d) in center.iter_mut().zip(anatomy.direction) {
                *c += a * spec.period * t * d;
            }
        }
    }
    let [h, d, w] = spec.shape;
    let edge = 0.6;
    let mut vox = Vec::with_capacity(h * d * w);
    for y in 0..h {
        for z in 0..d {
            for x in 0..w {
                let p = [y as f64, z as f64, x as f64];
                let dist = (0..3)
                    .map(|i| ((p[i] - center[i]) / anatomy.axes[i]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let inside = 1.0 / (1.0 + ((dist - radius) / edge).exp());
                let v = anatomy.background + (anatomy.foreground - anatomy.background) * inside;
                vox.push(v as f32);
            }
        }
    }
    Volume::new(spec.shape, vox).expect("render shape")
}

fn noisy<R: Rng>(clean: Volume, sd: f64, rng: &mut R) -> Volume {
    if sd == 0.0 {
        return clean;
    }
    let normal = Normal::new(0.0, sd).expect("valid sd");
    let shape = clean.shape();
    let vox = clean
        .into_voxels()
        .into_iter()
        .map(|v| (v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Volume::new(shape, vox).expect("noisy shape")
}

fn draw_times<R: Rng>(spec: &DynamicsSpec, rng: &mut R) -> (Vec<f64>, f64) {
    match spec.sampling {
        TimeSampling::Irregular => loop {
            let mut ts: Vec<f64> = (0..spec.frames).map(|_| rng.random_range(0.0..=0.7 * spec.horizon)).collect();
            ts.sort_by(f64::total_cmp);
            if ts.windows(2).any(|w| w[1] <= w[0]) {
                continue;
            }
            let last = ts[ts.len() - 1];
            let target = rng.random_range(last..=spec.horizon);
            if target > last {
                return (ts, target);
            }
        },
        TimeSampling::GridSubset { slots } => {
            let mut idx: Vec<usize> = rand::seq::index::sample(rng, slots, spec.frames + 1).into_vec();
            idx.sort_unstable();
            let dt = spec.horizon / (slots - 1).max(1) as f64;
            let target = idx.pop().expect("frames + 1 slots") as f64 * dt;
            (idx.into_iter().map(|k| k as f64 * dt).collect(), target)
        }
    }
}

pub fn gen_patient(spec: &DynamicsSpec, seed: u64, patient_id: &str) -> Result<VolumeSequence> {
    spec.validate()?;
    let mut rng = stream(seed);
    let anatomy = Anatomy::sample(spec, &mut rng);
    let (times, target_time) = draw_times(spec, &mut rng);
    let contexts = times
        .iter()
        .map(|&t| (noisy(render(spec, &anatomy, t), spec.noise_sd, &mut rng), t))
        .collect();
    let target = noisy(render(spec, &anatomy, target_time), spec.noise_sd, &mut rng);
    VolumeSequence::new(patient_id, contexts, target, target_time)
}

pub fn patient_id(i: usize) -> String {
    format!("p{i:04}")
}

/// Writes `n_patients` series plus `dataset.json`, split 60/20/20 by a seeded shuffle.
pub fn gen_dataset(n_patients: usize, spec: &DynamicsSpec, seed: u64, out_dir: &Path) -> Result<SplitManifest> {
    spec.validate()?;
    if n_patients == 0 {
        return Err(Error::Config("dataset needs at least one patient".into()));
    }
    let ids: Vec<String> = (0..n_patients).map(patient_id).collect();
    for id in &ids {
        let seq = gen_patient(spec, derive(seed, &format!("patient/{id}")), id)?;
        write_series(&seq, &out_dir.join(id))?;
    }
    let mut order = ids.clone();
    let mut rng = derive_stream(seed, "split");
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let n_train = (0.6 * n_patients as f64).round() as usize;
    let n_val = (0.2 * n_patients as f64).round() as usize;
    let test = order.split_off((n_train + n_val).min(order.len()));
    let val = order.split_off(n_train.min(order.len()));
    let manifest = SplitManifest::new(out_dir.to_path_buf(), order, val, test, Some(spec.default_grid()?))?;
    manifest.save()?;
    std::fs::write(
        out_dir.join("dynamics.json"),
        serde_json::to_string_pretty(&serde_json::json!({"spec": spec, "seed": seed, "n_patients": n_patients}))
            .map_err(|e| Error::json("dynamics", e))?,
    )
    .map_err(|e| Error::io(out_dir.join("dynamics.json"), e))?;
    Ok(manifest)
}

/// Bernoulli observation row with at least one observed entry.
pub fn sample_mask_row<R: Rng>(len: usize, missing_prob: f64, rng: &mut R) -> Vec<bool> {
    loop {
        let row: Vec<bool> = (0..len).map(|_| rng.random::<f64>() >= missing_prob).collect();
        if row.iter().any(|&b| b) {
            return row;
        }
    }
}

/// One frozen mask row per patient of `split`, masking context frames
/// independently with probability `missing_prob`.
pub fn make_masks(manifest: &SplitManifest, split: &str, missing_prob: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&missing_prob) {
        return Err(Error::Config(format!("missing probability {missing_prob} outside [0, 1)")));
    }
    let mut rng = derive_stream(seed, &format!("masks/{split}"));
    let mut ids: Vec<&String> = manifest.split(split)?.iter().collect();
    ids.sort();
    let mut masks = BTreeMap::new();
    for id in ids {
        let n = manifest.load_patient(id)?.context_len();
        masks.insert(id.clone(), sample_mask_row(n, missing_prob, &mut rng));
    }
    MaskPlan::new(split, seed, masks)
}
