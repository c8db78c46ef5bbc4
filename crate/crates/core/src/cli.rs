//! Command-line front end. Every flag can also come from a JSON file given by
//! `--config`; flags given on the command line win. Each command writes a
//! `run.json` with its resolved arguments, seeds and mask-plan hashes.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::eval::{evaluate_sequences, residual_slice_pgm, slice_pgm, summarize_reports, sweep, MaskOrder, MetricReport, SweepAxis, SweepContext};
use crate::flow::Aggregation;
use crate::forecast::{DiscreteTimes, Variant};
use crate::net::HeadMode;
use crate::series::{MaskPlan, SplitManifest};
use crate::synth::{gen_dataset, make_masks, DynamicsKind, DynamicsSpec, TimeSampling};
use crate::train::{fit, Checkpoint, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "volflow", version, about = "Flow-matching forecasts of 3D volume sequences")]
pub struct Cli {
    /// JSON file with default values for any flag (top level or under the command name).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Where to write the run record instead of the command's default location.
    #[arg(long, global = true)]
    pub run_json: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with train/val/test splits.
    GenData(GenDataArgs),
    /// Draw a frozen mask plan for one split.
    MakeMasks(MakeMasksArgs),
    /// Train a model and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint and the last-context baseline on a split.
    Eval(EvalArgs),
    /// Forecast one patient at a chosen target time.
    Forecast(ForecastArgs),
    /// Re-evaluate a checkpoint along one ablation axis.
    Sweep(SweepArgs),
    /// Score the last-context baseline alone.
    BaselineLci(BaselineArgs),
    /// Mean and standard deviation over reports from seeded runs.
    Summarize(SummarizeArgs),
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Volume shape as H,D,W.
    #[arg(long)]
    pub shape: Option<String>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// pulse, drift or growth.
    #[arg(long)]
    pub dynamics: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub amplitude: Option<f64>,
    /// Pulse period, or drift/growth rate.
    #[arg(long)]
    pub period: Option<f64>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Draw times from this many equally spaced slots instead of irregularly.
    #[arg(long)]
    pub slots: Option<usize>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct MakeMasksArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub missing_prob: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct TrainArgs {
    /// discrete or continuous.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Frozen validation mask plan.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub sigma0: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Euler steps for validation forecasts.
    #[arg(long)]
    pub nfe: Option<usize>,
    /// Per-context hiding probability during training.
    #[arg(long)]
    pub missing_prob: Option<f64>,
    #[arg(long)]
    pub stem: Option<usize>,
    /// per-frame or shared.
    #[arg(long)]
    pub head: Option<String>,
    /// mean or last.
    #[arg(long)]
    pub aggregation: Option<String>,
    /// Divide timestamps by this; defaults to twice the dataset horizon.
    #[arg(long)]
    pub time_scale: Option<f64>,
    /// Continuous variant: also condition on the flow step.
    #[arg(long)]
    pub tau_embedding: bool,
    /// Discrete variant: place contexts by index instead of timestamp.
    #[arg(long)]
    pub withhold_timestamps: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long)]
    pub nfe: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Directory for per-patient residual slices (PGM).
    #[arg(long)]
    pub residuals: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct ForecastArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub patient: Option<String>,
    #[arg(long)]
    pub target_time: Option<f64>,
    #[arg(long)]
    pub nfe: Option<usize>,
    /// Optional mask plan with a row for the patient.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct SweepArgs {
    /// nfe, noise, mask-order or feature-size.
    #[arg(long)]
    pub axis: Option<String>,
    /// Comma-separated axis values.
    #[arg(long)]
    pub values: Option<String>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Validation plan for axes that retrain.
    #[arg(long)]
    pub val_masks: Option<PathBuf>,
    #[arg(long)]
    pub nfe: Option<usize>,
    /// earliest-first or latest-first.
    #[arg(long)]
    pub order: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct BaselineArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct SummarizeArgs {
    /// Comma-separated report files written by `eval --report`.
    #[arg(long)]
    pub reports: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Overlays command-line values on the config file's values.
fn merge<T: Serialize + DeserializeOwned>(cli: &T, config: Option<&Value>, command: &str) -> Result<T> {
    let Some(config) = config else {
        return serde_json::from_value(serde_json::to_value(cli).map_err(|e| Error::json("arguments", e))?)
            .map_err(|e| Error::json("arguments", e));
    };
    let scoped = config.get(command).filter(|v| v.is_object()).unwrap_or(config);
    let mut merged = Map::new();
    if let Value::Object(m) = scoped {
        for (k, v) in m {
            merged.insert(k.replace('-', "_"), v.clone());
        }
    } else {
        return Err(Error::Config("config file must hold a JSON object".into()));
    }
    if let Value::Object(m) = serde_json::to_value(cli).map_err(|e| Error::json("arguments", e))? {
        for (k, v) in m {
            if !(v.is_null() || v == Value::Bool(false)) {
                merged.insert(k, v);
            }
        }
    }
    let fields = serde_json::to_value(cli).map_err(|e| Error::json("arguments", e))?;
    for k in merged.keys() {
        if fields.get(k).is_none() {
            return Err(Error::Config(format!("unknown option {k:?} in config for {command}")));
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Error::json(format!("config for {command}"), e))
}

fn need<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone().ok_or_else(|| Error::Config(format!("missing required option --{flag}")))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| Error::Config(format!("bad {what} entry {p:?}"))))
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parent_or_cwd(p: Option<&Path>) -> PathBuf {
    p.and_then(|p| p.parent())
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn load_plan(path: &Path) -> Result<MaskPlan> {
    MaskPlan::load(path)
}

/// Horizon recorded by `gen-data`, if any.
fn dataset_horizon(data: &Path) -> Option<f64> {
    let text = fs::read_to_string(data.join("dynamics.json")).ok()?;
    let v: Value = serde_json::from_str(&text).ok()?;
    v.get("spec")?.get("horizon")?.as_f64()
}

struct Outcome {
    run_dir: PathBuf,
    record: Value,
}

fn gen_data(a: GenDataArgs) -> Result<Outcome> {
    let out = need(&a.out, "out")?;
    let d = DynamicsSpec::default();
    let shape = match &a.shape {
        Some(s) => {
            let v: Vec<usize> = parse_list(s, "shape")?;
            <[usize; 3]>::try_from(v).map_err(|_| Error::Config("shape needs three entries".into()))?
        }
        None => d.shape,
    };
    let spec = DynamicsSpec {
        kind: a.dynamics.as_deref().map(str::parse::<DynamicsKind>).transpose()?.unwrap_or(d.kind),
        amplitude: a.amplitude.unwrap_or(d.amplitude),
        period: a.period.unwrap_or(d.period),
        noise_sd: a.noise_sd.unwrap_or(d.noise_sd),
        shape,
        frames: a.frames.unwrap_or(d.frames),
        horizon: a.horizon.unwrap_or(d.horizon),
        sampling: a.slots.map_or(TimeSampling::Irregular, |slots| TimeSampling::GridSubset { slots }),
    };
    let n = a.n.unwrap_or(64);
    let seed = a.seed.unwrap_or(0);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let m = gen_dataset(n, &spec, seed, &out)?;
    println!("wrote {n} patients to {} ({} train, {} val, {} test)", out.display(), m.train.len(), m.val.len(), m.test.len());
    Ok(Outcome {
        run_dir: out.clone(),
        record: json!({"args": a, "resolved": {"spec": spec, "n": n, "seed": seed}}),
    })
}

fn make_masks_cmd(a: MakeMasksArgs) -> Result<Outcome> {
    let data = need(&a.data, "data")?;
    let out = need(&a.out, "out")?;
    let split = a.split.clone().unwrap_or_else(|| "val".into());
    let p = a.missing_prob.unwrap_or(0.0);
    let seed = a.seed.unwrap_or(0);
    let plan = make_masks(&SplitManifest::load(&data)?, &split, p, seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    plan.save(&out)?;
    println!("{} {}", out.display(), plan.hash());
    Ok(Outcome {
        run_dir: parent_or_cwd(Some(&out)),
        record: json!({"args": a, "resolved": {"split": split, "missing_prob": p, "seed": seed}, "mask_plan_hash": plan.hash()}),
    })
}

fn train_cmd(a: TrainArgs) -> Result<Outcome> {
    let data = need(&a.data, "data")?;
    let out = need(&a.out, "out")?;
    let manifest = SplitManifest::load(&data)?;
    let plan = match &a.masks {
        Some(p) => load_plan(p)?,
        None => make_masks(&manifest, "val", 0.0, 0)?,
    };
    let mut cfg = TrainConfig::default();
    if let Some(v) = &a.variant {
        cfg.model.variant = v.parse::<Variant>()?;
    }
    macro_rules! set {
        ($field:expr, $opt:expr) => {
            if let Some(v) = $opt {
                $field = v;
            }
        };
    }
    set!(cfg.epochs, a.epochs);
    set!(cfg.lr, a.lr);
    set!(cfg.lr_min, a.lr_min);
    set!(cfg.batch_size, a.batch);
    set!(cfg.weight_decay, a.weight_decay);
    set!(cfg.sigma0, a.sigma0);
    set!(cfg.seed, a.seed);
    set!(cfg.n_steps_infer, a.nfe);
    set!(cfg.missing_prob, a.missing_prob);
    set!(cfg.net.stem_channels, a.stem);
    if let Some(h) = &a.head {
        cfg.net.head = match h.as_str() {
            "per-frame" => HeadMode::PerFrame,
            "shared" => HeadMode::Shared,
            _ => return Err(Error::Config(format!("unknown head {h:?}"))),
        };
    }
    if let Some(g) = &a.aggregation {
        cfg.model.aggregation = g.parse::<Aggregation>()?;
    }
    cfg.model.time_scale = a.time_scale.or_else(|| dataset_horizon(&data).map(|h| 2.0 * h)).unwrap_or(1.0);
    cfg.model.tau_embedding = a.tau_embedding;
    if a.withhold_timestamps {
        cfg.model.discrete_times = DiscreteTimes::FrameIndex;
    }
    if cfg.model.variant == Variant::Continuous && a.withhold_timestamps {
        return Err(Error::Config("--withhold-timestamps applies to the discrete variant only".into()));
    }
    if cfg.model.variant == Variant::Discrete && a.tau_embedding {
        return Err(Error::Config("--tau-embedding applies to the continuous variant only".into()));
    }
    let first = manifest.load_patient(&manifest.train.first().cloned().ok_or_else(|| Error::Empty("empty train split".into()))?)?;
    cfg.net.spatial = first.shape();
    cfg.net.in_frames = first.context_len();
    cfg.net.code_dim = cfg.model.code_dim();
    cfg.resolve_grid(&manifest);
    if cfg.model.variant == Variant::Discrete && cfg.model.discrete_times == DiscreteTimes::Timestamps {
        if let Some(g) = &cfg.model.grid {
            cfg.net.in_frames = g.slots;
        }
    }
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let outcome = fit(&manifest, &cfg, &plan, Some(&out.join("metrics.jsonl")))?;
    outcome.checkpoint.save(&out.join("checkpoint.bin"))?;
    let best = outcome.checkpoint.val.expect("fit scores every epoch");
    println!(
        "best epoch {} val nrmse {:.5} ssim {:.5} psnr {:.3}",
        outcome.checkpoint.epoch, best.nrmse, best.ssim, best.psnr
    );
    Ok(Outcome {
        run_dir: out.clone(),
        record: json!({
            "args": a,
            "resolved": cfg,
            "config_hash": outcome.checkpoint.config_hash,
            "val_mask_plan_hash": plan.hash(),
            "selected_epoch": outcome.checkpoint.epoch,
        }),
    })
}

fn eval_cmd(a: EvalArgs) -> Result<Outcome> {
    let ckpt = Checkpoint::load(&need(&a.ckpt, "ckpt")?)?;
    let data = need(&a.data, "data")?;
    let split = a.split.clone().unwrap_or_else(|| "test".into());
    let plan = load_plan(&need(&a.masks, "masks")?)?;
    let nfe = a.nfe.unwrap_or(ckpt.config.n_steps_infer);
    let seqs = SplitManifest::load(&data)?.load_split(&split)?;
    let report = evaluate_sequences(Some((&ckpt.model, &ckpt.config_hash)), &seqs, &plan, nfe)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    if let Some(dir) = &a.residuals {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for s in &seqs {
            let pred = ckpt.model.predict(s, plan.get(s.patient_id()), nfe)?;
            let path = dir.join(format!("{}.pgm", s.patient_id()));
            fs::write(&path, residual_slice_pgm(&pred, s.target())?).map_err(|e| Error::io(&path, e))?;
        }
    }
    print!("{}", report.to_table());
    Ok(Outcome {
        run_dir: parent_or_cwd(a.report.as_deref()),
        record: json!({
            "args": a,
            "resolved": {"split": split, "nfe": nfe, "checkpoint_config": ckpt.config},
            "config_hash": ckpt.config_hash,
            "mask_plan_hash": plan.hash(),
            "mask_seed": plan.seed,
        }),
    })
}

fn forecast_cmd(a: ForecastArgs) -> Result<Outcome> {
    let ckpt = Checkpoint::load(&need(&a.ckpt, "ckpt")?)?;
    let data = need(&a.data, "data")?;
    let patient = need(&a.patient, "patient")?;
    let out = need(&a.out, "out")?;
    let seq = SplitManifest::load(&data)?.load_patient(&patient)?;
    let t = a.target_time.unwrap_or(seq.target_time());
    let nfe = a.nfe.unwrap_or(ckpt.config.n_steps_infer);
    let plan = a.masks.as_deref().map(load_plan).transpose()?;
    let mask = match &plan {
        Some(p) => Some(p.get(&patient).ok_or_else(|| Error::Config(format!("mask plan has no row for {patient}")))?),
        None => None,
    };
    let pred = ckpt.model.predict_at(&seq, mask, t, nfe)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let blob: Vec<u8> = pred.voxels().iter().flat_map(|v| v.to_le_bytes()).collect();
    let vol_path = out.join("volume.f32");
    fs::write(&vol_path, blob).map_err(|e| Error::io(&vol_path, e))?;
    let slice_path = out.join("slice.pgm");
    fs::write(&slice_path, slice_pgm(&pred)).map_err(|e| Error::io(&slice_path, e))?;
    let uses_time = ckpt.model.spec.variant == Variant::Continuous;
    write_json(
        &out.join("forecast.json"),
        &json!({
            "patient_id": patient,
            "target_time": t,
            "target_time_conditioned": uses_time,
            "shape": pred.shape(),
            "dtype": "f32",
            "byte_order": "LE",
            "nfe": nfe,
        }),
    )?;
    println!("forecast for {patient} at t={t} written to {}", out.display());
    Ok(Outcome {
        run_dir: out.clone(),
        record: json!({
            "args": a,
            "resolved": {"target_time": t, "nfe": nfe},
            "config_hash": ckpt.config_hash,
            "mask_plan_hash": plan.map(|p| p.hash()),
        }),
    })
}

fn sweep_cmd(a: SweepArgs) -> Result<Outcome> {
    let axis: SweepAxis = need(&a.axis, "axis")?.parse()?;
    let values: Vec<f64> = parse_list(&need(&a.values, "values")?, "values")?;
    let ckpt = Checkpoint::load(&need(&a.ckpt, "ckpt")?)?;
    let manifest = SplitManifest::load(&need(&a.data, "data")?)?;
    let split = a.split.clone().unwrap_or_else(|| "test".into());
    let plan = load_plan(&need(&a.masks, "masks")?)?;
    let nfe = a.nfe.unwrap_or(ckpt.config.n_steps_infer);
    let order = a.order.as_deref().unwrap_or("latest-first").parse::<MaskOrder>()?;
    let seqs = manifest.load_split(&split)?;
    let needs_training = matches!(axis, SweepAxis::Noise | SweepAxis::FeatureSize);
    let (train, val, val_plan) = if needs_training {
        let vp = match &a.val_masks {
            Some(p) => load_plan(p)?,
            None => make_masks(&manifest, "val", 0.0, 0)?,
        };
        (manifest.load_split("train")?, manifest.load_split("val")?, Some(vp))
    } else {
        (Vec::new(), Vec::new(), None)
    };
    let ctx = SweepContext {
        checkpoint: &ckpt,
        seqs: &seqs,
        plan: &plan,
        nfe,
        train: val_plan.as_ref().map(|vp| (train.as_slice(), val.as_slice(), vp)),
        order,
    };
    let points = sweep(&ctx, axis, &values)?;
    println!("{:>10} {:>14} {:>10} {:>10}", "value", "NRMSE [1e-2]", "SSIM [%]", "PSNR [dB]");
    for p in &points {
        let m = p.report.model.expect("model rows");
        println!("{:>10} {:>14.3} {:>10.2} {:>10.2}", p.value, 100.0 * m.nrmse, 100.0 * m.ssim, m.psnr);
    }
    if let Some(o) = &a.out {
        write_json(o, &json!({"axis": axis, "order": order, "points": points}))?;
    }
    Ok(Outcome {
        run_dir: parent_or_cwd(a.out.as_deref()),
        record: json!({
            "args": a,
            "resolved": {"axis": axis, "values": values, "split": split, "nfe": nfe, "order": order},
            "config_hash": ckpt.config_hash,
            "mask_plan_hash": plan.hash(),
            "val_mask_plan_hash": val_plan.map(|p| p.hash()),
        }),
    })
}

fn baseline_cmd(a: BaselineArgs) -> Result<Outcome> {
    let data = need(&a.data, "data")?;
    let split = a.split.clone().unwrap_or_else(|| "test".into());
    let plan = load_plan(&need(&a.masks, "masks")?)?;
    let seqs = SplitManifest::load(&data)?.load_split(&split)?;
    let report = evaluate_sequences(None, &seqs, &plan, 1)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    print!("{}", report.to_table());
    Ok(Outcome {
        run_dir: parent_or_cwd(a.report.as_deref()),
        record: json!({"args": a, "resolved": {"split": split}, "mask_plan_hash": plan.hash(), "mask_seed": plan.seed}),
    })
}

fn summarize_cmd(a: SummarizeArgs) -> Result<Outcome> {
    let paths: Vec<PathBuf> = parse_list(&need(&a.reports, "reports")?, "reports")?;
    let reports = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<MetricReport>(&text).map_err(|e| Error::json(p.display().to_string(), e))
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize_reports(&reports)?;
    print!("{}", summary.to_table());
    if let Some(o) = &a.out {
        write_json(o, &summary)?;
    }
    Ok(Outcome {
        run_dir: parent_or_cwd(a.out.as_deref()),
        record: json!({"args": a, "resolved": {"reports": paths}, "mask_plan_hash": summary.mask_plan_hash}),
    })
}

fn dispatch(cli: Cli) -> Result<()> {
    let config: Option<Value> = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::json(p.display().to_string(), e))?)
        }
        None => None,
    };
    let c = config.as_ref();
    let (name, outcome) = match cli.command {
        Command::GenData(a) => ("gen-data", gen_data(merge(&a, c, "gen-data")?)?),
        Command::MakeMasks(a) => ("make-masks", make_masks_cmd(merge(&a, c, "make-masks")?)?),
        Command::Train(a) => ("train", train_cmd(merge(&a, c, "train")?)?),
        Command::Eval(a) => ("eval", eval_cmd(merge(&a, c, "eval")?)?),
        Command::Forecast(a) => ("forecast", forecast_cmd(merge(&a, c, "forecast")?)?),
        Command::Sweep(a) => ("sweep", sweep_cmd(merge(&a, c, "sweep")?)?),
        Command::BaselineLci(a) => ("baseline-lci", baseline_cmd(merge(&a, c, "baseline-lci")?)?),
        Command::Summarize(a) => ("summarize", summarize_cmd(merge(&a, c, "summarize")?)?),
    };
    let path = cli.run_json.unwrap_or_else(|| outcome.run_dir.join("run.json"));
    let mut record = outcome.record;
    if let Value::Object(m) = &mut record {
        m.insert("command".into(), json!(name));
        m.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        m.insert("config_file".into(), json!(cli.config));
    }
    write_json(&path, &record)
}

/// One-line error description: `error[<category>]: <message>`.
pub fn error_line(category: &str, message: &str) -> String {
    format!("error[{category}]: {}", message.replace('\n', " "))
}

/// Runs the CLI on `args` and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(e.category(), &e.to_string()));
            1
        }
    }
}
