use volflow::conditioning::encode_times;
use volflow::flow::{broadcast_target, NoiseSchedule};
use volflow::forecast::{DiscreteTimes, ForecastSpec, Variant};
use volflow::grid::{grid_stack, GridSpec};
use volflow::net::params::ParamSet;
use volflow::net::NetConfig;
use volflow::series::{MaskPlan, VolumeSequence};
use volflow::synth::{gen_patient, DynamicsSpec};
use volflow::tensor::Stack;
use volflow::train::{cosine_lr, fit_sequences, train_step_continuous, train_step_discrete, AdamW, Checkpoint, TrainConfig, Trainer};

fn data(n: usize, seed: u64) -> Vec<VolumeSequence> {
    let spec = DynamicsSpec {
        shape: [8, 8, 8],
        frames: 4,
        ..DynamicsSpec::default()
    };
    (0..n).map(|i| gen_patient(&spec, seed + i as u64, &format!("p{i}")).unwrap()).collect()
}

fn config(variant: Variant) -> TrainConfig {
    let mut cfg = TrainConfig {
        lr: 2e-3,
        seed: 5,
        epochs: 2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    cfg.model = ForecastSpec {
        variant,
        grid: (variant == Variant::Discrete).then(|| GridSpec::new(0.0, 7.0 / 3.0, 4).unwrap()),
        time_scale: 10.0,
        ..ForecastSpec::default()
    };
    cfg.net = NetConfig {
        in_frames: 4,
        spatial: [8, 8, 8],
        stem_channels: 4,
        ..NetConfig::default()
    };
    cfg
}

fn full_plan(seqs: &[VolumeSequence]) -> MaskPlan {
    MaskPlan::new("val", 0, seqs.iter().map(|s| (s.patient_id().to_string(), vec![true; s.context_len()])).collect()).unwrap()
}

/// Mean of (X1 - X0)^2 computed straight from the volumes.
fn residual_energy(x0s: &[Stack<f32>], seqs: &[VolumeSequence]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x0, s) in x0s.iter().zip(seqs) {
        for c in 0..x0.frames() {
            for (a, b) in x0.channel(c).iter().zip(s.target().voxels()) {
                sum += ((b - a) as f64).powi(2);
                n += 1;
            }
        }
    }
    sum / n as f64
}

#[test]
fn fresh_loss_is_residual_energy() {
    let seqs = data(3, 0);
    for variant in [Variant::Discrete, Variant::Continuous] {
        let cfg = config(variant);
        let trainer = Trainer::new(cfg.clone()).unwrap();
        let batch: Vec<_> = seqs.iter().map(|s| (s, None)).collect();
        let (loss, _) = trainer.loss_and_grads(&batch, &[0.2, 0.5, 0.9], &mut NoiseSchedule::none()).unwrap();
        let x0s: Vec<Stack<f32>> = seqs
            .iter()
            .map(|s| {
                let frames: Vec<_> = s.contexts().iter().map(|(v, t)| (v, *t)).collect();
                match variant {
                    Variant::Discrete => Stack::from_volumes(grid_stack(&frames, cfg.model.grid.as_ref().unwrap()).unwrap().iter()).unwrap(),
                    Variant::Continuous => Stack::from_volumes(s.contexts().iter().map(|(v, _)| v)).unwrap(),
                }
            })
            .collect();
        let oracle = residual_energy(&x0s, &seqs);
        assert!((loss - oracle).abs() <= 1e-6 * oracle, "{variant}: {loss} vs {oracle}");
    }
}

#[test]
fn tau_zero_uses_context_times_exactly() {
    let seqs = data(1, 3);
    let spec = config(Variant::Continuous).model;
    let prepared = spec.prepare::<f64>(&seqs[0], None, 4).unwrap();
    let code = spec.code::<f64>(&prepared, seqs[0].target_time(), 0.0).unwrap();
    let scaled: Vec<f64> = seqs[0].context_times().iter().map(|t| t / 10.0).collect();
    assert_eq!(code, encode_times(&scaled, &spec.fourier).unwrap());
    assert_eq!(prepared.x0, Stack::from_volumes(seqs[0].contexts().iter().map(|(v, _)| v)).unwrap());
    let x1: Stack<f64> = broadcast_target(seqs[0].target(), 4).unwrap();
    let state = volflow::flow::sample_path(&prepared.x0, &x1, 0.0, &mut NoiseSchedule::none()).unwrap();
    assert_eq!(state.x_tau, prepared.x0);
}

#[test]
fn continuous_code_ignores_joint_permutation() {
    let spec = config(Variant::Continuous).model;
    let t = [0.3, 0.9, 2.2];
    let p = [2.2, 0.3, 0.9];
    let a = encode_times(&t, &spec.fourier).unwrap();
    let b = encode_times(&p, &spec.fourier).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn masked_continuous_input_repeats_last_observed() {
    let seqs = data(1, 4);
    let spec = config(Variant::Continuous).model;
    let p = spec.prepare::<f32>(&seqs[0], Some(&[true, false, true, false]), 4).unwrap();
    let c = seqs[0].contexts();
    let expect = Stack::from_volumes([&c[0].0, &c[2].0, &c[2].0, &c[2].0]).unwrap();
    assert_eq!(p.x0, expect);
    assert_eq!(p.times.len(), 2);
}

#[test]
fn frame_index_grid_ignores_timestamps() {
    let seqs = data(1, 6);
    let spec = ForecastSpec {
        discrete_times: DiscreteTimes::FrameIndex,
        ..config(Variant::Discrete).model
    };
    let p = spec.prepare::<f32>(&seqs[0], Some(&[false, true, false, true]), 4).unwrap();
    let c = seqs[0].contexts();
    // Slot 0 back-fills from slot 1; slot 2 carries slot 1 forward.
    let expect = Stack::from_volumes([&c[1].0, &c[1].0, &c[1].0, &c[3].0]).unwrap();
    assert_eq!(p.x0, expect);
}

#[test]
fn optimizer_fixed_point_and_schedule() {
    let cfg = config(Variant::Discrete);
    let trainer = Trainer::new(cfg).unwrap();
    let mut params: ParamSet<f32> = trainer.model.net.params().clone();
    let before = params.clone();
    let mut opt = AdamW::new(&params, [0.9, 0.999], 1e-8, 0.0);
    let zero = params.zeros_like();
    for _ in 0..3 {
        opt.step(&mut params, &zero, 1e-2);
    }
    assert_eq!(params, before);

    assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5), 1e-3);
    assert!((cosine_lr(100, 100, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
    assert!((cosine_lr(50, 100, 1e-3, 0.0) - 5e-4).abs() < 1e-15);
    assert!(cosine_lr(30, 100, 1e-3, 0.0) > cosine_lr(31, 100, 1e-3, 0.0));
}

#[test]
fn variant_specific_steps_reject_the_other_variant() {
    let seqs = data(2, 0);
    let batch: Vec<_> = seqs.iter().map(|s| (s, None)).collect();
    let mut d = Trainer::new(config(Variant::Discrete)).unwrap();
    assert!(train_step_continuous(&mut d, &batch).is_err());
    assert!(train_step_discrete(&mut d, &batch).unwrap().is_finite());
    let mut c = Trainer::new(config(Variant::Continuous)).unwrap();
    assert!(train_step_discrete(&mut c, &batch).is_err());
    assert!(train_step_continuous(&mut c, &batch).unwrap().is_finite());
}

#[test]
fn loss_decreases_over_200_steps() {
    let seqs = data(4, 10);
    let mut cfg = config(Variant::Discrete);
    cfg.lr = 1e-3;
    cfg.batch_size = 4;
    let mut trainer = Trainer::new(cfg).unwrap();
    trainer.set_schedule(200);
    let batch: Vec<_> = seqs.iter().map(|s| (s, None)).collect();
    let losses: Vec<f64> = (0..200).map(|_| trainer.step(&batch).unwrap()).collect();
    let window = |i: usize| losses[i..i + 20].iter().sum::<f64>() / 20.0;
    let smoothed: Vec<f64> = (0..=180).step_by(20).map(window).collect();
    assert!(smoothed.windows(2).all(|w| w[1] < w[0]), "{smoothed:?}");
}

#[test]
fn fit_is_deterministic_and_selects_best_nrmse() {
    let train = data(4, 20);
    let val = data(2, 40);
    let plan = full_plan(&val);
    let cfg = config(Variant::Continuous);
    let dir = tempfile::tempdir().unwrap();
    let (la, lb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let a = fit_sequences(&train, &val, &cfg, &plan, Some(&la)).unwrap();
    let b = fit_sequences(&train, &val, &cfg, &plan, Some(&lb)).unwrap();
    assert_eq!(std::fs::read(&la).unwrap(), std::fs::read(&lb).unwrap());
    assert_eq!(a.checkpoint.epoch, b.checkpoint.epoch);
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.log.len(), cfg.epochs + 1);
    let best = a.log.iter().map(|r| r.val_nrmse).fold(f64::INFINITY, f64::min);
    assert_eq!(a.checkpoint.val.unwrap().nrmse, best);
    let text = std::fs::read_to_string(&la).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["epoch", "train_loss", "val_nrmse", "val_ssim", "val_psnr", "lr"] {
        assert!(first.get(key).is_some(), "{key}");
    }

    let restored = Checkpoint::from_bytes(&a.checkpoint.to_bytes().unwrap()).unwrap();
    assert_eq!(restored.config_hash, cfg.hash());
    assert_eq!(restored.model.net.params(), a.checkpoint.model.net.params());
}

#[test]
fn zero_epochs_returns_initialization() {
    let train = data(2, 50);
    let val = data(2, 60);
    let mut cfg = config(Variant::Discrete);
    cfg.epochs = 0;
    let out = fit_sequences(&train, &val, &cfg, &full_plan(&val), None).unwrap();
    assert_eq!(out.checkpoint.epoch, 0);
    assert_eq!(out.log.len(), 1);
    assert!(out.log[0].train_loss.is_none());
    let fresh = Trainer::new(cfg).unwrap();
    assert_eq!(out.checkpoint.model.net.params(), fresh.model.net.params());
    // A zero velocity field leaves the carry-forward stack in place.
    let pred = out.checkpoint.model.predict(&val[0], None, 10).unwrap();
    let frames: Vec<_> = val[0].contexts().iter().map(|(v, t)| (v, *t)).collect();
    let filled = grid_stack(&frames, out.checkpoint.config.model.grid.as_ref().unwrap()).unwrap();
    for (i, p) in pred.voxels().iter().enumerate() {
        let mean = filled.iter().map(|v| v.voxels()[i] as f64).sum::<f64>() / filled.len() as f64;
        assert!((*p as f64 - mean).abs() < 1e-6);
    }
}

#[test]
fn tampered_checkpoint_config_is_rejected() {
    let cfg = config(Variant::Discrete);
    let out = fit_sequences(&data(2, 1), &data(1, 9), &TrainConfig { epochs: 0, ..cfg }, &full_plan(&data(1, 9)), None).unwrap();
    let bytes = out.checkpoint.to_bytes().unwrap();
    let text = String::from_utf8_lossy(&bytes).replacen("\"lr\":0.002", "\"lr\":0.003", 1);
    assert!(Checkpoint::from_bytes(text.as_bytes()).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = config(Variant::Discrete);
    cfg.lr = 0.0;
    assert!(Trainer::new(cfg).is_err());
    let mut cfg = config(Variant::Discrete);
    cfg.batch_size = 0;
    assert!(Trainer::new(cfg).is_err());
    let mut cfg = config(Variant::Continuous);
    cfg.model.grid = Some(GridSpec::new(0.0, 1.0, 4).unwrap());
    assert!(Trainer::new(cfg).is_err());
    let mut cfg = config(Variant::Discrete);
    cfg.model.grid = None;
    assert!(Trainer::new(cfg).is_err());
}
