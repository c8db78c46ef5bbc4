//! Evaluation harness: the last-context baseline, per-patient and aggregate
//! metric reports under frozen masks, and ablation sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::Forecaster;
use crate::metrics::{intensity_range, MetricTriple, PSNR_CAP_DB, SSIM_WINDOW};
use crate::series::{MaskPlan, Volume, VolumeSequence};
use crate::train::{fit_sequences, Checkpoint};

/// Last-context-image baseline: the observed context with the latest timestamp.
pub fn lci(seq: &VolumeSequence, mask: Option<&[bool]>) -> Result<Volume> {
    let observed = seq.observed(mask)?;
    Ok(observed[observed.len() - 1].0.clone())
}

fn mask_for<'a>(plan: &'a MaskPlan, seq: &VolumeSequence) -> Result<&'a [bool]> {
    plan.get(seq.patient_id())
        .ok_or_else(|| Error::Config(format!("mask plan {} has no row for {}", plan.split, seq.patient_id())))
}

/// Mean model metrics over `seqs` under `plan`.
pub fn score_model(model: &Forecaster, seqs: &[VolumeSequence], plan: &MaskPlan, nfe: usize) -> Result<MetricTriple> {
    let rows = seqs
        .iter()
        .map(|s| MetricTriple::compute(&model.predict(s, Some(mask_for(plan, s)?), nfe)?, s.target()))
        .collect::<Result<Vec<_>>>()?;
    MetricTriple::mean(&rows).ok_or_else(|| Error::Empty("no sequences to score".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRow {
    pub patient_id: String,
    pub model: Option<MetricTriple>,
    pub lci: MetricTriple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub split: String,
    pub variant: Option<String>,
    pub nfe: Option<usize>,
    pub seed: u64,
    pub mask_plan_hash: String,
    pub config_hash: Option<String>,
    /// Network evaluations spent on the model rows.
    pub forward_passes: usize,
    pub conventions: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub meta: ReportMeta,
    pub model: Option<MetricTriple>,
    pub lci: MetricTriple,
    pub patients: Vec<PatientRow>,
}

fn conventions() -> BTreeMap<String, String> {
    [
        ("nrmse", "rmse / (max(gt) - min(gt)); range 0 replaced by 1".to_string()),
        (
            "ssim",
            format!("volumetric, uniform {SSIM_WINDOW}^3 window over valid positions, C1=(0.01L)^2, C2=(0.03L)^2, L=range(gt) floored at 1e-8"),
        ),
        ("psnr", format!("10 log10(range(gt)^2 / mse), capped at {PSNR_CAP_DB} dB")),
        ("aggregate", "unweighted mean over patients".to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Scores `model` (if any) and the baseline on every sequence under `plan`.
pub fn evaluate_sequences(
    model: Option<(&Forecaster, &str)>,
    seqs: &[VolumeSequence],
    plan: &MaskPlan,
    nfe: usize,
) -> Result<MetricReport> {
    if seqs.is_empty() {
        return Err(Error::Empty("no sequences to evaluate".into()));
    }
    let mut patients = Vec::with_capacity(seqs.len());
    for s in seqs {
        let mask = mask_for(plan, s)?;
        let m = match model {
            Some((f, _)) => Some(MetricTriple::compute(&f.predict(s, Some(mask), nfe)?, s.target())?),
            None => None,
        };
        patients.push(PatientRow {
            patient_id: s.patient_id().to_string(),
            model: m,
            lci: MetricTriple::compute(&lci(s, Some(mask))?, s.target())?,
        });
    }
    let lci_rows: Vec<_> = patients.iter().map(|p| p.lci).collect();
    let model_rows: Option<Vec<_>> = patients.iter().map(|p| p.model).collect();
    Ok(MetricReport {
        meta: ReportMeta {
            split: plan.split.clone(),
            variant: model.map(|(f, _)| f.spec.variant.to_string()),
            nfe: model.map(|_| nfe),
            seed: plan.seed,
            mask_plan_hash: plan.hash(),
            config_hash: model.map(|(_, h)| h.to_string()),
            forward_passes: if model.is_some() { nfe * seqs.len() } else { 0 },
            conventions: conventions(),
        },
        model: model_rows.and_then(|r| MetricTriple::mean(&r)),
        lci: MetricTriple::mean(&lci_rows).expect("non-empty"),
        patients,
    })
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("report", e))
    }

    /// Aligned table: method, NRMSE [1e-2], SSIM [%], PSNR [dB].
    pub fn to_table(&self) -> String {
        let mut rows = Vec::new();
        if let Some(m) = &self.model {
            rows.push((self.meta.variant.clone().unwrap_or_else(|| "model".into()), m));
        }
        rows.push(("lci".to_string(), &self.lci));
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>14} {:>10} {:>10}", "method", "NRMSE [1e-2]", "SSIM [%]", "PSNR [dB]");
        for (name, m) in rows {
            let _ = writeln!(out, "{:<12} {:>14.3} {:>10.2} {:>10.2}", name, 100.0 * m.nrmse, 100.0 * m.ssim, m.psnr);
        }
        out
    }
}

/// Order in which contexts are hidden for the mask-order sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskOrder {
    EarliestFirst,
    LatestFirst,
}

impl std::str::FromStr for MaskOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "earliest-first" => Ok(MaskOrder::EarliestFirst),
            "latest-first" => Ok(MaskOrder::LatestFirst),
            _ => Err(Error::Config(format!("unknown mask order {s:?}"))),
        }
    }
}

/// Plan hiding the `count` earliest or latest contexts of every sequence.
/// At least one context always stays observed.
pub fn ordered_mask_plan(seqs: &[VolumeSequence], split: &str, count: usize, order: MaskOrder) -> Result<MaskPlan> {
    let mut masks = BTreeMap::new();
    for s in seqs {
        let n = s.context_len();
        if count >= n {
            return Err(Error::Config(format!("cannot hide {count} of {n} contexts of {}", s.patient_id())));
        }
        let row = (0..n)
            .map(|i| match order {
                MaskOrder::EarliestFirst => i >= count,
                MaskOrder::LatestFirst => i < n - count,
            })
            .collect();
        masks.insert(s.patient_id().to_string(), row);
    }
    MaskPlan::new(split, count as u64, masks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Nfe,
    /// Training path-noise amplitude; retrains per value.
    Noise,
    MaskOrder,
    /// Stem width; retrains per value.
    FeatureSize,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nfe" => Ok(SweepAxis::Nfe),
            "noise" => Ok(SweepAxis::Noise),
            "mask-order" => Ok(SweepAxis::MaskOrder),
            "feature-size" => Ok(SweepAxis::FeatureSize),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    /// Network evaluations spent up to and including this point.
    pub cumulative_forward_passes: usize,
    pub report: MetricReport,
}

/// Inputs shared by every sweep axis.
pub struct SweepContext<'a> {
    pub checkpoint: &'a Checkpoint,
    pub seqs: &'a [VolumeSequence],
    pub plan: &'a MaskPlan,
    pub nfe: usize,
    /// Needed by the retraining axes.
    pub train: Option<(&'a [VolumeSequence], &'a [VolumeSequence], &'a MaskPlan)>,
    pub order: MaskOrder,
}

fn as_count(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!("{what} must be a non-negative integer, got {v}")))
    }
}

/// Re-evaluates along `axis` at each of `values`.
pub fn sweep(ctx: &SweepContext, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepPoint>> {
    let ckpt = ctx.checkpoint;
    let mut out = Vec::with_capacity(values.len());
    let mut cumulative = 0;
    for &v in values {
        let report = match axis {
            SweepAxis::Nfe => {
                let nfe = as_count(v, "nfe")?;
                if nfe == 0 {
                    return Err(Error::Config("nfe must be at least 1".into()));
                }
                evaluate_sequences(Some((&ckpt.model, &ckpt.config_hash)), ctx.seqs, ctx.plan, nfe)?
            }
            SweepAxis::MaskOrder => {
                let plan = ordered_mask_plan(ctx.seqs, &ctx.plan.split, as_count(v, "masked count")?, ctx.order)?;
                evaluate_sequences(Some((&ckpt.model, &ckpt.config_hash)), ctx.seqs, &plan, ctx.nfe)?
            }
            SweepAxis::Noise | SweepAxis::FeatureSize => {
                let mut cfg = ckpt.config.clone();
                if axis == SweepAxis::Noise {
                    cfg.sigma0 = v;
                } else {
                    cfg.net.stem_channels = as_count(v, "stem width")?;
                }
                if cfg == ckpt.config {
                    evaluate_sequences(Some((&ckpt.model, &ckpt.config_hash)), ctx.seqs, ctx.plan, ctx.nfe)?
                } else {
                    let (train, val, val_plan) = ctx
                        .train
                        .ok_or_else(|| Error::Config("retraining sweep needs train and validation data".into()))?;
                    let fitted = fit_sequences(train, val, &cfg, val_plan, None)?.checkpoint;
                    evaluate_sequences(Some((&fitted.model, &fitted.config_hash)), ctx.seqs, ctx.plan, ctx.nfe)?
                }
            }
        };
        cumulative += report.meta.forward_passes;
        out.push(SweepPoint {
            value: v,
            cumulative_forward_passes: cumulative,
            report,
        });
    }
    Ok(out)
}

/// Binary PGM of the middle depth slice of `|pred - gt|`, scaled so a
/// residual equal to the intensity range of `gt` maps to white.
pub fn residual_slice_pgm(pred: &Volume, gt: &Volume) -> Result<Vec<u8>> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let [h, d, w] = gt.shape();
    let range = match intensity_range(gt) {
        r if r > 0.0 => r,
        _ => 1.0,
    };
    let z = d / 2;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let r = (pred.get(y, z, x) - gt.get(y, z, x)).abs() as f64 / range;
            out.push((255.0 * r).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

/// Binary PGM of the middle depth slice, intensities in `[0, 1]` mapped to `0..=255`.
pub fn slice_pgm(v: &Volume) -> Vec<u8> {
    let [h, d, w] = v.shape();
    let z = d / 2;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            out.push((255.0 * v.get(y, z, x) as f64).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Mean and sample standard deviation of one method across seeded runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: MetricTriple,
    pub std: MetricTriple,
}

fn spread(rows: &[MetricTriple]) -> Option<Spread> {
    let mean = MetricTriple::mean(rows)?;
    let dof = (rows.len().max(2) - 1) as f64;
    let sd = |f: fn(&MetricTriple) -> f64| (rows.iter().map(|r| (f(r) - f(&mean)).powi(2)).sum::<f64>() / dof).sqrt();
    Some(Spread {
        mean,
        std: MetricTriple {
            nrmse: sd(|m| m.nrmse),
            ssim: sd(|m| m.ssim),
            psnr: sd(|m| m.psnr),
        },
    })
}

/// Aggregate of several reports scored on one split under one mask plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: usize,
    pub split: String,
    pub variant: Option<String>,
    pub mask_plan_hash: String,
    pub config_hashes: Vec<Option<String>>,
    pub model: Option<Spread>,
    pub lci: Spread,
}

pub fn summarize_reports(reports: &[MetricReport]) -> Result<RunSummary> {
    let Some(first) = reports.first() else {
        return Err(Error::Empty("no reports to summarize".into()));
    };
    for r in reports {
        if r.meta.split != first.meta.split || r.meta.mask_plan_hash != first.meta.mask_plan_hash {
            return Err(Error::Config(format!(
                "reports disagree on split or mask plan ({} {} vs {} {})",
                r.meta.split, r.meta.mask_plan_hash, first.meta.split, first.meta.mask_plan_hash
            )));
        }
    }
    let model: Option<Vec<MetricTriple>> = reports.iter().map(|r| r.model).collect();
    let lci: Vec<MetricTriple> = reports.iter().map(|r| r.lci).collect();
    Ok(RunSummary {
        runs: reports.len(),
        split: first.meta.split.clone(),
        variant: first.meta.variant.clone(),
        mask_plan_hash: first.meta.mask_plan_hash.clone(),
        config_hashes: reports.iter().map(|r| r.meta.config_hash.clone()).collect(),
        model: model.and_then(|m| spread(&m)),
        lci: spread(&lci).expect("non-empty"),
    })
}

impl RunSummary {
    /// Same columns as a single report, each cell `mean (std)`.
    pub fn to_table(&self) -> String {
        let mut rows = Vec::new();
        if let Some(m) = &self.model {
            rows.push((self.variant.clone().unwrap_or_else(|| "model".into()), m));
        }
        rows.push(("lci".to_string(), &self.lci));
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>16} {:>16} {:>16}", "method", "NRMSE [1e-2]", "SSIM [%]", "PSNR [dB]");
        for (name, s) in rows {
            let cell = |m: f64, d: f64, k: f64, p: usize| format!("{:.p$} ({:.p$})", k * m, k * d);
            let _ = writeln!(
                out,
                "{:<12} {:>16} {:>16} {:>16}",
                name,
                cell(s.mean.nrmse, s.std.nrmse, 100.0, 3),
                cell(s.mean.ssim, s.std.ssim, 100.0, 2),
                cell(s.mean.psnr, s.std.psnr, 1.0, 2)
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_patient, DynamicsSpec};

    fn patients(n: usize) -> Vec<VolumeSequence> {
        let spec = DynamicsSpec {
            shape: [8, 8, 8],
            frames: 4,
            ..DynamicsSpec::default()
        };
        (0..n).map(|i| gen_patient(&spec, i as u64, &format!("p{i}")).unwrap()).collect()
    }

    fn full_plan(seqs: &[VolumeSequence]) -> MaskPlan {
        ordered_mask_plan(seqs, "test", 0, MaskOrder::LatestFirst).unwrap()
    }

    #[test]
    fn lci_picks_latest_observed() {
        let s = &patients(1)[0];
        let c = s.contexts();
        assert_eq!(lci(s, None).unwrap(), c[3].0);
        assert_eq!(lci(s, Some(&[true, true, true, false])).unwrap(), c[2].0);
        assert_eq!(lci(s, Some(&[false, true, false, false])).unwrap(), c[1].0);
        assert!(lci(s, Some(&[false; 4])).is_err());
    }

    #[test]
    fn baseline_report_matches_direct_metrics() {
        let seqs = patients(3);
        let plan = ordered_mask_plan(&seqs, "test", 1, MaskOrder::LatestFirst).unwrap();
        let rep = evaluate_sequences(None, &seqs, &plan, 10).unwrap();
        for (row, s) in rep.patients.iter().zip(&seqs) {
            let direct = MetricTriple::compute(&lci(s, plan.get(s.patient_id())).unwrap(), s.target()).unwrap();
            assert_eq!(row.lci, direct);
        }
        let mean = MetricTriple::mean(&rep.patients.iter().map(|p| p.lci).collect::<Vec<_>>()).unwrap();
        assert_eq!(rep.lci, mean);
        assert!(rep.model.is_none());
        assert!(rep.to_table().contains("lci"));
    }

    #[test]
    fn ordered_plans() {
        let seqs = patients(2);
        let e = ordered_mask_plan(&seqs, "x", 2, MaskOrder::EarliestFirst).unwrap();
        let l = ordered_mask_plan(&seqs, "x", 2, MaskOrder::LatestFirst).unwrap();
        assert_eq!(e.get("p0").unwrap(), &[false, false, true, true]);
        assert_eq!(l.get("p0").unwrap(), &[true, true, false, false]);
        assert!(ordered_mask_plan(&seqs, "x", 4, MaskOrder::LatestFirst).is_err());
        assert_ne!(e.hash(), l.hash());
        assert_ne!(full_plan(&seqs).hash(), l.hash());
    }

    #[test]
    fn pgm_header_and_scaling() {
        let gt = Volume::new([8, 8, 8], (0..512).map(|i| (i % 2) as f32).collect()).unwrap();
        let bytes = residual_slice_pgm(&gt, &gt).unwrap();
        let header = b"P5\n8 8\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
        let pred = Volume::new([8, 8, 8], gt.voxels().iter().map(|v| v + 0.5).collect()).unwrap();
        let bytes = residual_slice_pgm(&pred, &gt).unwrap();
        assert_eq!(bytes.len(), header.len() + 64);
        assert!(bytes[header.len()..].iter().all(|&b| b == 128));
    }

    #[test]
    fn summary_uses_sample_deviation() {
        let mk = |v: f64| MetricReport {
            meta: ReportMeta {
                split: "test".into(),
                variant: Some("discrete".into()),
                nfe: Some(10),
                seed: 0,
                mask_plan_hash: "h".into(),
                config_hash: None,
                forward_passes: 0,
                conventions: BTreeMap::new(),
            },
            model: Some(MetricTriple { nrmse: v, ssim: v, psnr: v }),
            lci: MetricTriple { nrmse: 1.0, ssim: 1.0, psnr: 1.0 },
            patients: Vec::new(),
        };
        let s = summarize_reports(&[mk(1.0), mk(2.0), mk(3.0)]).unwrap();
        let m = s.model.unwrap();
        assert_eq!(m.mean.ssim, 2.0);
        assert_eq!(m.std.ssim, 1.0);
        assert_eq!(s.lci.std.nrmse, 0.0);
        let mut other = mk(1.0);
        other.meta.mask_plan_hash = "g".into();
        assert!(summarize_reports(&[mk(1.0), other]).is_err());
    }
}
