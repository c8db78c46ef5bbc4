//! Turning a sequence into network inputs and transporting it to a forecast.
//!
//! The discrete variant quantizes observed contexts onto a grid, fills gaps by
//! carry-forward and conditions on the flow step alone. The continuous variant
//! stacks the observed contexts directly and conditions on the mean Fourier
//! encoding of the interpolated time vector.

use serde::{Deserialize, Serialize};

use crate::conditioning::{encode_flow_step, encode_times, gamma, FourierSpec};
use crate::error::{Error, Result};
use crate::flow::{aggregate, broadcast_target, integrate, interp_times, Aggregation, FlowState};
use crate::grid::{grid_stack, GridSpec};
use crate::net::{NetConfig, VelocityNet};
use crate::series::{Volume, VolumeSequence};
use crate::tensor::{Scalar, Stack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Discrete,
    Continuous,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrete" => Ok(Variant::Discrete),
            "continuous" => Ok(Variant::Continuous),
            _ => Err(Error::Config(format!("unknown variant {s:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Discrete => "discrete",
            Variant::Continuous => "continuous",
        })
    }
}

/// Which times the discrete variant places on its grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscreteTimes {
    /// Acquisition timestamps.
    #[default]
    Timestamps,
    /// Context indices `0, 1, ..`, i.e. timestamps withheld.
    FrameIndex,
}

/// Everything besides the weights that defines how a model reads a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSpec {
    pub variant: Variant,
    /// Required by the discrete variant with acquisition timestamps.
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub discrete_times: DiscreteTimes,
    pub fourier: FourierSpec,
    /// Timestamps are divided by this before encoding.
    pub time_scale: f64,
    /// Continuous variant only: append `gamma(tau)` to the time code.
    #[serde(default)]
    pub tau_embedding: bool,
    #[serde(default)]
    pub aggregation: Aggregation,
}

impl Default for ForecastSpec {
    fn default() -> Self {
        ForecastSpec {
            variant: Variant::Discrete,
            grid: None,
            discrete_times: DiscreteTimes::Timestamps,
            fourier: FourierSpec::default(),
            time_scale: 1.0,
            tau_embedding: false,
            aggregation: Aggregation::Mean,
        }
    }
}

/// Network-ready view of one (possibly masked) sequence.
#[derive(Debug, Clone)]
pub struct Prepared<F = f32> {
    pub x0: Stack<F>,
    /// Observed context times divided by the time scale, without padding.
    pub times: Vec<f64>,
}

impl ForecastSpec {
    pub fn code_dim(&self) -> usize {
        match self.variant {
            Variant::Continuous if self.tau_embedding => 2 * self.fourier.dim(),
            _ => self.fourier.dim(),
        }
    }

    /// Grid actually used by the discrete variant for `frames` input channels.
    pub fn effective_grid(&self, frames: usize) -> Result<GridSpec> {
        match self.discrete_times {
            DiscreteTimes::FrameIndex => GridSpec::new(0.0, 1.0, frames),
            DiscreteTimes::Timestamps => self
                .grid
                .ok_or_else(|| Error::Config("discrete variant needs a grid".into())),
        }
    }

    pub fn validate(&self, net: &NetConfig) -> Result<()> {
        if !(self.time_scale > 0.0) || !self.time_scale.is_finite() {
            return Err(Error::Config(format!("time scale must be positive, got {}", self.time_scale)));
        }
        if net.code_dim != self.code_dim() {
            return Err(Error::Config(format!(
                "net expects a {}-wide code, conditioning produces {}",
                net.code_dim,
                self.code_dim()
            )));
        }
        if self.variant == Variant::Discrete {
            let grid = self.effective_grid(net.in_frames)?;
            if grid.slots != net.in_frames {
                return Err(Error::Config(format!(
                    "grid has {} slots but the net takes {} frames",
                    grid.slots, net.in_frames
                )));
            }
        } else if self.grid.is_some() || self.discrete_times != DiscreteTimes::Timestamps {
            return Err(Error::Config("grid options conflict with the continuous variant".into()));
        }
        Ok(())
    }

    /// Input stack and normalized times for `seq` under `mask`.
    pub fn prepare<F: Scalar>(&self, seq: &VolumeSequence, mask: Option<&[bool]>, frames: usize) -> Result<Prepared<F>> {
        let observed = seq.observed(mask)?;
        let times: Vec<f64> = observed.iter().map(|(_, t)| t / self.time_scale).collect();
        let x0 = match self.variant {
            Variant::Discrete => {
                let grid = self.effective_grid(frames)?;
                let placed: Vec<(&Volume, f64)> = match self.discrete_times {
                    DiscreteTimes::Timestamps => observed.clone(),
                    DiscreteTimes::FrameIndex => {
                        let keep = mask.map(|m| m.to_vec()).unwrap_or_else(|| vec![true; seq.context_len()]);
                        seq.contexts()
                            .iter()
                            .zip(keep)
                            .enumerate()
                            .filter(|(_, (_, k))| *k)
                            .map(|(i, ((v, _), _))| (v, i as f64))
                            .collect()
                    }
                };
                let vols = grid_stack(&placed, &grid)?;
                Stack::<F>::from_volumes(vols.iter())?
            }
            Variant::Continuous => {
                if observed.len() > frames {
                    return Err(Error::Shape(format!(
                        "{} observed contexts exceed the net's {frames} input frames",
                        observed.len()
                    )));
                }
                let last = observed[observed.len() - 1].0;
                let padded = observed.iter().map(|(v, _)| *v).chain(std::iter::repeat_n(last, frames - observed.len()));
                Stack::<F>::from_volumes(padded)?
            }
        };
        Ok(Prepared { x0, times })
    }

    /// Conditioning code at flow step `tau` for a forecast at `target_time` (unscaled).
    pub fn code<F: Scalar>(&self, prepared: &Prepared<F>, target_time: f64, tau: f64) -> Result<Vec<F>> {
        let code = match self.variant {
            Variant::Discrete => encode_flow_step(tau, &self.fourier),
            Variant::Continuous => {
                let interp = interp_times(&prepared.times, target_time / self.time_scale, tau);
                let mut c = encode_times(&interp, &self.fourier)?;
                if self.tau_embedding {
                    c.extend(gamma(tau, &self.fourier));
                }
                c
            }
        };
        Ok(code.into_iter().map(F::lit).collect())
    }

    pub fn target_stack<F: Scalar>(&self, seq: &VolumeSequence, frames: usize) -> Result<Stack<F>> {
        broadcast_target(seq.target(), frames)
    }
}

/// A velocity network together with the spec that feeds it.
#[derive(Debug, Clone)]
pub struct Forecaster {
    pub net: VelocityNet<f32>,
    pub spec: ForecastSpec,
}

impl Forecaster {
    pub fn new(net: VelocityNet<f32>, spec: ForecastSpec) -> Result<Self> {
        spec.validate(net.config())?;
        Ok(Forecaster { net, spec })
    }

    pub fn frames(&self) -> usize {
        self.net.config().in_frames
    }

    /// Transported stack before aggregation.
    pub fn transport(&self, seq: &VolumeSequence, mask: Option<&[bool]>, target_time: f64, nfe: usize) -> Result<Stack<f32>> {
        let prepared = self.spec.prepare::<f32>(seq, mask, self.frames())?;
        integrate(
            &prepared.x0,
            nfe,
            |tau| self.spec.code::<f32>(&prepared, target_time, tau),
            |x, tau, code| {
                let state = FlowState::new(x.clone(), tau, None)?;
                let code = code.as_ref().map_err(|e| Error::Config(e.to_string()))?;
                self.net.forward(&state, code)
            },
        )
    }

    /// Forecast at an explicit target time (continuous variant: any real time).
    pub fn predict_at(&self, seq: &VolumeSequence, mask: Option<&[bool]>, target_time: f64, nfe: usize) -> Result<Volume> {
        aggregate(&self.transport(seq, mask, target_time, nfe)?, self.spec.aggregation)
    }

    /// Forecast at the sequence's own target time.
    pub fn predict(&self, seq: &VolumeSequence, mask: Option<&[bool]>, nfe: usize) -> Result<Volume> {
        self.predict_at(seq, mask, seq.target_time(), nfe)
    }
}
