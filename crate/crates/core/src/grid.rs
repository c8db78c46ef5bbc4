//! Uniform time grid, grid binning, and last-observed carry-forward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::Volume;

/// Uniform grid `g_k = g1 + (k - 1) * delta` for `k = 1..=slots`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub g1: f64,
    pub delta: f64,
    pub slots: usize,
}

impl GridSpec {
    pub fn new(g1: f64, delta: f64, slots: usize) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() || !g1.is_finite() {
            return Err(Error::Config(format!("grid needs finite g1 and delta > 0, got g1={g1} delta={delta}")));
        }
        if slots == 0 {
            return Err(Error::Config("grid needs at least one slot".into()));
        }
        Ok(GridSpec { g1, delta, slots })
    }

    /// Time of 1-based slot `k`.
    pub fn point(&self, k: usize) -> f64 {
        self.g1 + (k as f64 - 1.0) * self.delta
    }

    /// 1-based slot nearest to `t`, rounding half up and clipping to `1..=slots`.
    pub fn quantize(&self, t: f64) -> usize {
        let raw = 1.0 + ((t - self.g1) / self.delta + 0.5).floor();
        raw.clamp(1.0, self.slots as f64) as usize
    }
}

/// Free-function form of [`GridSpec::quantize`].
pub fn quantize(t: f64, grid: &GridSpec) -> usize {
    grid.quantize(t)
}

/// Frames binned onto a grid. Slots are 0-based here; `source_index[k]` is the
/// input position that filled slot `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedSequence {
    pub slots: Vec<Volume>,
    pub occupancy: Vec<bool>,
    pub source_index: Vec<Option<usize>>,
}

impl GriddedSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Bins frames to their nearest slot. When several frames share a slot the one
/// with the largest timestamp wins, ties going to the later list position.
pub fn embed_grid(frames: &[(&Volume, f64)], grid: &GridSpec) -> Result<GriddedSequence> {
    let Some((first, _)) = frames.first() else {
        return Err(Error::Empty("grid embedding needs at least one frame".into()));
    };
    let shape = first.shape();
    if let Some((v, _)) = frames.iter().find(|(v, _)| v.shape() != shape) {
        return Err(Error::Shape(format!("frame shape {:?} differs from {shape:?}", v.shape())));
    }
    let mut winner: Vec<Option<usize>> = vec![None; grid.slots];
    for (i, (_, t)) in frames.iter().enumerate() {
        let k = grid.quantize(*t) - 1;
        match winner[k] {
            Some(j) if frames[j].1 > *t => {}
            _ => winner[k] = Some(i),
        }
    }
    let slots = winner
        .iter()
        .map(|w| match w {
            Some(i) => frames[*i].0.clone(),
            None => Volume::zeros(shape),
        })
        .collect();
    Ok(GriddedSequence {
        slots,
        occupancy: winner.iter().map(Option::is_some).collect(),
        source_index: winner,
    })
}

/// Fills empty slots with the most recent occupied slot. Slots before the first
/// occupied one take that first occupied volume.
pub fn locf_fill(g: &GriddedSequence) -> Result<Vec<Volume>> {
    let Some(k0) = g.occupancy.iter().position(|&m| m) else {
        return Err(Error::Empty("carry-forward needs at least one occupied slot".into()));
    };
    let mut out: Vec<Volume> = Vec::with_capacity(g.slots.len());
    out.push(g.slots[k0].clone());
    for k in 1..g.slots.len() {
        let next = if g.occupancy[k] {
            g.slots[k].clone()
        } else {
            out[k - 1].clone()
        };
        out.push(next);
    }
    Ok(out)
}

/// Grid embedding followed by carry-forward.
pub fn grid_stack(frames: &[(&Volume, f64)], grid: &GridSpec) -> Result<Vec<Volume>> {
    locf_fill(&embed_grid(frames, grid)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(g1: f64, delta: f64, k: usize) -> GridSpec {
        GridSpec::new(g1, delta, k).unwrap()
    }

    fn tagged(v: f32) -> Volume {
        Volume::filled([2, 2, 2], v)
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(1.4, &g(0.0, 1.0, 4)), 2);
        assert_eq!(quantize(0.0, &g(0.0, 1.0, 4)), 1);
        assert_eq!(quantize(0.5, &g(0.0, 1.0, 4)), 2);
        assert_eq!(quantize(10.0, &g(0.0, 1.0, 4)), 4);
        assert_eq!(quantize(-3.0, &g(0.0, 1.0, 4)), 1);
        assert_eq!(quantize(3.7 + 0.25 * 10.0, &g(3.7, 0.25, 4)), 4);
    }

    #[test]
    fn aligned_frames_each_get_a_slot() {
        let vs: Vec<_> = (0..4).map(|i| tagged(i as f32 + 1.0)).collect();
        let frames: Vec<_> = vs.iter().enumerate().map(|(i, v)| (v, i as f64)).collect();
        let e = embed_grid(&frames, &g(0.0, 1.0, 4)).unwrap();
        assert_eq!(e.occupancy, vec![true; 4]);
        assert_eq!(e.slots, vs);
    }

    #[test]
    fn collision_keeps_latest_frame() {
        let (a, b) = (tagged(1.0), tagged(2.0));
        let e = embed_grid(&[(&a, 0.0), (&b, 0.1)], &g(0.0, 1.0, 3)).unwrap();
        assert_eq!(e.occupancy, vec![true, false, false]);
        assert_eq!(e.slots[0], b);
        assert!(e.slots[1].is_zero() && e.slots[2].is_zero());
        assert_eq!(e.source_index, vec![Some(1), None, None]);
    }

    #[test]
    fn identical_timestamps_prefer_later_position() {
        let (a, b) = (tagged(1.0), tagged(2.0));
        let e = embed_grid(&[(&a, 0.0), (&b, 0.0)], &g(0.0, 1.0, 2)).unwrap();
        assert_eq!(e.source_index[0], Some(1));
    }

    #[test]
    fn out_of_range_frame_is_clipped() {
        let a = tagged(3.0);
        let e = embed_grid(&[(&a, 5.0)], &g(0.0, 1.0, 3)).unwrap();
        assert_eq!(e.occupancy, vec![false, false, true]);
        assert_eq!(e.slots[2], a);
    }

    #[test]
    fn locf_examples() {
        let z = Volume::zeros([2, 2, 2]);
        let (a, b, c) = (tagged(1.0), tagged(2.0), tagged(3.0));
        let gs = GriddedSequence {
            slots: vec![z.clone(), a.clone(), z.clone(), b.clone()],
            occupancy: vec![false, true, false, true],
            source_index: vec![None, Some(0), None, Some(1)],
        };
        assert_eq!(locf_fill(&gs).unwrap(), vec![a.clone(), a.clone(), a.clone(), b.clone()]);

        let full = GriddedSequence {
            slots: vec![a.clone(), b.clone(), c.clone()],
            occupancy: vec![true; 3],
            source_index: vec![Some(0), Some(1), Some(2)],
        };
        assert_eq!(locf_fill(&full).unwrap(), vec![a, b, c.clone()]);

        let tail = GriddedSequence {
            slots: vec![z.clone(), z.clone(), c.clone()],
            occupancy: vec![false, false, true],
            source_index: vec![None, None, Some(0)],
        };
        assert_eq!(locf_fill(&tail).unwrap(), vec![c.clone(), c.clone(), c]);

        let empty = GriddedSequence {
            slots: vec![z.clone()],
            occupancy: vec![false],
            source_index: vec![None],
        };
        assert!(matches!(locf_fill(&empty), Err(Error::Empty(_))));
    }

    #[test]
    fn bad_grid_is_rejected() {
        assert!(GridSpec::new(0.0, 0.0, 3).is_err());
        assert!(GridSpec::new(0.0, 1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn quantize_is_monotone(a in -20.0f64..20.0, b in -20.0f64..20.0, d in 0.1f64..3.0, k in 1usize..10) {
            let grid = g(-1.0, d, k);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(grid.quantize(lo) <= grid.quantize(hi));
        }

        #[test]
        fn locf_never_emits_zero_slots(times in prop::collection::vec(0.0f64..8.0, 1..8), k in 1usize..9) {
            let vols: Vec<_> = (0..times.len()).map(|i| tagged(i as f32 + 1.0)).collect();
            let frames: Vec<_> = vols.iter().zip(&times).map(|(v, t)| (v, *t)).collect();
            let out = grid_stack(&frames, &g(0.0, 1.0, k)).unwrap();
            prop_assert_eq!(out.len(), k);
            prop_assert!(out.iter().all(|v| !v.is_zero()));
        }
    }
}
