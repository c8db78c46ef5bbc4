//! Image-quality metrics on volumes: NRMSE, PSNR and windowed volumetric SSIM.
//!
//! Conventions: NRMSE and PSNR normalise by the ground-truth intensity range
//! (max - min, replaced by 1 for constant volumes); SSIM uses a uniform 7^3
//! window over all fully contained positions with `C1 = (0.01 L)^2`,
//! `C2 = (0.03 L)^2` and population (biased) local moments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::Volume;

pub const SSIM_WINDOW: usize = 7;
pub const PSNR_CAP_DB: f64 = 100.0;
const RANGE_FLOOR: f64 = 1e-8;

fn check(pred: &Volume, gt: &Volume) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("metric on {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    Ok(())
}

/// `max - min` of the volume.
pub fn intensity_range(v: &Volume) -> f64 {
    let (lo, hi) = v
        .voxels()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x as f64), hi.max(x as f64)));
    hi - lo
}

fn norm_range(gt: &Volume) -> f64 {
    let r = intensity_range(gt);
    if r > 0.0 {
        r
    } else {
        1.0
    }
}

pub fn mse(pred: &Volume, gt: &Volume) -> Result<f64> {
    check(pred, gt)?;
    let s: f64 = pred
        .voxels()
        .iter()
        .zip(gt.voxels())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(s / pred.len() as f64)
}

pub fn nrmse(pred: &Volume, gt: &Volume) -> Result<f64> {
    Ok(mse(pred, gt)?.sqrt() / norm_range(gt))
}

/// PSNR in dB with the default 100 dB cap for exact matches.
pub fn psnr(pred: &Volume, gt: &Volume) -> Result<f64> {
    psnr_capped(pred, gt, PSNR_CAP_DB)
}

pub fn psnr_capped(pred: &Volume, gt: &Volume, cap: f64) -> Result<f64> {
    let m = mse(pred, gt)?;
    if m == 0.0 {
        return Ok(cap);
    }
    let r = norm_range(gt);
    Ok((10.0 * (r * r / m).log10()).min(cap))
}

/// Mean local SSIM with dynamic range taken from `gt`.
pub fn ssim3d(pred: &Volume, gt: &Volume) -> Result<f64> {
    ssim3d_with_range(pred, gt, intensity_range(gt))
}

/// Mean local SSIM with an explicit dynamic range `l` (floored at 1e-8).
pub fn ssim3d_with_range(a: &Volume, b: &Volume, l: f64) -> Result<f64> {
    check(a, b)?;
    let [h, d, w] = a.shape();
    let k = SSIM_WINDOW;
    if h < k || d < k || w < k {
        return Err(Error::Shape(format!("volume {:?} smaller than the {k}^3 SSIM window", a.shape())));
    }
    let l = l.max(RANGE_FLOOR);
    let c1 = (0.01 * l).powi(2);
    let c2 = (0.03 * l).powi(2);
    let n = (k * k * k) as f64;
    let (xa, xb) = (a.voxels(), b.voxels());
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - k {
        for z0 in 0..=d - k {
            for x0 in 0..=w - k {
                // Two passes so constant windows give exactly zero variance.
                let (mut sa, mut sb) = (0.0, 0.0);
                for y in y0..y0 + k {
                    for z in z0..z0 + k {
                        let base = (y * d + z) * w + x0;
                        for i in base..base + k {
                            sa += xa[i] as f64;
                            sb += xb[i] as f64;
                        }
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
                for y in y0..y0 + k {
                    for z in z0..z0 + k {
                        let base = (y * d + z) * w + x0;
                        for i in base..base + k {
                            let (p, q) = (xa[i] as f64 - ma, xb[i] as f64 - mb);
                            saa += p * p;
                            sbb += q * q;
                            sab += p * q;
                        }
                    }
                }
                let (va, vb, cov) = (saa / n, sbb / n, sab / n);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// NRMSE, SSIM and PSNR of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub nrmse: f64,
    pub ssim: f64,
    pub psnr: f64,
}

impl MetricTriple {
    pub fn compute(pred: &Volume, gt: &Volume) -> Result<Self> {
        Ok(MetricTriple {
            nrmse: nrmse(pred, gt)?,
            ssim: ssim3d(pred, gt)?,
            psnr: psnr(pred, gt)?,
        })
    }

    /// Unweighted mean; `None` for an empty slice.
    pub fn mean(rows: &[MetricTriple]) -> Option<MetricTriple> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some(MetricTriple {
            nrmse: rows.iter().map(|r| r.nrmse).sum::<f64>() / n,
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vol(shape: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::new(shape, (0..shape.iter().product()).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn identity_values() {
        let v = rand_vol([8, 8, 8], 1);
        assert_eq!(nrmse(&v, &v).unwrap(), 0.0);
        assert_eq!(psnr(&v, &v).unwrap(), PSNR_CAP_DB);
        assert!((ssim3d(&v, &v).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nrmse_hand_example() {
        // gt alternates 0/1 (range 1), prediction offset by 0.1 everywhere.
        let gt = Volume::new([2, 2, 2], (0..8).map(|i| (i % 2) as f32).collect()).unwrap();
        let pred = Volume::new([2, 2, 2], gt.voxels().iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((nrmse(&pred, &gt).unwrap() - 0.1).abs() < 1e-6);
    }

    #[test]
    fn nrmse_translation_invariant() {
        let gt = rand_vol([4, 4, 4], 2);
        let pred = rand_vol([4, 4, 4], 3);
        let shift = |v: &Volume| Volume::new(v.shape(), v.voxels().iter().map(|x| x + 0.25).collect()).unwrap();
        let a = nrmse(&pred, &gt).unwrap();
        let b = nrmse(&shift(&pred), &shift(&gt)).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn psnr_hand_example() {
        // range 1, every voxel off by 0.1 -> mse 0.01 -> 20 dB
        let gt = Volume::new([2, 2, 2], (0..8).map(|i| (i % 2) as f32).collect()).unwrap();
        let pred = Volume::new([2, 2, 2], (0..8).map(|i| (i % 2) as f32 * 0.8 + 0.1).collect()).unwrap();
        assert!((mse(&pred, &gt).unwrap() - 0.01).abs() < 1e-8);
        assert!((psnr(&pred, &gt).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn psnr_decreases_with_error() {
        let gt = rand_vol([4, 4, 4], 4);
        let off = |e: f32| Volume::new(gt.shape(), gt.voxels().iter().map(|v| v + e).collect()).unwrap();
        assert!(psnr(&off(0.01), &gt).unwrap() > psnr(&off(0.05), &gt).unwrap());
    }

    #[test]
    fn constant_volumes_use_luminance_term_only() {
        let (m1, m2) = (0.3f32, 0.7f32);
        let a = Volume::filled([8, 8, 8], m1);
        let b = Volume::filled([8, 8, 8], m2);
        let l = 1.0;
        let c1 = (0.01f64 * l).powi(2);
        let (m1, m2) = (m1 as f64, m2 as f64);
        let want = (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
        assert!((ssim3d_with_range(&a, &b, l).unwrap() - want).abs() < 1e-9);
        // gt range is zero here, so the floor applies.
        let c1f = (0.01f64 * RANGE_FLOOR).powi(2);
        let want_floor = (2.0 * m1 * m2 + c1f) / (m1 * m1 + m2 * m2 + c1f);
        assert!((ssim3d(&a, &b).unwrap() - want_floor).abs() < 1e-9);
    }

    #[test]
    fn ssim_symmetric_with_shared_range() {
        let a = rand_vol([9, 8, 7], 5);
        let b = rand_vol([9, 8, 7], 6);
        let l = intensity_range(&a).max(intensity_range(&b));
        let ab = ssim3d_with_range(&a, &b, l).unwrap();
        let ba = ssim3d_with_range(&b, &a, l).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn errors() {
        let a = rand_vol([6, 8, 8], 7);
        assert!(ssim3d(&a, &a).is_err());
        let b = rand_vol([8, 8, 8], 8);
        assert!(nrmse(&a, &b).is_err());
        assert!(psnr(&a, &b).is_err());
    }
}
