//! Time conditioning: sinusoidal features of scalars, the mean encoding of a
//! time vector, and the small MLP that turns a conditioning code into
//! per-block FiLM scale/shift vectors.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::params::{ParamId, ParamSet};
use crate::tensor::Scalar;

/// Octave-spaced frequencies `f_k = base * 2^(k-1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierSpec {
    freqs: Vec<f64>,
}

impl FourierSpec {
    pub fn octaves(n_freqs: usize, base: f64) -> Result<Self> {
        if n_freqs == 0 || !(base > 0.0) {
            return Err(Error::Config(format!("need n_freqs >= 1 and base > 0, got {n_freqs}, {base}")));
        }
        Self::from_freqs((0..n_freqs).map(|k| base * 2f64.powi(k as i32)).collect())
    }

    pub fn from_freqs(freqs: Vec<f64>) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::Config("at least one frequency required".into()));
        }
        if freqs.iter().any(|f| !(*f > 0.0) || !f.is_finite()) || freqs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("frequencies must be positive and strictly increasing".into()));
        }
        Ok(FourierSpec { freqs })
    }

    pub fn n_freqs(&self) -> usize {
        self.freqs.len()
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn dim(&self) -> usize {
        2 * self.freqs.len()
    }
}

impl Default for FourierSpec {
    fn default() -> Self {
        Self::octaves(8, 1.0).expect("valid default")
    }
}

/// `[sin(2 pi f_k t)]_k` followed by `[cos(2 pi f_k t)]_k`.
pub fn gamma(t: f64, spec: &FourierSpec) -> Vec<f64> {
    let phases: Vec<f64> = spec.freqs.iter().map(|f| 2.0 * PI * f * t).collect();
    phases.iter().map(|p| p.sin()).chain(phases.iter().map(|p| p.cos())).collect()
}

/// Mean of [`gamma`] over `times`; the output width does not depend on the count.
pub fn encode_times(times: &[f64], spec: &FourierSpec) -> Result<Vec<f64>> {
    if times.is_empty() {
        return Err(Error::Empty("cannot encode an empty time vector".into()));
    }
    // Running mean: exact when every time is identical.
    let mut acc = vec![0.0; spec.dim()];
    for (i, &t) in times.iter().enumerate() {
        let k = (i + 1) as f64;
        for (a, g) in acc.iter_mut().zip(gamma(t, spec)) {
            *a += (g - *a) / k;
        }
    }
    Ok(acc)
}

pub fn encode_flow_step(tau: f64, spec: &FourierSpec) -> Vec<f64> {
    gamma(tau, spec)
}

/// Scale and shift for one residual block.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams<F = f32> {
    pub alpha: Vec<F>,
    pub beta: Vec<F>,
}

/// Two-layer head `code -> SiLU(W1 code + b1) -> W2 h + b2`, the output split
/// into `(alpha, beta)` per block. `W2`/`b2` start at zero, so every block
/// starts with `alpha = beta = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmHead {
    code_dim: usize,
    hidden: usize,
    widths: Vec<usize>,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FilmCache<F> {
    code: Vec<F>,
    pre: Vec<F>,
    act: Vec<F>,
}

impl FilmHead {
    pub fn new<F: Scalar, R: Rng>(
        params: &mut ParamSet<F>,
        code_dim: usize,
        hidden: usize,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        let out: usize = widths.iter().map(|w| 2 * w).sum();
        let w1 = params.add_uniform("film.w1", vec![hidden, code_dim], code_dim, rng);
        let b1 = params.add_uniform("film.b1", vec![hidden], code_dim, rng);
        let w2 = params.add_zeros("film.w2", vec![out, hidden]);
        let b2 = params.add_zeros("film.b2", vec![out]);
        FilmHead {
            code_dim,
            hidden,
            widths: widths.to_vec(),
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn out_dim(&self) -> usize {
        self.widths.iter().map(|w| 2 * w).sum()
    }

    pub fn forward<F: Scalar>(&self, params: &ParamSet<F>, code: &[F]) -> Result<(Vec<FilmParams<F>>, FilmCache<F>)> {
        if code.len() != self.code_dim {
            return Err(Error::Shape(format!(
                "conditioning code of width {} for a head expecting {}",
                code.len(),
                self.code_dim
            )));
        }
        let (w1, b1) = (params.get(self.w1), params.get(self.b1));
        let pre: Vec<F> = (0..self.hidden)
            .map(|j| b1[j] + (0..self.code_dim).map(|i| w1[j * self.code_dim + i] * code[i]).sum::<F>())
            .collect();
        let act: Vec<F> = pre.iter().map(|&x| silu(x)).collect();
        let (w2, b2) = (params.get(self.w2), params.get(self.b2));
        let out: Vec<F> = (0..self.out_dim())
            .map(|o| b2[o] + (0..self.hidden).map(|j| w2[o * self.hidden + j] * act[j]).sum::<F>())
            .collect();
        let mut films = Vec::with_capacity(self.widths.len());
        let mut off = 0;
        for &w in &self.widths {
            films.push(FilmParams {
                alpha: out[off..off + w].to_vec(),
                beta: out[off + w..off + 2 * w].to_vec(),
            });
            off += 2 * w;
        }
        Ok((
            films,
            FilmCache {
                code: code.to_vec(),
                pre,
                act,
            },
        ))
    }

    /// Accumulates head-weight gradients given gradients of every `(alpha, beta)`.
    pub fn backward<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        cache: &FilmCache<F>,
        dfilm: &[FilmParams<F>],
        grads: &mut ParamSet<F>,
    ) -> Result<()> {
        if dfilm.len() != self.widths.len() {
            return Err(Error::Shape(format!("{} FiLM gradients for {} blocks", dfilm.len(), self.widths.len())));
        }
        let mut dout = Vec::with_capacity(self.out_dim());
        for (d, &w) in dfilm.iter().zip(&self.widths) {
            if d.alpha.len() != w || d.beta.len() != w {
                return Err(Error::Shape("FiLM gradient width mismatch".into()));
            }
            dout.extend_from_slice(&d.alpha);
            dout.extend_from_slice(&d.beta);
        }
        let w2 = params.get(self.w2);
        let mut dact = vec![F::zero(); self.hidden];
        for (o, &g) in dout.iter().enumerate() {
            for j in 0..self.hidden {
                dact[j] += g * w2[o * self.hidden + j];
            }
        }
        {
            let gw2 = grads.get_mut(self.w2);
            for (o, &g) in dout.iter().enumerate() {
                for j in 0..self.hidden {
                    gw2[o * self.hidden + j] += g * cache.act[j];
                }
            }
        }
        grads.get_mut(self.b2).iter_mut().zip(&dout).for_each(|(a, &g)| *a += g);
        let dpre: Vec<F> = dact.iter().zip(&cache.pre).map(|(&g, &x)| g * silu_grad(x)).collect();
        {
            let gw1 = grads.get_mut(self.w1);
            for j in 0..self.hidden {
                for i in 0..self.code_dim {
                    gw1[j * self.code_dim + i] += dpre[j] * cache.code[i];
                }
            }
        }
        grads.get_mut(self.b1).iter_mut().zip(&dpre).for_each(|(a, &g)| *a += g);
        Ok(())
    }
}

/// Runs the head and returns the per-block `(alpha, beta)`.
pub fn film_from_code<F: Scalar>(code: &[F], head: &FilmHead, params: &ParamSet<F>) -> Result<Vec<FilmParams<F>>> {
    Ok(head.forward(params, code)?.0)
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[inline]
pub(crate) fn silu<F: Scalar>(x: F) -> F {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad<F: Scalar>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gamma_at_zero_and_quarter_period() {
        let spec = FourierSpec::default();
        let g = gamma(0.0, &spec);
        assert_eq!(g.len(), 16);
        assert!(g[..8].iter().all(|&v| v == 0.0));
        assert!(g[8..].iter().all(|&v| v == 1.0));
        let unit = FourierSpec::from_freqs(vec![1.0]).unwrap();
        let q = gamma(0.25, &unit);
        assert!((q[0] - 1.0).abs() < 1e-15 && q[1].abs() < 1e-15);
        assert_eq!(encode_flow_step(0.25, &unit), q);
    }

    #[test]
    fn default_frequencies_are_octaves() {
        let spec = FourierSpec::default();
        assert_eq!(spec.freqs(), &[1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0]);
        assert!(FourierSpec::from_freqs(vec![2.0, 1.0]).is_err());
        assert!(FourierSpec::octaves(0, 1.0).is_err());
    }

    #[test]
    fn encode_times_examples() {
        let spec = FourierSpec::default();
        assert_eq!(encode_times(&[0.3, 0.3, 0.3], &spec).unwrap(), gamma(0.3, &spec));
        assert_eq!(encode_times(&[0.7], &spec).unwrap(), gamma(0.7, &spec));
        assert!(encode_times(&[], &spec).is_err());
        assert_eq!(encode_times(&[0.1, 0.5, 0.9], &spec).unwrap().len(), encode_times(&[0.2], &spec).unwrap().len());
    }

    #[test]
    fn encoded_interpolated_times_collapse_at_tau_one() {
        let spec = FourierSpec::default();
        let ctx = [0.05, 0.2, 0.31];
        let code = encode_times(&crate::flow::interp_times(&ctx, 0.8, 1.0), &spec).unwrap();
        let want = gamma(0.8, &spec);
        for (a, b) in code.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn head(rng_seed: u64, widths: &[usize]) -> (FilmHead, ParamSet<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut ps = ParamSet::new();
        let h = FilmHead::new(&mut ps, 6, 5, widths, &mut rng);
        (h, ps)
    }

    #[test]
    fn fresh_head_is_identity_modulation() {
        let (h, ps) = head(1, &[2, 4, 3]);
        let films = film_from_code(&[0.3, -0.1, 0.2, 0.9, 0.0, 1.0], &h, &ps).unwrap();
        assert_eq!(films.len(), 3);
        for (f, &w) in films.iter().zip(&[2, 4, 3]) {
            assert_eq!(f.alpha, vec![0.0; w]);
            assert_eq!(f.beta, vec![0.0; w]);
        }
        let doubled: Vec<f64> = [0.3, -0.1, 0.2, 0.9, 0.0, 1.0].iter().map(|v| v * 2.0).collect();
        let again = film_from_code(&doubled, &h, &ps).unwrap();
        assert_eq!(again.iter().map(|f| f.alpha.len()).collect::<Vec<_>>(), vec![2, 4, 3]);
        assert!(film_from_code(&[0.0; 5], &h, &ps).is_err());
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let widths = [2, 3];
        let (h, mut ps) = head(2, &widths);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in ps.iter_mut() {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
        }
        let code = [0.4, -0.7, 0.1, 0.5, -0.2, 0.9];
        // Scalar objective: a fixed weighted sum of all alpha and beta entries.
        let weights: Vec<f64> = (0..h.out_dim()).map(|i| ((i * 7 + 3) % 5) as f64 - 2.0).collect();
        let objective = |ps: &ParamSet<f64>| -> f64 {
            let films = film_from_code(&code, &h, ps).unwrap();
            let flat: Vec<f64> = films.iter().flat_map(|f| f.alpha.iter().chain(&f.beta).copied()).collect();
            flat.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = h.forward(&ps, &code).unwrap();
        let mut dfilm = Vec::new();
        let mut off = 0;
        for &w in &widths {
            dfilm.push(FilmParams {
                alpha: weights[off..off + w].to_vec(),
                beta: weights[off + w..off + 2 * w].to_vec(),
            });
            off += 2 * w;
        }
        let mut grads = ps.zeros_like();
        h.backward(&ps, &cache, &dfilm, &mut grads).unwrap();
        let step = 1e-5;
        let flat = ps.flatten();
        let analytic = grads.flatten();
        for i in 0..flat.len() {
            let mut plus = ps.clone();
            let mut f = flat.clone();
            f[i] += step;
            plus.load_flat(&f);
            let mut minus = ps.clone();
            f[i] -= 2.0 * step;
            minus.load_flat(&f);
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * step);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!((fd - analytic[i]).abs() / denom < 1e-4, "param {i}: fd {fd} vs {}", analytic[i]);
        }
    }

    proptest! {
        #[test]
        fn gamma_is_bounded(t in -1e3f64..1e3) {
            prop_assert!(gamma(t, &FourierSpec::default()).iter().all(|v| v.abs() <= 1.0));
        }

        #[test]
        fn encode_times_is_permutation_invariant(mut ts in prop::collection::vec(0.0f64..2.0, 1..8), seed in any::<u64>()) {
            let spec = FourierSpec::default();
            let a = encode_times(&ts, &spec).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..ts.len()).rev() {
                ts.swap(i, rng.random_range(0..=i));
            }
            let b = encode_times(&ts, &spec).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn encode_times_is_continuous_under_shifts(ts in prop::collection::vec(0.0f64..2.0, 1..8)) {
            let spec = FourierSpec::default();
            let base = encode_times(&ts, &spec).unwrap();
            let mut prev = f64::INFINITY;
            for delta in [1e-2, 1e-4, 1e-6] {
                let shifted: Vec<f64> = ts.iter().map(|t| t + delta).collect();
                let e = encode_times(&shifted, &spec).unwrap();
                let d = e.iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                // Lipschitz bound: |d/dt sin(2 pi f t)| <= 2 pi f_max.
                prop_assert!(d <= 2.0 * std::f64::consts::PI * 128.0 * delta + 1e-12);
                prop_assert!(d <= prev + 1e-12);
                prev = d;
            }
        }
    }
}
