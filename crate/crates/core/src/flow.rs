//! Flow-matching math: straight-path sampling between a context stack and the
//! broadcast target, the constant target velocity, the regression loss, the
//! interpolated time vector, fixed-step Euler transport and output aggregation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::Volume;
use crate::tensor::{Scalar, Stack};

/// Point on the probability path.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState<F = f32> {
    pub x_tau: Stack<F>,
    pub tau: f64,
    /// Interpolated timestamps, continuous variant only.
    pub time_vec: Option<Vec<f64>>,
}

impl<F: Scalar> FlowState<F> {
    pub fn new(x_tau: Stack<F>, tau: f64, time_vec: Option<Vec<f64>>) -> Result<Self> {
        check_tau(tau)?;
        if let Some(t) = &time_vec {
            if t.len() != x_tau.frames() {
                return Err(Error::Shape(format!(
                    "time vector of length {} for {} frames",
                    t.len(),
                    x_tau.frames()
                )));
            }
        }
        Ok(FlowState { x_tau, tau, time_vec })
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::Config(format!("flow step {tau} outside [0, 1]")))
    }
}

/// Constant-amplitude path noise `sigma(tau) = sigma0` with its own seeded stream.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    sigma0: f64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl NoiseSchedule {
    pub fn new(sigma0: f64, seed: u64) -> Result<Self> {
        if !(sigma0 >= 0.0) || !sigma0.is_finite() {
            return Err(Error::Config(format!("sigma0 must be finite and >= 0, got {sigma0}")));
        }
        Ok(NoiseSchedule {
            sigma0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Noise-free schedule.
    pub fn none() -> Self {
        Self::new(0.0, 0).expect("zero noise is valid")
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sigma(&self, _tau: f64) -> f64 {
        self.sigma0
    }
}

/// Repeats `target` into a stack of `frames` copies.
pub fn broadcast_target<F: Scalar>(target: &Volume, frames: usize) -> Result<Stack<F>> {
    if frames < 1 {
        return Err(Error::Config("broadcast needs at least one frame".into()));
    }
    Stack::from_volumes(std::iter::repeat_n(target, frames))
}

/// `x_tau = (1 - tau) x0 + tau x1 + sigma eps`. No normal draws happen when
/// sigma is zero.
pub fn sample_path<F: Scalar>(x0: &Stack<F>, x1: &Stack<F>, tau: f64, ns: &mut NoiseSchedule) -> Result<FlowState<F>> {
    check_tau(tau)?;
    x0.check_same_shape(x1, "path endpoints")?;
    let (a, b) = (F::lit(1.0 - tau), F::lit(tau));
    let mut x = x0.zip_map(x1, |p, q| a * p + b * q)?;
    let sigma = ns.sigma(tau);
    if sigma > 0.0 {
        let s = F::lit(sigma);
        for v in x.data_mut() {
            let e: f64 = StandardNormal.sample(&mut ns.rng);
            *v += s * F::lit(e);
        }
    }
    FlowState::new(x, tau, None)
}

/// `u = x1 - x0`; independent of the flow step.
pub fn target_velocity<F: Scalar>(x0: &Stack<F>, x1: &Stack<F>) -> Result<Stack<F>> {
    x1.zip_map(x0, |q, p| q - p)
}

/// Mean squared error over every frame and voxel.
pub fn cfm_loss<F: Scalar>(pred: &Stack<F>, u: &Stack<F>) -> Result<F> {
    pred.check_same_shape(u, "loss operands")?;
    if pred.is_empty() {
        return Err(Error::Empty("loss over an empty stack".into()));
    }
    let sum: F = pred.data().iter().zip(u.data()).map(|(&p, &q)| (p - q) * (p - q)).sum();
    Ok(sum / F::lit(pred.len() as f64))
}

/// Gradient of [`cfm_loss`] with respect to `pred`.
pub fn cfm_loss_grad<F: Scalar>(pred: &Stack<F>, u: &Stack<F>) -> Result<Stack<F>> {
    let k = F::lit(2.0 / pred.len() as f64);
    pred.zip_map(u, |p, q| k * (p - q))
}

/// `(1 - tau) t_ctx + tau t_target`, entrywise.
pub fn interp_times(t_ctx: &[f64], t_target: f64, tau: f64) -> Vec<f64> {
    t_ctx.iter().map(|&t| (1.0 - tau) * t + tau * t_target).collect()
}

/// Fixed-step forward Euler over `tau` in `[0, 1]`.
///
/// Step `j` evaluates `velocity(x, tau_j, cond(tau_j))` at `tau_j = j / n_steps`.
/// The state is accumulated in f64 so long runs do not drift in f32.
pub fn integrate<F, K, C, V>(x0: &Stack<F>, n_steps: usize, cond: C, mut velocity: V) -> Result<Stack<F>>
where
    F: Scalar,
    C: Fn(f64) -> K,
    V: FnMut(&Stack<F>, f64, &K) -> Result<Stack<F>>,
{
    if n_steps < 1 {
        return Err(Error::Config("integration needs at least one step".into()));
    }
    let dt = 1.0 / n_steps as f64;
    let mut acc: Vec<f64> = x0.data().iter().map(|v| v.f64()).collect();
    let mut x = x0.clone();
    for j in 0..n_steps {
        let tau = j as f64 * dt;
        let v = velocity(&x, tau, &cond(tau))?;
        x.check_same_shape(&v, "velocity output")?;
        for ((a, xi), vi) in acc.iter_mut().zip(x.data_mut()).zip(v.data()) {
            *a += dt * vi.f64();
            *xi = F::lit(*a);
        }
        if !acc.iter().all(|a| a.is_finite()) {
            return Err(Error::Diverged { step: j });
        }
    }
    Ok(x)
}

/// How the transported stack is reduced to a single volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Last,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "last" => Ok(Aggregation::Last),
            _ => Err(Error::Config(format!("unknown aggregation {s:?}"))),
        }
    }
}

pub fn aggregate<F: Scalar>(stack: &Stack<F>, mode: Aggregation) -> Result<Volume> {
    let t = stack.frames();
    if t == 0 || stack.is_empty() {
        return Err(Error::Empty("cannot aggregate an empty stack".into()));
    }
    match mode {
        Aggregation::Last => stack.volume(t - 1),
        Aggregation::Mean => {
            let s = stack.spatial();
            let mut acc = vec![0.0f64; s];
            for c in 0..t {
                for (a, v) in acc.iter_mut().zip(stack.channel(c)) {
                    *a += v.f64();
                }
            }
            Volume::new(stack.dims(), acc.iter().map(|a| (a / t as f64) as f32).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_stack(frames: usize, dims: [usize; 3], seed: u64) -> Stack<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = frames * dims.iter().product::<usize>();
        Stack::from_vec(frames, dims, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn broadcast_repeats_target() {
        let v = Volume::filled([2, 2, 2], 0.25);
        let s: Stack = broadcast_target(&v, 3).unwrap();
        assert_eq!(s.to_volumes().unwrap(), vec![v.clone(), v.clone(), v.clone()]);
        let one: Stack = broadcast_target(&v, 1).unwrap();
        assert_eq!(one.frames(), 1);
        assert!(broadcast_target::<f32>(&v, 0).is_err());
    }

    #[test]
    fn broadcast_minus_context_is_per_frame_residual() {
        let target = Volume::filled([1, 1, 2], 1.0);
        let ctx = [Volume::filled([1, 1, 2], 0.25), Volume::filled([1, 1, 2], 0.5)];
        let x0: Stack = Stack::from_volumes(&ctx).unwrap();
        let x1 = broadcast_target(&target, 2).unwrap();
        let u = target_velocity(&x0, &x1).unwrap();
        assert_eq!(u.data(), &[0.75, 0.75, 0.5, 0.5]);
    }

    #[test]
    fn path_endpoints_and_midpoint() {
        let x0 = rand_stack(2, [2, 2, 2], 1);
        let x1 = rand_stack(2, [2, 2, 2], 2);
        let mut ns = NoiseSchedule::none();
        assert_eq!(sample_path(&x0, &x1, 0.0, &mut ns).unwrap().x_tau, x0);
        assert_eq!(sample_path(&x0, &x1, 1.0, &mut ns).unwrap().x_tau, x1);
        let z = Stack::<f64>::zeros(1, [2, 2, 2]);
        let two = z.map(|_| 2.0);
        let mid = sample_path(&z, &two, 0.5, &mut ns).unwrap();
        assert!(mid.x_tau.data().iter().all(|&v| v == 1.0));
        assert!(sample_path(&x0, &x1, 1.5, &mut ns).is_err());
        assert!(sample_path(&x0, &z, 0.5, &mut ns).is_err());
    }

    #[test]
    fn path_noise_is_seeded() {
        let x0 = rand_stack(1, [2, 2, 2], 3);
        let mut a = NoiseSchedule::new(0.1, 7).unwrap();
        let mut b = NoiseSchedule::new(0.1, 7).unwrap();
        let pa = sample_path(&x0, &x0, 0.3, &mut a).unwrap();
        let pb = sample_path(&x0, &x0, 0.3, &mut b).unwrap();
        assert_eq!(pa, pb);
        assert!(pa.x_tau.max_abs_diff(&x0) > 0.0);
        assert!(NoiseSchedule::new(-0.1, 0).is_err());
    }

    #[test]
    fn velocity_examples() {
        let x = rand_stack(2, [2, 2, 2], 4);
        assert!(target_velocity(&x, &x).unwrap().data().iter().all(|&v| v == 0.0));
        let z = Stack::<f64>::zeros(2, [2, 2, 2]);
        assert_eq!(target_velocity(&z, &x).unwrap(), x);
    }

    #[test]
    fn loss_examples() {
        let u = rand_stack(3, [2, 2, 2], 5);
        assert_eq!(cfm_loss(&u, &u).unwrap(), 0.0);
        let shifted = u.map(|v| v + 0.5);
        assert!((cfm_loss(&shifted, &u).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_literal_resummation() {
        let p = rand_stack(4, [3, 2, 5], 6);
        let u = rand_stack(4, [3, 2, 5], 7);
        // Literal frame-by-frame, voxel-by-voxel sum of squared norms.
        let mut total = 0.0;
        for t in 0..4 {
            let mut frame = 0.0;
            for (a, b) in p.channel(t).iter().zip(u.channel(t)) {
                frame += (a - b).powi(2);
            }
            total += frame;
        }
        let oracle = total / (4.0 * 30.0);
        assert!((cfm_loss(&p, &u).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn loss_grad_matches_finite_differences() {
        let p = rand_stack(2, [1, 2, 2], 8);
        let u = rand_stack(2, [1, 2, 2], 9);
        let g = cfm_loss_grad(&p, &u).unwrap();
        let h = 1e-6;
        for i in 0..p.len() {
            let mut a = p.clone();
            a.data_mut()[i] += h;
            let mut b = p.clone();
            b.data_mut()[i] -= h;
            let fd = (cfm_loss(&a, &u).unwrap() - cfm_loss(&b, &u).unwrap()) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn interp_times_examples() {
        assert_eq!(interp_times(&[0.0, 1.0], 3.0, 0.5), vec![1.5, 2.0]);
        assert_eq!(interp_times(&[0.0, 1.0], 3.0, 1.0), vec![3.0, 3.0]);
        assert_eq!(interp_times(&[0.0, 1.0], 3.0, 0.0), vec![0.0, 1.0]);
    }

    #[test]
    fn path_derivative_is_target_velocity() {
        let x0 = rand_stack(2, [2, 2, 2], 10);
        let x1 = rand_stack(2, [2, 2, 2], 11);
        let u = target_velocity(&x0, &x1).unwrap();
        let h = 1e-4;
        let mut ns = NoiseSchedule::none();
        for tau in [0.2, 0.5, 0.8] {
            let plus = sample_path(&x0, &x1, tau + h, &mut ns).unwrap().x_tau;
            let minus = sample_path(&x0, &x1, tau - h, &mut ns).unwrap().x_tau;
            let fd = plus.zip_map(&minus, |a, b| (a - b) / (2.0 * h)).unwrap();
            assert!(fd.max_abs_diff(&u) < 1e-6);
        }
    }

    #[test]
    fn euler_is_exact_for_constant_fields() {
        let x0 = rand_stack(3, [2, 2, 2], 12);
        let x1 = rand_stack(3, [2, 2, 2], 13);
        let u = target_velocity(&x0, &x1).unwrap();
        for n in [1, 5, 10, 100] {
            let out = integrate(&x0, n, |_| (), |_, _, _| Ok(u.clone())).unwrap();
            assert!(out.max_abs_diff(&x1) < 1e-12);
        }
        let still = integrate(&x0, 7, |_| (), |x, _, _| Ok(Stack::zeros(x.channels(), x.dims()))).unwrap();
        assert_eq!(still, x0);
    }

    #[test]
    fn single_step_uses_cond_at_zero() {
        let x0 = rand_stack(1, [1, 1, 2], 14);
        let out = integrate(&x0, 1, |tau| tau + 2.0, |x, _, k| Ok(x.map(|_| *k))).unwrap();
        assert_eq!(out, x0.map(|v| v + 2.0));
        assert!(integrate(&x0, 0, |_| (), |x, _, _| Ok(x.clone())).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let x0 = rand_stack(1, [1, 1, 2], 15);
        let r = integrate(&x0, 3, |_| (), |x, _, _| Ok(x.map(|_| f64::INFINITY)));
        assert!(matches!(r, Err(Error::Diverged { step: 0 })));
    }

    #[test]
    fn aggregate_examples() {
        let v = Volume::filled([2, 1, 1], 0.7);
        let s: Stack = Stack::from_volumes([&v, &v, &v]).unwrap();
        assert_eq!(aggregate(&s, Aggregation::Mean).unwrap(), v);
        assert_eq!(aggregate(&s, Aggregation::Last).unwrap(), v);
        let (a, b) = (Volume::zeros([2, 1, 1]), Volume::filled([2, 1, 1], 2.0));
        let s: Stack = Stack::from_volumes([&a, &b]).unwrap();
        assert_eq!(aggregate(&s, Aggregation::Mean).unwrap(), Volume::filled([2, 1, 1], 1.0));
        assert_eq!(aggregate(&s, Aggregation::Last).unwrap(), b);
    }

    proptest! {
        #[test]
        fn interp_times_commutes_with_affine_maps(
            ts in prop::collection::vec(0.0f64..100.0, 1..6),
            target in 0.0f64..200.0,
            tau in 0.0f64..=1.0,
            a in -5.0f64..5.0,
            b in -50.0f64..50.0,
        ) {
            let mapped: Vec<f64> = ts.iter().map(|t| a * t + b).collect();
            let lhs = interp_times(&mapped, a * target + b, tau);
            let rhs: Vec<f64> = interp_times(&ts, target, tau).iter().map(|t| a * t + b).collect();
            for (l, r) in lhs.iter().zip(&rhs) {
                prop_assert!((l - r).abs() <= 1e-9 * (1.0 + r.abs()));
            }
        }

        #[test]
        fn noiseless_endpoints_hold_for_any_stack(seed in any::<u64>(), frames in 1usize..4) {
            let x0 = rand_stack(frames, [2, 1, 3], seed);
            let x1 = rand_stack(frames, [2, 1, 3], seed.wrapping_add(1));
            let mut ns = NoiseSchedule::none();
            prop_assert_eq!(sample_path(&x0, &x1, 0.0, &mut ns).unwrap().x_tau, x0.clone());
            prop_assert_eq!(sample_path(&x0, &x1, 1.0, &mut ns).unwrap().x_tau, x1);
        }
    }
}
