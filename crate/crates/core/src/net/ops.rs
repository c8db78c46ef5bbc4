//! Forward and backward kernels: 3D convolution via im2col + GEMM, group
//! normalization, SiLU, and 2x trilinear upsampling.

use rand::Rng;

use super::params::{ParamId, ParamSet};
use crate::conditioning::{silu, silu_grad};
use crate::tensor::{Scalar, Tensor};

pub const GN_EPS: f64 = 1e-5;

/// Cubic-kernel convolution with zero padding `k / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv3d {
    pub fn new<F: Scalar, R: Rng>(
        params: &mut ParamSet<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k * k;
        let w = params.add_uniform(format!("{name}.weight"), vec![cout, cin, k, k, k], fan_in, rng);
        let b = params.add_uniform(format!("{name}.bias"), vec![cout], fan_in, rng);
        Conv3d { cin, cout, k, stride, w, b }
    }

    pub fn new_zero<F: Scalar>(params: &mut ParamSet<F>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let w = params.add_zeros(format!("{name}.weight"), vec![cout, cin, k, k, k]);
        let b = params.add_zeros(format!("{name}.bias"), vec![cout]);
        Conv3d { cin, cout, k, stride: 1, w, b }
    }

    fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        let p = self.pad();
        dims.map(|n| (n + 2 * p - self.k) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn im2col<F: Scalar>(&self, x: &Tensor<F>, od: [usize; 3]) -> Vec<F> {
        let [h, d, w] = x.dims();
        let [oh, odd, ow] = od;
        let (k, s, p) = (self.k, self.stride, self.pad() as isize);
        let nout = oh * odd * ow;
        let mut col = vec![F::zero(); self.cin * k * k * k * nout];
        for ci in 0..self.cin {
            let src = x.channel(ci);
            for kh in 0..k {
                for kd in 0..k {
                    for kw in 0..k {
                        let row = ((ci * k + kh) * k + kd) * k + kw;
                        let dst = &mut col[row * nout..(row + 1) * nout];
                        for y in 0..oh {
                            let ih = (y * s) as isize + kh as isize - p;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for z in 0..odd {
                                let id = (z * s) as isize + kd as isize - p;
                                if id < 0 || id >= d as isize {
                                    continue;
                                }
                                let base_in = (ih as usize * d + id as usize) * w;
                                let base_out = (y * odd + z) * ow;
                                for xo in 0..ow {
                                    let iw = (xo * s) as isize + kw as isize - p;
                                    if iw >= 0 && iw < w as isize {
                                        dst[base_out + xo] = src[base_in + iw as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<F: Scalar>(&self, col: &[F], dx: &mut Tensor<F>, od: [usize; 3]) {
        let [h, d, w] = dx.dims();
        let [oh, odd, ow] = od;
        let (k, s, p) = (self.k, self.stride, self.pad() as isize);
        let nout = oh * odd * ow;
        for ci in 0..self.cin {
            let dst = dx.channel_mut(ci);
            for kh in 0..k {
                for kd in 0..k {
                    for kw in 0..k {
                        let row = ((ci * k + kh) * k + kd) * k + kw;
                        let src = &col[row * nout..(row + 1) * nout];
                        for y in 0..oh {
                            let ih = (y * s) as isize + kh as isize - p;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for z in 0..odd {
                                let id = (z * s) as isize + kd as isize - p;
                                if id < 0 || id >= d as isize {
                                    continue;
                                }
                                let base_in = (ih as usize * d + id as usize) * w;
                                let base_out = (y * odd + z) * ow;
                                for xo in 0..ow {
                                    let iw = (xo * s) as isize + kw as isize - p;
                                    if iw >= 0 && iw < w as isize {
                                        dst[base_in + iw as usize] += src[base_out + xo];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<F: Scalar>(&self, params: &ParamSet<F>, x: &Tensor<F>) -> Tensor<F> {
        debug_assert_eq!(x.channels(), self.cin);
        let od = self.out_dims(x.dims());
        let nout: usize = od.iter().product();
        let kk = self.cin * self.k * self.k * self.k;
        let bias = params.get(self.b);
        let mut y = Tensor::zeros(self.cout, od);
        for (c, &b) in bias.iter().enumerate() {
            y.channel_mut(c).iter_mut().for_each(|v| *v = b);
        }
        let owned;
        let col: &[F] = if self.is_pointwise() {
            x.data()
        } else {
            owned = self.im2col(x, od);
            &owned
        };
        F::gemm(
            self.cout,
            kk,
            nout,
            F::one(),
            params.get(self.w),
            kk as isize,
            1,
            col,
            nout as isize,
            1,
            F::one(),
            y.data_mut(),
            nout as isize,
            1,
        );
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward<F: Scalar>(&self, params: &ParamSet<F>, x: &Tensor<F>, dy: &Tensor<F>, grads: &mut ParamSet<F>) -> Tensor<F> {
        let od = dy.dims();
        let nout: usize = od.iter().product();
        let kk = self.cin * self.k * self.k * self.k;
        let owned;
        let col: &[F] = if self.is_pointwise() {
            x.data()
        } else {
            owned = self.im2col(x, od);
            &owned
        };
        F::gemm(
            self.cout,
            nout,
            kk,
            F::one(),
            dy.data(),
            nout as isize,
            1,
            col,
            1,
            nout as isize,
            F::one(),
            grads.get_mut(self.w),
            kk as isize,
            1,
        );
        for (c, g) in grads.get_mut(self.b).iter_mut().enumerate() {
            *g += dy.channel(c).iter().copied().sum::<F>();
        }
        let mut dcol = vec![F::zero(); kk * nout];
        F::gemm(
            kk,
            self.cout,
            nout,
            F::one(),
            params.get(self.w),
            1,
            kk as isize,
            dy.data(),
            nout as isize,
            1,
            F::zero(),
            &mut dcol,
            nout as isize,
            1,
        );
        if self.is_pointwise() {
            return Tensor::from_vec(self.cin, x.dims(), dcol).expect("pointwise grad shape");
        }
        let mut dx = Tensor::zeros(self.cin, x.dims());
        self.col2im(&dcol, &mut dx, od);
        dx
    }
}

/// Group normalization with per-channel affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm {
    pub groups: usize,
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct GnCache<F> {
    xhat: Tensor<F>,
    rstd: Vec<F>,
}

impl GroupNorm {
    pub fn new<F: Scalar>(params: &mut ParamSet<F>, name: &str, channels: usize, groups: usize) -> Self {
        debug_assert_eq!(channels % groups, 0);
        let gamma = params.add_filled(format!("{name}.gamma"), vec![channels], F::one());
        let beta = params.add_zeros(format!("{name}.beta"), vec![channels]);
        GroupNorm {
            groups,
            channels,
            gamma,
            beta,
        }
    }

    pub fn forward<F: Scalar>(&self, params: &ParamSet<F>, x: &Tensor<F>) -> (Tensor<F>, GnCache<F>) {
        let cpg = self.channels / self.groups;
        let s = x.spatial();
        let n = F::lit((cpg * s) as f64);
        let eps = F::lit(GN_EPS);
        let mut xhat = Tensor::zeros(self.channels, x.dims());
        let mut rstd = Vec::with_capacity(self.groups);
        let span = cpg * s;
        for g in 0..self.groups {
            let src = &x.data()[g * span..(g + 1) * span];
            let mean = src.iter().copied().sum::<F>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            for (o, &v) in xhat.data_mut()[g * span..(g + 1) * span].iter_mut().zip(src) {
                *o = (v - mean) * r;
            }
        }
        let (gamma, beta) = (params.get(self.gamma), params.get(self.beta));
        let mut y = xhat.clone();
        for c in 0..self.channels {
            let (a, b) = (gamma[c], beta[c]);
            y.channel_mut(c).iter_mut().for_each(|v| *v = a * *v + b);
        }
        (y, GnCache { xhat, rstd })
    }

    pub fn backward<F: Scalar>(&self, params: &ParamSet<F>, cache: &GnCache<F>, dy: &Tensor<F>, grads: &mut ParamSet<F>) -> Tensor<F> {
        let cpg = self.channels / self.groups;
        let s = dy.spatial();
        let gamma = params.get(self.gamma);
        {
            let gg = grads.get_mut(self.gamma);
            for (c, g) in gg.iter_mut().enumerate() {
                *g += dy.channel(c).iter().zip(cache.xhat.channel(c)).map(|(&a, &b)| a * b).sum::<F>();
            }
        }
        {
            let gb = grads.get_mut(self.beta);
            for (c, g) in gb.iter_mut().enumerate() {
                *g += dy.channel(c).iter().copied().sum::<F>();
            }
        }
        let mut dx = Tensor::zeros(self.channels, dy.dims());
        let n = F::lit((cpg * s) as f64);
        for g in 0..self.groups {
            let mut sum_d = F::zero();
            let mut sum_dx = F::zero();
            for c in g * cpg..(g + 1) * cpg {
                for (&d, &xh) in dy.channel(c).iter().zip(cache.xhat.channel(c)) {
                    let dxh = d * gamma[c];
                    sum_d += dxh;
                    sum_dx += dxh * xh;
                }
            }
            let r = cache.rstd[g];
            for c in g * cpg..(g + 1) * cpg {
                let out = dx.channel_mut(c);
                for ((o, &d), &xh) in out.iter_mut().zip(dy.channel(c)).zip(cache.xhat.channel(c)) {
                    let dxh = d * gamma[c];
                    *o = r / n * (n * dxh - sum_d - xh * sum_dx);
                }
            }
        }
        dx
    }
}

pub fn silu_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(silu)
}

pub fn silu_backward<F: Scalar>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    x.zip_map(dy, |a, g| g * silu_grad(a)).expect("silu grad shape")
}

/// Source taps for one output index of a 2x linear upsample (half-pixel centers).
fn taps(o: usize, n: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, src - i0 as f64)
}

fn upsample_axis<F: Scalar>(data: &[F], channels: usize, dims: [usize; 3], axis: usize) -> (Vec<F>, [usize; 3]) {
    let mut od = dims;
    od[axis] *= 2;
    let outer: usize = channels * dims[..axis].iter().product::<usize>();
    let inner: usize = dims[axis + 1..].iter().product();
    let (n, m) = (dims[axis], od[axis]);
    let mut out = vec![F::zero(); outer * m * inner];
    let tap: Vec<_> = (0..m).map(|o| taps(o, n)).collect();
    for b in 0..outer {
        let src = &data[b * n * inner..(b + 1) * n * inner];
        let dst = &mut out[b * m * inner..(b + 1) * m * inner];
        for (o, &(i0, i1, l)) in tap.iter().enumerate() {
            let (wa, wb) = (F::lit(1.0 - l), F::lit(l));
            for j in 0..inner {
                dst[o * inner + j] = wa * src[i0 * inner + j] + wb * src[i1 * inner + j];
            }
        }
    }
    (out, od)
}

fn upsample_axis_transpose<F: Scalar>(dout: &[F], channels: usize, od: [usize; 3], axis: usize) -> (Vec<F>, [usize; 3]) {
    let mut dims = od;
    dims[axis] /= 2;
    let outer: usize = channels * od[..axis].iter().product::<usize>();
    let inner: usize = od[axis + 1..].iter().product();
    let (n, m) = (dims[axis], od[axis]);
    let mut out = vec![F::zero(); outer * n * inner];
    let tap: Vec<_> = (0..m).map(|o| taps(o, n)).collect();
    for b in 0..outer {
        let src = &dout[b * m * inner..(b + 1) * m * inner];
        let dst = &mut out[b * n * inner..(b + 1) * n * inner];
        for (o, &(i0, i1, l)) in tap.iter().enumerate() {
            let (wa, wb) = (F::lit(1.0 - l), F::lit(l));
            for j in 0..inner {
                let g = src[o * inner + j];
                dst[i0 * inner + j] += wa * g;
                dst[i1 * inner + j] += wb * g;
            }
        }
    }
    (out, dims)
}

/// Doubles every spatial dimension with trilinear interpolation.
pub fn upsample2<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let c = x.channels();
    let (a, d0) = upsample_axis(x.data(), c, x.dims(), 0);
    let (b, d1) = upsample_axis(&a, c, d0, 1);
    let (o, d2) = upsample_axis(&b, c, d1, 2);
    Tensor::from_vec(c, d2, o).expect("upsample shape")
}

pub fn upsample2_backward<F: Scalar>(dy: &Tensor<F>) -> Tensor<F> {
    let c = dy.channels();
    let (a, d2) = upsample_axis_transpose(dy.data(), c, dy.dims(), 2);
    let (b, d1) = upsample_axis_transpose(&a, c, d2, 1);
    let (o, d0) = upsample_axis_transpose(&b, c, d1, 0);
    Tensor::from_vec(c, d0, o).expect("upsample grad shape")
}
