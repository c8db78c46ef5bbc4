//! Residual block `conv3 -> GN -> FiLM -> SiLU -> conv3 -> GN` plus skip.

use rand::Rng;

use super::ops::{silu_backward, silu_forward, Conv3d, GnCache, GroupNorm};
use super::params::ParamSet;
use crate::conditioning::FilmParams;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub cin: usize,
    pub cout: usize,
    conv1: Conv3d,
    gn1: GroupNorm,
    conv2: Conv3d,
    gn2: GroupNorm,
    proj: Option<Conv3d>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<F> {
    x: Tensor<F>,
    gn1_out: Tensor<F>,
    gn1: GnCache<F>,
    m: Tensor<F>,
    a: Tensor<F>,
    gn2: GnCache<F>,
}

impl ResBlock {
    pub fn new<F: Scalar, R: Rng>(params: &mut ParamSet<F>, name: &str, cin: usize, cout: usize, groups: usize, rng: &mut R) -> Self {
        let conv1 = Conv3d::new(params, &format!("{name}.conv1"), cin, cout, 3, 1, rng);
        let gn1 = GroupNorm::new(params, &format!("{name}.gn1"), cout, groups);
        let conv2 = Conv3d::new(params, &format!("{name}.conv2"), cout, cout, 3, 1, rng);
        let gn2 = GroupNorm::new(params, &format!("{name}.gn2"), cout, groups);
        let proj = (cin != cout).then(|| Conv3d::new(params, &format!("{name}.proj"), cin, cout, 1, 1, rng));
        ResBlock {
            cin,
            cout,
            conv1,
            gn1,
            conv2,
            gn2,
            proj,
        }
    }

    pub fn forward<F: Scalar>(&self, params: &ParamSet<F>, x: &Tensor<F>, film: &FilmParams<F>) -> (Tensor<F>, BlockCache<F>) {
        let h1 = self.conv1.forward(params, x);
        let (n1, gn1) = self.gn1.forward(params, &h1);
        // h_hat = (1 + alpha) * GN(h) + beta + h
        let mut m = h1;
        for c in 0..self.cout {
            let (scale, shift) = (F::one() + film.alpha[c], film.beta[c]);
            for (o, &n) in m.channel_mut(c).iter_mut().zip(n1.channel(c)) {
                *o = *o + scale * n + shift;
            }
        }
        let a = silu_forward(&m);
        let h2 = self.conv2.forward(params, &a);
        let (mut out, gn2) = self.gn2.forward(params, &h2);
        let skip = match &self.proj {
            Some(p) => p.forward(params, x),
            None => x.clone(),
        };
        out.data_mut().iter_mut().zip(skip.data()).for_each(|(o, &s)| *o += s);
        (
            out,
            BlockCache {
                x: x.clone(),
                gn1_out: n1,
                gn1,
                m,
                a,
                gn2,
            },
        )
    }

    /// Returns the input gradient and the gradient of this block's FiLM pair.
    pub fn backward<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        cache: &BlockCache<F>,
        film: &FilmParams<F>,
        dout: &Tensor<F>,
        grads: &mut ParamSet<F>,
    ) -> (Tensor<F>, FilmParams<F>) {
        let dh2 = self.gn2.backward(params, &cache.gn2, dout, grads);
        let da = self.conv2.backward(params, &cache.a, &dh2, grads);
        let dm = silu_backward(&cache.m, &da);
        let mut dalpha = vec![F::zero(); self.cout];
        let mut dbeta = vec![F::zero(); self.cout];
        let mut dn1 = dm.clone();
        for c in 0..self.cout {
            let scale = F::one() + film.alpha[c];
            let mut sa = F::zero();
            let mut sb = F::zero();
            for (o, &n) in dn1.channel_mut(c).iter_mut().zip(cache.gn1_out.channel(c)) {
                sa += *o * n;
                sb += *o;
                *o *= scale;
            }
            dalpha[c] = sa;
            dbeta[c] = sb;
        }
        let mut dh1 = self.gn1.backward(params, &cache.gn1, &dn1, grads);
        dh1.data_mut().iter_mut().zip(dm.data()).for_each(|(a, &b)| *a += b);
        let mut dx = self.conv1.backward(params, &cache.x, &dh1, grads);
        match &self.proj {
            Some(p) => {
                let ds = p.backward(params, &cache.x, dout, grads);
                dx.data_mut().iter_mut().zip(ds.data()).for_each(|(a, &b)| *a += b);
            }
            None => dx.data_mut().iter_mut().zip(dout.data()).for_each(|(a, &b)| *a += b),
        }
        (dx, FilmParams { alpha: dalpha, beta: dbeta })
    }
}
