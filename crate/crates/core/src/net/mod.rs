//! The learnable velocity field: a four-scale residual 3D U-Net whose blocks
//! are modulated by FiLM vectors computed from a conditioning code.

pub mod block;
pub mod checkpoint;
pub mod ops;
pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{FilmCache, FilmHead, FilmParams};
use crate::error::{Error, Result};
use crate::flow::FlowState;
use crate::tensor::{Scalar, Stack, Tensor};
use block::{BlockCache, ResBlock};
use ops::{silu_backward, silu_forward, upsample2, upsample2_backward, Conv3d};
use params::ParamSet;

/// How the head maps features to output frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    /// One output channel per input frame.
    #[default]
    PerFrame,
    /// A single velocity channel broadcast to every frame.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_frames: usize,
    pub spatial: [usize; 3],
    pub stem_channels: usize,
    pub expansion_rates: Vec<usize>,
    pub blocks_per_scale: usize,
    /// Upper bound on GroupNorm groups; each layer uses `min(norm_groups, channels)`.
    pub norm_groups: usize,
    pub code_dim: usize,
    pub film_hidden: usize,
    #[serde(default)]
    pub head: HeadMode,
    /// Windowed self-attention in the bottleneck. Not implemented.
    #[serde(default)]
    pub attention: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_frames: 8,
            spatial: [16, 16, 16],
            stem_channels: 8,
            expansion_rates: vec![1, 1, 2, 4],
            blocks_per_scale: 1,
            norm_groups: 8,
            code_dim: 16,
            film_hidden: 32,
            head: HeadMode::PerFrame,
            attention: false,
        }
    }
}

pub const SCALES: usize = 4;

impl NetConfig {
    pub fn widths(&self) -> Vec<usize> {
        self.expansion_rates.iter().map(|r| r * self.stem_channels).collect()
    }

    pub fn groups_for(&self, channels: usize) -> usize {
        self.norm_groups.min(channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.attention {
            return Err(Error::Config("bottleneck attention is not supported; set attention = false".into()));
        }
        if self.expansion_rates.len() != SCALES {
            return Err(Error::Config(format!("expected {SCALES} expansion rates, got {}", self.expansion_rates.len())));
        }
        if self.in_frames == 0 || self.stem_channels == 0 || self.blocks_per_scale == 0 || self.norm_groups == 0 {
            return Err(Error::Config("frames, stem channels, blocks per scale and groups must be positive".into()));
        }
        if self.expansion_rates.contains(&0) || self.code_dim == 0 || self.film_hidden == 0 {
            return Err(Error::Config("expansion rates, code and hidden widths must be positive".into()));
        }
        for w in self.widths() {
            if w % self.groups_for(w) != 0 {
                return Err(Error::Config(format!("{w} channels not divisible into {} groups", self.groups_for(w))));
            }
        }
        let f = 1 << (SCALES - 1);
        if self.spatial.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::Shape(format!("spatial dims {:?} must be positive multiples of {f}", self.spatial)));
        }
        Ok(())
    }

    fn out_channels(&self) -> usize {
        match self.head {
            HeadMode::PerFrame => self.in_frames,
            HeadMode::Shared => 1,
        }
    }
}

/// Layer layout; parameter values live in a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
struct UNet {
    stem: Conv3d,
    blocks: Vec<ResBlock>,
    enc: Vec<Vec<usize>>,
    bottleneck: Vec<usize>,
    dec: Vec<Vec<usize>>,
    downs: Vec<Conv3d>,
    upconvs: Vec<Conv3d>,
    head1: Conv3d,
    head2: Conv3d,
    film: FilmHead,
}

/// Activations retained by a forward pass.
#[derive(Debug, Clone)]
pub struct Trace<F> {
    input: Tensor<F>,
    blocks: Vec<Option<BlockCache<F>>>,
    down_in: Vec<Tensor<F>>,
    upconv_in: Vec<Tensor<F>>,
    head_in: Tensor<F>,
    head_h: Tensor<F>,
    head_a: Tensor<F>,
    films: Vec<FilmParams<F>>,
    film_cache: FilmCache<F>,
}

#[derive(Debug, Clone)]
pub struct VelocityNet<F = f32> {
    cfg: NetConfig,
    arch: UNet,
    params: ParamSet<F>,
    retained: Option<Trace<F>>,
}

impl<F: Scalar> VelocityNet<F> {
    /// Fan-in uniform convolutions; the last head conv and the FiLM output
    /// layer start at zero so a fresh net is the zero velocity field.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let widths = cfg.widths();
        let stem = Conv3d::new(&mut ps, "stem", cfg.in_frames, cfg.stem_channels, 1, 1, &mut rng);
        let mut blocks = Vec::new();
        let mut block = |ps: &mut ParamSet<F>, rng: &mut ChaCha8Rng, name: String, cin: usize, cout: usize| {
            blocks.push(ResBlock::new(ps, &name, cin, cout, cfg.groups_for(cout), rng));
            blocks.len() - 1
        };
        let mut enc = Vec::new();
        let mut downs = Vec::new();
        let mut c = cfg.stem_channels;
        for (l, &w) in widths.iter().enumerate().take(SCALES - 1) {
            let mut ids = Vec::new();
            for b in 0..cfg.blocks_per_scale {
                ids.push(block(&mut ps, &mut rng, format!("enc{l}.{b}"), c, w));
                c = w;
            }
            enc.push(ids);
            downs.push(Conv3d::new(&mut ps, &format!("down{l}"), w, w, 3, 2, &mut rng));
        }
        let wb = widths[SCALES - 1];
        let mut bottleneck = Vec::new();
        for b in 0..=cfg.blocks_per_scale {
            bottleneck.push(block(&mut ps, &mut rng, format!("mid.{b}"), c, wb));
            c = wb;
        }
        let mut dec = Vec::new();
        let mut upconvs = Vec::new();
        for l in (0..SCALES - 1).rev() {
            let w = widths[l];
            upconvs.push(Conv3d::new(&mut ps, &format!("up{l}"), c, w, 3, 1, &mut rng));
            let mut ids = Vec::new();
            let mut cin = 2 * w;
            for b in 0..cfg.blocks_per_scale {
                ids.push(block(&mut ps, &mut rng, format!("dec{l}.{b}"), cin, w));
                cin = w;
            }
            dec.push(ids);
            c = w;
        }
        let head1 = Conv3d::new(&mut ps, "head.conv", c, c, 3, 1, &mut rng);
        let head2 = Conv3d::new_zero(&mut ps, "head.out", c, cfg.out_channels(), 1);
        let block_widths: Vec<usize> = blocks.iter().map(|b| b.cout).collect();
        let film = FilmHead::new(&mut ps, cfg.code_dim, cfg.film_hidden, &block_widths, &mut rng);
        Ok(VelocityNet {
            cfg: cfg.clone(),
            arch: UNet {
                stem,
                blocks,
                enc,
                bottleneck,
                dec,
                downs,
                upconvs,
                head1,
                head2,
                film,
            },
            params: ps,
            retained: None,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn film_widths(&self) -> Vec<usize> {
        self.arch.blocks.iter().map(|b| b.cout).collect()
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<G: Scalar>(&self) -> VelocityNet<G> {
        VelocityNet {
            cfg: self.cfg.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
            retained: None,
        }
    }

    fn check_input(&self, x: &Tensor<F>, code: &[F]) -> Result<()> {
        if x.channels() != self.cfg.in_frames {
            return Err(Error::Shape(format!("net expects {} frames, got {}", self.cfg.in_frames, x.channels())));
        }
        let f = 1 << (SCALES - 1);
        if x.dims().iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::Shape(format!("spatial dims {:?} are not multiples of {f}", x.dims())));
        }
        if code.len() != self.cfg.code_dim {
            return Err(Error::Shape(format!(
                "conditioning code has width {}, net expects {}",
                code.len(),
                self.cfg.code_dim
            )));
        }
        Ok(())
    }

    /// Predicted velocity for the stack in `state`.
    pub fn forward(&self, state: &FlowState<F>, code: &[F]) -> Result<Stack<F>> {
        Ok(self.forward_trace(&state.x_tau, code)?.0)
    }

    /// Forward pass that also returns the activations needed by [`backward_trace`](Self::backward_trace).
    pub fn forward_trace(&self, x: &Tensor<F>, code: &[F]) -> Result<(Stack<F>, Trace<F>)> {
        self.check_input(x, code)?;
        let a = &self.arch;
        let ps = &self.params;
        let (films, film_cache) = a.film.forward(ps, code)?;
        let mut caches: Vec<Option<BlockCache<F>>> = vec![None; a.blocks.len()];
        let run = |s: Tensor<F>, id: usize, caches: &mut Vec<Option<BlockCache<F>>>| {
            let (out, cache) = a.blocks[id].forward(ps, &s, &films[id]);
            caches[id] = Some(cache);
            out
        };
        let mut s = a.stem.forward(ps, x);
        let mut skips = Vec::new();
        let mut down_in = Vec::new();
        for (ids, down) in a.enc.iter().zip(&a.downs) {
            for &id in ids {
                s = run(s, id, &mut caches);
            }
            skips.push(s.clone());
            let next = down.forward(ps, &s);
            down_in.push(s);
            s = next;
        }
        for &id in &a.bottleneck {
            s = run(s, id, &mut caches);
        }
        let mut upconv_in = Vec::new();
        for (ids, upconv) in a.dec.iter().zip(&a.upconvs) {
            let up = upsample2(&s);
            let u = upconv.forward(ps, &up);
            upconv_in.push(up);
            let skip = skips.pop().expect("one skip per decoder level");
            s = Tensor::concat(&u, &skip)?;
            for &id in ids {
                s = run(s, id, &mut caches);
            }
        }
        let head_h = a.head1.forward(ps, &s);
        let head_a = silu_forward(&head_h);
        let raw = a.head2.forward(ps, &head_a);
        let out = match self.cfg.head {
            HeadMode::PerFrame => raw,
            HeadMode::Shared => {
                let data = raw.data().repeat(self.cfg.in_frames);
                Tensor::from_vec(self.cfg.in_frames, raw.dims(), data)?
            }
        };
        Ok((
            out,
            Trace {
                input: x.clone(),
                blocks: caches,
                down_in,
                upconv_in,
                head_in: s,
                head_h,
                head_a,
                films,
                film_cache,
            },
        ))
    }

    /// Exact gradients of `<dout, net(x)>` with respect to every parameter.
    pub fn backward_trace(&self, trace: &Trace<F>, dout: &Stack<F>) -> Result<ParamSet<F>> {
        let expected = [self.cfg.in_frames, trace.input.dims()[0], trace.input.dims()[1], trace.input.dims()[2]];
        if [dout.channels(), dout.dims()[0], dout.dims()[1], dout.dims()[2]] != expected {
            return Err(Error::Shape("loss gradient does not match the network output".into()));
        }
        let a = &self.arch;
        let ps = &self.params;
        let mut grads = ps.zeros_like();
        let dhead = match self.cfg.head {
            HeadMode::PerFrame => dout.clone(),
            HeadMode::Shared => {
                let mut acc = Tensor::zeros(1, dout.dims());
                for c in 0..dout.channels() {
                    acc.channel_mut(0).iter_mut().zip(dout.channel(c)).for_each(|(a, &g)| *a += g);
                }
                acc
            }
        };
        let da = a.head2.backward(ps, &trace.head_a, &dhead, &mut grads);
        let dh = silu_backward(&trace.head_h, &da);
        let mut ds = a.head1.backward(ps, &trace.head_in, &dh, &mut grads);

        let mut dfilm: Vec<Option<FilmParams<F>>> = vec![None; a.blocks.len()];
        let mut back = |ds: Tensor<F>, id: usize, grads: &mut ParamSet<F>| {
            let cache = trace.blocks[id].as_ref().expect("every block ran forward");
            let (dx, df) = a.blocks[id].backward(ps, cache, &trace.films[id], &ds, grads);
            dfilm[id] = Some(df);
            dx
        };

        let mut dskips: Vec<Tensor<F>> = Vec::new();
        for (step, (ids, upconv)) in a.dec.iter().zip(&a.upconvs).enumerate().rev() {
            for &id in ids.iter().rev() {
                ds = back(ds, id, &mut grads);
            }
            let w = upconv.cout;
            let (du, dskip) = ds.split_channels(w);
            dskips.push(dskip);
            let dup = upconv.backward(ps, &trace.upconv_in[step], &du, &mut grads);
            ds = upsample2_backward(&dup);
        }
        // dskips now holds encoder levels in ascending order.
        for &id in a.bottleneck.iter().rev() {
            ds = back(ds, id, &mut grads);
        }
        for (l, (ids, down)) in a.enc.iter().zip(&a.downs).enumerate().rev() {
            let mut d = down.backward(ps, &trace.down_in[l], &ds, &mut grads);
            d.data_mut().iter_mut().zip(dskips[l].data()).for_each(|(x, &y)| *x += y);
            ds = d;
            for &id in ids.iter().rev() {
                ds = back(ds, id, &mut grads);
            }
        }
        a.stem.backward(ps, &trace.input, &ds, &mut grads);
        let dfilm: Vec<FilmParams<F>> = dfilm.into_iter().map(|d| d.expect("every block ran backward")).collect();
        a.film.backward(ps, &trace.film_cache, &dfilm, &mut grads)?;
        Ok(grads)
    }

    /// Forward pass that keeps its activations for a following [`backward`](Self::backward).
    pub fn forward_retain(&mut self, state: &FlowState<F>, code: &[F]) -> Result<Stack<F>> {
        let (out, trace) = self.forward_trace(&state.x_tau, code)?;
        self.retained = Some(trace);
        Ok(out)
    }

    /// Consumes the retained activations of the last [`forward_retain`](Self::forward_retain).
    pub fn backward(&mut self, loss_grad: &Stack<F>) -> Result<ParamSet<F>> {
        let trace = self.retained.take().ok_or(Error::NoActivations)?;
        self.backward_trace(&trace, loss_grad)
    }

    /// Replaces all parameters from a flat vector in declaration order.
    pub fn load_flat(&mut self, flat: &[F]) -> Result<()> {
        if self.params.load_flat(flat) {
            Ok(())
        } else {
            Err(Error::Length {
                expected: self.params.count() as u64,
                found: flat.len() as u64,
            })
        }
    }
}
