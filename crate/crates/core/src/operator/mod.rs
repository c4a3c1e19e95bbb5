//! Conditioned dilated-convolution residual network used as the neural
//! operator, with hand-written reverse-mode gradients.
//!
//! Architecture, for an input of `in_channels x N`:
//!
//! ```text
//! cond  = gelu(W2 gelu(W1 [emb(dt) emb(dx) emb(100 nu) emb(k)] + b1) + b2)
//! h     = lift(x)                                   (pointwise conv)
//! block:  z = h
//!         for each dilation d in the cycle:
//!             a = gain * norm(z) + bias              (one-group norm)
//!             a = a * (1 + gamma) + beta             (first layer only; gamma,beta from cond)
//!             z = conv_d(gelu(a))                    (circular padding)
//!         h = h + z
//! out   = proj(gelu(gain * norm(h) + bias))         (pointwise conv to 1 channel)
//! ```
//!
//! Every convolution is circular and the normalization spans the whole
//! periodic domain, so the map commutes with circular shifts of the input.

mod layers;
pub mod optim;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use layers::{
    affine_forward, conv_backward, conv_forward, gelu, gelu_grad, linear_backward, linear_forward,
    norm_affine_backward, norm_forward, ConvShape,
};

pub use optim::{cosine_lr, AdamW, ParameterSet};

/// Conditioning scalars are multiplied by this before embedding.
pub const CONDITION_SCALE: f64 = 100.0;

/// Number of embedded conditioning scalars (dt, dx, nu, k).
const N_CONDITIONS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorConfig {
    pub hidden_channels: usize,
    pub n_blocks: usize,
    pub kernel_size: usize,
    pub dilation_cycle: Vec<usize>,
    /// Noised estimate plus previous states.
    pub in_channels: usize,
    /// Width of each sinusoidal embedding and of the conditioning MLP.
    pub cond_dim: usize,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 32,
            n_blocks: 4,
            kernel_size: 3,
            dilation_cycle: vec![1, 2, 4, 8, 4, 2, 1],
            in_channels: 2,
            cond_dim: 32,
        }
    }
}

impl OperatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels == 0 || self.n_blocks == 0 || self.in_channels == 0 {
            return Err(Error::Parameter(
                "hidden_channels, n_blocks and in_channels must be positive".into(),
            ));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.dilation_cycle.is_empty() || self.dilation_cycle.contains(&0) {
            return Err(Error::Parameter(
                "dilation_cycle must be non-empty with positive entries".into(),
            ));
        }
        if self.cond_dim == 0 || self.cond_dim % 2 == 1 {
            return Err(Error::Parameter(format!(
                "cond_dim must be even and positive, got {}",
                self.cond_dim
            )));
        }
        Ok(())
    }
}

/// Scalars the operator is conditioned on for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditioningSet {
    /// Prediction step in seconds (stride times the recorded step).
    pub dt: f64,
    /// Grid spacing `L / N`.
    pub dx: f64,
    pub nu: f64,
    /// Refinement step index.
    pub k: usize,
}

impl ConditioningSet {
    pub fn new(dt: f64, dx: f64, nu: f64) -> Self {
        Self { dt, dx, nu, k: 0 }
    }

    pub fn at_step(self, k: usize) -> Self {
        Self { k, ..self }
    }
}

/// Sinusoidal embedding: `dim/2` sines followed by `dim/2` cosines at
/// frequencies `10^(-4 i / (dim/2 - 1))`.
pub fn sinusoidal_embed(value: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 == 1 {
        return Err(Error::Parameter(format!(
            "embedding dimension must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| {
            if half == 1 {
                1.0
            } else {
                10_000f64.powf(-(i as f64) / (half - 1) as f64)
            }
        })
        .collect();
    let mut out = Vec::with_capacity(dim);
    out.extend(freqs.iter().map(|f| (value * f).sin()));
    out.extend(freqs.iter().map(|f| (value * f).cos()));
    Ok(out)
}

fn conditioning_features(cond: &ConditioningSet, dim: usize) -> Vec<f64> {
    [
        cond.dt * CONDITION_SCALE,
        cond.dx * CONDITION_SCALE,
        cond.nu * CONDITION_SCALE,
        cond.k as f64,
    ]
    .iter()
    .flat_map(|&v| sinusoidal_embed(v, dim).expect("cond_dim validated"))
    .collect()
}

#[derive(Debug, Clone)]
struct LayerLayout {
    norm_gain: Range<usize>,
    norm_bias: Range<usize>,
    conv_w: Range<usize>,
    conv_b: Range<usize>,
    dilation: usize,
}

#[derive(Debug, Clone)]
struct BlockLayout {
    ss_w: Range<usize>,
    ss_b: Range<usize>,
    layers: Vec<LayerLayout>,
}

#[derive(Debug, Clone)]
struct Layout {
    embed_w1: Range<usize>,
    embed_b1: Range<usize>,
    embed_w2: Range<usize>,
    embed_b2: Range<usize>,
    lift_w: Range<usize>,
    lift_b: Range<usize>,
    blocks: Vec<BlockLayout>,
    out_gain: Range<usize>,
    out_bias: Range<usize>,
    out_w: Range<usize>,
    out_b: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(config: &OperatorConfig) -> Self {
        let mut next = 0;
        let mut take = |len: usize| {
            let r = next..next + len;
            next += len;
            r
        };
        let c = config.hidden_channels;
        let d = config.cond_dim;
        let k = config.kernel_size;
        let embed_w1 = take(d * N_CONDITIONS * d);
        let embed_b1 = take(d);
        let embed_w2 = take(d * d);
        let embed_b2 = take(d);
        let lift_w = take(c * config.in_channels);
        let lift_b = take(c);
        let blocks = (0..config.n_blocks)
            .map(|_| BlockLayout {
                ss_w: take(2 * c * d),
                ss_b: take(2 * c),
                layers: config
                    .dilation_cycle
                    .iter()
                    .map(|&dilation| LayerLayout {
                        norm_gain: take(c),
                        norm_bias: take(c),
                        conv_w: take(c * c * k),
                        conv_b: take(c),
                        dilation,
                    })
                    .collect(),
            })
            .collect();
        let out_gain = take(c);
        let out_bias = take(c);
        let out_w = take(c);
        let out_b = take(1);
        Self {
            embed_w1,
            embed_b1,
            embed_w2,
            embed_b2,
            lift_w,
            lift_b,
            blocks,
            out_gain,
            out_bias,
            out_w,
            out_b,
            total: next,
        }
    }
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    xhat: Vec<T>,
    inv_std: T,
    pre: Vec<T>,
    act: Vec<T>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    layers: Vec<LayerCache<T>>,
}

/// Activations retained by [`Operator::forward_with_cache`] for the
/// backward pass of one sample.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    n: usize,
    input: Vec<T>,
    emb: Vec<T>,
    c1_pre: Vec<T>,
    c1: Vec<T>,
    c2_pre: Vec<T>,
    c2: Vec<T>,
    scale_shift: Vec<Vec<T>>,
    blocks: Vec<BlockCache<T>>,
    out_xhat: Vec<T>,
    out_inv_std: T,
    out_pre: Vec<T>,
    out_act: Vec<T>,
}

/// Network structure; weights live in a separate flat parameter vector.
#[derive(Debug, Clone)]
pub struct Operator {
    config: OperatorConfig,
    layout: Layout,
}

impl Operator {
    pub fn new(config: OperatorConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        Ok(Self { config, layout })
    }

    pub fn config(&self) -> &OperatorConfig {
        &self.config
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    /// Scaled-normal initialization; normalization gains start at one.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); self.n_params()];
        let mut fill = |params: &mut [T], range: &Range<usize>, std: f64| {
            for p in &mut params[range.clone()] {
                *p = T::of(std) * T::standard_normal(&mut rng);
            }
        };
        let l = &self.layout;
        let c = self.config.hidden_channels as f64;
        let d = self.config.cond_dim as f64;
        let k = self.config.kernel_size as f64;
        fill(&mut params, &l.embed_w1, (1.0 / (N_CONDITIONS as f64 * d)).sqrt());
        fill(&mut params, &l.embed_w2, (1.0 / d).sqrt());
        fill(&mut params, &l.lift_w, (1.0 / self.config.in_channels as f64).sqrt());
        for block in &l.blocks {
            fill(&mut params, &block.ss_w, 0.1 / d.sqrt());
            let last = block.layers.len() - 1;
            for (i, layer) in block.layers.iter().enumerate() {
                params[layer.norm_gain.clone()].iter_mut().for_each(|g| *g = T::one());
                let gain = if i == last { 0.2 } else { 1.0 };
                fill(&mut params, &layer.conv_w, gain * (1.0 / (c * k)).sqrt());
            }
        }
        params[l.out_gain.clone()].iter_mut().for_each(|g| *g = T::one());
        fill(&mut params, &l.out_w, (1.0 / c).sqrt());
        params
    }

    fn check_shapes<T>(&self, params: &[T], input: &[T], n: usize) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                params.len()
            )));
        }
        if n == 0 || input.len() != self.config.in_channels * n {
            return Err(Error::Shape(format!(
                "input of {} values is not {} channels x {n} points",
                input.len(),
                self.config.in_channels
            )));
        }
        Ok(())
    }

    /// Output (`N` values) for one sample of `in_channels x N` values.
    pub fn forward<T: Scalar>(&self, params: &[T], input: &[T], n: usize, cond: &ConditioningSet) -> Result<Vec<T>> {
        self.forward_with_cache(params, input, n, cond).map(|(out, _)| out)
    }

    /// Applies [`Self::forward`] to `B` samples stored back to back.
    pub fn forward_batch<T: Scalar>(
        &self,
        params: &[T],
        inputs: &[T],
        n: usize,
        conds: &[ConditioningSet],
    ) -> Result<Vec<T>> {
        let per_sample = self.config.in_channels * n;
        if inputs.len() != per_sample * conds.len() {
            return Err(Error::Shape(format!(
                "{} input values for {} samples of {per_sample}",
                inputs.len(),
                conds.len()
            )));
        }
        let mut out = Vec::with_capacity(n * conds.len());
        for (sample, cond) in inputs.chunks(per_sample).zip(conds) {
            out.extend(self.forward(params, sample, n, cond)?);
        }
        Ok(out)
    }

    pub fn forward_with_cache<T: Scalar>(
        &self,
        params: &[T],
        input: &[T],
        n: usize,
        cond: &ConditioningSet,
    ) -> Result<(Vec<T>, ForwardCache<T>)> {
        self.check_shapes(params, input, n)?;
        let l = &self.layout;
        let c = self.config.hidden_channels;
        let d = self.config.cond_dim;
        let p = |r: &Range<usize>| &params[r.clone()];

        let emb: Vec<T> = conditioning_features(cond, d).into_iter().map(T::of).collect();
        let mut c1_pre = vec![T::zero(); d];
        linear_forward(p(&l.embed_w1), p(&l.embed_b1), &emb, &mut c1_pre);
        let c1: Vec<T> = c1_pre.iter().map(|&v| gelu(v)).collect();
        let mut c2_pre = vec![T::zero(); d];
        linear_forward(p(&l.embed_w2), p(&l.embed_b2), &c1, &mut c2_pre);
        let c2: Vec<T> = c2_pre.iter().map(|&v| gelu(v)).collect();

        let mut h = vec![T::zero(); c * n];
        conv_forward(
            ConvShape {
                c_in: self.config.in_channels,
                c_out: c,
                kernel: 1,
                dilation: 1,
                n,
            },
            input,
            p(&l.lift_w),
            p(&l.lift_b),
            &mut h,
        );

        let mut scale_shift = Vec::with_capacity(l.blocks.len());
        let mut blocks = Vec::with_capacity(l.blocks.len());
        let mut z = vec![T::zero(); c * n];
        for block in &l.blocks {
            let mut ss = vec![T::zero(); 2 * c];
            linear_forward(p(&block.ss_w), p(&block.ss_b), &c2, &mut ss);
            z.copy_from_slice(&h);
            let mut layer_caches = Vec::with_capacity(block.layers.len());
            for (i, layer) in block.layers.iter().enumerate() {
                let mut xhat = vec![T::zero(); c * n];
                let inv_std = norm_forward(&z, &mut xhat);
                let mut pre = vec![T::zero(); c * n];
                affine_forward(&xhat, p(&layer.norm_gain), p(&layer.norm_bias), n, &mut pre);
                if i == 0 {
                    for (ch, row) in pre.chunks_mut(n).enumerate() {
                        let scale = T::one() + ss[ch];
                        let shift = ss[c + ch];
                        row.iter_mut().for_each(|v| *v = *v * scale + shift);
                    }
                }
                let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
                conv_forward(
                    ConvShape {
                        c_in: c,
                        c_out: c,
                        kernel: self.config.kernel_size,
                        dilation: layer.dilation,
                        n,
                    },
                    &act,
                    p(&layer.conv_w),
                    p(&layer.conv_b),
                    &mut z,
                );
                layer_caches.push(LayerCache {
                    xhat,
                    inv_std,
                    pre,
                    act,
                });
            }
            for (hv, zv) in h.iter_mut().zip(&z) {
                *hv += *zv;
            }
            scale_shift.push(ss);
            blocks.push(BlockCache { layers: layer_caches });
        }

        let mut out_xhat = vec![T::zero(); c * n];
        let out_inv_std = norm_forward(&h, &mut out_xhat);
        let mut out_pre = vec![T::zero(); c * n];
        affine_forward(&out_xhat, p(&l.out_gain), p(&l.out_bias), n, &mut out_pre);
        let out_act: Vec<T> = out_pre.iter().map(|&v| gelu(v)).collect();
        let mut out = vec![T::zero(); n];
        conv_forward(
            ConvShape {
                c_in: c,
                c_out: 1,
                kernel: 1,
                dilation: 1,
                n,
            },
            &out_act,
            p(&l.out_w),
            p(&l.out_b),
            &mut out,
        );

        let cache = ForwardCache {
            n,
            input: input.to_vec(),
            emb,
            c1_pre,
            c1,
            c2_pre,
            c2,
            scale_shift,
            blocks,
            out_xhat,
            out_inv_std,
            out_pre,
            out_act,
        };
        Ok((out, cache))
    }

    /// Accumulates `d(output . out_grad) / d params` into `grads`.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &ForwardCache<T>,
        out_grad: &[T],
        grads: &mut [T],
    ) -> Result<()> {
        let n = cache.n;
        if out_grad.len() != n || grads.len() != self.n_params() || params.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "backward expects {n} output gradients and {} parameters",
                self.n_params()
            )));
        }
        let l = &self.layout;
        let c = self.config.hidden_channels;
        let d = self.config.cond_dim;
        let p = |r: &Range<usize>| &params[r.clone()];

        // Output projection and final norm.
        let mut d_act = vec![T::zero(); c * n];
        {
            let (w_grad, b_grad) = split_two(grads, &l.out_w, &l.out_b);
            conv_backward(
                ConvShape {
                    c_in: c,
                    c_out: 1,
                    kernel: 1,
                    dilation: 1,
                    n,
                },
                &cache.out_act,
                p(&l.out_w),
                out_grad,
                Some(&mut d_act),
                w_grad,
                b_grad,
            );
        }
        for (g, &x) in d_act.iter_mut().zip(&cache.out_pre) {
            *g *= gelu_grad(x);
        }
        let mut dh = vec![T::zero(); c * n];
        {
            let (gain_grad, bias_grad) = split_two(grads, &l.out_gain, &l.out_bias);
            norm_affine_backward(
                &cache.out_xhat,
                cache.out_inv_std,
                p(&l.out_gain),
                n,
                &d_act,
                &mut dh,
                gain_grad,
                bias_grad,
            );
        }

        let mut dc2 = vec![T::zero(); d];
        let mut dz = vec![T::zero(); c * n];
        let mut d_pre = vec![T::zero(); c * n];
        for (b, block) in l.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[b];
            let ss = &cache.scale_shift[b];
            let mut dss = vec![T::zero(); 2 * c];
            dz.copy_from_slice(&dh);
            for (i, layer) in block.layers.iter().enumerate().rev() {
                let lc = &bc.layers[i];
                d_pre.iter_mut().for_each(|v| *v = T::zero());
                {
                    let (w_grad, b_grad) = split_two(grads, &layer.conv_w, &layer.conv_b);
                    conv_backward(
                        ConvShape {
                            c_in: c,
                            c_out: c,
                            kernel: self.config.kernel_size,
                            dilation: layer.dilation,
                            n,
                        },
                        &lc.act,
                        p(&layer.conv_w),
                        &dz,
                        Some(&mut d_pre),
                        w_grad,
                        b_grad,
                    );
                }
                for (g, &x) in d_pre.iter_mut().zip(&lc.pre) {
                    *g *= gelu_grad(x);
                }
                if i == 0 {
                    let gain = p(&layer.norm_gain);
                    let bias = p(&layer.norm_bias);
                    for ch in 0..c {
                        let scale = T::one() + ss[ch];
                        let mut sum_g = T::zero();
                        let mut sum_ga = T::zero();
                        let rows = ch * n..(ch + 1) * n;
                        for (g, &x) in d_pre[rows.clone()].iter_mut().zip(&lc.xhat[rows]) {
                            let affine = gain[ch] * x + bias[ch];
                            sum_g += *g;
                            sum_ga += *g * affine;
                            *g *= scale;
                        }
                        dss[ch] += sum_ga;
                        dss[c + ch] += sum_g;
                    }
                }
                dz.iter_mut().for_each(|v| *v = T::zero());
                let (gain_grad, bias_grad) = split_two(grads, &layer.norm_gain, &layer.norm_bias);
                norm_affine_backward(
                    &lc.xhat,
                    lc.inv_std,
                    p(&layer.norm_gain),
                    n,
                    &d_pre,
                    &mut dz,
                    gain_grad,
                    bias_grad,
                );
            }
            for (g, &v) in dh.iter_mut().zip(&dz) {
                *g += v;
            }
            let (w_grad, b_grad) = split_two(grads, &block.ss_w, &block.ss_b);
            linear_backward(p(&block.ss_w), &cache.c2, &dss, w_grad, b_grad, Some(&mut dc2));
        }

        {
            let (w_grad, b_grad) = split_two(grads, &l.lift_w, &l.lift_b);
            conv_backward(
                ConvShape {
                    c_in: self.config.in_channels,
                    c_out: c,
                    kernel: 1,
                    dilation: 1,
                    n,
                },
                &cache.input,
                p(&l.lift_w),
                &dh,
                None,
                w_grad,
                b_grad,
            );
        }

        for (g, &x) in dc2.iter_mut().zip(&cache.c2_pre) {
            *g *= gelu_grad(x);
        }
        let mut dc1 = vec![T::zero(); d];
        {
            let (w_grad, b_grad) = split_two(grads, &l.embed_w2, &l.embed_b2);
            linear_backward(p(&l.embed_w2), &cache.c1, &dc2, w_grad, b_grad, Some(&mut dc1));
        }
        for (g, &x) in dc1.iter_mut().zip(&cache.c1_pre) {
            *g *= gelu_grad(x);
        }
        let (w_grad, b_grad) = split_two(grads, &l.embed_w1, &l.embed_b1);
        linear_backward(p(&l.embed_w1), &cache.emb, &dc1, w_grad, b_grad, None);
        Ok(())
    }

    /// Gradient of `output . out_grad` with respect to every parameter.
    pub fn gradient<T: Scalar>(
        &self,
        params: &[T],
        input: &[T],
        n: usize,
        cond: &ConditioningSet,
        out_grad: &[T],
    ) -> Result<Vec<T>> {
        let (_, cache) = self.forward_with_cache(params, input, n, cond)?;
        let mut grads = vec![T::zero(); self.n_params()];
        self.backward(params, &cache, out_grad, &mut grads)?;
        Ok(grads)
    }

    /// Index range of the final output bias.
    pub fn output_bias_index(&self) -> usize {
        self.layout.out_b.start
    }
}

/// Two disjoint mutable sub-slices; `a` must precede `b`.
fn split_two<'a, T>(buf: &'a mut [T], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    debug_assert!(a.end <= b.start);
    let (head, tail) = buf.split_at_mut(b.start);
    (&mut head[a.clone()], &mut tail[..b.len()])
}
