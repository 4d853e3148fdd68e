//! A small convolutional epsilon-predictor with one cross-attention block.
//!
//! Layout of one forward pass on a `C x H x W` input:
//!
//! ```text
//! h0 = conv3x3(x)                                   C -> F
//! h1 = h0 + W_t * sinusoid(t[p]) + b_t              per-pixel timestep injection
//! h2 = h1 + conv3x3(silu(conv3x3(silu(h1))))        residual block 1
//! h3 = h2 + conv3x3(silu(conv3x3(silu(h2))))        residual block 2
//! q  = W_q * avgpool(h3)                            pixel queries at H/k x W/k
//! A  = softmax_tokens(q . (W_k e_o) / sqrt(d_key))  captured attention map
//! h4 = h3 + upsample(W_o * sum_o A[o] (W_v e_o) + b_o)
//! eps = W_out * silu(h4) + b_out                    F -> C
//! ```
//!
//! Convolutions use periodic padding. Timesteps enter only through the
//! per-pixel addition in `h1`; the attention block never sees them.
//! Gradients are derived by hand for this fixed architecture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Denoiser, Prediction};
use crate::attention::{AttentionLayer, CrossAttentionMaps};
use crate::error::{shape_err, Error, Result};
use crate::latent::LatentState;
use crate::schedule::TimestepField;

/// Token id used for the unconditional pass.
pub const NULL_TOKEN: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub channels: usize,
    pub features: usize,
    pub temb_dim: usize,
    pub key_dim: usize,
    pub vocab_size: usize,
    /// Side of the average-pooling window in front of the attention block.
    pub attn_pool: usize,
    /// Timestep horizon the embedding frequencies are laid out for.
    pub horizon: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            features: 32,
            temb_dim: 32,
            key_dim: 32,
            vocab_size: crate::data::VOCABULARY.len(),
            attn_pool: 4,
            horizon: 50.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.features == 0
            || self.key_dim == 0
            || self.vocab_size == 0
            || self.attn_pool == 0
        {
            return Err(Error::InvalidArgument(format!(
                "degenerate network config {self:?}"
            )));
        }
        if self.temb_dim < 2 || !self.temb_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "timestep embedding dimension must be even and >= 2, got {}",
                self.temb_dim
            )));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidArgument("network horizon must be positive".into()));
        }
        Ok(())
    }

    /// Parameter block names and shapes in storage order.
    pub fn block_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (c, f, e, k, v) = (
            self.channels,
            self.features,
            self.temb_dim,
            self.key_dim,
            self.vocab_size,
        );
        vec![
            ("in_w", vec![f, c, 3, 3]),
            ("in_b", vec![f]),
            ("time_w", vec![f, e]),
            ("time_b", vec![f]),
            ("res1_a_w", vec![f, f, 3, 3]),
            ("res1_a_b", vec![f]),
            ("res1_b_w", vec![f, f, 3, 3]),
            ("res1_b_b", vec![f]),
            ("res2_a_w", vec![f, f, 3, 3]),
            ("res2_a_b", vec![f]),
            ("res2_b_w", vec![f, f, 3, 3]),
            ("res2_b_b", vec![f]),
            ("token_emb", vec![v, f]),
            ("query_w", vec![k, f]),
            ("key_w", vec![k, f]),
            ("value_w", vec![f, f]),
            ("attn_out_w", vec![f, f]),
            ("attn_out_b", vec![f]),
            ("out_w", vec![c, f]),
            ("out_b", vec![c]),
        ]
    }
}

/// Block indices into [`NetParams::blocks`].
pub const PARAM_BLOCKS: usize = 20;
const IN_W: usize = 0;
const IN_B: usize = 1;
const TIME_W: usize = 2;
const TIME_B: usize = 3;
const RES: [[usize; 4]; 2] = [[4, 5, 6, 7], [8, 9, 10, 11]];
const TOKEN_EMB: usize = 12;
const QUERY_W: usize = 13;
const KEY_W: usize = 14;
const VALUE_W: usize = 15;
const ATTN_OUT_W: usize = 16;
const ATTN_OUT_B: usize = 17;
const OUT_W: usize = 18;
const OUT_B: usize = 19;

/// Flat parameter (or gradient) storage, one vector per block.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub blocks: Vec<Vec<f64>>,
}

impl NetParams {
    pub fn zeros(config: &NetConfig) -> Self {
        Self {
            blocks: config
                .block_shapes()
                .iter()
                .map(|(_, s)| vec![0.0; s.iter().product()])
                .collect(),
        }
    }

    pub fn zeros_like(other: &NetParams) -> Self {
        Self {
            blocks: other.blocks.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn norm(&self) -> f64 {
        self.blocks.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.blocks.iter_mut().flatten().for_each(|v| *v *= factor);
    }

    pub fn add_assign(&mut self, other: &NetParams) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// `out[x] += w * src[(x + dx) mod n]` for `dx` in `{-1, 0, 1}`.
#[inline]
fn axpy_shift(out: &mut [f64], src: &[f64], w: f64, dx: isize) {
    let n = out.len();
    match dx {
        0 => out.iter_mut().zip(src).for_each(|(o, s)| *o += w * s),
        -1 => {
            out[0] += w * src[n - 1];
            out[1..]
                .iter_mut()
                .zip(&src[..n - 1])
                .for_each(|(o, s)| *o += w * s);
        }
        _ => {
            out[..n - 1]
                .iter_mut()
                .zip(&src[1..])
                .for_each(|(o, s)| *o += w * s);
            out[n - 1] += w * src[0];
        }
    }
}

/// `sum_x a[x] * src[(x + dx) mod n]`.
#[inline]
fn dot_shift(a: &[f64], src: &[f64], dx: isize) -> f64 {
    let n = a.len();
    match dx {
        0 => a.iter().zip(src).map(|(x, y)| x * y).sum(),
        -1 => a[0] * src[n - 1] + a[1..].iter().zip(&src[..n - 1]).map(|(x, y)| x * y).sum::<f64>(),
        _ => a[..n - 1].iter().zip(&src[1..]).map(|(x, y)| x * y).sum::<f64>() + a[n - 1] * src[0],
    }
}

#[derive(Clone, Copy)]
struct Grid {
    h: usize,
    w: usize,
}

impl Grid {
    fn plane(self) -> usize {
        self.h * self.w
    }

    fn src_row(self, y: usize, ky: usize) -> usize {
        (y + self.h + ky - 1) % self.h
    }
}

fn conv3x3_forward(input: &[f64], cin: usize, g: Grid, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let cout = bias.len();
    let plane = g.plane();
    let mut out = vec![0.0; cout * plane];
    for co in 0..cout {
        let out_c = &mut out[co * plane..(co + 1) * plane];
        out_c.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..cin {
            let in_c = &input[ci * plane..(ci + 1) * plane];
            let wk = &weight[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
            for y in 0..g.h {
                let out_row = &mut out_c[y * g.w..(y + 1) * g.w];
                for ky in 0..3 {
                    let ys = g.src_row(y, ky);
                    let src = &in_c[ys * g.w..(ys + 1) * g.w];
                    for kx in 0..3 {
                        axpy_shift(out_row, src, wk[ky * 3 + kx], kx as isize - 1);
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients of a periodic 3x3 convolution.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    g: Grid,
    weight: &[f64],
    d_out: &[f64],
    d_input: Option<&mut [f64]>,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
) {
    let cout = d_bias.len();
    let plane = g.plane();
    for co in 0..cout {
        let d_c = &d_out[co * plane..(co + 1) * plane];
        d_bias[co] += d_c.iter().sum::<f64>();
        for ci in 0..cin {
            let in_c = &input[ci * plane..(ci + 1) * plane];
            let base = (co * cin + ci) * 9;
            for y in 0..g.h {
                let d_row = &d_c[y * g.w..(y + 1) * g.w];
                for ky in 0..3 {
                    let ys = g.src_row(y, ky);
                    let src = &in_c[ys * g.w..(ys + 1) * g.w];
                    for kx in 0..3 {
                        d_weight[base + ky * 3 + kx] += dot_shift(d_row, src, kx as isize - 1);
                    }
                }
            }
        }
    }
    if let Some(d_input) = d_input {
        for co in 0..cout {
            let d_c = &d_out[co * plane..(co + 1) * plane];
            for ci in 0..cin {
                let wk = &weight[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
                let din_c = &mut d_input[ci * plane..(ci + 1) * plane];
                for y in 0..g.h {
                    let d_row = &d_c[y * g.w..(y + 1) * g.w];
                    for ky in 0..3 {
                        let ys = g.src_row(y, ky);
                        let din_row = &mut din_c[ys * g.w..(ys + 1) * g.w];
                        for kx in 0..3 {
                            axpy_shift(din_row, d_row, wk[ky * 3 + kx], 1 - kx as isize);
                        }
                    }
                }
            }
        }
    }
}

/// `out[r, p] = sum_c m[r, c] * x[c, p]` for a row-major `rows x cols` matrix.
fn matmul_planes(m: &[f64], rows: usize, cols: usize, x: &[f64], plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * plane];
    for r in 0..rows {
        let out_r = &mut out[r * plane..(r + 1) * plane];
        for c in 0..cols {
            let w = m[r * cols + c];
            out_r
                .iter_mut()
                .zip(&x[c * plane..(c + 1) * plane])
                .for_each(|(o, v)| *o += w * v);
        }
    }
    out
}

struct ResCache {
    input: Vec<f64>,
    act_in: Vec<f64>,
    pre: Vec<f64>,
    act_mid: Vec<f64>,
}

struct ForwardCache {
    grid: Grid,
    pooled_grid: Grid,
    x: Vec<f64>,
    emb: Vec<f64>,
    res: Vec<ResCache>,
    h3: Vec<f64>,
    pooled: Vec<f64>,
    queries: Vec<f64>,
    tokens: Vec<usize>,
    keys: Vec<f64>,
    values: Vec<f64>,
    attn: Vec<f64>,
    context: Vec<f64>,
    h4: Vec<f64>,
    act_out: Vec<f64>,
}

/// Tiny conditional denoiser; see the module docs for the architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyCondDenoiser {
    pub config: NetConfig,
    pub params: NetParams,
}

impl TinyCondDenoiser {
    /// Random initialization: fan-in scaled normals, zero biases, and a small
    /// scale on the last layer of each residual branch.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = NetParams::zeros(&config);
        for (k, (name, shape)) in config.block_shapes().iter().enumerate() {
            if name.ends_with("_b") {
                continue;
            }
            let fan_in: usize = match *name {
                "token_emb" => 1,
                _ => shape[1..].iter().product(),
            };
            let mut std = 1.0 / (fan_in as f64).sqrt();
            if matches!(*name, "res1_b_w" | "res2_b_w" | "attn_out_w") {
                std *= 0.3;
            }
            for v in params.blocks[k].iter_mut() {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: NetConfig, params: NetParams) -> Result<Self> {
        config.validate()?;
        let expected = NetParams::zeros(&config);
        if params.blocks.len() != expected.blocks.len()
            || params
                .blocks
                .iter()
                .zip(&expected.blocks)
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(shape_err("parameter blocks do not match the network config"));
        }
        Ok(Self { config, params })
    }

    fn check_inputs(&self, x: &LatentState, field: &TimestepField, tokens: &[usize]) -> Result<Grid> {
        let cfg = &self.config;
        if x.channels() != cfg.channels {
            return Err(shape_err(format!(
                "network expects {} channels, got {}",
                cfg.channels,
                x.channels()
            )));
        }
        if (field.height(), field.width()) != (x.height(), x.width()) {
            return Err(shape_err("timestep field does not match the latent grid"));
        }
        if !x.height().is_multiple_of(cfg.attn_pool) || !x.width().is_multiple_of(cfg.attn_pool) {
            return Err(shape_err(format!(
                "grid {}x{} not divisible by attention pool {}",
                x.height(),
                x.width(),
                cfg.attn_pool
            )));
        }
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }
        Ok(Grid {
            h: x.height(),
            w: x.width(),
        })
    }

    /// Sinusoidal features of every pixel's timestep, `temb_dim x P`.
    fn embed_timesteps(&self, field: &TimestepField) -> Vec<f64> {
        let half = self.config.temb_dim / 2;
        let horizon = self.config.horizon;
        let rescale = horizon / field.horizon();
        let plane = field.values().len();
        let mut emb = vec![0.0; self.config.temb_dim * plane];
        for k in 0..half {
            let freq = if half == 1 {
                1.0
            } else {
                horizon.powf(-(k as f64) / (half - 1) as f64)
            };
            for (p, &t) in field.values().iter().enumerate() {
                let phase = t * rescale * freq;
                emb[k * plane + p] = phase.sin();
                emb[(half + k) * plane + p] = phase.cos();
            }
        }
        emb
    }

    /// Everything up to and including the second residual block.
    fn trunk(&self, x: &LatentState, field: &TimestepField, g: Grid) -> (Vec<f64>, Vec<ResCache>, Vec<f64>) {
        let cfg = &self.config;
        let b = &self.params.blocks;
        let plane = g.plane();
        let mut h = conv3x3_forward(x.data(), cfg.channels, g, &b[IN_W], &b[IN_B]);
        let emb = self.embed_timesteps(field);
        let temb = matmul_planes(&b[TIME_W], cfg.features, cfg.temb_dim, &emb, plane);
        for f in 0..cfg.features {
            let bias = b[TIME_B][f];
            h[f * plane..(f + 1) * plane]
                .iter_mut()
                .zip(&temb[f * plane..(f + 1) * plane])
                .for_each(|(v, t)| *v += t + bias);
        }
        let mut caches = Vec::with_capacity(2);
        for idx in RES {
            let act_in: Vec<f64> = h.iter().map(|&v| silu(v)).collect();
            let pre = conv3x3_forward(&act_in, cfg.features, g, &b[idx[0]], &b[idx[1]]);
            let act_mid: Vec<f64> = pre.iter().map(|&v| silu(v)).collect();
            let branch = conv3x3_forward(&act_mid, cfg.features, g, &b[idx[2]], &b[idx[3]]);
            let next: Vec<f64> = h.iter().zip(&branch).map(|(a, b)| a + b).collect();
            caches.push(ResCache {
                input: std::mem::replace(&mut h, next),
                act_in,
                pre,
                act_mid,
            });
        }
        (emb, caches, h)
    }

    /// Convolutional trunk features (`F x H x W`) ahead of the attention block.
    pub fn trunk_features(&self, x: &LatentState, field: &TimestepField) -> Result<Vec<f64>> {
        let g = self.check_inputs(x, field, &[NULL_TOKEN])?;
        Ok(self.trunk(x, field, g).2)
    }

    fn forward(
        &self,
        x: &LatentState,
        field: &TimestepField,
        tokens: &[usize],
    ) -> Result<(Vec<f64>, ForwardCache)> {
        let g = self.check_inputs(x, field, tokens)?;
        let cfg = &self.config;
        let b = &self.params.blocks;
        let (f_dim, k_dim, pool) = (cfg.features, cfg.key_dim, cfg.attn_pool);
        let plane = g.plane();
        let (emb, res, h3) = self.trunk(x, field, g);

        let pg = Grid {
            h: g.h / pool,
            w: g.w / pool,
        };
        let qplane = pg.plane();
        let inv_area = 1.0 / (pool * pool) as f64;
        let mut pooled = vec![0.0; f_dim * qplane];
        for f in 0..f_dim {
            for y in 0..g.h {
                for xx in 0..g.w {
                    pooled[f * qplane + (y / pool) * pg.w + xx / pool] +=
                        h3[f * plane + y * g.w + xx] * inv_area;
                }
            }
        }
        let queries = matmul_planes(&b[QUERY_W], k_dim, f_dim, &pooled, qplane);

        let n_tok = tokens.len();
        let mut keys = vec![0.0; n_tok * k_dim];
        let mut values = vec![0.0; n_tok * f_dim];
        for (o, &tok) in tokens.iter().enumerate() {
            let e = &b[TOKEN_EMB][tok * f_dim..(tok + 1) * f_dim];
            for r in 0..k_dim {
                keys[o * k_dim + r] = (0..f_dim).map(|c| b[KEY_W][r * f_dim + c] * e[c]).sum();
            }
            for r in 0..f_dim {
                values[o * f_dim + r] = (0..f_dim).map(|c| b[VALUE_W][r * f_dim + c] * e[c]).sum();
            }
        }

        let scale = 1.0 / (k_dim as f64).sqrt();
        let mut attn = vec![0.0; n_tok * qplane];
        for q in 0..qplane {
            let mut max = f64::NEG_INFINITY;
            for o in 0..n_tok {
                let logit: f64 = (0..k_dim)
                    .map(|r| queries[r * qplane + q] * keys[o * k_dim + r])
                    .sum::<f64>()
                    * scale;
                attn[o * qplane + q] = logit;
                max = max.max(logit);
            }
            let mut total = 0.0;
            for o in 0..n_tok {
                let e = (attn[o * qplane + q] - max).exp();
                attn[o * qplane + q] = e;
                total += e;
            }
            for o in 0..n_tok {
                attn[o * qplane + q] /= total;
            }
        }

        let mut context = vec![0.0; f_dim * qplane];
        for o in 0..n_tok {
            for f in 0..f_dim {
                let v = values[o * f_dim + f];
                for q in 0..qplane {
                    context[f * qplane + q] += attn[o * qplane + q] * v;
                }
            }
        }
        let attn_out = matmul_planes(&b[ATTN_OUT_W], f_dim, f_dim, &context, qplane);

        let mut h4 = h3.clone();
        for f in 0..f_dim {
            let bias = b[ATTN_OUT_B][f];
            for y in 0..g.h {
                for xx in 0..g.w {
                    h4[f * plane + y * g.w + xx] +=
                        attn_out[f * qplane + (y / pool) * pg.w + xx / pool] + bias;
                }
            }
        }
        let act_out: Vec<f64> = h4.iter().map(|&v| silu(v)).collect();
        let mut eps = matmul_planes(&b[OUT_W], cfg.channels, f_dim, &act_out, plane);
        for c in 0..cfg.channels {
            let bias = b[OUT_B][c];
            eps[c * plane..(c + 1) * plane]
                .iter_mut()
                .for_each(|v| *v += bias);
        }

        let cache = ForwardCache {
            grid: g,
            pooled_grid: pg,
            x: x.data().to_vec(),
            emb,
            res,
            h3,
            pooled,
            queries,
            tokens: tokens.to_vec(),
            keys,
            values,
            attn,
            context,
            h4,
            act_out,
        };
        Ok((eps, cache))
    }

    /// Accumulates parameter gradients of a scalar loss given `d loss / d eps`.
    fn backward(&self, cache: &ForwardCache, d_eps: &[f64], grads: &mut NetParams) {
        let cfg = &self.config;
        let b = &self.params.blocks;
        let gb = &mut grads.blocks;
        let (f_dim, k_dim, pool) = (cfg.features, cfg.key_dim, cfg.attn_pool);
        let g = cache.grid;
        let pg = cache.pooled_grid;
        let plane = g.plane();
        let qplane = pg.plane();

        // output projection
        let mut d_h4 = vec![0.0; f_dim * plane];
        for c in 0..cfg.channels {
            let d_c = &d_eps[c * plane..(c + 1) * plane];
            gb[OUT_B][c] += d_c.iter().sum::<f64>();
            for f in 0..f_dim {
                let a_f = &cache.act_out[f * plane..(f + 1) * plane];
                gb[OUT_W][c * f_dim + f] += d_c.iter().zip(a_f).map(|(x, y)| x * y).sum::<f64>();
                let w = b[OUT_W][c * f_dim + f];
                d_h4[f * plane..(f + 1) * plane]
                    .iter_mut()
                    .zip(d_c)
                    .for_each(|(d, v)| *d += w * v);
            }
        }
        for (d, &h) in d_h4.iter_mut().zip(&cache.h4) {
            *d *= silu_grad(h);
        }

        // attention block
        let mut d_attn_out = vec![0.0; f_dim * qplane];
        for f in 0..f_dim {
            for y in 0..g.h {
                for xx in 0..g.w {
                    d_attn_out[f * qplane + (y / pool) * pg.w + xx / pool] += d_h4[f * plane + y * g.w + xx];
                }
            }
        }
        let mut d_context = vec![0.0; f_dim * qplane];
        for f in 0..f_dim {
            let d_f = &d_attn_out[f * qplane..(f + 1) * qplane];
            gb[ATTN_OUT_B][f] += d_f.iter().sum::<f64>();
            for gcol in 0..f_dim {
                let ctx = &cache.context[gcol * qplane..(gcol + 1) * qplane];
                gb[ATTN_OUT_W][f * f_dim + gcol] += d_f.iter().zip(ctx).map(|(x, y)| x * y).sum::<f64>();
                let w = b[ATTN_OUT_W][f * f_dim + gcol];
                d_context[gcol * qplane..(gcol + 1) * qplane]
                    .iter_mut()
                    .zip(d_f)
                    .for_each(|(d, v)| *d += w * v);
            }
        }
        let n_tok = cache.tokens.len();
        let mut d_attn = vec![0.0; n_tok * qplane];
        let mut d_values = vec![0.0; n_tok * f_dim];
        for o in 0..n_tok {
            for f in 0..f_dim {
                let v = cache.values[o * f_dim + f];
                let d_ctx = &d_context[f * qplane..(f + 1) * qplane];
                let a = &cache.attn[o * qplane..(o + 1) * qplane];
                let mut dv = 0.0;
                for q in 0..qplane {
                    d_attn[o * qplane + q] += d_ctx[q] * v;
                    dv += a[q] * d_ctx[q];
                }
                d_values[o * f_dim + f] = dv;
            }
        }
        let scale = 1.0 / (k_dim as f64).sqrt();
        let mut d_queries = vec![0.0; k_dim * qplane];
        let mut d_keys = vec![0.0; n_tok * k_dim];
        for q in 0..qplane {
            let dot: f64 = (0..n_tok)
                .map(|o| cache.attn[o * qplane + q] * d_attn[o * qplane + q])
                .sum();
            for o in 0..n_tok {
                let d_logit = cache.attn[o * qplane + q] * (d_attn[o * qplane + q] - dot) * scale;
                for r in 0..k_dim {
                    d_queries[r * qplane + q] += d_logit * cache.keys[o * k_dim + r];
                    d_keys[o * k_dim + r] += d_logit * cache.queries[r * qplane + q];
                }
            }
        }
        for (o, &tok) in cache.tokens.iter().enumerate() {
            let e = &b[TOKEN_EMB][tok * f_dim..(tok + 1) * f_dim];
            let mut d_e = vec![0.0; f_dim];
            for r in 0..k_dim {
                let dk = d_keys[o * k_dim + r];
                for c in 0..f_dim {
                    gb[KEY_W][r * f_dim + c] += dk * e[c];
                    d_e[c] += b[KEY_W][r * f_dim + c] * dk;
                }
            }
            for r in 0..f_dim {
                let dv = d_values[o * f_dim + r];
                for c in 0..f_dim {
                    gb[VALUE_W][r * f_dim + c] += dv * e[c];
                    d_e[c] += b[VALUE_W][r * f_dim + c] * dv;
                }
            }
            for c in 0..f_dim {
                gb[TOKEN_EMB][tok * f_dim + c] += d_e[c];
            }
        }
        let mut d_pooled = vec![0.0; f_dim * qplane];
        for r in 0..k_dim {
            let dq = &d_queries[r * qplane..(r + 1) * qplane];
            for c in 0..f_dim {
                let pooled = &cache.pooled[c * qplane..(c + 1) * qplane];
                gb[QUERY_W][r * f_dim + c] += dq.iter().zip(pooled).map(|(x, y)| x * y).sum::<f64>();
                let w = b[QUERY_W][r * f_dim + c];
                d_pooled[c * qplane..(c + 1) * qplane]
                    .iter_mut()
                    .zip(dq)
                    .for_each(|(d, v)| *d += w * v);
            }
        }
        let inv_area = 1.0 / (pool * pool) as f64;
        let mut d_h = d_h4;
        for f in 0..f_dim {
            for y in 0..g.h {
                for xx in 0..g.w {
                    d_h[f * plane + y * g.w + xx] +=
                        d_pooled[f * qplane + (y / pool) * pg.w + xx / pool] * inv_area;
                }
            }
        }
        debug_assert_eq!(cache.h3.len(), d_h.len());

        // residual blocks, last first
        for (rc, idx) in cache.res.iter().zip(RES).rev() {
            let mut d_mid = vec![0.0; f_dim * plane];
            {
                let (lo, hi) = gb.split_at_mut(idx[3]);
                conv3x3_backward(
                    &rc.act_mid,
                    f_dim,
                    g,
                    &b[idx[2]],
                    &d_h,
                    Some(&mut d_mid),
                    &mut lo[idx[2]],
                    &mut hi[0],
                );
            }
            for (d, &v) in d_mid.iter_mut().zip(&rc.pre) {
                *d *= silu_grad(v);
            }
            let mut d_act_in = vec![0.0; f_dim * plane];
            {
                let (lo, hi) = gb.split_at_mut(idx[1]);
                conv3x3_backward(
                    &rc.act_in,
                    f_dim,
                    g,
                    &b[idx[0]],
                    &d_mid,
                    Some(&mut d_act_in),
                    &mut lo[idx[0]],
                    &mut hi[0],
                );
            }
            for ((d, &da), &v) in d_h.iter_mut().zip(&d_act_in).zip(&rc.input) {
                *d += da * silu_grad(v);
            }
        }

        // timestep injection and input convolution
        for f in 0..f_dim {
            let d_f = &d_h[f * plane..(f + 1) * plane];
            gb[TIME_B][f] += d_f.iter().sum::<f64>();
            for e in 0..cfg.temb_dim {
                let emb = &cache.emb[e * plane..(e + 1) * plane];
                gb[TIME_W][f * cfg.temb_dim + e] += d_f.iter().zip(emb).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        let (lo, hi) = gb.split_at_mut(IN_B);
        conv3x3_backward(
            &cache.x,
            cfg.channels,
            g,
            &b[IN_W],
            &d_h,
            None,
            &mut lo[IN_W],
            &mut hi[0],
        );
    }

    /// Forward pass returning the noise prediction and the captured attention.
    pub fn predict_with_maps(
        &self,
        x: &LatentState,
        field: &TimestepField,
        tokens: &[usize],
    ) -> Result<(LatentState, AttentionLayer)> {
        let (eps, cache) = self.forward(x, field, tokens)?;
        let layer = AttentionLayer::new_unchecked(
            tokens.len(),
            cache.pooled_grid.h,
            cache.pooled_grid.w,
            cache.attn,
        )?;
        Ok((
            LatentState::from_vec(x.channels(), x.height(), x.width(), eps)?,
            layer,
        ))
    }

    /// Mean squared error against `target`, accumulating its gradient into `grads`.
    pub fn loss_and_grad(
        &self,
        x: &LatentState,
        field: &TimestepField,
        tokens: &[usize],
        target: &LatentState,
        grads: &mut NetParams,
    ) -> Result<f64> {
        x.check_same_shape(target, "regression target")?;
        let (eps, cache) = self.forward(x, field, tokens)?;
        let n = eps.len() as f64;
        let mut loss = 0.0;
        let d_eps: Vec<f64> = eps
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let r = p - t;
                loss += r * r;
                2.0 * r / n
            })
            .collect();
        self.backward(&cache, &d_eps, grads);
        Ok(loss / n)
    }

    /// Mean squared error without gradients.
    pub fn loss(
        &self,
        x: &LatentState,
        field: &TimestepField,
        tokens: &[usize],
        target: &LatentState,
    ) -> Result<f64> {
        x.check_same_shape(target, "regression target")?;
        let (eps, _) = self.forward(x, field, tokens)?;
        Ok(eps
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / eps.len() as f64)
    }
}

impl Denoiser for TinyCondDenoiser {
    fn predict(
        &self,
        x: &LatentState,
        field: &TimestepField,
        tokens: Option<&[usize]>,
    ) -> Result<Prediction> {
        let tokens = tokens.unwrap_or(&[NULL_TOKEN]);
        let (eps, layer) = self.predict_with_maps(x, field, tokens)?;
        Ok(Prediction {
            eps,
            maps: Some(CrossAttentionMaps::new(vec![layer])),
        })
    }
}
