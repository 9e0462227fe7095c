//! Sequence classifier over fingerprint features: 1-D convolution, then a
//! pre-norm Transformer encoder, mask-aware mean pooling and a sigmoid head.
//!
//! Gradients are written out by hand; [`grad_check`] compares them against
//! central finite differences. Only valid (unmasked) positions are ever
//! computed, so padding can never leak into the output.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm_scorer::{PromptId, WordProbSeq};

/// Upper clip for feature values (nats).
pub const MAX_FEATURE_VALUE: f64 = 30.0;

/// Predictions are clamped into `[PRED_EPS, 1 - PRED_EPS]` inside the loss.
pub const PRED_EPS: f64 = 1e-7;

pub const CHECKPOINT_FORMAT: &str = "life-seqmodel";
pub const CHECKPOINT_VERSION: u32 = 1;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("no word probabilities to assemble")]
    EmptyFeature,
    #[error("feature length must be at least 1")]
    ZeroLength,
    #[error("feature has length {got}, model expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("feature has no valid positions")]
    NoValidPositions,
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error("invalid training configuration: {0}")]
    BadTrainConfig(String),
    #[error("{0} predictions but {1} labels")]
    LengthsDiffer(usize, usize),
    #[error("training set needs both labels")]
    SingleClass,
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("checkpoint {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Classifier input: clipped `-ln p` values padded to a fixed length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintFeature {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub article_id: String,
    pub prompt_id: PromptId,
    pub k: usize,
}

impl FingerprintFeature {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Concatenate per-word `-ln p` over the sequences (already in document
/// order), clip to `[0, 30]`, then truncate or zero-pad to `length`.
pub fn assemble_feature(
    article_id: &str,
    seqs: &[WordProbSeq],
    length: usize,
    k: usize,
) -> Result<FingerprintFeature, ModelError> {
    if length == 0 {
        return Err(ModelError::ZeroLength);
    }
    let mut values: Vec<f64> = seqs
        .iter()
        .flat_map(|s| s.neg_log_probs())
        .take(length)
        .map(|v| if v.is_nan() { MAX_FEATURE_VALUE } else { v.clamp(0.0, MAX_FEATURE_VALUE) })
        .collect();
    if values.is_empty() {
        return Err(ModelError::EmptyFeature);
    }
    let valid = values.len();
    values.resize(length, 0.0);
    let mut mask = vec![true; valid];
    mask.resize(length, false);
    Ok(FingerprintFeature {
        values,
        mask,
        article_id: article_id.to_string(),
        prompt_id: seqs.first().map_or(PromptId::T2, |s| s.prompt_id),
        k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_len: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
    /// `false` replaces the convolution with a per-position linear lift plus
    /// a learned position embedding.
    pub use_cnn: bool,
    /// `false` replaces the encoder blocks with the identity.
    pub use_transformer: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_len: 512,
            conv_channels: 32,
            kernel: 5,
            d_model: 32,
            heads: 4,
            ff_dim: 64,
            layers: 1,
            use_cnn: true,
            use_transformer: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::BadConfig(m.to_string()));
        if self.feature_len == 0 {
            return bad("feature_len must be at least 1");
        }
        if self.d_model == 0 || self.heads == 0 || self.ff_dim == 0 {
            return bad("d_model, heads and ff_dim must be at least 1");
        }
        if self.d_model % self.heads != 0 {
            return bad("d_model must be divisible by heads");
        }
        if self.use_cnn && (self.conv_channels == 0 || self.kernel == 0) {
            return bad("conv_channels and kernel must be at least 1");
        }
        if self.use_transformer && self.layers == 0 {
            return bad("layers must be at least 1 when the transformer is enabled");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    /// Whether decoupled weight decay applies (matrices yes, biases and
    /// norm gains no).
    pub decay: bool,
}

#[derive(Debug, Clone, Copy)]
struct BlockOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Offsets {
    conv_w: usize,
    conv_b: usize,
    lift_w: usize,
    lift_b: usize,
    pos: usize,
    blocks: Vec<BlockOffsets>,
    head_w: usize,
    head_b: usize,
}

fn build_layout(cfg: &ModelConfig) -> (Vec<ParamSpec>, Offsets) {
    let mut specs: Vec<ParamSpec> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, decay: bool| -> usize {
        let offset = specs.last().map_or(0, |s| s.offset + s.len);
        let len = shape.iter().product();
        specs.push(ParamSpec {
            name,
            shape,
            offset,
            len,
            decay,
        });
        offset
    };
    let d = cfg.d_model;
    let (mut conv_w, mut conv_b, mut pos) = (usize::MAX, usize::MAX, usize::MAX);
    let cin = if cfg.use_cnn {
        conv_w = push("conv.weight".into(), vec![cfg.conv_channels, cfg.kernel], true);
        conv_b = push("conv.bias".into(), vec![cfg.conv_channels], false);
        cfg.conv_channels
    } else {
        1
    };
    let lift_w = push("lift.weight".into(), vec![d, cin], true);
    let lift_b = push("lift.bias".into(), vec![d], false);
    if !cfg.use_cnn {
        pos = push("pos_embed".into(), vec![cfg.feature_len, d], true);
    }
    let mut blocks = Vec::new();
    if cfg.use_transformer {
        for b in 0..cfg.layers {
            let p = |s: &str| format!("block{b}.{s}");
            blocks.push(BlockOffsets {
                ln1_g: push(p("ln1.gain"), vec![d], false),
                ln1_b: push(p("ln1.bias"), vec![d], false),
                wq: push(p("attn.wq"), vec![d, d], true),
                bq: push(p("attn.bq"), vec![d], false),
                wk: push(p("attn.wk"), vec![d, d], true),
                bk: push(p("attn.bk"), vec![d], false),
                wv: push(p("attn.wv"), vec![d, d], true),
                bv: push(p("attn.bv"), vec![d], false),
                wo: push(p("attn.wo"), vec![d, d], true),
                bo: push(p("attn.bo"), vec![d], false),
                ln2_g: push(p("ln2.gain"), vec![d], false),
                ln2_b: push(p("ln2.bias"), vec![d], false),
                w1: push(p("ffn.w1"), vec![cfg.ff_dim, d], true),
                b1: push(p("ffn.b1"), vec![cfg.ff_dim], false),
                w2: push(p("ffn.w2"), vec![d, cfg.ff_dim], true),
                b2: push(p("ffn.b2"), vec![d], false),
            });
        }
    }
    let head_w = push("head.weight".into(), vec![d], true);
    let head_b = push("head.bias".into(), vec![1], false);
    (
        specs,
        Offsets {
            conv_w,
            conv_b,
            lift_w,
            lift_b,
            pos,
            blocks,
            head_w,
            head_b,
        },
    )
}

/// y[n×dout] = x[n×din] · Wᵀ + b, with W stored [dout][din].
fn linear(x: &[f64], n: usize, din: usize, w: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * dout];
    for t in 0..n {
        let xr = &x[t * din..(t + 1) * din];
        let yr = &mut y[t * dout..(t + 1) * dout];
        for o in 0..dout {
            let wr = &w[o * din..(o + 1) * din];
            yr[o] = b[o] + wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    y
}

/// Accumulates weight and bias gradients; returns dx.
#[allow(clippy::too_many_arguments)]
fn linear_back(
    x: &[f64],
    dy: &[f64],
    n: usize,
    din: usize,
    dout: usize,
    w: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * din];
    for t in 0..n {
        let xr = &x[t * din..(t + 1) * din];
        let dyr = &dy[t * dout..(t + 1) * dout];
        let dxr = &mut dx[t * din..(t + 1) * din];
        for o in 0..dout {
            let g = dyr[o];
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            let wr = &w[o * din..(o + 1) * din];
            let gwr = &mut gw[o * din..(o + 1) * din];
            for i in 0..din {
                gwr[i] += g * xr[i];
                dxr[i] += g * wr[i];
            }
        }
    }
    dx
}

struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &[f64], n: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut inv_std = vec![0.0; n];
    for t in 0..n {
        let xr = &x[t * d..(t + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[t] = is;
        for i in 0..d {
            let h = (xr[i] - mean) * is;
            xhat[t * d + i] = h;
            y[t * d + i] = g[i] * h + b[i];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_back(
    dy: &[f64],
    n: usize,
    d: usize,
    cache: &LnCache,
    g: &[f64],
    gg: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    let df = d as f64;
    for t in 0..n {
        let dyr = &dy[t * d..(t + 1) * d];
        let xh = &cache.xhat[t * d..(t + 1) * d];
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for i in 0..d {
            gg[i] += dyr[i] * xh[i];
            gb[i] += dyr[i];
            let dxh = dyr[i] * g[i];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[i];
        }
        let mean_dxh = sum_dxh / df;
        let mean_dxh_xh = sum_dxh_xh / df;
        for i in 0..d {
            let dxh = dyr[i] * g[i];
            dx[t * d + i] = cache.inv_std[t] * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
        }
    }
    dx
}

struct BlockCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention weights, [head][query][key].
    attn: Vec<f64>,
    o: Vec<f64>,
    ln2: LnCache,
    b: Vec<f64>,
    u: Vec<f64>,
    act: Vec<f64>,
}

struct ForwardCache {
    positions: Vec<usize>,
    conv_z: Vec<f64>,
    h: Vec<f64>,
    blocks: Vec<BlockCache>,
    pool: Vec<f64>,
    logit: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss for one prediction against a 0/1 target, and its derivative with
/// respect to the logit (zero when the clamp is active).
fn bce_with_grad(logit: f64, y: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    let pc = p.clamp(PRED_EPS, 1.0 - PRED_EPS);
    let loss = -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
    let grad = if p == pc { p - y } else { 0.0 };
    (loss, grad)
}

/// Summed binary cross-entropy; predictions clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(preds: &[f64], labels: &[f64]) -> Result<f64, ModelError> {
    if preds.len() != labels.len() {
        return Err(ModelError::LengthsDiffer(preds.len(), labels.len()));
    }
    Ok(preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PRED_EPS, 1.0 - PRED_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum())
}

#[derive(Debug, Clone)]
pub struct SeqModel {
    config: ModelConfig,
    seed: u64,
    params: Vec<f64>,
    specs: Vec<ParamSpec>,
    offsets: Offsets,
}

impl SeqModel {
    /// Randomly initialized model. Matrices are drawn from
    /// `N(0, 1/fan_in)` (the position embedding from `N(0, 0.02²)`), biases
    /// start at zero and norm gains at one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (specs, offsets) = build_layout(&config);
        let total = specs.last().map_or(0, |s| s.offset + s.len);
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &specs {
            let slot = &mut params[s.offset..s.offset + s.len];
            let leaf = s.name.rsplit('.').next().unwrap_or("");
            if leaf == "gain" {
                slot.fill(1.0);
            } else if s.decay {
                let std = if s.name == "pos_embed" {
                    0.02
                } else {
                    let fan_in = if s.shape.len() == 2 { s.shape[1] } else { s.shape[0] };
                    (1.0 / fan_in as f64).sqrt()
                };
                let normal = Normal::new(0.0, std).expect("valid std");
                for p in slot.iter_mut() {
                    *p = normal.sample(&mut rng);
                }
            }
        }
        Ok(SeqModel {
            config,
            seed,
            params,
            specs,
            offsets,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.params[s.offset..s.offset + s.len])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let s = self.specs.iter().find(|s| s.name == name)?.clone();
        Some(&mut self.params[s.offset..s.offset + s.len])
    }

    fn check_feature(&self, f: &FingerprintFeature) -> Result<Vec<usize>, ModelError> {
        if f.values.len() != self.config.feature_len || f.mask.len() != self.config.feature_len {
            return Err(ModelError::LengthMismatch {
                expected: self.config.feature_len,
                got: f.values.len().min(f.mask.len()),
            });
        }
        let positions: Vec<usize> = (0..f.mask.len()).filter(|&i| f.mask[i]).collect();
        if positions.is_empty() {
            return Err(ModelError::NoValidPositions);
        }
        Ok(positions)
    }

    /// Probability that the feature comes from a fake article.
    pub fn forward(&self, feature: &FingerprintFeature) -> Result<f64, ModelError> {
        Ok(sigmoid(self.forward_logit(feature)?))
    }

    pub fn forward_logit(&self, feature: &FingerprintFeature) -> Result<f64, ModelError> {
        let positions = self.check_feature(feature)?;
        Ok(self.run_forward(feature, positions).logit)
    }

    fn run_forward(&self, f: &FingerprintFeature, positions: Vec<usize>) -> ForwardCache {
        let cfg = &self.config;
        let p = &self.params;
        let o = &self.offsets;
        let n = positions.len();
        let d = cfg.d_model;
        let input = |q: isize| -> f64 {
            if q < 0 || q as usize >= f.values.len() || !f.mask[q as usize] {
                0.0
            } else {
                f.values[q as usize]
            }
        };

        let (conv_z, h, cin) = if cfg.use_cnn {
            let c = cfg.conv_channels;
            let kw = cfg.kernel;
            let half = (kw / 2) as isize;
            let w = &p[o.conv_w..o.conv_w + c * kw];
            let b = &p[o.conv_b..o.conv_b + c];
            let mut z = vec![0.0; n * c];
            for (t, &pos) in positions.iter().enumerate() {
                let window: Vec<f64> = (0..kw)
                    .map(|j| input(pos as isize + j as isize - half))
                    .collect();
                for ch in 0..c {
                    z[t * c + ch] = b[ch]
                        + w[ch * kw..(ch + 1) * kw]
                            .iter()
                            .zip(&window)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                }
            }
            let h: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
            (z, h, c)
        } else {
            (Vec::new(), positions.iter().map(|&q| f.values[q]).collect::<Vec<f64>>(), 1)
        };

        let mut x = linear(
            &h,
            n,
            cin,
            &p[o.lift_w..o.lift_w + d * cin],
            &p[o.lift_b..o.lift_b + d],
            d,
        );
        if !cfg.use_cnn {
            for (t, &pos) in positions.iter().enumerate() {
                let pe = &p[o.pos + pos * d..o.pos + (pos + 1) * d];
                for i in 0..d {
                    x[t * d + i] += pe[i];
                }
            }
        }

        let mut blocks = Vec::with_capacity(o.blocks.len());
        for bo in &o.blocks {
            let (out, cache) = self.block_forward(bo, &x, n);
            blocks.push(cache);
            x = out;
        }

        let mut pool = vec![0.0; d];
        for t in 0..n {
            for i in 0..d {
                pool[i] += x[t * d + i];
            }
        }
        pool.iter_mut().for_each(|v| *v /= n as f64);
        let hw = &p[o.head_w..o.head_w + d];
        let logit = p[o.head_b] + hw.iter().zip(&pool).map(|(a, b)| a * b).sum::<f64>();
        ForwardCache {
            positions,
            conv_z,
            h,
            blocks,
            pool,
            logit,
        }
    }

    fn block_forward(&self, bo: &BlockOffsets, x: &[f64], n: usize) -> (Vec<f64>, BlockCache) {
        let p = &self.params;
        let d = self.config.d_model;
        let f = self.config.ff_dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let (a, ln1) = layer_norm(x, n, d, &p[bo.ln1_g..bo.ln1_g + d], &p[bo.ln1_b..bo.ln1_b + d]);
        let proj = |w: usize, b: usize| linear(&a, n, d, &p[w..w + d * d], &p[b..b + d], d);
        let q = proj(bo.wq, bo.bq);
        let k = proj(bo.wk, bo.bk);
        let v = proj(bo.wv, bo.bv);

        let mut attn = vec![0.0; heads * n * n];
        let mut o_cat = vec![0.0; n * d];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..n {
                let row = &mut attn[(hd * n + i) * n..(hd * n + i + 1) * n];
                let qi = &q[i * d + off..i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    let kj = &k[j * d + off..j * d + off + dh];
                    let s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    row[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                for r in row.iter_mut() {
                    *r /= sum;
                }
                let oi = &mut o_cat[i * d + off..i * d + off + dh];
                for j in 0..n {
                    let aij = row[j];
                    let vj = &v[j * d + off..j * d + off + dh];
                    for e in 0..dh {
                        oi[e] += aij * vj[e];
                    }
                }
            }
        }
        let attn_out = linear(&o_cat, n, d, &p[bo.wo..bo.wo + d * d], &p[bo.bo..bo.bo + d], d);
        let r: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

        let (b, ln2) = layer_norm(&r, n, d, &p[bo.ln2_g..bo.ln2_g + d], &p[bo.ln2_b..bo.ln2_b + d]);
        let u = linear(&b, n, d, &p[bo.w1..bo.w1 + f * d], &p[bo.b1..bo.b1 + f], f);
        let act: Vec<f64> = u.iter().map(|&v| v.max(0.0)).collect();
        let ff = linear(&act, n, f, &p[bo.w2..bo.w2 + d * f], &p[bo.b2..bo.b2 + d], d);
        let out: Vec<f64> = r.iter().zip(&ff).map(|(a, b)| a + b).collect();
        (
            out,
            BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                attn,
                o: o_cat,
                ln2,
                b,
                u,
                act,
            },
        )
    }

    /// Backpropagate `dlogit` through a cached forward pass, accumulating
    /// into `grad` (same layout as the parameters).
    fn backward(&self, f: &FingerprintFeature, cache: &ForwardCache, dlogit: f64, grad: &mut [f64]) {
        let cfg = &self.config;
        let p = &self.params;
        let o = &self.offsets;
        let n = cache.positions.len();
        let d = cfg.d_model;

        for i in 0..d {
            grad[o.head_w + i] += dlogit * cache.pool[i];
        }
        grad[o.head_b] += dlogit;
        let hw = &p[o.head_w..o.head_w + d];
        let mut dx = vec![0.0; n * d];
        for t in 0..n {
            for i in 0..d {
                dx[t * d + i] = dlogit * hw[i] / n as f64;
            }
        }

        for (bo, bc) in o.blocks.iter().zip(&cache.blocks).rev() {
            dx = self.block_backward(bo, bc, &dx, n, grad);
        }

        if !cfg.use_cnn {
            for (t, &pos) in cache.positions.iter().enumerate() {
                for i in 0..d {
                    grad[o.pos + pos * d + i] += dx[t * d + i];
                }
            }
        }
        let cin = if cfg.use_cnn { cfg.conv_channels } else { 1 };
        let (gw, rest) = grad[o.lift_w..].split_at_mut(d * cin);
        let gb = &mut rest[o.lift_b - o.lift_w - d * cin..][..d];
        let dh = linear_back(&cache.h, &dx, n, cin, d, &p[o.lift_w..o.lift_w + d * cin], gw, gb);

        if cfg.use_cnn {
            let c = cfg.conv_channels;
            let kw = cfg.kernel;
            let half = (kw / 2) as isize;
            for (t, &pos) in cache.positions.iter().enumerate() {
                for ch in 0..c {
                    if cache.conv_z[t * c + ch] <= 0.0 {
                        continue;
                    }
                    let g = dh[t * c + ch];
                    grad[o.conv_b + ch] += g;
                    for j in 0..kw {
                        let q = pos as isize + j as isize - half;
                        if q >= 0 && (q as usize) < f.values.len() && f.mask[q as usize] {
                            grad[o.conv_w + ch * kw + j] += g * f.values[q as usize];
                        }
                    }
                }
            }
        }
    }

    fn block_backward(
        &self,
        bo: &BlockOffsets,
        bc: &BlockCache,
        dout: &[f64],
        n: usize,
        grad: &mut [f64],
    ) -> Vec<f64> {
        let p = &self.params;
        let d = self.config.d_model;
        let f = self.config.ff_dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // out = r + W2·relu(W1·LN2(r) + b1) + b2
        let mut dr = dout.to_vec();
        let dact = {
            let (gw, gb) = two_slices(grad, bo.w2, d * f, bo.b2, d);
            linear_back(&bc.act, dout, n, f, d, &p[bo.w2..bo.w2 + d * f], gw, gb)
        };
        let du: Vec<f64> = dact
            .iter()
            .zip(&bc.u)
            .map(|(&g, &u)| if u > 0.0 { g } else { 0.0 })
            .collect();
        let db = {
            let (gw, gb) = two_slices(grad, bo.w1, f * d, bo.b1, f);
            linear_back(&bc.b, &du, n, d, f, &p[bo.w1..bo.w1 + f * d], gw, gb)
        };
        let dr_ln = {
            let (gg, gb) = two_slices(grad, bo.ln2_g, d, bo.ln2_b, d);
            layer_norm_back(&db, n, d, &bc.ln2, &p[bo.ln2_g..bo.ln2_g + d], gg, gb)
        };
        dr.iter_mut().zip(&dr_ln).for_each(|(a, b)| *a += b);

        // r = x + Wo·attn(LN1(x)) + bo
        let mut dx = dr.clone();
        let d_o = {
            let (gw, gb) = two_slices(grad, bo.wo, d * d, bo.bo, d);
            linear_back(&bc.o, &dr, n, d, d, &p[bo.wo..bo.wo + d * d], gw, gb)
        };
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut da_row = vec![0.0; n];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..n {
                let row = &bc.attn[(hd * n + i) * n..(hd * n + i + 1) * n];
                let doi = &d_o[i * d + off..i * d + off + dh];
                let mut dot = 0.0;
                for j in 0..n {
                    let vj = &bc.v[j * d + off..j * d + off + dh];
                    let g: f64 = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    da_row[j] = g;
                    dot += row[j] * g;
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for e in 0..dh {
                        dvj[e] += row[j] * doi[e];
                    }
                }
                for j in 0..n {
                    let ds = row[j] * (da_row[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for e in 0..dh {
                        dq[i * d + off + e] += ds * bc.k[j * d + off + e];
                        dk[j * d + off + e] += ds * bc.q[i * d + off + e];
                    }
                }
            }
        }
        let mut da = vec![0.0; n * d];
        for (w, b, dy) in [(bo.wq, bo.bq, &dq), (bo.wk, bo.bk, &dk), (bo.wv, bo.bv, &dv)] {
            let (gw, gb) = two_slices(grad, w, d * d, b, d);
            let part = linear_back(&bc.a, dy, n, d, d, &p[w..w + d * d], gw, gb);
            da.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
        }
        let dx_ln = {
            let (gg, gb) = two_slices(grad, bo.ln1_g, d, bo.ln1_b, d);
            layer_norm_back(&da, n, d, &bc.ln1, &p[bo.ln1_g..bo.ln1_g + d], gg, gb)
        };
        dx.iter_mut().zip(&dx_ln).for_each(|(a, b)| *a += b);
        dx
    }

    /// Single-sample loss and accumulated gradient (scaled by `weight`).
    fn loss_and_grad(
        &self,
        feature: &FingerprintFeature,
        label: f64,
        weight: f64,
        grad: &mut [f64],
    ) -> Result<f64, ModelError> {
        let positions = self.check_feature(feature)?;
        let cache = self.run_forward(feature, positions);
        let (loss, dlogit) = bce_with_grad(cache.logit, label);
        if dlogit != 0.0 {
            self.backward(feature, &cache, dlogit * weight, grad);
        }
        Ok(loss)
    }

    pub fn loss(&self, feature: &FingerprintFeature, label: f64) -> Result<f64, ModelError> {
        Ok(bce_with_grad(self.forward_logit(feature)?, label).0)
    }

    /// Loss together with the on/off state of every ReLU unit.
    fn loss_and_pattern(
        &self,
        feature: &FingerprintFeature,
        label: f64,
    ) -> Result<(f64, Vec<bool>), ModelError> {
        let positions = self.check_feature(feature)?;
        let cache = self.run_forward(feature, positions);
        let mut pattern: Vec<bool> = cache.conv_z.iter().map(|&z| z > 0.0).collect();
        for b in &cache.blocks {
            pattern.extend(b.u.iter().map(|&z| z > 0.0));
        }
        Ok((bce_with_grad(cache.logit, label).0, pattern))
    }

    /// Analytic gradient of the single-sample loss.
    pub fn gradient(&self, feature: &FingerprintFeature, label: f64) -> Result<Vec<f64>, ModelError> {
        let mut grad = vec![0.0; self.params.len()];
        self.loss_and_grad(feature, label, 1.0, &mut grad)?;
        Ok(grad)
    }
}

/// Disjoint mutable views of two parameter ranges with `a < b`.
fn two_slices(buf: &mut [f64], a: usize, a_len: usize, b: usize, b_len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + a_len <= b);
    let (left, right) = buf.split_at_mut(b);
    (&mut left[a..a + a_len], &mut right[..b_len])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            weight_decay: 0.1,
            warmup_ratio: 0.1,
            batch_size: 16,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::BadTrainConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub warmup_steps: usize,
    pub train_config: TrainConfig,
    pub train_size: usize,
}

/// AdamW: adaptive moments with weight decay applied directly to the
/// parameters, only on tensors flagged for decay.
struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    decay_mask: Vec<bool>,
    t: i32,
}

impl AdamW {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &SeqModel) -> Self {
        let mut decay_mask = vec![false; model.params.len()];
        for s in &model.specs {
            decay_mask[s.offset..s.offset + s.len].fill(s.decay);
        }
        AdamW {
            m: vec![0.0; model.params.len()],
            v: vec![0.0; model.params.len()],
            decay_mask,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, wd: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t);
        let bc2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            if self.decay_mask[i] {
                params[i] -= lr * wd * params[i];
            }
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Learning rate at 0-based `step`: linear warmup to `base` over
/// `warmup_steps`, constant afterwards.
pub fn lr_at(base: f64, step: usize, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        base
    } else {
        base * (step + 1) as f64 / warmup_steps as f64
    }
}

/// Train in place with mini-batch AdamW over a seeded shuffle. Single
/// threaded; identical inputs and seed give identical parameters.
pub fn train(
    model: &mut SeqModel,
    features: &[FingerprintFeature],
    labels: &[f64],
    cfg: &TrainConfig,
) -> Result<TrainingSummary, ModelError> {
    cfg.validate()?;
    if features.len() != labels.len() {
        return Err(ModelError::LengthsDiffer(features.len(), labels.len()));
    }
    if !(labels.iter().any(|&y| y == 1.0) && labels.iter().any(|&y| y == 0.0)) {
        return Err(ModelError::SingleClass);
    }
    for f in features {
        model.check_feature(f)?;
    }
    let n = features.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let warmup_steps = (cfg.warmup_ratio * total_steps as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model);
    let mut grad = vec![0.0; model.params.len()];
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let w = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                batch_loss += model.loss_and_grad(&features[i], labels[i], w, &mut grad)?;
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(ModelError::NonFiniteLoss { epoch, step });
            }
            epoch_loss += batch_loss;
            let lr = lr_at(cfg.learning_rate, step, warmup_steps);
            opt.step(&mut model.params, &grad, lr, cfg.weight_decay);
            step += 1;
        }
        epoch_losses.push(epoch_loss / n as f64);
    }
    Ok(TrainingSummary {
        epoch_losses,
        steps: step,
        warmup_steps,
        train_config: *cfg,
        train_size: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub prob: f64,
    /// `prob >= 0.5` is fake.
    pub fake: bool,
}

/// Batch inference, parallel over features.
pub fn predict(model: &SeqModel, features: &[FingerprintFeature]) -> Result<Vec<Prediction>, ModelError> {
    features
        .par_iter()
        .map(|f| {
            let prob = model.forward(f)?;
            Ok(Prediction {
                prob,
                fake: prob >= 0.5,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    /// Largest relative error per parameter tensor.
    pub per_tensor: Vec<(String, f64)>,
}

/// Relative error used by [`grad_check`]: `|a - n| / max(|a|, |n|, 1e-6)`.
/// The floor keeps finite-difference round-off on vanishing gradients from
/// dominating.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// [`relative_error`] after forgiving `slack` of the absolute gap.
fn relative_error_beyond(analytic: f64, numeric: f64, slack: f64) -> f64 {
    let gap = ((analytic - numeric).abs() - slack).max(0.0);
    gap / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare the analytic gradient with central differences for every
/// parameter and report the largest [`relative_error`].
///
/// The loss is only piecewise smooth and can be sharply curved (layer norm
/// over a nearly constant row, for instance). Each coordinate is therefore
/// differenced at `h` and `h / 2`; while a ReLU unit flips or the two
/// estimates disagree by more than [`STEP_AGREEMENT`], `h` shrinks tenfold,
/// at most [`MAX_STEP_SHRINKS`] times. The finer estimate is used.
///
/// A difference quotient carries round-off of about
/// `LOSS_ROUNDOFF * max(|loss|, 1) / h`. That much of the analytic/numeric
/// gap is forgiven before dividing, so parameters whose true gradient is
/// zero (a key bias under softmax, say) do not register pure noise as error.
pub fn grad_check(
    model: &SeqModel,
    feature: &FingerprintFeature,
    label: f64,
    epsilon: f64,
) -> Result<GradCheckReport, ModelError> {
    let analytic = model.gradient(feature, label)?;
    let (loss, base) = model.loss_and_pattern(feature, label)?;
    let noise = LOSS_ROUNDOFF * loss.abs().max(1.0);
    let mut probe = model.clone();
    let mut per_tensor = Vec::with_capacity(model.specs.len());
    let mut max_rel: f64 = 0.0;
    let mut worst = String::new();
    for s in &model.specs {
        let mut tensor_max: f64 = 0.0;
        for i in s.offset..s.offset + s.len {
            let (numeric, h) = probe.adaptive_difference(i, feature, label, epsilon, &base, noise)?;
            tensor_max = tensor_max.max(relative_error_beyond(analytic[i], numeric, noise / h));
        }
        if tensor_max > max_rel || worst.is_empty() {
            max_rel = max_rel.max(tensor_max);
            worst = s.name.clone();
        }
        per_tensor.push((s.name.clone(), tensor_max));
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst_param: worst,
        per_tensor,
    })
}

/// Relative tolerance between the `h` and `h / 2` estimates in [`grad_check`].
pub const STEP_AGREEMENT: f64 = 1e-5;
pub const MAX_STEP_SHRINKS: usize = 4;
/// Assumed relative round-off in one loss evaluation.
pub const LOSS_ROUNDOFF: f64 = 1000.0 * f64::EPSILON;

impl SeqModel {
    /// Central difference for parameter `i` that stays inside one smooth
    /// piece, with the step it used. Leaves the parameter unchanged.
    fn adaptive_difference(
        &mut self,
        i: usize,
        feature: &FingerprintFeature,
        label: f64,
        epsilon: f64,
        base: &[bool],
        noise: f64,
    ) -> Result<(f64, f64), ModelError> {
        let orig = self.params[i];
        let central = |m: &mut Self, h: f64| -> Result<(f64, bool), ModelError> {
            m.params[i] = orig + h;
            let (plus, pp) = m.loss_and_pattern(feature, label)?;
            m.params[i] = orig - h;
            let (minus, pm) = m.loss_and_pattern(feature, label)?;
            m.params[i] = orig;
            Ok(((plus - minus) / (2.0 * h), pp == base && pm == base))
        };
        let mut h = epsilon;
        let mut shrinks = 0;
        loop {
            let (coarse, smooth_c) = central(self, h)?;
            let (fine, smooth_f) = central(self, h / 2.0)?;
            let tol = STEP_AGREEMENT * fine.abs() + 2.0 * noise / h;
            let agree = (coarse - fine).abs() <= tol;
            if (smooth_c && smooth_f && agree) || shrinks == MAX_STEP_SHRINKS {
                return Ok((fine, h / 2.0));
            }
            h /= 10.0;
            shrinks += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major values.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub params: Vec<NamedTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSummary>,
}

impl SeqModel {
    pub fn to_checkpoint(&self, training: Option<TrainingSummary>) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config,
            seed: self.seed,
            params: self
                .specs
                .iter()
                .map(|s| NamedTensor {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    data: self.params[s.offset..s.offset + s.len].to_vec(),
                })
                .collect(),
            training,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unknown format {:?}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(ModelError::VersionMismatch {
                found: ckpt.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut model = SeqModel::new(ckpt.config, ckpt.seed)?;
        if ckpt.params.len() != model.specs.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.specs.len(),
                ckpt.params.len()
            )));
        }
        for (spec, t) in model.specs.clone().iter().zip(&ckpt.params) {
            if spec.name != t.name || spec.shape != t.shape || t.data.len() != spec.len {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {:?} {:?} does not match expected {:?} {:?}",
                    t.name, t.shape, spec.name, spec.shape
                )));
            }
            model.params[spec.offset..spec.offset + spec.len].copy_from_slice(&t.data);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, training: Option<TrainingSummary>) -> Result<(), ModelError> {
        let json = serde_json::to_string(&self.to_checkpoint(training))
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        fs::write(path, json).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<(Self, Option<TrainingSummary>), ModelError> {
        let text = fs::read_to_string(path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        Ok((Self::from_checkpoint(&ckpt)?, ckpt.training))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm_scorer::WordProb;

    fn seq(logprobs: &[f64]) -> WordProbSeq {
        WordProbSeq {
            sentence_index: 0,
            words: logprobs
                .iter()
                .map(|&lp| WordProb { word: "w".into(), logprob: lp })
                .collect(),
            prompt_id: PromptId::T2,
            backend_id: "t".into(),
        }
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            feature_len: 12,
            conv_channels: 4,
            kernel: 3,
            d_model: 8,
            heads: 2,
            ff_dim: 16,
            layers: 1,
            use_cnn: true,
            use_transformer: true,
        }
    }

    fn feature(values: &[f64], len: usize) -> FingerprintFeature {
        let lp: Vec<f64> = values.iter().map(|v| -v).collect();
        assemble_feature("a", &[seq(&lp)], len, 0).unwrap()
    }

    #[test]
    fn assemble_pads_with_mask() {
        let f = assemble_feature("a", &[seq(&[0.0, 0.0])], 4, 3).unwrap();
        assert_eq!(f.values, vec![0.0; 4]);
        assert_eq!(f.mask, vec![true, true, false, false]);
        assert_eq!(f.k, 3);
    }

    #[test]
    fn assemble_truncates_and_clips() {
        let f = assemble_feature("a", &[seq(&[-1.0; 10])], 4, 0).unwrap();
        assert_eq!(f.values, vec![1.0; 4]);
        assert!(f.mask.iter().all(|&m| m));
        let f = assemble_feature("a", &[seq(&[-40.0])], 2, 0).unwrap();
        assert_eq!(f.values[0], 30.0);
        assert!(matches!(assemble_feature("a", &[], 4, 0), Err(ModelError::EmptyFeature)));
        assert!(matches!(
            assemble_feature("a", &[seq(&[-1.0])], 0, 0),
            Err(ModelError::ZeroLength)
        ));
    }

    #[test]
    fn zero_head_gives_one_half() {
        let mut m = SeqModel::new(small_config(), 3).unwrap();
        m.tensor_mut("head.weight").unwrap().fill(0.0);
        m.tensor_mut("head.bias").unwrap().fill(0.0);
        for vals in [[1.0, 2.0, 3.0], [9.0, 0.0, 30.0]] {
            assert_eq!(m.forward(&feature(&vals, 12)).unwrap(), 0.5);
        }
    }

    #[test]
    fn padded_values_do_not_matter() {
        let m = SeqModel::new(small_config(), 1).unwrap();
        let f = feature(&[2.0, 5.0, 1.0], 12);
        let mut g = f.clone();
        for i in 3..12 {
            g.values[i] = 17.0 + i as f64;
        }
        assert_eq!(m.forward(&f).unwrap(), m.forward(&g).unwrap());
    }

    #[test]
    fn dimension_mismatch_errors() {
        let m = SeqModel::new(small_config(), 1).unwrap();
        assert!(matches!(
            m.forward(&feature(&[1.0], 5)),
            Err(ModelError::LengthMismatch { expected: 12, got: 5 })
        ));
        let mut f = feature(&[1.0], 12);
        f.mask.fill(false);
        assert!(matches!(m.forward(&f), Err(ModelError::NoValidPositions)));
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.heads = 3;
        assert!(SeqModel::new(c, 0).is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn bce_examples() {
        let eps = 1e-7;
        assert!(bce_loss(&[1.0 - eps], &[1.0]).unwrap() < 1e-6);
        let l = bce_loss(&[0.5, 0.5], &[0.0, 1.0]).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        let l = bce_loss(&[0.9, 0.1], &[1.0, 0.0]).unwrap();
        assert!((l - 0.210_721_031_315_652_5).abs() < 1e-12);
        assert!(matches!(bce_loss(&[0.5], &[]), Err(ModelError::LengthsDiffer(1, 0))));
        // clamp keeps the loss finite
        assert!(bce_loss(&[0.0], &[1.0]).unwrap().is_finite());
    }

    #[test]
    fn bce_permutation_invariant() {
        let p = [0.2, 0.7, 0.9, 0.4];
        let y = [0.0, 1.0, 1.0, 0.0];
        let a = bce_loss(&p, &y).unwrap();
        let b = bce_loss(&[p[2], p[0], p[3], p[1]], &[y[2], y[0], y[3], y[1]]).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn predict_tie_rule_and_empty() {
        let mut m = SeqModel::new(small_config(), 0).unwrap();
        m.tensor_mut("head.weight").unwrap().fill(0.0);
        m.tensor_mut("head.bias").unwrap().fill(0.0);
        let out = predict(&m, &[feature(&[1.0], 12)]).unwrap();
        assert_eq!(out[0].prob, 0.5);
        assert!(out[0].fake);
        assert!(predict(&m, &[]).unwrap().is_empty());
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(lr_at(1.0, 0, 4), 0.25);
        assert_eq!(lr_at(1.0, 3, 4), 1.0);
        assert_eq!(lr_at(1.0, 10, 4), 1.0);
        assert_eq!(lr_at(1.0, 0, 0), 1.0);
    }

    #[test]
    fn train_config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.warmup_ratio = 1.0;
        assert!(c.validate().is_err());
        c = TrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn grad_check_small_model() {
        let m = SeqModel::new(small_config(), 0).unwrap();
        let f = feature(&[2.0, 0.5, 7.0, 3.0, 1.0, 4.0, 2.5], 12);
        let r = grad_check(&m, &f, 1.0, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn checkpoint_roundtrip_and_version() {
        let m = SeqModel::new(small_config(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path, None).unwrap();
        let (back, _) = SeqModel::load(&path).unwrap();
        assert_eq!(back.params(), m.params());
        let mut ckpt = m.to_checkpoint(None);
        ckpt.version = 99;
        assert!(matches!(
            SeqModel::from_checkpoint(&ckpt),
            Err(ModelError::VersionMismatch { found: 99, .. })
        ));
    }
}
