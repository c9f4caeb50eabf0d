//! Transformer building blocks: configuration, embeddings, multi-head
//! attention, and the post-norm encoder/decoder layer functions.
//!
//! Layer functions take the wired input and the self-attention key/value
//! source separately so the fusion module can re-route either without
//! touching the layer math. For every strategy except multi-layer attention
//! the two coincide.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionKind, FusionParams, FusionStrategy};
use crate::tensor::{fmath, Mask, Param, Precision, Real, Tape, Tensor, TensorData};

/// Every hyperparameter of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Hidden size of aggregation-node FFNs.
    pub d_ff_agg: usize,
    pub l_enc: usize,
    pub l_dec: usize,
    pub vocab_src: usize,
    pub vocab_tgt: usize,
    pub max_len: usize,
    pub strategy: FusionStrategy,
    pub lambda_div: f64,
    pub ln_eps: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Reserved; training is deterministic and keeps this at zero.
    pub dropout: f64,
}

impl ModelConfig {
    /// A small default every test and example builds on; callers override
    /// the fields they care about.
    pub fn small(strategy: FusionStrategy) -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            d_ff_agg: 32,
            l_enc: 4,
            l_dec: 4,
            vocab_src: 16,
            vocab_tgt: 16,
            max_len: 32,
            strategy,
            lambda_div: 0.0,
            ln_eps: 1e-5,
            seed: 1,
            precision: Precision::F32,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.d_ff_agg == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.l_enc == 0 || self.l_dec == 0 {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        if self.vocab_src == 0 || self.vocab_tgt == 0 || self.max_len == 0 {
            return Err(Error::Config("vocab sizes and max_len must be positive".into()));
        }
        if self.lambda_div < 0.0 {
            return Err(Error::Config("lambda_div must be nonnegative".into()));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config("dropout is reserved and must be 0".into()));
        }
        match self.strategy.kind {
            FusionKind::Hierarchical => {
                if self.l_enc % 2 != 0 || self.l_dec % 2 != 0 {
                    return Err(Error::Config(format!(
                        "hierarchical aggregation needs even layer counts, got l_enc={} l_dec={}",
                        self.l_enc, self.l_dec
                    )));
                }
            }
            FusionKind::MultiLayerAttention => {
                let k = self.strategy.k;
                if k < 1 || k > self.l_enc || k > self.l_dec {
                    return Err(Error::Config(format!(
                        "multi-layer attention needs 1 <= k <= L per stack, got k={k} l_enc={} l_dec={}",
                        self.l_enc, self.l_dec
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Combined per-head projections; `d_model x d_model` each, no biases.
#[derive(Clone, Debug)]
pub struct AttentionParams<T> {
    pub wq: Param<T>,
    pub wk: Param<T>,
    pub wv: Param<T>,
    pub wo: Param<T>,
}

#[derive(Clone, Debug)]
pub struct LnParams<T> {
    pub gain: Param<T>,
    pub bias: Param<T>,
}

/// One encoder or decoder layer. Decoder layers carry the extra
/// cross-attention sub-layer and its LayerNorm.
#[derive(Clone, Debug)]
pub struct LayerParams<T> {
    pub self_attn: AttentionParams<T>,
    pub cross_attn: Option<AttentionParams<T>>,
    pub w1: Param<T>,
    pub b1: Param<T>,
    pub w2: Param<T>,
    pub b2: Param<T>,
    pub ln1: LnParams<T>,
    pub ln2: LnParams<T>,
    pub ln3: Option<LnParams<T>>,
}

/// Seeded uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)).
pub(crate) fn init_matrix<T: Real>(
    rng: &mut ChaCha8Rng,
    name: String,
    rows: usize,
    cols: usize,
) -> Param<T> {
    let s = fmath::sqrt(6.0 / (rows + cols) as f64);
    let data: Vec<T> = (0..rows * cols)
        .map(|_| T::from_f64(rng.gen_range(-s..s)))
        .collect();
    Param::new(name, TensorData::new(vec![rows, cols], data).expect("sized"))
}

pub(crate) fn init_zeros<T: Real>(name: String, d: usize) -> Param<T> {
    Param::new(name, TensorData::zeros(vec![d]))
}

pub(crate) fn init_ln<T: Real>(prefix: &str) -> impl Fn(usize) -> LnParams<T> + '_ {
    move |d| LnParams {
        gain: Param::new(format!("{prefix}.gain"), TensorData::full(vec![d], T::one())),
        bias: Param::new(format!("{prefix}.bias"), TensorData::zeros(vec![d])),
    }
}

fn init_attention<T: Real>(rng: &mut ChaCha8Rng, prefix: &str, d: usize) -> AttentionParams<T> {
    AttentionParams {
        wq: init_matrix(rng, format!("{prefix}.wq"), d, d),
        wk: init_matrix(rng, format!("{prefix}.wk"), d, d),
        wv: init_matrix(rng, format!("{prefix}.wv"), d, d),
        wo: init_matrix(rng, format!("{prefix}.wo"), d, d),
    }
}

fn init_layer<T: Real>(
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &ModelConfig,
    decoder: bool,
) -> LayerParams<T> {
    let d = cfg.d_model;
    LayerParams {
        self_attn: init_attention(rng, &format!("{prefix}.self_attn"), d),
        cross_attn: decoder.then(|| init_attention(rng, &format!("{prefix}.cross_attn"), d)),
        w1: init_matrix(rng, format!("{prefix}.ffn.w1"), d, cfg.d_ff),
        b1: init_zeros(format!("{prefix}.ffn.b1"), cfg.d_ff),
        w2: init_matrix(rng, format!("{prefix}.ffn.w2"), cfg.d_ff, d),
        b2: init_zeros(format!("{prefix}.ffn.b2"), d),
        ln1: init_ln(&format!("{prefix}.ln1"))(d),
        ln2: init_ln(&format!("{prefix}.ln2"))(d),
        ln3: decoder.then(|| init_ln(&format!("{prefix}.ln3"))(d)),
    }
}

/// The whole network: embeddings, both stacks, fusion parameters, and the
/// output projection.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub src_embed: Param<T>,
    pub tgt_embed: Param<T>,
    /// `[d_model, vocab_tgt]`, applied to the decoder's fused final state.
    pub out_proj: Param<T>,
    pub encoder: Vec<LayerParams<T>>,
    pub decoder: Vec<LayerParams<T>>,
    pub enc_fusion: FusionParams<T>,
    pub dec_fusion: FusionParams<T>,
}

impl<T: Real> Model<T> {
    /// Build and initialize a model from its configuration. Draw order is
    /// fixed (embeddings, encoder, decoder, encoder fusion, decoder fusion),
    /// so configs differing only in fusion parameters share backbone values
    /// for the same seed.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::init_with_rng(config, &mut rng)
    }

    pub(crate) fn init_with_rng(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = config.d_model;
        let src_embed = init_matrix(rng, "src_embed".into(), config.vocab_src, d);
        let tgt_embed = init_matrix(rng, "tgt_embed".into(), config.vocab_tgt, d);
        let out_proj = init_matrix(rng, "out_proj".into(), d, config.vocab_tgt);
        let encoder = (0..config.l_enc)
            .map(|l| init_layer(rng, &format!("enc.{l}"), config, false))
            .collect();
        let decoder = (0..config.l_dec)
            .map(|l| init_layer(rng, &format!("dec.{l}"), config, true))
            .collect();
        let enc_fusion = FusionParams::init(rng, config, "enc", config.l_enc)?;
        let dec_fusion = FusionParams::init(rng, config, "dec", config.l_dec)?;
        Ok(Self {
            config: config.clone(),
            src_embed,
            tgt_embed,
            out_proj,
            encoder,
            decoder,
            enc_fusion,
            dec_fusion,
        })
    }

    /// Every trainable tensor, in a fixed order.
    pub fn named_params(&self) -> Vec<&Param<T>> {
        let mut out = vec![&self.src_embed, &self.tgt_embed, &self.out_proj];
        for layer in self.encoder.iter().chain(self.decoder.iter()) {
            for a in core::iter::once(&layer.self_attn).chain(layer.cross_attn.iter()) {
                out.extend([&a.wq, &a.wk, &a.wv, &a.wo]);
            }
            out.extend([&layer.w1, &layer.b1, &layer.w2, &layer.b2]);
            for ln in [&layer.ln1, &layer.ln2]
                .into_iter()
                .chain(layer.ln3.iter())
            {
                out.extend([&ln.gain, &ln.bias]);
            }
        }
        self.enc_fusion.collect_params(&mut out);
        self.dec_fusion.collect_params(&mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> =
            vec![&mut self.src_embed, &mut self.tgt_embed, &mut self.out_proj];
        for layer in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            for a in core::iter::once(&mut layer.self_attn).chain(layer.cross_attn.iter_mut()) {
                out.extend([&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo]);
            }
            out.extend([&mut layer.w1, &mut layer.b1, &mut layer.w2, &mut layer.b2]);
            for ln in [&mut layer.ln1, &mut layer.ln2]
                .into_iter()
                .chain(layer.ln3.iter_mut())
            {
                out.extend([&mut ln.gain, &mut ln.bias]);
            }
        }
        self.enc_fusion.collect_params_mut(&mut out);
        self.dec_fusion.collect_params_mut(&mut out);
        out
    }
}

/// Sinusoidal positional encodings for positions `[t0, t0 + len)`.
pub fn positional_encoding<T: Real>(t0: usize, len: usize, d: usize) -> TensorData<T> {
    let mut data = vec![T::zero(); len * d];
    for (row, pos) in (t0..t0 + len).enumerate() {
        for i in 0..d / 2 {
            let freq = 1.0 / fmath::powf(10000.0, 2.0 * i as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[row * d + 2 * i] = T::from_f64(fmath::sin(angle));
            data[row * d + 2 * i + 1] = T::from_f64(fmath::cos(angle));
        }
        if d % 2 == 1 {
            let i = d / 2;
            let freq = 1.0 / fmath::powf(10000.0, 2.0 * i as f64 / d as f64);
            data[row * d + d - 1] = T::from_f64(fmath::sin(pos as f64 * freq));
        }
    }
    TensorData::new(vec![len, d], data).expect("sized")
}

/// Token embedding: lookup scaled by sqrt(d_model), plus sinusoidal
/// positional encodings starting at `pos_offset` when `with_pos` is set
/// (tests disable it to probe permutation equivariance).
#[allow(clippy::too_many_arguments)]
pub fn embed<T: Real>(
    tape: &mut Tape<T>,
    table: &Param<T>,
    ids: &[usize],
    batch: usize,
    time: usize,
    max_len: usize,
    pos_offset: usize,
    with_pos: bool,
) -> Result<Tensor> {
    if batch * time != ids.len() {
        return Err(Error::ShapeMismatch {
            op: "embed",
            lhs: vec![batch, time],
            rhs: vec![ids.len()],
        });
    }
    if pos_offset + time > max_len {
        return Err(Error::Config(format!(
            "embed: positions {}..{} exceed max_len {max_len}",
            pos_offset,
            pos_offset + time
        )));
    }
    let d = table.value.shape()[1];
    let t = tape.param(table);
    let looked = tape.lookup(t, ids, &[batch, time])?;
    let scaled = tape.scale(looked, T::from_f64(fmath::sqrt(d as f64)));
    if !with_pos {
        return Ok(scaled);
    }
    let pe = tape.leaf(positional_encoding(pos_offset, time, d));
    tape.add_suffix(scaled, pe)
}

/// Scaled dot-product attention over heads, given an already projected
/// query. Splitting the query projection out lets multi-layer attention
/// share one query across several key/value sources.
#[allow(clippy::too_many_arguments)]
pub fn attention_with_query<T: Real>(
    tape: &mut Tape<T>,
    q_proj: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    mask: Option<&Mask>,
    wk: &Param<T>,
    wv: &Param<T>,
    wo: &Param<T>,
    n_heads: usize,
) -> Result<Tensor> {
    let (b, tq, d) = dims3(tape, q_proj)?;
    let (_, tk, _) = dims3(tape, k_in)?;
    if d % n_heads != 0 {
        return Err(Error::Config(format!(
            "attention: d_model {d} not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;

    let wk = tape.param(wk);
    let wv = tape.param(wv);
    let k = tape.matmul(k_in, wk)?;
    let v = tape.matmul(v_in, wv)?;

    let split = |tape: &mut Tape<T>, x: Tensor, t: usize| -> Result<Tensor> {
        let r = tape.reshape(x, &[b, t, n_heads, dh])?;
        tape.permute(r, &[0, 2, 1, 3]) // [b, h, t, dh]
    };
    let qh = split(tape, q_proj, tq)?;
    let kh = split(tape, k, tk)?;
    let vh = split(tape, v, tk)?;

    let kt = tape.permute(kh, &[0, 1, 3, 2])?; // [b, h, dh, tk]
    let scores = tape.matmul(qh, kt)?;
    let scaled = tape.scale(scores, T::from_f64(1.0 / fmath::sqrt(dh as f64)));
    let probs = tape.softmax_masked(scaled, mask)?;
    let ctx = tape.matmul(probs, vh)?; // [b, h, tq, dh]
    let merged = tape.permute(ctx, &[0, 2, 1, 3])?;
    let flat = tape.reshape(merged, &[b, tq, d])?;
    let wo = tape.param(wo);
    tape.matmul(flat, wo)
}

/// Full multi-head attention: project query from `q_in`, then attend.
/// No residual or LayerNorm inside; those belong to the layer functions.
pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    mask: Option<&Mask>,
    params: &AttentionParams<T>,
    n_heads: usize,
) -> Result<Tensor> {
    let wq = tape.param(&params.wq);
    let q = tape.matmul(q_in, wq)?;
    attention_with_query(tape, q, k_in, v_in, mask, &params.wk, &params.wv, &params.wo, n_heads)
}

/// First sub-layer: `C = LN(Att(input, kv, kv) + input)`.
pub fn self_attn_sublayer<T: Real>(
    tape: &mut Tape<T>,
    input: Tensor,
    self_kv: Tensor,
    mask: Option<&Mask>,
    params: &LayerParams<T>,
    n_heads: usize,
    eps: T,
) -> Result<Tensor> {
    let att = multi_head_attention(tape, input, self_kv, self_kv, mask, &params.self_attn, n_heads)?;
    let res = tape.add(att, input)?;
    let gain = tape.param(&params.ln1.gain);
    let bias = tape.param(&params.ln1.bias);
    tape.layer_norm(res, gain, bias, eps)
}

/// Position-wise FFN with ReLU: `relu(x W1 + b1) W2 + b2`.
fn ffn<T: Real>(tape: &mut Tape<T>, x: Tensor, params: &LayerParams<T>) -> Result<Tensor> {
    let w1 = tape.param(&params.w1);
    let b1 = tape.param(&params.b1);
    let w2 = tape.param(&params.w2);
    let b2 = tape.param(&params.b2);
    let h = tape.matmul(x, w1)?;
    let h = tape.add_suffix(h, b1)?;
    let h = tape.relu(h);
    let out = tape.matmul(h, w2)?;
    tape.add_suffix(out, b2)
}

/// Encoder tail after the first sub-layer: `H = LN(Ffn(C) + C)`.
pub fn encoder_finish<T: Real>(
    tape: &mut Tape<T>,
    c: Tensor,
    params: &LayerParams<T>,
    eps: T,
) -> Result<Tensor> {
    let f = ffn(tape, c, params)?;
    let res = tape.add(f, c)?;
    let gain = tape.param(&params.ln2.gain);
    let bias = tape.param(&params.ln2.bias);
    tape.layer_norm(res, gain, bias, eps)
}

/// One encoder layer: self-attention then FFN, post-norm residuals.
pub fn encoder_layer<T: Real>(
    tape: &mut Tape<T>,
    input: Tensor,
    self_kv: Tensor,
    pad_mask: Option<&Mask>,
    params: &LayerParams<T>,
    n_heads: usize,
    eps: T,
) -> Result<Tensor> {
    let c = self_attn_sublayer(tape, input, self_kv, pad_mask, params, n_heads, eps)?;
    encoder_finish(tape, c, params, eps)
}

/// Decoder tail: cross-attention over the encoder memory, then FFN, each
/// with residual + LayerNorm.
pub fn decoder_finish<T: Real>(
    tape: &mut Tape<T>,
    c: Tensor,
    enc_memory: Tensor,
    memory_mask: Option<&Mask>,
    params: &LayerParams<T>,
    n_heads: usize,
    eps: T,
) -> Result<Tensor> {
    let cross = params
        .cross_attn
        .as_ref()
        .ok_or_else(|| Error::Config("decoder layer missing cross-attention params".into()))?;
    let att = multi_head_attention(tape, c, enc_memory, enc_memory, memory_mask, cross, n_heads)?;
    let res = tape.add(att, c)?;
    let gain = tape.param(&params.ln2.gain);
    let bias = tape.param(&params.ln2.bias);
    let d_state = tape.layer_norm(res, gain, bias, eps)?;

    let f = ffn(tape, d_state, params)?;
    let res = tape.add(f, d_state)?;
    let ln3 = params
        .ln3
        .as_ref()
        .ok_or_else(|| Error::Config("decoder layer missing third LayerNorm".into()))?;
    let gain = tape.param(&ln3.gain);
    let bias = tape.param(&ln3.bias);
    tape.layer_norm(res, gain, bias, eps)
}

/// One decoder layer: causal self-attention, cross-attention, FFN.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer<T: Real>(
    tape: &mut Tape<T>,
    input: Tensor,
    self_kv: Tensor,
    enc_memory: Tensor,
    self_mask: Option<&Mask>,
    memory_mask: Option<&Mask>,
    params: &LayerParams<T>,
    n_heads: usize,
    eps: T,
) -> Result<Tensor> {
    let c = self_attn_sublayer(tape, input, self_kv, self_mask, params, n_heads, eps)?;
    decoder_finish(tape, c, enc_memory, memory_mask, params, n_heads, eps)
}

pub(crate) fn dims3<T: Real>(tape: &Tape<T>, t: Tensor) -> Result<(usize, usize, usize)> {
    let s = tape.shape(t);
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "expected rank-3 tensor",
            lhs: s.to_vec(),
            rhs: vec![],
        });
    }
    Ok((s[0], s[1], s[2]))
}

/// Key-padding mask shaped `[b, 1, 1, tk]`, broadcast over heads and query
/// positions. `keep[b * tk + t]` marks real tokens.
pub fn key_pad_mask(batch: usize, tk: usize, keep: &[bool]) -> Result<Mask> {
    Mask::new(vec![batch, 1, 1, tk], keep.to_vec())
}

/// Causal mask `[tq, tk]` with query position `q` seeing keys `0..=q + offset`.
/// `offset` is the number of cached positions preceding the new queries.
pub fn causal_mask(tq: usize, tk: usize, offset: usize) -> Result<Mask> {
    let mut keep = vec![false; tq * tk];
    for q in 0..tq {
        for k in 0..tk.min(q + offset + 1) {
            keep[q * tk + k] = true;
        }
    }
    Mask::new(vec![tq, tk], keep)
}

/// Causal-and-padding mask `[b, 1, tq, tk]` for decoder self-attention.
pub fn causal_pad_mask(batch: usize, tq: usize, tk: usize, keep_keys: &[bool]) -> Result<Mask> {
    let mut keep = vec![false; batch * tq * tk];
    for b in 0..batch {
        for q in 0..tq {
            for k in 0..tk.min(q + 1) {
                keep[(b * tq + q) * tk + k] = keep_keys[b * tk + k];
            }
        }
    }
    Mask::new(vec![batch, 1, tq, tk], keep)
}
