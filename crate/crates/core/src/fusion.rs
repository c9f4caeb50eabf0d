//! Layer-fusion strategies: how backbone layers, aggregation nodes, and
//! attention keys get wired together.
//!
//! Six wirings are supported. `Vanilla` is the plain stack. `Dense` adds
//! every previous layer output to the current one, costing no parameters.
//! `Linear` learns per-layer matrices and emits their weighted sum.
//! `Iterative` chains aggregation nodes left to right over an unmodified
//! backbone. `Hierarchical` merges pairs of layers through a binary-tree
//! schedule whose node outputs feed back into the backbone. And
//! `MultiLayerAttention` lets each layer's self-attention query the k layers
//! below it with separate key/value projections, combined by an aggregation
//! node.
//!
//! The aggregation node itself is `Agg(x, y) = Ln(Ffn([x; y]) + x + y)` with
//! a sigmoid inside the FFN by default; the activation and the residual set
//! are configurable ablations.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    self, attention_with_query, decoder_finish, encoder_finish, init_ln, init_matrix, init_zeros,
    self_attn_sublayer, LayerParams, LnParams, ModelConfig,
};
use crate::tensor::{fmath, Mask, Param, Real, Tape, Tensor, TensorData};

/// Which of the six wirings to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Vanilla,
    Dense,
    Linear,
    Iterative,
    Hierarchical,
    MultiLayerAttention,
}

impl FusionKind {
    pub fn name(&self) -> &'static str {
        match self {
            FusionKind::Vanilla => "vanilla",
            FusionKind::Dense => "dense",
            FusionKind::Linear => "linear",
            FusionKind::Iterative => "iterative",
            FusionKind::Hierarchical => "hierarchical",
            FusionKind::MultiLayerAttention => "multi_layer_attention",
        }
    }

    pub const ALL: [FusionKind; 6] = [
        FusionKind::Vanilla,
        FusionKind::Dense,
        FusionKind::Linear,
        FusionKind::Iterative,
        FusionKind::Hierarchical,
        FusionKind::MultiLayerAttention,
    ];
}

/// Activation inside an aggregation node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggFn {
    SigmoidFfn,
    ReluFfn,
    /// Projection-free single-head attention over the m inputs per position,
    /// mean-pooled. Only the node's LayerNorm carries parameters.
    SelfAttention,
}

/// Which aggregation inputs get a residual connection to the node output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    None,
    /// Only the first (deepest) input.
    Top,
    All,
}

/// Tagged strategy choice plus its knobs. `k` only matters for
/// multi-layer attention; `agg_fn` and `residual_mode` only for strategies
/// that build aggregation nodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionStrategy {
    pub kind: FusionKind,
    pub k: usize,
    pub agg_fn: AggFn,
    pub residual_mode: ResidualMode,
}

impl FusionStrategy {
    pub fn new(kind: FusionKind) -> Self {
        Self {
            kind,
            k: 2,
            agg_fn: AggFn::SigmoidFfn,
            residual_mode: ResidualMode::All,
        }
    }

    pub fn vanilla() -> Self {
        Self::new(FusionKind::Vanilla)
    }

    pub fn dense() -> Self {
        Self::new(FusionKind::Dense)
    }

    pub fn linear() -> Self {
        Self::new(FusionKind::Linear)
    }

    pub fn iterative() -> Self {
        Self::new(FusionKind::Iterative)
    }

    pub fn hierarchical() -> Self {
        Self::new(FusionKind::Hierarchical)
    }

    pub fn multi_layer_attention(k: usize) -> Self {
        Self {
            k,
            ..Self::new(FusionKind::MultiLayerAttention)
        }
    }

    /// Aggregation nodes one stack of `l_count` layers produces.
    pub fn agg_node_count(&self, l_count: usize) -> usize {
        match self.kind {
            FusionKind::Vanilla | FusionKind::Dense | FusionKind::MultiLayerAttention => 0,
            FusionKind::Linear => 1,
            FusionKind::Iterative => l_count.saturating_sub(1),
            FusionKind::Hierarchical => l_count / 2,
        }
    }
}

/// Parameters of one aggregation node. For the FFN activations the input
/// projection is stored as one `[(m * d_model), d_ff_agg]` matrix whose row
/// blocks `W_1..W_m` line up with the concatenated inputs; the block
/// boundaries are what the exploitation scores slice along. The attention
/// variant carries only the LayerNorm.
#[derive(Clone, Debug)]
pub struct AggParams<T> {
    pub arity: usize,
    pub kind: AggFn,
    pub residual_mode: ResidualMode,
    pub ffn_in: Option<Param<T>>,
    pub b_in: Option<Param<T>>,
    pub ffn_out: Option<Param<T>>,
    pub b_out: Option<Param<T>>,
    pub ln: LnParams<T>,
}

impl<T: Real> AggParams<T> {
    fn init(rng: &mut ChaCha8Rng, prefix: &str, arity: usize, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let fa = cfg.d_ff_agg;
        let strategy = &cfg.strategy;
        let has_ffn = strategy.agg_fn != AggFn::SelfAttention;
        Self {
            arity,
            kind: strategy.agg_fn,
            residual_mode: strategy.residual_mode,
            ffn_in: has_ffn.then(|| init_matrix(rng, format!("{prefix}.ffn_in"), arity * d, fa)),
            b_in: has_ffn.then(|| init_zeros(format!("{prefix}.b_in"), fa)),
            ffn_out: has_ffn.then(|| init_matrix(rng, format!("{prefix}.ffn_out"), fa, d)),
            b_out: has_ffn.then(|| init_zeros(format!("{prefix}.b_out"), d)),
            ln: init_ln(&format!("{prefix}.ln"))(d),
        }
    }

    /// Sum of |w| per input block of `ffn_in`, the numerators of the
    /// exploitation scores. `None` for the attention variant, which has no
    /// input blocks.
    pub fn input_block_abs_sums(&self) -> Option<Vec<f64>> {
        let ffn_in = self.ffn_in.as_ref()?;
        let rows = ffn_in.value.shape()[0];
        let cols = ffn_in.value.shape()[1];
        let d = rows / self.arity;
        let mut sums = vec![0.0f64; self.arity];
        for j in 0..self.arity {
            let mut s = 0.0;
            for r in j * d..(j + 1) * d {
                for c in 0..cols {
                    s += ffn_in.value.data()[r * cols + c].to_f64().abs();
                }
            }
            sums[j] = s;
        }
        Some(sums)
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        for p in [&self.ffn_in, &self.b_in, &self.ffn_out, &self.b_out]
            .into_iter()
            .flatten()
        {
            out.push(p);
        }
        out.push(&self.ln.gain);
        out.push(&self.ln.bias);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        for p in [
            &mut self.ffn_in,
            &mut self.b_in,
            &mut self.ffn_out,
            &mut self.b_out,
        ]
        .into_iter()
        .flatten()
        {
            out.push(p);
        }
        out.push(&mut self.ln.gain);
        out.push(&mut self.ln.bias);
    }
}

/// Extra attention branches one layer uses to reach below its immediate
/// predecessor. Branch `i` (starting at 2) holds the key/value/output
/// projections for attending layer `l - i`; the query projection is shared
/// with the layer's own self-attention.
#[derive(Clone, Debug)]
pub struct MlaBranch<T> {
    pub wk: Param<T>,
    pub wv: Param<T>,
    pub wo: Param<T>,
}

#[derive(Clone, Debug)]
pub struct MlaLayerParams<T> {
    pub branches: Vec<MlaBranch<T>>,
    pub agg: AggParams<T>,
}

/// Strategy-specific trainable state for one stack.
#[derive(Clone, Debug)]
pub enum FusionParams<T> {
    None,
    /// `W_1..W_L`, each `d_model x d_model`, starting at the uniform average
    /// `(1/L) I`.
    Linear { weights: Vec<Param<T>> },
    /// Aggregation nodes in production order (iterative: l = 2..=L;
    /// hierarchical: i = 1..=L/2).
    Aggregation { nodes: Vec<AggParams<T>> },
    /// Indexed by layer (0-based); `None` where the layer reaches only one
    /// lower layer and multi-layer attention reduces to the vanilla path.
    MultiLayer { per_layer: Vec<Option<MlaLayerParams<T>>> },
}

impl<T: Real> FusionParams<T> {
    pub(crate) fn init(
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
        side: &str,
        l_count: usize,
    ) -> Result<Self> {
        let d = cfg.d_model;
        Ok(match cfg.strategy.kind {
            FusionKind::Vanilla | FusionKind::Dense => FusionParams::None,
            FusionKind::Linear => {
                let inv = T::from_f64(1.0 / l_count as f64);
                let weights = (1..=l_count)
                    .map(|l| {
                        Param::new(
                            format!("{side}.fuse.linear{l}"),
                            TensorData::scaled_identity(d, inv),
                        )
                    })
                    .collect();
                FusionParams::Linear { weights }
            }
            FusionKind::Iterative => {
                let nodes = (2..=l_count)
                    .map(|l| AggParams::init(rng, &format!("{side}.fuse.agg{l}"), 2, cfg))
                    .collect();
                FusionParams::Aggregation { nodes }
            }
            FusionKind::Hierarchical => {
                let nodes = (1..=l_count / 2)
                    .map(|i| {
                        let arity = if i == 1 { 2 } else { 3 };
                        AggParams::init(rng, &format!("{side}.fuse.agg{i}"), arity, cfg)
                    })
                    .collect();
                FusionParams::Aggregation { nodes }
            }
            FusionKind::MultiLayerAttention => {
                let k = cfg.strategy.k;
                let per_layer = (1..=l_count)
                    .map(|l| {
                        let m = k.min(l);
                        (m >= 2).then(|| MlaLayerParams {
                            branches: (2..=m)
                                .map(|i| MlaBranch {
                                    wk: init_matrix(rng, format!("{side}.fuse.mla{l}.att{i}.wk"), d, d),
                                    wv: init_matrix(rng, format!("{side}.fuse.mla{l}.att{i}.wv"), d, d),
                                    wo: init_matrix(rng, format!("{side}.fuse.mla{l}.att{i}.wo"), d, d),
                                })
                                .collect(),
                            agg: AggParams::init(rng, &format!("{side}.fuse.mla{l}.agg"), m, cfg),
                        })
                    })
                    .collect();
                FusionParams::MultiLayer { per_layer }
            }
        })
    }

    pub(crate) fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        match self {
            FusionParams::None => {}
            FusionParams::Linear { weights } => out.extend(weights.iter()),
            FusionParams::Aggregation { nodes } => {
                for n in nodes {
                    n.collect(out);
                }
            }
            FusionParams::MultiLayer { per_layer } => {
                for mla in per_layer.iter().flatten() {
                    for b in &mla.branches {
                        out.extend([&b.wk, &b.wv, &b.wo]);
                    }
                    mla.agg.collect(out);
                }
            }
        }
    }

    pub(crate) fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        match self {
            FusionParams::None => {}
            FusionParams::Linear { weights } => out.extend(weights.iter_mut()),
            FusionParams::Aggregation { nodes } => {
                for n in nodes {
                    n.collect_mut(out);
                }
            }
            FusionParams::MultiLayer { per_layer } => {
                for mla in per_layer.iter_mut().flatten() {
                    for b in &mut mla.branches {
                        out.extend([&mut b.wk, &mut b.wv, &mut b.wo]);
                    }
                    mla.agg.collect_mut(out);
                }
            }
        }
    }
}

/// Everything one stack pass produced: backbone outputs `H^0..H^L`
/// (index 0 is the embedding), aggregation node outputs in production
/// order, and whichever of those is the stack's final output.
#[derive(Clone, Debug)]
pub struct LayerStates {
    pub backbone: Vec<Tensor>,
    pub agg_nodes: Vec<Tensor>,
    pub final_state: Tensor,
}

/// Per-position state history for incremental decoding, one entry per
/// backbone state and aggregation node, each shaped `[b, t_cached, d]`.
#[derive(Clone, Debug)]
pub struct StackCache<T: Real> {
    pub backbone: Vec<TensorData<T>>,
    pub agg: Vec<TensorData<T>>,
}

impl<T: Real> StackCache<T> {
    pub fn empty(batch: usize, d_model: usize, l_count: usize, agg_count: usize) -> Self {
        Self {
            backbone: (0..=l_count)
                .map(|_| TensorData::zeros(vec![batch, 0, d_model]))
                .collect(),
            agg: (0..agg_count)
                .map(|_| TensorData::zeros(vec![batch, 0, d_model]))
                .collect(),
        }
    }

    /// Append the new positions of `states` to the history.
    pub fn extend(&mut self, tape: &Tape<T>, states: &LayerStates) -> Result<()> {
        for (slot, t) in self
            .backbone
            .iter_mut()
            .zip(states.backbone.iter())
            .chain(self.agg.iter_mut().zip(states.agg_nodes.iter()))
        {
            let new = tape.to_data(*t);
            *slot = TensorData::concat(1, &[slot, &new])?;
        }
        Ok(())
    }
}

/// Immutable context shared by every layer of one stack pass.
pub struct StackCtx<'a, T: Real> {
    pub layers: &'a [LayerParams<T>],
    pub fusion: &'a FusionParams<T>,
    pub strategy: &'a FusionStrategy,
    pub n_heads: usize,
    pub eps: T,
    pub hooks: StackHooks,
}

/// Test instrumentation for the stack executor.
#[derive(Clone, Copy, Debug, Default)]
pub struct StackHooks {
    /// Make dense connections skip their history sum, reducing Dense to
    /// Vanilla exactly.
    pub dense_zero_history: bool,
}

impl<T: Real> crate::model::Model<T> {
    pub fn enc_ctx(&self, hooks: StackHooks) -> StackCtx<'_, T> {
        StackCtx {
            layers: &self.encoder,
            fusion: &self.enc_fusion,
            strategy: &self.config.strategy,
            n_heads: self.config.n_heads,
            eps: T::from_f64(self.config.ln_eps),
            hooks,
        }
    }

    pub fn dec_ctx(&self, hooks: StackHooks) -> StackCtx<'_, T> {
        StackCtx {
            layers: &self.decoder,
            fusion: &self.dec_fusion,
            strategy: &self.config.strategy,
            n_heads: self.config.n_heads,
            eps: T::from_f64(self.config.ln_eps),
            hooks,
        }
    }
}

enum Side<'a, T: Real> {
    Encoder {
        pad_mask: Option<&'a Mask>,
    },
    Decoder {
        memory: Tensor,
        self_mask: Option<&'a Mask>,
        memory_mask: Option<&'a Mask>,
        cache: Option<&'a StackCache<T>>,
    },
}

/// Run the encoder stack under the configured strategy.
pub fn run_encoder_stack<T: Real>(
    tape: &mut Tape<T>,
    ctx: &StackCtx<'_, T>,
    h0: Tensor,
    pad_mask: Option<&Mask>,
) -> Result<LayerStates> {
    run_stack(tape, ctx, h0, &Side::Encoder { pad_mask })
}

/// Run the decoder stack; `cache` carries previously decoded positions so a
/// single new position can attend its full history.
pub fn run_decoder_stack<T: Real>(
    tape: &mut Tape<T>,
    ctx: &StackCtx<'_, T>,
    h0_new: Tensor,
    memory: Tensor,
    self_mask: Option<&Mask>,
    memory_mask: Option<&Mask>,
    cache: Option<&StackCache<T>>,
) -> Result<LayerStates> {
    run_stack(
        tape,
        ctx,
        h0_new,
        &Side::Decoder {
            memory,
            self_mask,
            memory_mask,
            cache,
        },
    )
}

fn validate_ctx<T: Real>(ctx: &StackCtx<'_, T>, cache: Option<&StackCache<T>>) -> Result<()> {
    let l_count = ctx.layers.len();
    let strategy = ctx.strategy;
    match (strategy.kind, ctx.fusion) {
        (FusionKind::Vanilla | FusionKind::Dense, FusionParams::None) => {}
        (FusionKind::Linear, FusionParams::Linear { weights }) if weights.len() == l_count => {}
        (FusionKind::Iterative, FusionParams::Aggregation { nodes })
            if nodes.len() == l_count.saturating_sub(1) => {}
        (FusionKind::Hierarchical, FusionParams::Aggregation { nodes })
            if l_count % 2 == 0 && nodes.len() == l_count / 2 => {}
        (FusionKind::MultiLayerAttention, FusionParams::MultiLayer { per_layer })
            if per_layer.len() == l_count && strategy.k >= 1 => {}
        _ => {
            return Err(Error::Config(format!(
                "fusion parameters do not match strategy {} over {l_count} layers",
                strategy.kind.name()
            )));
        }
    }
    if let Some(c) = cache {
        if c.backbone.len() != l_count + 1 || c.agg.len() != strategy.agg_node_count(l_count) {
            return Err(Error::Config("decode cache shape does not match the stack".into()));
        }
    }
    Ok(())
}

fn with_prefix<T: Real>(
    tape: &mut Tape<T>,
    cached: Option<&TensorData<T>>,
    new: Tensor,
) -> Result<Tensor> {
    match cached {
        None => Ok(new),
        Some(c) if c.shape()[1] == 0 => Ok(new),
        Some(c) => {
            let leaf = tape.leaf(c.clone());
            tape.concat(&[leaf, new], 1)
        }
    }
}

fn finish_layer<T: Real>(
    tape: &mut Tape<T>,
    side: &Side<'_, T>,
    c: Tensor,
    layer: &LayerParams<T>,
    ctx: &StackCtx<'_, T>,
) -> Result<Tensor> {
    match side {
        Side::Encoder { .. } => encoder_finish(tape, c, layer, ctx.eps),
        Side::Decoder {
            memory,
            memory_mask,
            ..
        } => decoder_finish(tape, c, *memory, *memory_mask, layer, ctx.n_heads, ctx.eps),
    }
}

fn run_stack<T: Real>(
    tape: &mut Tape<T>,
    ctx: &StackCtx<'_, T>,
    h0_new: Tensor,
    side: &Side<'_, T>,
) -> Result<LayerStates> {
    let (self_mask, cache) = match side {
        Side::Encoder { pad_mask } => (*pad_mask, None),
        Side::Decoder {
            self_mask, cache, ..
        } => (*self_mask, *cache),
    };
    validate_ctx(ctx, cache)?;
    let l_count = ctx.layers.len();
    let strategy = ctx.strategy;

    let mut backbone_new = vec![h0_new];
    let mut backbone_full = vec![with_prefix(tape, cache.map(|c| &c.backbone[0]), h0_new)?];
    let mut agg_new: Vec<Tensor> = Vec::new();
    let mut agg_full: Vec<Tensor> = Vec::new();

    if strategy.kind == FusionKind::Hierarchical {
        let nodes = match ctx.fusion {
            FusionParams::Aggregation { nodes } => nodes,
            _ => unreachable!("validated"),
        };
        for i in 1..=l_count / 2 {
            // Odd layer: consumes the embedding for the first sub-tree,
            // afterwards the previous aggregation node fed back into the
            // backbone.
            let (in_new, in_full) = if i == 1 {
                (backbone_new[0], backbone_full[0])
            } else {
                (agg_new[i - 2], agg_full[i - 2])
            };
            let layer1 = &ctx.layers[2 * i - 2];
            let c = self_attn_sublayer(tape, in_new, in_full, self_mask, layer1, ctx.n_heads, ctx.eps)?;
            let h_odd = finish_layer(tape, side, c, layer1, ctx)?;
            backbone_new.push(h_odd);
            let odd_full = with_prefix(tape, cache.map(|c| &c.backbone[2 * i - 1]), h_odd)?;
            backbone_full.push(odd_full);

            let layer2 = &ctx.layers[2 * i - 1];
            let c = self_attn_sublayer(tape, h_odd, odd_full, self_mask, layer2, ctx.n_heads, ctx.eps)?;
            let h_even = finish_layer(tape, side, c, layer2, ctx)?;
            backbone_new.push(h_even);
            let even_full = with_prefix(tape, cache.map(|c| &c.backbone[2 * i]), h_even)?;
            backbone_full.push(even_full);

            // Deeper layer first, then shallower, then the previous node.
            let node = if i == 1 {
                agg_apply(tape, &[h_even, h_odd], &nodes[0], ctx.eps)?
            } else {
                agg_apply(tape, &[h_even, h_odd, agg_new[i - 2]], &nodes[i - 1], ctx.eps)?
            };
            agg_new.push(node);
            let node_full = with_prefix(tape, cache.map(|c| &c.agg[i - 1]), node)?;
            agg_full.push(node_full);
        }
        let final_state = agg_new[l_count / 2 - 1];
        return Ok(LayerStates {
            backbone: backbone_new,
            agg_nodes: agg_new,
            final_state,
        });
    }

    for l in 1..=l_count {
        let layer = &ctx.layers[l - 1];
        let input_new = backbone_new[l - 1];
        let input_full = backbone_full[l - 1];

        let mla_params = match (strategy.kind, ctx.fusion) {
            (FusionKind::MultiLayerAttention, FusionParams::MultiLayer { per_layer }) => {
                per_layer[l - 1].as_ref()
            }
            _ => None,
        };
        let c = match mla_params {
            Some(mla) => wire_multi_layer_attention(
                tape,
                l,
                input_new,
                &backbone_full,
                strategy.k,
                layer,
                mla,
                self_mask,
                ctx.n_heads,
                ctx.eps,
            )?,
            None => self_attn_sublayer(tape, input_new, input_full, self_mask, layer, ctx.n_heads, ctx.eps)?,
        };
        let h_layer = finish_layer(tape, side, c, layer, ctx)?;

        // Dense connection: add every previous layer output (the embedding
        // does not participate). Position-wise, so the cache is unaffected.
        let h = if strategy.kind == FusionKind::Dense && !ctx.hooks.dense_zero_history {
            let mut acc = h_layer;
            for i in 1..l {
                acc = tape.add(acc, backbone_new[i])?;
            }
            acc
        } else {
            h_layer
        };
        backbone_new.push(h);
        let full = with_prefix(tape, cache.map(|c| &c.backbone[l]), h)?;
        backbone_full.push(full);
    }

    let final_state = match ctx.fusion {
        FusionParams::None | FusionParams::MultiLayer { .. } => backbone_new[l_count],
        FusionParams::Linear { weights } => {
            let mut acc: Option<Tensor> = None;
            for (l, w) in weights.iter().enumerate() {
                let wp = tape.param(w);
                let term = tape.matmul(backbone_new[l + 1], wp)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            let hat = acc.expect("at least one layer");
            agg_new.push(hat);
            let full = with_prefix(tape, cache.map(|c| &c.agg[0]), hat)?;
            agg_full.push(full);
            hat
        }
        FusionParams::Aggregation { nodes } => {
            // Iterative chain over the unmodified backbone, beginning at the
            // shallowest layer.
            let mut hat = backbone_new[1];
            for (idx, node) in nodes.iter().enumerate() {
                let l = idx + 2;
                let next = agg_apply(tape, &[backbone_new[l], hat], node, ctx.eps)?;
                agg_new.push(next);
                let full = with_prefix(tape, cache.map(|c| &c.agg[idx]), next)?;
                agg_full.push(full);
                hat = next;
            }
            hat
        }
    };

    Ok(LayerStates {
        backbone: backbone_new,
        agg_nodes: agg_new,
        final_state,
    })
}

/// First sub-layer of layer `l` under multi-layer attention: one shared
/// query attends each of the `min(k, l)` layers below through separate
/// key/value/output projections, the per-layer contexts are combined by the
/// node's aggregation function, and the usual residual + LayerNorm wraps
/// the result. With a single reachable layer this is exactly the vanilla
/// sub-layer.
#[allow(clippy::too_many_arguments)]
pub fn wire_multi_layer_attention<T: Real>(
    tape: &mut Tape<T>,
    l: usize,
    input_new: Tensor,
    backbone_full: &[Tensor],
    k: usize,
    layer: &LayerParams<T>,
    mla: &MlaLayerParams<T>,
    mask: Option<&Mask>,
    n_heads: usize,
    eps: T,
) -> Result<Tensor> {
    if k < 1 {
        return Err(Error::Config("multi-layer attention requires k >= 1".into()));
    }
    let m = k.min(l);
    if m < 2 {
        return self_attn_sublayer(tape, input_new, backbone_full[l - 1], mask, layer, n_heads, eps);
    }
    if mla.branches.len() != m - 1 || mla.agg.arity != m {
        return Err(Error::Config(format!(
            "multi-layer attention parameters for layer {l} expect arity {m}"
        )));
    }
    let wq = tape.param(&layer.self_attn.wq);
    let q = tape.matmul(input_new, wq)?;
    let mut contexts = Vec::with_capacity(m);
    let c1 = attention_with_query(
        tape,
        q,
        backbone_full[l - 1],
        backbone_full[l - 1],
        mask,
        &layer.self_attn.wk,
        &layer.self_attn.wv,
        &layer.self_attn.wo,
        n_heads,
    )?;
    contexts.push(c1);
    for (bi, branch) in mla.branches.iter().enumerate() {
        let src = backbone_full[l - 2 - bi];
        let ci = attention_with_query(
            tape, q, src, src, mask, &branch.wk, &branch.wv, &branch.wo, n_heads,
        )?;
        contexts.push(ci);
    }
    let agg = agg_apply(tape, &contexts, &mla.agg, eps)?;
    let res = tape.add(agg, input_new)?;
    let gain = tape.param(&layer.ln1.gain);
    let bias = tape.param(&layer.ln1.bias);
    tape.layer_norm(res, gain, bias, eps)
}

/// Apply one aggregation node to its inputs (deepest first).
pub fn agg_apply<T: Real>(
    tape: &mut Tape<T>,
    inputs: &[Tensor],
    p: &AggParams<T>,
    eps: T,
) -> Result<Tensor> {
    if inputs.len() != p.arity {
        return Err(Error::Config(format!(
            "aggregation node of arity {} applied to {} inputs",
            p.arity,
            inputs.len()
        )));
    }
    let fused = match p.kind {
        AggFn::SigmoidFfn | AggFn::ReluFfn => {
            let cat = tape.concat_last(inputs)?;
            let w_in = tape.param(p.ffn_in.as_ref().expect("ffn variant"));
            let b_in = tape.param(p.b_in.as_ref().expect("ffn variant"));
            let w_out = tape.param(p.ffn_out.as_ref().expect("ffn variant"));
            let b_out = tape.param(p.b_out.as_ref().expect("ffn variant"));
            let h = tape.matmul(cat, w_in)?;
            let h = tape.add_suffix(h, b_in)?;
            let h = if p.kind == AggFn::SigmoidFfn {
                tape.sigmoid(h)
            } else {
                tape.relu(h)
            };
            let out = tape.matmul(h, w_out)?;
            tape.add_suffix(out, b_out)?
        }
        AggFn::SelfAttention => {
            let m = p.arity;
            let cat = tape.concat_last(inputs)?;
            let (b, t, md) = model::dims3(tape, cat)?;
            let d = md / m;
            let x = tape.reshape(cat, &[b, t, m, d])?;
            let xt = tape.permute(x, &[0, 1, 3, 2])?;
            let scores = tape.matmul(x, xt)?;
            let scaled = tape.scale(scores, T::from_f64(1.0 / fmath::sqrt(d as f64)));
            let probs = tape.softmax_masked(scaled, None)?;
            let mixed = tape.matmul(probs, x)?;
            let summed = tape.sum_axis(mixed, 2)?;
            tape.scale(summed, T::from_f64(1.0 / m as f64))
        }
    };
    let pre = match p.residual_mode {
        ResidualMode::None => fused,
        ResidualMode::Top => tape.add(fused, inputs[0])?,
        ResidualMode::All => {
            let mut acc = fused;
            for x in inputs {
                acc = tape.add(acc, *x)?;
            }
            acc
        }
    };
    let gain = tape.param(&p.ln.gain);
    let bias = tape.param(&p.ln.bias);
    tape.layer_norm(pre, gain, bias, eps)
}

/// Two-input aggregation; `x` is the deeper input.
pub fn agg2<T: Real>(
    tape: &mut Tape<T>,
    x: Tensor,
    y: Tensor,
    p: &AggParams<T>,
    eps: T,
) -> Result<Tensor> {
    agg_apply(tape, &[x, y], p, eps)
}

/// Three-input aggregation; inputs ordered deepest first.
pub fn agg3<T: Real>(
    tape: &mut Tape<T>,
    x: Tensor,
    y: Tensor,
    z: Tensor,
    p: &AggParams<T>,
    eps: T,
) -> Result<Tensor> {
    agg_apply(tape, &[x, y, z], p, eps)
}

// ── Parameter accounting ────────────────────────────────────────────────

/// Exact per-tensor parameter counts derived from the configuration alone.
#[derive(Clone, Debug)]
pub struct ParamCountReport {
    pub per_tensor: BTreeMap<String, usize>,
    pub total: usize,
}

/// Enumerate every trainable tensor the configuration would allocate,
/// by name, without building a model.
pub fn count_params(cfg: &ModelConfig) -> Result<ParamCountReport> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut per_tensor = BTreeMap::new();

    per_tensor.insert("src_embed".into(), cfg.vocab_src * d);
    per_tensor.insert("tgt_embed".into(), cfg.vocab_tgt * d);
    per_tensor.insert("out_proj".into(), d * cfg.vocab_tgt);

    for (side, l_count, decoder) in [("enc", cfg.l_enc, false), ("dec", cfg.l_dec, true)] {
        for l in 0..l_count {
            let prefix = format!("{side}.{l}");
            for att in if decoder {
                vec!["self_attn", "cross_attn"]
            } else {
                vec!["self_attn"]
            } {
                for w in ["wq", "wk", "wv", "wo"] {
                    per_tensor.insert(format!("{prefix}.{att}.{w}"), d * d);
                }
            }
            per_tensor.insert(format!("{prefix}.ffn.w1"), d * cfg.d_ff);
            per_tensor.insert(format!("{prefix}.ffn.b1"), cfg.d_ff);
            per_tensor.insert(format!("{prefix}.ffn.w2"), cfg.d_ff * d);
            per_tensor.insert(format!("{prefix}.ffn.b2"), d);
            let ln_count = if decoder { 3 } else { 2 };
            for i in 1..=ln_count {
                per_tensor.insert(format!("{prefix}.ln{i}.gain"), d);
                per_tensor.insert(format!("{prefix}.ln{i}.bias"), d);
            }
        }
        count_fusion_tensors(cfg, side, l_count, &mut per_tensor);
    }

    let total = per_tensor.values().sum();
    Ok(ParamCountReport { per_tensor, total })
}

fn count_agg_tensors(
    cfg: &ModelConfig,
    prefix: String,
    arity: usize,
    per_tensor: &mut BTreeMap<String, usize>,
) {
    let d = cfg.d_model;
    let fa = cfg.d_ff_agg;
    if cfg.strategy.agg_fn != AggFn::SelfAttention {
        per_tensor.insert(format!("{prefix}.ffn_in"), arity * d * fa);
        per_tensor.insert(format!("{prefix}.b_in"), fa);
        per_tensor.insert(format!("{prefix}.ffn_out"), fa * d);
        per_tensor.insert(format!("{prefix}.b_out"), d);
    }
    per_tensor.insert(format!("{prefix}.ln.gain"), d);
    per_tensor.insert(format!("{prefix}.ln.bias"), d);
}

fn count_fusion_tensors(
    cfg: &ModelConfig,
    side: &str,
    l_count: usize,
    per_tensor: &mut BTreeMap<String, usize>,
) {
    let d = cfg.d_model;
    match cfg.strategy.kind {
        FusionKind::Vanilla | FusionKind::Dense => {}
        FusionKind::Linear => {
            for l in 1..=l_count {
                per_tensor.insert(format!("{side}.fuse.linear{l}"), d * d);
            }
        }
        FusionKind::Iterative => {
            for l in 2..=l_count {
                count_agg_tensors(cfg, format!("{side}.fuse.agg{l}"), 2, per_tensor);
            }
        }
        FusionKind::Hierarchical => {
            for i in 1..=l_count / 2 {
                let arity = if i == 1 { 2 } else { 3 };
                count_agg_tensors(cfg, format!("{side}.fuse.agg{i}"), arity, per_tensor);
            }
        }
        FusionKind::MultiLayerAttention => {
            for l in 1..=l_count {
                let m = cfg.strategy.k.min(l);
                if m < 2 {
                    continue;
                }
                for i in 2..=m {
                    for w in ["wk", "wv", "wo"] {
                        per_tensor.insert(format!("{side}.fuse.mla{l}.att{i}.{w}"), d * d);
                    }
                }
                count_agg_tensors(cfg, format!("{side}.fuse.mla{l}.agg"), m, per_tensor);
            }
        }
    }
}

/// Closed-form parameter count of one aggregation node of the given arity.
fn agg_node_params(cfg: &ModelConfig, arity: usize) -> usize {
    let d = cfg.d_model;
    let fa = cfg.d_ff_agg;
    match cfg.strategy.agg_fn {
        AggFn::SigmoidFfn | AggFn::ReluFfn => arity * d * fa + fa + fa * d + d + 2 * d,
        AggFn::SelfAttention => 2 * d,
    }
}

/// Closed-form parameter delta of the configured strategy over Vanilla.
pub fn fusion_delta_closed_form(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    let d = cfg.d_model;
    let per_stack = |l_count: usize| -> usize {
        match cfg.strategy.kind {
            FusionKind::Vanilla | FusionKind::Dense => 0,
            FusionKind::Linear => l_count * d * d,
            FusionKind::Iterative => (l_count - 1) * agg_node_params(cfg, 2),
            FusionKind::Hierarchical => {
                agg_node_params(cfg, 2) + (l_count / 2 - 1) * agg_node_params(cfg, 3)
            }
            FusionKind::MultiLayerAttention => (1..=l_count)
                .map(|l| {
                    let m = cfg.strategy.k.min(l);
                    if m < 2 {
                        0
                    } else {
                        (m - 1) * 3 * d * d + agg_node_params(cfg, m)
                    }
                })
                .sum(),
        }
    };
    Ok(per_stack(cfg.l_enc) + per_stack(cfg.l_dec))
}

/// Closed-form total for the Vanilla backbone shared by every strategy.
pub fn vanilla_total_closed_form(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let ffn = d * f + f + f * d + d;
    let enc_layer = 4 * d * d + ffn + 2 * (2 * d);
    let dec_layer = 8 * d * d + ffn + 3 * (2 * d);
    (cfg.vocab_src + cfg.vocab_tgt) * d + d * cfg.vocab_tgt
        + cfg.l_enc * enc_layer
        + cfg.l_dec * dec_layer
}

/// `total(strategy) - total(vanilla)` via the per-tensor enumeration.
pub fn strategy_delta(cfg: &ModelConfig) -> Result<usize> {
    let with = count_params(cfg)?.total;
    let mut vanilla = cfg.clone();
    vanilla.strategy = FusionStrategy::vanilla();
    let without = count_params(&vanilla)?.total;
    Ok(with - without)
}
