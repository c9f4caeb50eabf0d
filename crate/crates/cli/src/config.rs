//! Flat `key = value` model configuration files.
//!
//! One key per line, `#` starts a comment, unknown keys are errors. Keys
//! match the configuration field names; the strategy's own knobs (`k`,
//! `agg_fn`, `residual_mode`) are flattened alongside. Missing keys keep
//! the defaults printed by `dfsq inspect params --config /dev/null`.

use anyhow::{anyhow, bail, Context, Result};

use dfsq_core::tensor::Precision;
use dfsq_core::{AggFn, FusionKind, FusionStrategy, ModelConfig, ResidualMode};

pub fn default_config() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        d_ff_agg: 32,
        l_enc: 4,
        l_dec: 4,
        vocab_src: 16,
        vocab_tgt: 16,
        max_len: 32,
        strategy: FusionStrategy::vanilla(),
        lambda_div: 0.0,
        ln_eps: 1e-5,
        seed: 1,
        precision: Precision::F32,
        dropout: 0.0,
    }
}

pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut cfg = default_config();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected 'key = value', got '{raw}'", lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        apply_key(&mut cfg, key, value)
            .with_context(|| format!("line {}: key '{key}'", lineno + 1))?;
    }
    cfg.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(cfg)
}

fn apply_key(cfg: &mut ModelConfig, key: &str, value: &str) -> Result<()> {
    let as_usize = || -> Result<usize> {
        value
            .parse::<usize>()
            .with_context(|| format!("'{value}' is not a nonnegative integer"))
    };
    let as_f64 = || -> Result<f64> {
        value
            .parse::<f64>()
            .with_context(|| format!("'{value}' is not a number"))
    };
    match key {
        "d_model" => cfg.d_model = as_usize()?,
        "n_heads" => cfg.n_heads = as_usize()?,
        "d_ff" => cfg.d_ff = as_usize()?,
        "d_ff_agg" => cfg.d_ff_agg = as_usize()?,
        "l_enc" => cfg.l_enc = as_usize()?,
        "l_dec" => cfg.l_dec = as_usize()?,
        "vocab_src" => cfg.vocab_src = as_usize()?,
        "vocab_tgt" => cfg.vocab_tgt = as_usize()?,
        "max_len" => cfg.max_len = as_usize()?,
        "lambda_div" => cfg.lambda_div = as_f64()?,
        "ln_eps" => cfg.ln_eps = as_f64()?,
        "dropout" => cfg.dropout = as_f64()?,
        "seed" => {
            cfg.seed = value
                .parse::<u64>()
                .with_context(|| format!("'{value}' is not a seed"))?
        }
        "strategy" => {
            cfg.strategy.kind = match value {
                "vanilla" => FusionKind::Vanilla,
                "dense" => FusionKind::Dense,
                "linear" => FusionKind::Linear,
                "iterative" => FusionKind::Iterative,
                "hierarchical" => FusionKind::Hierarchical,
                "multi_layer_attention" => FusionKind::MultiLayerAttention,
                other => bail!("unknown strategy '{other}'"),
            }
        }
        "k" => cfg.strategy.k = as_usize()?,
        "agg_fn" => {
            cfg.strategy.agg_fn = match value {
                "sigmoid_ffn" => AggFn::SigmoidFfn,
                "relu_ffn" => AggFn::ReluFfn,
                "self_attention" => AggFn::SelfAttention,
                other => bail!("unknown agg_fn '{other}'"),
            }
        }
        "residual_mode" => {
            cfg.strategy.residual_mode = match value {
                "none" => ResidualMode::None,
                "top" => ResidualMode::Top,
                "all" => ResidualMode::All,
                other => bail!("unknown residual_mode '{other}'"),
            }
        }
        "precision" => {
            cfg.precision = match value {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                other => bail!("unknown precision '{other}'"),
            }
        }
        other => bail!("unknown key '{other}' (config files are fail-closed)"),
    }
    Ok(())
}
