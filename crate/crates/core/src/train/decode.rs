//! Greedy decoding, incremental (cached states) and by full re-forward.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fusion::{run_decoder_stack, run_encoder_stack, StackCache, StackHooks};
use crate::model::{causal_mask, embed, key_pad_mask, Model};
use crate::tasks::{BOS, EOS, PAD};
use crate::tensor::{Real, Tape, TensorData};

#[derive(Clone, Copy, Debug)]
pub struct DecodeOptions {
    /// Hard cap on generated tokens (also bounds decoder positions).
    pub max_len: usize,
    /// Testing aid: pretend the first step produced EOS, yielding empty
    /// outputs regardless of the model.
    pub force_eos_first: bool,
}

impl DecodeOptions {
    pub fn new(max_len: usize) -> Self {
        Self {
            max_len,
            force_eos_first: false,
        }
    }
}

struct SrcBatch<T: Real> {
    batch: usize,
    memory: TensorData<T>,
    src_keep: Vec<bool>,
}

/// Encode a batch of sources once; the fused final output is the
/// cross-attention memory for every decode step.
fn encode_sources<T: Real>(model: &Model<T>, srcs: &[Vec<usize>]) -> Result<SrcBatch<T>> {
    let b = srcs.len();
    if b == 0 {
        return Err(Error::Config("decode needs at least one source".into()));
    }
    let ts = srcs.iter().map(|s| s.len()).max().unwrap_or(0);
    if ts == 0 || ts > model.config.max_len {
        return Err(Error::Config(alloc::format!(
            "source lengths must be in 1..={}",
            model.config.max_len
        )));
    }
    let mut ids = vec![PAD; b * ts];
    let mut keep = vec![false; b * ts];
    for (row, src) in srcs.iter().enumerate() {
        for (j, &tok) in src.iter().enumerate() {
            ids[row * ts + j] = tok;
            keep[row * ts + j] = true;
        }
    }
    let mut tape = Tape::new();
    let h0 = embed(
        &mut tape,
        &model.src_embed,
        &ids,
        b,
        ts,
        model.config.max_len,
        0,
        true,
    )?;
    let pad = key_pad_mask(b, ts, &keep)?;
    let states = run_encoder_stack(&mut tape, &model.enc_ctx(StackHooks::default()), h0, Some(&pad))?;
    Ok(SrcBatch {
        batch: b,
        memory: tape.to_data(states.final_state),
        src_keep: keep,
    })
}

/// Greedy argmax decoding from BOS until EOS or `max_len`, caching decoder
/// states so each step only computes the newest position. Finished rows
/// keep feeding PAD; their later states never reach the returned outputs.
pub fn greedy_decode<T: Real>(
    model: &Model<T>,
    srcs: &[Vec<usize>],
    opts: &DecodeOptions,
) -> Result<Vec<Vec<usize>>> {
    let src = encode_sources(model, srcs)?;
    let b = src.batch;
    let d = model.config.d_model;
    let l_dec = model.config.l_dec;
    let agg_count = model.config.strategy.agg_node_count(l_dec);
    let mut cache = StackCache::<T>::empty(b, d, l_dec, agg_count);
    let memory_mask = key_pad_mask(b, src.memory.shape()[1], &src.src_keep)?;

    let mut current = vec![BOS; b];
    let mut done = vec![false; b];
    let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); b];

    for step in 0..opts.max_len.min(model.config.max_len) {
        let mut tape = Tape::new();
        let memory = tape.leaf(src.memory.clone());
        let h0 = embed(
            &mut tape,
            &model.tgt_embed,
            &current,
            b,
            1,
            model.config.max_len,
            step,
            true,
        )?;
        let states = run_decoder_stack(
            &mut tape,
            &model.dec_ctx(StackHooks::default()),
            h0,
            memory,
            None, // one query position sees its whole cached history
            Some(&memory_mask),
            Some(&cache),
        )?;
        let proj = tape.param(&model.out_proj);
        let logits = tape.matmul(states.final_state, proj)?;
        let next = pick_tokens(tape.data(logits), b, model.config.vocab_tgt, step, opts, &done);
        cache.extend(&tape, &states)?;

        for row in 0..b {
            if done[row] {
                continue;
            }
            if next[row] == EOS {
                done[row] = true;
            } else {
                outputs[row].push(next[row]);
            }
        }
        current = next
            .iter()
            .zip(done.iter())
            .map(|(&t, &fin)| if fin { PAD } else { t })
            .collect();
        if done.iter().all(|d| *d) {
            break;
        }
    }
    Ok(outputs)
}

/// Oracle path: re-run the decoder over the whole generated prefix at every
/// step. Must agree with [`greedy_decode`] token for token.
pub fn greedy_decode_reforward<T: Real>(
    model: &Model<T>,
    srcs: &[Vec<usize>],
    opts: &DecodeOptions,
) -> Result<Vec<Vec<usize>>> {
    let src = encode_sources(model, srcs)?;
    let b = src.batch;
    let memory_mask = key_pad_mask(b, src.memory.shape()[1], &src.src_keep)?;

    let mut prefix: Vec<Vec<usize>> = vec![vec![BOS]; b];
    let mut done = vec![false; b];
    let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); b];

    for step in 0..opts.max_len.min(model.config.max_len) {
        let tt = step + 1;
        let ids: Vec<usize> = prefix.iter().flat_map(|p| p.iter().copied()).collect();
        let mut tape = Tape::new();
        let memory = tape.leaf(src.memory.clone());
        let h0 = embed(
            &mut tape,
            &model.tgt_embed,
            &ids,
            b,
            tt,
            model.config.max_len,
            0,
            true,
        )?;
        let self_mask = causal_mask(tt, tt, 0)?;
        let states = run_decoder_stack(
            &mut tape,
            &model.dec_ctx(StackHooks::default()),
            h0,
            memory,
            Some(&self_mask),
            Some(&memory_mask),
            None,
        )?;
        let proj = tape.param(&model.out_proj);
        let logits = tape.matmul(states.final_state, proj)?; // [b, tt, V]
        let v = model.config.vocab_tgt;
        let last_rows: Vec<T> = (0..b)
            .flat_map(|row| {
                let base = (row * tt + tt - 1) * v;
                tape.data(logits)[base..base + v].to_vec()
            })
            .collect();
        let next = pick_tokens(&last_rows, b, v, step, opts, &done);

        for row in 0..b {
            if done[row] {
                prefix[row].push(PAD);
                continue;
            }
            if next[row] == EOS {
                done[row] = true;
                prefix[row].push(PAD);
            } else {
                outputs[row].push(next[row]);
                prefix[row].push(next[row]);
            }
        }
        if done.iter().all(|d| *d) {
            break;
        }
    }
    Ok(outputs)
}

fn pick_tokens<T: Real>(
    logits: &[T],
    batch: usize,
    vocab: usize,
    step: usize,
    opts: &DecodeOptions,
    done: &[bool],
) -> Vec<usize> {
    (0..batch)
        .map(|row| {
            if done[row] {
                return PAD;
            }
            if opts.force_eos_first && step == 0 {
                return EOS;
            }
            let row_logits = &logits[row * vocab..(row + 1) * vocab];
            let mut best = 0usize;
            for (i, v) in row_logits.iter().enumerate() {
                if *v > row_logits[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
