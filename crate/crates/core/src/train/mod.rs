//! Training loop, batch loss assembly, checkpoints, and the full-model
//! gradient verification harness.

mod adam;
mod decode;
mod metrics;

pub use adam::{adam_step, lr_at, AdamHyper, OptimState};
pub use decode::{greedy_decode, greedy_decode_reforward, DecodeOptions};
pub use metrics::{corpus_bleu, metrics, EvalMetrics};

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diversity::{diversity_loss, total_loss};
use crate::error::{Error, Result};
use crate::fusion::{run_decoder_stack, run_encoder_stack, LayerStates, StackHooks};
use crate::model::{causal_pad_mask, embed, key_pad_mask, Model, ModelConfig};
use crate::tasks::{batchify, Batch, Dataset, Pair};
use crate::tensor::{fd_error, fd_noise_floor, GradCheckReport, Real, Tape, Tensor, TensorData};

/// One full differentiable pass: logits plus the layer states of both
/// stacks (the fusion strategies decide which state is final).
pub struct ForwardOut {
    pub logits: Tensor,
    pub enc: LayerStates,
    pub dec: LayerStates,
}

pub fn batch_forward<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    batch: &Batch,
    hooks: StackHooks,
) -> Result<ForwardOut> {
    let cfg = &model.config;
    let (b, ts, tt) = (batch.batch, batch.src_len, batch.tgt_len);
    let h0e = embed(tape, &model.src_embed, &batch.src, b, ts, cfg.max_len, 0, true)?;
    let src_mask = key_pad_mask(b, ts, &batch.src_keep)?;
    let enc = run_encoder_stack(tape, &model.enc_ctx(hooks), h0e, Some(&src_mask))?;

    let h0d = embed(tape, &model.tgt_embed, &batch.tgt_in, b, tt, cfg.max_len, 0, true)?;
    let self_mask = causal_pad_mask(b, tt, tt, &batch.tgt_keep)?;
    let dec = run_decoder_stack(
        tape,
        &model.dec_ctx(hooks),
        h0d,
        enc.final_state,
        Some(&self_mask),
        Some(&src_mask),
        None,
    )?;
    let proj = tape.param(&model.out_proj);
    let logits = tape.matmul(dec.final_state, proj)?;
    Ok(ForwardOut { logits, enc, dec })
}

/// Scalar pieces of the training objective, all still on the tape.
pub struct LossParts {
    pub total: Tensor,
    pub nll: Tensor,
    pub div_enc: Tensor,
    pub div_dec: Tensor,
    pub forward: ForwardOut,
}

/// NLL over unpadded target positions minus `lambda/2` times the summed
/// encoder and decoder diversity. Stacks with a single layer have no
/// adjacent pair and contribute zero diversity.
pub fn batch_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    batch: &Batch,
    lambda: f64,
    hooks: StackHooks,
) -> Result<LossParts> {
    let forward = batch_forward(tape, model, batch, hooks)?;
    let nll = tape.cross_entropy(forward.logits, &batch.tgt_out, &batch.tgt_keep)?;
    let div_enc = if model.config.l_enc >= 2 {
        diversity_loss(tape, &forward.enc, &batch.src_keep)?
    } else {
        tape.scalar(T::zero())
    };
    let div_dec = if model.config.l_dec >= 2 {
        diversity_loss(tape, &forward.dec, &batch.tgt_keep)?
    } else {
        tape.scalar(T::zero())
    };
    let total = total_loss(tape, nll, div_enc, div_dec, lambda)?;
    Ok(LossParts {
        total,
        nll,
        div_enc,
        div_dec,
        forward,
    })
}

/// Serializable snapshot: configuration echo, training step, RNG state
/// (seed plus stream position), and every parameter tensor by name.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub step: u64,
    pub rng_word_pos: u128,
    pub tensors: BTreeMap<String, TensorData<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn from_model(model: &Model<T>, step: u64, rng_word_pos: u128) -> Self {
        let tensors = model
            .named_params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        Self {
            config: model.config.clone(),
            step,
            rng_word_pos,
            tensors,
        }
    }

    /// Rebuild a model carrying exactly these tensors. Every parameter the
    /// configuration allocates must be present with the right shape.
    pub fn into_model(&self) -> Result<Model<T>> {
        let mut model = Model::init(&self.config)?;
        for p in model.named_params_mut() {
            let stored = self.tensors.get(&p.name).ok_or_else(|| {
                Error::Config(format!("checkpoint is missing parameter {}", p.name))
            })?;
            if stored.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint_load",
                    lhs: stored.shape().to_vec(),
                    rhs: p.value.shape().to_vec(),
                });
            }
            p.value = stored.clone();
        }
        Ok(model)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StopCriteria {
    pub token_accuracy: f64,
    pub sequence_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: u64,
    pub eval_every: u64,
    pub batch_size: usize,
    pub adam: AdamHyper,
    /// Stop early once a dev evaluation clears both thresholds.
    pub stop_at: Option<StopCriteria>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            eval_every: 100,
            batch_size: 32,
            adam: AdamHyper::default(),
            stop_at: None,
        }
    }
}

/// One evaluation-time row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub nll: f64,
    pub div_enc: f64,
    pub div_dec: f64,
    pub dev_token_accuracy: f64,
    pub dev_sequence_accuracy: f64,
    pub dev_bleu: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
    pub total_wall_secs: f64,
}

pub struct TrainOutcome<T: Real> {
    pub model: Model<T>,
    pub report: TrainReport,
    /// Snapshot at the best dev sequence accuracy seen.
    pub best: Checkpoint<T>,
    /// Set when training stopped on a non-finite loss or gradient; the best
    /// checkpoint so far is still returned.
    pub aborted: Option<String>,
}

/// Greedy-decode a pair list in fixed-size chunks and score it.
pub fn evaluate<T: Real>(model: &Model<T>, pairs: &[Pair], batch_size: usize) -> Result<EvalMetrics> {
    let mut hyps = Vec::with_capacity(pairs.len());
    let opts = DecodeOptions::new(model.config.max_len);
    for chunk in pairs.chunks(batch_size.max(1)) {
        let srcs: Vec<Vec<usize>> = chunk.iter().map(|(s, _)| s.clone()).collect();
        hyps.extend(greedy_decode(model, &srcs, &opts)?);
    }
    let refs: Vec<Vec<usize>> = pairs.iter().map(|(_, t)| t.clone()).collect();
    metrics(&hyps, &refs)
}

/// Mean adjacent-layer cosine-squared similarity of the encoder backbone
/// over a pair list: `1 - mean pair distance`. The quantity the diversity
/// regularizer pushes down.
pub fn mean_adjacent_cos2<T: Real>(
    model: &Model<T>,
    pairs: &[Pair],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for batch in batchify(pairs, batch_size.max(1))? {
        let mut tape = Tape::<T>::new();
        let h0 = embed(
            &mut tape,
            &model.src_embed,
            &batch.src,
            batch.batch,
            batch.src_len,
            model.config.max_len,
            0,
            true,
        )?;
        let mask = key_pad_mask(batch.batch, batch.src_len, &batch.src_keep)?;
        let enc = run_encoder_stack(
            &mut tape,
            &model.enc_ctx(StackHooks::default()),
            h0,
            Some(&mask),
        )?;
        let div = diversity_loss(&mut tape, &enc, &batch.src_keep)?;
        total += 1.0 - tape.item(div).to_f64();
        n += 1;
    }
    Ok(total / n.max(1) as f64)
}

/// Train a freshly initialized model on the task data. Deterministic for a
/// fixed config and seed: batches cycle in generation order and evaluation
/// runs single-threaded. `clock` supplies wall seconds for the report and
/// never influences the math.
pub fn train<T: Real>(
    config: &ModelConfig,
    data: &Dataset,
    opts: &TrainOptions,
    clock: &mut dyn FnMut() -> f64,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if data.train.is_empty() || data.dev.is_empty() {
        return Err(Error::Config("training needs nonempty train and dev sets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::<T>::init_with_rng(config, &mut rng)?;
    let rng_word_pos = rng.get_word_pos();

    let batches = batchify(&data.train, opts.batch_size)?;
    let mut state = OptimState::<T>::new();
    let start = clock();
    let mut report = TrainReport::default();

    // Baseline evaluation before any update; also seeds the best snapshot
    // so an immediate abort still retains a checkpoint.
    let dev0 = evaluate(&model, &data.dev, opts.batch_size)?;
    let parts0 = loss_values(&model, &batches[0], config.lambda_div)?;
    report.records.push(TrainRecord {
        step: 0,
        loss: parts0.0,
        nll: parts0.1,
        div_enc: parts0.2,
        div_dec: parts0.3,
        dev_token_accuracy: dev0.token_accuracy,
        dev_sequence_accuracy: dev0.sequence_accuracy,
        dev_bleu: dev0.bleu4,
        wall_secs: clock() - start,
    });
    let mut best = Checkpoint::from_model(&model, 0, rng_word_pos);
    let mut best_seq_acc = dev0.sequence_accuracy;

    let mut aborted = None;
    'steps: for step in 1..=opts.steps {
        let batch = &batches[((step - 1) as usize) % batches.len()];
        let mut tape = Tape::<T>::new();
        let parts = batch_loss(&mut tape, &model, batch, config.lambda_div, StackHooks::default())?;
        let loss_val = tape.item(parts.total).to_f64();
        if !loss_val.is_finite() {
            aborted = Some(Error::NonFiniteLoss { step }.to_string());
            break 'steps;
        }
        tape.backward(parts.total)?;
        let grads = tape.param_grads();
        let nll_val = tape.item(parts.nll).to_f64();
        let div_enc_val = tape.item(parts.div_enc).to_f64();
        let div_dec_val = tape.item(parts.div_dec).to_f64();
        drop(tape);
        if let Err(e) = adam_step(&mut model, &grads, &mut state, &opts.adam) {
            aborted = Some(e.to_string());
            break 'steps;
        }

        let eval_now = step == opts.steps || (opts.eval_every > 0 && step % opts.eval_every == 0);
        if eval_now {
            let dev = evaluate(&model, &data.dev, opts.batch_size)?;
            report.records.push(TrainRecord {
                step,
                loss: loss_val,
                nll: nll_val,
                div_enc: div_enc_val,
                div_dec: div_dec_val,
                dev_token_accuracy: dev.token_accuracy,
                dev_sequence_accuracy: dev.sequence_accuracy,
                dev_bleu: dev.bleu4,
                wall_secs: clock() - start,
            });
            if dev.sequence_accuracy > best_seq_acc {
                best_seq_acc = dev.sequence_accuracy;
                best = Checkpoint::from_model(&model, step, rng_word_pos);
            }
            if let Some(stop) = &opts.stop_at {
                if dev.token_accuracy >= stop.token_accuracy
                    && dev.sequence_accuracy >= stop.sequence_accuracy
                {
                    break 'steps;
                }
            }
        }
    }

    report.total_wall_secs = clock() - start;
    Ok(TrainOutcome {
        model,
        report,
        best,
        aborted,
    })
}

/// Forward-only loss values (total, nll, div_enc, div_dec).
fn loss_values<T: Real>(model: &Model<T>, batch: &Batch, lambda: f64) -> Result<(f64, f64, f64, f64)> {
    let mut tape = Tape::<T>::new();
    let parts = batch_loss(&mut tape, model, batch, lambda, StackHooks::default())?;
    Ok((
        tape.item(parts.total).to_f64(),
        tape.item(parts.nll).to_f64(),
        tape.item(parts.div_enc).to_f64(),
        tape.item(parts.div_dec).to_f64(),
    ))
}

/// Verify the tape gradients of the full training loss, parameter by
/// parameter, against central differences at f64. Meant for tiny
/// configurations; cost is two forwards per parameter element.
pub fn model_grad_check(config: &ModelConfig, batch: &Batch, eps: f64) -> Result<GradCheckReport> {
    if config.d_model > 8 || config.l_enc > 4 || config.l_dec > 4 {
        return Err(Error::Config(
            "gradient checking is restricted to tiny configurations (d_model <= 8, L <= 4)".into(),
        ));
    }
    let mut model = Model::<f64>::init(config)?;
    let lambda = config.lambda_div;

    let mut tape = Tape::<f64>::new();
    let parts = batch_loss(&mut tape, &model, batch, lambda, StackHooks::default())?;
    let noise_floor = fd_noise_floor(tape.item(parts.total), eps);
    tape.backward(parts.total)?;
    let names: Vec<String> = model.named_params().iter().map(|p| p.name.clone()).collect();
    let analytic: Vec<Vec<f64>> = names
        .iter()
        .map(|n| tape.param_grad(n).expect("registered during forward"))
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        noise_floor,
        per_param: Vec::new(),
    };
    for (pi, name) in names.iter().enumerate() {
        let numel = model.named_params()[pi].value.numel();
        let mut param_worst = 0.0f64;
        for j in 0..numel {
            let orig = model.named_params()[pi].value.data()[j];
            model.named_params_mut()[pi].value.data_mut()[j] = orig + eps;
            let plus = loss_values(&model, batch, lambda)?.0;
            model.named_params_mut()[pi].value.data_mut()[j] = orig - eps;
            let minus = loss_values(&model, batch, lambda)?.0;
            model.named_params_mut()[pi].value.data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = fd_error(analytic[pi][j], numeric, noise_floor);
            if err > param_worst {
                param_worst = err;
            }
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = name.clone();
                report.worst_index = j;
                report.analytic = analytic[pi][j];
                report.numeric = numeric;
            }
        }
        report.per_param.push((name.clone(), param_worst));
    }
    Ok(report)
}

/// A deterministic batch of random task-like data, for verification
/// harnesses that need inputs but no dataset.
pub fn synthetic_batch(vocab: usize, batch: usize, len: usize, seed: u64) -> Batch {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<Pair> = (0..batch)
        .map(|_| {
            let src: Vec<usize> = (0..len)
                .map(|_| rng.gen_range(crate::tasks::FIRST_TOKEN..vocab))
                .collect();
            let tgt = src.clone();
            (src, tgt)
        })
        .collect();
    batchify(&pairs, batch).expect("one batch")[0].clone()
}
