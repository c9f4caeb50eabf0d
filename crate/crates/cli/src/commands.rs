//! Subcommand implementations.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};

use dfsq_core::analysis::{describe_dag, exploitation_scores};
use dfsq_core::fusion::{count_params, strategy_delta};
use dfsq_core::tasks::{generate, Dataset, Pair, TaskKind, TaskSpec};
use dfsq_core::tensor::{Precision, Real};
use dfsq_core::train::{
    evaluate, greedy_decode, metrics, model_grad_check, synthetic_batch, train,
    DecodeOptions, EvalMetrics, StopCriteria, TrainOptions,
};
use dfsq_core::{Model, ModelConfig};

use crate::checkpoint;
use crate::config::parse_config;
use crate::csvlog;
use crate::dataio;

/// NaN losses, non-finite gradients, and failed gradient checks exit with
/// code 2 instead of the generic 1.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for NumericalFailure {}

const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text)
}

fn eval_threads() -> usize {
    std::env::var("DFSQ_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|n| *n >= 1)
        .unwrap_or(1)
}

/// Evaluate with up to `threads` workers, chunked at batch boundaries so
/// results are identical to a serial run.
fn parallel_evaluate<T: Real>(
    model: &Model<T>,
    pairs: &[Pair],
    batch_size: usize,
    threads: usize,
) -> Result<EvalMetrics> {
    if threads <= 1 || pairs.len() <= batch_size {
        return evaluate(model, pairs, batch_size).map_err(|e| anyhow!("{e}"));
    }
    let chunks: Vec<&[Pair]> = pairs.chunks(batch_size.max(1)).collect();
    let per_thread = chunks.len().div_ceil(threads);
    let groups: Vec<&[&[Pair]]> = chunks.chunks(per_thread).collect();
    let opts = DecodeOptions::new(model.config.max_len);
    let mut hyps: Vec<Vec<usize>> = Vec::with_capacity(pairs.len());
    let results: Vec<Result<Vec<Vec<usize>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = groups
            .iter()
            .map(|group| {
                scope.spawn(|| {
                    let mut out = Vec::new();
                    for chunk in group.iter() {
                        let srcs: Vec<Vec<usize>> =
                            chunk.iter().map(|(s, _)| s.clone()).collect();
                        out.extend(
                            greedy_decode(model, &srcs, &opts).map_err(|e| anyhow!("{e}"))?,
                        );
                    }
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("decode worker panicked"))
            .collect()
    });
    for r in results {
        hyps.extend(r?);
    }
    if hyps.iter().all(|h| h.is_empty()) {
        eprintln!("warning: every hypothesis is empty; BLEU is 0");
    }
    let refs: Vec<Vec<usize>> = pairs.iter().map(|(_, t)| t.clone()).collect();
    metrics(&hyps, &refs).map_err(|e| anyhow!("{e}"))
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    Copy,
    Reverse,
    Sort,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> TaskKind {
        match t {
            TaskArg::Copy => TaskKind::Copy,
            TaskArg::Reverse => TaskKind::Reverse,
            TaskArg::Sort => TaskKind::Sort,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Dev,
    Test,
}

/// Synthetic-task shape shared by `train` and `eval`. Regenerating with the
/// same flags and seed reproduces the same splits byte for byte.
#[derive(Args, Debug, Clone)]
pub struct TaskFlags {
    /// Task vocabulary (ids 0..2 reserved; tokens start at 3).
    #[arg(long, default_value_t = 16)]
    pub task_vocab: usize,
    #[arg(long, default_value_t = 3)]
    pub len_min: usize,
    #[arg(long, default_value_t = 10)]
    pub len_max: usize,
    #[arg(long, default_value_t = 2048)]
    pub train_pairs: usize,
    #[arg(long, default_value_t = 256)]
    pub dev_pairs: usize,
    #[arg(long, default_value_t = 256)]
    pub test_pairs: usize,
    /// Dataset seed; defaults to the model seed from the config.
    #[arg(long)]
    pub task_seed: Option<u64>,
}

impl TaskFlags {
    fn spec(&self, kind: TaskKind, config: &ModelConfig) -> Result<TaskSpec> {
        if self.task_vocab > config.vocab_src || self.task_vocab > config.vocab_tgt {
            bail!(
                "task vocab {} exceeds the model vocabularies ({}, {})",
                self.task_vocab,
                config.vocab_src,
                config.vocab_tgt
            );
        }
        Ok(TaskSpec {
            kind,
            vocab_size: self.task_vocab,
            len_min: self.len_min,
            len_max: self.len_max,
            n_train: self.train_pairs,
            n_dev: self.dev_pairs,
            n_test: self.test_pairs,
            seed: self.task_seed.unwrap_or(config.seed),
        })
    }
}

fn generate_data(spec: &TaskSpec, config: &ModelConfig) -> Result<Dataset> {
    generate(spec, config.max_len).map_err(|e| anyhow!("{e}"))
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long)]
    pub steps: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub eval_every: u64,
    /// Schedule multiplier; peak learning rate is lr_scale / sqrt(warmup).
    #[arg(long, default_value_t = 0.06)]
    pub lr_scale: f64,
    #[arg(long, default_value_t = 400)]
    pub warmup: u64,
    /// Stop early once dev token accuracy reaches this value together with
    /// --stop-seq-acc.
    #[arg(long)]
    pub stop_tok_acc: Option<f64>,
    #[arg(long)]
    pub stop_seq_acc: Option<f64>,
    #[command(flatten)]
    pub task_flags: TaskFlags,
}

pub fn cmd_train(cmd: &TrainCmd) -> Result<()> {
    let config = load_config(&cmd.config)?;
    let spec = cmd.task_flags.spec(cmd.task.into(), &config)?;
    let data = generate_data(&spec, &config)?;
    fs::create_dir_all(&cmd.out)
        .with_context(|| format!("creating output dir {}", cmd.out.display()))?;
    dataio::write_pairs(&cmd.out.join("train.txt"), &data.train)?;
    dataio::write_pairs(&cmd.out.join("dev.txt"), &data.dev)?;
    dataio::write_pairs(&cmd.out.join("test.txt"), &data.test)?;

    let stop_at = match (cmd.stop_tok_acc, cmd.stop_seq_acc) {
        (Some(token_accuracy), Some(sequence_accuracy)) => Some(StopCriteria {
            token_accuracy,
            sequence_accuracy,
        }),
        (None, None) => None,
        _ => bail!("--stop-tok-acc and --stop-seq-acc must be given together"),
    };
    let opts = TrainOptions {
        steps: cmd.steps,
        eval_every: cmd.eval_every,
        batch_size: cmd.batch_size,
        adam: dfsq_core::train::AdamHyper {
            lr_scale: cmd.lr_scale,
            warmup: cmd.warmup,
            ..Default::default()
        },
        stop_at,
    };

    match config.precision {
        Precision::F32 => run_train::<f32>(&config, &data, &opts, &cmd.out),
        Precision::F64 => run_train::<f64>(&config, &data, &opts, &cmd.out),
    }
}

fn run_train<T: Real>(
    config: &ModelConfig,
    data: &Dataset,
    opts: &TrainOptions,
    out: &Path,
) -> Result<()> {
    let start = Instant::now();
    let mut clock = move || start.elapsed().as_secs_f64();
    let outcome =
        train::<T>(config, data, opts, &mut clock).map_err(|e| anyhow!("training failed: {e}"))?;

    fs::write(out.join("train_log.csv"), csvlog::train_log_csv(&outcome.report))
        .context("writing train_log.csv")?;
    checkpoint::save(&out.join("checkpoint.dfsq"), &outcome.best)?;

    if let Some(last) = outcome.report.records.last() {
        println!(
            "step {} loss {:.4} dev_tok_acc {:.4} dev_seq_acc {:.4} dev_bleu {:.2} ({:.1}s)",
            last.step,
            last.loss,
            last.dev_token_accuracy,
            last.dev_sequence_accuracy,
            last.dev_bleu,
            outcome.report.total_wall_secs
        );
    }
    println!(
        "best checkpoint at step {} -> {}",
        outcome.best.step,
        out.join("checkpoint.dfsq").display()
    );
    if let Some(reason) = outcome.aborted {
        return Err(NumericalFailure(format!(
            "training aborted ({reason}); last good checkpoint retained"
        ))
        .into());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalCmd {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long, value_enum)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Score this dataset file instead of regenerating the split.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub task_flags: TaskFlags,
}

pub fn cmd_eval(cmd: &EvalCmd) -> Result<()> {
    let bytes = checkpoint::load_bytes(&cmd.ckpt)?;
    let config = checkpoint::peek_config(&bytes)?;
    let pairs = match &cmd.data {
        Some(path) => dataio::read_pairs(path)?,
        None => {
            let spec = cmd.task_flags.spec(cmd.task.into(), &config)?;
            let data = generate_data(&spec, &config)?;
            match cmd.split {
                SplitArg::Dev => data.dev,
                SplitArg::Test => data.test,
            }
        }
    };
    let pairs = &pairs;
    let m = match config.precision {
        Precision::F32 => eval_with::<f32>(&bytes, pairs, cmd.batch_size)?,
        Precision::F64 => eval_with::<f64>(&bytes, pairs, cmd.batch_size)?,
    };
    println!(
        "token_accuracy={} sequence_accuracy={} bleu={}",
        m.token_accuracy, m.sequence_accuracy, m.bleu4
    );
    Ok(())
}

fn eval_with<T: Real>(bytes: &[u8], pairs: &[Pair], batch_size: usize) -> Result<EvalMetrics> {
    let ckpt = checkpoint::decode::<T>(bytes)?;
    let model = ckpt.into_model().map_err(|e| anyhow!("{e}"))?;
    parallel_evaluate(&model, pairs, batch_size, eval_threads())
}

#[derive(Args, Debug)]
pub struct DecodeCmd {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

pub fn cmd_decode(cmd: &DecodeCmd) -> Result<()> {
    let bytes = checkpoint::load_bytes(&cmd.ckpt)?;
    let config = checkpoint::peek_config(&bytes)?;
    let srcs = dataio::read_sources(&cmd.input)?;
    let outputs = match config.precision {
        Precision::F32 => decode_with::<f32>(&bytes, &srcs, cmd.batch_size)?,
        Precision::F64 => decode_with::<f64>(&bytes, &srcs, cmd.batch_size)?,
    };
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    for out in outputs {
        let line: Vec<String> = out.iter().map(|t| t.to_string()).collect();
        use std::io::Write as _;
        match writeln!(w, "{}", line.join(" ")) {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => return Ok(()),
            other => other.context("writing decoded ids")?,
        }
    }
    Ok(())
}

fn decode_with<T: Real>(
    bytes: &[u8],
    srcs: &[Vec<usize>],
    batch_size: usize,
) -> Result<Vec<Vec<usize>>> {
    let ckpt = checkpoint::decode::<T>(bytes)?;
    let model = ckpt.into_model().map_err(|e| anyhow!("{e}"))?;
    let opts = DecodeOptions::new(model.config.max_len);
    let mut out = Vec::with_capacity(srcs.len());
    for chunk in srcs.chunks(batch_size.max(1)) {
        out.extend(greedy_decode(&model, chunk, &opts).map_err(|e| anyhow!("{e}"))?);
    }
    Ok(out)
}

#[derive(Args, Debug)]
pub struct GradCheckCmd {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 5)]
    pub len: usize,
}

pub fn cmd_gradcheck(cmd: &GradCheckCmd) -> Result<()> {
    let mut config = load_config(&cmd.config)?;
    // Finite differences are meaningless at f32; force 64-bit.
    config.precision = Precision::F64;
    let batch = synthetic_batch(config.vocab_src.min(config.vocab_tgt), cmd.batch, cmd.len, config.seed);
    let report = model_grad_check(&config, &batch, cmd.eps).map_err(|e| anyhow!("{e}"))?;
    println!(
        "max_rel_err={:.3e} worst={}[{}] analytic={:.6e} numeric={:.6e}",
        report.max_rel_err,
        report.worst_param,
        report.worst_index,
        report.analytic,
        report.numeric
    );
    if report.max_rel_err >= GRAD_CHECK_TOLERANCE {
        let mut worst: Vec<&(String, f64)> = report
            .per_param
            .iter()
            .filter(|(_, e)| *e >= GRAD_CHECK_TOLERANCE)
            .collect();
        worst.sort_by(|a, b| b.1.total_cmp(&a.1));
        for (name, err) in worst.iter().take(10) {
            eprintln!("  fail {name}: {err:.3e}");
        }
        return Err(NumericalFailure(format!(
            "gradient check failed: {:.3e} >= {GRAD_CHECK_TOLERANCE:e}",
            report.max_rel_err
        ))
        .into());
    }
    println!("gradient check passed (tolerance {GRAD_CHECK_TOLERANCE:e})");
    Ok(())
}

#[derive(Args, Debug)]
pub struct InspectDagCmd {
    #[arg(long)]
    pub config: PathBuf,
}

pub fn cmd_inspect_dag(cmd: &InspectDagCmd) -> Result<()> {
    let config = load_config(&cmd.config)?;
    let enc = describe_dag(config.l_enc, &config.strategy).map_err(|e| anyhow!("{e}"))?;
    let dec = describe_dag(config.l_dec, &config.strategy).map_err(|e| anyhow!("{e}"))?;
    let doc = serde_json::json!({ "encoder": enc, "decoder": dec });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

#[derive(Args, Debug)]
pub struct InspectExploitationCmd {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_inspect_exploitation(cmd: &InspectExploitationCmd) -> Result<()> {
    let bytes = checkpoint::load_bytes(&cmd.ckpt)?;
    let config = checkpoint::peek_config(&bytes)?;
    let rows = match config.precision {
        Precision::F32 => {
            let model = checkpoint::decode::<f32>(&bytes)?.into_model().map_err(|e| anyhow!("{e}"))?;
            exploitation_scores(&model).map_err(|e| anyhow!("{e}"))?
        }
        Precision::F64 => {
            let model = checkpoint::decode::<f64>(&bytes)?.into_model().map_err(|e| anyhow!("{e}"))?;
            exploitation_scores(&model).map_err(|e| anyhow!("{e}"))?
        }
    };
    fs::write(&cmd.out, csvlog::exploitation_csv(&rows))
        .with_context(|| format!("writing {}", cmd.out.display()))?;
    println!("wrote {} rows to {}", rows.len(), cmd.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct InspectParamsCmd {
    #[arg(long)]
    pub config: PathBuf,
}

pub fn cmd_inspect_params(cmd: &InspectParamsCmd) -> Result<()> {
    let config = load_config(&cmd.config)?;
    let report = count_params(&config).map_err(|e| anyhow!("{e}"))?;
    for (name, count) in &report.per_tensor {
        println!("{name} {count}");
    }
    let delta = strategy_delta(&config).map_err(|e| anyhow!("{e}"))?;
    println!("total {}", report.total);
    println!(
        "delta_vs_vanilla {delta} (strategy {})",
        config.strategy.kind.name()
    );
    Ok(())
}
