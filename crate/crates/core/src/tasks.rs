//! Deterministic synthetic sequence-to-sequence tasks.
//!
//! Three mappings at increasing alignment difficulty: copy (identity),
//! reverse (monotone-inverted), and sort (content-dependent reordering).
//! Ids 0/1/2 are reserved for PAD/BOS/EOS; task tokens start at 3.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First id available to task tokens.
pub const FIRST_TOKEN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
        }
    }

    pub fn apply(&self, src: &[usize]) -> Vec<usize> {
        let mut tgt = src.to_vec();
        match self {
            TaskKind::Copy => {}
            TaskKind::Reverse => tgt.reverse(),
            TaskKind::Sort => tgt.sort_unstable(),
        }
        tgt
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self, max_len: usize) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(
                "task vocab_size must be at least 4 (ids 0..2 are reserved)".into(),
            ));
        }
        if self.len_min < 1 || self.len_min > self.len_max {
            return Err(Error::Config(format!(
                "invalid length range {}..{}",
                self.len_min, self.len_max
            )));
        }
        if self.len_max > max_len.saturating_sub(2) {
            return Err(Error::Config(format!(
                "len_max {} leaves no room for BOS/EOS under max_len {max_len}",
                self.len_max
            )));
        }
        Ok(())
    }
}

pub type Pair = (Vec<usize>, Vec<usize>);

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Pair>,
    pub dev: Vec<Pair>,
    pub test: Vec<Pair>,
}

/// One padded batch. `tgt_in` is the BOS-prefixed decoder input, `tgt_out`
/// the EOS-suffixed prediction target; both share `tgt_keep` since they pad
/// at the same tail positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<usize>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub src_keep: Vec<bool>,
    pub tgt_keep: Vec<bool>,
}

fn sample_sequence(rng: &mut ChaCha8Rng, spec: &TaskSpec) -> Vec<usize> {
    let len = rng.gen_range(spec.len_min..=spec.len_max);
    (0..len)
        .map(|_| rng.gen_range(FIRST_TOKEN..spec.vocab_size))
        .collect()
}

/// Number of distinct source sequences the spec admits, saturating.
fn sequence_space(spec: &TaskSpec) -> usize {
    let alphabet = spec.vocab_size - FIRST_TOKEN;
    let mut total = 0usize;
    for len in spec.len_min..=spec.len_max {
        let mut count = 1usize;
        for _ in 0..len {
            count = count.saturating_mul(alphabet);
        }
        total = total.saturating_add(count);
    }
    total
}

/// Generate disjoint train/dev/test splits, deterministically in the seed.
/// Dev and test sources never appear in train; an impossible request (the
/// sequence space is too small) is an error suggesting a larger vocabulary
/// or length range.
pub fn generate(spec: &TaskSpec, max_len: usize) -> Result<Dataset> {
    spec.validate(max_len)?;
    let space = sequence_space(spec);
    if spec.n_train.saturating_add(spec.n_dev).saturating_add(spec.n_test) > space {
        return Err(Error::Config(format!(
            "task space holds only {space} distinct sequences; grow vocab_size or the length range"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::with_capacity(spec.n_train);
    let mut train_srcs: BTreeSet<Vec<usize>> = BTreeSet::new();
    for _ in 0..spec.n_train {
        let src = sample_sequence(&mut rng, spec);
        train_srcs.insert(src.clone());
        let tgt = spec.kind.apply(&src);
        train.push((src, tgt));
    }
    let mut held_out = |n: usize| -> Result<Vec<Pair>> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        let budget = 1000 + 200 * n;
        while out.len() < n {
            if attempts > budget {
                return Err(Error::Config(format!(
                    "could not draw {n} sequences disjoint from train; grow vocab_size or the length range"
                )));
            }
            attempts += 1;
            let src = sample_sequence(&mut rng, spec);
            if train_srcs.contains(&src) {
                continue;
            }
            let tgt = spec.kind.apply(&src);
            out.push((src, tgt));
        }
        Ok(out)
    };
    let dev = held_out(spec.n_dev)?;
    let test = held_out(spec.n_test)?;
    Ok(Dataset { train, dev, test })
}

/// Chunk pairs into fixed-size batches in their given order, padding each
/// batch to its own max lengths.
pub fn batchify(pairs: &[Pair], batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    pairs.chunks(batch_size).map(make_batch).collect()
}

fn make_batch(pairs: &[Pair]) -> Result<Batch> {
    let b = pairs.len();
    let src_len = pairs.iter().map(|(s, _)| s.len()).max().unwrap_or(0);
    let tgt_max = pairs.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
    let tgt_len = tgt_max + 1; // room for BOS in tgt_in / EOS in tgt_out
    let mut batch = Batch {
        batch: b,
        src_len,
        tgt_len,
        src: vec![PAD; b * src_len],
        tgt_in: vec![PAD; b * tgt_len],
        tgt_out: vec![PAD; b * tgt_len],
        src_keep: vec![false; b * src_len],
        tgt_keep: vec![false; b * tgt_len],
    };
    for (row, (src, tgt)) in pairs.iter().enumerate() {
        for (j, &tok) in src.iter().enumerate() {
            batch.src[row * src_len + j] = tok;
            batch.src_keep[row * src_len + j] = true;
        }
        batch.tgt_in[row * tgt_len] = BOS;
        for (j, &tok) in tgt.iter().enumerate() {
            batch.tgt_in[row * tgt_len + j + 1] = tok;
            batch.tgt_out[row * tgt_len + j] = tok;
        }
        batch.tgt_out[row * tgt_len + tgt.len()] = EOS;
        for j in 0..=tgt.len() {
            batch.tgt_keep[row * tgt_len + j] = true;
        }
    }
    Ok(batch)
}

/// One pair as a dataset line: space-separated ids, `|||` separator.
pub fn format_pair(pair: &Pair) -> String {
    let fmt = |ids: &[usize]| {
        ids.iter()
            .map(|i| format!("{i}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    format!("{} ||| {}", fmt(&pair.0), fmt(&pair.1))
}

pub fn parse_pair(line: &str) -> Result<Pair> {
    let (src, tgt) = line
        .split_once("|||")
        .ok_or_else(|| Error::Config(format!("dataset line missing '|||': {line}")))?;
    let parse = |part: &str| -> Result<Vec<usize>> {
        part.split_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad token id '{tok}' in dataset line")))
            })
            .collect()
    };
    Ok((parse(src)?, parse(tgt)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            vocab_size: 16,
            len_min: 3,
            len_max: 8,
            n_train: 64,
            n_dev: 16,
            n_test: 16,
            seed: 7,
        }
    }

    #[test]
    fn mappings() {
        assert_eq!(TaskKind::Copy.apply(&[5, 7, 3]), vec![5, 7, 3]);
        assert_eq!(TaskKind::Reverse.apply(&[5, 7, 3]), vec![3, 7, 5]);
        assert_eq!(TaskKind::Sort.apply(&[5, 7, 3]), vec![3, 5, 7]);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let s = spec(TaskKind::Copy);
        let a = generate(&s, 32).unwrap();
        let b = generate(&s, 32).unwrap();
        assert_eq!(a, b);
        // Token histograms of independently regenerated sets match exactly.
        let hist = |ds: &Dataset| {
            let mut h = [0usize; 16];
            for (src, _) in &ds.train {
                for &t in src {
                    h[t] += 1;
                }
            }
            h
        };
        assert_eq!(hist(&a), hist(&b));
    }

    #[test]
    fn dev_test_disjoint_from_train() {
        let ds = generate(&spec(TaskKind::Reverse), 32).unwrap();
        let train: BTreeSet<&Vec<usize>> = ds.train.iter().map(|(s, _)| s).collect();
        for (src, _) in ds.dev.iter().chain(ds.test.iter()) {
            assert!(!train.contains(src));
        }
    }

    #[test]
    fn tiny_space_errors_with_suggestion() {
        let s = TaskSpec {
            kind: TaskKind::Copy,
            vocab_size: 4,
            len_min: 1,
            len_max: 2,
            n_train: 10,
            n_dev: 2,
            n_test: 2,
            seed: 1,
        };
        // Only 1 + 1 = 2 distinct sequences exist over a 1-symbol alphabet.
        match generate(&s, 32) {
            Err(Error::Config(msg)) => assert!(msg.contains("vocab_size")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn single_pair_batch_has_no_padding_beyond_framing() {
        let pairs = vec![(vec![5, 7, 3], vec![5, 7, 3])];
        let batches = batchify(&pairs, 4).unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.src, vec![5, 7, 3]);
        assert_eq!(b.tgt_in, vec![BOS, 5, 7, 3]);
        assert_eq!(b.tgt_out, vec![5, 7, 3, EOS]);
        assert!(b.src_keep.iter().all(|k| *k));
        assert!(b.tgt_keep.iter().all(|k| *k));
    }

    #[test]
    fn mixed_lengths_pad_to_batch_max() {
        let pairs = vec![
            (vec![5, 7, 3], vec![3, 5, 7]),
            (vec![4, 4, 4, 4, 4], vec![4, 4, 4, 4, 4]),
        ];
        let batches = batchify(&pairs, 2).unwrap();
        let b = &batches[0];
        assert_eq!(b.src_len, 5);
        assert_eq!(&b.src[0..5], &[5, 7, 3, PAD, PAD]);
        assert_eq!(&b.src_keep[0..5], &[true, true, true, false, false]);
        assert_eq!(b.tgt_len, 6);
        assert_eq!(&b.tgt_in[0..6], &[BOS, 3, 5, 7, PAD, PAD]);
        assert_eq!(&b.tgt_out[0..6], &[3, 5, 7, EOS, PAD, PAD]);
    }

    #[test]
    fn line_codec_round_trip() {
        let pair = (vec![5, 7, 3], vec![3, 5, 7]);
        let line = format_pair(&pair);
        assert_eq!(line, "5 7 3 ||| 3 5 7");
        assert_eq!(parse_pair(&line).unwrap(), pair);
        assert!(parse_pair("1 2 3").is_err());
    }
}
