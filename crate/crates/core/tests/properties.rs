//! Property tests over the numeric invariants.

use proptest::collection::vec as pvec;
use proptest::prelude::*;

use dfsq_core::fusion::{fusion_delta_closed_form, strategy_delta};
use dfsq_core::tasks::{batchify, format_pair, parse_pair, Pair, BOS, EOS, PAD};
use dfsq_core::tensor::{Mask, Precision, Tape, TensorData};
use dfsq_core::{FusionKind, FusionStrategy, ModelConfig};

fn finite_unit() -> impl Strategy<Value = f64> {
    (-1.0f64..1.0).prop_filter("nonzero-ish rows", |v| v.abs() > 1e-6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Softmax rows sum to one over kept lanes and masked lanes are exactly
    /// zero, for any row count, width, and mask with one survivor per row.
    #[test]
    fn softmax_rows_normalize(
        rows in 1usize..5,
        n in 1usize..8,
        data in pvec(-10.0f64..10.0, 40),
        mask_bits in pvec(any::<bool>(), 40),
    ) {
        let total = rows * n;
        prop_assume!(total <= data.len());
        let mut keep = mask_bits[..total].to_vec();
        for r in 0..rows {
            if !keep[r * n..(r + 1) * n].iter().any(|k| *k) {
                keep[r * n] = true; // fully masked rows are an error by contract
            }
        }
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(TensorData::new(vec![rows, n], data[..total].to_vec()).unwrap());
        let mask = Mask::new(vec![rows, n], keep.clone()).unwrap();
        let y = tape.softmax_masked(x, Some(&mask)).unwrap();
        for r in 0..rows {
            let row = &tape.data(y)[r * n..(r + 1) * n];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            for i in 0..n {
                if !keep[r * n + i] {
                    prop_assert_eq!(row[i], 0.0);
                }
            }
        }
    }

    /// cos^2 is symmetric and invariant to nonzero scaling of either side.
    #[test]
    fn cosine_squared_symmetry_and_scaling(
        u in pvec(finite_unit(), 4),
        v in pvec(finite_unit(), 4),
        c in (-4.0f64..4.0).prop_filter("nonzero", |c| c.abs() > 1e-3),
    ) {
        let mut tape = Tape::<f64>::new();
        let tu = tape.leaf(TensorData::new(vec![4], u.clone()).unwrap());
        let tv = tape.leaf(TensorData::new(vec![4], v.clone()).unwrap());
        let tsu = tape.leaf(TensorData::new(vec![4], u.iter().map(|x| x * c).collect()).unwrap());
        let uv = tape.cosine_squared(tu, tv).unwrap();
        let vu = tape.cosine_squared(tv, tu).unwrap();
        let su = tape.cosine_squared(tsu, tv).unwrap();
        prop_assert!((tape.item(uv) - tape.item(vu)).abs() < 1e-9);
        prop_assert!((tape.item(uv) - tape.item(su)).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&tape.item(uv)));
    }

    /// Layer norm output is invariant to adding a constant to its input.
    #[test]
    fn layer_norm_shift_invariance(
        x in pvec(-5.0f64..5.0, 12),
        shift in -100.0f64..100.0,
    ) {
        prop_assume!({
            // keep rows non-constant so the normal direction is well defined
            let row_ok = |r: &[f64]| {
                let mean = r.iter().sum::<f64>() / r.len() as f64;
                r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() > 1e-6
            };
            x.chunks(4).all(row_ok)
        });
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let mut tape = Tape::<f64>::new();
        let g = tape.leaf(TensorData::full(vec![4], 1.0));
        let b = tape.leaf(TensorData::zeros(vec![4]));
        let tx = tape.leaf(TensorData::new(vec![3, 4], x).unwrap());
        let ts = tape.leaf(TensorData::new(vec![3, 4], shifted).unwrap());
        let y0 = tape.layer_norm(tx, g, b, 1e-9).unwrap();
        let y1 = tape.layer_norm(ts, g, b, 1e-9).unwrap();
        for (a, c) in tape.data(y0).iter().zip(tape.data(y1).iter()) {
            prop_assert!((a - c).abs() < 1e-6);
        }
    }

    /// Dataset lines survive a round trip, and batches frame targets with
    /// BOS/EOS and pad only at the tail.
    #[test]
    fn pair_codec_and_batch_framing(
        srcs in pvec(pvec(3usize..40, 1..8), 1..6),
    ) {
        let pairs: Vec<Pair> = srcs
            .iter()
            .map(|s| {
                let mut t = s.clone();
                t.reverse();
                (s.clone(), t)
            })
            .collect();
        for p in &pairs {
            prop_assert_eq!(&parse_pair(&format_pair(p)).unwrap(), p);
        }
        for batch in batchify(&pairs, 3).unwrap() {
            for row in 0..batch.batch {
                let tgt_in = &batch.tgt_in[row * batch.tgt_len..(row + 1) * batch.tgt_len];
                let tgt_out = &batch.tgt_out[row * batch.tgt_len..(row + 1) * batch.tgt_len];
                prop_assert_eq!(tgt_in[0], BOS);
                // shifted-right framing: input token t matches output t-1
                let n = tgt_out.iter().position(|&t| t == EOS).unwrap();
                for j in 0..n {
                    prop_assert_eq!(tgt_in[j + 1], tgt_out[j]);
                }
                // pad only at the tail
                let keep = &batch.tgt_keep[row * batch.tgt_len..(row + 1) * batch.tgt_len];
                let first_pad = keep.iter().position(|k| !*k).unwrap_or(batch.tgt_len);
                for (j, k) in keep.iter().enumerate() {
                    prop_assert_eq!(*k, j < first_pad);
                    if j > n {
                        prop_assert_eq!(tgt_out[j], PAD);
                    }
                }
            }
        }
    }

    /// Closed-form fusion deltas equal the enumerated difference for random
    /// valid configurations of every strategy.
    #[test]
    fn fusion_deltas_match_enumeration(
        kind_idx in 0usize..6,
        d_exp in 1usize..4,
        heads_exp in 0usize..2,
        half_layers in 1usize..3,
        k in 1usize..3,
        ff in 2usize..24,
        ffa in 2usize..12,
    ) {
        let d_model = 1usize << (d_exp + heads_exp);
        let n_heads = 1usize << heads_exp;
        let l = half_layers * 2;
        let mut strategy = FusionStrategy::new(FusionKind::ALL[kind_idx]);
        strategy.k = k.min(l);
        let cfg = ModelConfig {
            d_model,
            n_heads,
            d_ff: ff,
            d_ff_agg: ffa,
            l_enc: l,
            l_dec: l,
            vocab_src: 7,
            vocab_tgt: 9,
            max_len: 8,
            strategy,
            lambda_div: 0.0,
            ln_eps: 1e-5,
            seed: 1,
            precision: Precision::F32,
            dropout: 0.0,
        };
        prop_assume!(cfg.validate().is_ok());
        prop_assert_eq!(
            strategy_delta(&cfg).unwrap(),
            fusion_delta_closed_form(&cfg).unwrap()
        );
        if cfg.strategy.kind == FusionKind::Dense {
            prop_assert_eq!(strategy_delta(&cfg).unwrap(), 0);
        }
    }
}
