//! Diversity regularization: reward adjacent backbone layers for holding
//! linearly independent representations.
//!
//! The distance between two layer states is the mean `1 - cos^2` over
//! valid positions, so opposite-direction vectors count as similar, not
//! diverse. The regularizer averages the distance over every adjacent
//! backbone pair (aggregation nodes do not participate) and is subtracted
//! from the NLL: the training loss is minimized, so rewarding diversity
//! means a negative sign on the diversity term.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fusion::LayerStates;
use crate::tensor::{Real, Tape, Tensor};

/// Which stack a report describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
}

impl Side {
    pub fn name(&self) -> &'static str {
        match self {
            Side::Encoder => "encoder",
            Side::Decoder => "decoder",
        }
    }
}

/// Per-pair adjacent-layer distances of one stack, for logging.
#[derive(Clone, Debug)]
pub struct DiversityReport {
    pub side: Side,
    /// `D(H^l, H^{l+1})` for l = 1..L-1, each in [0, 1].
    pub per_pair: Vec<f64>,
    pub mean: f64,
}

/// Mean cosine-squared distance between paired positions of two adjacent
/// layer states, restricted to valid (unpadded) positions.
pub fn pair_distance<T: Real>(
    tape: &mut Tape<T>,
    lower: Tensor,
    upper: Tensor,
    keep: &[bool],
) -> Result<Tensor> {
    tape.pair_distance(lower, upper, keep)
}

/// Average pair distance over every two adjacent backbone layers
/// `H^1..H^L` (the embedding and aggregation nodes are excluded).
/// Needs at least two layers.
pub fn diversity_loss<T: Real>(
    tape: &mut Tape<T>,
    states: &LayerStates,
    keep: &[bool],
) -> Result<Tensor> {
    let layers = &states.backbone[1..];
    let l = layers.len();
    if l < 2 {
        return Err(Error::Config(
            "diversity_loss needs at least two backbone layers".into(),
        ));
    }
    let mut acc: Option<Tensor> = None;
    for w in layers.windows(2) {
        let d = pair_distance(tape, w[0], w[1], keep)?;
        acc = Some(match acc {
            None => d,
            Some(a) => tape.add(a, d)?,
        });
    }
    let sum = acc.expect("l >= 2");
    Ok(tape.scale(sum, T::from_f64(1.0 / (l - 1) as f64)))
}

/// Same quantity as [`diversity_loss`] but off-tape, for reports.
pub fn diversity_report<T: Real>(
    tape: &mut Tape<T>,
    states: &LayerStates,
    keep: &[bool],
    side: Side,
) -> Result<DiversityReport> {
    let layers = &states.backbone[1..];
    let mut per_pair = Vec::with_capacity(layers.len().saturating_sub(1));
    for w in layers.windows(2) {
        let d = pair_distance(tape, w[0], w[1], keep)?;
        per_pair.push(tape.item(d).to_f64());
    }
    let mean = per_pair.iter().sum::<f64>() / per_pair.len().max(1) as f64;
    Ok(DiversityReport {
        side,
        per_pair,
        mean,
    })
}

/// Combined training objective. The likelihood term is a minimized NLL, so
/// the diversity term enters with a negative sign: larger diversity lowers
/// the loss. Encoder and decoder terms are averaged.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    nll: Tensor,
    div_enc: Tensor,
    div_dec: Tensor,
    lambda: f64,
) -> Result<Tensor> {
    if lambda < 0.0 {
        return Err(Error::Config("lambda must be nonnegative".into()));
    }
    let sum = tape.add(div_enc, div_dec)?;
    let weighted = tape.scale(sum, T::from_f64(-lambda / 2.0));
    tape.add(nll, weighted)
}

#[cfg(test)]
mod tests {
    use alloc::vec;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{grad_check, Param, TensorData};

    fn states_from(tape: &mut Tape<f64>, layers: Vec<Tensor>) -> LayerStates {
        let h0 = tape.leaf(TensorData::zeros(vec![1, 1, 1]));
        let last = *layers.last().unwrap();
        let mut backbone = vec![h0];
        backbone.extend(layers);
        LayerStates {
            backbone,
            agg_nodes: vec![],
            final_state: last,
        }
    }

    #[test]
    fn identical_states_have_zero_distance() {
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(TensorData::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let d = pair_distance(&mut tape, h, h, &[true, true]).unwrap();
        assert!(tape.item(d).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_positions_have_distance_one() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(TensorData::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap());
        let b = tape.leaf(TensorData::new(vec![1, 2, 2], vec![0.0, 3.0, 4.0, 0.0]).unwrap());
        let d = pair_distance(&mut tape, a, b, &[true, true]).unwrap();
        assert!((tape.item(d) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn opposite_states_count_as_non_diverse() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(TensorData::new(vec![1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let b = tape.leaf(TensorData::new(vec![1, 1, 3], vec![-1.0, 2.0, -0.5]).unwrap());
        let d = pair_distance(&mut tape, a, b, &[true]).unwrap();
        assert!(tape.item(d).abs() < 1e-12);
    }

    #[test]
    fn pair_distance_scale_invariant_per_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let base: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let other: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = base
            .chunks(4)
            .enumerate()
            .flat_map(|(i, c)| {
                let s = [0.3, -2.0, 7.5][i];
                c.iter().map(move |v| v * s)
            })
            .collect();
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(TensorData::new(vec![3, 4], base).unwrap());
        let a2 = tape.leaf(TensorData::new(vec![3, 4], scaled).unwrap());
        let b = tape.leaf(TensorData::new(vec![3, 4], other).unwrap());
        let keep = [true, true, true];
        let d1 = pair_distance(&mut tape, a, b, &keep).unwrap();
        let d2 = pair_distance(&mut tape, a2, b, &keep).unwrap();
        assert!((tape.item(d1) - tape.item(d2)).abs() < 1e-9);
    }

    #[test]
    fn diversity_needs_two_layers() {
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(TensorData::zeros(vec![1, 1, 2]));
        let states = states_from(&mut tape, vec![h]);
        assert!(diversity_loss(&mut tape, &states, &[true]).is_err());
    }

    #[test]
    fn two_layers_equal_single_pair_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut tape = Tape::<f64>::new();
        let data = |rng: &mut ChaCha8Rng| {
            TensorData::new(vec![1, 2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap()
        };
        let h1 = tape.leaf(data(&mut rng));
        let h2 = tape.leaf(data(&mut rng));
        let keep = [true, true];
        let states = states_from(&mut tape, vec![h1, h2]);
        let loss = diversity_loss(&mut tape, &states, &keep).unwrap();
        let direct = pair_distance(&mut tape, h1, h2, &keep).unwrap();
        assert!((tape.item(loss) - tape.item(direct)).abs() < 1e-12);
    }

    #[test]
    fn random_states_match_per_position_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (b, t, d) = (2, 3, 4);
        let layers: Vec<TensorData<f64>> = (0..3)
            .map(|_| {
                TensorData::new(
                    vec![b, t, d],
                    (0..b * t * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let keep = [true, true, false, true, true, true];

        // Brute force: loop over positions, cosine from raw dot products.
        let mut expected = 0.0;
        for w in layers.windows(2) {
            let (lo, hi) = (&w[0], &w[1]);
            let mut sum = 0.0;
            let mut n = 0;
            for pos in 0..b * t {
                if !keep[pos] {
                    continue;
                }
                let u = &lo.data()[pos * d..(pos + 1) * d];
                let v = &hi.data()[pos * d..(pos + 1) * d];
                let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
                let nu: f64 = u.iter().map(|x| x * x).sum();
                let nv: f64 = v.iter().map(|x| x * x).sum();
                sum += 1.0 - dot * dot / (nu * nv);
                n += 1;
            }
            expected += sum / n as f64;
        }
        expected /= 2.0;

        let mut tape = Tape::<f64>::new();
        let handles: Vec<Tensor> = layers.into_iter().map(|l| tape.leaf(l)).collect();
        let states = states_from(&mut tape, handles);
        let loss = diversity_loss(&mut tape, &states, &keep).unwrap();
        assert!((tape.item(loss) - expected).abs() < 1e-8);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let nll = tape.scalar(1.0);
        let de = tape.scalar(0.5);
        let dd = tape.scalar(0.5);
        let t0 = total_loss(&mut tape, nll, de, dd, 0.0).unwrap();
        assert_eq!(tape.item(t0), 1.0);
        let t1 = total_loss(&mut tape, nll, de, dd, 1.0).unwrap();
        assert!((tape.item(t1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let (b, t, d) = (1, 2, 3);
        let mut params: Vec<Param<f64>> = (0..3)
            .map(|i| {
                Param::new(
                    alloc::format!("h{i}"),
                    TensorData::new(
                        vec![b, t, d],
                        (0..b * t * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    )
                    .unwrap(),
                )
            })
            .collect();
        let report = grad_check(
            |tape, ps| {
                let keep = [true, true];
                let h1 = tape.param(&ps[0]);
                let h2 = tape.param(&ps[1]);
                let h3 = tape.param(&ps[2]);
                let h0 = tape.leaf(TensorData::zeros(vec![b, t, d]));
                let states = LayerStates {
                    backbone: vec![h0, h1, h2, h3],
                    agg_nodes: vec![],
                    final_state: h3,
                };
                let div_enc = diversity_loss(tape, &states, &keep)?;
                let div_dec = tape.scalar(0.25);
                let nll = tape.scalar(2.0);
                total_loss(tape, nll, div_enc, div_dec, 1.0)
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }
}
