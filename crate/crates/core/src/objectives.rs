//! Loss functions: lesion cross-entropy, supervised stain cross-entropy,
//! label-free stain entropy, and the mu-weighted combined loss.
//!
//! The combined loss is `mu1 * CE_lesion + mu2 * S` where `S` is the stain
//! cross-entropy (`supervised_ce`), the mean stain entropy (`entropy_max`),
//! or absent (`none`). Negative `mu2` under `supervised_ce` actively
//! un-learns stain; under `entropy_max` it pushes stain predictions toward
//! uniform. When the stain term cannot contribute (`none`, or `mu2 = 0`) it
//! is skipped entirely, so no gradient ever reaches stain-only parameters.

use crate::tensor::{Tape, TensorError, Var};

/// Errors from loss construction.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("mu1 must be non-negative, got {0}")]
    NegativeMu1(f64),
    #[error("supervised_ce stain mode requires stain labels")]
    MissingStainLabels,
    #[error("entropy_max stain mode must not receive stain labels")]
    UnexpectedStainLabels,
    #[error("entropy_max with mu2 = {0} > 0 would minimize entropy, sharpening stain predictions")]
    EntropySharpening(f64),
}

/// How the stain term of the combined loss is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StainMode {
    SupervisedCe,
    EntropyMax,
    None,
}

/// The knobs of the combined loss.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct LossWeights {
    pub mu1: f64,
    pub mu2: f64,
    pub stain_mode: StainMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mu1: 1.0,
            mu2: 0.0,
            stain_mode: StainMode::SupervisedCe,
        }
    }
}

impl LossWeights {
    /// Rejects negative `mu1` and the entropy-sharpening misconfiguration.
    pub fn validate(&self) -> Result<(), LossError> {
        if self.mu1 < 0.0 || !self.mu1.is_finite() {
            return Err(LossError::NegativeMu1(self.mu1));
        }
        if matches!(self.stain_mode, StainMode::EntropyMax) && self.mu2 > 0.0 {
            return Err(LossError::EntropySharpening(self.mu2));
        }
        Ok(())
    }

    /// True when training under these weights consumes stain labels.
    pub fn reads_stain_labels(&self) -> bool {
        matches!(self.stain_mode, StainMode::SupervisedCe)
    }
}

/// Mean `-log p(label)` over the batch, with probabilities clamped at 1e-12
/// before the log. Rows of `probs` must already be valid distributions.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var, LossError> {
    Ok(tape.nll_mean(probs, labels)?)
}

/// [`cross_entropy`] computed directly from logits in one fused step.
///
/// The value matches the probability form (including the 1e-12 floor) but
/// the gradient keeps the fused softmax-minus-one-hot shape, which stays
/// informative when training drives probabilities to the floor. Training
/// goes through this path; the probability form serves callers that already
/// hold distributions.
pub fn cross_entropy_logits(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
) -> Result<Var, LossError> {
    Ok(tape.ce_mean(logits, labels)?)
}

/// Mean Shannon entropy of stain probability rows, in nats; range [0, ln 4].
pub fn stain_entropy(tape: &mut Tape, probs: Var) -> Var {
    tape.entropy_mean(probs)
}

/// The combined loss over one batch.
///
/// `supervised_ce` requires stain labels and `entropy_max` forbids them,
/// regardless of `mu2`. The stain term is added to the graph only when it can
/// contribute (`mu2 != 0` and mode is not `none`), which makes training at
/// `mu2 = 0` bit-equivalent to lesion-only training.
pub fn combined_loss(
    tape: &mut Tape,
    lesion_probs: Var,
    lesion_labels: &[usize],
    stain_probs: Var,
    stain_labels: Option<&[usize]>,
    w: &LossWeights,
) -> Result<Var, LossError> {
    w.validate()?;
    match w.stain_mode {
        StainMode::SupervisedCe if stain_labels.is_none() => {
            return Err(LossError::MissingStainLabels)
        }
        StainMode::EntropyMax if stain_labels.is_some() => {
            return Err(LossError::UnexpectedStainLabels)
        }
        _ => {}
    }
    let lesion_ce = cross_entropy(tape, lesion_probs, lesion_labels)?;
    let total = tape.scale(lesion_ce, w.mu1);
    let stain_term = if w.mu2 == 0.0 {
        None
    } else {
        match w.stain_mode {
            StainMode::SupervisedCe => Some(cross_entropy(
                tape,
                stain_probs,
                stain_labels.expect("checked above"),
            )?),
            StainMode::EntropyMax => Some(stain_entropy(tape, stain_probs)),
            StainMode::None => None,
        }
    };
    match stain_term {
        Some(s) => {
            let scaled = tape.scale(s, w.mu2);
            Ok(tape.add(total, scaled)?)
        }
        None => Ok(total),
    }
}

/// The combined loss built from head logits rather than probabilities.
///
/// Semantically identical to [`combined_loss`] on the softmax of the same
/// logits, but the cross-entropy terms use the fused form so their gradients
/// survive saturated rows. The entropy term still goes through an explicit
/// softmax because entropy is defined on the distribution itself.
pub fn combined_loss_from_logits(
    tape: &mut Tape,
    lesion_logits: Var,
    lesion_labels: &[usize],
    stain_logits: Var,
    stain_labels: Option<&[usize]>,
    w: &LossWeights,
) -> Result<Var, LossError> {
    w.validate()?;
    match w.stain_mode {
        StainMode::SupervisedCe if stain_labels.is_none() => {
            return Err(LossError::MissingStainLabels)
        }
        StainMode::EntropyMax if stain_labels.is_some() => {
            return Err(LossError::UnexpectedStainLabels)
        }
        _ => {}
    }
    let lesion_ce = cross_entropy_logits(tape, lesion_logits, lesion_labels)?;
    let total = tape.scale(lesion_ce, w.mu1);
    let stain_term = if w.mu2 == 0.0 {
        None
    } else {
        match w.stain_mode {
            StainMode::SupervisedCe => Some(cross_entropy_logits(
                tape,
                stain_logits,
                stain_labels.expect("checked above"),
            )?),
            StainMode::EntropyMax => {
                let sp = tape.softmax(stain_logits)?;
                Some(stain_entropy(tape, sp))
            }
            StainMode::None => None,
        }
    };
    match stain_term {
        Some(s) => {
            let scaled = tape.scale(s, w.mu2);
            Ok(tape.add(total, scaled)?)
        }
        None => Ok(total),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN4: f64 = 1.3862943611198906;

    fn probs_tape(data: &[f64], shape: &[usize]) -> (Tape, Var) {
        let mut tape = Tape::new();
        let v = tape.constant(data, shape).unwrap();
        (tape, v)
    }

    #[test]
    fn cross_entropy_hand_cases() {
        let (mut tape, p) = probs_tape(&[1.0, 0.0], &[1, 2]);
        let l = cross_entropy(&mut tape, p, &[0]).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);

        let (mut tape, p) = probs_tape(&[0.25; 4], &[1, 4]);
        let l = cross_entropy(&mut tape, p, &[2]).unwrap();
        assert!((tape.scalar_value(l) - LN4).abs() < 1e-15);

        let (mut tape, p) = probs_tape(&[0.5, 0.5], &[1, 2]);
        assert!(matches!(
            cross_entropy(&mut tape, p, &[2]),
            Err(LossError::Tensor(TensorError::LabelOutOfRange { .. }))
        ));
    }

    #[test]
    fn clamped_log_keeps_loss_finite() {
        let (mut tape, p) = probs_tape(&[0.0, 1.0], &[1, 2]);
        let l = cross_entropy(&mut tape, p, &[0]).unwrap();
        let v = tape.scalar_value(l);
        assert!(v.is_finite());
        assert!((v - (-libm::log(1e-12))).abs() < 1e-9);
    }

    #[test]
    fn entropy_exact_equalities_and_bounds() {
        let (mut tape, p) = probs_tape(&[0.0, 1.0, 0.0, 0.0], &[1, 4]);
        let h = stain_entropy(&mut tape, p);
        assert_eq!(tape.scalar_value(h), 0.0);

        let (mut tape, p) = probs_tape(&[0.25; 4], &[1, 4]);
        let h = stain_entropy(&mut tape, p);
        assert_eq!(tape.scalar_value(h).to_bits(), libm::log(4.0).to_bits());

        let (mut tape, p) = probs_tape(&[0.5, 0.5, 0.0, 0.0], &[1, 4]);
        let h = stain_entropy(&mut tape, p);
        assert_eq!(tape.scalar_value(h).to_bits(), libm::log(2.0).to_bits());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let mut row: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = row.iter().sum();
            for v in &mut row {
                *v /= s;
            }
            let (mut tape, p) = probs_tape(&row, &[1, 4]);
            let h = stain_entropy(&mut tape, p);
            let v = tape.scalar_value(h);
            assert!((-1e-12..=LN4 + 1e-12).contains(&v), "entropy {v}");
        }
    }

    #[test]
    fn validation_rules() {
        assert!(LossWeights { mu1: -0.1, ..Default::default() }.validate().is_err());
        assert!(LossWeights {
            mu2: 0.5,
            stain_mode: StainMode::EntropyMax,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            mu2: -0.5,
            stain_mode: StainMode::EntropyMax,
            ..Default::default()
        }
        .validate()
        .is_ok());

        let (mut tape, p) = probs_tape(&[0.25; 8], &[2, 4]);
        let lp = p;
        let labels = [0usize, 1];
        let w = LossWeights { mu1: 1.0, mu2: 1.0, stain_mode: StainMode::SupervisedCe };
        assert!(matches!(
            combined_loss(&mut tape, lp, &labels, p, None, &w),
            Err(LossError::MissingStainLabels)
        ));
        let w = LossWeights { mu1: 1.0, mu2: -1.0, stain_mode: StainMode::EntropyMax };
        assert!(matches!(
            combined_loss(&mut tape, lp, &labels, p, Some(&labels), &w),
            Err(LossError::UnexpectedStainLabels)
        ));
    }

    #[test]
    fn substitution_example() {
        // mu1=1, mu2=-0.5, entropy_max, uniform stain rows
        let mut tape = Tape::new();
        let lesion = tape.constant(&[0.8, 0.2, 0.3, 0.7], &[2, 2]).unwrap();
        let stain = tape.constant(&[0.25; 8], &[2, 4]).unwrap();
        let w = LossWeights { mu1: 1.0, mu2: -0.5, stain_mode: StainMode::EntropyMax };
        let total = combined_loss(&mut tape, lesion, &[0, 1], stain, None, &w).unwrap();
        let ce = cross_entropy(&mut tape, lesion, &[0, 1]).unwrap();
        let expect = tape.scalar_value(ce) - 0.5 * LN4;
        assert!((tape.scalar_value(total) - expect).abs() < 1e-12);
    }

    #[test]
    fn affine_in_mu_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lesion_data: Vec<f64> = {
            let mut v = Vec::new();
            for _ in 0..3 {
                let a: f64 = rng.gen_range(0.05..0.95);
                v.extend([a, 1.0 - a]);
            }
            v
        };
        let stain_data: Vec<f64> = {
            let mut v = Vec::new();
            for _ in 0..3 {
                let mut row: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..1.0)).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
                v.extend(row);
            }
            v
        };
        let lesion_labels = [0usize, 1, 0];
        let stain_labels = [3usize, 0, 2];

        let pure = |mode: StainMode| -> (f64, f64) {
            let mut tape = Tape::new();
            let lp = tape.constant(&lesion_data, &[3, 2]).unwrap();
            let sp = tape.constant(&stain_data, &[3, 4]).unwrap();
            let l = cross_entropy(&mut tape, lp, &lesion_labels).unwrap();
            let s = match mode {
                StainMode::SupervisedCe => cross_entropy(&mut tape, sp, &stain_labels).unwrap(),
                _ => stain_entropy(&mut tape, sp),
            };
            (tape.scalar_value(l), tape.scalar_value(s))
        };

        for mode in [StainMode::SupervisedCe, StainMode::EntropyMax] {
            let (l_term, s_term) = pure(mode);
            let grid: &[(f64, f64)] =
                &[(1.0, 1.0), (1.0, -1.0), (0.5, 0.25), (2.0, -0.75), (1.0, 0.0)];
            for &(mu1, mu2) in grid {
                if matches!(mode, StainMode::EntropyMax) && mu2 > 0.0 {
                    continue;
                }
                let mut tape = Tape::new();
                let lp = tape.constant(&lesion_data, &[3, 2]).unwrap();
                let sp = tape.constant(&stain_data, &[3, 4]).unwrap();
                let labels = match mode {
                    StainMode::SupervisedCe => Some(&stain_labels[..]),
                    _ => None,
                };
                let w = LossWeights { mu1, mu2, stain_mode: mode };
                let total =
                    combined_loss(&mut tape, lp, &lesion_labels, sp, labels, &w).unwrap();
                let expect = mu1 * l_term + mu2 * s_term;
                assert!(
                    (tape.scalar_value(total) - expect).abs() < 1e-10,
                    "mode {mode:?} mu ({mu1},{mu2})"
                );
            }
        }
    }

    #[test]
    fn mu2_zero_skips_stain_term() {
        let run = |mode: StainMode, labels: Option<&[usize]>| -> (f64, usize) {
            let mut tape = Tape::new();
            let lp = tape.constant(&[0.9, 0.1, 0.4, 0.6], &[2, 2]).unwrap();
            let sp = tape.constant(&[0.25; 8], &[2, 4]).unwrap();
            let w = LossWeights { mu1: 1.0, mu2: 0.0, stain_mode: mode };
            let total = combined_loss(&mut tape, lp, &[0, 1], sp, labels, &w).unwrap();
            (tape.scalar_value(total), tape.node_count())
        };
        let stain_labels = [1usize, 2];
        let (v_sup, n_sup) = run(StainMode::SupervisedCe, Some(&stain_labels));
        let (v_none, n_none) = run(StainMode::None, None);
        assert_eq!(v_sup.to_bits(), v_none.to_bits());
        assert_eq!(n_sup, n_none);
    }

    #[test]
    fn gradient_matches_term_by_term() {
        // grad of combined loss = mu1 * (lesion-term grad) + mu2 * (stain-term grad)
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lesion_logits: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let stain_logits: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lesion_labels = [0usize, 1, 1, 0];
        let stain_labels = [2usize, 0, 3, 1];
        let (mu1, mu2) = (0.7, -0.4);

        let grads = |w: Option<&LossWeights>| -> (Vec<f64>, Vec<f64>) {
            let lt = Tensor::from_vec(lesion_logits.clone(), &[4, 2]).unwrap().with_grad();
            let st = Tensor::from_vec(stain_logits.clone(), &[4, 4]).unwrap().with_grad();
            let mut tape = Tape::new();
            let lv = tape.leaf(&lt);
            let sv = tape.leaf(&st);
            let lp = tape.softmax(lv).unwrap();
            let sp = tape.softmax(sv).unwrap();
            let loss = match w {
                Some(w) => combined_loss(
                    &mut tape,
                    lp,
                    &lesion_labels,
                    sp,
                    Some(&stain_labels),
                    w,
                )
                .unwrap(),
                None => cross_entropy(&mut tape, sp, &stain_labels).unwrap(),
            };
            tape.backward(loss).unwrap();
            (
                tape.grad(lv).map(|g| g.to_vec()).unwrap_or(vec![0.0; 8]),
                tape.grad(sv).map(|g| g.to_vec()).unwrap_or(vec![0.0; 16]),
            )
        };

        let w = LossWeights { mu1, mu2, stain_mode: StainMode::SupervisedCe };
        let (gl, gs) = grads(Some(&w));
        let w_lesion_only = LossWeights { mu1: 1.0, mu2: 0.0, stain_mode: StainMode::None };
        let (gl_pure, _) = grads(Some(&w_lesion_only));
        let (_, gs_pure) = grads(None);
        for (a, b) in gl.iter().zip(&gl_pure) {
            assert!((a - mu1 * b).abs() < 1e-10);
        }
        for (a, b) in gs.iter().zip(&gs_pure) {
            assert!((a - mu2 * b).abs() < 1e-10);
        }
    }

    #[test]
    fn sign_semantics_one_step() {
        // one plain gradient step on a frozen batch: mu2 > 0 decreases the
        // stain CE, mu2 < 0 increases it
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..4 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w0: Vec<f64> = (0..4 * 6).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let stain_labels = [0usize, 1, 2, 3];
        let lesion_labels = [0usize, 1, 0, 1];
        let lesion_w: Vec<f64> = (0..2 * 6).map(|_| rng.gen_range(-0.5..0.5)).collect();

        let stain_ce_after = |mu2: f64| -> (f64, f64) {
            let mut weight = Tensor::from_vec(w0.clone(), &[4, 6]).unwrap().with_grad();
            let ce_of = |weight: &Tensor| -> f64 {
                let mut tape = Tape::new();
                let xv = tape.constant(&x, &[4, 6]).unwrap();
                let wv = tape.leaf_detached(weight);
                let wt = tape.transpose(wv).unwrap();
                let logits = tape.matmul(xv, wt).unwrap();
                let p = tape.softmax(logits).unwrap();
                let ce = cross_entropy(&mut tape, p, &stain_labels).unwrap();
                tape.scalar_value(ce)
            };
            let before = ce_of(&weight);
            // combined-loss gradient step at the given mu2
            let mut tape = Tape::new();
            let xv = tape.constant(&x, &[4, 6]).unwrap();
            let wv = tape.leaf(&weight);
            let lw = tape.constant(&lesion_w, &[2, 6]).unwrap();
            let wt = tape.transpose(wv).unwrap();
            let slogits = tape.matmul(xv, wt).unwrap();
            let sp = tape.softmax(slogits).unwrap();
            let lwt = tape.transpose(lw).unwrap();
            let llogits = tape.matmul(xv, lwt).unwrap();
            let lp = tape.softmax(llogits).unwrap();
            let w = LossWeights { mu1: 1.0, mu2, stain_mode: StainMode::SupervisedCe };
            let loss =
                combined_loss(&mut tape, lp, &lesion_labels, sp, Some(&stain_labels), &w)
                    .unwrap();
            tape.backward(loss).unwrap();
            let g = tape.grad(wv).unwrap().to_vec();
            for (p, gv) in weight.data_mut().iter_mut().zip(g) {
                *p -= 0.05 * gv;
            }
            (before, ce_of(&weight))
        };

        let (before_pos, after_pos) = stain_ce_after(1.0);
        assert!(after_pos < before_pos, "{after_pos} !< {before_pos}");
        let (before_neg, after_neg) = stain_ce_after(-1.0);
        assert!(after_neg > before_neg, "{after_neg} !> {before_neg}");
    }
}
