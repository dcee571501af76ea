//! Classification metrics and uncertainty summaries.
//!
//! AUC uses the rank statistic with the midrank convention for ties, which
//! matches brute-force pairwise comparison (ties count one half) exactly.
//! Multiclass AUC is the unweighted one-vs-rest macro average. Argmax breaks
//! ties toward the lowest index, and binary scores equal to the 0.5 threshold
//! resolve to the negative class for consistency with that convention.
//! Whenever AUC is undefined (a single-class label set) it is reported as
//! absent rather than as some sentinel value.

use alloc::vec;
use alloc::vec::Vec;

use crate::model::MCPrediction;

/// Errors from metric computation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {left} scores vs {right} labels")]
    LengthMismatch { left: usize, right: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("score {value} outside [0, 1]")]
    ScoreOutOfRange { value: f64 },
    #[error("probability table of {len} entries is not divisible into rows of {classes}")]
    RaggedProbs { len: usize, classes: usize },
}

/// Per-class slice of a classification report.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassMetrics {
    pub class: usize,
    /// Number of samples whose true label is this class.
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// One-vs-rest AUC; absent when the class is missing from the labels or
    /// covers all of them.
    pub auc: Option<f64>,
}

/// Classification quality summary for one head on one evaluation set.
///
/// For binary reports the headline precision/recall/F1 describe the positive
/// class; for multiclass reports they are unweighted macro averages. `auc` is
/// the positive-class AUC respectively the macro one-vs-rest average over the
/// classes where it is defined. A zero-denominator precision or recall is
/// reported as 0, and F1 is 0 whenever precision + recall is 0.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    /// Mean scalar predictive uncertainty over the evaluated samples, filled
    /// in by callers that evaluated with Monte Carlo dropout.
    pub mean_uncertainty: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricReport {
    pub fn with_mean_uncertainty(mut self, u: f64) -> Self {
        self.mean_uncertainty = Some(u);
        self
    }
}

/// Mean, spread, and correctness correlation of per-sample uncertainties.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UncertaintySummary {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation (1/n convention).
    pub std: f64,
    /// Point-biserial correlation between uncertainty and the 0/1
    /// correctness indicator; absent when either side has zero variance.
    pub correlation: Option<f64>,
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Binary AUC by the rank method with midranks for ties. Returns `None` when
/// either class is absent. Scores need not live in [0, 1]; only their order
/// matters.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    debug_assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average of the 1-based ranks i+1 ..= j+1
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Metrics for a binary task from positive-class probabilities, decision
/// threshold 0.5. Headline precision/recall/F1 describe the positive class.
pub fn binary_metrics(scores: &[f64], labels: &[usize]) -> Result<MetricReport, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    for &s in scores {
        if !(0.0..=1.0).contains(&s) {
            return Err(MetricsError::ScoreOutOfRange { value: s });
        }
    }
    for &l in labels {
        if l > 1 {
            return Err(MetricsError::LabelOutOfRange { label: l, classes: 2 });
        }
    }
    let preds: Vec<usize> = scores.iter().map(|&s| usize::from(s > 0.5)).collect();
    let per_class_auc = |class: usize| {
        let positive: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        let class_scores: Vec<f64> = match class {
            1 => scores.to_vec(),
            _ => scores.iter().map(|&s| 1.0 - s).collect(),
        };
        auc_binary(&class_scores, &positive)
    };
    let per_class: Vec<ClassMetrics> = (0..2)
        .map(|c| class_metrics(c, &preds, labels, per_class_auc(c)))
        .collect();
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let pos = &per_class[1];
    Ok(MetricReport {
        n: labels.len(),
        accuracy: correct as f64 / labels.len() as f64,
        precision: pos.precision,
        recall: pos.recall,
        f1: pos.f1,
        auc: pos.auc,
        mean_uncertainty: None,
        per_class,
    })
}

/// Metrics for a multiclass task from a flat row-major probability table.
/// Headline precision/recall/F1 are unweighted macro averages over all
/// `classes`; AUC is the macro average over classes where it is defined.
pub fn multiclass_metrics(
    probs: &[f64],
    classes: usize,
    labels: &[usize],
) -> Result<MetricReport, MetricsError> {
    if classes == 0 || probs.len() % classes != 0 {
        return Err(MetricsError::RaggedProbs { len: probs.len(), classes });
    }
    let n = probs.len() / classes;
    if n != labels.len() {
        return Err(MetricsError::LengthMismatch { left: n, right: labels.len() });
    }
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    for &l in labels {
        if l >= classes {
            return Err(MetricsError::LabelOutOfRange { label: l, classes });
        }
    }
    let preds: Vec<usize> = (0..n)
        .map(|i| argmax(&probs[i * classes..(i + 1) * classes]))
        .collect();
    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| {
            let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            let scores: Vec<f64> = (0..n).map(|i| probs[i * classes + c]).collect();
            class_metrics(c, &preds, labels, auc_binary(&scores, &positive))
        })
        .collect();
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let k = classes as f64;
    let defined_auc: Vec<f64> = per_class.iter().filter_map(|c| c.auc).collect();
    Ok(MetricReport {
        n,
        accuracy: correct as f64 / n as f64,
        precision: per_class.iter().map(|c| c.precision).sum::<f64>() / k,
        recall: per_class.iter().map(|c| c.recall).sum::<f64>() / k,
        f1: per_class.iter().map(|c| c.f1).sum::<f64>() / k,
        auc: if defined_auc.is_empty() {
            None
        } else {
            Some(defined_auc.iter().sum::<f64>() / defined_auc.len() as f64)
        },
        mean_uncertainty: None,
        per_class,
    })
}

fn class_metrics(class: usize, preds: &[usize], labels: &[usize], auc: Option<f64>) -> ClassMetrics {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == class, l == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics { class, support: tp + fn_, precision, recall, f1, auc }
}

/// Summarizes per-sample scalar uncertainties and their relationship with
/// correctness (argmax of the mean probabilities versus the label).
pub fn uncertainty_summary(
    mc: &[MCPrediction],
    labels: &[usize],
) -> Result<UncertaintySummary, MetricsError> {
    if mc.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { left: mc.len(), right: labels.len() });
    }
    let n = mc.len();
    if n == 0 {
        return Ok(UncertaintySummary { n: 0, mean: 0.0, std: 0.0, correlation: None });
    }
    for (p, &l) in mc.iter().zip(labels) {
        if l >= p.mean_probs.len() {
            return Err(MetricsError::LabelOutOfRange { label: l, classes: p.mean_probs.len() });
        }
    }
    let u: Vec<f64> = mc.iter().map(|p| p.uncertainty).collect();
    let c: Vec<f64> = mc
        .iter()
        .zip(labels)
        .map(|(p, &l)| if argmax(&p.mean_probs) == l { 1.0 } else { 0.0 })
        .collect();
    let nf = n as f64;
    let mean_u = u.iter().sum::<f64>() / nf;
    let mean_c = c.iter().sum::<f64>() / nf;
    let var_u = u.iter().map(|x| (x - mean_u) * (x - mean_u)).sum::<f64>() / nf;
    let var_c = c.iter().map(|x| (x - mean_c) * (x - mean_c)).sum::<f64>() / nf;
    let cov = u
        .iter()
        .zip(&c)
        .map(|(x, y)| (x - mean_u) * (y - mean_c))
        .sum::<f64>()
        / nf;
    let correlation = if var_u > 0.0 && var_c > 0.0 {
        Some(cov / (libm::sqrt(var_u) * libm::sqrt(var_c)))
    } else {
        None
    };
    Ok(UncertaintySummary { n, mean: mean_u, std: libm::sqrt(var_u), correlation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_force_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
        let pos: Vec<f64> = scores
            .iter()
            .zip(positive)
            .filter(|(_, &p)| p)
            .map(|(&s, _)| s)
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(positive)
            .filter(|(_, &p)| !p)
            .map(|(&s, _)| s)
            .collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut total = 0.0;
        for &p in &pos {
            for &q in &neg {
                total += if p > q {
                    1.0
                } else if p == q {
                    0.5
                } else {
                    0.0
                };
            }
        }
        Some(total / (pos.len() * neg.len()) as f64)
    }

    fn mc(mean_probs: Vec<f64>, uncertainty: f64) -> MCPrediction {
        let k = mean_probs.len();
        MCPrediction { mean_probs, var_probs: vec![0.0; k], uncertainty, t: 50 }
    }

    #[test]
    fn binary_hand_case_auc() {
        let r = binary_metrics(&[0.9, 0.8, 0.3, 0.1], &[1, 0, 1, 0]).unwrap();
        assert_eq!(r.auc, Some(0.75));
        let brute = brute_force_auc(&[0.9, 0.8, 0.3, 0.1], &[true, false, true, false]);
        assert_eq!(r.auc, brute);
        // threshold 0.5: preds [1,1,0,0], tp=1 fp=1 fn=1
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.recall, 0.5);
        assert_eq!(r.f1, 0.5);
        assert_eq!(r.n, 4);
    }

    #[test]
    fn perfectly_separated() {
        let r = binary_metrics(&[0.99, 0.93, 0.08, 0.02], &[1, 1, 0, 0]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.auc, Some(1.0));
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn single_class_auc_absent() {
        let r = binary_metrics(&[0.9, 0.2, 0.7], &[1, 1, 1]).unwrap();
        assert_eq!(r.auc, None);
        assert_eq!(r.accuracy, 2.0 / 3.0);
        assert!(r.per_class.iter().all(|c| c.auc.is_none()));
    }

    #[test]
    fn shuffled_scores_give_chance_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut labels: Vec<usize> = (0..10_000).map(|i| i % 2).collect();
        labels.shuffle(&mut rng);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let r = binary_metrics(&scores, &labels).unwrap();
        let auc = r.auc.unwrap();
        assert!((auc - 0.5).abs() < 0.02, "auc {auc}");
    }

    #[test]
    fn rank_auc_equals_pairwise_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..200 {
            let n = rng.gen_range(2..=200);
            // draw from a coarse grid so ties are common
            let scores: Vec<f64> =
                (0..n).map(|_| rng.gen_range(0..=10) as f64 / 10.0).collect();
            let positive: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let rank = auc_binary(&scores, &positive);
            let brute = brute_force_auc(&scores, &positive);
            match (rank, brute) {
                (Some(a), Some(b)) => {
                    assert_eq!(a.to_bits(), b.to_bits(), "case {case}: {a} vs {b}")
                }
                (None, None) => {}
                other => panic!("case {case}: disagree on definedness {other:?}"),
            }
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(5..=120);
            let scores: Vec<f64> =
                (0..n).map(|_| rng.gen_range(0..=20) as f64 / 20.0).collect();
            let positive: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let base = auc_binary(&scores, &positive);
            let affine: Vec<f64> = scores.iter().map(|&s| 3.0 * s + 7.0).collect();
            let expd: Vec<f64> = scores.iter().map(|&s| libm::exp(s)).collect();
            assert_eq!(base, auc_binary(&affine, &positive));
            assert_eq!(base, auc_binary(&expd, &positive));
        }
    }

    #[test]
    fn one_hot_probs_are_perfect() {
        let labels = [0usize, 1, 2, 3, 1, 2];
        let mut probs = vec![0.0; labels.len() * 4];
        for (i, &l) in labels.iter().enumerate() {
            probs[i * 4 + l] = 1.0;
        }
        let r = multiclass_metrics(&probs, 4, &labels).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        assert_eq!(r.auc, Some(1.0));
    }

    #[test]
    fn uniform_probs_balanced_labels_hit_chance() {
        let labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
        let probs = vec![0.25; labels.len() * 4];
        let r = multiclass_metrics(&probs, 4, &labels).unwrap();
        // argmax ties resolve to class 0, which is a quarter of the labels
        assert_eq!(r.accuracy, 0.25);
        let auc = r.auc.unwrap();
        assert!((auc - 0.5).abs() < 1e-12, "auc {auc}");
    }

    #[test]
    fn eight_sample_macro_fixture() {
        // labels    [0,0,1,1,2,2,3,3], predictions [0,1,1,2,2,2,3,0]
        // class 0: tp 1 fp 1 fn 1 -> P 1/2 R 1/2 F1 1/2
        // class 1: tp 1 fp 1 fn 1 -> P 1/2 R 1/2 F1 1/2
        // class 2: tp 2 fp 1 fn 0 -> P 2/3 R 1   F1 4/5
        // class 3: tp 1 fp 0 fn 1 -> P 1   R 1/2 F1 2/3
        let labels = [0usize, 0, 1, 1, 2, 2, 3, 3];
        let preds = [0usize, 1, 1, 2, 2, 2, 3, 0];
        let mut probs = vec![0.1; 8 * 4];
        for (i, &p) in preds.iter().enumerate() {
            probs[i * 4 + p] = 0.7;
        }
        let r = multiclass_metrics(&probs, 4, &labels).unwrap();
        assert!((r.accuracy - 5.0 / 8.0).abs() < 1e-12);
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.recall - 5.0 / 8.0).abs() < 1e-12);
        assert!((r.f1 - 37.0 / 60.0).abs() < 1e-12);
        let f1s: Vec<f64> = r.per_class.iter().map(|c| c.f1).collect();
        for (got, want) in f1s.iter().zip([0.5, 0.5, 0.8, 2.0 / 3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(
            r.per_class.iter().map(|c| c.support).collect::<Vec<_>>(),
            vec![2, 2, 2, 2]
        );
    }

    #[test]
    fn accuracy_times_n_is_integer() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..30 {
            let n = rng.gen_range(1..=150);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let probs: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(0.0..1.0)).collect();
            let r = multiclass_metrics(&probs, 4, &labels).unwrap();
            let prod = r.accuracy * n as f64;
            assert!((prod - libm::round(prod)).abs() < 1e-9);
        }
    }

    #[test]
    fn uncertainty_summary_cases() {
        let preds: Vec<MCPrediction> =
            (0..5).map(|_| mc(vec![0.7, 0.3], 0.0)).collect();
        let s = uncertainty_summary(&preds, &[0, 0, 0, 1, 1]).unwrap();
        assert_eq!((s.mean, s.std), (0.0, 0.0));
        assert_eq!(s.correlation, None);

        // every wrong sample more uncertain than every correct one
        let preds = vec![
            mc(vec![0.9, 0.1], 0.01),
            mc(vec![0.8, 0.2], 0.02),
            mc(vec![0.6, 0.4], 0.20),
            mc(vec![0.3, 0.7], 0.30),
        ];
        let labels = [0usize, 0, 1, 0];
        let s = uncertainty_summary(&preds, &labels).unwrap();
        assert!(s.correlation.unwrap() < 0.0);
    }

    #[test]
    fn correlation_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 64;
        let preds: Vec<MCPrediction> = (0..n)
            .map(|_| {
                let a: f64 = rng.gen_range(0.05..0.95);
                mc(vec![a, 1.0 - a], rng.gen_range(0.0..0.25))
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let s = uncertainty_summary(&preds, &labels).unwrap();

        let u: Vec<f64> = preds.iter().map(|p| p.uncertainty).collect();
        let c: Vec<f64> = preds
            .iter()
            .zip(&labels)
            .map(|(p, &l)| if argmax(&p.mean_probs) == l { 1.0 } else { 0.0 })
            .collect();
        let nf = n as f64;
        let mu = u.iter().sum::<f64>() / nf;
        let mc_ = c.iter().sum::<f64>() / nf;
        let cov = u.iter().zip(&c).map(|(x, y)| (x - mu) * (y - mc_)).sum::<f64>() / nf;
        let su = libm::sqrt(u.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / nf);
        let sc = libm::sqrt(c.iter().map(|y| (y - mc_) * (y - mc_)).sum::<f64>() / nf);
        let want = cov / (su * sc);
        assert!((s.correlation.unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn input_validation() {
        assert!(matches!(
            binary_metrics(&[0.5], &[0, 1]),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert!(matches!(
            binary_metrics(&[1.2], &[0]),
            Err(MetricsError::ScoreOutOfRange { .. })
        ));
        assert!(matches!(
            binary_metrics(&[0.5], &[2]),
            Err(MetricsError::LabelOutOfRange { .. })
        ));
        assert!(matches!(
            multiclass_metrics(&[0.5; 7], 4, &[0]),
            Err(MetricsError::RaggedProbs { .. })
        ));
        assert!(matches!(
            multiclass_metrics(&[0.25; 4], 4, &[4]),
            Err(MetricsError::LabelOutOfRange { .. })
        ));
        assert!(matches!(binary_metrics(&[], &[]), Err(MetricsError::Empty)));
    }
}
