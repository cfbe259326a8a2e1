//! Loss-threshold membership inference and its relation to GNQ.
//!
//! The attack scores each candidate by `-loss` at the released parameters
//! and thresholds it. The threshold is picked with label knowledge to
//! maximize balanced accuracy, which overstates the attacker.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{AuditError, Result};
use crate::models::{loss, ModelSpec};
use crate::trainer::AuditRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub per_example_score: Vec<f64>,
    pub per_example_success: Vec<bool>,
    pub membership: Vec<bool>,
    pub auc: f64,
    /// Examples with `score >= threshold` are predicted members.
    pub threshold: f64,
}

impl AttackResult {
    pub fn success_rate(&self) -> f64 {
        let hits = self.per_example_success.iter().filter(|&&s| s).count();
        hits as f64 / self.per_example_success.len().max(1) as f64
    }

    /// Writes `example_id, score, success, membership`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| AuditError::io(path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| AuditError::io(path, e);
        writeln!(out, "example_id,score,success,membership").map_err(io)?;
        for (n, score) in self.per_example_score.iter().enumerate() {
            writeln!(
                out,
                "{n},{score:?},{},{}",
                u8::from(self.per_example_success[n]),
                u8::from(self.membership[n])
            )
            .map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Runs the loss-threshold attack against `params` on a dataset carrying
/// membership labels.
pub fn loss_attack(model: &ModelSpec, params: &[f64], data: &Dataset) -> Result<AttackResult> {
    let membership = data
        .membership
        .clone()
        .ok_or_else(|| AuditError::Config("loss attack needs membership labels".into()))?;
    let scores = data
        .examples
        .par_iter()
        .map(|e| loss(model, params, e).map(|l| -l))
        .collect::<Result<Vec<_>>>()?;
    attack_from_scores(scores, membership)
}

/// Thresholds precomputed membership scores.
pub fn attack_from_scores(scores: Vec<f64>, membership: Vec<bool>) -> Result<AttackResult> {
    if scores.len() != membership.len() {
        return Err(AuditError::Shape {
            expected: membership.len(),
            actual: scores.len(),
        });
    }
    let auc = auc(&scores, &membership)?;
    let threshold = balanced_threshold(&scores, &membership);
    let per_example_success = scores
        .iter()
        .zip(&membership)
        .map(|(&s, &m)| (s >= threshold) == m)
        .collect();
    Ok(AttackResult {
        per_example_score: scores,
        per_example_success,
        membership,
        auc,
        threshold,
    })
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

/// ROC AUC of `scores` for predicting `labels`, by the rank-sum statistic.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(AuditError::UndefinedAuc(format!(
            "{n_pos} members and {n_neg} non-members"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(AuditError::Domain("NaN membership score".into()));
    }
    let ranks = average_ranks(scores);
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Threshold maximizing balanced accuracy; the highest such threshold wins
/// ties.
fn balanced_threshold(scores: &[f64], labels: &[bool]) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut fp) = (0.0, 0.0);
    let mut best = (0.5, f64::INFINITY);
    let mut k = 0;
    while k < order.len() {
        let tau = scores[order[k]];
        while k < order.len() && scores[order[k]] == tau {
            if labels[order[k]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            k += 1;
        }
        let balanced = 0.5 * (tp / n_pos + (n_neg - fp) / n_neg);
        if balanced > best.0 {
            best = (balanced, tau);
        }
    }
    best.1
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnqBin {
    /// Inclusive lower edge; the zero bin has `lower = upper = 0`.
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for empty bins.
    pub success_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessCurve {
    /// Zero bin first, then `n_bins` log-spaced bins over positive values.
    pub bins: Vec<GnqBin>,
    pub spearman: Option<f64>,
}

/// Bins attack success by the audit's cumulative GNQ.
pub fn success_vs_gnq(
    attack: &AttackResult,
    audit: &AuditRecord,
    n_bins: usize,
) -> Result<SuccessCurve> {
    success_curve(&audit.cumulative_gnq, &attack.per_example_success, n_bins)
}

/// Log-binned success rate against `gnq`, with exact zeros in their own bin.
pub fn success_curve(gnq: &[f64], success: &[bool], n_bins: usize) -> Result<SuccessCurve> {
    if gnq.len() != success.len() {
        return Err(AuditError::Shape {
            expected: success.len(),
            actual: gnq.len(),
        });
    }
    if n_bins < 2 {
        return Err(AuditError::Config(format!(
            "n_bins must be at least 2, got {n_bins}"
        )));
    }
    if gnq.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(AuditError::Domain(
            "GNQ values must be finite and non-negative".into(),
        ));
    }
    let mut distinct: Vec<f64> = gnq.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(AuditError::DegenerateBinning(format!(
            "{} distinct GNQ value(s)",
            distinct.len()
        )));
    }

    let positive: Vec<f64> = distinct.iter().copied().filter(|&v| v > 0.0).collect();
    let (lo, hi) = match (positive.first(), positive.last()) {
        (Some(&lo), Some(&hi)) => (lo.ln(), hi.ln()),
        _ => (0.0, 0.0),
    };
    let width = (hi - lo) / n_bins as f64;
    let bin_of = |v: f64| -> usize {
        if v == 0.0 {
            0
        } else if width == 0.0 {
            1
        } else {
            1 + (((v.ln() - lo) / width) as usize).min(n_bins - 1)
        }
    };

    let mut counts = vec![0usize; n_bins + 1];
    let mut hits = vec![0usize; n_bins + 1];
    for (&v, &s) in gnq.iter().zip(success) {
        let b = bin_of(v);
        counts[b] += 1;
        hits[b] += usize::from(s);
    }
    let bins = (0..=n_bins)
        .map(|b| {
            let (lower, upper) = if b == 0 {
                (0.0, 0.0)
            } else {
                (
                    (lo + width * (b - 1) as f64).exp(),
                    (lo + width * b as f64).exp(),
                )
            };
            GnqBin {
                lower,
                upper,
                count: counts[b],
                success_rate: (counts[b] > 0).then(|| hits[b] as f64 / counts[b] as f64),
            }
        })
        .collect();
    let success_f: Vec<f64> = success.iter().map(|&s| f64::from(u8::from(s))).collect();
    Ok(SuccessCurve {
        bins,
        spearman: spearman(gnq, &success_f),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separated_scores_give_unit_auc() {
        let r = attack_from_scores(vec![-0.1, -0.2, -5.0, -6.0], vec![true, true, false, false])
            .unwrap();
        assert_eq!(r.auc, 1.0);
        assert!(r.per_example_success.iter().all(|&s| s));
    }

    #[test]
    fn ties_give_half() {
        assert_eq!(
            auc(&[1.0; 6], &[true, false, true, false, false, true]).unwrap(),
            0.5
        );
    }

    #[test]
    fn small_hand_example() {
        assert_eq!(auc(&[3.0, 2.0, 1.0], &[true, true, false]).unwrap(), 1.0);
    }

    #[test]
    fn single_class_is_undefined() {
        let err = attack_from_scores(vec![1.0, 2.0], vec![true, true]).unwrap_err();
        assert!(matches!(err, AuditError::UndefinedAuc(_)));
    }

    #[test]
    fn success_bits_follow_threshold() {
        let r = attack_from_scores(
            vec![0.9, 0.1, 0.8, 0.3, 0.5],
            vec![true, false, false, true, false],
        )
        .unwrap();
        for n in 0..5 {
            assert_eq!(
                r.per_example_success[n],
                (r.per_example_score[n] >= r.threshold) == r.membership[n]
            );
        }
    }

    #[test]
    fn shuffled_success_has_near_zero_spearman() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gnq: Vec<f64> = (0..500).map(|_| rng.random::<f64>() * 100.0).collect();
        let mut success: Vec<bool> = (0..500).map(|i| i % 2 == 0).collect();
        success.shuffle(&mut rng);
        let curve = success_curve(&gnq, &success, 8).unwrap();
        assert!(curve.spearman.unwrap().abs() <= 0.1);
    }

    #[test]
    fn monotone_success_has_high_spearman() {
        // two tied GNQ levels, success exactly above the median
        let gnq: Vec<f64> = (0..500)
            .map(|i| if i % 2 == 0 { 1.0 } else { 100.0 })
            .collect();
        let success: Vec<bool> = gnq.iter().map(|&v| v > 50.5).collect();
        let curve = success_curve(&gnq, &success, 10).unwrap();
        assert!(curve.spearman.unwrap() > 0.9);
        assert_eq!(curve.bins.iter().map(|b| b.count).sum::<usize>(), 500);
    }

    #[test]
    fn median_split_of_distinct_values_caps_spearman() {
        let gnq: Vec<f64> = (1..=500).map(|i| i as f64).collect();
        let success: Vec<bool> = gnq.iter().map(|&v| v > 250.5).collect();
        let rho = success_curve(&gnq, &success, 10).unwrap().spearman.unwrap();
        assert!((rho - 3f64.sqrt() / 2.0).abs() < 1e-4, "{rho}");
    }

    #[test]
    fn zeros_get_their_own_bin() {
        let gnq = [0.0, 0.0, 1.0, 10.0, 100.0];
        let curve = success_curve(&gnq, &[false, false, true, true, true], 2).unwrap();
        assert_eq!(curve.bins[0].count, 2);
        assert_eq!(curve.bins[0].success_rate, Some(0.0));
        assert_eq!(curve.bins.len(), 3);
    }

    #[test]
    fn equal_gnq_is_degenerate() {
        let err = success_curve(&[2.0; 4], &[true, false, true, false], 2).unwrap_err();
        assert!(matches!(err, AuditError::DegenerateBinning(_)));
    }

    #[test]
    fn csv_export_has_one_row_per_example() {
        let r = attack_from_scores(vec![1.0, 0.0, 0.5], vec![true, false, true]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attack.csv");
        r.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("example_id,score,success,membership\n0,1.0,1,1"));
    }
}
