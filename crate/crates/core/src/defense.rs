//! Rank, remove the top-p fraction by cumulative GNQ, retrain, and compare
//! attack success and test accuracy before and after.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{loss_attack, AttackResult};
use crate::data::Dataset;
use crate::error::{AuditError, Result};
use crate::models::{predict, ModelSpec};
use crate::sampling::SamplingConfig;
use crate::trainer::{audit, train, AuditOptions, AuditRecord, TrainingTrajectory};

/// Example indices by descending cumulative GNQ; ties keep ascending index.
pub fn rank_examples(audit: &AuditRecord) -> Vec<usize> {
    rank_by_score(&audit.cumulative_gnq)
}

pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Minimum and mean of the per-example Fano lower bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub min_pe_lower: f64,
    pub mean_pe_lower: f64,
}

impl BoundSummary {
    fn over(values: impl Iterator<Item = f64>) -> Self {
        let (mut min, mut sum, mut count) = (f64::INFINITY, 0.0, 0usize);
        for v in values {
            min = min.min(v);
            sum += v;
            count += 1;
        }
        if count == 0 {
            return BoundSummary {
                min_pe_lower: 0.0,
                mean_pe_lower: 0.0,
            };
        }
        BoundSummary {
            min_pe_lower: min,
            mean_pe_lower: sum / count as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub removed_fraction: f64,
    /// Pool indices (in the original pool) that were dropped.
    pub removed_ids: Vec<usize>,
    pub auc_before: f64,
    pub auc_after: f64,
    pub test_accuracy_before: f64,
    pub test_accuracy_after: f64,
    pub bound_before: BoundSummary,
    pub bound_after: BoundSummary,
    /// Baseline bounds restricted to the examples that survived filtering.
    pub bound_before_survivors: BoundSummary,
    pub retrain_cfg: SamplingConfig,
    pub retrain_seed_offset: u64,
    /// How the accuracy split was made, for the report reader.
    pub test_split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseOptions {
    pub audit: AuditOptions,
    /// Added to the sampling seed for the retraining run.
    #[serde(default)]
    pub seed_offset: u64,
}

/// Trained and audited model on the full pool.
#[derive(Debug, Clone)]
pub struct DefenseBaseline {
    pub trajectory: TrainingTrajectory,
    pub audit: AuditRecord,
    pub attack: AttackResult,
    pub ranking: Vec<usize>,
    pub test_accuracy: f64,
}

pub fn accuracy(model: &ModelSpec, params: &[f64], data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = data
        .examples
        .iter()
        .filter(|e| predict(model, params, &e.features) == e.target)
        .count();
    hits as f64 / data.len() as f64
}

fn with_training_membership(pool: &Dataset, traj: &TrainingTrajectory) -> Result<Dataset> {
    pool.clone().with_membership(traj.training_set().to_vec())
}

/// Trains on the full pool, audits, attacks, and ranks.
pub fn defense_baseline(
    cfg: &SamplingConfig,
    model: &ModelSpec,
    pool: &Dataset,
    test: &Dataset,
    opts: &DefenseOptions,
) -> Result<DefenseBaseline> {
    let trajectory = train(cfg, model, pool, &mut [])?;
    let audit = audit(&trajectory, pool, &opts.audit)?;
    let labeled = with_training_membership(pool, &trajectory)?;
    let attack = loss_attack(model, trajectory.final_params(), &labeled)?;
    let ranking = rank_examples(&audit);
    let test_accuracy = accuracy(model, trajectory.final_params(), test);
    Ok(DefenseBaseline {
        trajectory,
        audit,
        attack,
        ranking,
        test_accuracy,
    })
}

/// Sampling config for the filtered pool: the training fraction and the
/// number of epochs are kept, the batch size is unchanged.
pub fn filtered_config(
    cfg: &SamplingConfig,
    n_kept: usize,
    seed_offset: u64,
) -> Result<SamplingConfig> {
    let n_train = ((n_kept * cfg.n_train) as f64 / cfg.n_total as f64).round() as usize;
    if n_train < cfg.batch_size {
        return Err(AuditError::Config(format!(
            "filtered training set of {n_train} is smaller than the batch size {}",
            cfg.batch_size
        )));
    }
    let epochs = cfg.n_iters as f64 / cfg.iters_per_epoch() as f64;
    let mut next = SamplingConfig {
        n_total: n_kept,
        n_train,
        seed: cfg.seed.wrapping_add(seed_offset),
        ..cfg.clone()
    };
    next.n_iters = (epochs * next.iters_per_epoch() as f64).round().max(1.0) as usize;
    next.validate()?;
    Ok(next)
}

/// Removes the top `ceil(p N)` ranked pool examples, retrains, and compares.
pub fn apply_defense(
    base: &DefenseBaseline,
    model: &ModelSpec,
    pool: &Dataset,
    test: &Dataset,
    p: f64,
    opts: &DefenseOptions,
) -> Result<DefenseReport> {
    if !(0.0..1.0).contains(&p) {
        return Err(AuditError::Config(format!(
            "removal fraction {p} is outside [0, 1)"
        )));
    }
    let cfg = &base.trajectory.cfg;
    let n = pool.len();
    let k = ((p * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let removed_ids: Vec<usize> = base.ranking[..k].to_vec();
    let mut removed = vec![false; n];
    for &r in &removed_ids {
        removed[r] = true;
    }
    let kept: Vec<usize> = (0..n).filter(|&i| !removed[i]).collect();

    let bound_before = BoundSummary::over(base.audit.bounds.iter().map(|b| b.pe_lower));
    let bound_before_survivors =
        BoundSummary::over(kept.iter().map(|&i| base.audit.bounds[i].pe_lower));

    let (retrain_cfg, trajectory, after_audit, after_attack) = if k == 0 {
        (
            cfg.clone(),
            base.trajectory.clone(),
            base.audit.clone(),
            base.attack.clone(),
        )
    } else {
        let filtered = pool.subset(&kept, format!("{}-filtered", pool.name));
        let retrain_cfg = filtered_config(cfg, kept.len(), opts.seed_offset)?;
        let trajectory = train(&retrain_cfg, model, &filtered, &mut [])?;
        let after_audit = audit(&trajectory, &filtered, &opts.audit)?;
        let labeled = with_training_membership(&filtered, &trajectory)?;
        let after_attack = loss_attack(model, trajectory.final_params(), &labeled)?;
        (retrain_cfg, trajectory, after_audit, after_attack)
    };

    Ok(DefenseReport {
        removed_fraction: p,
        removed_ids,
        auc_before: base.attack.auc,
        auc_after: after_attack.auc,
        test_accuracy_before: base.test_accuracy,
        test_accuracy_after: accuracy(model, trajectory.final_params(), test),
        bound_before,
        bound_after: BoundSummary::over(after_audit.bounds.iter().map(|b| b.pe_lower)),
        bound_before_survivors,
        retrain_cfg,
        retrain_seed_offset: if k == 0 { 0 } else { opts.seed_offset },
        test_split: format!("held-out set of {} examples never in the pool", test.len()),
    })
}

/// Baseline plus a single removal fraction.
pub fn run_defense(
    cfg: &SamplingConfig,
    model: &ModelSpec,
    pool: &Dataset,
    test: &Dataset,
    p: f64,
    opts: &DefenseOptions,
) -> Result<DefenseReport> {
    let base = defense_baseline(cfg, model, pool, test, opts)?;
    apply_defense(&base, model, pool, test, p, opts)
}

/// One baseline, several removal fractions.
pub fn run_defense_sweep(
    cfg: &SamplingConfig,
    model: &ModelSpec,
    pool: &Dataset,
    test: &Dataset,
    fractions: &[f64],
    opts: &DefenseOptions,
) -> Result<Vec<DefenseReport>> {
    let base = defense_baseline(cfg, model, pool, test, opts)?;
    fractions
        .iter()
        .map(|&p| apply_defense(&base, model, pool, test, p, opts))
        .collect()
}

/// Writes `p, auc_before, auc_after, acc_before, acc_after`.
pub fn write_sweep_csv(reports: &[DefenseReport], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| AuditError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| AuditError::io(path, e);
    writeln!(out, "p,auc_before,auc_after,acc_before,acc_after").map_err(io)?;
    for r in reports {
        writeln!(
            out,
            "{:?},{:?},{:?},{:?},{:?}",
            r.removed_fraction,
            r.auc_before,
            r.auc_after,
            r.test_accuracy_before,
            r.test_accuracy_after
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, make_fig1_dataset, BlobSpec};
    use crate::models::{InitScheme, ModelKind};
    use crate::sampling::SamplingScheme;
    use crate::trainer::{audit_points, AuditPoint};

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_by_score(&[0.1, 0.9, 0.5]), vec![1, 2, 0]);
        assert_eq!(rank_by_score(&[2.0; 5]), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn fig1_outlier_is_ranked_first() {
        let data = make_fig1_dataset();
        let six: Vec<(f64, f64)> = data.examples[..6]
            .iter()
            .map(|e| (e.features[0], e.target))
            .collect();
        let (w, b) = crate::models::least_squares_line(&six);
        let params = [w, b];
        let cfg = SamplingConfig {
            n_total: 7,
            n_train: 6,
            batch_size: 3,
            n_iters: 1,
            learning_rate: 0.01,
            scheme: SamplingScheme::WithoutReplacement,
            seed: 0,
        };
        let point = AuditPoint {
            iteration: 0,
            params: &params,
            batch: None,
        };
        let rec = audit_points(
            &cfg,
            &ModelSpec::linear(1),
            &data,
            &[point],
            &AuditOptions::default(),
        )
        .unwrap();
        assert_eq!(rank_examples(&rec)[0], 6);
    }

    fn small_setup() -> (SamplingConfig, ModelSpec, Dataset, Dataset) {
        let data = make_blobs(&BlobSpec::two_blobs(50, 2, 3.0, 0.1, 5)).unwrap();
        let (pool, test) = data.split_holdout(0.2, 5).unwrap();
        let cfg = SamplingConfig {
            n_total: pool.len(),
            n_train: pool.len() / 2,
            batch_size: 10,
            n_iters: 40,
            learning_rate: 0.5,
            scheme: SamplingScheme::WithoutReplacement,
            seed: 9,
        };
        let model = ModelSpec {
            kind: ModelKind::Mlp,
            input_dim: 2,
            hidden_dim: 4,
            n_classes: 2,
            init: InitScheme::SeededGaussian {
                scale: 0.5,
                seed: 1,
            },
        };
        (cfg, model, pool, test)
    }

    #[test]
    fn zero_fraction_changes_nothing() {
        let (cfg, model, pool, test) = small_setup();
        let opts = DefenseOptions {
            audit: AuditOptions::default(),
            seed_offset: 0,
        };
        let r = run_defense(&cfg, &model, &pool, &test, 0.0, &opts).unwrap();
        assert!(r.removed_ids.is_empty());
        assert_eq!(r.auc_after, r.auc_before);
        assert_eq!(r.test_accuracy_after, r.test_accuracy_before);
    }

    #[test]
    fn removal_count_uses_ceiling_and_matches_ranking() {
        let (cfg, model, pool, test) = small_setup();
        let opts = DefenseOptions {
            audit: AuditOptions::default(),
            seed_offset: 0,
        };
        let base = defense_baseline(&cfg, &model, &pool, &test, &opts).unwrap();
        let r = apply_defense(&base, &model, &pool, &test, 0.1, &opts).unwrap();
        assert_eq!(r.removed_ids.len(), 4);
        assert_eq!(r.removed_ids, base.ranking[..4].to_vec());
        let again = apply_defense(&base, &model, &pool, &test, 0.1, &opts).unwrap();
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }

    #[test]
    fn tiny_filtered_set_is_a_config_error() {
        let cfg = SamplingConfig {
            n_total: 100,
            n_train: 20,
            batch_size: 20,
            n_iters: 5,
            learning_rate: 0.1,
            scheme: SamplingScheme::WithoutReplacement,
            seed: 0,
        };
        assert!(matches!(
            filtered_config(&cfg, 80, 0),
            Err(AuditError::Config(_))
        ));
        assert_eq!(filtered_config(&cfg, 100, 0).unwrap(), cfg);
    }

    #[test]
    fn sweep_csv_has_a_row_per_fraction() {
        let (cfg, model, pool, test) = small_setup();
        let opts = DefenseOptions {
            audit: AuditOptions::default(),
            seed_offset: 1,
        };
        let reports =
            run_defense_sweep(&cfg, &model, &pool, &test, &[0.01, 0.05, 0.1], &opts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep_csv(&reports, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 4);
    }
}
