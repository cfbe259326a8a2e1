//! Mini-batch SGD with two-level sampling, plus GNQ audits of the recorded
//! trajectory.
//!
//! The update is `theta_{i+1} = theta_i - eta * g_hat_i` with
//! `g_hat_i = (1/B) sum_n T_n M_in g_in`, normalized by the expected batch size
//! `B`. Batch gradients are summed in ascending example order so trajectories
//! are bit-reproducible regardless of thread count.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{LeakageBound, LeakageRegime};
use crate::data::Dataset;
use crate::error::{AuditError, Result};
use crate::geometry::{
    gnq_all_diagonal, gnq_all_exact, GnqMode, GnqScore, GradientSet, GramSummary,
    DEFAULT_MAX_EXACT_DIM, DEFAULT_TOL,
};
use crate::linalg::{gram, pinv_quadform};
use crate::models::{per_example_gradient, ModelKind, ModelSpec};
use crate::sampling::{draw_batch, draw_training_set, IndicatorDraw, SamplingConfig};

/// Recorded optimization path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrajectory {
    pub cfg: SamplingConfig,
    pub model: ModelSpec,
    /// `theta_0 ..= theta_{N_r}`.
    pub params_per_iter: Vec<Vec<f64>>,
    /// Indicator draw of every executed iteration.
    pub batch_log: Vec<IndicatorDraw>,
    /// `g_hat_i` of every executed iteration.
    pub updates: Vec<Vec<f64>>,
}

impl TrainingTrajectory {
    pub fn final_params(&self) -> &[f64] {
        self.params_per_iter.last().map_or(&[], Vec::as_slice)
    }

    pub fn training_set(&self) -> &[bool] {
        self.batch_log.first().map_or(&[], |d| d.t.as_slice())
    }
}

/// Observer invoked at every executed iteration with `theta_i`, before the
/// update is applied.
pub trait TrainingHook {
    fn on_iteration(
        &mut self,
        iteration: usize,
        params: &[f64],
        draw: &IndicatorDraw,
    ) -> Result<()>;
}

/// Per-example gradients of every dataset example at `params`.
pub fn gradient_set(
    model: &ModelSpec,
    params: &[f64],
    data: &Dataset,
    iteration: usize,
) -> Result<GradientSet> {
    let vectors = data
        .examples
        .par_iter()
        .map(|e| per_example_gradient(model, params, e))
        .collect::<Result<Vec<_>>>()?;
    GradientSet::new(iteration, vectors)
}

/// One SGD step over the given batch members. Returns `(g_hat, theta_next)`.
pub fn sgd_step(
    model: &ModelSpec,
    params: &[f64],
    data: &Dataset,
    batch: &[usize],
    expected_batch: usize,
    learning_rate: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let grads = batch
        .par_iter()
        .map(|&n| per_example_gradient(model, params, &data.examples[n]))
        .collect::<Result<Vec<_>>>()?;
    let mut g_hat = vec![0.0; params.len()];
    for g in &grads {
        for (acc, v) in g_hat.iter_mut().zip(g) {
            *acc += v;
        }
    }
    let scale = 1.0 / expected_batch as f64;
    for v in g_hat.iter_mut() {
        *v *= scale;
    }
    let next = params
        .iter()
        .zip(&g_hat)
        .map(|(p, g)| p - learning_rate * g)
        .collect();
    Ok((g_hat, next))
}

fn check_compatible(cfg: &SamplingConfig, model: &ModelSpec, data: &Dataset) -> Result<()> {
    cfg.validate()?;
    model.validate()?;
    data.validate()?;
    if data.len() != cfg.n_total {
        return Err(AuditError::Config(format!(
            "dataset has {} examples but n_total is {}",
            data.len(),
            cfg.n_total
        )));
    }
    if data.dim() != model.input_dim {
        return Err(AuditError::Config(format!(
            "dataset dimension {} does not match model input_dim {}",
            data.dim(),
            model.input_dim
        )));
    }
    if model.kind != ModelKind::Linear2D {
        if let Some(bad) = data.examples.iter().find(|e| {
            e.target.fract() != 0.0 || e.target < 0.0 || e.target as usize >= model.n_classes
        }) {
            return Err(AuditError::Config(format!(
                "target {} is not a class index below {}",
                bad.target, model.n_classes
            )));
        }
    }
    Ok(())
}

/// Runs SGD for `cfg.n_iters` iterations over the pool `data`.
pub fn train(
    cfg: &SamplingConfig,
    model: &ModelSpec,
    data: &Dataset,
    hooks: &mut [&mut dyn TrainingHook],
) -> Result<TrainingTrajectory> {
    check_compatible(cfg, model, data)?;
    let t = draw_training_set(cfg)?;
    let mut params = model.init_params();
    let mut params_per_iter = Vec::with_capacity(cfg.n_iters + 1);
    let mut batch_log = Vec::with_capacity(cfg.n_iters);
    let mut updates = Vec::with_capacity(cfg.n_iters);
    params_per_iter.push(params.clone());

    for iteration in 0..cfg.n_iters {
        let draw = draw_batch(cfg, &t, iteration)?;
        for hook in hooks.iter_mut() {
            hook.on_iteration(iteration, &params, &draw)?;
        }
        let batch: Vec<usize> = draw.batch_indices().collect();
        let (g_hat, next) = sgd_step(
            model,
            &params,
            data,
            &batch,
            cfg.batch_size,
            cfg.learning_rate,
        )?;
        if let Some(bad) = g_hat.iter().chain(&next).find(|v| !v.is_finite()) {
            return Err(AuditError::Divergence {
                iteration,
                reason: format!("non-finite value {bad} in gradient or parameters"),
            });
        }
        params = next;
        params_per_iter.push(params.clone());
        batch_log.push(draw);
        updates.push(g_hat);
    }

    Ok(TrainingTrajectory {
        cfg: cfg.clone(),
        model: model.clone(),
        params_per_iter,
        batch_log,
        updates,
    })
}

/// Re-applies the recorded updates to `theta_0`.
pub fn replay(traj: &TrainingTrajectory) -> Vec<Vec<f64>> {
    let eta = traj.cfg.learning_rate;
    let mut out = vec![traj.params_per_iter[0].clone()];
    for g in &traj.updates {
        let prev = out.last().unwrap();
        out.push(prev.iter().zip(g).map(|(p, v)| p - eta * v).collect());
    }
    out
}

/// Writes the per-example gradients of every batch member, as used in the
/// update, to CSV rows `iteration, example_id, g_0, ..`.
pub struct GradientDump<'a, W: Write> {
    model: &'a ModelSpec,
    data: &'a Dataset,
    out: W,
    header_written: bool,
}

impl<'a, W: Write> GradientDump<'a, W> {
    pub fn new(model: &'a ModelSpec, data: &'a Dataset, out: W) -> Self {
        GradientDump {
            model,
            data,
            out,
            header_written: false,
        }
    }

    pub fn into_inner(self) -> W {
        self.out
    }

    fn row(&mut self, iteration: usize, example: usize, g: &[f64]) -> std::io::Result<()> {
        if !self.header_written {
            let cols: Vec<String> = (0..g.len()).map(|p| format!("g_{p}")).collect();
            writeln!(self.out, "iteration,example_id,{}", cols.join(","))?;
            self.header_written = true;
        }
        let vals: Vec<String> = g.iter().map(|v| format!("{v:?}")).collect();
        writeln!(self.out, "{iteration},{example},{}", vals.join(","))
    }
}

impl<W: Write> TrainingHook for GradientDump<'_, W> {
    fn on_iteration(
        &mut self,
        iteration: usize,
        params: &[f64],
        draw: &IndicatorDraw,
    ) -> Result<()> {
        for n in draw.batch_indices() {
            let g = per_example_gradient(self.model, params, &self.data.examples[n])?;
            self.row(iteration, n, &g)
                .map_err(|e| AuditError::Config(format!("gradient dump failed: {e}")))?;
        }
        Ok(())
    }
}

/// Writes `iteration, example_id, mode, gnq, range_ok`.
pub fn write_scores_csv(record: &AuditRecord, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| AuditError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| AuditError::io(path, e);
    writeln!(out, "iteration,example_id,mode,gnq,range_ok").map_err(io)?;
    for s in &record.scores {
        writeln!(
            out,
            "{},{},{},{:?},{}",
            s.iteration,
            s.example,
            s.mode.as_str(),
            s.value,
            u8::from(s.range_ok)
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditCadence {
    /// `theta_i` for every executed iteration `i = 0 .. N_r - 1`.
    EveryIteration,
    /// `theta_i` at the start of every epoch.
    EveryEpoch,
    /// `theta_{N_r}` only.
    FinalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditOptions {
    pub mode: GnqMode,
    pub cadence: AuditCadence,
    pub tol: f64,
    pub regime: LeakageRegime,
}

impl Default for AuditOptions {
    fn default() -> Self {
        AuditOptions {
            mode: GnqMode::FullExact,
            cadence: AuditCadence::FinalOnly,
            tol: DEFAULT_TOL,
            regime: LeakageRegime::Asymptotic,
        }
    }
}

/// Per-example scores and bounds over the audited iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub mode: GnqMode,
    pub cadence: AuditCadence,
    pub audited_iterations: Vec<usize>,
    /// Batch that supplied the Gram matrix at each audited iteration, for the
    /// batch modes.
    pub batch_source: Vec<Option<usize>>,
    /// Sparse `(iteration, example)` table, ordered by iteration then example.
    pub scores: Vec<GnqScore>,
    pub cumulative_gnq: Vec<f64>,
    pub bounds: Vec<LeakageBound>,
    /// Total leakage counting only iterations `i >= 1`.
    pub total_bits_from_iteration_one: Vec<f64>,
    pub range_violations: usize,
    pub vacuous_bounds: usize,
}

impl AuditRecord {
    pub fn scores_at(&self, iteration: usize) -> impl Iterator<Item = &GnqScore> {
        self.scores.iter().filter(move |s| s.iteration == iteration)
    }
}

/// One audit point: parameters plus the batch used by the batch modes.
#[derive(Debug, Clone)]
pub struct AuditPoint<'a> {
    pub iteration: usize,
    pub params: &'a [f64],
    pub batch: Option<(usize, Vec<usize>)>,
}

fn audited_iterations(cfg: &SamplingConfig, cadence: AuditCadence) -> Vec<usize> {
    match cadence {
        AuditCadence::EveryIteration => (0..cfg.n_iters).collect(),
        AuditCadence::EveryEpoch => (0..cfg.n_iters).step_by(cfg.iters_per_epoch()).collect(),
        AuditCadence::FinalOnly => vec![cfg.n_iters],
    }
}

/// Recomputes per-example gradients at the audited iterations and scores
/// them in the requested mode.
pub fn audit(
    traj: &TrainingTrajectory,
    data: &Dataset,
    opts: &AuditOptions,
) -> Result<AuditRecord> {
    check_compatible(&traj.cfg, &traj.model, data)?;
    if traj.params_per_iter.len() != traj.cfg.n_iters + 1 {
        return Err(AuditError::Config("trajectory is incomplete".into()));
    }
    let points: Vec<AuditPoint> = audited_iterations(&traj.cfg, opts.cadence)
        .into_iter()
        .map(|i| {
            // the final model has no batch of its own; use the last drawn one
            let source = i.min(traj.cfg.n_iters - 1);
            AuditPoint {
                iteration: i,
                params: &traj.params_per_iter[i],
                batch: Some((source, traj.batch_log[source].batch_indices().collect())),
            }
        })
        .collect();
    audit_points(&traj.cfg, &traj.model, data, &points, opts)
}

/// Scores every dataset example at each audit point.
pub fn audit_points(
    cfg: &SamplingConfig,
    model: &ModelSpec,
    data: &Dataset,
    points: &[AuditPoint],
    opts: &AuditOptions,
) -> Result<AuditRecord> {
    if opts.mode.is_dense() && model.n_params() > DEFAULT_MAX_EXACT_DIM {
        return Err(AuditError::Capacity(format!(
            "model has {} parameters, above the exact-mode cap of {DEFAULT_MAX_EXACT_DIM}; use diagonal mode",
            model.n_params()
        )));
    }
    let n = data.len();
    let mut scores = Vec::with_capacity(points.len() * n);
    let mut batch_source = Vec::with_capacity(points.len());
    for point in points {
        let grads = gradient_set(model, point.params, data, point.iteration)?;
        let (batch_id, batch) = match &point.batch {
            Some((id, members)) => (Some(*id), members.clone()),
            None => (None, Vec::new()),
        };
        let at_point = match opts.mode {
            GnqMode::FullExact => gnq_all_exact(&grads, opts.tol)?,
            GnqMode::Diagonal => {
                let summary = GramSummary::diagonal(&grads, (0..n).collect(), GnqMode::Diagonal);
                gnq_all_diagonal(&grads, &summary)?
            }
            GnqMode::BatchExact => batch_exact_scores(&grads, &batch, opts.tol),
            GnqMode::BatchDiagonal => {
                let summary = GramSummary::diagonal(&grads, batch.clone(), GnqMode::BatchDiagonal);
                gnq_all_diagonal(&grads, &summary)?
            }
        };
        batch_source.push(
            if matches!(opts.mode, GnqMode::BatchExact | GnqMode::BatchDiagonal) {
                batch_id
            } else {
                None
            },
        );
        scores.extend(at_point);
    }
    finish_record(cfg, model, points, scores, batch_source, opts)
}

/// Batch-mode scores; with fewer than two other batch members every score is
/// 0 and flagged.
fn batch_exact_scores(grads: &GradientSet, batch: &[usize], tol: f64) -> Vec<GnqScore> {
    (0..grads.len())
        .into_par_iter()
        .map(|j| {
            let others: Vec<&[f64]> = batch
                .iter()
                .filter(|&&k| k != j)
                .map(|&k| grads.vectors[k].as_slice())
                .collect();
            let (value, range_ok) = if others.is_empty() {
                (0.0, grads.vectors[j].iter().all(|&x| x == 0.0))
            } else {
                pinv_quadform(gram(grads.dim, others), &grads.vectors[j], tol)
            };
            GnqScore {
                example: j,
                iteration: grads.iteration,
                value,
                mode: GnqMode::BatchExact,
                range_ok,
            }
        })
        .collect()
}

fn finish_record(
    cfg: &SamplingConfig,
    model: &ModelSpec,
    points: &[AuditPoint],
    scores: Vec<GnqScore>,
    batch_source: Vec<Option<usize>>,
    opts: &AuditOptions,
) -> Result<AuditRecord> {
    let n = cfg.n_total;
    let mut per_example: Vec<Vec<f64>> = vec![Vec::with_capacity(points.len()); n];
    let mut cumulative_gnq = vec![0.0; n];
    for s in &scores {
        per_example[s.example].push(s.value);
        cumulative_gnq[s.example] += s.value;
    }
    let regime = match opts.regime {
        LeakageRegime::ExactRatio { .. } => LeakageRegime::ExactRatio {
            n_params: model.n_params(),
        },
        r => r,
    };
    let bounds = per_example
        .iter()
        .enumerate()
        .map(|(j, gnqs)| LeakageBound::from_gnq(j, gnqs, cfg, regime))
        .collect::<Result<Vec<_>>>()?;
    let total_bits_from_iteration_one = bounds
        .iter()
        .map(|b| {
            points
                .iter()
                .zip(&b.per_iteration_bits)
                .filter(|(p, _)| p.iteration >= 1)
                .map(|(_, bits)| bits)
                .sum()
        })
        .collect();
    let range_violations = scores.iter().filter(|s| !s.range_ok).count();
    let vacuous_bounds = bounds.iter().filter(|b| b.bound_vacuous).count();
    Ok(AuditRecord {
        mode: opts.mode,
        cadence: opts.cadence,
        audited_iterations: points.iter().map(|p| p.iteration).collect(),
        batch_source,
        scores,
        cumulative_gnq,
        bounds,
        total_bits_from_iteration_one,
        range_violations,
        vacuous_bounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_fig1_dataset, Example};
    use crate::models::{least_squares_line, loss};
    use crate::sampling::SamplingScheme;

    fn cfg(n: usize, nt: usize, b: usize, iters: usize, eta: f64) -> SamplingConfig {
        SamplingConfig {
            n_total: n,
            n_train: nt,
            batch_size: b,
            n_iters: iters,
            learning_rate: eta,
            scheme: SamplingScheme::WithoutReplacement,
            seed: 3,
        }
    }

    #[test]
    fn zero_learning_rate_freezes_params() {
        let data = make_fig1_dataset();
        let traj = train(
            &cfg(7, 5, 2, 10, 0.0),
            &ModelSpec::linear(1),
            &data,
            &mut [],
        )
        .unwrap();
        assert_eq!(traj.final_params(), traj.params_per_iter[0].as_slice());
        assert_eq!(traj.params_per_iter.len(), 11);
    }

    #[test]
    fn full_batch_loss_is_non_increasing() {
        let examples: Vec<Example> = (0..8)
            .map(|i| Example {
                features: vec![i as f64 * 0.25],
                target: 1.5 * i as f64 * 0.25 - 0.5,
            })
            .collect();
        let data = Dataset::new("line", examples).unwrap();
        let model = ModelSpec::linear(1);
        let traj = train(&cfg(8, 8, 8, 50, 0.1), &model, &data, &mut []).unwrap();
        let total = |p: &[f64]| -> f64 {
            data.examples
                .iter()
                .map(|e| loss(&model, p, e).unwrap())
                .sum()
        };
        for w in traj.params_per_iter.windows(2) {
            assert!(total(&w[1]) <= total(&w[0]) + 1e-15);
        }
    }

    #[test]
    fn single_term_update() {
        let data = Dataset::new(
            "two",
            vec![
                Example {
                    features: vec![1.0],
                    target: 1.0,
                },
                Example {
                    features: vec![2.0],
                    target: 0.0,
                },
            ],
        )
        .unwrap();
        let model = ModelSpec::linear(1);
        let theta0 = vec![0.0, 0.0];
        let (g_hat, next) = sgd_step(&model, &theta0, &data, &[0], 2, 0.5).unwrap();
        let g1 = per_example_gradient(&model, &theta0, &data.examples[0]).unwrap();
        assert_eq!(g_hat, vec![g1[0] / 2.0, g1[1] / 2.0]);
        assert_eq!(next, vec![-(0.5 / 2.0) * g1[0], -(0.5 / 2.0) * g1[1]]);
    }

    #[test]
    fn replay_reproduces_every_iterate() {
        let data = make_fig1_dataset();
        let traj = train(
            &cfg(7, 6, 3, 25, 0.01),
            &ModelSpec::linear(1),
            &data,
            &mut [],
        )
        .unwrap();
        assert_eq!(replay(&traj), traj.params_per_iter);
    }

    #[test]
    fn divergence_is_reported() {
        let data = make_fig1_dataset();
        let err = train(
            &cfg(7, 7, 7, 500, 10.0),
            &ModelSpec::linear(1),
            &data,
            &mut [],
        )
        .unwrap_err();
        assert!(matches!(err, AuditError::Divergence { .. }), "{err}");
    }

    #[test]
    fn duplicate_dataset_has_equal_scores() {
        let examples = vec![
            Example {
                features: vec![1.0],
                target: 3.0
            };
            5
        ];
        let data = Dataset::new("dup", examples).unwrap();
        let c = cfg(5, 4, 2, 3, 0.05);
        let traj = train(&c, &ModelSpec::linear(1), &data, &mut []).unwrap();
        let rec = audit(&traj, &data, &AuditOptions::default()).unwrap();
        let first = rec.cumulative_gnq[0];
        assert!(rec
            .cumulative_gnq
            .iter()
            .all(|&v| (v - first).abs() < 1e-12));
    }

    #[test]
    fn every_iteration_cadence_bookkeeping() {
        let data = make_fig1_dataset();
        let c = cfg(7, 6, 3, 3, 0.01);
        let traj = train(&c, &ModelSpec::linear(1), &data, &mut []).unwrap();
        let opts = AuditOptions {
            cadence: AuditCadence::EveryIteration,
            ..AuditOptions::default()
        };
        let rec = audit(&traj, &data, &opts).unwrap();
        assert_eq!(rec.scores.len(), 3 * 7);
        for j in 0..7 {
            let sum: f64 = rec
                .scores
                .iter()
                .filter(|s| s.example == j)
                .map(|s| s.value)
                .sum();
            assert_eq!(rec.cumulative_gnq[j], sum);
            assert_eq!(rec.bounds[j].per_iteration_bits.len(), 3);
        }
    }

    #[test]
    fn fig1_outlier_ranks_first_at_least_squares_params() {
        let data = make_fig1_dataset();
        let six: Vec<(f64, f64)> = data.examples[..6]
            .iter()
            .map(|e| (e.features[0], e.target))
            .collect();
        let (w, b) = least_squares_line(&six);
        let params = vec![w, b];
        let c = cfg(7, 6, 3, 1, 0.01);
        let point = AuditPoint {
            iteration: 0,
            params: &params,
            batch: None,
        };
        let rec = audit_points(
            &c,
            &ModelSpec::linear(1),
            &data,
            &[point],
            &AuditOptions::default(),
        )
        .unwrap();
        let top = (0..7)
            .max_by(|&a, &b| rec.cumulative_gnq[a].total_cmp(&rec.cumulative_gnq[b]))
            .unwrap();
        assert_eq!(top, 6);
    }

    #[test]
    fn gradient_dump_rows_match_batches() {
        let data = make_fig1_dataset();
        let model = ModelSpec::linear(1);
        let c = cfg(7, 6, 3, 4, 0.01);
        let mut dump = GradientDump::new(&model, &data, Vec::new());
        let traj = train(&c, &model, &data, &mut [&mut dump]).unwrap();
        let text = String::from_utf8(dump.into_inner()).unwrap();
        let rows = traj
            .batch_log
            .iter()
            .map(|d| d.effective_batch)
            .sum::<usize>();
        assert_eq!(text.lines().count(), rows + usize::from(rows > 0));
        if rows > 0 {
            assert!(text.starts_with("iteration,example_id,g_0,g_1\n"));
        }
    }

    #[test]
    fn dataset_size_must_match_config() {
        let data = make_fig1_dataset();
        let err = train(
            &cfg(8, 6, 3, 1, 0.01),
            &ModelSpec::linear(1),
            &data,
            &mut [],
        )
        .unwrap_err();
        assert!(matches!(err, AuditError::Config(_)));
    }
}
