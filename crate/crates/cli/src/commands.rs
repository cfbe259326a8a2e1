//! Subcommand implementations. Each returns the files it wrote.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use gnq_core::attack::{loss_attack, success_vs_gnq, AttackResult, SuccessCurve};
use gnq_core::bounds::{per_iteration_leakage_in, LeakageBound, LeakageRegime};
use gnq_core::data::{write_csv_dataset, Dataset};
use gnq_core::defense::{
    accuracy, rank_examples, run_defense_sweep, write_sweep_csv, DefenseOptions, DefenseReport,
};
use gnq_core::models::loss;
use gnq_core::oracle::run_verification;
use gnq_core::sampling::SamplingConfig;
use gnq_core::trainer::{
    audit, train, write_scores_csv, AuditCadence, AuditRecord, GradientDump, TrainingHook,
    TrainingTrajectory,
};
use gnq_core::{AuditError, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::report::{write_report, write_text};
use crate::Command;

pub struct Options {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dump_gradients: bool,
}

struct Context {
    cfg: RunConfig,
    out: PathBuf,
    dump_gradients: bool,
    written: Vec<PathBuf>,
}

fn prepare(opts: &Options) -> Result<Context> {
    let path = opts
        .config
        .as_ref()
        .ok_or_else(|| AuditError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = opts.seed {
        cfg.sampling.seed = seed;
    }
    cfg.validate()?;
    let out = opts
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out).map_err(|e| AuditError::io(&out, e))?;
    let copy = out.join("config.json");
    write_text(&copy, &(cfg.canonical_json() + "\n"))?;
    Ok(Context {
        cfg,
        out,
        dump_gradients: opts.dump_gradients,
        written: vec![copy],
    })
}

pub fn run(command: &Command, opts: &Options) -> Result<Vec<PathBuf>> {
    let mut ctx = prepare(opts)?;
    match command {
        Command::GenData => gen_data(&mut ctx)?,
        Command::Train => cmd_train(&mut ctx)?,
        Command::Audit { trajectory } => cmd_audit(&mut ctx, trajectory.as_deref())?,
        Command::Bound => cmd_bound(&mut ctx)?,
        Command::Attack => cmd_attack(&mut ctx)?,
        Command::Defend => cmd_defend(&mut ctx)?,
        Command::Oracle { corrupt_kappa } => cmd_oracle(&mut ctx, *corrupt_kappa)?,
    }
    Ok(ctx.written)
}

impl Context {
    fn report<T: Serialize>(&mut self, name: &str, command: &str, body: &T) -> Result<()> {
        let path = write_report(&self.out, name, command, &self.cfg, body)?;
        self.written.push(path);
        Ok(())
    }

    fn file(&mut self, name: &str) -> PathBuf {
        let path = self.out.join(name);
        self.written.push(path.clone());
        path
    }

    /// Trains on the pool, dumping gradients when requested.
    fn train(&mut self, pool: &Dataset) -> Result<TrainingTrajectory> {
        if !self.dump_gradients {
            return train(&self.cfg.sampling, &self.cfg.model, pool, &mut []);
        }
        let path = self.file("gradients.csv");
        let file = File::create(&path).map_err(|e| AuditError::io(&path, e))?;
        let mut dump = GradientDump::new(&self.cfg.model, pool, BufWriter::new(file));
        let traj = train(
            &self.cfg.sampling,
            &self.cfg.model,
            pool,
            &mut [&mut dump as &mut dyn TrainingHook],
        )?;
        let mut writer = dump.into_inner();
        std::io::Write::flush(&mut writer).map_err(|e| AuditError::io(&path, e))?;
        Ok(traj)
    }
}

fn gen_data(ctx: &mut Context) -> Result<()> {
    let data = ctx.cfg.full_dataset()?;
    let path = ctx.file("dataset.csv");
    write_csv_dataset(&data, &path)
}

#[derive(Serialize)]
struct TrainReport {
    dataset: String,
    n_pool: usize,
    n_test: usize,
    n_params: usize,
    iterations: usize,
    training_set_size: usize,
    mean_effective_batch: f64,
    final_params: Vec<f64>,
    mean_member_loss: f64,
    mean_non_member_loss: Option<f64>,
    test_accuracy: Option<f64>,
}

fn mean_loss(
    ctx: &Context,
    traj: &TrainingTrajectory,
    pool: &Dataset,
    members: bool,
) -> Result<Option<f64>> {
    let t = traj.training_set();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (n, e) in pool.examples.iter().enumerate() {
        if t[n] == members {
            sum += loss(&ctx.cfg.model, traj.final_params(), e)?;
            count += 1;
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

fn cmd_train(ctx: &mut Context) -> Result<()> {
    let (pool, test) = ctx.cfg.pool_and_test()?;
    let traj = ctx.train(&pool)?;
    let n_iters = traj.batch_log.len();
    let report = TrainReport {
        dataset: pool.name.clone(),
        n_pool: pool.len(),
        n_test: test.len(),
        n_params: ctx.cfg.model.n_params(),
        iterations: n_iters,
        training_set_size: traj.training_set().iter().filter(|&&b| b).count(),
        mean_effective_batch: traj
            .batch_log
            .iter()
            .map(|d| d.effective_batch as f64)
            .sum::<f64>()
            / n_iters.max(1) as f64,
        final_params: traj.final_params().to_vec(),
        mean_member_loss: mean_loss(ctx, &traj, &pool, true)?.unwrap_or(0.0),
        mean_non_member_loss: mean_loss(ctx, &traj, &pool, false)?,
        test_accuracy: (!test.is_empty())
            .then(|| accuracy(&ctx.cfg.model, traj.final_params(), &test)),
    };
    let path = ctx.file("trajectory.json");
    write_text(&path, &serde_json::to_string(&traj)?)?;
    ctx.report("train_report", "train", &report)
}

#[derive(Serialize)]
struct ExampleEntry {
    example: usize,
    cumulative_gnq: f64,
    total_bits: f64,
    total_bits_from_iteration_one: f64,
    prior_entropy_bits: f64,
    fano_entropy_bits: f64,
    pe_lower: f64,
    bound_vacuous: bool,
}

#[derive(Serialize)]
struct AuditFlags {
    range_violations: usize,
    vacuous_bounds: usize,
}

#[derive(Serialize)]
struct AuditReport {
    dataset: String,
    n_examples: usize,
    n_params: usize,
    mode: &'static str,
    cadence: AuditCadence,
    tol: f64,
    audited_iterations: Vec<usize>,
    batch_source: Vec<Option<usize>>,
    ranking: Vec<usize>,
    examples: Vec<ExampleEntry>,
    flags: AuditFlags,
}

fn load_trajectory(path: &Path) -> Result<TrainingTrajectory> {
    let text = fs::read_to_string(path).map_err(|e| AuditError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn audited(
    ctx: &mut Context,
    trajectory: Option<&Path>,
) -> Result<(Dataset, Dataset, TrainingTrajectory, AuditRecord)> {
    let (pool, test) = ctx.cfg.pool_and_test()?;
    let traj = match trajectory {
        Some(path) => {
            let traj = load_trajectory(path)?;
            if traj.cfg != ctx.cfg.sampling || traj.model != ctx.cfg.model {
                return Err(AuditError::Config(
                    "saved trajectory was produced by a different sampling or model config".into(),
                ));
            }
            traj
        }
        None => ctx.train(&pool)?,
    };
    let record = audit(&traj, &pool, &ctx.cfg.audit)?;
    Ok((pool, test, traj, record))
}

fn cmd_audit(ctx: &mut Context, trajectory: Option<&Path>) -> Result<()> {
    let (pool, _, _, record) = audited(ctx, trajectory)?;
    let examples = record
        .bounds
        .iter()
        .map(|b| ExampleEntry {
            example: b.example,
            cumulative_gnq: record.cumulative_gnq[b.example],
            total_bits: b.total_bits,
            total_bits_from_iteration_one: record.total_bits_from_iteration_one[b.example],
            prior_entropy_bits: b.prior_entropy_bits,
            fano_entropy_bits: b.fano_entropy_bits,
            pe_lower: b.pe_lower,
            bound_vacuous: b.bound_vacuous,
        })
        .collect();
    let report = AuditReport {
        dataset: pool.name.clone(),
        n_examples: pool.len(),
        n_params: ctx.cfg.model.n_params(),
        mode: record.mode.as_str(),
        cadence: record.cadence,
        tol: ctx.cfg.audit.tol,
        audited_iterations: record.audited_iterations.clone(),
        batch_source: record.batch_source.clone(),
        ranking: rank_examples(&record),
        examples,
        flags: AuditFlags {
            range_violations: record.range_violations,
            vacuous_bounds: record.vacuous_bounds,
        },
    };
    let scores = ctx.file("scores.csv");
    write_scores_csv(&record, &scores)?;
    ctx.report("audit_report", "audit", &report)
}

/// Totals under both variance regimes, whichever one the config selected.
#[derive(Serialize)]
struct RegimeComparison {
    asymptotic_total_bits: Vec<f64>,
    exact_ratio_total_bits: Vec<f64>,
    max_abs_gap_bits: f64,
}

fn compare_regimes(
    record: &AuditRecord,
    cfg: &SamplingConfig,
    n_params: usize,
) -> Result<RegimeComparison> {
    let n = record.cumulative_gnq.len();
    let mut asymptotic = vec![0.0; n];
    let mut exact = vec![0.0; n];
    for s in &record.scores {
        asymptotic[s.example] += per_iteration_leakage_in(s.value, cfg, LeakageRegime::Asymptotic)?;
        exact[s.example] +=
            per_iteration_leakage_in(s.value, cfg, LeakageRegime::ExactRatio { n_params })?;
    }
    let max_abs_gap_bits = asymptotic
        .iter()
        .zip(&exact)
        .map(|(a, e)| (a - e).abs())
        .fold(0.0, f64::max);
    Ok(RegimeComparison {
        asymptotic_total_bits: asymptotic,
        exact_ratio_total_bits: exact,
        max_abs_gap_bits,
    })
}

#[derive(Serialize)]
struct BoundReport {
    regime: LeakageRegime,
    audited_iterations: Vec<usize>,
    min_pe_lower: f64,
    mean_pe_lower: f64,
    vacuous_bounds: usize,
    regime_comparison: RegimeComparison,
    bounds: Vec<LeakageBound>,
}

fn cmd_bound(ctx: &mut Context) -> Result<()> {
    let (_, _, _, record) = audited(ctx, None)?;
    let n = record.bounds.len().max(1) as f64;
    let report = BoundReport {
        regime: ctx.cfg.audit.regime,
        audited_iterations: record.audited_iterations.clone(),
        min_pe_lower: record
            .bounds
            .iter()
            .map(|b| b.pe_lower)
            .fold(f64::INFINITY, f64::min),
        mean_pe_lower: record.bounds.iter().map(|b| b.pe_lower).sum::<f64>() / n,
        vacuous_bounds: record.vacuous_bounds,
        regime_comparison: compare_regimes(&record, &ctx.cfg.sampling, ctx.cfg.model.n_params())?,
        bounds: record.bounds,
    };
    ctx.report("bound_report", "bound", &report)
}

#[derive(Serialize)]
struct AttackReport {
    auc: f64,
    threshold: f64,
    success_rate: f64,
    curve: SuccessCurve,
}

fn cmd_attack(ctx: &mut Context) -> Result<()> {
    let (pool, _, traj, record) = audited(ctx, None)?;
    let labeled = pool.clone().with_membership(traj.training_set().to_vec())?;
    let result: AttackResult = loss_attack(&ctx.cfg.model, traj.final_params(), &labeled)?;
    let curve = success_vs_gnq(&result, &record, ctx.cfg.attack.n_bins)?;
    let csv = ctx.file("attack.csv");
    result.write_csv(&csv)?;
    let report = AttackReport {
        auc: result.auc,
        threshold: result.threshold,
        success_rate: result.success_rate(),
        curve,
    };
    ctx.report("attack_report", "attack", &report)
}

#[derive(Serialize)]
struct DefendReport {
    reports: Vec<DefenseReport>,
}

fn cmd_defend(ctx: &mut Context) -> Result<()> {
    let (pool, test) = ctx.cfg.pool_and_test()?;
    if test.is_empty() {
        return Err(AuditError::Config(
            "defend needs a held-out test split; set dataset.holdout_fraction".into(),
        ));
    }
    let opts = DefenseOptions {
        audit: ctx.cfg.audit,
        seed_offset: ctx.cfg.defense.seed_offset,
    };
    let reports = run_defense_sweep(
        &ctx.cfg.sampling,
        &ctx.cfg.model,
        &pool,
        &test,
        &ctx.cfg.defense.fractions,
        &opts,
    )?;
    let sweep = ctx.file("sweep.csv");
    write_sweep_csv(&reports, &sweep)?;
    ctx.report("defense_report", "defend", &DefendReport { reports })
}

fn cmd_oracle(ctx: &mut Context, corrupt_kappa: Option<f64>) -> Result<()> {
    let mut opts = ctx.cfg.oracle.clone();
    if corrupt_kappa.is_some() {
        opts.corrupt_kappa = corrupt_kappa;
    }
    let report = run_verification(&opts)?;
    ctx.report("oracle_report", "oracle", &report)?;
    match report.first_failure() {
        None => Ok(()),
        Some(check) => Err(AuditError::Verification {
            formula: check.formula.clone(),
            detail: format!(
                "max abs error {:e} exceeds tolerance {:e}",
                check.max_abs_error, check.tolerance
            ),
        }),
    }
}
