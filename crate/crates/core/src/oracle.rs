//! Brute-force checks of the covariance, entropy and leakage formulas on
//! tiny pools.
//!
//! Everything here enumerates every indicator assignment with its exact
//! probability, so the results are ground truth up to floating-point
//! summation.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bounds::{binary_entropy, per_iteration_leakage, prior_entropy};
use crate::error::{AuditError, Result};
use crate::geometry::{gnq_exact, GradientSet, DEFAULT_TOL};
use crate::linalg::{gram, PsdSpectrum};
use crate::sampling::{
    draw_indicators, enumerate_exact_moments, for_each_state, indicator_moments, kappa, Accum,
    SamplingConfig, SamplingScheme, MAX_ENUMERATION_N,
};

/// Largest pool for which exact mutual information is computed.
pub const MAX_MI_N: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CovarianceSource {
    ClosedForm,
    Enumeration,
    MonteCarlo { trials: usize },
}

/// Covariance of `g_hat` unconditionally and given `T_j = 0` / `T_j = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceTriple {
    pub sigma: DMatrix<f64>,
    pub sigma0: DMatrix<f64>,
    pub sigma1: DMatrix<f64>,
    pub source: CovarianceSource,
    pub j: usize,
    pub g_j: Vec<f64>,
}

impl CovarianceTriple {
    /// Largest entrywise difference over the three matrices.
    pub fn max_abs_diff(&self, other: &CovarianceTriple) -> f64 {
        [
            (&self.sigma, &other.sigma),
            (&self.sigma0, &other.sigma0),
            (&self.sigma1, &other.sigma1),
        ]
        .iter()
        .map(|(a, b)| (*a - *b).amax())
        .fold(0.0, f64::max)
    }
}

/// Scalar factors `c1^2 = (1/(B N))(1 - B/N)` and `c2^2 = (1/(B N_t))(1 - B/N_t)`.
pub fn covariance_scales(cfg: &SamplingConfig) -> (f64, f64) {
    let (n, nt, b) = (
        cfg.n_total as f64,
        cfg.n_train as f64,
        cfg.batch_size as f64,
    );
    (
        (1.0 / (b * n)) * (1.0 - b / n),
        (1.0 / (b * nt)) * (1.0 - b / nt),
    )
}

fn check_instance(grads: &GradientSet, cfg: &SamplingConfig, j: usize) -> Result<()> {
    cfg.validate()?;
    if grads.len() != cfg.n_total {
        return Err(AuditError::Shape {
            expected: cfg.n_total,
            actual: grads.len(),
        });
    }
    if j >= grads.len() {
        return Err(AuditError::Domain(format!(
            "index {j} outside pool of size {}",
            grads.len()
        )));
    }
    Ok(())
}

/// Closed-form triple built from the rank-one relations. Exact under the
/// independent-Bernoulli scheme.
pub fn closed_form_covariances(
    grads: &GradientSet,
    cfg: &SamplingConfig,
    j: usize,
) -> Result<CovarianceTriple> {
    check_instance(grads, cfg, j)?;
    let (c1, c2) = covariance_scales(cfg);
    let others = gram(
        grads.dim,
        grads
            .vectors
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != j)
            .map(|(_, v)| v.as_slice()),
    );
    let g = DVector::from_column_slice(&grads.vectors[j]);
    let own = &g * g.transpose();
    let sigma0 = &others * c1;
    Ok(CovarianceTriple {
        sigma: &sigma0 + &own * c1,
        sigma1: &sigma0 + &own * c2,
        sigma0,
        source: CovarianceSource::ClosedForm,
        j,
        g_j: grads.vectors[j].clone(),
    })
}

/// Exact covariance of `g_hat` under the without-replacement scheme:
/// the Bernoulli closed form plus the pairwise term
/// `rho / B^2 (s s^T - sum g g^T)` with `s = sum g` and `rho` the
/// covariance of two distinct product indicators.
pub fn without_replacement_sigma(
    grads: &GradientSet,
    cfg: &SamplingConfig,
) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    let (n, nt, b) = (
        cfg.n_total as f64,
        cfg.n_train as f64,
        cfg.batch_size as f64,
    );
    let (c1, _) = covariance_scales(cfg);
    let all = gram(grads.dim, grads.vectors.iter().map(Vec::as_slice));
    let rho = if cfg.n_total < 2 {
        0.0
    } else {
        -b * b * (n - nt) / (n * n * nt * (n - 1.0))
    };
    let s = grads
        .vectors
        .iter()
        .fold(DVector::zeros(grads.dim), |acc, v| {
            acc + DVector::from_column_slice(v)
        });
    let cross = &s * s.transpose() - &all;
    Ok(all * c1 + cross * (rho / (b * b)))
}

struct MomentSums {
    weight: Accum,
    mean: Vec<Accum>,
    second: Vec<Accum>,
}

impl MomentSums {
    fn new(dim: usize) -> Self {
        MomentSums {
            weight: Accum::default(),
            mean: vec![Accum::default(); dim],
            second: vec![Accum::default(); dim * dim],
        }
    }

    fn mean(&self) -> Vec<f64> {
        let w = self.weight.value();
        self.mean
            .iter()
            .map(|a| if w > 0.0 { a.value() / w } else { 0.0 })
            .collect()
    }

    fn matrix(&self, dim: usize) -> DMatrix<f64> {
        let w = self.weight.value();
        // only the lower triangle is accumulated
        let mut out = DMatrix::from_fn(dim, dim, |r, c| {
            if w > 0.0 && c <= r {
                self.second[r * dim + c].value() / w
            } else {
                0.0
            }
        });
        out.fill_upper_triangle_with_lower_triangle();
        out
    }
}

fn batch_sum(grads: &GradientSet, mask: u32, scale: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (n, g) in grads.vectors.iter().enumerate() {
        if (mask >> n) & 1 == 1 {
            for (o, x) in out.iter_mut().zip(g) {
                *o += x;
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
}

/// Exact triple by summing over every `(t, m)` assignment. Two passes: means
/// first, then centered second moments.
pub fn enumerate_covariances(
    grads: &GradientSet,
    cfg: &SamplingConfig,
    j: usize,
) -> Result<CovarianceTriple> {
    check_instance(grads, cfg, j)?;
    let dim = grads.dim;
    let scale = 1.0 / cfg.batch_size as f64;
    let jbit = 1u32 << j;
    let mut sums = [
        MomentSums::new(dim),
        MomentSums::new(dim),
        MomentSums::new(dim),
    ];
    let mut g_hat = vec![0.0; dim];

    for_each_state(cfg, |t, m, prob| {
        batch_sum(grads, m, scale, &mut g_hat);
        let cond = if t & jbit != 0 { 2 } else { 1 };
        for idx in [0, cond] {
            sums[idx].weight.add(prob);
            for (acc, x) in sums[idx].mean.iter_mut().zip(&g_hat) {
                acc.add(prob * x);
            }
        }
    })?;
    let means: Vec<Vec<f64>> = sums.iter().map(MomentSums::mean).collect();

    let mut centered = vec![0.0; dim];
    for_each_state(cfg, |t, m, prob| {
        batch_sum(grads, m, scale, &mut g_hat);
        let cond = if t & jbit != 0 { 2 } else { 1 };
        for idx in [0, cond] {
            for (c, (x, mu)) in centered.iter_mut().zip(g_hat.iter().zip(&means[idx])) {
                *c = x - mu;
            }
            for r in 0..dim {
                for c in 0..=r {
                    sums[idx].second[r * dim + c].add(prob * centered[r] * centered[c]);
                }
            }
        }
    })?;

    let [all, out, inn] = sums;
    Ok(CovarianceTriple {
        sigma: all.matrix(dim),
        sigma0: out.matrix(dim),
        sigma1: inn.matrix(dim),
        source: CovarianceSource::Enumeration,
        j,
        g_j: grads.vectors[j].clone(),
    })
}

/// Sample covariance triple from `trials` independent indicator draws.
pub fn monte_carlo_covariances(
    grads: &GradientSet,
    cfg: &SamplingConfig,
    j: usize,
    trials: usize,
) -> Result<CovarianceTriple> {
    check_instance(grads, cfg, j)?;
    let dim = grads.dim;
    let scale = 1.0 / cfg.batch_size as f64;
    let mut samples: [Vec<DVector<f64>>; 3] = Default::default();
    for trial in 0..trials {
        let trial_cfg = SamplingConfig {
            seed: cfg.seed.wrapping_add(trial as u64),
            ..cfg.clone()
        };
        let draw = draw_indicators(&trial_cfg, 0)?;
        let mut g_hat = DVector::zeros(dim);
        for n in draw.batch_indices() {
            g_hat += DVector::from_column_slice(&grads.vectors[n]) * scale;
        }
        samples[if draw.t[j] { 2 } else { 1 }].push(g_hat.clone());
        samples[0].push(g_hat);
    }
    let cov = |xs: &[DVector<f64>]| -> DMatrix<f64> {
        if xs.len() < 2 {
            return DMatrix::zeros(dim, dim);
        }
        let mean = xs.iter().fold(DVector::zeros(dim), |a, x| a + x) / xs.len() as f64;
        let mut acc = DMatrix::zeros(dim, dim);
        for x in xs {
            let d = x - &mean;
            acc += &d * d.transpose();
        }
        acc / (xs.len() - 1) as f64
    };
    Ok(CovarianceTriple {
        sigma: cov(&samples[0]),
        sigma0: cov(&samples[1]),
        sigma1: cov(&samples[2]),
        source: CovarianceSource::MonteCarlo { trials },
        j,
        g_j: grads.vectors[j].clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianLeakage {
    /// Via `pdet(A + c q q^T) = pdet(A)(1 + c q^T A^+ q)`.
    pub bits: f64,
    /// Via products of retained eigenvalues of each matrix.
    pub eigen_path_bits: f64,
    /// `g_j` lies in the range of `Sigma0` and no rank changed.
    pub range_ok: bool,
}

/// Gaussian-entropy leakage
/// `1/2 [log2(pdet S / pdet S0) - (N_t/N) log2(pdet S1 / pdet S0)]`.
pub fn gaussian_leakage_from_covariances(
    triple: &CovarianceTriple,
    cfg: &SamplingConfig,
    tol: f64,
) -> Result<GaussianLeakage> {
    cfg.validate()?;
    let (c1, c2) = covariance_scales(cfg);
    let frac = cfg.train_fraction();
    let spec0 = PsdSpectrum::new(triple.sigma0.clone(), tol);
    let g = &triple.g_j;
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(GaussianLeakage {
            bits: 0.0,
            eigen_path_bits: 0.0,
            range_ok: true,
        });
    }
    let (x, residual) = spec0.pinv_quadform(g);
    let in_range = residual <= tol.sqrt() * norm;
    let bits = 0.5 * ((c1 * x).ln_1p() - frac * (c2 * x).ln_1p()) / std::f64::consts::LN_2;

    let spec = PsdSpectrum::new(triple.sigma.clone(), tol);
    let spec1 = PsdSpectrum::new(triple.sigma1.clone(), tol);
    let same_rank = spec.rank() == spec0.rank() && spec1.rank() == spec0.rank();
    let eigen_path_bits = 0.5
        * ((spec.log2_pdet() - spec0.log2_pdet()) - frac * (spec1.log2_pdet() - spec0.log2_pdet()));
    Ok(GaussianLeakage {
        bits,
        eigen_path_bits,
        range_ok: in_range && same_rank,
    })
}

/// Groups indices with bitwise-identical non-zero gradients. Zero gradients
/// get no class since they never move `g_hat`.
fn gradient_classes(grads: &GradientSet) -> Vec<Option<usize>> {
    let mut reps: Vec<&[f64]> = Vec::new();
    grads
        .vectors
        .iter()
        .map(|g| {
            if g.iter().all(|&x| x == 0.0) {
                return None;
            }
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            match reps.iter().position(|r| bits(r) == bits(g)) {
                Some(c) => Some(c),
                None => {
                    reps.push(g);
                    Some(reps.len() - 1)
                }
            }
        })
        .collect()
}

/// Exact `I[T_j; g_hat]` in bits over the discrete joint distribution.
///
/// Atoms are keyed by how many batch members fall in each class of equal
/// gradients, so atoms reached through different indicator patterns with the
/// same value merge exactly.
pub fn exact_discrete_mi(grads: &GradientSet, cfg: &SamplingConfig, j: usize) -> Result<f64> {
    check_instance(grads, cfg, j)?;
    if cfg.n_total > MAX_MI_N {
        return Err(AuditError::Capacity(format!(
            "exact mutual information supports N <= {MAX_MI_N}, got N = {}",
            cfg.n_total
        )));
    }
    let classes = gradient_classes(grads);
    let n_classes = classes.iter().flatten().max().map_or(0, |c| c + 1);
    let jbit = 1u32 << j;
    let mut joint: HashMap<Vec<u8>, [f64; 2]> = HashMap::new();
    let mut p_in = Accum::default();
    let mut key = vec![0u8; n_classes];
    for_each_state(cfg, |t, m, prob| {
        key.iter_mut().for_each(|k| *k = 0);
        for (n, class) in classes.iter().enumerate() {
            if let Some(c) = class {
                if (m >> n) & 1 == 1 {
                    key[*c] += 1;
                }
            }
        }
        let side = usize::from(t & jbit != 0);
        if side == 1 {
            p_in.add(prob);
        }
        joint.entry(key.clone()).or_insert([0.0; 2])[side] += prob;
    })?;

    let p1 = p_in.value();
    let marg = [1.0 - p1, p1];
    let mut atoms: Vec<_> = joint.into_iter().collect();
    atoms.sort_by(|a, b| a.0.cmp(&b.0));
    let mut mi = Accum::default();
    for (_, pair) in atoms {
        let p_atom = pair[0] + pair[1];
        for side in 0..2 {
            if pair[side] > 0.0 && marg[side] > 0.0 {
                mi.add(pair[side] * (pair[side] / (p_atom * marg[side])).log2());
            }
        }
    }
    Ok(mi.value().clamp(0.0, binary_entropy(p1)))
}

/// Settings for the full verification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleOptions {
    pub n_total: usize,
    pub n_params: usize,
    pub n_instances: usize,
    pub seed: u64,
    pub tol: f64,
    /// Multiplies the closed-form kappa before comparing; for exercising the
    /// failure path.
    #[serde(default)]
    pub corrupt_kappa: Option<f64>,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            n_total: 6,
            n_params: 3,
            n_instances: 10,
            seed: 0,
            tol: DEFAULT_TOL,
            corrupt_kappa: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormulaCheck {
    pub formula: String,
    pub scheme: SamplingScheme,
    pub instances: usize,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checks: Vec<FormulaCheck>,
    pub passed: bool,
}

impl VerificationReport {
    pub fn first_failure(&self) -> Option<&FormulaCheck> {
        self.checks.iter().find(|c| !c.passed)
    }
}

/// Standard-normal gradient vectors for `n` examples.
pub fn random_gradients(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<GradientSet> {
    let vectors = (0..n)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    GradientSet::new(0, vectors)
}

/// Every `(N_t, B)` pair with `1 <= B <= N_t <= N`.
fn config_grid(n: usize, scheme: SamplingScheme, seed: u64) -> Vec<SamplingConfig> {
    let mut out = Vec::new();
    for nt in 1..=n {
        for b in 1..=nt {
            out.push(SamplingConfig {
                n_total: n,
                n_train: nt,
                batch_size: b,
                n_iters: 1,
                learning_rate: 0.1,
                scheme,
                seed,
            });
        }
    }
    out
}

struct Tally {
    formula: &'static str,
    scheme: SamplingScheme,
    instances: usize,
    max_err: f64,
    tol: f64,
}

impl Tally {
    fn new(formula: &'static str, scheme: SamplingScheme, tol: f64) -> Self {
        Tally {
            formula,
            scheme,
            instances: 0,
            max_err: 0.0,
            tol,
        }
    }

    fn record(&mut self, err: f64) {
        self.instances += 1;
        // NaN must fail the check
        self.max_err = if err.is_nan() {
            f64::NAN
        } else {
            self.max_err.max(err)
        };
    }

    fn finish(self) -> FormulaCheck {
        FormulaCheck {
            formula: self.formula.into(),
            scheme: self.scheme,
            instances: self.instances,
            max_abs_error: self.max_err,
            tolerance: self.tol,
            passed: self.max_err <= self.tol,
        }
    }
}

/// Runs every enumeration check on random instances of the requested size.
pub fn run_verification(opts: &OracleOptions) -> Result<VerificationReport> {
    let n = opts.n_total;
    if n > MAX_ENUMERATION_N || n > MAX_MI_N {
        return Err(AuditError::Capacity(format!(
            "oracle enumeration supports N <= {}, got N = {n}",
            MAX_ENUMERATION_N.min(MAX_MI_N)
        )));
    }
    if n < 2 || opts.n_params == 0 || opts.n_instances == 0 {
        return Err(AuditError::Config(
            "oracle needs N >= 2, n_params >= 1 and at least one instance".into(),
        ));
    }
    let bern = SamplingScheme::IndependentBernoulli;
    let wor = SamplingScheme::WithoutReplacement;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let grid_b = config_grid(n, bern, opts.seed);
    let grid_w = config_grid(n, wor, opts.seed);

    let mut variances = Tally::new("indicator_variances", wor, 1e-12);
    for cfg in &grid_w {
        let closed = indicator_moments(cfg)?;
        let exact = enumerate_exact_moments(cfg, 0)?;
        for (a, b) in [
            (closed.var_unconditional, exact.var_unconditional),
            (closed.var_given_out, exact.var_given_out),
            (closed.var_given_in, exact.var_given_in),
            (closed.var_self_given_in, exact.var_self_given_in),
        ] {
            variances.record((a - b).abs());
        }
    }

    let mut sigma = Tally::new("covariance_sigma", bern, 1e-12);
    let mut sigma0 = Tally::new("covariance_sigma0", bern, 1e-12);
    let mut sigma1 = Tally::new("covariance_sigma1", bern, 1e-12);
    let mut kappa_check = Tally::new("kappa", bern, 1e-9);
    let mut wor_sigma = Tally::new("covariance_sigma_wor", wor, 1e-12);
    let mut leak = Tally::new("gaussian_leakage", bern, 1e-9);
    let mut pdet_paths = Tally::new("pdet_path_equivalence", bern, 1e-9);
    let mut mi_bounds = Tally::new("discrete_mi_bounds", bern, 0.0);

    for inst in 0..opts.n_instances {
        let grads = random_gradients(n, opts.n_params, &mut rng)?;
        let j = inst % n;
        let cfg_b = &grid_b[inst % grid_b.len()];
        let cfg_w = &grid_w[inst % grid_w.len()];

        let closed = closed_form_covariances(&grads, cfg_b, j)?;
        let exact = enumerate_covariances(&grads, cfg_b, j)?;
        sigma.record((&closed.sigma - &exact.sigma).amax());
        sigma0.record((&closed.sigma0 - &exact.sigma0).amax());
        sigma1.record((&closed.sigma1 - &exact.sigma1).amax());

        // the rank-one parts carry c1^2 and c2^2, whose ratio is kappa
        let g = DVector::from_column_slice(&grads.vectors[j]);
        let gg = (g.transpose() * &g)[0].powi(2);
        let proj = |m: &DMatrix<f64>| (g.transpose() * m * &g)[0] / gg;
        let d_all = proj(&(&exact.sigma - &exact.sigma0));
        let d_in = proj(&(&exact.sigma1 - &exact.sigma0));
        if d_all.abs() > 1e-300 {
            let claimed = kappa(cfg_b) * opts.corrupt_kappa.unwrap_or(1.0);
            let measured = d_in / d_all;
            kappa_check.record((claimed - measured).abs() / measured.abs().max(1.0));
        }

        let wor_exact = enumerate_covariances(&grads, cfg_w, j)?;
        wor_sigma.record((&without_replacement_sigma(&grads, cfg_w)? - &wor_exact.sigma).amax());

        let gl = gaussian_leakage_from_covariances(&closed, cfg_b, opts.tol)?;
        if gl.range_ok {
            let gnq = gnq_exact(&grads, j, opts.tol)?;
            let expected = per_iteration_leakage(gnq.value, cfg_b)?;
            leak.record((gl.bits - expected).abs() / expected.abs().max(1.0));
            pdet_paths.record((gl.bits - gl.eigen_path_bits).abs() / gl.bits.abs().max(1.0));
        }

        let mi = exact_discrete_mi(&grads, cfg_b, j)?;
        let prior = prior_entropy(cfg_b.n_train, cfg_b.n_total)?;
        mi_bounds.record(if (0.0..=prior + 1e-12).contains(&mi) {
            0.0
        } else {
            1.0
        });
    }

    let checks: Vec<FormulaCheck> = [
        variances,
        sigma,
        sigma0,
        sigma1,
        kappa_check,
        wor_sigma,
        leak,
        pdet_paths,
        mi_bounds,
    ]
    .into_iter()
    .map(Tally::finish)
    .collect();
    let passed = checks.iter().all(|c| c.passed);
    Ok(VerificationReport { checks, passed })
}
