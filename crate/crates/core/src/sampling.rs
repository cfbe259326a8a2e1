//! Two-level inclusion process behind mini-batch SGD.
//!
//! A training set is drawn from the public pool (indicator `T[n]`), then every
//! iteration draws a mini-batch from the training set (indicator `M[i][n]`).
//! Mini-batch indicators are `Bernoulli(B / N_t)` given `T[n] = 1`, so the
//! realized batch size is random with expectation `B`.
//!
//! Randomness comes from keyed ChaCha streams: the training-set draw uses a
//! dedicated stream and iteration `i` uses stream `i`, so any iteration can be
//! reproduced without replaying the ones before it.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

/// Stream id reserved for the training-set draw.
const TRAINING_SET_STREAM: u64 = u64::MAX;

/// Largest pool size the exhaustive enumerators accept.
pub const MAX_ENUMERATION_N: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingScheme {
    /// Training set is a uniformly random subset of exactly `N_t` points.
    WithoutReplacement,
    /// Each point joins the training set independently with probability `N_t / N`.
    IndependentBernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n_total: usize,
    pub n_train: usize,
    pub batch_size: usize,
    pub n_iters: usize,
    pub learning_rate: f64,
    pub scheme: SamplingScheme,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(AuditError::Config("batch_size must be at least 1".into()));
        }
        if self.batch_size > self.n_train {
            return Err(AuditError::Config(format!(
                "batch_size {} exceeds n_train {}",
                self.batch_size, self.n_train
            )));
        }
        if self.n_train > self.n_total {
            return Err(AuditError::Config(format!(
                "n_train {} exceeds n_total {}",
                self.n_train, self.n_total
            )));
        }
        if self.n_iters == 0 {
            return Err(AuditError::Config("n_iters must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(AuditError::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// `N_t / N`, the prior probability that a pool point is trained on.
    pub fn train_fraction(&self) -> f64 {
        self.n_train as f64 / self.n_total as f64
    }

    /// `B / N_t`, the per-iteration batch probability of a training point.
    pub fn batch_probability(&self) -> f64 {
        self.batch_size as f64 / self.n_train as f64
    }

    /// Iterations needed to visit `N_t` points once in expectation.
    pub fn iters_per_epoch(&self) -> usize {
        self.n_train.div_ceil(self.batch_size)
    }
}

/// Indicator vectors for one iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndicatorDraw {
    pub t: Vec<bool>,
    pub m: Vec<bool>,
    pub effective_batch: usize,
}

impl IndicatorDraw {
    pub fn batch_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.m
            .iter()
            .enumerate()
            .filter_map(|(n, &inc)| inc.then_some(n))
    }
}

pub(crate) fn keyed_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws the training-set indicators `T[n]`. The result depends only on
/// `(n_total, n_train, scheme, seed)`.
pub fn draw_training_set(cfg: &SamplingConfig) -> Result<Vec<bool>> {
    cfg.validate()?;
    let mut rng = keyed_stream(cfg.seed, TRAINING_SET_STREAM);
    let mut t = vec![false; cfg.n_total];
    match cfg.scheme {
        SamplingScheme::WithoutReplacement => {
            for n in index::sample(&mut rng, cfg.n_total, cfg.n_train) {
                t[n] = true;
            }
        }
        SamplingScheme::IndependentBernoulli => {
            let p = cfg.train_fraction();
            for slot in t.iter_mut() {
                *slot = rng.random::<f64>() < p;
            }
        }
    }
    Ok(t)
}

/// Draws the mini-batch indicators for `iteration` given a training set.
///
/// One uniform is consumed per pool point regardless of membership so the
/// stream position of point `n` never depends on the training set.
pub fn draw_batch(cfg: &SamplingConfig, t: &[bool], iteration: usize) -> Result<IndicatorDraw> {
    cfg.validate()?;
    if t.len() != cfg.n_total {
        return Err(AuditError::Shape {
            expected: cfg.n_total,
            actual: t.len(),
        });
    }
    let q = cfg.batch_probability();
    let mut rng = keyed_stream(cfg.seed, iteration as u64);
    let m: Vec<bool> = t
        .iter()
        .map(|&member| {
            let u = rng.random::<f64>();
            member && u < q
        })
        .collect();
    let effective_batch = m.iter().filter(|&&b| b).count();
    Ok(IndicatorDraw {
        t: t.to_vec(),
        m,
        effective_batch,
    })
}

/// Draws `(T, M_i)` for one iteration. Identical `(cfg, iteration)` pairs give
/// bit-identical draws.
pub fn draw_indicators(cfg: &SamplingConfig, iteration: usize) -> Result<IndicatorDraw> {
    let t = draw_training_set(cfg)?;
    draw_batch(cfg, &t, iteration)
}

/// Closed-form variances of the product indicator `T[n] M[i][n]`.
///
/// `var_given_out` and `var_given_in` describe a point `n != j` conditioned on
/// the membership of a fixed point `j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorMoments {
    pub var_unconditional: f64,
    pub var_given_out: f64,
    pub var_given_in: f64,
    pub var_self_given_in: f64,
    pub kappa: f64,
}

impl IndicatorMoments {
    /// `V[TM] / V[TM | T_j = 0]`.
    pub fn ratio_unconditional_to_out(&self) -> f64 {
        self.var_unconditional / self.var_given_out
    }

    /// `V[TM | T_j = 1] / V[TM | T_j = 0]`.
    pub fn ratio_in_to_out(&self) -> f64 {
        self.var_given_in / self.var_given_out
    }

    /// `V[M_j | T_j = 1] / V[TM | T_j = 1]`, the finite-population counterpart
    /// of `kappa`.
    pub fn ratio_self_to_in(&self) -> f64 {
        self.var_self_given_in / self.var_given_in
    }
}

fn bernoulli_var(p: f64) -> f64 {
    p * (1.0 - p)
}

/// Asymptotic ratio `(N / N_t) (1 - B/N_t) / (1 - B/N)`.
///
/// Equals 1 for `B = N_t = N` (the `0/0` limit along `N_t = N`).
pub fn kappa(cfg: &SamplingConfig) -> f64 {
    let n = cfg.n_total as f64;
    let nt = cfg.n_train as f64;
    let b = cfg.batch_size as f64;
    if cfg.batch_size == cfg.n_total {
        return 1.0;
    }
    (n / nt) * (1.0 - b / nt) / (1.0 - b / n)
}

/// Closed-form indicator variances.
///
/// Under `WithoutReplacement` every entry is exact for finite `N`:
/// `P[T_n M_n = 1 | T_j = 0] = B / (N-1)` and
/// `P[T_n M_n = 1 | T_j = 1] = (B / (N-1)) (N_t - 1) / N_t`.
/// When `N_t = N` the event `T_j = 0` is impossible and `var_given_out` is 0.
/// Under `IndependentBernoulli` the conditional variances for `n != j` equal
/// the unconditional one.
pub fn indicator_moments(cfg: &SamplingConfig) -> Result<IndicatorMoments> {
    cfg.validate()?;
    let n = cfg.n_total as f64;
    let nt = cfg.n_train as f64;
    let b = cfg.batch_size as f64;

    let var_unconditional = bernoulli_var(b / n);
    let var_self_given_in = bernoulli_var(b / nt);
    let (var_given_out, var_given_in) = match cfg.scheme {
        SamplingScheme::IndependentBernoulli => (var_unconditional, var_unconditional),
        SamplingScheme::WithoutReplacement => {
            if cfg.n_total < 2 {
                (0.0, 0.0)
            } else {
                let out = if cfg.n_train == cfg.n_total {
                    0.0
                } else {
                    bernoulli_var(b / (n - 1.0))
                };
                let inn = bernoulli_var((b / (n - 1.0)) * (nt - 1.0) / nt);
                (out, inn)
            }
        }
    };
    Ok(IndicatorMoments {
        var_unconditional,
        var_given_out,
        var_given_in,
        var_self_given_in,
        kappa: kappa(cfg),
    })
}

/// Visits every `(t, m)` indicator assignment with non-zero probability.
///
/// `t` and `m` are bitmasks over the pool (bit `n` for point `n`). Probabilities
/// across all visited states sum to one.
pub(crate) fn for_each_state<F>(cfg: &SamplingConfig, mut visit: F) -> Result<()>
where
    F: FnMut(u32, u32, f64),
{
    cfg.validate()?;
    if cfg.n_total > MAX_ENUMERATION_N {
        return Err(AuditError::Capacity(format!(
            "exhaustive enumeration supports N <= {MAX_ENUMERATION_N}, got N = {}",
            cfg.n_total
        )));
    }
    let n = cfg.n_total;
    let q = cfg.batch_probability();
    match cfg.scheme {
        SamplingScheme::IndependentBernoulli => {
            let p_in = cfg.train_fraction();
            // per-point states: 0 = out, 1 = in but not batched, 2 = batched
            let probs = [1.0 - p_in, p_in * (1.0 - q), p_in * q];
            let total_states = 3usize.pow(n as u32);
            for code in 0..total_states {
                let mut rest = code;
                let mut t = 0u32;
                let mut m = 0u32;
                let mut prob = 1.0;
                for point in 0..n {
                    let s = rest % 3;
                    rest /= 3;
                    prob *= probs[s];
                    if s >= 1 {
                        t |= 1 << point;
                    }
                    if s == 2 {
                        m |= 1 << point;
                    }
                }
                if prob > 0.0 {
                    visit(t, m, prob);
                }
            }
        }
        SamplingScheme::WithoutReplacement => {
            let p_subset = 1.0 / binomial(n, cfg.n_train);
            for t in 0u32..(1u32 << n) {
                if t.count_ones() as usize != cfg.n_train {
                    continue;
                }
                // iterate all submasks of t, including the empty one
                let mut m = t;
                loop {
                    let batched = m.count_ones() as i32;
                    let idle = cfg.n_train as i32 - batched;
                    let prob = p_subset * q.powi(batched) * (1.0 - q).powi(idle);
                    if prob > 0.0 {
                        visit(t, m, prob);
                    }
                    if m == 0 {
                        break;
                    }
                    m = (m - 1) & t;
                }
            }
        }
    }
    Ok(())
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Compensated (Neumaier) accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Accum {
    sum: f64,
    comp: f64,
}

impl Accum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Exact moments of the product indicators, obtained by exhaustive
/// enumeration of every indicator assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactMomentTable {
    pub scheme: SamplingScheme,
    pub j: usize,
    /// Representative pool point `n != j` used for the marginal entries.
    pub n: usize,
    /// Second point `m != n, j` used for the cross covariances.
    pub m: Option<usize>,
    pub var_unconditional: f64,
    pub var_given_out: f64,
    pub var_given_in: f64,
    pub var_self_given_in: f64,
    pub cross_cov_unconditional: Option<f64>,
    pub cross_cov_given_out: Option<f64>,
    pub cross_cov_given_in: Option<f64>,
    /// Largest marginal-variance discrepancy across all `n != j`; zero by symmetry.
    pub marginal_spread: f64,
}

#[derive(Default, Clone)]
struct CondSums {
    weight: Accum,
    x: Vec<Accum>,
    xx: Vec<Accum>,
    cross: Accum,
}

impl CondSums {
    fn new(n: usize) -> Self {
        CondSums {
            weight: Accum::default(),
            x: vec![Accum::default(); n],
            xx: vec![Accum::default(); n],
            cross: Accum::default(),
        }
    }

    fn var(&self, k: usize) -> f64 {
        let w = self.weight.value();
        if w <= 0.0 {
            return 0.0;
        }
        let mean = self.x[k].value() / w;
        // indicators are 0/1, so E[X^2] = E[X]
        (self.xx[k].value() / w - mean * mean).max(0.0)
    }

    fn cov(&self, a: usize, b: usize) -> f64 {
        let w = self.weight.value();
        if w <= 0.0 {
            return 0.0;
        }
        self.cross.value() / w - (self.x[a].value() / w) * (self.x[b].value() / w)
    }
}

/// Exact indicator moments by enumerating all `(t, m)` assignments.
///
/// Errors with a capacity error for `N > 14`.
pub fn enumerate_exact_moments(cfg: &SamplingConfig, j: usize) -> Result<ExactMomentTable> {
    cfg.validate()?;
    let n_total = cfg.n_total;
    if j >= n_total {
        return Err(AuditError::Domain(format!(
            "index {j} outside pool of size {n_total}"
        )));
    }
    let n = (j + 1) % n_total;
    let m = (n_total >= 3).then(|| (j + 2) % n_total);
    let mut all = CondSums::new(n_total);
    let mut out = CondSums::new(n_total);
    let mut inn = CondSums::new(n_total);
    let jbit = 1u32 << j;

    for_each_state(cfg, |t, mask, prob| {
        let x = |k: usize| (mask >> k) & 1 == 1;
        let cond = if t & jbit != 0 { &mut inn } else { &mut out };
        for sums in [&mut all, cond] {
            sums.weight.add(prob);
            for k in 0..n_total {
                if x(k) {
                    sums.x[k].add(prob);
                    sums.xx[k].add(prob);
                }
            }
            if let Some(m) = m {
                if x(n) && x(m) {
                    sums.cross.add(prob);
                }
            }
        }
    })?;

    let mut marginal_spread: f64 = 0.0;
    let reference = [all.var(n), out.var(n), inn.var(n)];
    for k in (0..n_total).filter(|&k| k != j) {
        for (sums, r) in [&all, &out, &inn].iter().zip(reference) {
            marginal_spread = marginal_spread.max((sums.var(k) - r).abs());
        }
    }

    Ok(ExactMomentTable {
        scheme: cfg.scheme,
        j,
        n,
        m,
        var_unconditional: all.var(n),
        var_given_out: out.var(n),
        var_given_in: inn.var(n),
        var_self_given_in: inn.var(j),
        cross_cov_unconditional: m.map(|m| all.cov(n, m)),
        cross_cov_given_out: m.map(|m| out.cov(n, m)),
        cross_cov_given_in: m.map(|m| inn.cov(n, m)),
        marginal_spread,
    })
}
