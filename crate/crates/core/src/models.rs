//! Small differentiable models with exact per-example gradients.
//!
//! Parameters live in one flat vector. Layouts:
//!
//! * `Linear2D`: `[w_0 .. w_{d-1}, b]`, squared loss `1/2 (w.x + b - y)^2`.
//! * `Logistic`: `W` (`C x d`, row-major) then `b` (`C`), softmax cross-entropy.
//! * `Mlp`: `W1` (`H x d`), `b1` (`H`), `W2` (`C x H`), `b2` (`C`), tanh hidden
//!   layer, softmax cross-entropy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{AuditError, Result};
use crate::geometry::DEFAULT_MAX_EXACT_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[serde(rename = "linear", alias = "linear2d")]
    Linear2D,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitScheme {
    Zeros,
    SeededGaussian { scale: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dim: usize,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    pub init: InitScheme,
}

fn default_classes() -> usize {
    2
}

impl ModelSpec {
    pub fn linear(input_dim: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Linear2D,
            input_dim,
            hidden_dim: 0,
            n_classes: 1,
            init: InitScheme::Zeros,
        }
    }

    pub fn n_params(&self) -> usize {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.n_classes);
        match self.kind {
            ModelKind::Linear2D => d + 1,
            ModelKind::Logistic => c * d + c,
            ModelKind::Mlp => h * d + h + c * h + c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(AuditError::Config("input_dim must be positive".into()));
        }
        match self.kind {
            ModelKind::Linear2D => {}
            ModelKind::Logistic if self.n_classes < 2 => {
                return Err(AuditError::Config(
                    "logistic model needs n_classes >= 2".into(),
                ))
            }
            ModelKind::Mlp if self.n_classes < 2 || self.hidden_dim == 0 => {
                return Err(AuditError::Config(
                    "mlp needs n_classes >= 2 and hidden_dim >= 1".into(),
                ))
            }
            _ => {}
        }
        if self.kind == ModelKind::Mlp && self.n_params() > DEFAULT_MAX_EXACT_DIM {
            return Err(AuditError::Capacity(format!(
                "mlp has {} parameters, cap is {DEFAULT_MAX_EXACT_DIM}",
                self.n_params()
            )));
        }
        if let InitScheme::SeededGaussian { scale, .. } = self.init {
            if !(scale.is_finite() && scale >= 0.0) {
                return Err(AuditError::Config(format!("invalid init scale {scale}")));
            }
        }
        Ok(())
    }

    pub fn init_params(&self) -> Vec<f64> {
        let n = self.n_params();
        match self.init {
            InitScheme::Zeros => vec![0.0; n],
            InitScheme::SeededGaussian { scale, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        scale * z
                    })
                    .collect()
            }
        }
    }

    fn check(&self, params: &[f64], example: &Example) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(AuditError::Shape {
                expected: self.n_params(),
                actual: params.len(),
            });
        }
        if example.features.len() != self.input_dim {
            return Err(AuditError::Shape {
                expected: self.input_dim,
                actual: example.features.len(),
            });
        }
        if self.kind != ModelKind::Linear2D {
            class_of(example.target, self.n_classes)?;
        }
        Ok(())
    }
}

fn class_of(target: f64, n_classes: usize) -> Result<usize> {
    if target.fract() != 0.0 || target < 0.0 || target as usize >= n_classes {
        return Err(AuditError::Domain(format!(
            "target {target} is not a class index below {n_classes}"
        )));
    }
    Ok(target as usize)
}

/// Softmax probabilities and `-ln p[class]`, stabilized by the max logit.
fn softmax_xent(logits: &[f64], class: usize) -> (Vec<f64>, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let loss = sum.ln() - (logits[class] - max);
    (probs, loss)
}

fn affine(weights: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    bias.iter()
        .enumerate()
        .map(|(r, b)| {
            b + weights[r * d..(r + 1) * d]
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum::<f64>()
        })
        .collect()
}

struct MlpView<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

fn mlp_view<'a>(spec: &ModelSpec, params: &'a [f64]) -> MlpView<'a> {
    let (d, h, c) = (spec.input_dim, spec.hidden_dim, spec.n_classes);
    let (w1, rest) = params.split_at(h * d);
    let (b1, rest) = rest.split_at(h);
    let (w2, b2) = rest.split_at(c * h);
    MlpView { w1, b1, w2, b2 }
}

/// Class logits (`Logistic`, `Mlp`) or the single prediction (`Linear2D`).
pub fn forward(spec: &ModelSpec, params: &[f64], features: &[f64]) -> Vec<f64> {
    let d = spec.input_dim;
    match spec.kind {
        ModelKind::Linear2D => {
            let (w, b) = params.split_at(d);
            vec![b[0] + w.iter().zip(features).map(|(w, x)| w * x).sum::<f64>()]
        }
        ModelKind::Logistic => {
            let (w, b) = params.split_at(spec.n_classes * d);
            affine(w, b, features)
        }
        ModelKind::Mlp => {
            let v = mlp_view(spec, params);
            let hidden: Vec<f64> = affine(v.w1, v.b1, features)
                .into_iter()
                .map(f64::tanh)
                .collect();
            affine(v.w2, v.b2, &hidden)
        }
    }
}

/// Point-wise loss `l(theta, d)`.
pub fn loss(spec: &ModelSpec, params: &[f64], example: &Example) -> Result<f64> {
    spec.check(params, example)?;
    let out = forward(spec, params, &example.features);
    Ok(match spec.kind {
        ModelKind::Linear2D => 0.5 * (out[0] - example.target).powi(2),
        _ => softmax_xent(&out, example.target as usize).1,
    })
}

/// Predicted class (argmax logit, first on ties) or the regression output.
pub fn predict(spec: &ModelSpec, params: &[f64], features: &[f64]) -> f64 {
    let out = forward(spec, params, features);
    match spec.kind {
        ModelKind::Linear2D => out[0],
        _ => {
            let mut best = 0;
            for (k, v) in out.iter().enumerate() {
                if *v > out[best] {
                    best = k;
                }
            }
            best as f64
        }
    }
}

/// Exact gradient of the loss with respect to the flat parameter vector.
///
/// For `Linear2D` this is `-r [x, 1]` with residual `r = y - (w.x + b)`.
pub fn per_example_gradient(
    spec: &ModelSpec,
    params: &[f64],
    example: &Example,
) -> Result<Vec<f64>> {
    spec.check(params, example)?;
    let x = &example.features;
    let d = spec.input_dim;
    let mut grad = vec![0.0; spec.n_params()];
    match spec.kind {
        ModelKind::Linear2D => {
            let r = example.target - forward(spec, params, x)[0];
            for (g, xi) in grad.iter_mut().zip(x) {
                *g = -r * xi;
            }
            grad[d] = -r;
        }
        ModelKind::Logistic => {
            let c = spec.n_classes;
            let logits = forward(spec, params, x);
            let (mut delta, _) = softmax_xent(&logits, example.target as usize);
            delta[example.target as usize] -= 1.0;
            for (k, dk) in delta.iter().enumerate() {
                for (i, xi) in x.iter().enumerate() {
                    grad[k * d + i] = dk * xi;
                }
                grad[c * d + k] = *dk;
            }
        }
        ModelKind::Mlp => {
            let (h, c) = (spec.hidden_dim, spec.n_classes);
            let v = mlp_view(spec, params);
            let hidden: Vec<f64> = affine(v.w1, v.b1, x).into_iter().map(f64::tanh).collect();
            let logits = affine(v.w2, v.b2, &hidden);
            let (mut delta, _) = softmax_xent(&logits, example.target as usize);
            delta[example.target as usize] -= 1.0;

            let off_b1 = h * d;
            let off_w2 = off_b1 + h;
            let off_b2 = off_w2 + c * h;
            for (k, dk) in delta.iter().enumerate() {
                for (u, hu) in hidden.iter().enumerate() {
                    grad[off_w2 + k * h + u] = dk * hu;
                }
                grad[off_b2 + k] = *dk;
            }
            for u in 0..h {
                let back: f64 = delta
                    .iter()
                    .enumerate()
                    .map(|(k, dk)| dk * v.w2[k * h + u])
                    .sum();
                let pre = back * (1.0 - hidden[u] * hidden[u]);
                for (i, xi) in x.iter().enumerate() {
                    grad[u * d + i] = pre * xi;
                }
                grad[off_b1 + u] = pre;
            }
        }
    }
    Ok(grad)
}

/// Ordinary least-squares line through `(x, y)` points.
pub fn least_squares_line(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let w = sxy / sxx;
    (w, my - w * mx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(x: &[f64], y: f64) -> Example {
        Example {
            features: x.to_vec(),
            target: y,
        }
    }

    #[test]
    fn linear_loss_values() {
        let spec = ModelSpec::linear(1);
        assert_eq!(loss(&spec, &[1.0, 0.0], &ex(&[2.0], 2.0)).unwrap(), 0.0);
        assert_eq!(loss(&spec, &[0.0, 0.0], &ex(&[1.0], 2.0)).unwrap(), 2.0);
    }

    #[test]
    fn linear_gradient_values() {
        let spec = ModelSpec::linear(1);
        assert_eq!(
            per_example_gradient(&spec, &[1.0, 0.0], &ex(&[2.0], 2.0)).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(
            per_example_gradient(&spec, &[0.0, 0.0], &ex(&[1.0], 1.0)).unwrap(),
            vec![-1.0, -1.0]
        );
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let spec = ModelSpec {
            kind: ModelKind::Logistic,
            input_dim: 3,
            hidden_dim: 0,
            n_classes: 4,
            init: InitScheme::Zeros,
        };
        let l = loss(&spec, &spec.init_params(), &ex(&[0.3, -1.0, 2.0], 2.0)).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn shape_errors() {
        let spec = ModelSpec::linear(1);
        assert!(matches!(
            loss(&spec, &[1.0], &ex(&[2.0], 2.0)),
            Err(AuditError::Shape { .. })
        ));
        assert!(matches!(
            per_example_gradient(&spec, &[1.0, 0.0], &ex(&[2.0, 1.0], 2.0)),
            Err(AuditError::Shape { .. })
        ));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let spec = ModelSpec {
            kind: ModelKind::Mlp,
            input_dim: 4,
            hidden_dim: 8,
            n_classes: 3,
            init: InitScheme::SeededGaussian {
                scale: 0.3,
                seed: 11,
            },
        };
        assert_eq!(spec.n_params(), 4 * 8 + 8 + 3 * 8 + 3);
        assert_eq!(spec.init_params(), spec.init_params());
    }

    #[test]
    fn oversized_mlp_is_rejected() {
        let spec = ModelSpec {
            kind: ModelKind::Mlp,
            input_dim: 100,
            hidden_dim: 64,
            n_classes: 2,
            init: InitScheme::Zeros,
        };
        assert!(matches!(spec.validate(), Err(AuditError::Capacity(_))));
    }

    #[test]
    fn least_squares_recovers_exact_line() {
        let pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 2.0 * i as f64 - 1.0)).collect();
        let (w, b) = least_squares_line(&pts);
        assert!((w - 2.0).abs() < 1e-12 && (b + 1.0).abs() < 1e-12);
    }
}
