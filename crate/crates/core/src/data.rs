//! Datasets: the seven-point regression replica, synthetic generators and a
//! CSV reader/writer.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<Example>,
    /// Ground-truth training membership, when known.
    pub membership: Option<Vec<bool>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, examples: Vec<Example>) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            examples,
            membership: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.features.len())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for e in &self.examples {
            if e.features.len() != d {
                return Err(AuditError::Shape {
                    expected: d,
                    actual: e.features.len(),
                });
            }
        }
        if let Some(m) = &self.membership {
            if m.len() != self.len() {
                return Err(AuditError::Shape {
                    expected: self.len(),
                    actual: m.len(),
                });
            }
        }
        Ok(())
    }

    pub fn with_membership(mut self, membership: Vec<bool>) -> Result<Self> {
        self.membership = Some(membership);
        self.validate()?;
        Ok(self)
    }

    /// Examples at `indices`, in order; membership is dropped.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        Dataset {
            name: name.into(),
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            membership: None,
        }
    }

    /// Shuffles with `seed` and splits off the last `ceil(fraction * N)`
    /// examples as a held-out set.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(AuditError::Config(format!(
                "holdout fraction must lie in [0, 1), got {fraction}"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (fraction * self.len() as f64).ceil() as usize;
        let (pool, test) = order.split_at(self.len() - n_test);
        Ok((
            self.subset(pool, format!("{}:pool", self.name)),
            self.subset(test, format!("{}:test", self.name)),
        ))
    }
}

/// Seven regression points: six nearly collinear points with slope about 1/2
/// and one outlier far below the line at the right end.
///
/// The six-point least-squares line rises; pulling it toward the outlier
/// rotates it clockwise until the seven-point fit falls, so the outlier's
/// gradient opposes the other six.
pub fn make_fig1_dataset() -> Dataset {
    const POINTS: [(f64, f64); 7] = [
        (1.0, 1.65),
        (2.0, 1.80),
        (3.0, 2.60),
        (4.0, 2.90),
        (5.0, 3.70),
        (6.0, 3.85),
        (9.0, -6.00),
    ];
    Dataset {
        name: "seven-point outlier regression: six points near y = 0.49x + 1.05 on x = 1..6, outlier at (9, -6)"
            .into(),
        examples: POINTS
            .iter()
            .map(|&(x, y)| Example {
                features: vec![x],
                target: y,
            })
            .collect(),
        membership: None,
    }
}

/// Gaussian class blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub n_per_class: Vec<usize>,
    pub means: Vec<Vec<f64>>,
    /// Isotropic standard deviation per class.
    pub std: Vec<f64>,
    /// Fraction of examples whose label is reassigned uniformly at random.
    #[serde(default)]
    pub label_noise: f64,
    pub seed: u64,
}

impl BlobSpec {
    /// Two overlapping blobs in `dim` dimensions, `n` examples in total.
    pub fn two_blobs(n: usize, dim: usize, separation: f64, label_noise: f64, seed: u64) -> Self {
        let mut a = vec![0.0; dim];
        let mut b = vec![0.0; dim];
        a[0] = -separation / 2.0;
        b[0] = separation / 2.0;
        BlobSpec {
            n_per_class: vec![n / 2, n - n / 2],
            means: vec![a, b],
            std: vec![1.0, 1.0],
            label_noise,
            seed,
        }
    }
}

pub fn make_blobs(spec: &BlobSpec) -> Result<Dataset> {
    let classes = spec.n_per_class.len();
    if classes < 2 || spec.means.len() != classes || spec.std.len() != classes {
        return Err(AuditError::Config(
            "blob spec needs >= 2 classes with one mean and one std each".into(),
        ));
    }
    let dim = spec.means[0].len();
    if dim == 0 || spec.means.iter().any(|m| m.len() != dim) {
        return Err(AuditError::Config(
            "blob means must share a positive dimension".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.label_noise) {
        return Err(AuditError::Config("label_noise must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut examples = Vec::with_capacity(spec.n_per_class.iter().sum());
    for (class, &count) in spec.n_per_class.iter().enumerate() {
        for _ in 0..count {
            let features = spec.means[class]
                .iter()
                .map(|mu| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mu + spec.std[class] * z
                })
                .collect();
            let flip = rng.random::<f64>() < spec.label_noise;
            let label = if flip {
                rng.random_range(0..classes)
            } else {
                class
            };
            examples.push(Example {
                features,
                target: label as f64,
            });
        }
    }
    examples.shuffle(&mut rng);
    Dataset::new(format!("blobs(seed={})", spec.seed), examples)
}

/// Linear regression data `y = w.x + b + noise` with standard-normal features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    pub n: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub noise_std: f64,
    pub seed: u64,
}

pub fn make_regression(spec: &RegressionSpec) -> Result<Dataset> {
    if spec.weights.is_empty() {
        return Err(AuditError::Config(
            "regression needs at least one weight".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let examples = (0..spec.n)
        .map(|_| {
            let features: Vec<f64> = spec
                .weights
                .iter()
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let noise: f64 = StandardNormal.sample(&mut rng);
            let y = spec.bias
                + spec
                    .weights
                    .iter()
                    .zip(&features)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
                + spec.noise_std * noise;
            Example {
                features,
                target: y,
            }
        })
        .collect();
    Dataset::new(format!("regression(seed={})", spec.seed), examples)
}

/// Column roles for dataset CSV files. Every other column is a feature, in
/// file order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub target: String,
    #[serde(default)]
    pub membership: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            target: "target".into(),
            membership: None,
        }
    }
}

/// Writes `x0..x{d-1}, target` (plus `member` when membership is known).
/// Floats use the shortest representation that parses back to the same bits.
pub fn write_csv_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| AuditError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut header: Vec<String> = (0..ds.dim()).map(|i| format!("x{i}")).collect();
    header.push("target".into());
    if ds.membership.is_some() {
        header.push("member".into());
    }
    let io = |e| AuditError::io(path, e);
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for (n, e) in ds.examples.iter().enumerate() {
        let mut row: Vec<String> = e.features.iter().map(|v| format!("{v:?}")).collect();
        row.push(format!("{:?}", e.target));
        if let Some(m) = &ds.membership {
            row.push(if m[n] { "1".into() } else { "0".into() });
        }
        writeln!(out, "{}", row.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn load_csv_dataset(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| AuditError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let header = reader.headers()?.clone();
    let parse_err = |line: usize, reason: String| AuditError::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let target_col = header
        .iter()
        .position(|h| h.trim() == schema.target)
        .ok_or_else(|| parse_err(1, format!("no target column `{}`", schema.target)))?;
    let member_col = match &schema.membership {
        Some(name) => Some(
            header
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| parse_err(1, format!("no membership column `{name}`")))?,
        ),
        None => None,
    };
    let feature_cols: Vec<usize> = (0..header.len())
        .filter(|&c| c != target_col && Some(c) != member_col)
        .collect();

    let mut examples = Vec::new();
    let mut membership = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(row + 2, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let cell = |c: usize| -> Result<f64> {
            let raw = record[c].trim();
            raw.parse::<f64>().map_err(|_| {
                parse_err(
                    line,
                    format!("column `{}` holds non-numeric `{raw}`", &header[c]),
                )
            })
        };
        let features = feature_cols
            .iter()
            .map(|&c| cell(c))
            .collect::<Result<Vec<_>>>()?;
        let target = cell(target_col)?;
        if let Some(c) = member_col {
            membership.push(cell(c)? != 0.0);
        }
        examples.push(Example { features, target });
    }
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    let mut ds = Dataset::new(name, examples)?;
    if member_col.is_some() {
        ds = ds.with_membership(membership)?;
    }
    Ok(ds)
}
