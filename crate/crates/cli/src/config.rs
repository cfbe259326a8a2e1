//! Run configuration: one JSON document describing the experiment.

use std::fs;
use std::path::{Path, PathBuf};

use gnq_core::data::{
    load_csv_dataset, make_blobs, make_fig1_dataset, make_regression, BlobSpec, CsvSchema, Dataset,
    RegressionSpec,
};
use gnq_core::oracle::OracleOptions;
use gnq_core::sampling::SamplingConfig;
use gnq_core::trainer::AuditOptions;
use gnq_core::{AuditError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gnq_core::models::ModelSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Fig1,
    Blobs(BlobSpec),
    Regression(RegressionSpec),
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub source: DatasetSource,
    /// Fraction held out of the pool for test accuracy.
    #[serde(default)]
    pub holdout_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSettings {
    pub fractions: Vec<f64>,
    pub seed_offset: u64,
}

impl Default for DefenseSettings {
    fn default() -> Self {
        DefenseSettings {
            fractions: vec![0.1],
            seed_offset: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    pub n_bins: usize,
}

impl Default for AttackSettings {
    fn default() -> Self {
        AttackSettings { n_bins: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub sampling: SamplingConfig,
    pub model: ModelSpec,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub audit: AuditOptions,
    #[serde(default)]
    pub attack: AttackSettings,
    #[serde(default)]
    pub defense: DefenseSettings,
    #[serde(default)]
    pub oracle: OracleOptions,
    /// Location only, so it is left out of the hash and the saved copy.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AuditError::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        // relative CSV paths are resolved against the config file
        if let DatasetSource::Csv { path: csv, .. } = &mut cfg.dataset.source {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        self.model.validate()?;
        let h = self.dataset.holdout_fraction;
        if !(0.0..1.0).contains(&h) {
            return Err(AuditError::Config(format!(
                "holdout_fraction {h} is outside [0, 1)"
            )));
        }
        if !(self.audit.tol > 0.0 && self.audit.tol < 1.0) {
            return Err(AuditError::Config(format!(
                "audit tol {} is outside (0, 1)",
                self.audit.tol
            )));
        }
        if let Some(p) = self
            .defense
            .fractions
            .iter()
            .find(|p| !(0.0..1.0).contains(*p))
        {
            return Err(AuditError::Config(format!(
                "defense fraction {p} is outside [0, 1)"
            )));
        }
        if self.attack.n_bins < 2 {
            return Err(AuditError::Config(
                "attack n_bins must be at least 2".into(),
            ));
        }
        Ok(())
    }

    /// Canonical JSON of everything that affects results.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical_json().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// The generated or loaded dataset before the holdout split.
    pub fn full_dataset(&self) -> Result<Dataset> {
        match &self.dataset.source {
            DatasetSource::Fig1 => Ok(make_fig1_dataset()),
            DatasetSource::Blobs(spec) => make_blobs(spec),
            DatasetSource::Regression(spec) => make_regression(spec),
            DatasetSource::Csv { path, schema } => load_csv_dataset(path, schema),
        }
    }

    /// `(pool, test)`; the test set is empty without a holdout.
    pub fn pool_and_test(&self) -> Result<(Dataset, Dataset)> {
        let full = self.full_dataset()?;
        if self.dataset.holdout_fraction == 0.0 {
            let empty = full.subset(&[], "test");
            return Ok((full, empty));
        }
        full.split_holdout(self.dataset.holdout_fraction, self.sampling.seed)
    }
}
