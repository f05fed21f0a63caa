//! Run configuration: a TOML file whose defaults are fully materialized
//! back into the resolved-config echo, so every run can be reproduced from
//! its output directory alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use activegan::data::{load_idx, make_synthetic, LabeledDataset, SyntheticSpec};
use activegan::evaluation::SweepAxis;
use activegan::training::{Method, TrainConfig};
use activegan::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

/// Where the labeled data comes from and how it is prepared.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Synthetic-family parameters (used when `kind = "synthetic"`).
    pub synthetic: SyntheticSpec,
    /// IDX image/label file paths (used when `kind = "idx"`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// Cap on the number of IDX samples loaded; 0 keeps all.
    pub limit: usize,
    /// Standardize features to zero mean and unit variance.
    pub normalize: bool,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Seed for the train/test split (the synthetic seed lives in
    /// `synthetic.seed`).
    pub split_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> DatasetConfig {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            synthetic: SyntheticSpec::default(),
            images: None,
            labels: None,
            limit: 0,
            normalize: true,
            train_fraction: 0.7,
            val_fraction: 0.0,
            test_fraction: 0.3,
            split_seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut problems = Vec::new();
        match self.kind {
            DatasetKind::Synthetic => {
                if let Err(mut more) = self.synthetic.validate() {
                    problems.append(&mut more);
                }
            }
            DatasetKind::Idx => {
                if self.images.is_none() {
                    problems.push("dataset.images is required when kind = \"idx\"".to_string());
                }
                if self.labels.is_none() {
                    problems.push("dataset.labels is required when kind = \"idx\"".to_string());
                }
            }
        }
        let fractions = [
            ("dataset.train_fraction", self.train_fraction),
            ("dataset.val_fraction", self.val_fraction),
            ("dataset.test_fraction", self.test_fraction),
        ];
        for (name, f) in fractions {
            if !(f.is_finite() && (0.0..=1.0).contains(&f)) {
                problems.push(format!("{} must lie in [0, 1], got {}", name, f));
            }
        }
        let total = self.train_fraction + self.val_fraction + self.test_fraction;
        if total.is_finite() && (total - 1.0).abs() > 1e-9 {
            problems.push(format!(
                "dataset fractions must sum to 1, got {}",
                total
            ));
        }
        if self.train_fraction == 0.0 {
            problems.push("dataset.train_fraction must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }

    /// Load, optionally normalize, and split. Returns (train, test); the
    /// test part is `None` when its fraction is zero.
    pub fn load(&self) -> Result<(LabeledDataset, Option<LabeledDataset>)> {
        let full = match self.kind {
            DatasetKind::Synthetic => make_synthetic(&self.synthetic)?,
            DatasetKind::Idx => {
                let images = self.images.as_ref().expect("validated");
                let labels = self.labels.as_ref().expect("validated");
                let loaded = load_idx(images, labels)?;
                if self.limit > 0 && self.limit < loaded.len() {
                    let indices: Vec<usize> = (0..self.limit).collect();
                    let (features, labels) = loaded.rows(&indices)?;
                    LabeledDataset::new(features, labels, loaded.classes())?
                } else {
                    loaded
                }
            }
        };
        let full = if self.normalize { full.normalize()? } else { full };
        let (train, _val, test) = full.split(
            (self.train_fraction, self.val_fraction, self.test_fraction),
            self.split_seed,
        )?;
        let train =
            train.ok_or_else(|| Error::Contract("empty training split".to_string()))?;
        Ok((train, test))
    }
}

/// How `cmd_evaluate` builds its report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalComparison {
    /// Score only the classifier trained on the real data.
    Baseline,
    /// Steered vs plain vs margin-filtered-plain vs baseline.
    Full,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub comparison: EvalComparison,
    /// Generated samples per method entering the augmented training sets.
    pub generated_count: usize,
    /// Margin threshold of the filtered-plain baseline.
    pub filter_margin: f64,
    /// Also export a 2-D scatter of train/generated/hard-test points.
    pub scatter: bool,
}

impl Default for EvalConfig {
    fn default() -> EvalConfig {
        EvalConfig {
            comparison: EvalComparison::Full,
            generated_count: 500,
            filter_margin: 0.2,
            scatter: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut problems = Vec::new();
        if !(self.filter_margin.is_finite() && (0.0..=1.0).contains(&self.filter_margin)) {
            problems.push(format!(
                "eval.filter_margin must lie in [0, 1], got {}",
                self.filter_margin
            ));
        }
        if self.comparison == EvalComparison::Full && self.generated_count == 0 {
            problems.push("eval.generated_count must be positive for a full comparison".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> SweepConfig {
        SweepConfig {
            axis: SweepAxis::Epsilon,
            values: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 1.0],
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        if self.values.is_empty() {
            Err(vec!["sweep.values must not be empty".to_string()])
        } else {
            Ok(())
        }
    }
}

/// The full run configuration file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Which generator objective `cmd_train` uses.
    pub method: Method,
    /// Output directory; overridable with `--out`.
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            method: Method::ActiveGan,
            out: PathBuf::from("out"),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| {
            Error::Validation(vec![format!("failed to parse {}: {}", path.display(), e)])
        })
    }

    /// Validate every section, collecting all violations into one error.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for section in [
            self.dataset.validate(),
            self.train.validate(),
            self.eval.validate(),
            self.sweep.validate(),
        ] {
            if let Err(mut more) = section {
                problems.append(&mut more);
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Serialize with every default materialized (the reproducibility echo).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Validation(vec![format!("failed to serialize config: {}", e)]))
    }
}
