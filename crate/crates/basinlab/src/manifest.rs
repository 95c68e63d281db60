//! Experiment manifests: the JSON schema driving `basinlab run`.
//!
//! Manifests are schema-validated before any work starts; unknown keys are
//! rejected with the offending field named, and family-specific requirements
//! (split epochs, teacher parameters) are checked up front.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, BlobsConfig, Dataset, Split};
use crate::ensemble::Family;
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::train::TrainConfig;

/// Dataset section: synthetic mixture or files on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    GaussianBlobs(BlobsConfig),
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
    },
    Csv { train: String, test: String },
}

impl DatasetConfig {
    pub fn build(&self, base_dir: &Path) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::GaussianBlobs(cfg) => cfg.build(),
            DatasetConfig::Idx { train_images, train_labels, test_images, test_labels } => {
                let resolve = |p: &str| base_dir.join(p);
                Ok((
                    crate::data::load_idx(
                        &resolve(train_images),
                        &resolve(train_labels),
                        Split::Train,
                    )?,
                    crate::data::load_idx(
                        &resolve(test_images),
                        &resolve(test_labels),
                        Split::Test,
                    )?,
                ))
            }
            DatasetConfig::Csv { train, test } => Ok((
                crate::data::load_csv(&base_dir.join(train), Split::Train)?,
                crate::data::load_csv(&base_dir.join(test), Split::Test)?,
            )),
        }
    }
}

/// Model section; input dim and class count come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    PlainMlp {
        hidden: Vec<usize>,
        #[serde(default = "default_true")]
        layer_norm: bool,
    },
    ResMlp {
        stream_width: usize,
        block_widths: Vec<usize>,
        #[serde(default = "default_true")]
        layer_norm: bool,
    },
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn to_spec(&self, input_dim: usize, num_classes: usize) -> ModelSpec {
        match self {
            ModelConfig::PlainMlp { hidden, layer_norm } => ModelSpec::PlainMlp {
                input_dim,
                num_classes,
                hidden: hidden.clone(),
                layer_norm: *layer_norm,
            },
            ModelConfig::ResMlp { stream_width, block_widths, layer_norm } => {
                ModelSpec::ResMlp {
                    input_dim,
                    num_classes,
                    stream_width: *stream_width,
                    block_widths: block_widths.clone(),
                    layer_norm: *layer_norm,
                }
            }
        }
    }
}

/// Training section, seed- and member-independent parts only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peak_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_frac: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub carry_split_momentum: bool,
}

impl TrainSection {
    pub fn to_config(&self, master_seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(self.epochs, master_seed);
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.peak_lr {
            cfg.peak_lr = lr;
        }
        if let Some(w) = self.warmup_frac {
            cfg.warmup_frac = w;
        }
        if let Some(m) = self.momentum {
            cfg.momentum = m;
        }
        cfg.augment = self.augment.clone();
        cfg.carry_split_momentum = self.carry_split_momentum;
        cfg
    }
}

/// Ensemble section: family plus its construction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub family: Family,
    pub members: usize,
    /// Split epoch for constrained / distilled families.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distill_epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub floor_lr: Option<f64>,
    /// For permuted bundles: pcd or multi_pcd.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub align_mode: Option<AlignMode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    Pcd,
    MultiPcd,
}

/// Metrics that `run` computes per seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricRequest {
    Accuracy,
    QJoint,
    QPair,
    Diversity,
    Plane,
}

/// A full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub name: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub ensemble: EnsembleSection,
    pub metrics: Vec<MetricRequest>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    /// Dirichlet sample count for joint connectivity.
    #[serde(default = "default_q_joint_samples")]
    pub q_joint_samples: usize,
    /// Points on the pairwise interpolation grid.
    #[serde(default = "default_lambda_points")]
    pub lambda_points: usize,
    /// Plane grid resolution and relative margin.
    #[serde(default = "default_plane_resolution")]
    pub plane_resolution: usize,
    #[serde(default = "default_plane_margin")]
    pub plane_margin: f64,
}

fn default_output_dir() -> String {
    "runs".into()
}
fn default_q_joint_samples() -> usize {
    50
}
fn default_lambda_points() -> usize {
    21
}
fn default_plane_resolution() -> usize {
    25
}
fn default_plane_margin() -> f64 {
    0.2
}

impl ExperimentManifest {
    pub fn from_json(json: &str) -> Result<Self> {
        let manifest: ExperimentManifest =
            serde_json::from_str(json).map_err(|e| Error::Schema(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        Self::from_json(&json)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || self
                .name
                .chars()
                .any(|c| !(c.is_ascii_alphanumeric() || c == '-' || c == '_'))
        {
            return Err(Error::Schema(format!(
                "experiment name {:?} must be non-empty [A-Za-z0-9_-]",
                self.name
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Schema("at least one seed required".into()));
        }
        if self.ensemble.members == 0 {
            return Err(Error::Schema("ensemble needs at least one member".into()));
        }
        if self.train.epochs == 0 {
            return Err(Error::Schema("training needs at least one epoch".into()));
        }
        let e = &self.ensemble;
        match e.family {
            Family::Constrained => {
                let t = e
                    .split_epoch
                    .ok_or_else(|| Error::Schema("constrained family needs split_epoch".into()))?;
                if t > self.train.epochs {
                    return Err(Error::Schema(format!(
                        "split_epoch {t} beyond epochs {}",
                        self.train.epochs
                    )));
                }
            }
            Family::Swe => {
                if e.floor_lr.is_none() {
                    return Err(Error::Schema("swe family needs floor_lr".into()));
                }
            }
            Family::Distilled | Family::DeepDistilled => {
                if e.split_epoch.is_none() || e.beta.is_none() || e.tau.is_none() {
                    return Err(Error::Schema(
                        "distilled families need split_epoch, beta and tau".into(),
                    ));
                }
            }
            Family::Permuted => {
                if e.align_mode.is_none() {
                    return Err(Error::Schema("permuted family needs align_mode".into()));
                }
            }
            Family::Deep => {}
        }
        if let Some(beta) = e.beta {
            if !(0.0..=1.0).contains(&beta) {
                return Err(Error::Schema(format!("beta {beta} outside [0, 1]")));
            }
        }
        if let Some(tau) = e.tau {
            if tau < 1.0 {
                return Err(Error::Schema(format!("tau {tau} must be >= 1")));
            }
        }
        if self.metrics.contains(&MetricRequest::Plane) && self.ensemble.members < 3 {
            return Err(Error::Schema("plane metric needs at least 3 members".into()));
        }
        Ok(())
    }

    /// Distillation epochs default to the budget left after the split.
    pub fn distill_epochs(&self) -> usize {
        self.ensemble
            .distill_epochs
            .unwrap_or_else(|| self.train.epochs - self.ensemble.split_epoch.unwrap_or(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "name": "demo",
            "dataset": {"kind": "gaussian_blobs", "classes": 4, "clusters_per_class": 2,
                        "dim": 2, "spread": 0.25, "n_train": 64, "n_test": 64, "seed": 7},
            "model": {"arch": "plain_mlp", "hidden": [8]},
            "train": {"epochs": 2},
            "ensemble": {"family": "deep", "members": 2},
            "metrics": ["accuracy"],
            "seeds": [1]
        }"#
        .to_string()
    }

    #[test]
    fn minimal_manifest_parses() {
        let m = ExperimentManifest::from_json(&minimal_json()).unwrap();
        assert_eq!(m.name, "demo");
        assert_eq!(m.q_joint_samples, 50);
        assert_eq!(m.output_dir, "runs");
    }

    #[test]
    fn unknown_key_is_schema_error_naming_the_key() {
        let json = minimal_json().replace("\"seeds\"", "\"bogus_key\": 1, \"seeds\"");
        let err = ExperimentManifest::from_json(&json).unwrap_err();
        match err {
            Error::Schema(msg) => assert!(msg.contains("bogus_key"), "message: {msg}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn family_requirements_are_validated() {
        let json = minimal_json().replace(
            r#""family": "deep", "members": 2"#,
            r#""family": "constrained", "members": 2"#,
        );
        assert!(matches!(
            ExperimentManifest::from_json(&json),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn manifest_round_trips_through_json() {
        let m = ExperimentManifest::from_json(&minimal_json()).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let again = ExperimentManifest::from_json(&json).unwrap();
        assert_eq!(m, again);
    }
}
