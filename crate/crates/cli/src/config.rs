//! Experiment configuration: one JSON document, versioned, with unknown keys
//! rejected.

use std::path::Path;

use contrastlab_core::data::{DatasetSpec, FamilySpec, Transformation, TransformationFamily};
use contrastlab_core::eval::NamedDomain;
use contrastlab_core::losses::{LossSpec, ViewMode};
use contrastlab_core::seed;
use contrastlab_core::train::{LrSchedule, NetSpec, OptConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{schema, CliError};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optim: Option<OptSection>,
    #[serde(default)]
    pub eval: EvalPlan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareSection>,
    /// Default output directory; `--out` overrides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub encoder: NetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projector: Option<NetSpec>,
}

/// Optimizer settings; the seed comes from the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptSection {
    pub lr: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl OptSection {
    pub fn with_seed(&self, seed: u64) -> OptConfig {
        OptConfig {
            lr: self.lr,
            schedule: self.schedule,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyPlan {
    pub epsilon: f64,
    pub n: usize,
}

impl Default for ToyPlan {
    fn default() -> Self {
        Self {
            epsilon: 0.04,
            n: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingPlan {
    pub m: Vec<usize>,
    pub repeats: usize,
    pub mode: ViewMode,
}

impl Default for ScalingPlan {
    fn default() -> Self {
        Self {
            m: vec![2, 4, 8, 16],
            repeats: 100,
            mode: ViewMode::Random,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaPlan {
    pub delta: f64,
    /// Draws from `π` used for `d̂_A` when the family has no grid.
    pub transformation_samples: usize,
    /// Samples used for the estimate (a prefix of the evaluation set).
    pub max_points: usize,
}

impl Default for SigmaPlan {
    fn default() -> Self {
        Self {
            delta: 1.0,
            transformation_samples: 16,
            max_points: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundPlan {
    pub c1: f64,
    pub c2: f64,
    pub repetitions: usize,
    pub pair_draws: usize,
}

impl Default for BoundPlan {
    fn default() -> Self {
        Self {
            c1: 1.0,
            c2: 1.0,
            repetitions: 16,
            pair_draws: 1,
        }
    }
}

/// Which data the linear head of a shifted domain is fit on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeFit {
    /// Fit once on the training data, evaluate on every domain.
    #[default]
    Source,
    /// Fit on a training split of each domain, evaluate on its test split.
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeDomain {
    pub name: String,
    pub dataset: DatasetSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPlan {
    /// Transformation-induced domains for `probe`; the identity when empty.
    #[serde(default)]
    pub domains: Vec<NamedDomain>,
    /// Evaluation set size; defaults to the dataset's `n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default)]
    pub toy: ToyPlan,
    #[serde(default)]
    pub view_scaling: ScalingPlan,
    #[serde(default)]
    pub sigma: SigmaPlan,
    #[serde(default)]
    pub bounds: BoundPlan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Method {
    pub name: String,
    pub loss: LossSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub methods: Vec<Method>,
    pub seeds: usize,
    pub probe_domains: Vec<ProbeDomain>,
    #[serde(default)]
    pub probe_fit: ProbeFit,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| schema(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Structural checks; numeric checks that belong to a stage run there.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != CONFIG_VERSION {
            return Err(schema(format!(
                "unsupported version {}, expected {CONFIG_VERSION}",
                self.version
            )));
        }
        if let Some(ds) = &self.dataset {
            if ds.n() == 0 {
                return Err(schema("dataset.n must be positive"));
            }
        }
        if self.eval.n == Some(0) {
            return Err(schema("eval.n must be positive"));
        }
        if let Some(loss) = &self.loss {
            loss.validate().map_err(|e| schema(format!("loss: {e}")))?;
        }
        if let Some(opt) = &self.optim {
            opt.with_seed(0)
                .validate()
                .map_err(|e| schema(format!("optim: {e}")))?;
        }
        if let Some(fam) = &self.family {
            TransformationFamily::new(fam.clone()).map_err(|e| schema(format!("family: {e}")))?;
        }
        if let Some(model) = &self.model {
            model
                .encoder
                .validate()
                .map_err(|e| schema(format!("model.encoder: {e}")))?;
            if let Some(p) = &model.projector {
                p.validate()
                    .map_err(|e| schema(format!("model.projector: {e}")))?;
            }
        }
        if let Some(cmp) = &self.compare {
            if cmp.methods.is_empty() || cmp.seeds == 0 || cmp.probe_domains.is_empty() {
                return Err(schema(
                    "compare needs methods, seeds >= 1 and probe_domains",
                ));
            }
            for m in &cmp.methods {
                m.loss
                    .validate()
                    .map_err(|e| schema(format!("compare method {}: {e}", m.name)))?;
            }
            for d in &cmp.probe_domains {
                if d.dataset.n() == 0 {
                    return Err(schema(format!(
                        "probe domain {}: n must be positive",
                        d.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<&DatasetSpec, CliError> {
        self.dataset
            .as_ref()
            .ok_or_else(|| schema("missing `dataset` section"))
    }

    pub fn family(&self) -> Result<TransformationFamily, CliError> {
        let spec = self
            .family
            .clone()
            .ok_or_else(|| schema("missing `family` section"))?;
        TransformationFamily::new(spec).map_err(|e| schema(format!("family: {e}")))
    }

    pub fn model(&self) -> Result<&ModelSection, CliError> {
        self.model
            .as_ref()
            .ok_or_else(|| schema("missing `model` section"))
    }

    pub fn loss(&self) -> Result<&LossSpec, CliError> {
        self.loss
            .as_ref()
            .ok_or_else(|| schema("missing `loss` section"))
    }

    pub fn optim(&self) -> Result<&OptSection, CliError> {
        self.optim
            .as_ref()
            .ok_or_else(|| schema("missing `optim` section"))
    }

    pub fn compare(&self) -> Result<&CompareSection, CliError> {
        self.compare
            .as_ref()
            .ok_or_else(|| schema("missing `compare` section"))
    }

    /// Probe domains; the identity on `dim` coordinates when none are listed.
    pub fn domains(&self, dim: usize) -> Vec<NamedDomain> {
        if self.eval.domains.is_empty() {
            return vec![NamedDomain {
                name: "identity".into(),
                transform: Transformation::identity(dim),
            }];
        }
        self.eval.domains.clone()
    }

    /// Seed of a named stage.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        seed::derive_seed(self.seed, stage)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let digest = Sha256::digest(canonical_json(&value).as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json(value: &Value) -> String {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!(
            "[{}]",
            items
                .iter()
                .map(canonical_json)
                .collect::<Vec<_>>()
                .join(",")
        ),
        other => other.to_string(),
    }
}
