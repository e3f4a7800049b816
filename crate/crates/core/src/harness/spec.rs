//! Experiment specification, read from TOML:
//!
//! ```toml
//! target = "target"                      # dataset directory under the corpus root
//! corpus = "corpus"                      # optional corpus root, relative to this file
//! sources = ["urbis", "metro", "campus"] # pre-training datasets
//! variant = "eight"                      # coarse taxonomy: five | eight | ten
//! seeds = [0, 1, 2, 3, 4]
//! percents = [10, 100]                   # target data levels: 10 | 25 | 50 | 100
//! test_fraction = 0.2
//! split_seed = 0                         # fixes the extracted test split
//! voxel_size = 0.2
//! hidden = [64, 64, 32]
//! miou_mode = "present"                  # or "all_classes"
//! balance_sources = false                # equal scan draws per source dataset
//! point_level_eval = false               # score points instead of voxels
//!
//! [pretrain]                             # PhaseConfig
//! epochs = 10
//! learning_rate = 0.4
//! schedule = "cosine_anneal"
//!
//! [finetune]
//! epochs = 30
//! schedule = "cosine_warmup"
//!
//! [[arm]]
//! kind = "scratch"                       # scratch | cola | fine_label | multi_head
//!
//! [[arm]]
//! kind = "fine_label"
//! sources = ["urbis"]                    # defaults to the top-level list
//! percents = [100]                       # defaults to the top-level list
//! ```

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::split::Percent;
use super::HarnessError;
use crate::featurize::{AugmentConfig, DEFAULT_VOXEL_SIZE};
use crate::metrics::MiouMode;
use crate::model::DEFAULT_HIDDEN;
use crate::optim::ScheduleKind;
use crate::taxonomy::Variant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmKind {
    Scratch,
    Cola,
    FineLabel,
    MultiHead,
}

impl ArmKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArmKind::Scratch => "scratch",
            ArmKind::Cola => "cola",
            ArmKind::FineLabel => "fine_label",
            ArmKind::MultiHead => "multi_head",
        }
    }

    pub fn pretrains(self) -> bool {
        self != ArmKind::Scratch
    }
}

impl fmt::Display for ArmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub kind: ArmKind,
    /// Report label; defaults to the kind, with sources for fine_label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sources: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub percents: Option<Vec<Percent>>,
}

impl ArmSpec {
    pub fn new(kind: ArmKind) -> Self {
        ArmSpec {
            kind,
            name: None,
            sources: None,
            percents: None,
        }
    }

    pub fn label(&self) -> String {
        match (&self.name, self.kind, &self.sources) {
            (Some(name), _, _) => name.clone(),
            (None, ArmKind::FineLabel, Some(sources)) => format!("fine_label({})", sources.join("+")),
            (None, kind, _) => kind.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub epochs: usize,
    /// Scans per optimization step.
    pub batch_scans: usize,
    /// Voxels drawn from each scan per step; evaluation uses all voxels.
    pub max_voxels_per_scan: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub schedule: ScheduleKind,
    pub lovasz_weight: f64,
    /// Scene share held out for per-epoch validation (pre-training only).
    pub validation_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentConfig>,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            epochs: 10,
            batch_scans: 4,
            max_voxels_per_scan: 1024,
            learning_rate: 0.05,
            momentum: 0.9,
            schedule: ScheduleKind::CosineAnneal,
            lovasz_weight: 1.0,
            validation_fraction: 0.1,
            augment: None,
        }
    }
}

impl PhaseConfig {
    pub fn default_finetune() -> Self {
        PhaseConfig {
            epochs: 30,
            schedule: ScheduleKind::CosineWarmup,
            ..PhaseConfig::default()
        }
    }

    fn validate(&self, phase: &str) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidSpec(format!("[{phase}] {m}")));
        if self.epochs == 0 || self.batch_scans == 0 || self.max_voxels_per_scan == 0 {
            return bad("epochs, batch_scans and max_voxels_per_scan must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.lovasz_weight >= 0.0 && self.lovasz_weight.is_finite()) {
            return bad("lovasz_weight must be non-negative");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        if let Some(a) = &self.augment {
            a.validate()
                .map_err(|e| HarnessError::InvalidSpec(format!("[{phase}] {e}")))?;
        }
        Ok(())
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_percents() -> Vec<Percent> {
    vec![Percent::P100]
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_voxel_size() -> f64 {
    DEFAULT_VOXEL_SIZE
}

fn default_hidden() -> Vec<usize> {
    DEFAULT_HIDDEN.to_vec()
}

fn default_variant() -> Variant {
    Variant::Eight
}

fn default_finetune() -> PhaseConfig {
    PhaseConfig::default_finetune()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub target: String,
    /// Corpus root, relative to the spec file; a command-line path wins.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<std::path::PathBuf>,
    #[serde(default)]
    pub sources: Vec<String>,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_percents")]
    pub percents: Vec<Percent>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_voxel_size")]
    pub voxel_size: f64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub miou_mode: MiouMode,
    #[serde(default)]
    pub balance_sources: bool,
    /// Score test points through their voxel instead of voxels.
    #[serde(default)]
    pub point_level_eval: bool,
    #[serde(default)]
    pub pretrain: PhaseConfig,
    #[serde(default = "default_finetune")]
    pub finetune: PhaseConfig,
    #[serde(rename = "arm")]
    pub arms: Vec<ArmSpec>,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    /// Sources used by `arm`.
    pub fn arm_sources<'a>(&'a self, arm: &'a ArmSpec) -> &'a [String] {
        arm.sources.as_deref().unwrap_or(&self.sources)
    }

    pub fn arm_percents<'a>(&'a self, arm: &'a ArmSpec) -> &'a [Percent] {
        arm.percents.as_deref().unwrap_or(&self.percents)
    }

    pub fn arm(&self, label: &str) -> Option<&ArmSpec> {
        self.arms.iter().find(|a| a.label() == label)
    }

    /// Every dataset the experiment reads, target first.
    pub fn datasets(&self) -> Vec<String> {
        let mut out = vec![self.target.clone()];
        for name in self.sources.iter().chain(self.arms.iter().flat_map(|a| a.sources.iter().flatten())) {
            if !out.contains(name) {
                out.push(name.clone());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidSpec(m));
        if self.target.is_empty() {
            return bad("target must be named".into());
        }
        if self.seeds.is_empty() || self.percents.is_empty() || self.arms.is_empty() {
            return bad("seeds, percents and arms must be non-empty".into());
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return bad("voxel_size must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must lie in (0, 1)".into());
        }
        self.pretrain.validate("pretrain")?;
        self.finetune.validate("finetune")?;
        let mut labels = BTreeSet::new();
        for arm in &self.arms {
            if !labels.insert(arm.label()) {
                return bad(format!("arm {:?} listed twice", arm.label()));
            }
            if self.arm_percents(arm).is_empty() {
                return bad(format!("arm {} has no percents", arm.label()));
            }
            let sources = self.arm_sources(arm);
            if arm.kind.pretrains() && sources.is_empty() {
                return bad(format!("arm {} needs pre-training sources", arm.label()));
            }
            if sources.contains(&self.target) {
                return bad(format!(
                    "arm {} pre-trains on its own target {}",
                    arm.label(),
                    self.target
                ));
            }
            let unique: BTreeSet<&String> = sources.iter().collect();
            if unique.len() != sources.len() {
                return bad(format!("arm {} lists a source twice", arm.label()));
            }
        }
        Ok(())
    }
}
