//! Experiment orchestration: splits, pre-training arms, finetuning and
//! reports.
//!
//! Every random choice is keyed by the experiment seed and a phase name,
//! so all arms of one seed see the same target split and the same
//! finetuning draw order; only their initial parameters differ.

pub mod data;
pub mod report;
pub mod spec;
pub mod split;
pub mod train;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use data::{ClassSpace, DatasetData, Encoder, ScanData};
pub use report::{median, CellResult, ExperimentReport};
pub use spec::{ArmKind, ArmSpec, ExperimentSpec, PhaseConfig};
pub use split::{extract_test_split, make_partial_split, PartialSplit, Percent};

use crate::featurize::{FeaturizeError, N_FEATURES};
use crate::lidar_io::{write_file, DatasetIndex, LidarIoError};
use crate::losses::LossError;
use crate::metrics::{iou_per_class, miou_with, ConfusionMatrix, MetricsError};
use crate::model::{
    load_network, save_checkpoint, save_network, CheckpointStats, Dense, MHModel, Model, ModelError,
    Network, Parameters, CHECKPOINT_EXTENSION,
};
use crate::seed;
use crate::taxonomy::{TaxonomyError, Variant};
use train::{class_histogram, evaluate, evaluate_points, fit_stats, mean_miou, PhaseContext, Sample};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error("dataset {dataset} has {scenes} scene(s), too few to split")]
    TooFewScenes { dataset: String, scenes: usize },
    #[error("label validation failed for {dataset}: {detail}")]
    ValidationFailure { dataset: String, detail: String },
    #[error("training diverged in {phase} at epoch {epoch}")]
    Diverged { phase: String, epoch: usize },
    #[error("model predicts {actual} classes, target has {expected}")]
    ClassCountMismatch { expected: usize, actual: usize },
    #[error("backbone changed while swapping the head")]
    BackboneMismatch,
    #[error("dataset {0} is not loaded")]
    UnknownDataset(String),
    #[error(transparent)]
    Io(#[from] LidarIoError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl HarnessError {
    /// Failures of the optimization itself rather than of inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, HarnessError::Diverged { .. })
    }
}

/// Experiment over the corpus of `synthgen::corpus::REFERENCE_CORPUS`.
pub const REFERENCE_EXPERIMENT: &str = include_str!("../../benchmarks/reference_experiment.toml");

pub type Result<T> = std::result::Result<T, HarnessError>;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Datasets of one experiment, keyed by name.
#[derive(Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub voxel_size: f64,
    pub datasets: BTreeMap<String, DatasetData>,
}

impl Corpus {
    /// Loads `<root>/<name>` for every name.
    pub fn load(root: &Path, names: &[String], voxel_size: f64) -> Result<Self> {
        let mut datasets = BTreeMap::new();
        for name in names {
            let data = DatasetData::load(&root.join(name), voxel_size)?;
            log::info!("loaded {name}: {} scans", data.scans.len());
            datasets.insert(name.clone(), data);
        }
        Ok(Corpus {
            root: root.to_path_buf(),
            voxel_size,
            datasets,
        })
    }

    pub fn from_datasets(root: PathBuf, voxel_size: f64, datasets: Vec<DatasetData>) -> Self {
        Corpus {
            root,
            voxel_size,
            datasets: datasets.into_iter().map(|d| (d.name.clone(), d)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&DatasetData> {
        self.datasets
            .get(name)
            .ok_or_else(|| HarnessError::UnknownDataset(name.to_string()))
    }

    /// Digest of the named datasets, in order.
    pub fn digest(&self, names: &[String]) -> Result<[u8; 32]> {
        let mut h = Sha256::new();
        for n in names {
            h.update(self.get(n)?.digest());
        }
        Ok(h.finalize().into())
    }
}

/// Held-out scenes for per-epoch validation; everything trains when the
/// fraction is zero or the dataset has a single scene.
fn validation_split(index: &DatasetIndex, fraction: f64, seed: u64) -> Result<(DatasetIndex, DatasetIndex)> {
    if fraction <= 0.0 || index.scenes.len() < 2 {
        let empty = index.with_scenes(&[]);
        return Ok((index.clone(), empty));
    }
    split::split_scenes(index, fraction, seed, "pretrain_validation")
        .map(|(val, train)| (train, val))
}

/// A pre-trained network and its provenance.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub arm: String,
    pub kind: ArmKind,
    pub seed: u64,
    pub network: Network,
    pub stats: CheckpointStats,
    pub curve: Vec<f64>,
    /// Validation mIoU of always predicting each head's most frequent
    /// training class.
    pub majority_baseline: f64,
    pub checkpoint: Vec<u8>,
}

/// Validates every source's fine→coarse map for `variant`.
pub fn validate_sources(corpus: &Corpus, sources: &[String], variant: Variant) -> Result<()> {
    for name in sources {
        corpus.get(name)?.label_map(variant)?;
    }
    Ok(())
}

fn majority_baseline(train: &[Sample], validation: &[Sample], n_classes: &[usize], voxel_size: f64) -> Result<f64> {
    let mut cms = Vec::new();
    for (head, &n) in n_classes.iter().enumerate() {
        fn of_head<'a>(s: &[Sample<'a>], head: usize) -> Vec<Sample<'a>> {
            s.iter().copied().filter(|x| x.head == head).collect()
        }
        let train_hist = class_histogram(&of_head(train, head), n, voxel_size)?;
        let val_hist = class_histogram(&of_head(validation, head), n, voxel_size)?;
        let majority = (0..n).max_by_key(|&c| (train_hist[c], std::cmp::Reverse(c))).unwrap_or(0);
        let mut counts = vec![0u64; n * n];
        for (c, &count) in val_hist.iter().enumerate() {
            counts[c * n + majority] = count;
        }
        cms.push(ConfusionMatrix::from_counts(n, counts));
    }
    Ok(mean_miou(&cms, crate::metrics::MiouMode::Present))
}

/// Pre-trains the network of a non-scratch arm.
pub fn pretrain(spec: &ExperimentSpec, arm: &ArmSpec, corpus: &Corpus, seed: u64) -> Result<Pretrained> {
    let sources = spec.arm_sources(arm);
    let cfg = &spec.pretrain;
    let phase_seed = seed::derive(seed, &["pretrain".into()]);
    let datasets = sources.iter().map(|n| corpus.get(n)).collect::<Result<Vec<_>>>()?;

    // class spaces and one encoder per source
    let mut encoders = Vec::with_capacity(datasets.len());
    let mut heads = vec![0usize; datasets.len()];
    let (class_ids, variant): (Vec<Vec<u16>>, Option<Variant>) = match arm.kind {
        ArmKind::Scratch => {
            return Err(HarnessError::InvalidSpec("the scratch arm does not pre-train".into()))
        }
        ArmKind::Cola => {
            let space = ClassSpace::coarse(spec.variant);
            for d in &datasets {
                encoders.push(Encoder::coarse(&d.label_map(spec.variant)?, &space));
            }
            (vec![space.ids], Some(spec.variant))
        }
        ArmKind::FineLabel => {
            let mut offset = 0u32;
            let mut ids = BTreeSet::new();
            let mut offsets = Vec::new();
            for d in &datasets {
                let own = d.label_ids();
                offsets.push(offset);
                ids.extend(own.iter().map(|&i| i as u32 + offset));
                offset += own.last().map_or(0, |&m| m as u32) + 1;
            }
            if offset > u32::from(u16::MAX) {
                return Err(HarnessError::InvalidSpec("offset fine label ids exceed 16 bits".into()));
            }
            let ids: BTreeSet<u16> = ids.into_iter().map(|i| i as u16).collect();
            let space = ClassSpace::fine(&BTreeMap::new(), &ids);
            for (d, &off) in datasets.iter().zip(&offsets) {
                encoders.push(Encoder::offset(&d.label_ids(), off, &space));
            }
            (vec![space.ids], None)
        }
        ArmKind::MultiHead => {
            let order: BTreeMap<&str, usize> = datasets.iter().enumerate().map(|(i, d)| (d.name.as_str(), i)).collect();
            let mut class_ids = vec![Vec::new(); datasets.len()];
            for (head, (_, &i)) in order.iter().enumerate() {
                let space = ClassSpace::of_dataset(datasets[i]);
                heads[i] = head;
                class_ids[head] = space.ids.clone();
            }
            for d in &datasets {
                encoders.push(Encoder::identity(&ClassSpace::of_dataset(d)));
            }
            (class_ids, None)
        }
    };

    let mut train_samples = Vec::new();
    let mut val_samples = Vec::new();
    for (i, d) in datasets.iter().enumerate() {
        let (tr, va) = validation_split(&d.index, cfg.validation_fraction, phase_seed)?;
        let sample = |s| Sample {
            scan: s,
            encoder: &encoders[i],
            head: heads[i],
            source: i,
        };
        train_samples.extend(d.select(&tr)?.into_iter().map(sample));
        val_samples.extend(d.select(&va)?.into_iter().map(sample));
    }
    let stats = fit_stats(&train_samples, corpus.voxel_size)?;
    let ctx = PhaseContext {
        name: "pretrain",
        config: cfg,
        voxel_size: corpus.voxel_size,
        stats: &stats,
        seed: phase_seed,
        miou_mode: spec.miou_mode,
        balance_sources: spec.balance_sources,
    };
    let n_classes: Vec<usize> = class_ids.iter().map(Vec::len).collect();
    if n_classes.contains(&0) {
        return Err(HarnessError::InvalidSpec(format!("arm {} has a source without labels", arm.label())));
    }
    let (network, curve) = if arm.kind == ArmKind::MultiHead {
        let mut names: Vec<&str> = datasets.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        let named: Vec<(String, usize)> = names.iter().zip(&n_classes).map(|(n, &c)| (n.to_string(), c)).collect();
        let mut net = MHModel::init(N_FEATURES, &spec.hidden, &named, phase_seed)?;
        let curve = train::train(&mut net, &train_samples, &val_samples, &ctx)?;
        (Network::Multi(net), curve)
    } else {
        let mut net = Model::init(N_FEATURES, &spec.hidden, n_classes[0], phase_seed)?;
        let curve = train::train(&mut net, &train_samples, &val_samples, &ctx)?;
        (Network::Single(net), curve)
    };
    let baseline = majority_baseline(&train_samples, &val_samples, &n_classes, corpus.voxel_size)?;
    let stats = CheckpointStats {
        features: stats,
        variant,
        corpus_digest: corpus.digest(sources)?,
        seed,
        class_ids,
    };
    let checkpoint = save_network(&network, &stats);
    log::info!(
        "pretrained {} seed {seed}: validation mIoU {:?}, majority baseline {baseline:.4}",
        arm.label(),
        curve.last()
    );
    Ok(Pretrained {
        arm: arm.label(),
        kind: arm.kind,
        seed,
        network,
        stats,
        curve,
        majority_baseline: baseline,
        checkpoint,
    })
}

/// Target dataset with its fixed test split.
pub struct TargetData<'a> {
    pub data: &'a DatasetData,
    pub space: ClassSpace,
    pub encoder: Encoder,
    /// Scenes available for partial splits.
    pub pool: DatasetIndex,
    pub test: DatasetIndex,
}

impl<'a> TargetData<'a> {
    pub fn new(data: &'a DatasetData, test_fraction: f64, split_seed: u64) -> Result<Self> {
        let space = ClassSpace::of_dataset(data);
        if space.len() < 2 {
            return Err(HarnessError::InvalidSpec(format!("{} has fewer than two classes", data.name)));
        }
        let encoder = Encoder::identity(&space);
        let (pool, test) = extract_test_split(&data.index, test_fraction, split_seed)?;
        Ok(TargetData {
            data,
            space,
            encoder,
            pool,
            test,
        })
    }

    fn samples(&self, index: &DatasetIndex) -> Result<Vec<Sample<'_>>> {
        Ok(self
            .data
            .select(index)?
            .into_iter()
            .map(|scan| Sample {
                scan,
                encoder: &self.encoder,
                head: 0,
                source: 0,
            })
            .collect())
    }
}

/// Where finetuning starts.
#[derive(Debug, Clone, Copy)]
pub enum Init<'a> {
    Scratch,
    /// Serialized pre-trained network.
    Checkpoint(&'a [u8]),
}

#[derive(Debug, Clone)]
pub struct Finetuned {
    pub model: Model,
    pub stats: CheckpointStats,
    pub checkpoint: Vec<u8>,
    pub validation_curve: Vec<f64>,
    pub test_confusion: ConfusionMatrix,
    pub test_miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub config_digest: String,
    pub backbone_matches_checkpoint: Option<bool>,
    pub frozen_tensors: usize,
}

/// Digest of every setting that shapes finetuning, which excludes the arm.
pub fn finetune_config_digest(spec: &ExperimentSpec, percent: Percent, seed: u64) -> String {
    let text = format!(
        "target={}\npercent={}\nseed={seed}\ntest_fraction={}\nsplit_seed={}\nvoxel_size={}\nhidden={:?}\nmiou_mode={:?}\npoint_level_eval={}\n{}",
        spec.target,
        percent.value(),
        spec.test_fraction,
        spec.split_seed,
        spec.voxel_size,
        spec.hidden,
        spec.miou_mode,
        spec.point_level_eval,
        toml::to_string(&spec.finetune).expect("phase config serializes"),
    );
    sha256_hex(text.as_bytes())
}

fn bits_equal(a: &[Dense], b: &[Dense]) -> bool {
    let bits = |d: &Dense| -> Vec<u64> { d.weight.iter().chain(&d.bias).map(|v| v.to_bits()).collect() };
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.weight.dim() == y.weight.dim() && bits(x) == bits(y))
}

/// Finetunes on a partial split of the target and scores the test split.
pub fn finetune(
    init: Init,
    target: &TargetData,
    spec: &ExperimentSpec,
    percent: Percent,
    seed: u64,
) -> Result<Finetuned> {
    let voxel_size = target.data.voxel_size;
    let partial = make_partial_split(&target.pool, percent, seed::derive(seed, &["partial".into()]))?;
    let train_samples = target.samples(&partial.train)?;
    let val_samples = target.samples(&partial.validation)?;
    let n = target.space.len();

    let (model, features, backbone_matches) = match init {
        Init::Scratch => {
            let model = Model::init(N_FEATURES, &spec.hidden, n, seed::derive(seed, &["init".into()]))?;
            (model, fit_stats(&train_samples, voxel_size)?, None)
        }
        Init::Checkpoint(bytes) => {
            let (network, stats) = load_network(bytes)?;
            if network.backbone()[0].fan_in() != N_FEATURES || stats.features.mean.len() != N_FEATURES {
                return Err(ModelError::ShapeMismatch("checkpoint input width".into()).into());
            }
            let before = network.backbone().to_vec();
            let model = network.into_swapped(n, seed::derive(seed, &["head".into()]))?;
            let same = bits_equal(&model.backbone, &before);
            if !same {
                return Err(HarnessError::BackboneMismatch);
            }
            (model, stats.features, Some(same))
        }
    };
    if model.n_classes() != n {
        return Err(HarnessError::ClassCountMismatch {
            expected: n,
            actual: model.n_classes(),
        });
    }
    let ctx = PhaseContext {
        name: "finetune",
        config: &spec.finetune,
        voxel_size,
        stats: &features,
        seed: seed::derive(seed, &["finetune".into()]),
        miou_mode: spec.miou_mode,
        balance_sources: false,
    };
    let start = model.clone();
    let mut model = model;
    let validation_curve = train::train(&mut model, &train_samples, &val_samples, &ctx)?;
    let frozen_tensors = start
        .tensors()
        .iter()
        .zip(model.tensors())
        .filter(|(a, b)| a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()))
        .count();

    let test_samples = target.samples(&target.test)?;
    let test_confusion = if spec.point_level_eval {
        evaluate_points(&model, &test_samples, voxel_size, &features)?
    } else {
        evaluate(&model, &test_samples, &ctx)?.remove(0)
    };
    let test_miou = miou_with(&test_confusion, spec.miou_mode)?;
    let stats = CheckpointStats {
        features,
        variant: None,
        corpus_digest: target.data.digest(),
        seed,
        class_ids: vec![target.space.ids.clone()],
    };
    let checkpoint = save_checkpoint(&model, &stats);
    Ok(Finetuned {
        per_class_iou: iou_per_class(&test_confusion),
        model,
        stats,
        checkpoint,
        validation_curve,
        test_confusion,
        test_miou,
        config_digest: finetune_config_digest(spec, percent, seed),
        backbone_matches_checkpoint: backbone_matches,
        frozen_tensors,
    })
}

/// Scores a checkpoint on the scans of `index`. Coarse checkpoints read
/// labels through the dataset's label map; multi-head checkpoints use the
/// head named after the dataset.
pub fn evaluate_checkpoint(
    bytes: &[u8],
    data: &DatasetData,
    index: &DatasetIndex,
    point_level: bool,
) -> Result<(ConfusionMatrix, ClassSpace)> {
    let (network, stats) = load_network(bytes)?;
    let (model, ids) = match &network {
        Network::Single(m) => (m.clone(), stats.class_ids.first().cloned().unwrap_or_default()),
        Network::Multi(mh) => {
            let pos = mh.heads.keys().position(|k| *k == data.name).ok_or_else(|| {
                HarnessError::InvalidSpec(format!("checkpoint has no head for {}", data.name))
            })?;
            (mh.to_model(&data.name)?, stats.class_ids.get(pos).cloned().unwrap_or_default())
        }
    };
    let (space, encoder) = match stats.variant {
        Some(v) => {
            let space = ClassSpace::coarse(v);
            let encoder = Encoder::coarse(&data.label_map(v)?, &space);
            (space, encoder)
        }
        None => {
            let space = ClassSpace::fine(&data.index.fine_vocabulary, &ids.into_iter().collect());
            let encoder = Encoder::identity(&space);
            (space, encoder)
        }
    };
    if model.n_classes() != space.len() {
        return Err(HarnessError::ClassCountMismatch {
            expected: space.len(),
            actual: model.n_classes(),
        });
    }
    let samples: Vec<Sample> = data
        .select(index)?
        .into_iter()
        .map(|scan| Sample {
            scan,
            encoder: &encoder,
            head: 0,
            source: 0,
        })
        .collect();
    let cm = if point_level {
        evaluate_points(&model, &samples, data.voxel_size, &stats.features)?
    } else {
        let ctx = PhaseContext {
            name: "eval",
            config: &PhaseConfig::default(),
            voxel_size: data.voxel_size,
            stats: &stats.features,
            seed: 0,
            miou_mode: Default::default(),
            balance_sources: false,
        };
        evaluate(&model, &samples, &ctx)?.remove(0)
    };
    Ok((cm, space))
}

fn checkpoint_name(prefix: &str, arm: &str, percent: Option<Percent>, seed: u64) -> String {
    let arm: String = arm
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' })
        .collect();
    match percent {
        Some(p) => format!("{prefix}{arm}_p{}_s{seed}.{CHECKPOINT_EXTENSION}", p.value()),
        None => format!("{prefix}{arm}_s{seed}.{CHECKPOINT_EXTENSION}"),
    }
}

/// Runs one cell given its (optional) pre-trained network.
pub fn run_cell(
    spec: &ExperimentSpec,
    arm: &ArmSpec,
    target: &TargetData,
    pretrained: Option<&Pretrained>,
    percent: Percent,
    seed: u64,
) -> Result<(CellResult, Finetuned)> {
    let init = match pretrained {
        Some(p) => Init::Checkpoint(&p.checkpoint),
        None if arm.kind == ArmKind::Scratch => Init::Scratch,
        None => {
            return Err(HarnessError::InvalidSpec(format!(
                "arm {} needs a pre-trained network",
                arm.label()
            )))
        }
    };
    let ft = finetune(init, target, spec, percent, seed)?;
    log::info!("{} {percent} seed {seed}: test mIoU {:.4}", arm.label(), ft.test_miou);
    let cell = CellResult {
        arm: arm.label(),
        kind: arm.kind,
        percent,
        seed,
        test_miou: ft.test_miou,
        per_class_iou: ft.per_class_iou.clone(),
        class_names: target.space.names.clone(),
        validation_curve: ft.validation_curve.clone(),
        pretrain_curve: pretrained.map(|p| p.curve.clone()).unwrap_or_default(),
        pretrain_majority_baseline: pretrained.map(|p| p.majority_baseline),
        config_digest: ft.config_digest.clone(),
        checkpoint_sha256: sha256_hex(&ft.checkpoint),
        checkpoint_path: None,
        backbone_matches_checkpoint: ft.backbone_matches_checkpoint,
        frozen_tensors: ft.frozen_tensors,
    };
    Ok((cell, ft))
}

/// Runs every (arm, percent, seed) cell. Checkpoints and report files are
/// written under `out_dir` when given.
pub fn run_experiment(spec: &ExperimentSpec, corpus: &Corpus, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    spec.validate()?;
    for arm in spec.arms.iter().filter(|a| a.kind == ArmKind::Cola) {
        validate_sources(corpus, spec.arm_sources(arm), spec.variant)?;
    }
    let target = TargetData::new(corpus.get(&spec.target)?, spec.test_fraction, spec.split_seed)?;

    let pre_jobs: Vec<(usize, u64)> = spec
        .arms
        .iter()
        .enumerate()
        .filter(|(_, a)| a.kind.pretrains())
        .flat_map(|(i, _)| spec.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let pretrained: BTreeMap<(usize, u64), Pretrained> = pre_jobs
        .par_iter()
        .map(|&(i, s)| Ok(((i, s), pretrain(spec, &spec.arms[i], corpus, s)?)))
        .collect::<Result<_>>()?;

    let cells: Vec<(usize, Percent, u64)> = spec
        .arms
        .iter()
        .enumerate()
        .flat_map(|(i, a)| {
            spec.arm_percents(a)
                .iter()
                .flat_map(move |&p| spec.seeds.iter().map(move |&s| (i, p, s)))
        })
        .collect();
    let mut results: Vec<((usize, Percent, u64), CellResult, Vec<u8>)> = cells
        .par_iter()
        .map(|&(i, p, s)| {
            let (cell, ft) = run_cell(spec, &spec.arms[i], &target, pretrained.get(&(i, s)), p, s)?;
            Ok(((i, p, s), cell, ft.checkpoint))
        })
        .collect::<Result<_>>()?;
    results.sort_by(|a, b| a.0.cmp(&b.0));

    if let Some(dir) = out_dir {
        for ((i, s), p) in &pretrained {
            let path = dir.join(checkpoint_name("pretrain_", &spec.arms[*i].label(), None, *s));
            write_file(&path, &p.checkpoint)?;
        }
        for ((i, p, s), cell, bytes) in &mut results {
            let path = dir.join(checkpoint_name("", &spec.arms[*i].label(), Some(*p), *s));
            write_file(&path, bytes)?;
            cell.checkpoint_path = Some(path);
        }
    }

    let mut percents: Vec<Percent> = cells.iter().map(|c| c.1).collect();
    percents.sort();
    percents.dedup();
    let report = ExperimentReport {
        target: spec.target.clone(),
        variant: spec.variant,
        arms: spec.arms.iter().map(ArmSpec::label).collect(),
        percents,
        seeds: spec.seeds.clone(),
        entries: results.into_iter().map(|r| r.1).collect(),
    };
    if report.entries.len() != cells.len() {
        return Err(HarnessError::InvalidSpec("report is missing cells".into()));
    }
    if let Some(dir) = out_dir {
        write_report(&report, spec, dir)?;
    }
    Ok(report)
}

/// Writes `report.txt`, `report.csv`, `classes.csv`, `curves.csv` and
/// `experiment.toml`.
pub fn write_report(report: &ExperimentReport, spec: &ExperimentSpec, dir: &Path) -> Result<()> {
    write_file(&dir.join("report.txt"), report.render_table().as_bytes())?;
    write_file(&dir.join("report.csv"), report.render_csv().as_bytes())?;
    write_file(&dir.join("classes.csv"), report.render_class_csv().as_bytes())?;
    write_file(&dir.join("curves.csv"), report.render_curves_csv().as_bytes())?;
    write_file(&dir.join("experiment.toml"), spec.to_toml().as_bytes())?;
    Ok(())
}
