//! `cola`: synthetic corpora, label maps, splits, training and reports.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use cola_core::featurize::{compute_features_points, to_f64, voxel_majority, voxelize_points, DEFAULT_VOXEL_SIZE};
use cola_core::harness::{
    self, evaluate_checkpoint, extract_test_split, make_partial_split, run_experiment, Corpus, DatasetData,
    ExperimentSpec, HarnessError, Init, Percent, TargetData,
};
use cola_core::lidar_io::{self, render_manifest, write_file, write_label_file};
use cola_core::metrics::{miou_with, render_csv, render_table, MiouMode};
use cola_core::seed;
use cola_core::synthgen::corpus::{generate_corpus, CorpusConfig, REFERENCE_CORPUS};
use cola_core::taxonomy::{coarse_set, load_label_map, remap, validate_label_map, Variant};

#[derive(Debug, Parser)]
#[command(name = "cola", version, about = "Coarse-label pre-training for LiDAR segmentation")]
struct Cli {
    /// Experiment seed.
    #[arg(long, global = true, env = "COLA_SEED")]
    seed: Option<u64>,
    /// Worker threads for featurization and experiment cells.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-dataset corpus.
    Gen {
        /// Corpus description; the reference corpus when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a fine→coarse label map against a dataset's labels.
    ValidateMap {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "eight")]
        variant: Variant,
    },
    /// Rewrite a label file through a label map.
    Remap {
        #[arg(long)]
        map: PathBuf,
        #[arg(long, default_value = "eight")]
        variant: Variant,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write test, train and validation manifests.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "100")]
        percent: Percent,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train one arm of an experiment.
    Pretrain {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Arm label, e.g. `cola` or `fine_label(urbis)`.
        #[arg(long, default_value = "cola")]
        arm: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune on the target, from a checkpoint or from scratch.
    Finetune {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Pre-trained checkpoint; scratch initialization when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "100")]
        percent: Percent,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Score only the extracted test split of this fraction.
        #[arg(long)]
        test_fraction: Option<f64>,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long, default_value_t = DEFAULT_VOXEL_SIZE)]
        voxel_size: f64,
        #[arg(long)]
        point_level: bool,
        #[arg(long, default_value = "present")]
        miou_mode: MiouArg,
        /// Per-class CSV destination.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write per-voxel features of every scan as CSV.
    ExportFeatures {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = DEFAULT_VOXEL_SIZE)]
        voxel_size: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every cell of an experiment and print the comparison table.
    Report {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Checkpoints and report files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[arg(long)]
    experiment: PathBuf,
    /// Corpus root; defaults to the spec's `corpus` entry.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum MiouArg {
    Present,
    AllClasses,
}

impl From<MiouArg> for MiouMode {
    fn from(m: MiouArg) -> Self {
        match m {
            MiouArg::Present => MiouMode::Present,
            MiouArg::AllClasses => MiouMode::AllClasses,
        }
    }
}

/// Bad flags or missing inputs.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<HarnessError>() {
        Some(e) if e.is_numeric() => 3,
        _ => 2,
    }
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("no such file: {}", path.display())))
    }
}

fn require_dir(path: &Path) -> anyhow::Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("no such directory: {}", path.display())))
    }
}

fn load_spec(args: &ExperimentArgs) -> anyhow::Result<(ExperimentSpec, PathBuf)> {
    require_file(&args.experiment)?;
    let text = fs::read_to_string(&args.experiment).with_context(|| format!("reading {}", args.experiment.display()))?;
    let spec = ExperimentSpec::from_toml(&text)?;
    let root = match (&args.corpus, &spec.corpus) {
        (Some(root), _) => root.clone(),
        (None, Some(rel)) => args.experiment.parent().unwrap_or(Path::new(".")).join(rel),
        (None, None) => return Err(usage("no corpus: pass --corpus or set `corpus` in the experiment")),
    };
    require_dir(&root)?;
    Ok((spec, root))
}

fn load_dataset(path: &Path, voxel_size: f64) -> anyhow::Result<DatasetData> {
    require_dir(path)?;
    Ok(DatasetData::load(path, voxel_size)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Gen { config, out } => {
            let text = match &config {
                Some(path) => {
                    require_file(path)?;
                    fs::read_to_string(path)?
                }
                None => REFERENCE_CORPUS.to_string(),
            };
            let cfg = CorpusConfig::from_toml(&text)?;
            let indices = generate_corpus(&cfg, seed, &out)?;
            for index in &indices {
                println!("{}\t{} scenes\t{} scans", index.dataset_name, index.scenes.len(), index.n_scans());
            }
        }
        Command::ValidateMap { map, dataset, variant } => {
            require_file(&map)?;
            let map = load_label_map(&fs::read_to_string(&map)?, &coarse_set(variant))?;
            let data = load_dataset(&dataset, DEFAULT_VOXEL_SIZE)?;
            let report = validate_label_map(&map, &data.label_ids());
            if !report.ok {
                for id in &report.unmapped_fine_ids {
                    eprintln!("unmapped fine id {id}");
                }
                for id in &report.out_of_range_coarse_ids {
                    eprintln!("coarse id {id} is outside the {variant} set");
                }
                return Err(HarnessError::ValidationFailure {
                    dataset: data.name,
                    detail: "label map is not total".into(),
                }
                .into());
            }
            println!("ok: {} fine ids map into {variant}", map.entries.len());
        }
        Command::Remap { map, variant, input, output } => {
            require_file(&map)?;
            require_file(&input)?;
            let map = load_label_map(&fs::read_to_string(&map)?, &coarse_set(variant))?;
            let bytes = fs::read(&input)?;
            let labels = lidar_io::parse_label_file(&bytes, bytes.len() / 4)?;
            let coarse = remap(&labels, &map).with_context(|| format!("remapping {}", input.display()))?;
            write_file(&output, &write_label_file(&coarse))?;
        }
        Command::Split { dataset, percent, test_fraction, split_seed, out } => {
            require_dir(&dataset)?;
            let index = lidar_io::index_dataset(&dataset, &lidar_io::Layout::detect(&dataset))?;
            let (pool, test) = extract_test_split(&index, test_fraction, split_seed)?;
            let partial = make_partial_split(&pool, percent, seed::derive(seed, &["partial".into()]))?;
            for (name, idx) in [("test", &test), ("train", &partial.train), ("validation", &partial.validation)] {
                write_file(&out.join(format!("{name}.tsv")), render_manifest(idx, &dataset).as_bytes())?;
                println!("{name}\t{} scenes\t{} scans", idx.scenes.len(), idx.n_scans());
            }
        }
        Command::Pretrain { exp, arm, out } => {
            let (spec, root) = load_spec(&exp)?;
            let arm = spec
                .arm(&arm)
                .ok_or_else(|| usage(format!("no arm {arm:?} in {}", exp.experiment.display())))?
                .clone();
            if !arm.kind.pretrains() {
                return Err(usage(format!("arm {} does not pre-train", arm.label())));
            }
            let corpus = Corpus::load(&root, spec.arm_sources(&arm), spec.voxel_size)?;
            let pre = harness::pretrain(&spec, &arm, &corpus, seed)?;
            write_file(&out, &pre.checkpoint)?;
            if let Some(v) = pre.curve.last() {
                println!("validation mIoU {:.2}", 100.0 * v);
            }
            println!("majority baseline {:.2}", 100.0 * pre.majority_baseline);
            println!("checkpoint {} sha256 {}", out.display(), harness::sha256_hex(&pre.checkpoint));
        }
        Command::Finetune { exp, checkpoint, percent, out } => {
            let (spec, root) = load_spec(&exp)?;
            let bytes = match &checkpoint {
                Some(path) => {
                    require_file(path)?;
                    Some(fs::read(path)?)
                }
                None => None,
            };
            let corpus = Corpus::load(&root, std::slice::from_ref(&spec.target), spec.voxel_size)?;
            let target = TargetData::new(corpus.get(&spec.target)?, spec.test_fraction, spec.split_seed)?;
            let init = bytes.as_deref().map_or(Init::Scratch, Init::Checkpoint);
            let ft = harness::finetune(init, &target, &spec, percent, seed)?;
            write_file(&out, &ft.checkpoint)?;
            print!("{}", render_table(&ft.test_confusion, &target.space.names, spec.miou_mode));
            println!("test mIoU {:.2}", 100.0 * ft.test_miou);
            println!("config digest {}", ft.config_digest);
            println!("checkpoint {} sha256 {}", out.display(), harness::sha256_hex(&ft.checkpoint));
        }
        Command::Eval { checkpoint, dataset, test_fraction, split_seed, voxel_size, point_level, miou_mode, csv } => {
            require_file(&checkpoint)?;
            let data = load_dataset(&dataset, voxel_size)?;
            let index = match test_fraction {
                Some(f) => extract_test_split(&data.index, f, split_seed)?.1,
                None => data.index.clone(),
            };
            let (cm, space) = evaluate_checkpoint(&fs::read(&checkpoint)?, &data, &index, point_level)?;
            let mode = MiouMode::from(miou_mode);
            print!("{}", render_table(&cm, &space.names, mode));
            println!("mIoU {:.2}", 100.0 * miou_with(&cm, mode)?);
            if let Some(path) = csv {
                write_file(&path, render_csv(&cm, &space.names).as_bytes())?;
            }
        }
        Command::ExportFeatures { dataset, voxel_size, out } => {
            let data = load_dataset(&dataset, voxel_size)?;
            for scan in &data.scans {
                let points = to_f64(&scan.points);
                let grid = voxelize_points(&points, voxel_size)?;
                let features = compute_features_points(&points, &grid);
                let labels = voxel_majority(&grid, &scan.labels);
                let path = out.join(&scan.scene_id).join(format!("{}.csv", scan.scan_id));
                write_file(&path, features.to_csv(Some(&labels)).as_bytes())?;
            }
            println!("{} scans written to {}", data.scans.len(), out.display());
        }
        Command::Report { exp, out } => {
            let (mut spec, root) = load_spec(&exp)?;
            if let Some(s) = cli.seed {
                spec.seeds = vec![s];
            }
            let corpus = Corpus::load(&root, &spec.datasets(), spec.voxel_size)?;
            let report = run_experiment(&spec, &corpus, out.as_deref())?;
            print!("{}", report.render_table());
            for arm in &report.arms {
                for &p in &report.percents {
                    let values = report.values(arm, p);
                    if !values.is_empty() {
                        let listed: Vec<String> = values.iter().map(|(s, v)| format!("s{s}={:.2}", 100.0 * v)).collect();
                        println!("{arm} {p}: {}", listed.join(" "));
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, _) => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_env("COLA_LOG").init();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
