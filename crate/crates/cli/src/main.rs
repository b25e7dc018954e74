//! `asl`: data preparation, training, colorization, evaluation and the
//! loss-weight sweep.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use asl_core::ablation::{ablate_weights, ablation_table, ABLATION_REPORT, DEFAULT_GRID};
use asl_core::config::{validate_config, AssetKind, Baseline, Config, ConfigFile, Task, Variant};
use asl_core::datapipe::{
    curate_by_category, default_policy, image_files, load_color, load_gray, save_png, stem, synth_dataset, tensor_to_rgb,
    CurateRequest, Dataset, EdgeExtractorSpec, SplitPolicy, SynthOptions,
};
use asl_core::domain::{Domain, ImageBatch};
use asl_core::evaluation::{evaluate_run, extractor_from_config, EvalOptions};
use asl_core::training::{backend_from_config, colorize, train, TrainOptions};
use asl_core::{Error, Scalar, Tensor};

const CACHE_ENV: &str = "ASL_CACHE_DIR";
const SNAPSHOT: &str = "config.toml";
const ERROR_RECORD: &str = "error.json";

/// Training runs own `config.toml`; other commands sharing an output folder
/// get their own snapshot name.
fn snapshot_name(cmd: &Command) -> String {
    match cmd {
        Command::Train { .. } | Command::AblateWeights { .. } => SNAPSHOT.into(),
        Command::PrepareData { .. } => "config.prepare-data.toml".into(),
        Command::SynthData { .. } => "config.synth-data.toml".into(),
        Command::Colorize { .. } => "config.colorize.toml".into(),
        Command::Evaluate { .. } => "config.evaluate.toml".into(),
    }
}
#[derive(Parser)]
#[command(name = "asl", version, about = "Image translation GANs with segmentation-consistency losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Curate a sketch dataset from an annotated image collection.
    PrepareData {
        #[command(flatten)]
        common: Common,
        /// COCO-style annotation JSON.
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        category: String,
        /// Train fraction; defaults to the published split for known names.
        #[arg(long)]
        train_ratio: Option<f64>,
    },
    /// Generate the synthetic shape dataset with class masks.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from an epoch checkpoint of the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate every image of a folder with a checkpoint's generator.
    Colorize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// FID and mIoU of a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and score one model per segmentation-loss weight.
    AblateWeights {
        #[command(flatten)]
        common: Common,
        /// Comma-separated weights applied to every active segmentation term.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Paired,
    Unpaired,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    S2p,
    L2p,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Baseline,
    Binary,
    Multiclass,
    Combined,
}

#[derive(Clone, Copy, ValueEnum)]
enum AssetArg {
    Stub,
    Pretrained,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    baseline: Option<BaselineArg>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    wb: Option<f64>,
    #[arg(long)]
    wm: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    extractor: Option<AssetArg>,
    #[arg(long, value_enum)]
    segbackend: Option<AssetArg>,
    /// Any config key, as `section.key=value`. Applied after the file and
    /// before the named flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
}

impl Common {
    /// Flags over file over defaults.
    fn resolve(&self) -> asl_core::Result<Config> {
        let mut file = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        for kv in &self.sets {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Parse(format!("--set `{kv}` must be key=value")))?;
            file.set(k.trim(), v.trim())?;
        }
        if let Some(v) = self.variant {
            file.objective.variant = match v {
                VariantArg::Baseline => Variant::Baseline,
                VariantArg::Binary => Variant::Binary,
                VariantArg::Multiclass => Variant::Multiclass,
                VariantArg::Combined => Variant::Combined,
            };
        }
        if let Some(b) = self.baseline {
            file.objective.baseline = match b {
                BaselineArg::Paired => Baseline::Paired,
                BaselineArg::Unpaired => Baseline::Unpaired,
            };
        }
        if let Some(t) = self.task {
            file.run.task = match t {
                TaskArg::S2p => Task::Sketch2Photo,
                TaskArg::L2p => Task::Label2Photo,
            };
        }
        let asset = |a: AssetArg| match a {
            AssetArg::Stub => AssetKind::Stub,
            AssetArg::Pretrained => AssetKind::Pretrained,
        };
        if let Some(a) = self.extractor {
            file.networks.extractor = asset(a);
        }
        if let Some(a) = self.segbackend {
            file.networks.segbackend = asset(a);
        }
        if self.wb.is_some() {
            file.objective.w_b = self.wb;
        }
        if self.wm.is_some() {
            file.objective.w_m = self.wm;
        }
        if let Some(s) = self.seed {
            file.run.seed = s;
        }
        if let Some(e) = self.epochs {
            file.run.epochs = e;
        }
        if let Some(lr) = self.lr {
            file.run.learning_rate = lr;
        }
        if let Some(r) = self.resolution {
            file.run.resolution = r;
        }
        if let Some(d) = &self.dataset_dir {
            file.data.dataset_dir = d.to_string_lossy().into_owned();
        }
        Ok(file.resolve())
    }

    fn cache_root(&self) -> PathBuf {
        std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| self.out.join("cache"))
    }
}

fn common(cmd: &Command) -> &Common {
    match cmd {
        Command::PrepareData { common, .. }
        | Command::SynthData { common, .. }
        | Command::Train { common, .. }
        | Command::Colorize { common, .. }
        | Command::Evaluate { common, .. }
        | Command::AblateWeights { common, .. } => common,
    }
}

fn validated(cfg: Config) -> asl_core::Result<Config> {
    validate_config(cfg).map_err(Error::ConfigInvalid)
}

/// Dataset folder of the data-generating commands: `--dataset-dir` when
/// given, otherwise `<out>/dataset`.
fn dataset_target(c: &Common) -> PathBuf {
    c.dataset_dir.clone().unwrap_or_else(|| c.out.join("dataset"))
}

fn run(cmd: &Command, cfg: Config) -> anyhow::Result<()> {
    let c = common(cmd);
    match c.precision {
        Precision::F32 => run_typed::<f32>(cmd, cfg),
        Precision::F64 => run_typed::<f64>(cmd, cfg),
    }
}

fn run_typed<T: Scalar>(cmd: &Command, cfg: Config) -> anyhow::Result<()> {
    let c = common(cmd);
    match cmd {
        Command::SynthData { n_train, n_test, .. } => {
            let root = dataset_target(c);
            let opts = SynthOptions {
                name: cfg.data.name.clone(),
                task: cfg.run.task,
                resolution: cfg.run.resolution,
                n_train: n_train.unwrap_or(cfg.data.synth_train),
                n_test: n_test.unwrap_or(cfg.data.synth_test),
                seed: cfg.run.seed,
                edges: EdgeExtractorSpec::from_config(&cfg.data),
            };
            let m = synth_dataset(&root, &opts)?;
            let (tr, te) = m.split_sizes();
            println!("{}: {tr} train / {te} test images", root.display());
        }
        Command::PrepareData { annotations, images, category, train_ratio, .. } => {
            let root = dataset_target(c);
            let policy = match train_ratio {
                Some(r) => SplitPolicy::Ratio(*r),
                None => default_policy(category, cfg.data.train_ratio),
            };
            let m = curate_by_category(&CurateRequest {
                annotations,
                images_dir: images,
                category,
                out_dir: &root,
                policy,
                seed: cfg.run.seed,
                resolution: cfg.run.resolution,
                edges: EdgeExtractorSpec::from_config(&cfg.data),
            })?;
            let (tr, te) = m.split_sizes();
            println!("{}: {tr} train / {te} test images of `{category}`", root.display());
        }
        Command::Train { resume, .. } => {
            let dataset = Dataset::open(Path::new(&cfg.data.dataset_dir))?;
            let backend = backend_from_config::<T>(&cfg.networks)?;
            let opts = TrainOptions {
                out_dir: c.out.clone(),
                cache_root: c.cache_root(),
                resume_from: resume.clone(),
                stop_after: None,
            };
            let outcome = train(&cfg, &dataset, &backend, &opts, &mut |s| {
                log::info!("epoch {} done, step {}", s.epoch, s.global_step);
                Ok(())
            })?;
            if let Some(ckpt) = outcome.checkpoint {
                println!("{}", ckpt.display());
            }
        }
        Command::Colorize { checkpoint, input, .. } => {
            let (_, stored) = asl_core::training::load_generator::<T>(checkpoint, asl_core::networks::Role::G)?;
            let res = stored.run.resolution;
            let files = if input.is_dir() {
                image_files(input)?.into_iter().map(|f| input.join(f)).collect()
            } else {
                vec![input.clone()]
            };
            let dir = c.out.join("colorized");
            fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
            for file in files {
                let (t, domain): (Tensor<T>, _) = match stored.run.task {
                    Task::Sketch2Photo => (load_gray(&file, res)?, Domain::Sketch),
                    Task::Label2Photo => (load_color(&file, res)?, Domain::LabelMap),
                };
                let out = colorize(checkpoint, &ImageBatch::new(t, domain)?)?;
                let name = format!("{}.png", stem(&file.to_string_lossy()));
                save_png(&dir.join(name), &image::DynamicImage::ImageRgb8(tensor_to_rgb(out.tensor())?))?;
            }
            println!("{}", dir.display());
        }
        Command::Evaluate { checkpoint, .. } => {
            let checkpoint = checkpoint
                .clone()
                .ok_or_else(|| Error::MissingGeneratorRole("G (no --checkpoint given)".into()))?;
            let dataset = Dataset::open(Path::new(&cfg.data.dataset_dir))?;
            let extractor = extractor_from_config::<T>(&cfg.networks)?;
            let opts = EvalOptions {
                out_dir: c.out.clone(),
                cache_root: c.cache_root(),
                batch_size: cfg.run.batch_size.max(1),
                grid_images: 4,
            };
            for row in evaluate_run::<T>(&checkpoint, &dataset, extractor.as_ref(), &opts)? {
                println!("{}", row.to_csv());
            }
        }
        Command::AblateWeights { grid, .. } => {
            let grid = grid.clone().unwrap_or_else(|| DEFAULT_GRID.to_vec());
            let dataset = Dataset::open(Path::new(&cfg.data.dataset_dir))?;
            let backend = backend_from_config::<T>(&cfg.networks)?;
            let extractor = extractor_from_config::<T>(&cfg.networks)?;
            let points = ablate_weights(&cfg, &grid, &dataset, &backend, extractor.as_ref(), &c.out, &c.cache_root())?;
            let table = ablation_table(&points);
            let reports = c.out.join("reports");
            fs::create_dir_all(&reports).with_context(|| reports.display().to_string())?;
            asl_core::archive::write_atomic(&reports.join(ABLATION_REPORT), table.as_bytes())?;
            print!("{table}");
        }
    }
    Ok(())
}

fn error_code(e: &anyhow::Error) -> &'static str {
    e.downcast_ref::<Error>().map_or("Internal", Error::code)
}

fn write_error(out: &Path, e: &anyhow::Error) {
    let record = serde_json::json!({ "code": error_code(e), "message": format!("{e:#}") });
    let _ = fs::create_dir_all(out);
    let _ = fs::write(out.join(ERROR_RECORD), format!("{record:#}\n"));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let c = common(&cli.command);
    let result = (|| -> anyhow::Result<()> {
        let _ = fs::remove_file(c.out.join(ERROR_RECORD));
        let cfg = c.resolve()?;
        fs::create_dir_all(&c.out).with_context(|| c.out.display().to_string())?;
        asl_core::archive::write_atomic(&c.out.join(snapshot_name(&cli.command)), cfg.to_toml().as_bytes())?;
        let cfg = validated(cfg)?;
        run(&cli.command, cfg)
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e:#}", error_code(&e));
            write_error(&c.out, &e);
            ExitCode::from(2)
        }
    }
}
