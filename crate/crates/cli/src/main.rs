use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fewshot::augment::{apply_strategy, AugmentInputs, AugmentationKind, RegionRecord};
use fewshot::config::RunConfig;
use fewshot::detector::Detector;
use fewshot::episodic::{make_split, CategorySplit, KShotSubset};
use fewshot::eval::write_detections;
use fewshot::experiment::{row_label, run_comparison};
use fewshot::pipeline::{evaluate_novel, run_fingerprint};
use fewshot::seed::derive_named;
use fewshot::trainer::{finetune, trace_csv, train_base, Checkpoint, Stage, TrainError, TrainOptions};
use fewshot::voc::{generate_synthetic_dataset, load_dataset, save_dataset, validate_dataset, DatasetIndex};

#[derive(Parser)]
#[command(
    name = "fewshot",
    version,
    about = "Few-shot object detection by feature reweighting"
)]
struct Cli {
    /// TOML config of namespaced keys.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Run directory; every output lands under it.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for every stochastic component (training, data rendering, splits).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Treat unreadable dataset files as errors instead of skipping them.
    #[arg(long, global = true)]
    strict: bool,
    /// Override one config key, e.g. `--set trainer.lr=0.01`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset tools.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Augmentation tools.
    #[command(subcommand)]
    Augment(AugmentCommand),
    /// Training stages.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Evaluate a fine-tuned checkpoint on the held-out set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// k-shot manifest written by `train finetune`; defaults to
        /// `kshot.txt` next to the checkpoint.
        #[arg(long)]
        kshot: Option<PathBuf>,
    },
    /// Strategy comparisons.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Check a dataset in the VOC layout and print a summary.
    Validate { root: PathBuf },
    /// Render a synthetic dataset from the `synth` keys.
    Synth {
        #[arg(long)]
        images: Option<usize>,
    },
}

#[derive(Subcommand)]
enum AugmentCommand {
    /// Materialize `augment.kind` applied to a dataset.
    Apply {
        /// Dataset root; the configured training set when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Continue from a checkpoint of the same stage.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop once this many iterations of the stage are done.
    #[arg(long)]
    stop_after: Option<u64>,
    /// Also write a checkpoint every N iterations.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
}

#[derive(Subcommand)]
enum TrainCommand {
    /// Episodic training on the base categories.
    Base(TrainArgs),
    /// Fine-tune a base checkpoint on a k-shot subset.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        args: TrainArgs,
    },
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Run every configured strategy and seed and write the comparison.
    Run,
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<fewshot::Error> for Failure {
    fn from(e: fewshot::Error) -> Self {
        let mut msg = e.to_string();
        let mut src = std::error::Error::source(&e);
        while let Some(s) = src {
            let text = s.to_string();
            if !msg.contains(&text) {
                msg.push_str(&format!(": {text}"));
            }
            src = s.source();
        }
        if e.is_validation() {
            Failure::Invalid(msg)
        } else {
            Failure::Runtime(msg)
        }
    }
}

macro_rules! impl_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                fewshot::Error::from(e).into()
            }
        }
    )*};
}

impl_from!(
    fewshot::config::ConfigError,
    fewshot::voc::VocError,
    fewshot::augment::AugmentError,
    fewshot::episodic::EpisodicError,
    fewshot::detector::DetectorError,
    fewshot::trainer::TrainError,
    fewshot::experiment::ExperimentError
);

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

struct Ctx {
    cfg: RunConfig,
    out: Option<PathBuf>,
}

impl Ctx {
    fn out(&self) -> Result<&Path, Failure> {
        self.out
            .as_deref()
            .ok_or_else(|| Failure::Invalid("this command needs --out DIR".into()))
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, Failure> {
        let path = self.out()?.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
        }
        std::fs::write(&path, contents).map_err(|e| io_failure(&path, e))?;
        Ok(path)
    }

    fn echo_config(&self) -> Result<(), Failure> {
        self.write("config.toml", self.cfg.to_toml()).map(|_| ())
    }

    fn split(&self, train: &DatasetIndex) -> Result<CategorySplit, Failure> {
        Ok(make_split(
            train.categories(),
            &self.cfg.split_mode()?,
            self.cfg.run.seed,
        )?)
    }

    /// Training set with `augment.kind` applied, and the held-out test set.
    fn data(&self) -> Result<(DatasetIndex, DatasetIndex), Failure> {
        let (train, test) = self.cfg.datasets()?;
        let strategy = &self.cfg.augment.strategy;
        if strategy.kind == AugmentationKind::None {
            return Ok((train, test));
        }
        let augmented = self.augment(&train)?;
        Ok((augmented, test))
    }

    fn augment(&self, base: &DatasetIndex) -> Result<DatasetIndex, Failure> {
        let (backgrounds, regions) = if self.cfg.augment.backgrounds.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            let layout = fewshot::voc::LayoutConfig {
                registry: Some(base.categories().clone()),
                ..self.cfg.layout()
            };
            let bg = load_dataset(self.cfg.augment.backgrounds.as_ref(), &layout)?.index;
            let regions: Vec<RegionRecord> = bg
                .records()
                .iter()
                .filter(|r| !r.annotations.is_empty())
                .map(|r| RegionRecord::from_annotated(r))
                .collect();
            (bg.records().to_vec(), regions)
        };
        let inputs = AugmentInputs {
            backgrounds: &backgrounds,
            regions: &regions,
        };
        Ok(apply_strategy(
            base,
            &self.cfg.augment.strategy,
            &inputs,
            derive_named(self.cfg.run.seed, "augment"),
        )?)
    }

    fn options(&self, args: &TrainArgs) -> Result<TrainOptions, Failure> {
        Ok(TrainOptions {
            resume: args.resume.as_deref().map(Checkpoint::load).transpose()?,
            stop_after: args.stop_after,
            checkpoint_every: args.checkpoint_every,
            checkpoint_dir: (args.checkpoint_every > 0)
                .then(|| self.out().map(|o| o.join("checkpoints")))
                .transpose()?,
        })
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut overrides = Vec::new();
    if let Some(s) = cli.seed {
        for key in ["run.seed", "synth.seed", "experiment.data_seed"] {
            overrides.push(format!("{key}={s}"));
        }
        overrides.push(format!("experiment.seeds=[{s}]"));
    }
    if cli.deterministic {
        overrides.push("run.deterministic=true".into());
    }
    if cli.strict {
        overrides.push("dataset.strict=true".into());
    }
    overrides.extend(cli.overrides);
    let text = match &cli.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Failure::Invalid(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let cfg = RunConfig::resolve(text.as_deref(), &overrides)?;
    if cfg.run.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let ctx = Ctx { cfg, out: cli.out };
    let seed = ctx.cfg.run.seed;

    match cli.command {
        Command::Dataset(DatasetCommand::Validate { root }) => {
            let summary = validate_dataset(&root, &ctx.cfg.layout())?;
            println!("{summary}");
            if ctx.out.is_some() {
                ctx.write("validation.txt", format!("{summary}\n"))?;
            }
        }
        Command::Dataset(DatasetCommand::Synth { images }) => {
            let n = images.unwrap_or(ctx.cfg.synth.images);
            let spec = ctx.cfg.synthetic_spec(n, "synth_");
            let out = ctx.out()?;
            let ds = generate_synthetic_dataset(&spec, derive_named(ctx.cfg.synth.seed, "train"))?;
            save_dataset(&ds, out, &ctx.cfg.layout())?;
            ctx.echo_config()?;
            println!(
                "{} images, {} annotations written to {}",
                ds.len(),
                ds.annotation_count(),
                out.display()
            );
        }
        Command::Augment(AugmentCommand::Apply { dataset }) => {
            let base = match dataset {
                Some(root) => load_dataset(&root, &ctx.cfg.layout())?.index,
                None => ctx.cfg.datasets()?.0,
            };
            let out = ctx.out()?;
            let augmented = ctx.augment(&base)?;
            save_dataset(&augmented, &out.join("dataset"), &ctx.cfg.layout())?;
            ctx.echo_config()?;
            println!(
                "{}: {} images, {} annotations",
                ctx.cfg.augment.strategy.kind.label(),
                augmented.len(),
                augmented.annotation_count()
            );
        }
        Command::Train(TrainCommand::Base(args)) => {
            let opts = ctx.options(&args)?;
            ctx.out()?;
            let (train, _) = ctx.data()?;
            let split = ctx.split(&train)?;
            let outcome = train_base(&train, &split, &ctx.cfg.detector, &ctx.cfg.trainer, seed, &opts)?;
            ctx.echo_config()?;
            ctx.write("base_trace.csv", trace_csv(&outcome.trace))?;
            let path = ctx.write("base.ckpt", outcome.checkpoint.to_bytes())?;
            println!(
                "base checkpoint at iteration {} written to {}",
                outcome.checkpoint.iteration,
                path.display()
            );
        }
        Command::Train(TrainCommand::Finetune { checkpoint, args }) => {
            let opts = ctx.options(&args)?;
            ctx.out()?;
            let base = Checkpoint::load(&checkpoint)?;
            let (train, _) = ctx.data()?;
            let split = ctx.split(&train)?;
            let ft = finetune(&base, &train, &split, &ctx.cfg.detector, &ctx.cfg.trainer, seed, &opts)?;
            ctx.echo_config()?;
            ctx.write("finetune_trace.csv", trace_csv(&ft.outcome.trace))?;
            ctx.write("kshot.txt", ft.subset.manifest(&train)?)?;
            let path = ctx.write("finetune.ckpt", ft.outcome.checkpoint.to_bytes())?;
            println!(
                "finetune checkpoint at iteration {} written to {}",
                ft.outcome.checkpoint.iteration,
                path.display()
            );
        }
        Command::Eval { checkpoint, kshot } => {
            ctx.out()?;
            let ck = Checkpoint::load(&checkpoint)?;
            if ck.stage != Stage::Finetune {
                return Err(TrainError::Mismatch {
                    what: "stage",
                    expected: Stage::Finetune.to_string(),
                    found: ck.stage.to_string(),
                }
                .into());
            }
            let kshot = kshot.unwrap_or_else(|| checkpoint.with_file_name("kshot.txt"));
            let manifest =
                std::fs::read_to_string(&kshot).map_err(|e| Failure::Invalid(format!("{}: {e}", kshot.display())))?;
            let (train, test) = ctx.data()?;
            let split = ctx.split(&train)?;
            let subset = KShotSubset::from_manifest(&manifest, &train)?;
            let detector = Detector::from_params(ctx.cfg.detector.clone(), ck.params)?;
            let fingerprint = run_fingerprint(
                &ctx.cfg.detector,
                &ctx.cfg.trainer,
                &ctx.cfg.eval,
                seed,
                &[&train, &test],
            );
            let method = row_label(ctx.cfg.augment.strategy.kind);
            let (detections, _, report) =
                evaluate_novel(&detector, &subset, &split, &test, &method, &fingerprint, &ctx.cfg.eval)?;
            ctx.echo_config()?;
            ctx.write("detections.txt", write_detections(&detections, train.categories()))?;
            ctx.write("report.csv", report.to_csv())?;
            ctx.write("report.txt", report.to_text())?;
            print!("{}", report.to_text());
        }
        Command::Experiment(ExperimentCommand::Run) => {
            let out = ctx.out()?.to_path_buf();
            let spec = ctx.cfg.experiment_spec()?;
            let result = run_comparison(&spec)?;
            ctx.echo_config()?;
            result.write_to(&out)?;
            print!("{}\n{}", result.table(), result.observation());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("FEWSHOT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
