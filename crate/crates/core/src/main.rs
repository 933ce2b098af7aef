use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lesita::checkpoint::Checkpoint;
use lesita::experiment::{
    self, ExperimentConfig, ExperimentKind, GridConfig, ModelKind, SyntheticConfig, OUTPUT_ROOT_ENV,
};
use lesita::training::L2Variant;
use lesita::{Error, Result};

/// Sparse recovery with side information: data generation, training,
/// evaluation and inspection.
#[derive(Parser, Debug)]
#[command(name = "lesita", version)]
struct Cli {
    /// Directory that run outputs are written under.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = experiment::DEFAULT_OUTPUT_ROOT)]
    output_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (coupled codes or image pairs) to a directory.
    GenerateData {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Destination directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Evaluate a saved checkpoint on the configured test data.
    Evaluate {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run every cell of a parameter grid.
    RunGrid {
        /// Grid file: a `[base]` experiment config plus `[axes]`.
        #[arg(long)]
        grid: PathBuf,
        /// Override the grid's worker count.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Print checkpoints, dataset statistics or validated configs.
    Inspect {
        #[command(subcommand)]
        what: InspectCommand,
    },
}

#[derive(Subcommand, Debug)]
enum InspectCommand {
    Checkpoint { path: PathBuf },
    Dataset { dir: PathBuf },
    Config { path: PathBuf },
}

/// Experiment config file plus field overrides.
#[derive(Args, Debug, Default)]
struct ExperimentArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    /// synthetic_sparse or image_cs.
    #[arg(long)]
    experiment: Option<String>,
    /// ista, sita, lista, lesita, lesita_ae or lesita_rec.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    tied: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    rho: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    /// Use the full 500K-sample synthetic protocol.
    #[arg(long)]
    full_scale: bool,
    /// Dataset directory (synthetic arrays or image pairs).
    #[arg(long)]
    dataset: Option<String>,
    /// CS ratio m/n; repeat for several.
    #[arg(long = "ratio")]
    ratios: Vec<f64>,
    /// Coupling loss variant: a or b.
    #[arg(long)]
    l2_variant: Option<String>,
    #[arg(long)]
    fixed_phi: bool,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    target_nmse_db: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    rec_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Per-epoch learning-rate multiplier.
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, v: &str) -> Result<T> {
    T::deserialize(serde::de::value::StrDeserializer::<serde::de::value::Error>::new(v))
        .map_err(|_| Error::Config(format!("unknown {what} {v:?}")))
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if self.full_scale {
            let dataset = c.synthetic.dataset.take();
            c.synthetic = SyntheticConfig {
                rho: c.synthetic.rho,
                dataset,
                ..SyntheticConfig::full_scale()
            };
        }
        if let Some(v) = &self.name {
            c.name = v.clone();
        }
        if let Some(v) = &self.experiment {
            c.experiment = parse_enum::<ExperimentKind>("experiment", v)?;
        }
        if let Some(v) = &self.model {
            c.model = v.parse::<ModelKind>()?;
        }
        if let Some(v) = &self.l2_variant {
            c.image.l2_variant = v.parse::<L2Variant>()?;
        }
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$src.clone() { c.$($dst).+ = v; })*
            };
        }
        set!(
            depth => depth, lambda => lambda, seed => seed,
            k => synthetic.k, s => synthetic.s, rho => synthetic.rho,
            count => synthetic.count, n => synthetic.n,
            t_max => solver.t_max,
            epochs => train.epochs, batch_size => train.batch_size,
            learning_rate => train.learning_rate, lr_decay => train.lr_decay,
            lambda1 => train.lambda1, lambda2 => train.lambda2,
        );
        if let Some(v) = &self.output_dir {
            c.output_dir = Some(v.clone());
        }
        if let Some(v) = &self.dataset {
            match c.experiment {
                ExperimentKind::SyntheticSparse => c.synthetic.dataset = Some(v.clone()),
                ExperimentKind::ImageCs => c.image.dataset = Some(v.clone()),
            }
        }
        if self.target_nmse_db.is_some() {
            c.solver.target_nmse_db = self.target_nmse_db;
        }
        if self.rec_epochs.is_some() {
            c.image.rec_epochs = self.rec_epochs;
        }
        if !self.ratios.is_empty() {
            c.image.ratios = self.ratios.clone();
        }
        c.tied |= self.tied;
        c.image.fixed_phi |= self.fixed_phi;
        c.validate()?;
        Ok(c)
    }
}

fn print_report(report: &experiment::ExperimentReport) -> Result<()> {
    report.write_csv(std::io::stdout().lock())
}

fn execute(cli: Cli) -> Result<()> {
    let root = cli.output_root.as_path();
    match cli.command {
        Command::GenerateData { exp, out } => {
            let cfg = exp.resolve()?;
            match cfg.experiment {
                ExperimentKind::SyntheticSparse => experiment::write_synthetic_dataset(&cfg, &out)?,
                ExperimentKind::ImageCs => experiment::write_image_dataset(&cfg, &out)?,
            };
            print!("{}", experiment::dataset_stats(&out)?);
        }
        Command::Train { exp } => {
            let cfg = exp.resolve()?;
            let report = experiment::run(&cfg, root)?;
            eprintln!("outputs in {}", cfg.output_path(root).display());
            print_report(&report)?;
        }
        Command::Evaluate { exp, checkpoint } => {
            let cfg = exp.resolve()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let report = experiment::evaluate_checkpoint(&cfg, &ck)?;
            let dir = cfg.output_path(root);
            std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
            report.save(dir.join("evaluation.csv"))?;
            print_report(&report)?;
        }
        Command::RunGrid { grid, jobs } => {
            let mut g = GridConfig::load(&grid)?;
            if let Some(j) = jobs {
                if j == 0 {
                    return Err(Error::Config("jobs must be >= 1".into()));
                }
                g.jobs = j;
            }
            let report = experiment::run_grid(&g, root)?;
            print_report(&report)?;
        }
        Command::Inspect { what } => match what {
            InspectCommand::Checkpoint { path } => print!("{}", Checkpoint::load(&path)?.dump()),
            InspectCommand::Dataset { dir } => print!("{}", experiment::dataset_stats(&dir)?),
            InspectCommand::Config { path } => {
                let text = std::fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
                let echo = match ExperimentConfig::parse(&text) {
                    Ok(c) => c.to_toml()?,
                    Err(first) => match GridConfig::parse(&text) {
                        Ok(g) => format!("# grid with {} cells\n{}", g.cells().len(), toml_of(&g)?),
                        Err(_) => return Err(first),
                    },
                };
                println!("ok");
                print!("{echo}");
            }
        },
    }
    Ok(())
}

fn toml_of<T: serde::Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Config(e.to_string()))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
