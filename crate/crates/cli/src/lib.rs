//! `ncttt` command-line driver.

mod overrides;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use ncttt::autodiff::Tensor;
use ncttt::data::npy::{read_npy, write_npy, Dtype};
use ncttt::data::{apply_shift, make_blobs, make_rings, DatasetManifest, ShiftKind, ShiftSpec};
use ncttt::pipeline::{
    emit_figure_data, sweep, write_sweep_csv, Experiment, FigureKind, FigureParams, Metrics, SweepGrid,
};

pub use overrides::apply_overrides;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

/// Default output root when `--out` is absent.
pub const OUT_DIR_ENV: &str = "NCTTT_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "ncttt", version, about = "Noise-contrastive test-time training experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (JSON)
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    /// Replace a config value, e.g. `adapt.iterations=0`; repeatable
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output root [default: $NCTTT_OUT_DIR, else ./runs]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Master seed; replaces `train.seed`
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the source domain and write a checkpoint
    Train(Common),
    /// Episodic test-time adaptation on the target domain
    Adapt(Common),
    /// Unadapted and prediction-time batchnorm evaluation
    Eval(Common),
    /// Attach layer × sigma_s grid, mean and std over seeds
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Attach layers to try
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<usize>,
        /// In-distribution noise scales to try (sigma_o keeps the config's ratio)
        #[arg(long = "sigma-s", value_delimiter = ',', required = true)]
        sigma_s: Vec<f64>,
        /// Seeds per cell
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Worker threads
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write figure data as CSV
    Fig(FigArgs),
    /// Generate a synthetic dataset as NPY arrays plus a manifest
    GenData(GenDataArgs),
    /// Inspect or convert NPY files
    Npy {
        #[command(subcommand)]
        action: NpyAction,
    },
}

#[derive(Debug, Args)]
pub struct FigArgs {
    /// posterior_grid | samples_probs | gradient_field | beta_curve | accuracy_curve
    pub kind: String,
    /// In-distribution noise scale
    #[arg(long = "sigma-s")]
    pub sigma_s: Option<f64>,
    /// Out-of-distribution noise scale
    #[arg(long = "sigma-o")]
    pub sigma_o: Option<f64>,
    /// Noise dimension for beta_curve
    #[arg(long)]
    pub dim: Option<usize>,
    /// Grid points per axis
    #[arg(long)]
    pub grid: Option<usize>,
    /// Grid half-width
    #[arg(long)]
    pub extent: Option<f64>,
    /// Number of 2-D centers
    #[arg(long)]
    pub centers: Option<usize>,
    /// Draws per class for samples_probs
    #[arg(long)]
    pub samples: Option<usize>,
    /// Discriminator training steps for gradient_field
    #[arg(long)]
    pub steps: Option<usize>,
    /// Smallest noise ratio for beta_curve
    #[arg(long = "beta-min")]
    pub beta_min: Option<f64>,
    /// Largest noise ratio for beta_curve
    #[arg(long = "beta-max")]
    pub beta_max: Option<f64>,
    /// Noise ratio increment for beta_curve
    #[arg(long = "beta-step")]
    pub beta_step: Option<f64>,
    /// metrics.json of an adapted run, for accuracy_curve
    #[arg(long, value_name = "FILE")]
    pub metrics: Option<PathBuf>,
    /// Also write an SVG heatmap when the figure is a grid
    #[arg(long)]
    pub svg: bool,
    /// Output directory [default: $NCTTT_OUT_DIR, else ./runs]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed for centers and noise draws
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Generator {
    Blobs,
    Rings,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Dataset family
    pub generator: Generator,
    /// File stem of the written arrays and manifest
    #[arg(long, default_value = "data")]
    pub name: String,
    /// Classes for blobs
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Examples per class for blobs
    #[arg(long = "per-class", default_value_t = 300)]
    pub per_class: usize,
    /// Feature dimension for blobs
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Distance between neighbouring class means for blobs
    #[arg(long, default_value_t = 7.0)]
    pub separation: f64,
    /// Total examples for rings
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Radial jitter for rings
    #[arg(long = "ring-noise", default_value_t = 0.1)]
    pub ring_noise: f64,
    /// Shift as `kind:severity`, e.g. `rotation:4`
    #[arg(long)]
    pub shift: Option<String>,
    /// Output directory [default: $NCTTT_OUT_DIR, else ./runs]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Generator and shift seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum NpyAction {
    /// Print dtype and shape
    Info { file: PathBuf },
    /// Write `<stem>.csv`, one row per leading index
    ToCsv {
        file: PathBuf,
        /// Output directory [default: $NCTTT_OUT_DIR, else ./runs]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Write `<stem>.npy` from a headerless numeric CSV
    FromCsv {
        file: PathBuf,
        /// u1 | f4 | f8
        #[arg(long, default_value = "f8")]
        dtype: String,
        /// Output directory [default: $NCTTT_OUT_DIR, else ./runs]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

/// A failure with its exit code and a short machine-readable code.
#[derive(Debug)]
pub struct CliError {
    pub exit: i32,
    pub code: String,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { exit: EXIT_USAGE, code: "usage".into(), message: message.into() }
    }

    fn with_context(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }

    /// The single diagnostic line written to stderr.
    pub fn line(&self) -> String {
        let msg = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error code={} message={msg}", self.code)
    }
}

impl From<ncttt::Error> for CliError {
    fn from(e: ncttt::Error) -> Self {
        CliError { exit: EXIT_FAILURE, code: e.code().into(), message: e.to_string() }
    }
}

impl From<ncttt::data::npy::NpyError> for CliError {
    fn from(e: ncttt::data::npy::NpyError) -> Self {
        ncttt::Error::from(e).into()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        ncttt::Error::from(e).into()
    }
}

fn out_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Loads the experiment named by `--config` with overrides and seed applied.
pub fn load_experiment(c: &Common) -> Result<Experiment, CliError> {
    let text = std::fs::read_to_string(&c.config)
        .map_err(|e| CliError::from(e).with_context(&c.config))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::from(ncttt::Error::from(e)).with_context(&c.config))?;
    // normalize through the schema so every defaulted key is addressable
    let parsed: ncttt::pipeline::ExperimentConfig = serde_json::from_value(value)
        .map_err(|e| CliError::from(ncttt::Error::Config(e.to_string())).with_context(&c.config))?;
    value = serde_json::to_value(&parsed).map_err(ncttt::Error::from)?;
    apply_overrides(&mut value, &c.overrides)?;
    let mut config: ncttt::pipeline::ExperimentConfig =
        serde_json::from_value(value).map_err(|e| CliError::usage(format!("override does not fit the config schema: {e}")))?;
    if let Some(seed) = c.seed {
        config.train.seed = seed;
    }
    let base = c.config.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Experiment::new(config, base)?)
}

fn print_metrics(dir: &Path, metrics: &Metrics) -> Result<(), CliError> {
    println!("run_dir={}", dir.display());
    println!("{}", serde_json::to_string_pretty(metrics).map_err(ncttt::Error::from)?);
    Ok(())
}

fn parse_shift(s: &str) -> Result<ShiftSpec, CliError> {
    let (kind, sev) = s
        .split_once(':')
        .ok_or_else(|| CliError::usage(format!("shift must look like kind:severity, got `{s}`")))?;
    let kind: ShiftKind = kind.parse().map_err(|e: ncttt::Error| CliError::usage(e.to_string()))?;
    let severity: u8 = sev.parse().map_err(|_| CliError::usage(format!("bad severity `{sev}`")))?;
    ShiftSpec::new(kind, severity).map_err(|e| CliError::usage(e.to_string()))
}

fn file_stem(path: &Path) -> Result<String, CliError> {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| CliError::usage(format!("{} has no file name", path.display())))
}

fn figure(args: FigArgs) -> Result<(), CliError> {
    let kind: FigureKind = args.kind.parse().map_err(|e: ncttt::Error| CliError::usage(e.to_string()))?;
    let mut p = FigureParams::default();
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { p.$field = v; })* };
    }
    set!(sigma_s, sigma_o, dim, grid, extent, centers, samples, steps, beta_min, beta_max, beta_step, seed);
    if kind == FigureKind::AccuracyCurve && args.metrics.is_none() {
        return Err(CliError::usage("accuracy_curve needs --metrics"));
    }
    if let Some(path) = &args.metrics {
        let m: Metrics = serde_json::from_str(&std::fs::read_to_string(path)?).map_err(ncttt::Error::from)?;
        p.curve = m
            .adapt
            .ok_or_else(|| CliError::usage(format!("{} holds no adaptation results", path.display())))?
            .curve;
    }
    let data = emit_figure_data(kind, &p)?;
    let out = out_root(args.out);
    std::fs::create_dir_all(&out)?;
    let csv = out.join(format!("{kind}.csv"));
    data.write_csv(&csv)?;
    println!("{}", csv.display());
    if args.svg {
        let svg = out.join(format!("{kind}.svg"));
        if data.write_svg(&svg)? {
            println!("{}", svg.display());
        }
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let mut ds = match a.generator {
        Generator::Blobs => make_blobs(a.classes, a.per_class, a.dim, a.separation, a.seed)?,
        Generator::Rings => make_rings(a.n, a.ring_noise, a.seed)?,
    };
    if let Some(s) = &a.shift {
        ds = apply_shift(&ds, &parse_shift(s)?, a.seed)?;
    }
    let path = DatasetManifest::save(&ds, &out_root(a.out), &a.name)?;
    println!("{}", path.display());
    Ok(())
}

fn npy(action: NpyAction) -> Result<(), CliError> {
    match action {
        NpyAction::Info { file } => {
            let bytes = std::fs::read(&file)?;
            let h = ncttt::data::npy::parse_header(&bytes)?;
            println!("dtype={} shape={:?}", h.dtype, h.shape);
        }
        NpyAction::ToCsv { file, out } => {
            let t = read_npy(&file)?;
            let cols = if t.shape().len() <= 1 { 1 } else { t.numel() / t.shape()[0].max(1) };
            let out = out_root(out);
            std::fs::create_dir_all(&out)?;
            let path = out.join(format!("{}.csv", file_stem(&file)?));
            let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&path).map_err(csv_err)?;
            for row in t.data().chunks(cols.max(1)) {
                w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
            }
            w.flush()?;
            println!("{}", path.display());
        }
        NpyAction::FromCsv { file, dtype, out } => {
            let dtype = Dtype::parse(&dtype).ok_or_else(|| CliError::usage(format!("unknown dtype `{dtype}`")))?;
            let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(&file).map_err(csv_err)?;
            let mut rows = Vec::new();
            for rec in r.records() {
                let rec = rec.map_err(csv_err)?;
                let row = rec
                    .iter()
                    .map(|f| f.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| CliError::usage(format!("{}: {e}", file.display())))?;
                rows.push(row);
            }
            let t = Tensor::from_rows(&rows)?;
            let out = out_root(out);
            std::fs::create_dir_all(&out)?;
            let path = out.join(format!("{}.npy", file_stem(&file)?));
            write_npy(&path, &t, dtype)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> CliError {
    CliError { exit: EXIT_FAILURE, code: "csv".into(), message: e.to_string() }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => {
            let exp = load_experiment(&c)?;
            let out = out_root(c.out);
            let rec = exp.train(&out)?;
            print_metrics(&exp.run_dir(&out)?, &rec.metrics)
        }
        Command::Adapt(c) => {
            let exp = load_experiment(&c)?;
            let out = out_root(c.out);
            let rec = exp.adapt(&out)?;
            print_metrics(&exp.run_dir(&out)?, &rec.metrics)
        }
        Command::Eval(c) => {
            let exp = load_experiment(&c)?;
            let out = out_root(c.out);
            let rec = exp.eval(&out)?;
            print_metrics(&exp.run_dir(&out)?, &rec.metrics)
        }
        Command::Sweep { common, layers, sigma_s, seeds, jobs } => {
            let exp = load_experiment(&common)?;
            let grid = SweepGrid { attach_layers: layers, sigma_s, seeds };
            let cells = sweep(&exp, &grid, jobs)?;
            let out = out_root(common.out);
            std::fs::create_dir_all(&out)?;
            let path = out.join(format!("sweep-{}.csv", exp.config.config_hash()?));
            write_sweep_csv(&cells, &path)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Fig(a) => figure(a),
        Command::GenData(a) => gen_data(a),
        Command::Npy { action } => npy(action),
    }
}

/// Help text of `verb` (the top level when `None`).
pub fn help_text(verb: Option<&str>) -> String {
    let mut cmd = Cli::command();
    match verb {
        None => cmd.render_help().to_string(),
        Some(v) => cmd
            .find_subcommand_mut(v)
            .map(|c| c.render_help().to_string())
            .unwrap_or_default(),
    }
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    EXIT_OK
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    eprint!("{e}");
                    EXIT_USAGE
                }
                _ => {
                    let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
                    eprintln!("{}", CliError::usage(first).line());
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit
        }
    }
}
