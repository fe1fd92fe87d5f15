//! `avfusion` command line: synthetic data, training, evaluation, gradient
//! checks and the window-size ablation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use avfusion::data::{generate_synthetic, synthesize, Dataset, SynthConfig, Split, WindowSize, TEXT_BANK_FILE};
use avfusion::model::{ModelConfig, ModelState};
use avfusion::objectives::TextBank;
use avfusion::tensor::GradCheckConfig;
use avfusion::trainer::{
    ablate_windows, combined_loss_grad_check, evaluate, train, AblationData, TrainConfig, BEST_CHECKPOINT,
    LAST_GOOD_CHECKPOINT, RUN_LOG,
};
use avfusion::{Error, ErrorKind};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const CONFIG_ECHO: &str = "config.json";
pub const ABLATION_TABLE: &str = "ablation.txt";
pub const ABLATION_JSON: &str = "ablation.json";
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "avfusion", version, about = "Audio-visual expression recognition head")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and write the best checkpoint and run log.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Finite-difference check of every parameter under the training loss.
    Gradcheck(GradcheckArgs),
    /// Train one model per window size and report a comparison table.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub per_class: usize,
    #[arg(long, default_value_t = 10)]
    pub window: usize,
    #[arg(long, default_value_t = 4.0)]
    pub separation: f32,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

/// Flags that override values from `--config`.
#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// JSON file with `model`, `train` and `data` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub accumulation_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory with train.json, val.json and the text bank.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: Split,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub max_coords: usize,
    /// Model config JSON; defaults to a narrow model with the full depth.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [10usize, 15, 30, 60])]
    pub windows: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    /// Directory holding one dataset per window in `w{N}/`. Without it each
    /// window gets a synthetic dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    pub per_class: usize,
    #[arg(long, default_value_t = 4.0)]
    pub separation: f32,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// File values, then flags.
    pub fn resolve(o: &Overrides, data: Option<&Path>) -> Result<Self, CliError> {
        let mut c = match &o.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        let t = &mut c.train;
        if let Some(v) = o.epochs {
            t.epochs = v;
        }
        if let Some(v) = o.lr {
            t.lr = v;
        }
        if let Some(v) = o.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = o.accumulation_steps {
            t.accumulation_steps = v;
        }
        if let Some(v) = o.seed {
            t.seed = v;
        }
        if let Some(v) = o.lambda {
            t.lambda = v;
        }
        if let Some(d) = data {
            c.data = Some(d.to_path_buf());
        }
        c.model.validate()?;
        c.train.validate()?;
        Ok(c)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("{0} exists and is not empty; pass --force to overwrite")]
    Refused(PathBuf),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config => EXIT_CONFIG,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Numeric => EXIT_NUMERIC,
            },
            CliError::Config(_) | CliError::Refused(_) => EXIT_CONFIG,
            CliError::GradCheck(_) => EXIT_NUMERIC,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Creates `dir`, refusing a non-empty one unless `force`. With `force` the
/// listed artifacts from an earlier run are removed first.
fn prepare_out(dir: &Path, force: bool, artifacts: &[&str]) -> CliResult {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Refused(dir.to_path_buf()));
        }
        for a in artifacts {
            let p = dir.join(a);
            if p.is_dir() {
                fs::remove_dir_all(&p).map_err(io_err(&p))?;
            } else if p.exists() {
                fs::remove_file(&p).map_err(io_err(&p))?;
            }
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))?;
    Ok(())
}

fn window(w: usize) -> CliResult<WindowSize> {
    Ok(WindowSize::try_from(w)?)
}

fn load_split(dir: &Path, split: Split) -> CliResult<Dataset> {
    Ok(Dataset::load(&dir.join(format!("{}.json", split.as_str())))?)
}

fn load_bank(dir: &Path) -> CliResult<TextBank> {
    Ok(TextBank::load(&dir.join(TEXT_BANK_FILE))?)
}

#[derive(Serialize)]
struct SynthEcho {
    per_class: usize,
    window: usize,
    separation: f32,
    seed: u64,
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> CliResult {
    let cfg = SynthConfig::new(a.per_class, window(a.window)?, a.separation, a.seed);
    prepare_out(&a.out, a.force, &["features", "train.json", "val.json", "test.json", TEXT_BANK_FILE, CONFIG_ECHO])?;
    let (_, data) = generate_synthetic(&cfg, &a.out)?;
    write_json(
        &a.out.join(CONFIG_ECHO),
        &SynthEcho {
            per_class: a.per_class,
            window: a.window,
            separation: a.separation,
            seed: a.seed,
        },
    )?;
    let _ = writeln!(
        out,
        "wrote {} train, {} val, {} test samples to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        a.out.display()
    );
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult {
    let cfg = CliConfig::resolve(&a.overrides, a.data.as_deref())?;
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| CliError::Config("no dataset: pass --data or set `data` in the config".into()))?;
    let train_set = load_split(&data, Split::Train)?;
    let val_set = load_split(&data, Split::Val)?;
    let bank = load_bank(&data)?;
    prepare_out(&a.out, a.force, &[BEST_CHECKPOINT, LAST_GOOD_CHECKPOINT, RUN_LOG, CONFIG_ECHO])?;
    write_json(&a.out.join(CONFIG_ECHO), &cfg)?;
    let outcome = train(&train_set.samples, &val_set.samples, &bank, &cfg.model, &cfg.train, Some(&a.out))?;
    for r in outcome.log.records() {
        if let avfusion::trainer::LogRecord::Epoch {
            epoch,
            lr,
            train,
            val,
            seconds,
            best,
        } = r
        {
            let mark = if *best { " *" } else { "" };
            let _ = writeln!(
                out,
                "epoch {epoch:>3}  lr {lr:.3e}  train F1 {:.4}  val F1 {:.4}  {seconds:.1}s{mark}",
                train.macro_f1, val.macro_f1
            );
        }
    }
    let _ = writeln!(
        out,
        "best epoch {} val macro F1 {:.4}; checkpoint {}",
        outcome.best_epoch,
        outcome.best_val.macro_f1,
        a.out.join(BEST_CHECKPOINT).display()
    );
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult {
    let state = ModelState::load(&a.ckpt)?;
    let set = load_split(&a.data, a.split)?;
    if set.is_empty() {
        return Err(Error::Data(format!("{} split is empty", a.split.as_str())).into());
    }
    let report = evaluate(&state, &set.samples, a.batch_size.max(1))?;
    let _ = write!(out, "{}", report.to_table());
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(())
}

/// Full-depth model with narrow widths so the check runs in seconds.
pub fn gradcheck_model() -> ModelConfig {
    ModelConfig::tiny()
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> CliResult {
    let model = match &a.model {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => gradcheck_model(),
    };
    if a.max_coords < 100 {
        return Err(CliError::Config("--max-coords must be at least 100".into()));
    }
    let check = GradCheckConfig {
        max_coords: a.max_coords,
        seed: a.seed,
        ..GradCheckConfig::default()
    };
    let report = combined_loss_grad_check(&model, a.seed, check)?;
    let w = report.params.iter().map(|p| p.name.len()).max().unwrap_or(0).max(9);
    let _ = writeln!(out, "{:<w$}  {:>6}  {:>12}  {:>7}", "Parameter", "Coords", "MaxRelErr", "Refined");
    for p in &report.params {
        let _ = writeln!(
            out,
            "{:<w$}  {:>6}  {:>12.3e}  {:>7}",
            p.name, p.coords_checked, p.max_rel_error, p.refined
        );
    }
    let worst = report.max_rel_error();
    let _ = writeln!(out, "max relative error {worst:.3e} (tolerance {GRAD_TOLERANCE:.0e})");
    let failing: Vec<&str> = report
        .params
        .iter()
        .filter(|p| p.max_rel_error > GRAD_TOLERANCE || p.max_rel_error.is_nan())
        .map(|p| p.name.as_str())
        .collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failing.join(", ")))
    }
}

pub fn cmd_ablate(a: &AblateArgs, out: &mut dyn Write) -> CliResult {
    let cfg = CliConfig::resolve(&a.overrides, a.data.as_deref())?;
    let windows: Vec<WindowSize> = a.windows.iter().map(|&w| window(w)).collect::<CliResult<_>>()?;
    let mut artifacts: Vec<String> = windows.iter().map(|w| format!("w{w}")).collect();
    artifacts.extend([ABLATION_TABLE, ABLATION_JSON, CONFIG_ECHO].map(String::from));
    let artifact_refs: Vec<&str> = artifacts.iter().map(String::as_str).collect();
    prepare_out(&a.out, a.force, &artifact_refs)?;
    write_json(&a.out.join(CONFIG_ECHO), &cfg)?;
    let seed = cfg.train.seed;
    let data_for = |w: WindowSize| -> avfusion::Result<AblationData> {
        match &cfg.data {
            Some(root) => {
                let dir = root.join(format!("w{w}"));
                let split = |s: Split| Dataset::load(&dir.join(format!("{}.json", s.as_str()))).map(|d| d.samples);
                let test_path = dir.join("test.json");
                Ok(AblationData {
                    train: split(Split::Train)?,
                    val: split(Split::Val)?,
                    test: if test_path.exists() { Some(split(Split::Test)?) } else { None },
                    bank: TextBank::load(&dir.join(TEXT_BANK_FILE))?,
                })
            }
            None => {
                let d = synthesize(&SynthConfig::new(a.per_class, w, a.separation, seed))?;
                let bank = TextBank::new(d.text_bank, avfusion::data::TEXT_DIM)?;
                Ok(AblationData {
                    train: d.train,
                    val: d.val,
                    test: Some(d.test),
                    bank,
                })
            }
        }
    };
    let report = ablate_windows(&windows, data_for, &cfg.model, &cfg.train, Some(&a.out))?;
    let table = report.to_table();
    fs::write(a.out.join(ABLATION_TABLE), &table).map_err(io_err(&a.out))?;
    write_json(&a.out.join(ABLATION_JSON), &report)?;
    let _ = write!(out, "{table}");
    Ok(())
}

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> CliResult {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Ablate(a) => cmd_ablate(a, out),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match dispatch(&cli, &mut lock) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
