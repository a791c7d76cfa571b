//! Command-line surface: `train`, `eval`, `gradcheck`, `params`, `curves`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{self, ChannelStats, Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradcheckOptions};
use crate::models::{Arch, ClassifierModel, ModelConfig};
use crate::optim::AdamConfig;
use crate::tensor::{FaultInjection, GeluKind};
use crate::train::{self, parse_metrics_csv, write_text, TrainOptions, METRICS_HEADER};

pub const DATA_DIR_ENV: &str = "ACTIVATOR_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "activator-lab", version, about = "Patch-token image classifiers on CIFAR, trained from scratch")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics.csv, config.json and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Finite-difference gradient check at miniature scale, 64-bit.
    Gradcheck(GradcheckArgs),
    /// Per-module parameter counts against the closed-form formulas.
    Params(ParamsArgs),
    /// Merge the metrics.csv of several runs into one long-format CSV.
    Curves(CurvesArgs),
    /// Write full-size stand-in data files (class-coloured noise) for smoke runs.
    #[command(hide = true)]
    Synthetic(SyntheticArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// ps=4, d_model=256, 4 blocks, width 512, 4 heads, 100 epochs, batch 128, lr 1e-3.
    Paper,
    /// The gradient-check miniature with 1 epoch and batch 32.
    Mini,
}

/// Everything needed to reproduce a training run; echoed as `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub output_dir: PathBuf,
    /// Seeds both parameter initialisation and shuffling.
    pub seed: u64,
    pub checkpoint_interval: usize,
    /// Use only the first N samples of each split.
    pub limit: Option<usize>,
    pub record_time: bool,
}

impl RunConfig {
    pub fn preset(preset: Preset, arch: Arch, dataset: DatasetKind) -> Self {
        let (model, epochs, batch_size) = match preset {
            Preset::Paper => (ModelConfig::paper(arch, dataset.n_classes()), 100, 128),
            Preset::Mini => (
                ModelConfig {
                    n_classes: dataset.n_classes(),
                    ..ModelConfig::miniature(arch)
                },
                1,
                32,
            ),
        };
        Self {
            model,
            dataset,
            data_dir: None,
            epochs,
            batch_size,
            lr: 1e-3,
            output_dir: default_output_dir(arch, dataset, 0),
            seed: 0,
            checkpoint_interval: 0,
            limit: None,
            record_time: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.model.n_classes != self.dataset.n_classes() {
            return Err(Error::Config(format!(
                "model has {} classes but {} has {}",
                self.model.n_classes,
                self.dataset,
                self.dataset.n_classes()
            )));
        }
        if self.limit == Some(0) {
            return Err(Error::Config("--limit must be positive".into()));
        }
        Ok(())
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            seed: self.seed,
            checkpoint_interval: self.checkpoint_interval,
            output_dir: Some(self.output_dir.clone()),
            record_time: self.record_time,
        }
    }
}

fn default_output_dir(arch: Arch, dataset: DatasetKind, seed: u64) -> PathBuf {
    PathBuf::from("runs").join(format!("{arch}-{dataset}-seed{seed}"))
}

#[derive(Clone, Debug, Args)]
pub struct DataArgs {
    #[arg(long, default_value = "cifar10")]
    pub dataset: DatasetKind,
    /// Directory holding the binary batch files.
    #[arg(long, env = DATA_DIR_ENV)]
    pub data_dir: Option<PathBuf>,
    /// Use only the first N samples of each split.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Start from a previous run's config.json; other flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "paper")]
    pub preset: Preset,
    #[arg(long, default_value = "activator")]
    pub arch: Arch,
    /// cifar10 or cifar100 (default cifar10).
    #[arg(long)]
    pub dataset: Option<DatasetKind>,
    /// Directory holding the binary batch files.
    #[arg(long, env = DATA_DIR_ENV)]
    pub data_dir: Option<PathBuf>,
    /// Use only the first N samples of each split.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory (default runs/<arch>-<dataset>-seed<seed>).
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Save epoch_NNN.ckpt every N epochs (0 disables).
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    /// Write 0 in the seconds column so reruns are byte-identical.
    #[arg(long)]
    pub no_timing: bool,
    #[command(flatten)]
    pub model: ModelOverrides,
}

#[derive(Debug, Default, Args)]
pub struct ModelOverrides {
    /// Patch size; must divide 32.
    #[arg(long)]
    pub ps: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Number of residual blocks.
    #[arg(long)]
    pub n_blocks: Option<usize>,
    /// Hidden width of channel MLPs and GEGLU streams.
    #[arg(long)]
    pub d_mlp: Option<usize>,
    /// Hidden width of the mixer's token-mixing MLP.
    #[arg(long)]
    pub d_token_mlp: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub gelu: Option<GeluArg>,
    #[arg(long)]
    pub no_pos_embed: bool,
    /// Drop the LayerNorm on each GEGLU up-projection stream.
    #[arg(long)]
    pub no_stream_norm: bool,
    /// Drop the LayerNorm before pooling.
    #[arg(long)]
    pub no_final_norm: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GeluArg {
    Exact,
    Tanh,
}

impl ModelOverrides {
    fn apply(&self, m: &mut ModelConfig) {
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut m.ps, self.ps);
        set(&mut m.d_model, self.d_model);
        set(&mut m.n_blocks, self.n_blocks);
        set(&mut m.d_mlp, self.d_mlp);
        set(&mut m.d_token_mlp, self.d_token_mlp);
        set(&mut m.heads, self.heads);
        if let Some(g) = self.gelu {
            m.gelu = match g {
                GeluArg::Exact => GeluKind::Exact,
                GeluArg::Tanh => GeluKind::Tanh,
            };
        }
        m.pos_embed &= !self.no_pos_embed;
        m.stream_norm &= !self.no_stream_norm;
        m.final_norm &= !self.no_final_norm;
    }
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut rc = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
                serde_json::from_str::<RunConfig>(&text)?
            }
            None => {
                let dataset = self.dataset.unwrap_or(DatasetKind::Cifar10);
                let mut rc = RunConfig::preset(self.preset, self.arch, dataset);
                rc.output_dir = default_output_dir(self.arch, dataset, self.seed.unwrap_or(0));
                rc
            }
        };
        if self.config.is_some() {
            if let Some(d) = self.dataset {
                rc.dataset = d;
                rc.model.n_classes = d.n_classes();
            }
        }
        self.model.apply(&mut rc.model);
        if let Some(seed) = self.seed {
            rc.seed = seed;
        }
        rc.model.seed = rc.seed;
        macro_rules! over {
            ($($field:ident),*) => {$( if let Some(v) = self.$field.clone() { rc.$field = v; } )*};
        }
        over!(epochs, batch_size, lr, output_dir, checkpoint_interval);
        if self.data_dir.is_some() {
            rc.data_dir = self.data_dir.clone();
        }
        if self.limit.is_some() {
            rc.limit = self.limit;
        }
        if self.no_timing {
            rc.record_time = false;
        }
        rc.validate()?;
        Ok(rc)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Expected architecture; a checkpoint of another architecture is rejected.
    #[arg(long)]
    pub arch: Option<Arch>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Architecture to check, or `all`.
    #[arg(long, default_value = "all")]
    pub arch: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Entries checked per parameter tensor (default: all).
    #[arg(long)]
    pub samples: Option<usize>,
    /// Mutation fixture: drop a term of the GELU derivative.
    #[arg(long, hide = true)]
    pub inject_gelu_fault: bool,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Architecture to tabulate, or `all`.
    #[arg(long, default_value = "all")]
    pub arch: String,
    #[arg(long, value_enum, default_value = "paper")]
    pub preset: Preset,
    #[arg(long, default_value = "cifar10")]
    pub dataset: DatasetKind,
    #[command(flatten)]
    pub model: ModelOverrides,
}

#[derive(Debug, Args)]
pub struct CurvesArgs {
    /// Run directories (or metrics.csv files) to merge.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long, default_value = "cifar10")]
    pub dataset: DatasetKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn arch_list(spec: &str) -> Result<Vec<Arch>> {
    if spec.eq_ignore_ascii_case("all") {
        Ok(Arch::ALL.to_vec())
    } else {
        spec.split(',').map(str::parse).collect()
    }
}

fn data_dir(dir: Option<&Path>) -> Result<&Path> {
    dir.ok_or_else(|| Error::Config(format!("no data directory: pass --data-dir or set {DATA_DIR_ENV}")))
}

/// Train/test splits (truncated to `limit`) and normalisation statistics of
/// the full train split.
pub fn load_data(kind: DatasetKind, dir: &Path, limit: Option<usize>) -> Result<(Dataset, Dataset, ChannelStats)> {
    let (train, test) = data::load(kind, dir)?;
    let stats = ChannelStats::compute(&train);
    Ok(match limit {
        Some(n) => (train.truncated(n), test.truncated(n), stats),
        None => (train, test, stats),
    })
}

pub fn cmd_train(rc: &RunConfig) -> Result<train::TrainReport> {
    rc.validate()?;
    let (train_set, test_set, stats) = load_data(rc.dataset, data_dir(rc.data_dir.as_deref())?, rc.limit)?;
    fs::create_dir_all(&rc.output_dir).map_err(|e| Error::io(format!("creating {}", rc.output_dir.display()), e))?;
    write_text(&rc.output_dir.join("config.json"), &(serde_json::to_string_pretty(rc)? + "\n"))?;
    let mut model = ClassifierModel::<f32>::build(&rc.model)?;
    log::info!(
        "{} on {}: {} parameters, {} train / {} test images",
        rc.model.arch,
        rc.dataset,
        model.param_count(),
        train_set.len(),
        test_set.len()
    );
    train::train(&mut model, &train_set, &test_set, &stats, &rc.train_options())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<train::Evaluation> {
    let ck = checkpoint::read(&args.checkpoint)?;
    if let Some(arch) = args.arch {
        if arch != ck.config.arch {
            return Err(Error::Config(format!(
                "checkpoint {} holds a `{}` model, not `{arch}`",
                args.checkpoint.display(),
                ck.config.arch
            )));
        }
    }
    if ck.config.n_classes != args.data.dataset.n_classes() {
        return Err(Error::Config(format!(
            "checkpoint has {} classes but {} has {}",
            ck.config.n_classes,
            args.data.dataset,
            args.data.dataset.n_classes()
        )));
    }
    let model: ClassifierModel<f32> = ck.into_model()?;
    let (train_set, test_set, stats) =
        load_data(args.data.dataset, data_dir(args.data.data_dir.as_deref())?, args.data.limit)?;
    let set = match args.split {
        SplitArg::Train => &train_set,
        SplitArg::Test => &test_set,
    };
    let ev = train::evaluate(&model, set, &stats)?;
    println!(
        "{} {} split: loss {:.6} accuracy {:.6}% ({} images)",
        args.data.dataset,
        set.split,
        ev.loss,
        ev.accuracy,
        ev.samples
    );
    Ok(ev)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<Vec<gradcheck::GradcheckReport>> {
    let opts = GradcheckOptions {
        samples_per_param: args.samples,
        seed: args.seed,
        faults: FaultInjection {
            gelu_derivative: args.inject_gelu_fault,
        },
        ..Default::default()
    };
    let mut reports = Vec::new();
    for arch in arch_list(&args.arch)? {
        let report = gradcheck::check_model(&ModelConfig::miniature(arch), &opts)?;
        println!("{arch}: loss {:.6}", report.loss);
        for (group, err) in report.groups() {
            let verdict = if err < gradcheck::TOLERANCE { "ok" } else { "FAIL" };
            println!("  {group:<12} max rel err {err:.3e}  {verdict}");
        }
        reports.push(report);
    }
    let failures: Vec<String> = reports
        .iter()
        .flat_map(|r| {
            r.failures()
                .map(move |p| format!("{}: {} (rel err {:.3e} at entry {})", r.arch, p.name, p.max_rel_error, p.worst_index))
        })
        .collect();
    if failures.is_empty() {
        println!("all gradients within {:e}", gradcheck::TOLERANCE);
        Ok(reports)
    } else {
        Err(Error::Verification(format!("gradient mismatch in {}", failures.join("; "))))
    }
}

/// One row per module group: built count, formula count.
pub struct ParamsTable {
    pub arch: Arch,
    pub rows: Vec<(String, usize, usize)>,
}

impl ParamsTable {
    pub fn built_total(&self) -> usize {
        self.rows.iter().map(|r| r.1).sum()
    }

    pub fn formula_total(&self) -> usize {
        self.rows.iter().map(|r| r.2).sum()
    }
}

pub fn params_tables(args: &ParamsArgs) -> Result<Vec<ParamsTable>> {
    arch_list(&args.arch)?
        .into_iter()
        .map(|arch| {
            let mut rc = RunConfig::preset(args.preset, arch, args.dataset);
            args.model.apply(&mut rc.model);
            rc.model.validate()?;
            let built = ClassifierModel::<f32>::build(&rc.model)?.param_table();
            let formula = rc.model.param_formula();
            if built.len() != formula.len() || built.iter().zip(&formula).any(|(b, f)| b.0 != f.0) {
                return Err(Error::Verification(format!("{arch}: module list differs from the formula")));
            }
            Ok(ParamsTable {
                arch,
                rows: built.into_iter().zip(formula).map(|((g, b), (_, f))| (g, b, f)).collect(),
            })
        })
        .collect()
}

pub fn cmd_params(args: &ParamsArgs) -> Result<Vec<ParamsTable>> {
    let tables = params_tables(args)?;
    let mut out = String::new();
    for t in &tables {
        let _ = writeln!(out, "{}", t.arch);
        let _ = writeln!(out, "  {:<12} {:>12} {:>12}", "module", "built", "formula");
        for (g, b, f) in &t.rows {
            let mark = if b == f { "" } else { "  MISMATCH" };
            let _ = writeln!(out, "  {g:<12} {b:>12} {f:>12}{mark}");
        }
        let _ = writeln!(out, "  {:<12} {:>12} {:>12}", "total", t.built_total(), t.formula_total());
    }
    if tables.len() > 1 {
        let _ = writeln!(out, "\n{:<22} {:>12}", "architecture", "parameters");
        for t in &tables {
            let _ = writeln!(out, "{:<22} {:>12}", t.arch.as_str(), t.built_total());
        }
    }
    print!("{out}");
    let bad: Vec<_> = tables
        .iter()
        .filter(|t| t.rows.iter().any(|r| r.1 != r.2))
        .map(|t| t.arch.to_string())
        .collect();
    if bad.is_empty() {
        Ok(tables)
    } else {
        Err(Error::Verification(format!("parameter counts differ from the formula for {}", bad.join(", "))))
    }
}

/// Long-format merge: `run,` followed by the metrics columns.
pub fn merge_curves(runs: &[PathBuf]) -> Result<String> {
    let mut out = format!("run,{METRICS_HEADER}\n");
    for path in runs {
        let file = if path.is_dir() { path.join("metrics.csv") } else { path.clone() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(format!("reading {}", file.display()), e))?;
        let label = run_label(path);
        for row in parse_metrics_csv(&text)? {
            let _ = writeln!(out, "{label},{}", row.csv_row());
        }
    }
    Ok(out)
}

fn run_label(path: &Path) -> String {
    let dir = if path.is_dir() { Some(path) } else { path.parent() };
    dir.and_then(|d| d.file_name())
        .map(|n| n.to_string_lossy().replace(',', "_"))
        .unwrap_or_else(|| "run".into())
}

pub fn cmd_curves(args: &CurvesArgs) -> Result<()> {
    let merged = merge_curves(&args.runs)?;
    match &args.out {
        Some(p) => write_text(p, &merged),
        None => {
            print!("{merged}");
            Ok(())
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let rc = args.resolve()?;
            let report = cmd_train(&rc)?;
            println!(
                "best test accuracy {:.2}% at epoch {}; final {:.2}%; outputs in {}",
                report.best_test_acc,
                report.best_epoch,
                report.final_test_acc,
                rc.output_dir.display()
            );
            Ok(())
        }
        Command::Eval(args) => cmd_eval(&args).map(drop),
        Command::Gradcheck(args) => cmd_gradcheck(&args).map(drop),
        Command::Params(args) => cmd_params(&args).map(drop),
        Command::Curves(args) => cmd_curves(&args),
        Command::Synthetic(args) => data::write_synthetic(args.dataset, &args.out, args.seed),
    }
}
