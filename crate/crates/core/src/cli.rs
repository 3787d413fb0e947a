//! The `tcan` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Settings are
//! resolved as flags over config file over defaults, and the effective
//! configuration is printed to stderr and written next to every output.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::ablation::{run_ablation, AblationSpec};
use crate::data::{generate_synthetic, load_dataset, write_dataset, Dataset, RecordFormat, SyntheticConfig};
use crate::error::Error;
use crate::gradcheck::{check_model, param_group, GradCheckConfig};
use crate::metrics::F1Mode;
use crate::model::config::parse_kv;
use crate::model::{InputWidths, ModelConfig, Tcan};
use crate::tape::OpKind;
use crate::train::{
    evaluate_split, load_checkpoint, train, TrainConfig, BEST_CHECKPOINT, HISTORY_FILE, TRAIN_KEYS,
};

pub const EFFECTIVE_CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Parser)]
#[command(name = "tcan", version, about = "Text-oriented cross-attention network for multimodal sentiment regression")]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (manifest plus three splits).
    GenData(GenDataArgs),
    /// Train a model; prints the best validation metrics as JSON.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split; prints metrics as JSON.
    Eval(EvalArgs),
    /// Run an ablation grid from a JSON spec and write the grid CSV.
    Ablate(AblateArgs),
    /// Finite-difference check of every parameter group of a small model.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    Json,
    Binary,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
pub enum F1Arg {
    #[default]
    Binary,
    Weighted,
}

impl From<F1Arg> for F1Mode {
    fn from(a: F1Arg) -> Self {
        match a {
            F1Arg::Binary => F1Mode::Binary,
            F1Arg::Weighted => F1Mode::Weighted,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "n", default_value_t = 2500)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4.0)]
    pub snr_t: f32,
    #[arg(long, default_value_t = 1.0)]
    pub snr_v: f32,
    #[arg(long, default_value_t = 1.0)]
    pub snr_a: f32,
    #[arg(long)]
    pub p_flip_t: Option<f32>,
    #[arg(long)]
    pub p_flip_v: Option<f32>,
    #[arg(long)]
    pub p_flip_a: Option<f32>,
    #[arg(long)]
    pub burst_rate: Option<f32>,
    #[arg(long)]
    pub burst_scale: Option<f32>,
    #[arg(long)]
    pub d_t: Option<usize>,
    #[arg(long)]
    pub d_v: Option<usize>,
    #[arg(long)]
    pub d_a: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f32>,
    #[arg(long)]
    pub test_fraction: Option<f32>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: FormatArg,
}

/// Architecture flags; each one overrides the config file.
#[derive(Debug, Default, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub d: Option<usize>,
    /// Common sequence length after resampling.
    #[arg(long = "seq-len")]
    pub seq_len: Option<usize>,
    /// Number of stacked cross-attention modules.
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_mult: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f32>,
    /// mean or last.
    #[arg(long)]
    pub pooling: Option<String>,
    #[arg(long)]
    pub no_gates: bool,
    /// Drop the unimodal joint-learning branch.
    #[arg(long)]
    pub no_joint: bool,
    /// text, visual or acoustic.
    #[arg(long)]
    pub center: Option<String>,
    /// T, V, A, TV, TA or TV+TA.
    #[arg(long)]
    pub modalities: Option<String>,
    #[arg(long)]
    pub no_positional_encoding: bool,
    #[arg(long)]
    pub attention_residual: bool,
    #[arg(long)]
    pub conv_kernel: Option<usize>,
}

impl ModelFlags {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        let mut opt = |k: &'static str, val: Option<String>| {
            if let Some(val) = val {
                v.push((k, val));
            }
        };
        opt("d", self.d.map(|x| x.to_string()));
        opt("L", self.seq_len.map(|x| x.to_string()));
        opt("N", self.depth.map(|x| x.to_string()));
        opt("h", self.heads.map(|x| x.to_string()));
        opt("ffn_mult", self.ffn_mult.map(|x| x.to_string()));
        opt("lambda", self.lambda.map(|x| x.to_string()));
        opt("pooling", self.pooling.clone());
        opt("center_modality", self.center.clone());
        opt("modalities", self.modalities.clone());
        opt("conv_kernel", self.conv_kernel.map(|x| x.to_string()));
        if self.no_gates {
            v.push(("gates_enabled", "false".into()));
        }
        if self.no_joint {
            v.push(("joint_learning_enabled", "false".into()));
        }
        if self.no_positional_encoding {
            v.push(("positional_encoding", "false".into()));
        }
        if self.attention_residual {
            v.push(("attention_residual", "true".into()));
        }
        v
    }
}

#[derive(Debug, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f32>,
    /// adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub momentum: Option<f32>,
    /// Global gradient-norm clip (off unless given).
    #[arg(long)]
    pub clip_norm: Option<f32>,
    /// Early stop after this many epochs without a better validation MAE.
    #[arg(long)]
    pub patience: Option<usize>,
}

impl TrainFlags {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        let mut opt = |k: &'static str, val: Option<String>| {
            if let Some(val) = val {
                v.push((k, val));
            }
        };
        opt("epochs", self.epochs.map(|x| x.to_string()));
        opt("batch_size", self.batch_size.map(|x| x.to_string()));
        opt("learning_rate", self.learning_rate.map(|x| x.to_string()));
        opt("optimizer", self.optimizer.clone());
        opt("momentum", self.momentum.map(|x| x.to_string()));
        opt("clip_norm", self.clip_norm.map(|x| x.to_string()));
        opt("patience", self.patience.map(|x| x.to_string()));
        v
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// key = value file with model and training keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for the checkpoint, history and effective config.
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    /// Seeds both parameter initialisation and batch order.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "binary")]
    pub f1: F1Arg,
    /// Any config key, e.g. `--set ffn_mult=2`; applied after the other flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Optional config file; its model keys must agree with the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "binary")]
    pub f1: F1Arg,
    /// Accepted only to reject them: the architecture is fixed by the checkpoint.
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// JSON ablation spec.
    #[arg(long)]
    pub spec: PathBuf,
    /// Grid CSV, one row per cell.
    #[arg(long, default_value = "grid.csv")]
    pub out: PathBuf,
    /// Optional CSV with one row per cell and seed.
    #[arg(long)]
    pub runs: Option<PathBuf>,
    /// Overrides the spec's worker count.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub eps: f32,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f32,
    /// Coordinates to sample in total (at least one per parameter); 0 checks all.
    #[arg(long, default_value_t = 400)]
    pub max_coords: usize,
    /// Scale one op's backward rule by 2 (negative control).
    #[arg(long, value_name = "OP", num_args = 0..=1, default_missing_value = "matmul")]
    pub inject_bug: Option<String>,
    /// Defaults: d 8, seq-len 6, depth 1, heads 2.
    #[command(flatten)]
    pub model: ModelFlags,
}

/// Errors split by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(e: Error) -> CliError {
    CliError::Usage(e.to_string())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn init_logging(verbose: bool) {
    let level = if verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::Runtime(Error::io(path, e)))
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let mut cfg = SyntheticConfig {
        n_samples: a.n_samples,
        seed: a.seed,
        snr: [a.snr_t, a.snr_v, a.snr_a],
        ..Default::default()
    };
    for (i, p) in [a.p_flip_t, a.p_flip_v, a.p_flip_a].into_iter().enumerate() {
        if let Some(p) = p {
            cfg.p_flip[i] = p;
        }
    }
    if let Some(r) = a.burst_rate {
        cfg.burst_rate = r;
    }
    if let Some(s) = a.burst_scale {
        cfg.burst_scale = s;
    }
    if let Some(d) = a.d_t {
        cfg.widths.text = d;
    }
    if let Some(d) = a.d_v {
        cfg.widths.visual = d;
    }
    if let Some(d) = a.d_a {
        cfg.widths.acoustic = d;
    }
    if let Some(f) = a.val_fraction {
        cfg.val_fraction = f;
    }
    if let Some(f) = a.test_fraction {
        cfg.test_fraction = f;
    }
    if cfg.n_samples == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    cfg.validate().map_err(usage)?;
    let echo = serde_json::to_string_pretty(&cfg).expect("config serialises");
    eprintln!("effective generator config:\n{echo}");
    let data = generate_synthetic(&cfg)?;
    let format = match a.format {
        FormatArg::Json => RecordFormat::Json,
        FormatArg::Binary => RecordFormat::Binary,
    };
    write_dataset(&a.out, &data, format)?;
    write_text(&a.out.join("generator.json"), &(echo + "\n"))?;
    println!(
        "{{\"train\":{},\"val\":{},\"test\":{}}}",
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    Ok(())
}

fn read_config_file(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(Error::io(path, e)))?;
    parse_kv(&text).map_err(usage)
}

fn apply(model: &mut ModelConfig, train: &mut TrainConfig, key: &str, value: &str) -> Result<(), CliError> {
    if TRAIN_KEYS.contains(&key) {
        train.set(key, value).map_err(usage)
    } else {
        model.set(key, value).map_err(usage)
    }
}

/// Resolves defaults, then the config file, then flags.
pub fn resolve_train_config(a: &TrainArgs) -> Result<(ModelConfig, TrainConfig), CliError> {
    let mut model = ModelConfig::default();
    let mut tc = TrainConfig::default();
    if let Some(path) = &a.config {
        for (k, v) in read_config_file(path)? {
            apply(&mut model, &mut tc, &k, &v)?;
        }
    }
    for (k, v) in a.model.pairs() {
        apply(&mut model, &mut tc, k, &v)?;
    }
    for (k, v) in a.train.pairs() {
        apply(&mut model, &mut tc, k, &v)?;
    }
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        apply(&mut model, &mut tc, k.trim(), v.trim())?;
    }
    tc.f1_mode = a.f1.into();
    model.validate().map_err(usage)?;
    tc.validate().map_err(usage)?;
    Ok((model, tc))
}

fn effective_config_text(model: &ModelConfig, tc: &TrainConfig, data: &Path, widths: InputWidths) -> String {
    format!(
        "# data = {}\n# d_t = {}, d_v = {}, d_a = {}\n{}{}",
        data.display(),
        widths.text,
        widths.visual,
        widths.acoustic,
        model.to_kv(),
        tc.to_kv()
    )
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let (model_cfg, mut tc) = resolve_train_config(a)?;
    let data = load_dataset(&a.data)?;
    tc.checkpoint_dir = Some(a.out.clone());
    let echo = effective_config_text(&model_cfg, &tc, &a.data, data.widths);
    eprint!("effective config:\n{echo}");
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_text(&a.out.join(EFFECTIVE_CONFIG_FILE), &echo)?;

    let mut model = Tcan::new(model_cfg, data.widths, tc.seed)?;
    let report = train(&mut model, &data, &tc)?;
    let json = report.best_val.to_json();
    write_text(&a.out.join(METRICS_FILE), &format!("{json}\n"))?;
    eprintln!(
        "best epoch {} of {}; wrote {} and {}",
        report.best_epoch,
        report.history.len(),
        a.out.join(BEST_CHECKPOINT).display(),
        a.out.join(HISTORY_FILE).display()
    );
    println!("{json}");
    Ok(())
}

fn split(data: &Dataset, s: SplitArg) -> &[crate::data::Sample] {
    match s {
        SplitArg::Train => &data.train,
        SplitArg::Val => &data.val,
        SplitArg::Test => &data.test,
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let overridden: Vec<&str> = a.model.pairs().into_iter().map(|(k, _)| k).collect();
    if !overridden.is_empty() {
        return Err(CliError::Usage(format!(
            "architecture is fixed by the checkpoint; remove {}",
            overridden.join(", ")
        )));
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    if let Some(path) = &a.config {
        let mut from_file = ckpt.config.clone();
        let mut ignored = TrainConfig::default();
        for (k, v) in read_config_file(path)? {
            apply(&mut from_file, &mut ignored, &k, &v)?;
        }
        if from_file != ckpt.config {
            return Err(CliError::Runtime(Error::Checkpoint(format!(
                "config file {} disagrees with the checkpoint architecture",
                path.display()
            ))));
        }
    }
    let (model, _) = ckpt.into_model()?;
    let data = load_dataset(&a.data)?;
    if data.widths != model.widths() {
        return Err(CliError::Runtime(Error::Checkpoint(format!(
            "dataset widths {:?} differ from the checkpoint's {:?}",
            data.widths,
            model.widths()
        ))));
    }
    let samples = split(&data, a.split);
    let report = evaluate_split(&model, samples, a.f1.into())?;
    println!("{}", report.to_json());
    Ok(())
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.spec).map_err(|e| CliError::Runtime(Error::io(&a.spec, e)))?;
    let mut spec = AblationSpec::from_json(&text).map_err(usage)?;
    if let Some(w) = a.workers {
        if w == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        spec.workers = Some(w);
    }
    let echo = serde_json::to_string_pretty(&spec).expect("spec serialises");
    eprintln!("effective spec:\n{echo}");
    let result = run_ablation(&spec)?;
    write_text(&a.out, &result.grid_csv())?;
    write_text(&a.out.with_extension("spec.json"), &(echo + "\n"))?;
    if let Some(runs) = &a.runs {
        write_text(runs, &result.runs_csv())?;
    }
    let failed: usize = result.cells.iter().map(|c| c.failures().len()).sum();
    eprintln!(
        "{} cells, {failed} failed runs; wrote {}",
        result.cells.len(),
        a.out.display()
    );
    print!("{}", result.grid_csv());
    Ok(())
}

/// Model used by `gradcheck` before flags are applied.
pub fn gradcheck_base_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        seq_len: 6,
        depth: 1,
        heads: 2,
        ..Default::default()
    }
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let mut cfg = gradcheck_base_config();
    for (k, v) in a.model.pairs() {
        cfg.set(k, &v).map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;
    let fault = a
        .inject_bug
        .as_deref()
        .map(str::parse::<OpKind>)
        .transpose()
        .map_err(usage)?;
    let gc = GradCheckConfig {
        eps: a.eps,
        tol: a.tol,
        max_coords: (a.max_coords > 0).then_some(a.max_coords),
        seed: a.seed,
    };
    if !(1e-4..=1e-2).contains(&gc.eps) {
        return Err(CliError::Usage(format!("--eps {} outside [1e-4, 1e-2]", gc.eps)));
    }
    if let Some(k) = fault {
        eprintln!("injecting a doubled backward into {k}");
    }
    let report = check_model(&cfg, a.seed, &gc, fault)?;
    println!("{:<48} {:>6} {:>12}", "group", "coords", "worst_rel");
    let groups = report.worst_by_group();
    for (group, worst) in &groups {
        let n = report.coords.iter().filter(|c| param_group(&c.param) == group).count();
        let flag = if worst.rel_err <= report.tol { "" } else { "  FAIL" };
        println!("{group:<48} {n:>6} {:>12.3e}{flag}", worst.rel_err);
    }
    let failures = report.failures().count();
    if !report.skipped.is_empty() {
        println!("{} sampled coordinates straddle a ReLU/abs kink and were not scored", report.skipped.len());
    }
    if report.passed() {
        println!("PASS: {} coordinates within {}", report.coords.len(), a.tol);
        Ok(())
    } else {
        for c in report.worst_offenders(5) {
            println!(
                "  {}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                c.param, c.index, c.analytic, c.numeric, c.rel_err
            );
        }
        println!("FAIL: {failures} of {} coordinates exceed {}", report.coords.len(), a.tol);
        Err(CliError::Runtime(Error::Contract("gradient check failed".into())))
    }
}
