//! Command-line front end.
//!
//! Exit codes: 0 success, 1 verification or run failure, 2 invalid input,
//! 3 missing artifact.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::analytic::{self, DiscreteSystem};
use crate::autoencoder::{self, AutoencoderSystem, SystemConfig};
use crate::capacity::{self, SearchConfig};
use crate::channels::ChannelKind;
use crate::error::Error;
use crate::verify::{self, Suite, VerifyOptions};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "CAPAE_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "capae-out";

#[derive(Debug, Parser)]
#[command(name = "capae", version, about = "MI-regularized autoencoders and capacity learning")]
pub struct Cli {
    /// Worker threads for SNR-level parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an autoencoder; writes checkpoint, curves and constellation.
    Train(TrainArgs),
    /// BLER sweep of a trained checkpoint.
    Bler(BlerArgs),
    /// MI curves for checkpoints and analytic baselines.
    MiCurve(MiCurveArgs),
    /// Capacity learning by rate escalation.
    CapacitySearch(SearchArgs),
    /// Run a self-check suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory [env: CAPAE_OUT_DIR, default: capae-out].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl OutArgs {
    fn dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }
}

#[derive(Debug, Args, Default)]
#[command(allow_negative_numbers = true)]
pub struct SystemOverrides {
    #[arg(long)]
    pub k: Option<u32>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub channel: Option<ChannelKind>,
    #[arg(long)]
    pub snr_db: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr_ae: Option<f64>,
    #[arg(long)]
    pub lr_mine: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub mine_hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub mine_steps_per_iter: Option<usize>,
    #[arg(long)]
    pub ema_decay: Option<f64>,
    #[arg(long)]
    pub eval_trials: Option<usize>,
    #[arg(long)]
    pub mi_eval_samples: Option<usize>,
    #[arg(long)]
    pub mi_finetune_steps: Option<usize>,
}

impl SystemOverrides {
    fn apply(&self, c: &mut SystemConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { c.$f = v.clone(); } )* };
        }
        set!(
            k, n, beta, channel, snr_db, batch_size, iterations, lr_ae, lr_mine, seed, hidden, mine_hidden,
            mine_steps_per_iter, ema_decay, eval_trials, mi_eval_samples, mi_finetune_steps
        );
    }
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct TrainArgs {
    /// JSON config with keys named like the flags (snake_case).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub system: SystemOverrides,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct BlerArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub snr_db: Vec<f64>,
    #[arg(long, default_value_t = 100_000)]
    pub trials: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct MiCurveArgs {
    /// Trained checkpoints, one series each.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    /// Analytic series: awgn-capacity, rayleigh-capacity, qam.
    #[arg(long, value_delimiter = ',')]
    pub oracle: Vec<String>,
    /// QAM orders for the `qam` oracle.
    #[arg(long = "qam-m", value_delimiter = ',', default_values_t = [16])]
    pub qam_m: Vec<usize>,
    /// Channel for the `qam` oracle.
    #[arg(long, default_value = "awgn")]
    pub qam_channel: ChannelKind,
    #[arg(long, value_delimiter = ',', required = true)]
    pub snr_db: Vec<f64>,
    /// Channel samples per autoencoder MI point.
    #[arg(long, default_value_t = 32_768)]
    pub samples: usize,
    /// Monte-Carlo samples per oracle point.
    #[arg(long, default_value_t = 100_000)]
    pub oracle_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct SearchArgs {
    /// JSON config: search keys plus training keys at the top level.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub snr_db: Option<Vec<f64>>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub k0: Option<u32>,
    #[arg(long)]
    pub n0: Option<usize>,
    #[arg(long)]
    pub p_star: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub max_n: Option<usize>,
    #[arg(long)]
    pub max_attempts: Option<usize>,
    #[arg(long)]
    pub mi_samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub channel: Option<ChannelKind>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// lemma1, gradcheck, mine-gaussian, channel-stats, baseline or all.
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// MINE training steps for mine-gaussian.
    #[arg(long)]
    pub mine_steps: Option<usize>,
    /// Also write `verify.csv` to the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Resolved `mi-curve` inputs, saved as `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiCurveRun {
    pub checkpoints: Vec<PathBuf>,
    pub oracles: Vec<String>,
    pub qam_m: Vec<usize>,
    pub qam_channel: ChannelKind,
    pub snr_db: Vec<f64>,
    pub samples: usize,
    pub oracle_samples: usize,
    pub seed: u64,
}

/// Resolved `bler` inputs, saved as `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlerRun {
    pub checkpoint: PathBuf,
    pub snr_db: Vec<f64>,
    pub trials: usize,
}

/// One row of an MI curve CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub snr_db: f64,
    pub mi_bits: f64,
    pub stderr: Option<f64>,
    pub label: String,
}

/// Why a command failed, mapped to an exit code.
#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Missing(String),
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Invalid(_) => 2,
            CliError::Missing(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "invalid input: {m}"),
            CliError::Missing(m) => write!(f, "missing artifact: {m}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig { .. }
            | Error::InvalidInput(_)
            | Error::Unknown { .. }
            | Error::Shape { .. }
            | Error::MissingParameter(_)
            | Error::Json(_) => CliError::Invalid(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Reads an input artifact; a missing file maps to exit code 3.
fn read_input(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Missing(path.display().to_string()),
        _ => CliError::Failed(format!("{}: {e}", path.display())),
    })
}

fn parse_json<T: DeserializeOwned>(text: &str, path: &Path) -> CliResult<T> {
    serde_json::from_str(text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn prepare_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn load_system(path: &Path) -> CliResult<AutoencoderSystem> {
    let ck = parse_json(&read_input(path)?, path)?;
    Ok(AutoencoderSystem::from_checkpoint(&ck)?)
}

/// Resolves the `train` config: defaults, then the file, then flags.
pub fn resolve_train_config(args: &TrainArgs) -> CliResult<SystemConfig> {
    let mut cfg = match &args.config {
        Some(p) => parse_json(&read_input(p)?, p)?,
        None => SystemConfig::default(),
    };
    args.system.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// Keys of the training template that a search config may set at top level.
fn template_keys() -> Vec<String> {
    let Value::Object(m) = serde_json::to_value(SystemConfig::default()).expect("serializable") else {
        unreachable!()
    };
    m.into_iter().map(|(k, _)| k).filter(|k| !matches!(k.as_str(), "k" | "n" | "snr_db" | "seed")).collect()
}

/// Flat search document to [`SearchConfig`]: training keys move under
/// `system`, anything unknown is rejected.
pub fn search_config_from_flat(flat: Map<String, Value>) -> std::result::Result<SearchConfig, Error> {
    let keys = template_keys();
    let mut top = Map::new();
    let mut system = Map::new();
    for (k, v) in flat {
        if keys.contains(&k) {
            system.insert(k, v);
        } else {
            top.insert(k, v);
        }
    }
    let mut cfg: SearchConfig = serde_json::from_value(Value::Object(top))?;
    let mut template = serde_json::to_value(&cfg.system)?;
    template.as_object_mut().expect("object").extend(system);
    cfg.system = serde_json::from_value(template)?;
    Ok(cfg)
}

/// Inverse of [`search_config_from_flat`].
pub fn search_config_to_flat(cfg: &SearchConfig) -> Map<String, Value> {
    let Value::Object(mut top) = serde_json::to_value(cfg).expect("serializable") else { unreachable!() };
    let Some(Value::Object(system)) = top.remove("system") else { unreachable!() };
    let keys = template_keys();
    top.extend(system.into_iter().filter(|(k, _)| keys.contains(k)));
    top
}

pub fn resolve_search_config(args: &SearchArgs) -> CliResult<SearchConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let flat: Map<String, Value> = parse_json(&read_input(p)?, p)?;
            search_config_from_flat(flat).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?
        }
        None => SearchConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = &args.$f { cfg.$f = v.clone(); } )* };
    }
    set!(snr_db, epsilon, k0, n0, p_star, trials, max_n, max_attempts, mi_samples, seed);
    macro_rules! set_system {
        ($($f:ident),*) => { $( if let Some(v) = &args.$f { cfg.system.$f = v.clone(); } )* };
    }
    set_system!(beta, channel, batch_size, iterations);
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let cfg = resolve_train_config(args)?;
    let dir = args.out.dir();
    prepare_dir(&dir)?;
    write_json(&dir.join("config.json"), &cfg)?;
    let mut sys = AutoencoderSystem::new(cfg)?;
    let report = sys.train()?;
    sys.save(&dir.join("checkpoint.json"))?;
    autoencoder::write_curves_csv(&dir.join("curves.csv"), &report.curves)?;
    autoencoder::write_constellation_csv(&dir.join("constellation.csv"), &report.constellation)?;
    if let Some(b) = report.final_bler {
        autoencoder::write_bler_csv(&dir.join("bler.csv"), &[b])?;
        log::info!("final BLER {:.3e} at {} dB", b.bler, b.snr_db);
    }
    if let Some(mi) = report.final_mi {
        let row = CurveRow { snr_db: sys.config().snr_db, mi_bits: mi.value_bits, stderr: None, label: "autoencoder".into() };
        write_csv(&dir.join("mi.csv"), &[row])?;
        log::info!("final MI {:.4} bits", mi.value_bits);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    for r in rows {
        w.serialize(r).map_err(Error::from)?;
    }
    w.flush().map_err(|e| CliError::Failed(e.to_string()))
}

fn cmd_bler(args: &BlerArgs) -> CliResult<()> {
    if args.trials == 0 {
        return Err(CliError::Invalid("trials must be positive".into()));
    }
    let sys = load_system(&args.checkpoint)?;
    let dir = args.out.dir();
    prepare_dir(&dir)?;
    let run = BlerRun { checkpoint: args.checkpoint.clone(), snr_db: args.snr_db.clone(), trials: args.trials };
    write_json(&dir.join("config.json"), &run)?;
    let points = sys.evaluate_bler(&run.snr_db, run.trials)?;
    autoencoder::write_bler_csv(&dir.join("bler.csv"), &points)?;
    println!("wrote {}", dir.join("bler.csv").display());
    Ok(())
}

/// Rows for one analytic series.
pub fn oracle_series(name: &str, run: &MiCurveRun) -> CliResult<Vec<CurveRow>> {
    let mut rows = Vec::new();
    match name {
        "awgn-capacity" => {
            for &s in &run.snr_db {
                rows.push(CurveRow { snr_db: s, mi_bits: analytic::awgn_capacity(s), stderr: None, label: name.into() });
            }
        }
        "rayleigh-capacity" => {
            for (i, &s) in run.snr_db.iter().enumerate() {
                let c = analytic::rayleigh_ergodic_capacity(s, run.oracle_samples, crate::rng::derive_seed(run.seed, i as u64))?;
                rows.push(CurveRow { snr_db: s, mi_bits: c.mean, stderr: Some(c.stderr), label: name.into() });
            }
        }
        "qam" => {
            for &m in &run.qam_m {
                let cb = analytic::qam_constellation(m)?.codebook();
                for (i, &s) in run.snr_db.iter().enumerate() {
                    let seed = crate::rng::derive_path(run.seed, &[m as u64, i as u64]);
                    let sys = DiscreteSystem::uniform(cb.clone(), run.qam_channel, s, run.oracle_samples, seed);
                    let mi = analytic::discrete_input_mi(&sys)?;
                    rows.push(CurveRow { snr_db: s, mi_bits: mi.bits, stderr: Some(mi.stderr), label: format!("{m}-qam") });
                }
            }
        }
        other => return Err(CliError::Invalid(format!("unknown oracle `{other}`"))),
    }
    Ok(rows)
}

fn cmd_mi_curve(args: &MiCurveArgs) -> CliResult<()> {
    if args.checkpoint.is_empty() && args.oracle.is_empty() {
        return Err(CliError::Invalid("give at least one --checkpoint or --oracle".into()));
    }
    let run = MiCurveRun {
        checkpoints: args.checkpoint.clone(),
        oracles: args.oracle.clone(),
        qam_m: args.qam_m.clone(),
        qam_channel: args.qam_channel,
        snr_db: args.snr_db.clone(),
        samples: args.samples,
        oracle_samples: args.oracle_samples,
        seed: args.seed,
    };
    let systems = run.checkpoints.iter().map(|p| load_system(p)).collect::<CliResult<Vec<_>>>()?;
    let dir = args.out.dir();
    prepare_dir(&dir)?;
    write_json(&dir.join("config.json"), &run)?;

    let mut rows = Vec::new();
    for (path, sys) in run.checkpoints.iter().zip(&systems) {
        let label = path.parent().and_then(|p| p.file_name()).unwrap_or(path.as_os_str()).to_string_lossy().into_owned();
        for &s in &run.snr_db {
            let mi = sys.evaluate_mi(s, run.samples)?;
            rows.push(CurveRow { snr_db: s, mi_bits: mi.value_bits, stderr: None, label: label.clone() });
        }
    }
    for name in &run.oracles {
        rows.extend(oracle_series(name, &run)?);
    }
    write_csv(&dir.join("mi_curve.csv"), &rows)?;
    println!("wrote {}", dir.join("mi_curve.csv").display());
    Ok(())
}

fn cmd_capacity_search(args: &SearchArgs) -> CliResult<()> {
    let cfg = resolve_search_config(args)?;
    let dir = args.out.dir();
    prepare_dir(&dir)?;
    write_json(&dir.join("config.json"), &search_config_to_flat(&cfg))?;
    let trace = capacity::capacity_search(&cfg)?;
    capacity::write_trace_csv(&dir.join("trace.csv"), &trace)?;
    capacity::write_summary_csv(&dir.join("summary.csv"), &trace)?;
    for r in &trace.results {
        let flag = if r.truncated { " (truncated)" } else { "" };
        println!("{} dB: capacity {:.4} bits/use{flag}", r.snr_db, r.capacity_bits);
    }
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> CliResult<()> {
    let suites: Vec<Suite> = match args.suite.as_str() {
        "all" => Suite::ALL.to_vec(),
        s => vec![s.parse::<Suite>()?],
    };
    let mut opts = VerifyOptions { seed: args.seed, ..Default::default() };
    if let Some(steps) = args.mine_steps {
        opts.mine_steps = steps;
    }
    let mut checks = Vec::new();
    for s in suites {
        checks.extend(verify::run_suite(s, &opts)?);
    }
    for c in &checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status} {}: {} = {:.6e} (expected {})", c.suite, c.name, c.value, c.expected);
    }
    if let Some(dir) = &args.out {
        prepare_dir(dir)?;
        write_csv(&dir.join("verify.csv"), &checks)?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} check(s) failed")));
    }
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Invalid("--threads must be positive".into()));
        }
        // A second build in the same process (tests) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Bler(a) => cmd_bler(a),
        Command::MiCurve(a) => cmd_mi_curve(a),
        Command::CapacitySearch(a) => cmd_capacity_search(a),
        Command::Verify(a) => cmd_verify(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_search_config_round_trip() {
        let cfg = SearchConfig { epsilon: 0.1, system: SystemConfig { iterations: 77, ..SearchConfig::default().system }, ..Default::default() };
        let flat = search_config_to_flat(&cfg);
        assert!(flat.contains_key("iterations") && !flat.contains_key("system"));
        assert_eq!(search_config_from_flat(flat).unwrap(), cfg);
        let mut bad = Map::new();
        bad.insert("nonsense".into(), Value::from(1));
        assert!(search_config_from_flat(bad).is_err());
    }

    #[test]
    fn error_exit_codes() {
        assert_eq!(CliError::from(Error::config("beta", "x")).exit_code(), 2);
        assert_eq!(CliError::from(Error::Diverged { iteration: 1, what: "loss" }).exit_code(), 1);
        assert_eq!(CliError::Missing("x".into()).exit_code(), 3);
    }

    #[test]
    fn negative_beta_parses_then_fails_validation() {
        let cli = Cli::try_parse_from(["capae", "train", "--beta", "-2"]).unwrap();
        let Command::Train(a) = &cli.command else { panic!() };
        let err = resolve_train_config(a).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("beta"));
    }
}
