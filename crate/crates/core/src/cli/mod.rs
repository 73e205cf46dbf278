//! The `aclam` command line: dataset generation, training, evaluation, the
//! ablation grid and probes.
//!
//! Exit codes: 0 success, 1 internal error, 2 configuration error, 3 I/O
//! error, 4 training exploded, 5 checkpoint mismatch, 6 probe class
//! under-populated. Paths of written files go to stdout, diagnostics to
//! stderr.

mod config;

pub use config::{ConfigError, RunConfig, KEYS, MODEL_KEYS};

use crate::ablation::{self, GridConfig};
use crate::metrics::{
    build_probe_dataset, env_probe, evaluate, goal_probe, motion_transfer, norm_trajectory,
    transfer_cases, write_grid, write_ppm, MetricsError, ModelLatent,
};
use crate::model::{ModelParams, Placement};
use crate::rng::{derive_seed, stream};
use crate::train::{self, read_checkpoint, write_checkpoint, CheckpointError, Stability, TrainError};
use crate::world::{self, gen_dataset, load_dataset, Dataset};
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("training exploded")]
    Explode,
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    UnderPopulated(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Explode => 4,
            CliError::Checkpoint(_) => 5,
            CliError::UnderPopulated(_) => 6,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<world::WorldError> for CliError {
    fn from(e: world::WorldError) -> Self {
        CliError::Io(format!("dataset: {e}"))
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(e) => CliError::Io(format!("checkpoint: {e}")),
            e => CliError::Checkpoint(format!("checkpoint: {e}")),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Sampling(e) => CliError::Config(e.to_string()),
            e => CliError::Internal(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::UnderPopulated { .. } => CliError::UnderPopulated(e.to_string()),
            MetricsError::Sampling(e) => CliError::Config(e.to_string()),
            e => CliError::Internal(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "aclam", version, about = "Latent action models with additive composition")]
pub struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads for the ablation grid; 0 runs everything on one thread.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Any config key, e.g. `--set train_steps=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus step log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out trajectories.
    Eval(EvalArgs),
    /// Run the design-choice grid.
    Ablate(AblateArgs),
    /// Environment and goal probes for a checkpoint.
    Probe(ProbeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub envs: Option<u32>,
    #[arg(long)]
    pub traj_per_env: Option<usize>,
    /// Frames per trajectory.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Dataset path; defaults to `<out-dir>/data.aclamds`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub lambda_ac: Option<f64>,
    /// fdm, idm-no-sg, idm-sg-zik or idm-sg-sum.
    #[arg(long)]
    pub ac_form: Option<String>,
    /// post or pre.
    #[arg(long)]
    pub vq_placement: Option<String>,
    #[arg(long)]
    pub train_steps: Option<usize>,
    /// Checkpoint path; defaults to `<out-dir>/model.aclamck`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Latent to evaluate, post or pre; defaults to the training placement.
    #[arg(long)]
    pub placement: Option<String>,
    #[arg(long)]
    pub n_instances: Option<usize>,
    #[arg(long)]
    pub norm_traj_count: Option<usize>,
    #[arg(long)]
    pub transfer_count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated design names.
    #[arg(long)]
    pub designs: Option<String>,
    /// Comma-separated training seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub train_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub placement: Option<String>,
    #[arg(long)]
    pub per_class: Option<usize>,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command and returns the paths it wrote.
pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(&cfg, a),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Ablate(a) => cmd_ablate(&cfg, a),
        Command::Probe(a) => cmd_probe(&cfg, a),
    }
}

fn opt<T: ToString>(out: &mut Vec<(&'static str, String)>, key: &'static str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key, v.to_string()));
    }
}

/// Defaults, then the config file, then `--set`, then typed flags.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let mut flags = Vec::new();
    match &cli.command {
        Command::GenData(a) => {
            opt(&mut flags, "envs", &a.envs);
            opt(&mut flags, "traj_per_env", &a.traj_per_env);
            opt(&mut flags, "steps", &a.steps);
            opt(&mut flags, "image_size", &a.image_size);
        }
        Command::Train(a) => {
            opt(&mut flags, "lambda_ac", &a.lambda_ac);
            opt(&mut flags, "ac_form", &a.ac_form);
            opt(&mut flags, "vq_placement", &a.vq_placement);
            opt(&mut flags, "train_steps", &a.train_steps);
        }
        Command::Eval(a) => {
            opt(&mut flags, "n_instances", &a.n_instances);
            opt(&mut flags, "norm_traj_count", &a.norm_traj_count);
            opt(&mut flags, "transfer_count", &a.transfer_count);
        }
        Command::Ablate(a) => {
            opt(&mut flags, "ablate_designs", &a.designs);
            opt(&mut flags, "ablate_seeds", &a.seeds);
            opt(&mut flags, "train_steps", &a.train_steps);
        }
        Command::Probe(a) => opt(&mut flags, "probe_per_class", &a.per_class),
    }
    opt(&mut flags, "seed", &cli.seed);
    opt(&mut flags, "out_dir", &cli.out_dir.as_ref().map(|p| p.display()));
    opt(&mut flags, "threads", &cli.threads);
    for (k, v) in flags {
        cfg.set(k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))?;
    Ok(path.to_path_buf())
}

fn write_resolved(dir: &Path, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    write_file(&dir.join(format!("{command}.config")), cfg.to_text())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    load_dataset(path).map_err(|e| io_err(path, e))
}

pub fn cmd_gen_data(cfg: &RunConfig, a: &GenDataArgs) -> Result<Vec<PathBuf>> {
    let out = a.out.clone().unwrap_or_else(|| cfg.out_dir.join("data.aclamds"));
    let ds = gen_dataset(&cfg.dataset_config()).map_err(|e| CliError::Config(e.to_string()))?;
    let bytes = ds.to_bytes()?;
    let data = write_file(&out, bytes)?;
    let h = &ds.header;
    eprintln!(
        "{} environments x {} trajectories x {} steps, {}x{} frames, seed {}",
        h.env_count,
        ds.traj_per_env(),
        h.steps_per_traj,
        h.image_hw[0],
        h.image_hw[1],
        h.seed
    );
    let conf = write_resolved(&parent_dir(&out), "gen-data", cfg)?;
    Ok(vec![data, conf])
}

pub fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> Result<Vec<PathBuf>> {
    let data = load_data(&a.data)?;
    let model_cfg = cfg.model_config(data.header.image_hw[0], data.header.image_hw[1]);
    let tcfg = cfg.train_config();
    let run = train::train_with(&data, &tcfg, &model_cfg, &mut |step, _| {
        log::info!("step {step}");
        Ok(())
    })?;
    let ckpt = a.out.clone().unwrap_or_else(|| cfg.out_dir.join("model.aclamck"));
    let dir = parent_dir(&ckpt);
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    write_checkpoint(&ckpt, &run.params, &cfg.snapshot())?;
    let log_path = write_file(&dir.join("steplog.csv"), run.log.to_csv())?;
    let conf = write_resolved(&dir, "train", cfg)?;
    if let Some(last) = run.log.records.last() {
        eprintln!(
            "step {}: total {:.6} rec {:.6} proprio {:.6} vq {:.6} ac {:.6}",
            last.step, last.loss_total, last.loss_rec, last.loss_proprio, last.loss_vq, last.loss_ac
        );
    }
    eprintln!("stability: {}", run.status);
    println!("{}", ckpt.display());
    println!("{}", log_path.display());
    println!("{}", conf.display());
    if run.status == Stability::Explode {
        return Err(CliError::Explode);
    }
    Ok(Vec::new())
}

/// Loads a checkpoint and checks it against the dataset and any model keys
/// the user set explicitly.
fn load_model(cfg: &RunConfig, path: &Path, data: &Dataset) -> Result<(ModelParams<f32>, serde_json::Value)> {
    let ck = read_checkpoint(path, None)?;
    let m = &ck.params.config;
    let frame = data.header.image_hw[0] * data.header.image_hw[1] * data.header.channels;
    if m.obs_dim != frame {
        return Err(CliError::Checkpoint(format!(
            "checkpoint expects {}-value frames, dataset has {frame}",
            m.obs_dim
        )));
    }
    let want = cfg.model_config(data.header.image_hw[0], data.header.image_hw[1]);
    let checks: [(&str, bool); 6] = [
        ("idm_hidden", want.idm_hidden == m.idm_hidden),
        ("fdm_hidden", want.fdm_hidden == m.fdm_hidden),
        ("proprio_hidden", want.proprio_hidden == m.proprio_hidden),
        ("codebook_size", want.codebook_size == m.codebook_size),
        ("code_dim", want.code_dim == m.code_dim),
        ("n_tokens", want.n_tokens == m.n_tokens),
    ];
    for (key, same) in checks {
        if cfg.is_explicit(key) && !same {
            return Err(CliError::Checkpoint(format!(
                "`{key}` differs from the checkpoint's model"
            )));
        }
    }
    Ok((ck.params, ck.config_snapshot))
}

/// Training-time keys a checkpoint remembers; they apply unless set here.
const INHERITED: [&str; 5] = ["holdout", "vq_placement", "horizon", "n_buckets", "rotation_threshold"];

fn inherit(cfg: &RunConfig, snapshot: &serde_json::Value) -> Result<RunConfig> {
    let mut out = cfg.clone();
    for key in INHERITED {
        if cfg.is_explicit(key) {
            continue;
        }
        if let Some(v) = snapshot.get("run").and_then(|r| r.get(key)).and_then(|v| v.as_str()) {
            out.set(key, v)
                .map_err(|e| CliError::Checkpoint(format!("checkpoint config: {e}")))?;
        }
    }
    Ok(out)
}

fn placement_arg(arg: &Option<String>, default: Placement) -> Result<Placement> {
    match arg {
        None => Ok(default),
        Some(s) => Placement::parse(s)
            .ok_or_else(|| CliError::Config(format!("invalid value for `placement`: {s:?}"))),
    }
}

const TRANSFER_TAG: u64 = 0x5452_4e53;

pub fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<Vec<PathBuf>> {
    let data = load_data(&a.data)?;
    let (params, snapshot) = load_model(cfg, &a.checkpoint, &data)?;
    let cfg = inherit(cfg, &snapshot)?;
    let placement = placement_arg(&a.placement, cfg.train.placement)?;
    let test = data.split(cfg.train.holdout).test;
    let f = ModelLatent::new(&params, placement);
    let ev = evaluate(&f, &data, &test, &cfg.eval, cfg.seed, placement)?;
    let dir = cfg.out_dir.clone();
    let mut written = vec![write_file(&dir.join("report.json"), ev.report.to_json())?];

    for &traj in test.iter().take(cfg.norm_traj_count) {
        let nt = norm_trajectory(&f, &data, traj)?;
        if nt.degenerate {
            log::warn!("trajectory {traj}: latent norm series is all zero");
        }
        written.push(write_file(&dir.join(format!("norm_traj_{traj}.csv")), nt.to_csv())?);
    }

    if cfg.transfer_count > 0 {
        let mut rng = stream(derive_seed(&[cfg.seed, TRANSFER_TAG]));
        let cases = transfer_cases(&data, &test, &cfg.eval.spec, cfg.transfer_count, &mut rng)?;
        let (h, w) = (data.header.image_hw[0], data.header.image_hw[1]);
        let mut index = String::from("case,src_traj,i,j,k,target_traj,t,mse\n");
        for (n, c) in cases.iter().enumerate() {
            let mt = motion_transfer(&params, &data, c.src, c.target, placement)?;
            for (tag, img) in [("direct", &mt.direct), ("composed", &mt.composed)] {
                let grid = dir.join(format!("transfer_{n}_{tag}.f32"));
                write_grid(&grid, img, h, w).map_err(|e| io_err(&grid, e))?;
                let ppm = dir.join(format!("transfer_{n}_{tag}.ppm"));
                write_ppm(&ppm, img, h, w).map_err(|e| io_err(&ppm, e))?;
                written.push(grid);
                written.push(ppm);
            }
            let (s, i, j, k) = c.src;
            let _ = writeln!(index, "{n},{s},{i},{j},{k},{},{},{}", c.target.0, c.target.1, mt.mse);
        }
        written.push(write_file(&dir.join("transfer.csv"), index)?);
    }
    written.push(write_resolved(&dir, "eval", &cfg)?);
    let r = &ev.report;
    eprintln!(
        "norm_ac {} pearson_r {} norm_identity {} delta_inv {} cycle_residual {} env_probe_acc {:.4} goal_probe_r2 {:.4}",
        r.norm_ac, r.pearson_r, r.norm_identity, r.delta_inv, r.cycle_residual, r.env_probe_acc, r.goal_probe_r2
    );
    Ok(written)
}

pub fn cmd_ablate(cfg: &RunConfig, a: &AblateArgs) -> Result<Vec<PathBuf>> {
    let data = load_data(&a.data)?;
    let grid = GridConfig {
        train: cfg.train.clone(),
        model: cfg.model_config(data.header.image_hw[0], data.header.image_hw[1]),
        eval: cfg.eval,
        eval_seed: cfg.seed,
    };
    let progress = |c: &ablation::Cell| {
        eprintln!("{} seed {}: {}", c.design, c.seed, c.status);
        if let Some(e) = &c.error {
            eprintln!("  {e}");
        }
    };
    let cells = ablation::run_grid(
        &data,
        &grid,
        &cfg.ablate_designs,
        &cfg.ablate_seeds,
        cfg.threads,
        &progress,
    );
    let dir = cfg.out_dir.clone();
    let mut written = vec![
        write_file(&dir.join("ablation.csv"), ablation::table_csv(&cells))?,
        write_file(
            &dir.join("ablation_expected.csv"),
            ablation::expectations_csv(&ablation::expectations(&cells)),
        )?,
    ];
    for c in &cells {
        if let Some(e) = &c.evaluation {
            let p = dir.join("ablation").join(format!("{}_seed{}.json", c.design, c.seed));
            written.push(write_file(&p, e.report.to_json())?);
        }
    }
    written.push(write_resolved(&dir, "ablate", cfg)?);
    Ok(written)
}

const PROBE_TAG: u64 = 0x5052_4245;

pub fn cmd_probe(cfg: &RunConfig, a: &ProbeArgs) -> Result<Vec<PathBuf>> {
    let data = load_data(&a.data)?;
    let (params, snapshot) = load_model(cfg, &a.checkpoint, &data)?;
    let cfg = inherit(cfg, &snapshot)?;
    let placement = placement_arg(&a.placement, cfg.train.placement)?;
    let test = data.split(cfg.train.holdout).test;
    let f = ModelLatent::new(&params, placement);
    let rng = |k: u64| stream(derive_seed(&[cfg.seed, PROBE_TAG, k]));
    let set = build_probe_dataset(&f, &data, &test, &cfg.eval.spec, cfg.eval.probe.per_class, &mut rng(0))?;
    let env = env_probe(&set, &cfg.eval.probe, &mut rng(1))?;
    let goal = goal_probe(&set, &cfg.eval.probe, &mut rng(2))?;
    let out = serde_json::json!({
        "env_probe_acc": env.accuracy,
        "shuffled_accuracy": env.shuffled_accuracy,
        "chance": env.chance,
        "class_counts": env.class_counts,
        "goal_probe_r2": goal.r2,
        "ridge_fallback": goal.ridge_fallback,
        "per_class": cfg.eval.probe.per_class,
        "seed": cfg.seed,
        "placement": placement,
    });
    let mut text = serde_json::to_string_pretty(&out).expect("probe json");
    text.push('\n');
    eprintln!(
        "env probe {:.4} (shuffled {:.4}, chance {:.4}, classes {:?}); goal probe R2 {:.4}{}",
        env.accuracy,
        env.shuffled_accuracy,
        env.chance,
        env.class_counts,
        goal.r2,
        if goal.ridge_fallback { " (ridge)" } else { "" }
    );
    let dir = cfg.out_dir.clone();
    Ok(vec![
        write_file(&dir.join("probe.json"), text)?,
        write_resolved(&dir, "probe", &cfg)?,
    ])
}
