//! `vqarl`: dataset generation, training, ablation, evaluation and dynamics analysis.
//!
//! Every command takes `--config <json>` and `--out <dir>`. A finished output
//! directory holds a `COMPLETE` marker and is never written to again unless
//! `--overwrite` is given.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use vqarl::curriculum::{
    self, load_data, run_ablation, run_curriculum, vocab_for, write_json, DataSource, RunManifest, CODE_VERSION,
};
use vqarl::evaluation::{
    analyze_dynamics, cross_task_matrix, evaluate, predictions_jsonl, score_outputs, DynamicsConfig,
    DynamicsSeries, RawOutput,
};
use vqarl::grpo::{train_grpo_stage, GrpoConfig};
use vqarl::policy::{checkpoint, Policy, PolicyConfig, PolicyParams};
use vqarl::seed::{derive_seed, rng_for};
use vqarl::sft::{select_samples, train_sft, SftConfig};
use vqarl::structured_io::PromptMode;
use vqarl::synvqa::{generate_dataset, GenConfig, Split, Stage, VqaSample};
use vqarl::{Error, Result};

const SCHEMA_VERSION: u32 = 1;
const THREADS_ENV: &str = "VQARL_THREADS";
const COMPLETE: &str = "COMPLETE";

#[derive(Parser)]
#[command(name = "vqarl", version, about = "Desk-scale SFT + GRPO curriculum laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace a completed output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(Common),
    /// Supervised fine-tuning.
    Sft(Common),
    /// GRPO on one stage.
    Grpo(Common),
    /// A full run: optional SFT, then GRPO stages.
    Curriculum(Common),
    /// Both routes over stages A, B, C with matched seeds.
    Ablate(Common),
    /// Evaluate a checkpoint, or score recorded outputs.
    Eval(Common),
    /// Evaluate single-stage checkpoints on every stage.
    CrossTask(Common),
    /// Analyze reward and KL dynamics in a GRPO metrics log.
    Dynamics(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData(c)
            | Command::Sft(c)
            | Command::Grpo(c)
            | Command::Curriculum(c)
            | Command::Ablate(c)
            | Command::Eval(c)
            | Command::CrossTask(c)
            | Command::Dynamics(c) => c,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Sft(_) => "sft",
            Command::Grpo(_) => "grpo",
            Command::Curriculum(_) => "curriculum",
            Command::Ablate(_) => "ablate",
            Command::Eval(_) => "eval",
            Command::CrossTask(_) => "cross-task",
            Command::Dynamics(_) => "dynamics",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataConfig {
    schema_version: u32,
    #[serde(default)]
    generator: GenConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SftCommandConfig {
    schema_version: u32,
    data: DataSource,
    #[serde(default)]
    policy: PolicyConfig,
    #[serde(default)]
    sft: SftConfig,
    /// Start from this checkpoint instead of a fresh policy.
    #[serde(default)]
    init_checkpoint: Option<PathBuf>,
    /// Fold the adapter into the base weights before saving.
    #[serde(default = "yes")]
    merge_adapter: bool,
    seed: u64,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GrpoCommandConfig {
    schema_version: u32,
    data: DataSource,
    stage: Stage,
    #[serde(default)]
    policy: PolicyConfig,
    #[serde(default)]
    grpo: GrpoConfig,
    #[serde(default)]
    init_checkpoint: Option<PathBuf>,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalCommandConfig {
    schema_version: u32,
    data: DataSource,
    /// Checkpoint to decode with; exclusive with `outputs`.
    #[serde(default)]
    checkpoint: Option<PathBuf>,
    /// JSONL of `{sample_id, raw_output}` records to score instead of decoding.
    #[serde(default)]
    outputs: Option<PathBuf>,
    #[serde(default = "default_modes")]
    prompt_modes: Vec<PromptMode>,
    #[serde(default = "default_max_len")]
    max_completion_len: usize,
    #[serde(default = "default_split")]
    split: Split,
}

fn default_modes() -> Vec<PromptMode> {
    vec![PromptMode::Prompting]
}

fn default_max_len() -> usize {
    32
}

fn default_split() -> Split {
    Split::Test
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CrossTaskConfig {
    schema_version: u32,
    data: DataSource,
    /// Checkpoint trained on each single stage.
    checkpoints: BTreeMap<Stage, PathBuf>,
    #[serde(default = "default_modes")]
    prompt_modes: Vec<PromptMode>,
    #[serde(default = "default_max_len")]
    max_completion_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DynamicsCommandConfig {
    schema_version: u32,
    /// GRPO metrics JSONL.
    metrics: PathBuf,
    #[serde(default)]
    dynamics: DynamicsConfig,
}

/// Record written to stderr and `error.json` on failure.
#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    message: String,
    exit_code: u8,
    command: &'a str,
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        vqarl::error::ErrorKind::Config => 3,
        vqarl::error::ErrorKind::Runtime => 4,
    }
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        Some(v) => return Err(Error::Config(format!("unsupported schema_version {v}"))),
        None => return Err(Error::Config("config lacks schema_version".into())),
    }
    Ok(serde_json::from_value(value)?)
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))
}

enum Failure {
    /// Invocation problem, such as targeting a completed directory.
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

/// Refuses a completed directory unless overwriting; creates it otherwise.
fn prepare_out(common: &Common) -> std::result::Result<(), Failure> {
    let out = &common.out;
    if out.join(COMPLETE).exists() {
        if !common.overwrite {
            return Err(Failure::Usage(format!(
                "{} holds a completed run; pass --overwrite to replace it",
                out.display()
            )));
        }
        std::fs::remove_dir_all(out)?;
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

#[derive(Serialize)]
struct CommandManifest<'a, T: Serialize> {
    command: &'a str,
    code_version: &'a str,
    config: &'a T,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset_fingerprint: Option<String>,
}

fn write_manifest<T: Serialize>(out: &Path, command: &str, config: &T, seed: Option<u64>, fingerprint: Option<String>) -> Result<()> {
    write_json(
        &out.join("manifest.json"),
        &CommandManifest { command, code_version: CODE_VERSION, config, seed, dataset_fingerprint: fingerprint },
    )
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn initial_policy(cfg: PolicyConfig, init: Option<&Path>, vocab_hash: &str, seed: u64) -> Result<Policy> {
    match init {
        Some(p) => Ok(checkpoint::load(p, Some(vocab_hash))?.0),
        None => Ok(Policy::new(PolicyParams::init(cfg, &mut rng_for(seed, "policy-init", &[]))?)),
    }
}

fn cmd_gen_data(c: &Common) -> Result<()> {
    let cfg: GenDataConfig = read_config(&c.config)?;
    cfg.generator.validate()?;
    write_manifest(&c.out, "gen-data", &cfg, Some(cfg.generator.seed), None)?;
    let ds = generate_dataset(&cfg.generator)?;
    ds.write_dir(&c.out)?;
    let counts: BTreeMap<&str, usize> = Split::ALL.iter().map(|&s| (s.name(), ds.split(s).len())).collect();
    write_json(
        &c.out.join("report.json"),
        &serde_json::json!({"fingerprint": ds.fingerprint()?, "split_counts": counts, "total": ds.samples().len()}),
    )
}

fn cmd_sft(c: &Common) -> Result<()> {
    let mut cfg: SftCommandConfig = read_config(&c.config)?;
    cfg.sft.validate()?;
    let ds = load_data(&cfg.data)?;
    let vocab = vocab_for(&ds);
    cfg.policy.vocab_size = vocab.len();
    cfg.sft.seed = derive_seed(cfg.seed, "sft", &[]);
    write_manifest(&c.out, "sft", &cfg, Some(cfg.seed), Some(ds.fingerprint()?))?;
    let policy = initial_policy(cfg.policy, cfg.init_checkpoint.as_deref(), &vocab.hash(), cfg.seed)?;
    let samples = select_samples(ds.samples(), &cfg.sft);
    let out = train_sft(policy, &samples, &vocab, &cfg.sft)?;
    std::fs::create_dir_all(c.out.join("metrics"))?;
    std::fs::create_dir_all(c.out.join("checkpoints"))?;
    write_jsonl(&c.out.join("metrics/sft.jsonl"), &out.records)?;
    let mut policy = out.policy;
    let merged = cfg.merge_adapter && policy.adapter.is_some();
    if cfg.merge_adapter {
        policy.merge_adapter()?;
    }
    checkpoint::save(
        &curriculum::checkpoint_path(&c.out, None),
        &policy,
        &vocab.hash(),
        serde_json::json!({"phase": "sft", "merged_adapter": merged, "global_step": out.steps, "seed": cfg.seed}),
    )?;
    write_json(
        &c.out.join("report.json"),
        &serde_json::json!({"steps": out.steps, "stopped_early": out.stopped_early, "best_val_loss": out.best_val_loss}),
    )
}

fn cmd_grpo(c: &Common) -> Result<()> {
    let mut cfg: GrpoCommandConfig = read_config(&c.config)?;
    cfg.grpo.validate()?;
    let ds = load_data(&cfg.data)?;
    let vocab = vocab_for(&ds);
    cfg.policy.vocab_size = vocab.len();
    cfg.grpo.seed = derive_seed(cfg.seed, "grpo", &[]);
    write_manifest(&c.out, "grpo", &cfg, Some(cfg.seed), Some(ds.fingerprint()?))?;
    let policy = initial_policy(cfg.policy, cfg.init_checkpoint.as_deref(), &vocab.hash(), cfg.seed)?;
    let samples: Vec<&VqaSample> = ds.split(cfg.stage.rl_split());
    std::fs::create_dir_all(c.out.join("metrics"))?;
    std::fs::create_dir_all(c.out.join("checkpoints"))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(
        c.out.join(format!("metrics/stage-{}.jsonl", curriculum::phase_name(Some(cfg.stage)))),
    )?);
    let out = train_grpo_stage(policy, &samples, &vocab, &cfg.grpo, Some(cfg.stage), 0, |m| {
        serde_json::to_writer(&mut f, m)?;
        f.write_all(b"\n")?;
        Ok(())
    })?;
    f.flush()?;
    checkpoint::save(
        &curriculum::checkpoint_path(&c.out, Some(cfg.stage)),
        &out.policy,
        &vocab.hash(),
        serde_json::json!({"phase": curriculum::phase_name(Some(cfg.stage)), "global_step": out.metrics.len(), "seed": cfg.seed}),
    )?;
    write_json(&c.out.join("report.json"), &serde_json::json!({"steps": out.metrics.len()}))
}

fn cmd_curriculum(c: &Common) -> Result<()> {
    let m: RunManifest = read_config(&c.config)?;
    run_curriculum(&m, &c.out).map(|_| ())
}

fn cmd_ablate(c: &Common) -> Result<()> {
    let m: RunManifest = read_config(&c.config)?;
    m.validate()?;
    write_manifest(&c.out, "ablate", &m, Some(m.seed), None)?;
    run_ablation(&m, &c.out).map(|_| ())
}

fn cmd_eval(c: &Common) -> Result<()> {
    let cfg: EvalCommandConfig = read_config(&c.config)?;
    let ds = load_data(&cfg.data)?;
    write_manifest(&c.out, "eval", &cfg, None, Some(ds.fingerprint()?))?;
    let vocab = vocab_for(&ds);
    let samples: Vec<&VqaSample> = ds.split(cfg.split);
    if samples.is_empty() {
        return Err(Error::Config(format!("split {} is empty", cfg.split.name())));
    }
    let mut reports = Vec::new();
    match (&cfg.checkpoint, &cfg.outputs) {
        (Some(ck), None) => {
            let (policy, _) = checkpoint::load(ck, Some(&vocab.hash()))?;
            let params = policy.effective()?;
            let id = ck.display().to_string();
            for &mode in &cfg.prompt_modes {
                let (r, preds) = evaluate(&params, &vocab, &samples, mode, cfg.max_completion_len, &id)?;
                write_jsonl(&c.out.join(format!("predictions-{}.jsonl", curriculum::mode_name(mode))), &preds)?;
                reports.push(r);
            }
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)?;
            let outputs = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<std::result::Result<Vec<RawOutput>, _>>()?;
            for &mode in &cfg.prompt_modes {
                let (r, preds) = score_outputs(&samples, &outputs, mode, &path.display().to_string())?;
                std::fs::write(
                    c.out.join(format!("predictions-{}.jsonl", curriculum::mode_name(mode))),
                    predictions_jsonl(&preds)?,
                )?;
                reports.push(r);
            }
        }
        _ => return Err(Error::Config("eval needs exactly one of checkpoint or outputs".into())),
    }
    write_json(&c.out.join("report.json"), &reports)
}

fn cmd_cross_task(c: &Common) -> Result<()> {
    let cfg: CrossTaskConfig = read_config(&c.config)?;
    let ds = load_data(&cfg.data)?;
    write_manifest(&c.out, "cross-task", &cfg, None, Some(ds.fingerprint()?))?;
    let vocab = vocab_for(&ds);
    let test: Vec<&VqaSample> = ds.split(Split::Test);
    let mut trained = Vec::new();
    for (stage, path) in &cfg.checkpoints {
        let (p, _) = checkpoint::load(path, Some(&vocab.hash()))?;
        trained.push((*stage, p.effective()?));
    }
    if trained.is_empty() {
        return Err(Error::Config("cross-task needs at least one checkpoint".into()));
    }
    let matrices = cfg
        .prompt_modes
        .iter()
        .map(|&m| cross_task_matrix(&trained, &vocab, &test, m, cfg.max_completion_len))
        .collect::<Result<Vec<_>>>()?;
    write_json(&c.out.join("report.json"), &matrices)
}

fn cmd_dynamics(c: &Common) -> Result<()> {
    let cfg: DynamicsCommandConfig = read_config(&c.config)?;
    write_manifest(&c.out, "dynamics", &cfg, None, None)?;
    let text = std::fs::read_to_string(&cfg.metrics)
        .map_err(|e| Error::Config(format!("cannot read metrics {}: {e}", cfg.metrics.display())))?;
    let series = DynamicsSeries::from_jsonl(&text)?;
    write_json(&c.out.join("report.json"), &analyze_dynamics(&series, &cfg.dynamics)?)
}

fn run(cmd: &Command) -> std::result::Result<(), Failure> {
    configure_threads()?;
    let c = cmd.common();
    prepare_out(c)?;
    match cmd {
        Command::GenData(c) => cmd_gen_data(c),
        Command::Sft(c) => cmd_sft(c),
        Command::Grpo(c) => cmd_grpo(c),
        Command::Curriculum(c) => cmd_curriculum(c),
        Command::Ablate(c) => cmd_ablate(c),
        Command::Eval(c) => cmd_eval(c),
        Command::CrossTask(c) => cmd_cross_task(c),
        Command::Dynamics(c) => cmd_dynamics(c),
    }?;
    std::fs::write(c.out.join(COMPLETE), format!("{CODE_VERSION}\n"))?;
    Ok(())
}

fn report_error(cmd: &Command, f: &Failure) -> u8 {
    let (label, message, code) = match f {
        Failure::Usage(m) => ("usage", m.clone(), 2),
        Failure::Run(e) => (e.label(), e.to_string(), exit_code(e)),
    };
    let rec = ErrorRecord { error: label, message, exit_code: code, command: cmd.name() };
    let line = serde_json::to_string(&rec).unwrap_or_else(|_| format!("{{\"error\":\"{label}\"}}"));
    eprintln!("{line}");
    let out = &cmd.common().out;
    if out.is_dir() && !out.join(COMPLETE).exists() {
        let _ = std::fs::write(out.join("error.json"), format!("{line}\n"));
        if let Failure::Run(Error::NonFinite { dump, .. }) = f {
            let _ = std::fs::write(out.join("diagnostics.jsonl"), dump);
        }
    }
    code
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => ExitCode::from(report_error(&cli.command, &e)),
    }
}
