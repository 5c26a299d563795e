//! Run orchestration: optional SFT, then GRPO stages in plan order, with a
//! checkpoint after every phase and resumption from completed phases.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::evaluation::{evaluate, predictions_jsonl, EvalConfig, EvalReport};
use crate::grpo::{train_grpo_stage, GrpoConfig, StepMetrics};
use crate::policy::{checkpoint, AdamConfig, Policy, PolicyConfig, PolicyParams, Vocab};
use crate::seed::{derive_seed, rng_for, sha256_hex};
use crate::sft::{select_samples, train_sft, SftConfig};
use crate::structured_io::PromptMode;
use crate::synvqa::{generate_dataset, Dataset, GenConfig, Split, Stage, VqaSample};

pub const SCHEMA_VERSION: u32 = 1;
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    /// GRPO from the initial policy.
    GrpoDirect,
    /// SFT with an adapter, merged, then GRPO.
    SftGrpo,
}

impl Route {
    pub fn label(self) -> &'static str {
        match self {
            Route::GrpoDirect => "route-1",
            Route::SftGrpo => "route-2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Generate(GenConfig),
    /// A directory written by `Dataset::write_dir`.
    Dir(PathBuf),
}

/// Everything a run depends on. `sft.seed` and `grpo.seed` are replaced by
/// seeds derived from `seed`; `policy.vocab_size` is set from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub route: Route,
    pub stages: Vec<Stage>,
    pub data: DataSource,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub sft: SftConfig,
    #[serde(default)]
    pub grpo: GrpoConfig,
    /// Fold the SFT adapter into the base weights before GRPO. When off, GRPO
    /// keeps training the adapter (and embeddings) instead of full weights.
    #[serde(default = "default_merge")]
    pub merge_after_sft: bool,
    /// Evaluate on the test split after every GRPO stage.
    #[serde(default)]
    pub eval: Option<EvalConfig>,
    pub seed: u64,
    /// Filled in when the run starts.
    #[serde(default)]
    pub dataset_fingerprint: Option<String>,
    #[serde(default)]
    pub code_version: Option<String>,
}

fn default_merge() -> bool {
    true
}

impl RunManifest {
    pub fn new(route: Route, stages: Vec<Stage>, data: DataSource, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            route,
            stages,
            data,
            policy: PolicyConfig::default(),
            sft: SftConfig::default(),
            grpo: GrpoConfig::default(),
            merge_after_sft: true,
            eval: None,
            seed,
            dataset_fingerprint: None,
            code_version: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(format!(
                "manifest schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let prefix = Stage::ALL[..self.stages.len().min(3)] == self.stages[..];
        if self.stages.is_empty() || !(prefix || self.stages.len() == 1) {
            return Err(config_err("stage plan must be a prefix of [A, B, C] or a single stage"));
        }
        self.sft.validate()?;
        self.grpo.validate()?;
        if let DataSource::Generate(g) = &self.data {
            g.validate()?;
        }
        Ok(())
    }

    /// Seeds and sizes the runner actually uses.
    pub fn resolved(&self, vocab: &Vocab, fingerprint: &str) -> Self {
        let mut m = self.clone();
        m.policy.vocab_size = vocab.len();
        m.sft.seed = derive_seed(self.seed, "sft", &[]);
        m.grpo.seed = derive_seed(self.seed, "grpo", &[]);
        m.dataset_fingerprint = Some(fingerprint.to_string());
        m.code_version = Some(CODE_VERSION.to_string());
        m
    }
}

/// Loads or generates the dataset named by `source`.
pub fn load_data(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Generate(g) => generate_dataset(g),
        DataSource::Dir(d) => {
            if !d.is_dir() {
                return Err(config_err(format!("dataset directory {} does not exist", d.display())));
            }
            Dataset::load_dir(d)
        }
    }
}

/// Vocabulary covering every grid cell present in `ds`.
pub fn vocab_for(ds: &Dataset) -> Vocab {
    let (w, h) = ds.samples().iter().fold((1, 1), |(w, h), s| {
        (w.max(s.scene.width()), h.max(s.scene.height()))
    });
    Vocab::for_generator(&GenConfig { grid_width: w, grid_height: h, ..GenConfig::default() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCheckpoint {
    /// `sft` or the stage letter.
    pub phase: String,
    pub stage: Option<Stage>,
    /// Relative to the run directory.
    pub path: PathBuf,
    pub sha256: String,
    pub steps: usize,
    /// Global step count after this phase.
    pub global_step: usize,
    pub final_loss: Option<f64>,
    pub mean_format_reward: Option<f64>,
    pub mean_accuracy_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEval {
    /// Stages trained so far, e.g. "A+B".
    pub trained: String,
    pub reports: Vec<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub route: Route,
    pub dataset_fingerprint: String,
    pub checkpoints: Vec<StageCheckpoint>,
    pub evaluations: Vec<StageEval>,
}

pub fn phase_name(stage: Option<Stage>) -> String {
    match stage {
        None => "sft".into(),
        Some(s) => s.to_string().to_lowercase(),
    }
}

pub fn checkpoint_path(run_dir: &Path, stage: Option<Stage>) -> PathBuf {
    run_dir.join("checkpoints").join(format!("stage-{}.ckpt", phase_name(stage)))
}

fn metrics_path(run_dir: &Path, stage: Option<Stage>) -> PathBuf {
    run_dir.join("metrics").join(format!("{}.jsonl", if stage.is_none() { "sft".into() } else { format!("stage-{}", phase_name(stage)) }))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

fn relative(run_dir: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(run_dir).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

fn file_sha(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

fn stage_label(stages: &[Stage]) -> String {
    stages.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("+")
}

fn ckpt_meta(route: Route, phase: &str, global_step: usize, merged: bool, adam: &AdamConfig, seed: u64) -> serde_json::Value {
    serde_json::json!({
        "route": route,
        "phase": phase,
        "global_step": global_step,
        "merged_adapter": merged,
        "optimizer": {"kind": "adam", "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
        "seed": seed,
        "code_version": CODE_VERSION,
    })
}

fn summarize_metrics(m: &[StepMetrics]) -> (Option<f64>, Option<f64>, Option<f64>) {
    if m.is_empty() {
        return (None, None, None);
    }
    let n = m.len() as f64;
    (
        m.last().map(|x| x.loss),
        Some(m.iter().map(|x| x.reward_format_mean).sum::<f64>() / n),
        Some(m.iter().map(|x| x.reward_acc_mean).sum::<f64>() / n),
    )
}

/// Reads a completed phase back, or `None` if it has not finished.
fn completed_phase(run_dir: &Path, stage: Option<Stage>, vocab: &Vocab) -> Result<Option<(Policy, StageCheckpoint)>> {
    let path = checkpoint_path(run_dir, stage);
    let summary = path.with_extension("json");
    if !path.exists() || !summary.exists() {
        return Ok(None);
    }
    let (policy, _) = checkpoint::load(&path, Some(&vocab.hash()))?;
    let info: StageCheckpoint = serde_json::from_str(&std::fs::read_to_string(&summary)?)?;
    if info.sha256 != file_sha(&path)? {
        return Err(Error::Input(format!("checkpoint {} does not match its summary", path.display())));
    }
    Ok(Some((policy, info)))
}

fn eval_stage(
    params: &PolicyParams,
    vocab: &Vocab,
    test: &[&VqaSample],
    cfg: &EvalConfig,
    trained: &str,
    run_dir: &Path,
) -> Result<StageEval> {
    let mut reports = Vec::new();
    for &mode in &cfg.prompt_modes {
        let (r, preds) = evaluate(params, vocab, test, mode, cfg.max_completion_len, trained)?;
        let name = format!("predictions-{}-{}.jsonl", trained.replace('+', ""), mode_name(mode));
        std::fs::write(run_dir.join("metrics").join(name), predictions_jsonl(&preds)?)?;
        reports.push(r);
    }
    Ok(StageEval { trained: trained.to_string(), reports })
}

pub fn mode_name(mode: PromptMode) -> &'static str {
    match mode {
        PromptMode::Plain => "plain",
        PromptMode::Prompting => "prompting",
    }
}

/// Executes (or resumes) the run described by `manifest` inside `run_dir`.
pub fn run_curriculum(manifest: &RunManifest, run_dir: &Path) -> Result<RunReport> {
    manifest.validate()?;
    let ds = load_data(&manifest.data)?;
    let fingerprint = ds.fingerprint()?;
    let vocab = vocab_for(&ds);
    let m = manifest.resolved(&vocab, &fingerprint);
    m.policy.validate()?;
    std::fs::create_dir_all(run_dir.join("checkpoints"))?;
    std::fs::create_dir_all(run_dir.join("metrics"))?;
    let manifest_path = run_dir.join("manifest.json");
    if manifest_path.exists() {
        let prior: RunManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        if prior != m {
            return Err(config_err(format!("{} holds a different run", run_dir.display())));
        }
    } else {
        write_json(&manifest_path, &m)?;
    }
    let test: Vec<&VqaSample> = ds.split(Split::Test);
    let mut checkpoints = Vec::new();
    let mut evaluations = Vec::new();

    let init = PolicyParams::init(m.policy, &mut rng_for(m.seed, "policy-init", &[]))?;
    let mut policy = Policy::new(init);
    let mut global_step = 0;

    if m.route == Route::SftGrpo {
        if let Some((p, info)) = completed_phase(run_dir, None, &vocab)? {
            policy = p;
            global_step = info.global_step;
            checkpoints.push(info);
        } else {
            let samples = select_samples(ds.samples(), &m.sft);
            if samples.is_empty() {
                return Err(config_err("dataset has no samples for the sft split"));
            }
            let out = train_sft(policy, &samples, &vocab, &m.sft)?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(metrics_path(run_dir, None))?);
            for r in &out.records {
                serde_json::to_writer(&mut f, r)?;
                f.write_all(b"\n")?;
            }
            f.flush()?;
            policy = out.policy;
            let merged = m.merge_after_sft && policy.adapter.is_some();
            if merged {
                policy.merge_adapter()?;
            }
            global_step = out.steps;
            let path = checkpoint_path(run_dir, None);
            checkpoint::save(&path, &policy, &vocab.hash(), ckpt_meta(m.route, "sft", global_step, merged, &m.sft.adam, m.seed))?;
            let info = StageCheckpoint {
                phase: "sft".into(),
                stage: None,
                sha256: file_sha(&path)?,
                path: relative(run_dir, &path),
                steps: out.steps,
                global_step,
                final_loss: out.best_val_loss.or(out.records.last().map(|r| r.loss)),
                mean_format_reward: None,
                mean_accuracy_reward: None,
            };
            write_json(&path.with_extension("json"), &info)?;
            checkpoints.push(info);
        }
    }

    for (k, &stage) in m.stages.iter().enumerate() {
        let trained = stage_label(&m.stages[..=k]);
        if let Some((p, info)) = completed_phase(run_dir, Some(stage), &vocab)? {
            policy = p;
            global_step = info.global_step;
            checkpoints.push(info);
        } else {
            let samples = ds.split(stage.rl_split());
            if samples.is_empty() {
                return Err(config_err(format!("dataset has no samples for stage {stage}")));
            }
            let mpath = metrics_path(run_dir, Some(stage));
            let mut f = std::io::BufWriter::new(std::fs::File::create(&mpath)?);
            let out = train_grpo_stage(policy, &samples, &vocab, &m.grpo, Some(stage), global_step, |rec| {
                serde_json::to_writer(&mut f, rec)?;
                f.write_all(b"\n")?;
                Ok(())
            })?;
            f.flush()?;
            drop(f);
            policy = out.policy;
            global_step += out.metrics.len();
            let path = checkpoint_path(run_dir, Some(stage));
            checkpoint::save(
                &path,
                &policy,
                &vocab.hash(),
                ckpt_meta(m.route, &phase_name(Some(stage)), global_step, false, &m.grpo.adam, m.seed),
            )?;
            let (final_loss, fmt, acc) = summarize_metrics(&out.metrics);
            let info = StageCheckpoint {
                phase: phase_name(Some(stage)),
                stage: Some(stage),
                sha256: file_sha(&path)?,
                path: relative(run_dir, &path),
                steps: out.metrics.len(),
                global_step,
                final_loss,
                mean_format_reward: fmt,
                mean_accuracy_reward: acc,
            };
            write_json(&path.with_extension("json"), &info)?;
            checkpoints.push(info);
        }
        if let Some(ecfg) = &m.eval {
            let eff = policy.effective()?;
            evaluations.push(eval_stage(&eff, &vocab, &test, ecfg, &trained, run_dir)?);
        }
    }

    let report = RunReport { route: m.route, dataset_fingerprint: fingerprint, checkpoints, evaluations };
    write_json(&run_dir.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub route: Route,
    /// "A", "A+B" or "A+B+C".
    pub stages: String,
    pub prompt_mode: PromptMode,
    /// Test accuracy per stage, A to C.
    pub stage_accuracy: [Option<f64>; 3],
    pub overall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationDelta {
    pub stages: String,
    pub prompt_mode: PromptMode,
    /// Route-2 minus Route-1, per evaluation stage.
    pub stage_delta: [Option<f64>; 3],
    pub overall_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset_fingerprint: String,
    pub rows: Vec<AblationRow>,
    pub deltas: Vec<AblationDelta>,
}

fn rows_for(report: &RunReport) -> Vec<AblationRow> {
    report
        .evaluations
        .iter()
        .flat_map(|e| {
            e.reports.iter().map(|r| AblationRow {
                route: report.route,
                stages: e.trained.clone(),
                prompt_mode: r.prompt_mode,
                stage_accuracy: Stage::ALL.map(|s| r.stage_accuracy(s)),
                overall: r.overall.accuracy,
            })
        })
        .collect()
}

fn diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

/// Runs both routes over the full A, B, C plan with matched seeds and data,
/// in `out_dir/route-1` and `out_dir/route-2`.
pub fn run_ablation(base: &RunManifest, out_dir: &Path) -> Result<AblationReport> {
    let mut reports = Vec::new();
    for route in [Route::GrpoDirect, Route::SftGrpo] {
        let mut m = base.clone();
        m.route = route;
        m.stages = Stage::ALL.to_vec();
        if m.eval.is_none() {
            m.eval = Some(EvalConfig::default());
        }
        reports.push(run_curriculum(&m, &out_dir.join(route.label()))?);
    }
    if reports[0].dataset_fingerprint != reports[1].dataset_fingerprint {
        return Err(Error::Internal("routes saw different datasets".into()));
    }
    let r1 = rows_for(&reports[0]);
    let r2 = rows_for(&reports[1]);
    let deltas = r1
        .iter()
        .zip(&r2)
        .map(|(a, b)| AblationDelta {
            stages: a.stages.clone(),
            prompt_mode: a.prompt_mode,
            stage_delta: [0, 1, 2].map(|i| diff(b.stage_accuracy[i], a.stage_accuracy[i])),
            overall_delta: diff(b.overall, a.overall),
        })
        .collect();
    let mut rows = r1;
    rows.extend(r2);
    let report = AblationReport { dataset_fingerprint: reports[0].dataset_fingerprint.clone(), rows, deltas };
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_manifest(route: Route, stages: Vec<Stage>) -> RunManifest {
        let gen = GenConfig { n_total: 120, grid_width: 3, grid_height: 3, max_objects: 3, seed: 4, ..Default::default() };
        let mut m = RunManifest::new(route, stages, DataSource::Generate(gen), 11);
        m.policy = PolicyConfig { width: 8, layers: 1, mlp_hidden: 12, context: 64, ..Default::default() };
        m.sft = SftConfig { epochs: 1, max_steps: Some(3), ..Default::default() };
        m.grpo = GrpoConfig { group_size: 2, max_steps: Some(2), max_completion_len: 6, ..Default::default() };
        m
    }

    #[test]
    fn plan_validation() {
        let mut m = tiny_manifest(Route::GrpoDirect, vec![Stage::A, Stage::C]);
        assert!(m.validate().is_err());
        m.stages = vec![Stage::C];
        assert!(m.validate().is_ok());
        m.stages = vec![];
        assert!(m.validate().is_err());
        m.stages = vec![Stage::A];
        m.schema_version = 9;
        assert!(m.validate().is_err());
        let bad = r#"{"schema_version":1,"route":"sft_grpo","stages":["A"],"data":{"dir":"x"},"seed":1,"extra":2}"#;
        assert!(serde_json::from_str::<RunManifest>(bad).is_err());
    }

    #[test]
    fn direct_route_single_stage_has_one_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_curriculum(&tiny_manifest(Route::GrpoDirect, vec![Stage::A]), dir.path()).unwrap();
        assert_eq!(r.checkpoints.len(), 1);
        assert!(!dir.path().join("metrics/sft.jsonl").exists());
        assert!(dir.path().join("checkpoints/stage-a.ckpt").exists());
    }

    #[test]
    fn full_plan_resumes_identically() {
        let m = tiny_manifest(Route::SftGrpo, Stage::ALL.to_vec());
        let a = tempfile::tempdir().unwrap();
        let ra = run_curriculum(&m, a.path()).unwrap();
        assert_eq!(ra.checkpoints.len(), 4);
        // stage inheritance: stage A starts from the merged SFT checkpoint
        let sft = checkpoint::load(&checkpoint_path(a.path(), None), None).unwrap();
        assert_eq!(sft.1.meta["merged_adapter"], true);
        assert!(sft.0.adapter.is_none());

        // interrupted after stage A, then resumed
        let b = tempfile::tempdir().unwrap();
        let mut first = m.clone();
        first.stages = vec![Stage::A];
        run_curriculum(&first, b.path()).unwrap();
        std::fs::remove_file(b.path().join("manifest.json")).unwrap();
        let rb = run_curriculum(&m, b.path()).unwrap();
        for (x, y) in ra.checkpoints.iter().zip(&rb.checkpoints) {
            assert_eq!(x.sha256, y.sha256, "{}", x.phase);
        }
        for f in ["sft.jsonl", "stage-a.jsonl", "stage-b.jsonl", "stage-c.jsonl"] {
            let x = std::fs::read(a.path().join("metrics").join(f)).unwrap();
            let y = std::fs::read(b.path().join("metrics").join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
    }

    #[test]
    fn unmerged_adapter_carries_into_grpo() {
        let mut m = tiny_manifest(Route::SftGrpo, vec![Stage::A]);
        m.merge_after_sft = false;
        let dir = tempfile::tempdir().unwrap();
        run_curriculum(&m, dir.path()).unwrap();
        let (sft, _) = checkpoint::load(&checkpoint_path(dir.path(), None), None).unwrap();
        let (a, _) = checkpoint::load(&checkpoint_path(dir.path(), Some(Stage::A)), None).unwrap();
        assert!(sft.adapter.is_some() && a.adapter.is_some());
        // mixing layers stay frozen through GRPO
        for i in 0..sft.params.tensors().len() {
            if !sft.config().is_embedding(i) {
                assert_eq!(sft.params.tensor(i), a.params.tensor(i), "tensor {i}");
            }
        }
    }

    #[test]
    fn ablation_grid_has_six_rows() {
        let mut m = tiny_manifest(Route::GrpoDirect, vec![Stage::A]);
        m.eval = Some(EvalConfig { prompt_modes: vec![PromptMode::Prompting], max_completion_len: 6 });
        let dir = tempfile::tempdir().unwrap();
        let r = run_ablation(&m, dir.path()).unwrap();
        assert_eq!(r.rows.len(), 6);
        assert_eq!(r.deltas.len(), 3);
        for d in &r.deltas {
            let row1 = r.rows.iter().find(|x| x.route == Route::GrpoDirect && x.stages == d.stages).unwrap();
            let row2 = r.rows.iter().find(|x| x.route == Route::SftGrpo && x.stages == d.stages).unwrap();
            assert_eq!(d.overall_delta, diff(row2.overall, row1.overall));
        }
    }

    #[test]
    fn missing_dataset_dir_is_config_error() {
        let mut m = tiny_manifest(Route::GrpoDirect, vec![Stage::A]);
        m.data = DataSource::Dir("/nonexistent/data".into());
        let dir = tempfile::tempdir().unwrap();
        let e = run_curriculum(&m, dir.path()).unwrap_err();
        assert_eq!(e.kind(), crate::error::ErrorKind::Config);
    }
}
