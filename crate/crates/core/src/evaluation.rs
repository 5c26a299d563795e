//! Exact-match accuracy per task, per stage and overall; cross-task matrices;
//! and reward-dynamics analysis of training logs.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::grpo::StepMetrics;
use crate::policy::{checkpoint, generate, Decoding, PolicyParams, Vocab};
use crate::structured_io::{build_prompt, detokenize, normalize_answer, parse_structured, PromptMode, TAGS};
use crate::synvqa::{Stage, TaskKind, VqaSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub prompt_modes: Vec<PromptMode>,
    pub max_completion_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { prompt_modes: vec![PromptMode::Prompting], max_completion_len: 32 }
    }
}

/// One scored prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub raw_output: String,
    pub parsed_answer: Option<String>,
    pub gold: String,
    pub correct: bool,
}

/// A raw model output to be scored offline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawOutput {
    pub sample_id: String,
    pub raw_output: String,
}

/// Answer candidate for `raw`. The answer segment wins; in plain mode the last
/// whitespace-delimited word (tags treated as whitespace) is the fallback.
pub fn extract_answer(raw: &str, mode: PromptMode) -> Option<String> {
    if let Some(a) = parse_structured(raw).answer {
        return Some(a);
    }
    match mode {
        PromptMode::Prompting => None,
        PromptMode::Plain => {
            let mut s = raw.to_string();
            for t in TAGS {
                s = s.replace(t, " ");
            }
            s.split_whitespace().last().map(str::to_string)
        }
    }
}

pub fn score_prediction(sample: &VqaSample, raw: &str, mode: PromptMode) -> Prediction {
    let parsed = extract_answer(raw, mode);
    let correct = parsed
        .as_deref()
        .is_some_and(|a| normalize_answer(a) == normalize_answer(&sample.gold_answer));
    Prediction {
        sample_id: sample.id.clone(),
        raw_output: raw.to_string(),
        parsed_answer: parsed,
        gold: sample.gold_answer.clone(),
        correct,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub correct: usize,
    pub total: usize,
    /// Percent; `None` when the cell has no samples.
    pub accuracy: Option<f64>,
}

impl Cell {
    fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += usize::from(correct);
    }

    fn finish(mut self) -> Self {
        self.accuracy = (self.total > 0).then(|| 100.0 * self.correct as f64 / self.total as f64);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_id: String,
    pub prompt_mode: PromptMode,
    pub per_task: BTreeMap<TaskKind, Cell>,
    pub per_stage: BTreeMap<Stage, Cell>,
    pub overall: Cell,
}

impl EvalReport {
    pub fn stage_accuracy(&self, stage: Stage) -> Option<f64> {
        self.per_stage.get(&stage).and_then(|c| c.accuracy)
    }
}

/// Aggregates predictions (in `samples` order) into a report.
pub fn build_report(
    samples: &[&VqaSample],
    predictions: &[Prediction],
    mode: PromptMode,
    checkpoint_id: &str,
) -> EvalReport {
    let mut per_task: BTreeMap<TaskKind, Cell> = TaskKind::ALL.iter().map(|&t| (t, Cell::default())).collect();
    let mut per_stage: BTreeMap<Stage, Cell> = Stage::ALL.iter().map(|&s| (s, Cell::default())).collect();
    let mut overall = Cell::default();
    for (s, p) in samples.iter().zip(predictions) {
        per_task.get_mut(&s.task).unwrap().add(p.correct);
        per_stage.get_mut(&s.stage).unwrap().add(p.correct);
        overall.add(p.correct);
    }
    EvalReport {
        checkpoint_id: checkpoint_id.to_string(),
        prompt_mode: mode,
        per_task: per_task.into_iter().map(|(k, c)| (k, c.finish())).collect(),
        per_stage: per_stage.into_iter().map(|(k, c)| (k, c.finish())).collect(),
        overall: overall.finish(),
    }
}

/// Greedy decode of one sample, rendered as text.
pub fn greedy_output(params: &PolicyParams, vocab: &Vocab, sample: &VqaSample, mode: PromptMode, max_len: usize) -> Result<String> {
    let prompt = vocab.encode(&build_prompt(sample, mode, params.config().context)?)?;
    let out = generate(params, &prompt, Decoding::Greedy, max_len, vocab.eos(), 0)?;
    Ok(detokenize(&vocab.decode(&out)?))
}

fn check_vocab(params: &PolicyParams, vocab: &Vocab) -> Result<()> {
    if params.config().vocab_size != vocab.len() {
        return Err(config_err(format!(
            "policy vocabulary of {} tokens does not match dataset vocabulary of {}",
            params.config().vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

/// Greedy evaluation of `params` on `samples`.
pub fn evaluate(
    params: &PolicyParams,
    vocab: &Vocab,
    samples: &[&VqaSample],
    mode: PromptMode,
    max_len: usize,
    checkpoint_id: &str,
) -> Result<(EvalReport, Vec<Prediction>)> {
    if samples.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    check_vocab(params, vocab)?;
    let predictions: Vec<Prediction> = samples
        .par_iter()
        .map(|s| Ok(score_prediction(s, &greedy_output(params, vocab, s, mode, max_len)?, mode)))
        .collect::<Result<_>>()?;
    Ok((build_report(samples, &predictions, mode, checkpoint_id), predictions))
}

/// Loads a checkpoint (vocabulary-checked) and evaluates it.
pub fn evaluate_checkpoint(
    path: &Path,
    vocab: &Vocab,
    samples: &[&VqaSample],
    mode: PromptMode,
    max_len: usize,
) -> Result<(EvalReport, Vec<Prediction>)> {
    let (policy, _) = checkpoint::load(path, Some(&vocab.hash()))?;
    let id = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    evaluate(&policy.effective()?, vocab, samples, mode, max_len, &id)
}

/// Scores externally produced outputs. Every sample needs exactly one output.
pub fn score_outputs(samples: &[&VqaSample], outputs: &[RawOutput], mode: PromptMode, id: &str) -> Result<(EvalReport, Vec<Prediction>)> {
    let mut by_id: HashMap<&str, &str> = HashMap::new();
    for o in outputs {
        if by_id.insert(&o.sample_id, &o.raw_output).is_some() {
            return Err(Error::Input(format!("duplicate output for {}", o.sample_id)));
        }
    }
    let predictions = samples
        .iter()
        .map(|s| {
            let raw = by_id
                .get(s.id.as_str())
                .ok_or_else(|| Error::Input(format!("no output for sample {}", s.id)))?;
            Ok(score_prediction(s, raw, mode))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((build_report(samples, &predictions, mode, id), predictions))
}

pub fn predictions_jsonl(predictions: &[Prediction]) -> Result<String> {
    let mut out = String::new();
    for p in predictions {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTaskRow {
    pub trained_on: Stage,
    /// Accuracy on each evaluation stage, A to C.
    pub accuracy: [f64; 3],
    /// Arithmetic mean of the three entries.
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTaskMatrix {
    pub prompt_mode: PromptMode,
    pub rows: Vec<CrossTaskRow>,
}

/// Rows are single-stage-trained policies; columns are test accuracies per stage.
pub fn cross_task_matrix(
    trained: &[(Stage, PolicyParams)],
    vocab: &Vocab,
    test: &[&VqaSample],
    mode: PromptMode,
    max_len: usize,
) -> Result<CrossTaskMatrix> {
    let mut rows = Vec::new();
    for (stage, params) in trained {
        let (report, _) = evaluate(params, vocab, test, mode, max_len, &format!("stage-{stage}"))?;
        let mut acc = [0.0; 3];
        for s in Stage::ALL {
            acc[s.index()] = report
                .stage_accuracy(s)
                .ok_or_else(|| Error::Input(format!("test split has no stage {s} samples")))?;
        }
        rows.push(CrossTaskRow { trained_on: *stage, accuracy: acc, overall: acc.iter().sum::<f64>() / 3.0 });
    }
    Ok(CrossTaskMatrix { prompt_mode: mode, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    /// Trailing window for rolling means.
    pub window: usize,
    pub format_threshold: f64,
    /// The rise is detected when the rolling accuracy exceeds
    /// `rise_factor * baseline + rise_margin`.
    pub rise_factor: f64,
    pub rise_margin: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self { window: 10, format_threshold: 0.45, rise_factor: 2.0, rise_margin: 0.01 }
    }
}

/// Per-step reward and KL series.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSeries {
    pub format: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub kl: Vec<f64>,
}

impl DynamicsSeries {
    pub fn from_metrics(metrics: &[StepMetrics]) -> Self {
        Self {
            format: metrics.iter().map(|m| m.reward_format_mean).collect(),
            accuracy: metrics.iter().map(|m| m.reward_acc_mean).collect(),
            kl: metrics.iter().map(|m| m.kl).collect(),
        }
    }

    /// Reads the series from JSONL records; every record needs all three fields.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)?;
            let get = |k: &str| {
                v.get(k)
                    .and_then(serde_json::Value::as_f64)
                    .ok_or_else(|| Error::Input(format!("line {}: missing series {k}", i + 1)))
            };
            s.format.push(get("reward_format_mean")?);
            s.accuracy.push(get("reward_acc_mean")?);
            s.kl.push(get("kl")?);
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsReport {
    pub steps: usize,
    pub config: DynamicsConfig,
    /// First step whose rolling format reward reaches the threshold.
    pub format_saturation_step: Option<usize>,
    /// Mean accuracy reward over the first window.
    pub accuracy_baseline: f64,
    pub accuracy_rise_step: Option<usize>,
    /// Correlation of step-to-step changes in rolling KL and rolling accuracy reward.
    pub kl_accuracy_change_correlation: Option<f64>,
    pub kl_accuracy_correlation_sign: i8,
    /// Format saturated strictly before the accuracy rise.
    pub format_before_accuracy: bool,
}

/// Trailing mean over up to `w` values ending at each index.
pub fn rolling_mean(xs: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= w {
            acc -= xs[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

pub fn analyze_dynamics(series: &DynamicsSeries, cfg: &DynamicsConfig) -> Result<DynamicsReport> {
    let n = series.format.len();
    if n == 0 || series.accuracy.len() != n || series.kl.len() != n {
        return Err(Error::Input("dynamics needs equally long, non-empty format/accuracy/kl series".into()));
    }
    if cfg.window == 0 {
        return Err(config_err("dynamics window must be >= 1"));
    }
    let w = cfg.window;
    let fmt = rolling_mean(&series.format, w);
    let acc = rolling_mean(&series.accuracy, w);
    let kl = rolling_mean(&series.kl, w);
    let format_saturation_step = fmt.iter().position(|&f| f >= cfg.format_threshold);
    let base_n = w.min(n);
    let accuracy_baseline = series.accuracy[..base_n].iter().sum::<f64>() / base_n as f64;
    let bar = cfg.rise_factor * accuracy_baseline + cfg.rise_margin;
    let accuracy_rise_step = (base_n..n).find(|&t| acc[t] > bar);
    let d = |xs: &[f64]| xs.windows(2).map(|p| p[1] - p[0]).collect::<Vec<f64>>();
    let corr = pearson(&d(&kl), &d(&acc));
    let format_before_accuracy = match (format_saturation_step, accuracy_rise_step) {
        (Some(f), Some(a)) => f < a,
        (Some(_), None) => true,
        _ => false,
    };
    Ok(DynamicsReport {
        steps: n,
        config: cfg.clone(),
        format_saturation_step,
        accuracy_baseline,
        accuracy_rise_step,
        kl_accuracy_change_correlation: corr,
        kl_accuracy_correlation_sign: corr.map_or(0, |c| if c > 0.0 { 1 } else if c < 0.0 { -1 } else { 0 }),
        format_before_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use crate::synvqa::{generate_dataset, GenConfig, Split};
    use rand::Rng;

    fn test_samples() -> Vec<VqaSample> {
        let ds = generate_dataset(&GenConfig { n_total: 400, seed: 2, ..Default::default() }).unwrap();
        ds.samples().iter().filter(|s| s.split == Split::Test).cloned().collect()
    }

    #[test]
    fn oracle_and_empty_outputs() {
        let samples = test_samples();
        let refs: Vec<&VqaSample> = samples.iter().collect();
        let gold: Vec<RawOutput> = samples
            .iter()
            .map(|s| RawOutput { sample_id: s.id.clone(), raw_output: format!("<think>x</think><answer>{}</answer>", s.gold_answer) })
            .collect();
        let (r, _) = score_outputs(&refs, &gold, PromptMode::Prompting, "oracle").unwrap();
        assert_eq!(r.overall.accuracy, Some(100.0));
        for c in r.per_stage.values().chain(r.per_task.values()) {
            assert!(c.total == 0 || c.accuracy == Some(100.0));
        }
        let empty: Vec<RawOutput> =
            samples.iter().map(|s| RawOutput { sample_id: s.id.clone(), raw_output: String::new() }).collect();
        for mode in [PromptMode::Plain, PromptMode::Prompting] {
            let (r, _) = score_outputs(&refs, &empty, mode, "empty").unwrap();
            assert_eq!(r.overall.accuracy, Some(0.0));
        }
    }

    #[test]
    fn stage_accuracy_is_weighted_task_mean() {
        let samples = test_samples();
        let refs: Vec<&VqaSample> = samples.iter().collect();
        let mut rng = rng_for(1, "t", &[]);
        let outs: Vec<RawOutput> = samples
            .iter()
            .map(|s| {
                let a = if rng.random_bool(0.5) { s.gold_answer.clone() } else { "zzz".into() };
                RawOutput { sample_id: s.id.clone(), raw_output: format!("<answer>{a}</answer>") }
            })
            .collect();
        let (r, preds) = score_outputs(&refs, &outs, PromptMode::Prompting, "x").unwrap();
        for st in Stage::ALL {
            let (c, t) = st
                .tasks()
                .iter()
                .map(|k| r.per_task[k])
                .fold((0, 0), |(c, t), cell| (c + cell.correct, t + cell.total));
            assert_eq!((c, t), (r.per_stage[&st].correct, r.per_stage[&st].total));
        }
        let recount = preds.iter().filter(|p| p.gold == p.parsed_answer.clone().unwrap_or_default()).count();
        assert_eq!(recount, r.overall.correct);
    }

    #[test]
    fn plain_mode_fallback() {
        assert_eq!(extract_answer("it is red.", PromptMode::Plain).as_deref(), Some("red."));
        assert_eq!(extract_answer("<think>a b</think>blue", PromptMode::Plain).as_deref(), Some("blue"));
        assert_eq!(extract_answer("<think>a b</think>blue", PromptMode::Prompting), None);
        assert_eq!(extract_answer("x<answer>top left</answer>", PromptMode::Plain).as_deref(), Some("top left"));
    }

    #[test]
    fn missing_and_duplicate_outputs_error() {
        let samples = test_samples();
        let refs: Vec<&VqaSample> = samples.iter().collect();
        assert!(score_outputs(&refs, &[], PromptMode::Plain, "x").is_err());
        let o = RawOutput { sample_id: samples[0].id.clone(), raw_output: String::new() };
        assert!(score_outputs(&refs[..1], &[o.clone(), o], PromptMode::Plain, "x").is_err());
    }

    #[test]
    fn constant_format_saturates_at_zero() {
        let s = DynamicsSeries { format: vec![0.5; 50], accuracy: vec![0.0; 50], kl: vec![0.0; 50] };
        let r = analyze_dynamics(&s, &DynamicsConfig::default()).unwrap();
        assert_eq!(r.format_saturation_step, Some(0));
        assert_eq!(r.accuracy_rise_step, None);
    }

    #[test]
    fn step_function_rise_is_detected() {
        let n = 400;
        let acc: Vec<f64> = (0..n).map(|t| if t < 200 { 0.1 } else { 1.2 }).collect();
        let s = DynamicsSeries { format: vec![0.5; n], accuracy: acc, kl: vec![0.0; n] };
        let cfg = DynamicsConfig::default();
        let r = analyze_dynamics(&s, &cfg).unwrap();
        let step = r.accuracy_rise_step.unwrap();
        assert!((200..=200 + cfg.window).contains(&step), "{step}");
        assert!(r.format_before_accuracy);
    }

    #[test]
    fn anti_correlated_kl_is_negative() {
        let mut rng = rng_for(3, "t", &[]);
        let acc: Vec<f64> = (0..300).map(|t| ((t as f64) / 20.0).sin() + 1.0).collect();
        let kl: Vec<f64> = acc.iter().map(|a| 2.0 - a + rng.random_range(-0.05..0.05)).collect();
        let s = DynamicsSeries { format: vec![0.5; 300], accuracy: acc, kl };
        let r = analyze_dynamics(&s, &DynamicsConfig::default()).unwrap();
        assert!(r.kl_accuracy_change_correlation.unwrap() < 0.0);
        assert_eq!(r.kl_accuracy_correlation_sign, -1);
    }

    #[test]
    fn missing_series_is_input_error() {
        assert!(DynamicsSeries::from_jsonl("{\"kl\": 0.1, \"reward_acc_mean\": 0.0}\n").is_err());
        assert!(analyze_dynamics(&DynamicsSeries::default(), &DynamicsConfig::default()).is_err());
    }
}
