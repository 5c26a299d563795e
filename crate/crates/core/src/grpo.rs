//! Group-relative policy optimization: rollout groups, standardized advantages,
//! the clipped surrogate with a KL penalty, and the update step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::policy::tape::{Tape, Var};
use crate::policy::{
    completion_logprobs, generate, logprobs, value_and_grad, Adam, AdamConfig, BoundTensors, Decoding, Policy,
    PolicyGrads, PolicyParams, Trainable, Vocab,
};
use crate::rewards::{score_text_with, AccuracyRule, RewardBreakdown, RewardTally};
use crate::seed::{derive_seed, rng_for};
use crate::structured_io::{build_prompt, detokenize, PromptMode};
use crate::synvqa::{Stage, VqaSample};

/// Group baseline subtracted from each reward before scaling by the group std.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageBaseline {
    #[default]
    Mean,
    /// Sensitivity variant: subtract the group maximum instead.
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub lr: f64,
    /// Prompts per micro-batch.
    pub batch_size: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    pub temperature: f64,
    pub max_completion_len: usize,
    /// Hard cap on optimizer steps per stage.
    pub max_steps: Option<usize>,
    pub advantage: AdvantageBaseline,
    pub accuracy_rule: AccuracyRule,
    pub prompt_mode: PromptMode,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.04,
            lr: 3e-4,
            batch_size: 1,
            grad_accum: 2,
            epochs: 2,
            temperature: 1.0,
            max_completion_len: 32,
            max_steps: None,
            advantage: AdvantageBaseline::Mean,
            accuracy_rule: AccuracyRule::Independent,
            prompt_mode: PromptMode::Prompting,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(config_err("grpo group_size must be >= 2"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(config_err("grpo clip_eps must be in (0, 1)"));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(config_err("grpo kl_beta must be finite and >= 0"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err("grpo lr must be finite and >= 0"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(config_err("grpo temperature must be positive"));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.epochs == 0 || self.max_completion_len == 0 {
            return Err(config_err("grpo batch_size, grad_accum, epochs and max_completion_len must be >= 1"));
        }
        Ok(())
    }
}

fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(r_i - mean) / std` with the population std; all zeros when std < 1e-8.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    group_advantages_with(rewards, AdvantageBaseline::Mean)
}

pub fn group_advantages_with(rewards: &[f64], baseline: AdvantageBaseline) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let (mean, std) = mean_and_std(rewards);
    if std < 1e-8 {
        return vec![0.0; rewards.len()];
    }
    let b = match baseline {
        AdvantageBaseline::Mean => mean,
        AdvantageBaseline::Max => rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    rewards.iter().map(|r| (r - b) / std).collect()
}

/// Per-token `q - log q - 1` with `log q = logp_ref - logp_theta`.
pub fn kl_estimate(logp_theta: &[f64], logp_ref: &[f64]) -> Vec<f64> {
    logp_theta
        .iter()
        .zip(logp_ref)
        .map(|(t, r)| {
            let d = r - t;
            d.exp_m1() - d
        })
        .collect()
}

/// G completions for one prompt, all drawn from one frozen old-policy snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt: Vec<usize>,
    pub completions: Vec<Vec<usize>>,
    pub old_logprobs: Vec<Vec<f64>>,
    pub ref_logprobs: Vec<Vec<f64>>,
    pub rewards: Vec<RewardBreakdown>,
}

impl RolloutGroup {
    pub fn validate(&self) -> Result<()> {
        let g = self.completions.len();
        if g < 2 || self.old_logprobs.len() != g || self.ref_logprobs.len() != g || self.rewards.len() != g {
            return Err(Error::Internal(format!("rollout group has inconsistent sizes (G = {g})")));
        }
        for (i, c) in self.completions.iter().enumerate() {
            if c.is_empty() || self.old_logprobs[i].len() != c.len() || self.ref_logprobs[i].len() != c.len() {
                return Err(Error::Internal(format!("completion {i}: log-prob length mismatch")));
            }
        }
        Ok(())
    }

    pub fn reward_values(&self) -> Vec<f64> {
        self.rewards.iter().map(|r| r.total.value()).collect()
    }
}

/// Diagnostics gathered while building the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ObjectiveStats {
    pub tokens: usize,
    pub kl_sum: f64,
    pub clipped: usize,
}

/// Records the surrogate objective for `group` on the tape.
pub fn grpo_objective_var(
    tape: &mut Tape,
    bound: &BoundTensors,
    group: &RolloutGroup,
    advantages: &[f64],
    clip_eps: f64,
    kl_beta: f64,
) -> Result<(Var, ObjectiveStats)> {
    group.validate()?;
    if advantages.len() != group.completions.len() {
        return Err(Error::Internal("advantage count differs from group size".into()));
    }
    let mut stats = ObjectiveStats::default();
    let mut total: Option<Var> = None;
    for (i, comp) in group.completions.iter().enumerate() {
        let a = advantages[i];
        let lp = completion_logprobs(tape, bound, &group.prompt, comp)?;
        let old = tape.column(&group.old_logprobs[i]);
        let diff = tape.sub(lp, old);
        let ratio = tape.exp(diff);
        let unclipped = tape.scale(ratio, a);
        let clamped = tape.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
        let clipped = tape.scale(clamped, a);
        let term = tape.minimum(unclipped, clipped);
        let reference = tape.column(&group.ref_logprobs[i]);
        let d = tape.sub(reference, lp);
        let q_minus_1 = tape.exp_m1(d);
        let kl = tape.sub(q_minus_1, d);
        let penalty = tape.scale(kl, kl_beta);
        let per_token = tape.sub(term, penalty);
        let score = tape.mean(per_token);
        total = Some(match total {
            Some(t) => tape.add(t, score),
            None => score,
        });
        stats.tokens += comp.len();
        stats.kl_sum += tape.value(kl).sum();
        stats.clipped += tape
            .value(ratio)
            .iter()
            .filter(|&&r| (a > 0.0 && r > 1.0 + clip_eps) || (a < 0.0 && r < 1.0 - clip_eps))
            .count();
    }
    let total = total.expect("group has completions");
    Ok((tape.scale(total, 1.0 / group.completions.len() as f64), stats))
}

/// Objective value and gradient with respect to the trainable parameters.
pub fn grpo_objective(
    policy: &Policy,
    trainable: Trainable,
    group: &RolloutGroup,
    advantages: &[f64],
    clip_eps: f64,
    kl_beta: f64,
) -> Result<(f64, ObjectiveStats, PolicyGrads)> {
    let mut stats = ObjectiveStats::default();
    let (v, g) = value_and_grad(policy, trainable, |t, b| {
        let (v, s) = grpo_objective_var(t, b, group, advantages, clip_eps, kl_beta)?;
        stats = s;
        Ok(v)
    })?;
    Ok((v, stats, g))
}

/// One prompt's rollouts, kept with their text for dumps.
#[derive(Debug, Clone)]
pub struct ScoredGroup {
    pub group: RolloutGroup,
    pub prompt_text: String,
    pub completion_texts: Vec<String>,
    pub sample_id: String,
}

fn words_text(vocab: &Vocab, ids: &[usize]) -> Result<String> {
    Ok(detokenize(&vocab.decode(ids)?))
}

/// Completion, old and reference log-probs, reward, text.
type Rollout = (Vec<usize>, Vec<f64>, Vec<f64>, RewardBreakdown, String);

/// Samples and scores G completions for `sample` from `old`.
pub fn collect_group(
    sample: &VqaSample,
    vocab: &Vocab,
    cfg: &GrpoConfig,
    old: &PolicyParams,
    reference: &PolicyParams,
    seeds: &[u64],
) -> Result<ScoredGroup> {
    let context = old.config().context;
    let prompt_words = build_prompt(sample, cfg.prompt_mode, context)?;
    let prompt = vocab.encode(&prompt_words)?;
    let same_ref = std::ptr::eq(old, reference) || old == reference;
    let rolled: Vec<Rollout> = seeds
        .par_iter()
        .map(|&seed| {
            let comp = generate(
                old,
                &prompt,
                Decoding::Sample { temperature: cfg.temperature },
                cfg.max_completion_len,
                vocab.eos(),
                seed,
            )?;
            if comp.is_empty() {
                return Err(Error::Encoding(format!("{}: no room left in context for a completion", sample.id)));
            }
            let old_lp = logprobs(old, &prompt, &comp)?;
            let ref_lp = if same_ref { old_lp.clone() } else { logprobs(reference, &prompt, &comp)? };
            let text = words_text(vocab, &comp)?;
            let reward = score_text_with(&text, &sample.gold_answer, cfg.accuracy_rule);
            Ok((comp, old_lp, ref_lp, reward, text))
        })
        .collect::<Result<_>>()?;
    let mut group = RolloutGroup {
        prompt,
        completions: Vec::new(),
        old_logprobs: Vec::new(),
        ref_logprobs: Vec::new(),
        rewards: Vec::new(),
    };
    let mut texts = Vec::new();
    for (c, o, r, w, t) in rolled {
        group.completions.push(c);
        group.old_logprobs.push(o);
        group.ref_logprobs.push(r);
        group.rewards.push(w);
        texts.push(t);
    }
    Ok(ScoredGroup { group, prompt_text: prompt_words.join(" "), completion_texts: texts, sample_id: sample.id.clone() })
}

/// Metrics emitted after every optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub stage: Option<Stage>,
    pub loss: f64,
    pub kl: f64,
    pub reward_format_mean: f64,
    pub reward_acc_mean: f64,
    pub clip_frac: f64,
}

#[derive(Serialize)]
struct DumpRecord<'a> {
    sample_id: &'a str,
    prompt: &'a str,
    completion: &'a str,
    rewards: &'a RewardBreakdown,
}

fn rollout_dump(groups: &[ScoredGroup]) -> String {
    let mut out = String::new();
    for g in groups {
        for (text, r) in g.completion_texts.iter().zip(&g.group.rewards) {
            let rec = DumpRecord { sample_id: &g.sample_id, prompt: &g.prompt_text, completion: text, rewards: r };
            out.push_str(&serde_json::to_string(&rec).unwrap_or_default());
            out.push('\n');
        }
    }
    out
}

/// Identifies a step for seed derivation and metrics.
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    pub stage: Option<Stage>,
    /// Step index within the stage (seed derivation).
    pub step: usize,
    /// Step number written to the metrics record.
    pub global_step: usize,
}

fn stage_index(stage: Option<Stage>) -> u64 {
    stage.map_or(3, |s| s.index() as u64)
}

/// Full weights, or the adapter plus embeddings when the policy still carries one.
pub fn grpo_trainable(policy: &Policy) -> Trainable {
    if policy.adapter.is_some() {
        Trainable::AdapterOnly { embeddings: true }
    } else {
        Trainable::Full
    }
}

/// One optimizer step over `batch` prompts: rollouts from `old`, advantages,
/// averaged objective gradient, and an ascent step on `policy`.
#[allow(clippy::too_many_arguments)]
pub fn grpo_step(
    policy: &mut Policy,
    opt: &mut Adam,
    batch: &[&VqaSample],
    vocab: &Vocab,
    cfg: &GrpoConfig,
    old: &PolicyParams,
    reference: &PolicyParams,
    ctx: StepContext,
) -> Result<StepMetrics> {
    let mut groups = Vec::with_capacity(batch.len());
    for (j, s) in batch.iter().enumerate() {
        let seeds: Vec<u64> = (0..cfg.group_size)
            .map(|g| derive_seed(cfg.seed, "rollout", &[stage_index(ctx.stage), ctx.step as u64, j as u64, g as u64]))
            .collect();
        groups.push(collect_group(s, vocab, cfg, old, reference, &seeds)?);
    }
    let trainable = grpo_trainable(policy);
    let results: Vec<(f64, ObjectiveStats, PolicyGrads)> = groups
        .par_iter()
        .map(|g| {
            let adv = group_advantages_with(&g.group.reward_values(), cfg.advantage);
            grpo_objective(policy, trainable, &g.group, &adv, cfg.clip_eps, cfg.kl_beta)
        })
        .collect::<Result<_>>()?;
    let mut grads = policy.zero_grads();
    let mut objective = 0.0;
    let mut stats = ObjectiveStats::default();
    for (v, s, g) in &results {
        objective += v;
        stats.tokens += s.tokens;
        stats.kl_sum += s.kl_sum;
        stats.clipped += s.clipped;
        grads.add_assign(g);
    }
    let k = results.len() as f64;
    objective /= k;
    if !objective.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite {
            context: format!("grpo objective at step {}", ctx.global_step),
            dump: rollout_dump(&groups),
        });
    }
    // ascend the objective
    grads.scale(-1.0 / k);
    policy.apply_update(opt, cfg.lr, &grads, trainable);
    let mut tally = RewardTally::default();
    for g in &groups {
        for r in &g.group.rewards {
            tally.add(r);
        }
    }
    Ok(StepMetrics {
        step: ctx.global_step,
        stage: ctx.stage,
        loss: -objective,
        kl: stats.kl_sum / stats.tokens as f64,
        reward_format_mean: tally.format_mean(),
        reward_acc_mean: tally.accuracy_mean(),
        clip_frac: stats.clipped as f64 / stats.tokens as f64,
    })
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub policy: Policy,
    pub metrics: Vec<StepMetrics>,
}

/// Runs GRPO over `samples` for `cfg.epochs`. The reference policy is the
/// effective policy at entry; the old policy is refreshed before every step.
pub fn train_grpo_stage(
    mut policy: Policy,
    samples: &[&VqaSample],
    vocab: &Vocab,
    cfg: &GrpoConfig,
    stage: Option<Stage>,
    first_global_step: usize,
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("grpo split is empty".into()));
    }
    let reference = policy.effective()?;
    let mut opt = Adam::new(cfg.adam, &policy.optimizer_shapes());
    let window = cfg.batch_size * cfg.grad_accum;
    let mut metrics = Vec::new();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut perm: Vec<usize> = (0..samples.len()).collect();
        rand::seq::SliceRandom::shuffle(
            perm.as_mut_slice(),
            &mut rng_for(cfg.seed, "grpo-epoch", &[stage_index(stage), epoch as u64]),
        );
        for chunk in perm.chunks(window) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch: Vec<&VqaSample> = chunk.iter().map(|&i| samples[i]).collect();
            let old = policy.effective()?;
            let ctx = StepContext { stage, step, global_step: first_global_step + step };
            let m = grpo_step(&mut policy, &mut opt, &batch, vocab, cfg, &old, &reference, ctx)?;
            on_step(&m)?;
            metrics.push(m);
            step += 1;
        }
    }
    Ok(StageOutcome { policy, metrics })
}
