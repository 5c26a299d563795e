//! Supervised fine-tuning on gold reasoning + answer targets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::policy::tape::{Tape, Var};
use crate::policy::{
    completion_logprobs, value_and_grad, Adam, AdamConfig, AdapterConfig, BoundTensors, LowRankAdapter,
    Policy, PolicyGrads, Trainable, Vocab,
};
use crate::seed::rng_for;
use crate::structured_io::{encode_sample, EncodedSample, PromptMode};
use crate::synvqa::{Split, Stage, VqaSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    /// Validation evaluations without improvement tolerated before stopping.
    pub patience: usize,
    /// Fraction of the split held out for early stopping.
    pub val_fraction: f64,
    /// Optimizer steps between validation passes; 0 means once per epoch.
    pub eval_every: usize,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    pub split: Split,
    /// Restrict training to these stages; empty means all.
    pub stages: Vec<Stage>,
    pub prompt_mode: PromptMode,
    pub use_adapter: bool,
    pub adapter: AdapterConfig,
    /// With an adapter, also train the embedding tables.
    pub train_embeddings: bool,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            batch_size: 1,
            grad_accum: 4,
            epochs: 4,
            patience: 2,
            val_fraction: 0.1,
            eval_every: 0,
            max_steps: None,
            split: Split::Sft,
            stages: Vec::new(),
            prompt_mode: PromptMode::Prompting,
            use_adapter: true,
            adapter: AdapterConfig::default(),
            train_embeddings: true,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.grad_accum == 0 || self.batch_size == 0 {
            return Err(config_err("sft epochs, grad_accum and batch_size must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err(format!("sft lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(config_err("sft val_fraction must be in [0, 1)"));
        }
        Ok(())
    }

    fn trainable(&self, policy: &Policy) -> Trainable {
        if policy.adapter.is_some() {
            Trainable::AdapterOnly { embeddings: self.train_embeddings }
        } else {
            Trainable::Full
        }
    }
}

/// One loss-curve record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub lr: f64,
    /// Summed (not averaged) token NLL, averaged over samples.
    pub loss_sum: f64,
}

/// Mean token NLL of the target on the tape, plus its summed value.
pub fn sft_loss_var(tape: &mut Tape, bound: &BoundTensors, enc: &EncodedSample) -> Result<(Var, f64)> {
    let lp = completion_logprobs(tape, bound, &enc.prompt, &enc.target)?;
    let sum = -tape.value(lp).sum();
    let mean = tape.mean(lp);
    Ok((tape.scale(mean, -1.0), sum))
}

/// Loss value and gradient for one encoded sample.
pub fn sft_loss(policy: &Policy, trainable: Trainable, enc: &EncodedSample) -> Result<(f64, f64, PolicyGrads)> {
    let mut sum = 0.0;
    let (loss, grads) = value_and_grad(policy, trainable, |t, b| {
        let (v, s) = sft_loss_var(t, b, enc)?;
        sum = s;
        Ok(v)
    })?;
    Ok((loss, sum, grads))
}

/// Loss without gradient, using effective (adapter-applied) weights.
pub fn eval_loss(policy: &Policy, encs: &[EncodedSample]) -> Result<(f64, f64)> {
    if encs.is_empty() {
        return Ok((0.0, 0.0));
    }
    let eff = policy.effective()?;
    let losses: Vec<(f64, f64)> = encs
        .par_iter()
        .map(|e| {
            let lp = crate::policy::logprobs(&eff, &e.prompt, &e.target)?;
            let s: f64 = -lp.iter().sum::<f64>();
            Ok((s / lp.len() as f64, s))
        })
        .collect::<Result<_>>()?;
    let n = losses.len() as f64;
    Ok((
        losses.iter().map(|l| l.0).sum::<f64>() / n,
        losses.iter().map(|l| l.1).sum::<f64>() / n,
    ))
}

fn batch_dump(samples: &[&VqaSample]) -> String {
    samples
        .iter()
        .map(|s| serde_json::to_string(s).unwrap_or_default())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Loss and averaged gradient over a window of micro-batches, evaluated against
/// the same parameters. Micro-batches may run concurrently; the reduction is in order.
pub fn window_gradient(
    policy: &Policy,
    trainable: Trainable,
    micro_batches: &[Vec<&EncodedSample>],
) -> Result<(f64, f64, PolicyGrads)> {
    let parts: Vec<(f64, f64, PolicyGrads)> = micro_batches
        .par_iter()
        .map(|mb| {
            let mut g = policy.zero_grads();
            let (mut l, mut s) = (0.0, 0.0);
            for e in mb {
                let (li, si, gi) = sft_loss(policy, trainable, e)?;
                l += li;
                s += si;
                g.add_assign(&gi);
            }
            let k = mb.len() as f64;
            g.scale(1.0 / k);
            Ok((l / k, s / k, g))
        })
        .collect::<Result<_>>()?;
    let mut grads = policy.zero_grads();
    let (mut loss, mut sum) = (0.0, 0.0);
    for (l, s, g) in &parts {
        loss += l;
        sum += s;
        grads.add_assign(g);
    }
    let k = parts.len() as f64;
    grads.scale(1.0 / k);
    Ok((loss / k, sum / k, grads))
}

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub policy: Policy,
    pub records: Vec<LossRecord>,
    pub steps: usize,
    pub stopped_early: bool,
    pub best_val_loss: Option<f64>,
}

/// Samples of `cfg.split` (and `cfg.stages`, if set) in dataset order.
pub fn select_samples<'a>(samples: &'a [VqaSample], cfg: &SftConfig) -> Vec<&'a VqaSample> {
    samples
        .iter()
        .filter(|s| s.split == cfg.split && (cfg.stages.is_empty() || cfg.stages.contains(&s.stage)))
        .collect()
}

/// Trains on `samples`, holding out a validation slice for early stopping.
/// The parameters with the best validation loss are returned.
pub fn train_sft(mut policy: Policy, samples: &[&VqaSample], vocab: &Vocab, cfg: &SftConfig) -> Result<SftOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("sft split is empty".into()));
    }
    let context = policy.config().context;
    if cfg.use_adapter && policy.adapter.is_none() {
        let mut rng = rng_for(cfg.seed, "sft-adapter", &[]);
        policy.adapter = Some(LowRankAdapter::init(&cfg.adapter, policy.config(), &mut rng)?);
    }
    let trainable = cfg.trainable(&policy);

    let mut order: Vec<usize> = (0..samples.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng_for(cfg.seed, "sft-val", &[]));
    let n_val = if samples.len() >= 2 {
        ((samples.len() as f64 * cfg.val_fraction).round() as usize).min(samples.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let encode = |idx: &[usize]| -> Result<Vec<EncodedSample>> {
        idx.iter().map(|&i| encode_sample(samples[i], cfg.prompt_mode, vocab, context)).collect()
    };
    let val = encode(val_idx)?;
    let train = encode(train_idx)?;

    let mut opt = Adam::new(cfg.adam, &policy.optimizer_shapes());
    let mut records = Vec::new();
    let mut step = 0;
    let mut best: Option<(f64, Policy)> = None;
    let mut bad_evals = 0;
    let mut stopped_early = false;
    let window = cfg.batch_size * cfg.grad_accum;
    let steps_per_epoch = train.len().div_ceil(window);

    let mut validate = |policy: &Policy, step: usize, records: &mut Vec<LossRecord>| -> Result<bool> {
        if val.is_empty() {
            return Ok(false);
        }
        let (loss, loss_sum) = eval_loss(policy, &val)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { context: format!("sft validation at step {step}"), dump: String::new() });
        }
        records.push(LossRecord { step, split: "val".into(), loss, lr: cfg.lr, loss_sum });
        match &best {
            Some((b, _)) if loss >= *b => {
                bad_evals += 1;
                Ok(bad_evals > cfg.patience)
            }
            _ => {
                best = Some((loss, policy.clone()));
                bad_evals = 0;
                Ok(false)
            }
        }
    };
    if validate(&policy, 0, &mut records)? {
        stopped_early = true;
    }

    'epochs: for epoch in 0..cfg.epochs {
        if stopped_early {
            break;
        }
        let mut perm: Vec<usize> = (0..train.len()).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng_for(cfg.seed, "sft-epoch", &[epoch as u64]));
        for s in 0..steps_per_epoch {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let chunk = &perm[s * window..((s + 1) * window).min(perm.len())];
            let micro: Vec<Vec<&EncodedSample>> =
                chunk.chunks(cfg.batch_size).map(|c| c.iter().map(|&i| &train[i]).collect()).collect();
            let (loss, loss_sum, grads) = window_gradient(&policy, trainable, &micro)?;
            if !loss.is_finite() || !grads.is_finite() {
                let batch: Vec<&VqaSample> = chunk.iter().map(|&i| samples[train_idx[i]]).collect();
                return Err(Error::NonFinite { context: format!("sft loss at step {step}"), dump: batch_dump(&batch) });
            }
            policy.apply_update(&mut opt, cfg.lr, &grads, trainable);
            step += 1;
            records.push(LossRecord { step, split: "train".into(), loss, lr: cfg.lr, loss_sum });
            let end_of_epoch = s + 1 == steps_per_epoch;
            let due = if cfg.eval_every == 0 { end_of_epoch } else { step % cfg.eval_every == 0 };
            if due && validate(&policy, step, &mut records)? {
                stopped_early = true;
                break 'epochs;
            }
        }
    }
    if !stopped_early && records.last().is_some_and(|r| r.split == "train") {
        validate(&policy, step, &mut records)?;
    }
    let best_val_loss = best.as_ref().map(|b| b.0);
    if let Some((_, p)) = best {
        policy = p;
    }
    Ok(SftOutcome { policy, records, steps: step, stopped_early, best_val_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{PolicyConfig, PolicyParams};
    use crate::synvqa::{generate_dataset, GenConfig};
    use ndarray::Array2;

    fn setup(n: usize) -> (Vec<VqaSample>, Vocab, PolicyConfig) {
        let gc = GenConfig { n_total: n, seed: 5, grid_width: 4, grid_height: 4, max_objects: 3, ..Default::default() };
        let ds = generate_dataset(&gc).unwrap();
        let vocab = Vocab::for_generator(&gc);
        let pc = PolicyConfig { vocab_size: vocab.len(), width: 16, layers: 1, mlp_hidden: 24, context: 64 };
        (ds.samples().to_vec(), vocab, pc)
    }

    fn init(pc: PolicyConfig, seed: u64) -> Policy {
        Policy::new(PolicyParams::init(pc, &mut rng_for(seed, "init", &[])).unwrap())
    }

    #[test]
    fn uniform_policy_loss_is_log_vocab() {
        let (samples, vocab, pc) = setup(40);
        let p = init(pc, 1);
        let zeros = p.params.tensors().iter().map(|t| Array2::zeros(t.dim())).collect();
        let z = Policy::new(PolicyParams::from_tensors(pc, zeros).unwrap());
        let enc = encode_sample(&samples[0], PromptMode::Prompting, &vocab, pc.context).unwrap();
        let (loss, sum, _) = sft_loss(&z, Trainable::Full, &enc).unwrap();
        let lv = (vocab.len() as f64).ln();
        assert!((loss - lv).abs() < 1e-12);
        assert!((sum - lv * enc.target.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn zero_lr_is_identity() {
        let (samples, vocab, pc) = setup(40);
        let p = init(pc, 2);
        let refs: Vec<&VqaSample> = samples.iter().take(6).collect();
        let cfg = SftConfig { lr: 0.0, epochs: 1, patience: 0, use_adapter: false, ..Default::default() };
        let out = train_sft(p.clone(), &refs, &vocab, &cfg).unwrap();
        assert_eq!(out.policy, p);
        let train: Vec<f64> = out.records.iter().filter(|r| r.split == "train").map(|r| r.loss).collect();
        assert!(!train.is_empty());
    }

    #[test]
    fn accumulation_matches_large_batch() {
        let (samples, vocab, pc) = setup(40);
        let p = init(pc, 3);
        let encs: Vec<EncodedSample> = samples[..4]
            .iter()
            .map(|s| encode_sample(s, PromptMode::Prompting, &vocab, pc.context).unwrap())
            .collect();
        let singles: Vec<Vec<&EncodedSample>> = encs.iter().map(|e| vec![e]).collect();
        let one: Vec<Vec<&EncodedSample>> = vec![encs.iter().collect()];
        let (la, _, ga) = window_gradient(&p, Trainable::Full, &singles).unwrap();
        let (lb, _, gb) = window_gradient(&p, Trainable::Full, &one).unwrap();
        assert!((la - lb).abs() < 1e-10);
        for (a, b) in ga.flatten().iter().zip(gb.flatten()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn overfits_a_single_sample() {
        let (samples, vocab, pc) = setup(40);
        let p = init(pc, 4);
        let refs = vec![&samples[0]];
        let cfg = SftConfig {
            lr: 1e-2,
            epochs: 300,
            grad_accum: 1,
            val_fraction: 0.0,
            use_adapter: false,
            ..Default::default()
        };
        let out = train_sft(p, &refs, &vocab, &cfg).unwrap();
        assert!(out.records.last().unwrap().loss < 0.01, "{:?}", out.records.last());
    }

    #[test]
    fn adapter_training_reduces_loss_and_is_deterministic() {
        let (samples, vocab, pc) = setup(200);
        let cfg = SftConfig { lr: 5e-3, epochs: 2, seed: 9, ..Default::default() };
        let refs = select_samples(&samples, &cfg);
        let a = train_sft(init(pc, 5), &refs, &vocab, &cfg).unwrap();
        let b = train_sft(init(pc, 5), &refs, &vocab, &cfg).unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.records, b.records);
        let val: Vec<f64> = a.records.iter().filter(|r| r.split == "val").map(|r| r.loss).collect();
        assert!(val.iter().skip(1).any(|&l| l < val[0]), "{val:?}");
        // frozen base weights outside the embeddings
        let base = init(pc, 5);
        for i in 2..pc.tensor_shapes().len() {
            assert_eq!(a.policy.params.tensor(i), base.params.tensor(i));
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = SftConfig { epochs: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg: std::result::Result<SftConfig, _> = serde_json::from_str(r#"{"bogus": 1}"#);
        assert!(cfg.is_err());
    }
}
