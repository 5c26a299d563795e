//! The toy autoregressive policy, its autodiff core and low-rank adapters.

mod adapter;
pub mod checkpoint;
mod model;
mod optim;
pub mod tape;
mod vocab;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adapter::{apply_adapter, AdapterConfig, AdapterTarget, LowRankAdapter};
pub use model::{
    bind_constant, completion_logits, completion_logprobs, hidden_states, log_softmax, slot,
    BoundTensors, Decoder, PolicyConfig, PolicyParams,
};
pub use optim::{Adam, AdamConfig};
pub use vocab::Vocab;

use crate::error::{Error, Result};
use crate::seed::rng_for;
use tape::{Gradients, Tape, Var};

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    /// Every base tensor; adapters (if any) too.
    Full,
    /// Adapter entries only, plus the embedding tables when `embeddings` is set.
    AdapterOnly { embeddings: bool },
    Frozen,
}

/// Base parameters with an optional adapter on top.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub params: PolicyParams,
    pub adapter: Option<LowRankAdapter>,
}

impl Policy {
    pub fn new(params: PolicyParams) -> Self {
        Self { params, adapter: None }
    }

    pub fn config(&self) -> &PolicyConfig {
        self.params.config()
    }

    /// Effective parameters used for inference.
    pub fn effective(&self) -> Result<PolicyParams> {
        match &self.adapter {
            Some(a) => apply_adapter(&self.params, a),
            None => Ok(self.params.clone()),
        }
    }

    /// Folds the adapter into the base weights.
    pub fn merge_adapter(&mut self) -> Result<()> {
        if self.adapter.is_some() {
            self.params = self.effective()?;
            self.adapter = None;
        }
        Ok(())
    }

    pub fn base_mask(&self, trainable: Trainable) -> Vec<bool> {
        let cfg = *self.config();
        (0..cfg.tensor_shapes().len())
            .map(|i| match trainable {
                Trainable::Full => true,
                Trainable::AdapterOnly { embeddings } => embeddings && cfg.is_embedding(i),
                Trainable::Frozen => false,
            })
            .collect()
    }

    fn adapter_trainable(&self, trainable: Trainable) -> bool {
        self.adapter.is_some() && trainable != Trainable::Frozen
    }

    /// Records the policy on `tape`, returning the effective tensors.
    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> Binding {
        let mask = self.base_mask(trainable);
        let base: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .zip(&mask)
            .map(|(t, &m)| if m { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let mut eff = base.clone();
        let mut adapter_vars = Vec::new();
        if let Some(a) = &self.adapter {
            let train = self.adapter_trainable(trainable);
            for t in a.targets() {
                let (d, u) = if train {
                    (tape.param(t.down.clone()), tape.param(t.up.clone()))
                } else {
                    (tape.constant(t.down.clone()), tape.constant(t.up.clone()))
                };
                let prod = tape.matmul(d, u);
                let delta = tape.scale(prod, a.scaling());
                eff[t.tensor] = tape.add(eff[t.tensor], delta);
                adapter_vars.push((d, u));
            }
        }
        Binding {
            tensors: BoundTensors { config: *self.config(), vars: eff },
            base,
            base_mask: mask,
            adapter: adapter_vars,
        }
    }

    pub fn zero_grads(&self) -> PolicyGrads {
        PolicyGrads {
            base: self.params.tensors().iter().map(|t| Array2::zeros(t.dim())).collect(),
            adapter: self
                .adapter
                .iter()
                .flat_map(|a| a.targets())
                .map(|t| (Array2::zeros(t.down.dim()), Array2::zeros(t.up.dim())))
                .collect(),
        }
    }

    /// Applies one optimizer step to the trainable parameters.
    pub fn apply_update(&mut self, opt: &mut Adam, lr: f64, grads: &PolicyGrads, trainable: Trainable) {
        let mut mask = self.base_mask(trainable);
        let adapter_train = self.adapter_trainable(trainable);
        let mut params: Vec<&mut Array2<f64>> = self.params.tensors_mut().iter_mut().collect();
        let mut gs: Vec<&Array2<f64>> = grads.base.iter().collect();
        if let Some(a) = &mut self.adapter {
            for (t, (gd, gu)) in a.targets_mut().iter_mut().zip(&grads.adapter) {
                params.push(&mut t.down);
                params.push(&mut t.up);
                gs.push(gd);
                gs.push(gu);
                mask.push(adapter_train);
                mask.push(adapter_train);
            }
        }
        opt.step(lr, &mut params, &gs, &mask);
    }

    /// Shapes in the order used by [`Policy::apply_update`].
    pub fn optimizer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes: Vec<_> = self.params.tensors().iter().map(|t| t.dim()).collect();
        for t in self.adapter.iter().flat_map(|a| a.targets()) {
            shapes.push(t.down.dim());
            shapes.push(t.up.dim());
        }
        shapes
    }
}

/// A policy recorded on a tape.
pub struct Binding {
    pub tensors: BoundTensors,
    base: Vec<Var>,
    base_mask: Vec<bool>,
    adapter: Vec<(Var, Var)>,
}

impl Binding {
    /// Gradients shaped like the policy; frozen tensors get exact zeros.
    pub fn collect(&self, grads: &Gradients, policy: &Policy) -> PolicyGrads {
        let mut out = policy.zero_grads();
        for (i, v) in self.base.iter().enumerate() {
            if self.base_mask[i] {
                if let Some(g) = grads.wrt(*v) {
                    out.base[i].assign(g);
                }
            }
        }
        for (k, (d, u)) in self.adapter.iter().enumerate() {
            if let Some(g) = grads.wrt(*d) {
                out.adapter[k].0.assign(g);
            }
            if let Some(g) = grads.wrt(*u) {
                out.adapter[k].1.assign(g);
            }
        }
        out
    }
}

/// Gradient with the same layout as a [`Policy`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrads {
    pub base: Vec<Array2<f64>>,
    pub adapter: Vec<(Array2<f64>, Array2<f64>)>,
}

impl PolicyGrads {
    pub fn add_assign(&mut self, other: &PolicyGrads) {
        for (a, b) in self.base.iter_mut().zip(&other.base) {
            *a += b;
        }
        for ((ad, au), (bd, bu)) in self.adapter.iter_mut().zip(&other.adapter) {
            *ad += bd;
            *au += bu;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in &mut self.base {
            *a *= c;
        }
        for (d, u) in &mut self.adapter {
            *d *= c;
            *u *= c;
        }
    }

    /// Every entry, base tensors first, then adapter pairs.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.base.iter().flat_map(|t| t.iter().copied()).collect();
        for (d, u) in &self.adapter {
            v.extend(d.iter().copied());
            v.extend(u.iter().copied());
        }
        v
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Scalar objective value and its gradient with respect to the trainable parameters.
pub fn value_and_grad<F>(policy: &Policy, trainable: Trainable, objective: F) -> Result<(f64, PolicyGrads)>
where
    F: FnOnce(&mut Tape, &BoundTensors) -> Result<Var>,
{
    let mut tape = Tape::new();
    let binding = policy.bind(&mut tape, trainable);
    let out = objective(&mut tape, &binding.tensors)?;
    let value = tape.scalar(out);
    let grads = tape.backward(out)?;
    Ok((value, binding.collect(&grads, policy)))
}

/// Per-token log-probabilities of `completion` given `prompt`.
pub fn logprobs(params: &PolicyParams, prompt: &[usize], completion: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = bind_constant(&mut tape, params);
    let lp = completion_logprobs(&mut tape, &bound, prompt, completion)?;
    Ok(tape.value(lp).iter().copied().collect())
}

/// Next-token log-probability rows at every completion position (`n + 1` rows).
pub fn position_logprobs(params: &PolicyParams, prompt: &[usize], completion: &[usize]) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let bound = bind_constant(&mut tape, params);
    let logits = completion_logits(&mut tape, &bound, prompt, completion)?;
    let mut rows = tape.value(logits).clone();
    for mut r in rows.rows_mut() {
        let lp = log_softmax(r.view());
        r.assign(&lp);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    /// Argmax at every step; the zero-temperature limit.
    Greedy,
    Sample { temperature: f64 },
}

/// Decodes up to `max_len` tokens after `prompt`, stopping after `eos`.
/// The limit is shortened to fit the context window.
pub fn generate(
    params: &PolicyParams,
    prompt: &[usize],
    decoding: Decoding,
    max_len: usize,
    eos: Option<usize>,
    seed: u64,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    if let Decoding::Sample { temperature } = decoding {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
    }
    let budget = params.config().context.saturating_sub(prompt.len());
    let max_len = max_len.min(budget);
    let mut rng = rng_for(seed, "decode", &[]);
    let mut dec = Decoder::new(params);
    let mut logits = Array1::zeros(0);
    for &t in prompt {
        logits = dec.step(t)?;
    }
    let mut out = Vec::with_capacity(max_len);
    while out.len() < max_len {
        let next = match decoding {
            Decoding::Greedy => argmax(&logits),
            Decoding::Sample { temperature } => sample_index(&logits, temperature, &mut rng),
        };
        out.push(next);
        if Some(next) == eos || out.len() == max_len {
            break;
        }
        logits = dec.step(next)?;
    }
    Ok(out)
}

pub fn sample_completion(
    params: &PolicyParams,
    prompt: &[usize],
    temperature: f64,
    max_len: usize,
    eos: Option<usize>,
    seed: u64,
) -> Result<Vec<usize>> {
    generate(params, prompt, Decoding::Sample { temperature }, max_len, eos, seed)
}

fn argmax(x: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn sample_index<R: Rng>(logits: &Array1<f64>, temperature: f64, rng: &mut R) -> usize {
    let scaled = logits.mapv(|l| l / temperature);
    let lp = log_softmax(scaled.view());
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &l) in lp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i;
        }
    }
    lp.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ErrorKind;

    fn cfg(vocab: usize) -> PolicyConfig {
        PolicyConfig { vocab_size: vocab, width: 6, layers: 2, mlp_hidden: 8, context: 12 }
    }

    fn params(vocab: usize, seed: u64) -> PolicyParams {
        PolicyParams::init(cfg(vocab), &mut rng_for(seed, "test-init", &[])).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_logprobs() {
        let p = params(5, 1);
        let zeros = p.tensors().iter().map(|t| Array2::zeros(t.dim())).collect();
        let z = PolicyParams::from_tensors(*p.config(), zeros).unwrap();
        for lp in logprobs(&z, &[0, 1], &[2, 3, 4]).unwrap() {
            assert!((lp - (0.2f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_are_distributions() {
        let p = params(7, 2);
        let rows = position_logprobs(&p, &[1, 2, 3], &[4, 5, 6]).unwrap();
        assert_eq!(rows.nrows(), 4);
        for r in rows.rows() {
            assert!((r.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn enumerated_sequences_sum_to_one() {
        let p = params(3, 3);
        let mut total = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                total += logprobs(&p, &[0], &[a, b]).unwrap().iter().sum::<f64>().exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-10, "{total}");
    }

    #[test]
    fn sampling_matches_probabilities() {
        let p = params(4, 4);
        let probs: Vec<f64> = position_logprobs(&p, &[1, 2], &[]).unwrap().row(0).iter().map(|l| l.exp()).collect();
        let n = 10_000;
        let mut counts = [0usize; 4];
        for s in 0..n {
            let out = sample_completion(&p, &[1, 2], 1.0, 1, None, s as u64).unwrap();
            counts[out[0]] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() < 3.0 * se + 1e-12, "{counts:?} vs {probs:?}");
        }
    }

    #[test]
    fn greedy_is_argmax_and_sampling_is_seeded() {
        let p = params(6, 5);
        let out = generate(&p, &[0, 1], Decoding::Greedy, 5, None, 0).unwrap();
        let rows = position_logprobs(&p, &[0, 1], &out).unwrap();
        for (i, &t) in out.iter().enumerate() {
            let row = rows.row(i);
            assert!(row.iter().all(|&l| l <= row[t]));
        }
        let a = sample_completion(&p, &[0], 1.0, 8, Some(5), 9).unwrap();
        assert_eq!(a, sample_completion(&p, &[0], 1.0, 8, Some(5), 9).unwrap());
        assert!(a.len() <= 8);
        if let Some(pos) = a.iter().position(|&t| t == 5) {
            assert_eq!(pos, a.len() - 1);
        }
    }

    #[test]
    fn generation_respects_context() {
        let p = params(6, 5);
        let prompt = [0; 10];
        assert_eq!(generate(&p, &prompt, Decoding::Greedy, 50, None, 0).unwrap().len(), 2);
        assert!(sample_completion(&p, &[0], 0.0, 3, None, 0).is_err());
    }

    #[test]
    fn decoder_matches_tape() {
        let p = params(9, 6);
        let seq = [3, 1, 4, 1, 5, 8, 2, 6];
        let mut tape = Tape::new();
        let bound = bind_constant(&mut tape, &p);
        let logits = completion_logits(&mut tape, &bound, &seq[..1], &seq[1..]).unwrap();
        let full = tape.value(logits).clone();
        let mut dec = Decoder::new(&p);
        for (i, &t) in seq.iter().enumerate() {
            let l = dec.step(t).unwrap();
            for (a, b) in l.iter().zip(full.row(i)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    fn objective(t: &mut Tape, b: &BoundTensors) -> Result<Var> {
        let lp = completion_logprobs(t, b, &[1, 2], &[0, 3, 3])?;
        Ok(t.mean(lp))
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = params(4, 7);
        let policy = Policy::new(p.clone());
        let (_, g) = value_and_grad(&policy, Trainable::Full, objective).unwrap();
        let h = 1e-5;
        for ti in 0..p.tensors().len() {
            for idx in 0..p.tensor(ti).len() {
                let eval = |d: f64| {
                    let mut q = p.clone();
                    q.tensors_mut()[ti].as_slice_mut().unwrap()[idx] += d;
                    let lp = logprobs(&q, &[1, 2], &[0, 3, 3]).unwrap();
                    lp.iter().sum::<f64>() / 3.0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let ad = g.base[ti].as_slice().unwrap()[idx];
                assert!((fd - ad).abs() <= 1e-4 * fd.abs().max(ad.abs()).max(1e-3), "{ti}/{idx}: {fd} {ad}");
            }
        }
    }

    #[test]
    fn relabeling_tokens_is_equivariant() {
        let p = params(5, 8);
        let perm = [3, 0, 4, 1, 2];
        let mut q = p.clone();
        let emb = p.tensor(slot::TOKEN_EMBEDDING);
        for (old, &new) in perm.iter().enumerate() {
            q.tensors_mut()[slot::TOKEN_EMBEDDING].row_mut(new).assign(&emb.row(old));
        }
        let (prompt, comp) = ([1, 2], [0, 4, 3]);
        let a = logprobs(&p, &prompt, &comp).unwrap();
        let map = |s: &[usize]| s.iter().map(|&t| perm[t]).collect::<Vec<_>>();
        let b = logprobs(&q, &map(&prompt), &map(&comp)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fresh_adapter_is_identity_and_merge_matches() {
        let p = params(5, 9);
        let mut rng = rng_for(1, "adapter", &[]);
        let a = LowRankAdapter::init(&AdapterConfig::default(), p.config(), &mut rng).unwrap();
        assert_eq!(a.targets().len(), 12);
        let mut pol = Policy { params: p.clone(), adapter: Some(a) };
        assert_eq!(pol.effective().unwrap(), p);
        pol.adapter.as_mut().unwrap().targets_mut()[3].up.fill(0.1);
        let eff = pol.effective().unwrap();
        assert_ne!(eff, p);
        let lp_tape = {
            let mut tape = Tape::new();
            let b = pol.bind(&mut tape, Trainable::Frozen);
            let v = completion_logprobs(&mut tape, &b.tensors, &[1], &[2, 3]).unwrap();
            tape.value(v).clone()
        };
        let lp_eff = logprobs(&eff, &[1], &[2, 3]).unwrap();
        for (a, b) in lp_tape.iter().zip(&lp_eff) {
            assert!((a - b).abs() < 1e-12);
        }
        pol.merge_adapter().unwrap();
        assert!(pol.adapter.is_none());
        assert_eq!(pol.params, eff);
    }

    #[test]
    fn full_rank_adapter_represents_any_delta() {
        let p = params(5, 10);
        let shape = p.tensor(slot::layer(0, slot::WO)).dim();
        let target: Array2<f64> = Array2::from_shape_fn(shape, |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let rank = shape.1;
        let alpha = 3.0;
        let down = &target / (alpha / rank as f64);
        let up = Array2::eye(rank);
        let tgt = AdapterTarget { name: "layer0.wo".into(), tensor: slot::layer(0, slot::WO), down, up };
        let a = LowRankAdapter::from_parts(rank, alpha, vec![tgt], p.config()).unwrap();
        let eff = apply_adapter(&p, &a).unwrap();
        let got = eff.tensor(slot::layer(0, slot::WO)) - p.tensor(slot::layer(0, slot::WO));
        assert!((&got - &target).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn frozen_base_receives_no_update() {
        let p = params(5, 11);
        let mut rng = rng_for(2, "adapter", &[]);
        let a = LowRankAdapter::init(&AdapterConfig::default(), p.config(), &mut rng).unwrap();
        let mut pol = Policy { params: p.clone(), adapter: Some(a) };
        let (_, g) = value_and_grad(&pol, Trainable::AdapterOnly { embeddings: false }, objective).unwrap();
        assert!(g.base.iter().all(|t| t.iter().all(|&v| v == 0.0)));
        // up starts at zero, so only up receives gradient at the first step
        assert!(g.adapter.iter().any(|(_, u)| u.iter().any(|&v| v != 0.0)));
        let mut opt = Adam::new(AdamConfig::default(), &pol.optimizer_shapes());
        pol.apply_update(&mut opt, 0.01, &g, Trainable::AdapterOnly { embeddings: false });
        assert_eq!(pol.params, p);
        let (_, g2) = value_and_grad(&pol, Trainable::AdapterOnly { embeddings: true }, objective).unwrap();
        for (i, t) in g2.base.iter().enumerate() {
            let nonzero = t.iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, p.config().is_embedding(i), "tensor {i}");
        }
    }

    #[test]
    fn mismatched_adapter_is_config_error() {
        let p = params(5, 12);
        let tgt = AdapterTarget {
            name: "layer0.wq".into(),
            tensor: slot::layer(0, slot::WQ),
            down: Array2::zeros((5, 2)),
            up: Array2::zeros((2, 6)),
        };
        let err = LowRankAdapter::from_parts(2, 3.0, vec![tgt], p.config()).unwrap_err();
        assert_eq!(err.kind(), ErrorKind::Config);
    }
}
