//! The toy autoregressive policy: token + position embeddings, a stack of
//! causal attention/MLP mixing layers with RMS normalization, and an output
//! projection tied to the token embedding.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{gelu, log_sum_exp, Tape, Var};
use crate::error::{config_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub context: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            width: 64,
            layers: 2,
            mlp_hidden: 128,
            context: 256,
        }
    }
}

const PER_LAYER: usize = 8;
const LAYER_TENSORS: [&str; PER_LAYER] = ["wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2"];

/// Index of a named tensor within [`PolicyParams`].
pub mod slot {
    pub const TOKEN_EMBEDDING: usize = 0;
    pub const POSITION_EMBEDDING: usize = 1;
    pub fn layer(l: usize, which: usize) -> usize {
        2 + super::PER_LAYER * l + which
    }
    pub const WQ: usize = 0;
    pub const WK: usize = 1;
    pub const WV: usize = 2;
    pub const WO: usize = 3;
    pub const W1: usize = 4;
    pub const B1: usize = 5;
    pub const W2: usize = 6;
    pub const B2: usize = 7;
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.width == 0 || self.layers == 0 || self.mlp_hidden == 0 || self.context < 2 {
            return Err(config_err(format!("degenerate policy shape {self:?}")));
        }
        Ok(())
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["token_embedding".to_string(), "position_embedding".to_string()];
        for l in 0..self.layers {
            names.extend(LAYER_TENSORS.iter().map(|t| format!("layer{l}.{t}")));
        }
        names
    }

    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        let (d, h) = (self.width, self.mlp_hidden);
        let mut shapes = vec![(self.vocab_size, d), (self.context, d)];
        for _ in 0..self.layers {
            shapes.extend([(d, d), (d, d), (d, d), (d, d), (d, h), (1, h), (h, d), (1, d)]);
        }
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.tensor_shapes().iter().map(|(r, c)| r * c).sum()
    }

    pub fn is_embedding(&self, tensor: usize) -> bool {
        tensor == slot::TOKEN_EMBEDDING || tensor == slot::POSITION_EMBEDDING
    }
}

/// Full parameter set of the policy, one dense matrix per named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    config: PolicyConfig,
    tensors: Vec<Array2<f64>>,
}

impl PolicyParams {
    pub fn init<R: Rng>(config: PolicyConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.width as f64;
        let h = config.mlp_hidden as f64;
        let depth = (2.0 * config.layers as f64).sqrt();
        let names = config.tensor_names();
        let tensors = config
            .tensor_shapes()
            .into_iter()
            .zip(&names)
            .map(|(shape, name)| {
                let std = match name.rsplit('.').next().unwrap() {
                    "token_embedding" | "position_embedding" => 0.1,
                    "wq" | "wk" | "wv" | "w1" => 1.0 / d.sqrt(),
                    "wo" => 1.0 / d.sqrt() / depth,
                    "w2" => 1.0 / h.sqrt() / depth,
                    _ => 0.0,
                };
                if std == 0.0 {
                    Array2::zeros(shape)
                } else {
                    let n = Normal::new(0.0, std).unwrap();
                    Array2::from_shape_simple_fn(shape, || n.sample(rng))
                }
            })
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn from_tensors(config: PolicyConfig, tensors: Vec<Array2<f64>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.tensor_shapes();
        if tensors.len() != shapes.len()
            || tensors.iter().zip(&shapes).any(|(t, s)| t.dim() != *s)
        {
            return Err(config_err("tensor shapes do not match the policy config"));
        }
        if tensors.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Input("non-finite parameter".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn tensor(&self, i: usize) -> &Array2<f64> {
        &self.tensors[i]
    }

    /// Row-major little-endian bytes of every tensor, in slot order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.tensors
            .iter()
            .flat_map(|t| t.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>())
            .collect()
    }
}

/// Effective tensors of the policy recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundTensors {
    pub config: PolicyConfig,
    pub vars: Vec<Var>,
}

fn check_tokens(cfg: &PolicyConfig, tokens: &[usize]) -> Result<()> {
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Vocabulary(format!("token id {t} outside vocab of {}", cfg.vocab_size)));
    }
    if tokens.len() > cfg.context {
        return Err(Error::Encoding(format!(
            "sequence of {} tokens exceeds context {}",
            tokens.len(),
            cfg.context
        )));
    }
    Ok(())
}

/// Final normalized hidden states (`len x width`) for `tokens`.
pub fn hidden_states(tape: &mut Tape, p: &BoundTensors, tokens: &[usize]) -> Result<Var> {
    let cfg = p.config;
    check_tokens(&cfg, tokens)?;
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let te = tape.gather(p.vars[slot::TOKEN_EMBEDDING], tokens);
    let pe = tape.gather(p.vars[slot::POSITION_EMBEDDING], &positions);
    let mut x = tape.add(te, pe);
    let inv_sqrt_d = 1.0 / (cfg.width as f64).sqrt();
    for l in 0..cfg.layers {
        let w = |k: usize| p.vars[slot::layer(l, k)];
        let h = tape.rms_norm(x);
        let q = tape.matmul(h, w(slot::WQ));
        let k = tape.matmul(h, w(slot::WK));
        let v = tape.matmul(h, w(slot::WV));
        let scores = tape.matmul_bt(q, k);
        let scores = tape.scale(scores, inv_sqrt_d);
        let attn = tape.causal_softmax(scores);
        let mixed = tape.matmul(attn, v);
        let out = tape.matmul(mixed, w(slot::WO));
        x = tape.add(x, out);
        let h2 = tape.rms_norm(x);
        let pre = tape.matmul(h2, w(slot::W1));
        let pre = tape.add_row(pre, w(slot::B1));
        let act = tape.gelu(pre);
        let m = tape.matmul(act, w(slot::W2));
        let m = tape.add_row(m, w(slot::B2));
        x = tape.add(x, m);
    }
    Ok(tape.rms_norm(x))
}

/// Per-token log-probabilities (`n x 1`) of `completion` given `prompt`.
pub fn completion_logprobs(
    tape: &mut Tape,
    p: &BoundTensors,
    prompt: &[usize],
    completion: &[usize],
) -> Result<Var> {
    if prompt.is_empty() || completion.is_empty() {
        return Err(Error::Input("prompt and completion must be non-empty".into()));
    }
    check_tokens(&p.config, completion)?;
    if prompt.len() + completion.len() > p.config.context {
        return Err(Error::Encoding(format!(
            "prompt + completion of {} tokens exceeds context {}",
            prompt.len() + completion.len(),
            p.config.context
        )));
    }
    let mut input = prompt.to_vec();
    input.extend_from_slice(&completion[..completion.len() - 1]);
    let hidden = hidden_states(tape, p, &input)?;
    let rows = tape.slice_rows(hidden, prompt.len() - 1, input.len());
    let logits = tape.matmul_bt(rows, p.vars[slot::TOKEN_EMBEDDING]);
    Ok(tape.pick_log_softmax(logits, completion))
}

/// Full next-token logit rows for positions `prompt.len()-1 ..` of `prompt ++ completion`.
pub fn completion_logits(
    tape: &mut Tape,
    p: &BoundTensors,
    prompt: &[usize],
    completion: &[usize],
) -> Result<Var> {
    let mut input = prompt.to_vec();
    input.extend_from_slice(completion);
    let hidden = hidden_states(tape, p, &input)?;
    let rows = tape.slice_rows(hidden, prompt.len() - 1, input.len());
    Ok(tape.matmul_bt(rows, p.vars[slot::TOKEN_EMBEDDING]))
}

/// Records all of `params` on `tape` as constants.
pub fn bind_constant(tape: &mut Tape, params: &PolicyParams) -> BoundTensors {
    BoundTensors {
        config: params.config,
        vars: params.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
    }
}

/// Incremental decoder with a key/value cache; used for sampling and greedy decoding.
pub struct Decoder<'a> {
    params: &'a PolicyParams,
    keys: Vec<Vec<Array1<f64>>>,
    values: Vec<Vec<Array1<f64>>>,
    len: usize,
}

fn rms(x: &Array1<f64>) -> Array1<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + 1e-8).sqrt();
    x.mapv(|v| v * r)
}

fn vec_mat(x: &Array1<f64>, w: &Array2<f64>) -> Array1<f64> {
    x.view().insert_axis(Axis(0)).dot(w).remove_axis(Axis(0))
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a PolicyParams) -> Self {
        let l = params.config.layers;
        Self { params, keys: vec![Vec::new(); l], values: vec![Vec::new(); l], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds one token and returns next-token logits.
    pub fn step(&mut self, token: usize) -> Result<Array1<f64>> {
        let p = self.params;
        let cfg = p.config;
        if token >= cfg.vocab_size {
            return Err(Error::Vocabulary(format!("token id {token} outside vocab")));
        }
        if self.len >= cfg.context {
            return Err(Error::Encoding("decoder context exhausted".into()));
        }
        let mut x = &p.tensors[slot::TOKEN_EMBEDDING].row(token)
            + &p.tensors[slot::POSITION_EMBEDDING].row(self.len);
        let inv_sqrt_d = 1.0 / (cfg.width as f64).sqrt();
        for l in 0..cfg.layers {
            let w = |k: usize| &p.tensors[slot::layer(l, k)];
            let h = rms(&x);
            let q = vec_mat(&h, w(slot::WQ));
            self.keys[l].push(vec_mat(&h, w(slot::WK)));
            self.values[l].push(vec_mat(&h, w(slot::WV)));
            let scores: Vec<f64> = self.keys[l].iter().map(|k| q.dot(k) * inv_sqrt_d).collect();
            let m = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut mixed = Array1::zeros(cfg.width);
            for (wt, v) in e.iter().zip(&self.values[l]) {
                mixed.scaled_add(wt / z, v);
            }
            x = x + vec_mat(&mixed, w(slot::WO));
            let h2 = rms(&x);
            let pre = vec_mat(&h2, w(slot::W1)) + w(slot::B1).row(0);
            let act = pre.mapv(gelu);
            x = x + vec_mat(&act, w(slot::W2)) + w(slot::B2).row(0);
        }
        let h = rms(&x);
        self.len += 1;
        Ok(p.tensors[slot::TOKEN_EMBEDDING].dot(&h))
    }
}

pub fn log_softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let lse = log_sum_exp(logits.as_slice().expect("contiguous logits"));
    logits.mapv(|l| l - lse)
}
