//! Low-rank additive adapters: `W_eff = W + (alpha / rank) * down * up`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::model::{PolicyConfig, PolicyParams};
use crate::error::{config_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Tensor names to adapt; empty means every mixing-layer weight matrix.
    pub targets: Vec<String>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        // alpha / rank = 1.5
        Self { rank: 4, alpha: 6.0, targets: Vec::new() }
    }
}

impl AdapterConfig {
    pub fn resolve_targets(&self, cfg: &PolicyConfig) -> Result<Vec<(String, usize)>> {
        let names = cfg.tensor_names();
        let wanted: Vec<String> = if self.targets.is_empty() {
            names
                .iter()
                .filter(|n| ["wq", "wk", "wv", "wo", "w1", "w2"].iter().any(|s| n.ends_with(&format!(".{s}"))))
                .cloned()
                .collect()
        } else {
            self.targets.clone()
        };
        wanted
            .into_iter()
            .map(|w| {
                let idx = names
                    .iter()
                    .position(|n| *n == w)
                    .ok_or_else(|| config_err(format!("unknown adapter target {w}")))?;
                Ok((w, idx))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterTarget {
    pub name: String,
    pub tensor: usize,
    pub down: Array2<f64>,
    pub up: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    rank: usize,
    alpha: f64,
    targets: Vec<AdapterTarget>,
}

impl LowRankAdapter {
    /// Random `down`, zero `up`: the adapted policy starts identical to the base.
    pub fn init<R: Rng>(cfg: &AdapterConfig, policy: &PolicyConfig, rng: &mut R) -> Result<Self> {
        if cfg.rank == 0 || !cfg.alpha.is_finite() {
            return Err(config_err("adapter rank must be >= 1 and alpha finite"));
        }
        let shapes = policy.tensor_shapes();
        let targets = cfg
            .resolve_targets(policy)?
            .into_iter()
            .map(|(name, tensor)| {
                let (rows, cols) = shapes[tensor];
                let n = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).unwrap();
                AdapterTarget {
                    name,
                    tensor,
                    down: Array2::from_shape_simple_fn((rows, cfg.rank), || n.sample(rng)),
                    up: Array2::zeros((cfg.rank, cols)),
                }
            })
            .collect();
        Ok(Self { rank: cfg.rank, alpha: cfg.alpha, targets })
    }

    pub fn from_parts(rank: usize, alpha: f64, targets: Vec<AdapterTarget>, policy: &PolicyConfig) -> Result<Self> {
        if rank == 0 {
            return Err(config_err("adapter rank must be >= 1"));
        }
        let a = Self { rank, alpha, targets };
        a.check_shapes(policy)?;
        Ok(a)
    }

    pub fn check_shapes(&self, policy: &PolicyConfig) -> Result<()> {
        let shapes = policy.tensor_shapes();
        let names = policy.tensor_names();
        for t in &self.targets {
            let Some(&(rows, cols)) = shapes.get(t.tensor) else {
                return Err(config_err(format!("adapter target {} out of range", t.name)));
            };
            if names[t.tensor] != t.name
                || t.down.dim() != (rows, self.rank)
                || t.up.dim() != (self.rank, cols)
            {
                return Err(config_err(format!(
                    "adapter for {} has shapes {:?}x{:?}, base is {rows}x{cols} at rank {}",
                    t.name,
                    t.down.dim(),
                    t.up.dim(),
                    self.rank
                )));
            }
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn targets(&self) -> &[AdapterTarget] {
        &self.targets
    }

    pub fn targets_mut(&mut self) -> &mut [AdapterTarget] {
        &mut self.targets
    }

    pub fn delta(&self, target: &AdapterTarget) -> Array2<f64> {
        target.down.dot(&target.up) * self.scaling()
    }
}

/// Materializes the effective parameters; `base` is not modified.
pub fn apply_adapter(base: &PolicyParams, adapter: &LowRankAdapter) -> Result<PolicyParams> {
    adapter.check_shapes(base.config())?;
    let mut eff = base.clone();
    for t in adapter.targets() {
        eff.tensors_mut()[t.tensor] += &adapter.delta(t);
    }
    Ok(eff)
}
