use std::collections::VecDeque;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numcore::{Gradients, ParamStore, Tensor};
use crate::seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` at epoch 1 towards 0 after the last epoch.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptConfig {
    pub lr: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(invalid("lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum", "must lie in [0, 1)"));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch_size", "need at least two samples per batch"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "need at least one epoch"));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Heavy-ball step: `v ← μv + g`, `θ ← θ − lr·v`. Missing buffer entries
/// start at zero.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    buffer: &mut ParamStore,
) -> Result<()> {
    for (name, g) in grads {
        let theta = params
            .get_mut(name)
            .ok_or_else(|| invalid("gradients", format!("no parameter named `{name}`")))?;
        if theta.shape() != g.shape() {
            return Err(invalid(
                "gradients",
                format!(
                    "`{name}`: parameter {:?} vs gradient {:?}",
                    theta.shape(),
                    g.shape()
                ),
            ));
        }
        let v = buffer
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        if v.shape() != g.shape() {
            return Err(invalid(
                "momentum_buffer",
                format!("`{name}` has shape {:?}", v.shape()),
            ));
        }
        for ((t, vi), gi) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = momentum * *vi + gi;
            *t -= lr * *vi;
        }
    }
    Ok(())
}

/// `k ← c·k + (1 − c)·q` for every entry.
pub fn momentum_update(key: &mut ParamStore, query: &ParamStore, m_coef: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m_coef) {
        return Err(invalid("m_coef", format!("{m_coef} outside [0, 1)")));
    }
    if key.len() != query.len() {
        return Err(invalid("key_params", "key and query parameter sets differ"));
    }
    for (name, q) in query {
        let k = key
            .get_mut(name)
            .ok_or_else(|| invalid("key_params", format!("missing `{name}`")))?;
        if k.shape() != q.shape() {
            return Err(invalid("key_params", format!("`{name}` shape mismatch")));
        }
        for (ki, qi) in k.data_mut().iter_mut().zip(q.data()) {
            *ki = m_coef * *ki + (1.0 - m_coef) * qi;
        }
    }
    Ok(())
}

/// Momentum encoder parameters and the FIFO memory bank of unit keys.
#[derive(Clone, Debug, PartialEq)]
pub struct MoCoState {
    pub key_params: ParamStore,
    queue: VecDeque<Vec<f64>>,
    capacity: usize,
    dim: usize,
    pub momentum: f64,
}

impl MoCoState {
    /// An empty bank.
    pub fn new(key_params: ParamStore, capacity: usize, dim: usize, momentum: f64) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(invalid("queue", "capacity and dimension must be positive"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid("momentum", "must lie in [0, 1)"));
        }
        Ok(Self {
            key_params,
            queue: VecDeque::with_capacity(capacity),
            capacity,
            dim,
            momentum,
        })
    }

    /// A bank filled to capacity with random unit vectors.
    pub fn with_random_queue(
        key_params: ParamStore,
        capacity: usize,
        dim: usize,
        momentum: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut state = Self::new(key_params, capacity, dim, momentum)?;
        let mut rng = seed::rng(seed);
        for _ in 0..capacity {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().fold(0.0, |acc, a| acc + a * a).sqrt();
            state.queue.push_back(v.iter().map(|a| a / n).collect());
        }
        Ok(state)
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &[f64]> {
        self.queue.iter().map(Vec::as_slice)
    }

    /// Queue contents as a `[len, p]` tensor, oldest first.
    pub fn queue_tensor(&self) -> Tensor {
        let data = self.queue.iter().flatten().copied().collect();
        Tensor::matrix(self.queue.len(), self.dim, data).expect("finite unit keys")
    }

    /// Appends the rows of `keys` in order, evicting the oldest entries past
    /// capacity. Rejects the whole insertion if any row is not unit-norm.
    pub fn update_queue(&mut self, keys: &Tensor) -> Result<()> {
        if keys.numel() == 0 {
            return Ok(());
        }
        let (_, p) = keys.rows_cols();
        if p != self.dim {
            return Err(invalid(
                "keys",
                format!("key dimension {p}, queue holds {}", self.dim),
            ));
        }
        for (r, row) in keys.rows().enumerate() {
            let n = row.iter().fold(0.0, |acc, a| acc + a * a).sqrt();
            if (n - 1.0).abs() > crate::losses::UNIT_TOLERANCE {
                return Err(invalid("keys", format!("row {r} has norm {n}")));
            }
        }
        for row in keys.rows() {
            self.queue.push_back(row.to_vec());
            if self.queue.len() > self.capacity {
                self.queue.pop_front();
            }
        }
        Ok(())
    }
}
