use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Infonce,
    Arcl,
    Aal,
    MocoArcl,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Infonce => "infonce",
            Objective::Arcl => "arcl",
            Objective::Aal => "aal",
            Objective::MocoArcl => "moco_arcl",
        }
    }
}

/// Memory-bank settings for the momentum-encoder objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueConfig {
    pub capacity: usize,
    /// Blend coefficient of the key encoder, in `[0, 1)`.
    pub momentum: f64,
    /// Push the keys of all views instead of only the first.
    #[serde(default)]
    pub enqueue_all_views: bool,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub objective: Objective,
    pub temperature: f64,
    pub views: usize,
    /// Weight on the log-sum-exp term; 1 reproduces the usual composite.
    #[serde(default = "one")]
    pub lambda_reg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue: Option<QueueConfig>,
}

impl LossSpec {
    pub fn new(objective: Objective, temperature: f64, views: usize) -> Self {
        Self {
            objective,
            temperature,
            views,
            lambda_reg: 1.0,
            queue: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(invalid("temperature", "must be positive and finite"));
        }
        if self.views < 2 {
            return Err(invalid("views", "a positive pair needs at least two views"));
        }
        if !(self.lambda_reg >= 0.0) || !self.lambda_reg.is_finite() {
            return Err(invalid("lambda_reg", "must be non-negative and finite"));
        }
        match self.objective {
            Objective::Infonce if self.views != 2 => Err(invalid(
                "views",
                format!("InfoNCE is a 2-view objective, got views = {}", self.views),
            )),
            Objective::MocoArcl => {
                let q = self
                    .queue
                    .as_ref()
                    .ok_or_else(|| invalid("queue", "moco_arcl needs a queue configuration"))?;
                if q.capacity == 0 {
                    return Err(invalid("queue.capacity", "must be positive"));
                }
                if !(0.0..1.0).contains(&q.momentum) {
                    return Err(invalid("queue.momentum", "must lie in [0, 1)"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Embeddings `z[i, j]` of view `j` of sample `i`, shape `[N, m, p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    embeddings: Tensor,
    origin_ids: Vec<usize>,
}

pub const UNIT_TOLERANCE: f64 = 1e-9;

impl ViewBatch {
    pub fn new(embeddings: Tensor, origin_ids: Vec<usize>) -> Result<Self> {
        let &[n, m, p] = embeddings.shape() else {
            return Err(invalid(
                "embeddings",
                format!("expected [N, m, p], got {:?}", embeddings.shape()),
            ));
        };
        if m < 2 {
            return Err(invalid("views", "a positive pair needs at least two views"));
        }
        if p == 0 || n == 0 {
            return Err(invalid("embeddings", "empty batch"));
        }
        if origin_ids.len() != n {
            return Err(invalid(
                "origin_ids",
                format!("{} ids for {n} samples", origin_ids.len()),
            ));
        }
        for (r, row) in embeddings.data().chunks(p).enumerate() {
            let norm = row.iter().fold(0.0, |acc, a| acc + a * a).sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(invalid(
                    "embeddings",
                    format!("row {r} (sample {}, view {}) has norm {norm}", r / m, r % m),
                ));
            }
        }
        Ok(Self {
            embeddings,
            origin_ids,
        })
    }

    /// Normalizes every row before wrapping.
    pub fn from_raw(raw: Tensor, origin_ids: Vec<usize>) -> Result<Self> {
        let shape = raw.shape().to_vec();
        if shape.len() != 3 {
            return Err(invalid(
                "embeddings",
                format!("expected [N, m, p], got {shape:?}"),
            ));
        }
        let unit = crate::numcore::l2_normalize(&raw.reshape(&[shape[0] * shape[1], shape[2]])?)?;
        Self::new(unit.reshape(&shape)?, origin_ids)
    }

    pub fn n(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn views(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[2]
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn origin_ids(&self) -> &[usize] {
        &self.origin_ids
    }

    pub fn z(&self, i: usize, j: usize) -> &[f64] {
        let (m, p) = (self.views(), self.dim());
        &self.embeddings.data()[(i * m + j) * p..(i * m + j + 1) * p]
    }

    /// Rows ordered sample-major, shape `[N·m, p]`.
    pub fn flat(&self) -> Tensor {
        self.embeddings
            .reshape(&[self.n() * self.views(), self.dim()])
            .expect("element count unchanged")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infonce_rejects_extra_views() {
        assert!(LossSpec::new(Objective::Infonce, 0.5, 2).validate().is_ok());
        let err = LossSpec::new(Objective::Infonce, 0.5, 4)
            .validate()
            .unwrap_err();
        assert!(err.to_string().contains("2-view"));
        assert!(LossSpec::new(Objective::Arcl, 0.0, 4).validate().is_err());
        assert!(LossSpec::new(Objective::Arcl, 0.5, 1).validate().is_err());
        assert!(LossSpec::new(Objective::MocoArcl, 0.5, 2)
            .validate()
            .is_err());
    }

    #[test]
    fn view_batch_checks_norms() {
        let ok = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(ViewBatch::new(ok, vec![0]).is_ok());
        let bad = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.1]).unwrap();
        assert!(ViewBatch::new(bad, vec![0]).is_err());
        let one_view = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        assert!(ViewBatch::new(one_view, vec![0]).is_err());
    }
}
