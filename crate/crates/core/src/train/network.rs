use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::losses::Representation;
use crate::numcore::{Bindings, GraphBuilder, NodeId, ParamStore, Tensor};
use crate::seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Linear,
    Mlp2 { hidden: usize },
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub architecture: Architecture,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "yes")]
    pub normalize_output: bool,
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.output_dim == 0 {
            return Err(invalid("output_dim", "must be positive"));
        }
        if let Architecture::Mlp2 { hidden: 0 } = self.architecture {
            return Err(invalid("hidden", "must be positive"));
        }
        Ok(())
    }

    /// `(out, in)` for each affine layer.
    fn layer_shapes(&self, input_dim: usize) -> Vec<(usize, usize)> {
        match self.architecture {
            Architecture::Linear => vec![(self.output_dim, input_dim)],
            Architecture::Mlp2 { hidden } => vec![(hidden, input_dim), (self.output_dim, hidden)],
        }
    }
}

/// A small feed-forward map with named parameters `"{prefix}.l{k}.w"` and
/// `"{prefix}.l{k}.b"`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    prefix: String,
    spec: NetSpec,
    input_dim: usize,
    params: ParamStore,
}

/// Backbone used for downstream features.
pub type Encoder = Network;
/// Head stacked on the encoder during pre-training only.
pub type Projector = Network;

impl Network {
    /// Entries uniform in `±1/√fan_in`.
    pub fn init(prefix: &str, spec: NetSpec, input_dim: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if input_dim == 0 {
            return Err(invalid("input_dim", "must be positive"));
        }
        let mut rng = seed::rng(seed::derive_seed(seed, prefix));
        let mut params = ParamStore::new();
        for (k, (out, inp)) in spec.layer_shapes(input_dim).into_iter().enumerate() {
            let bound = 1.0 / (inp as f64).sqrt();
            let mut draw = |len: usize| -> Vec<f64> {
                (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
            };
            let w = draw(out * inp);
            let b = draw(out);
            params.insert(
                format!("{prefix}.l{}.w", k + 1),
                Tensor::matrix(out, inp, w)?,
            );
            params.insert(format!("{prefix}.l{}.b", k + 1), Tensor::vector(b)?);
        }
        Ok(Self {
            prefix: prefix.to_string(),
            spec,
            input_dim,
            params,
        })
    }

    /// Rebuilds a network from stored parameters, checking every shape.
    pub fn from_params(
        prefix: &str,
        spec: NetSpec,
        input_dim: usize,
        params: ParamStore,
    ) -> Result<Self> {
        let template = Self::init(prefix, spec, input_dim, 0)?;
        if params.len() != template.params.len() {
            return Err(invalid(
                "params",
                format!(
                    "expected {} tensors, got {}",
                    template.params.len(),
                    params.len()
                ),
            ));
        }
        for (name, t) in &template.params {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(invalid(
                        "params",
                        format!(
                            "`{name}` has shape {:?}, expected {:?}",
                            p.shape(),
                            t.shape()
                        ),
                    ))
                }
                None => return Err(invalid("params", format!("missing `{name}`"))),
            }
        }
        Ok(Self { params, ..template })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Adds this network to `b` on top of `x`. Parameters are named with
    /// `name_prefix` in place of the network's own prefix, so a second copy
    /// (e.g. a momentum encoder) can live in the same graph.
    pub fn build_as(&self, b: &mut GraphBuilder, x: NodeId, name_prefix: &str) -> Result<NodeId> {
        let mut h = x;
        let shapes = self.spec.layer_shapes(self.input_dim);
        let last = shapes.len();
        for (k, (out, inp)) in shapes.into_iter().enumerate() {
            let w = b.param(&format!("{name_prefix}.l{}.w", k + 1), &[out, inp])?;
            let bias = b.param(&format!("{name_prefix}.l{}.b", k + 1), &[out])?;
            h = b.affine(h, w, bias)?;
            if k + 1 < last {
                h = match self.spec.activation {
                    Activation::Tanh => b.tanh(h),
                    Activation::Relu => b.relu(h),
                };
            }
        }
        Ok(if self.spec.normalize_output {
            b.l2_normalize(h)
        } else {
            h
        })
    }

    pub fn build(&self, b: &mut GraphBuilder, x: NodeId) -> Result<NodeId> {
        self.build_as(b, x, &self.prefix.clone())
    }

    /// Parameters renamed from this network's prefix to `name_prefix`.
    pub fn params_as(&self, name_prefix: &str) -> ParamStore {
        rename(&self.params, &self.prefix, name_prefix)
    }

    /// Output before the final normalization.
    pub fn pre_normalized(&self, x: &Tensor) -> Result<Tensor> {
        let raw = Network {
            spec: NetSpec {
                normalize_output: false,
                ..self.spec.clone()
            },
            ..self.clone()
        };
        raw.forward(x)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = match x.shape() {
            &[n, d] => (n, d),
            s => return Err(invalid("x", format!("expected [n, d], got {s:?}"))),
        };
        if d != self.input_dim {
            return Err(invalid(
                "x",
                format!("network expects dimension {}, got {d}", self.input_dim),
            ));
        }
        let mut b = GraphBuilder::new();
        let xin = b.input("x", &[n, d])?;
        let out = self.build(&mut b, xin)?;
        let graph = b.finish()?;
        let mut bind = Bindings::new().with("x", x);
        bind.extend(self.params.iter().map(|(k, v)| (k.clone(), v)));
        graph.evaluate(&bind, out)
    }

    /// Product of the layer spectral norms (tanh and ReLU are 1-Lipschitz).
    /// For a normalized output this is divided by the smallest
    /// pre-normalization norm over `reference`, which bounds the local
    /// Lipschitz constant at those points.
    pub fn lipschitz_estimate(&self, reference: Option<&Tensor>) -> Result<f64> {
        let mut product = 1.0;
        for (k, _) in self.spec.layer_shapes(self.input_dim).iter().enumerate() {
            product *= spectral_norm(&self.params[&format!("{}.l{}.w", self.prefix, k + 1)]);
        }
        if !self.spec.normalize_output {
            return Ok(product);
        }
        let reference = reference
            .ok_or_else(|| invalid("reference", "normalized outputs need reference points"))?;
        let pre = self.pre_normalized(reference)?;
        let min_norm = pre
            .rows()
            .map(|r| r.iter().fold(0.0, |acc, v| acc + v * v).sqrt())
            .fold(f64::INFINITY, f64::min);
        Ok(product / min_norm)
    }

    /// L2 norm of every parameter tensor, by name.
    pub fn param_norms(&self) -> Vec<(String, f64)> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.norm()))
            .collect()
    }
}

impl Representation for Network {
    fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

pub(crate) fn rename(params: &ParamStore, from: &str, to: &str) -> ParamStore {
    params
        .iter()
        .map(|(k, v)| {
            let rest = k.strip_prefix(from).unwrap_or(k);
            (format!("{to}{rest}"), v.clone())
        })
        .collect()
}

/// Largest singular value of a rank-2 tensor.
pub fn spectral_norm(w: &Tensor) -> f64 {
    let (r, c) = w.rows_cols();
    let m = DMatrix::from_row_slice(r, c, w.data());
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

/// Encoder followed by an optional projector.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub projector: Option<Projector>,
}

impl Model {
    pub fn new(encoder: Encoder, projector: Option<Projector>) -> Result<Self> {
        if let Some(p) = &projector {
            if p.input_dim() != encoder.output_dim() {
                return Err(invalid(
                    "projector",
                    format!(
                        "projector input {} != encoder output {}",
                        p.input_dim(),
                        encoder.output_dim()
                    ),
                ));
            }
            if p.prefix() == encoder.prefix() {
                return Err(invalid(
                    "projector",
                    "encoder and projector share a parameter prefix",
                ));
            }
        }
        Ok(Self { encoder, projector })
    }

    /// Projected output, always L2-normalized for the contrastive head.
    pub fn build_as(&self, b: &mut GraphBuilder, x: NodeId, tag: &str) -> Result<NodeId> {
        let name = |p: &str| {
            if tag.is_empty() {
                p.to_string()
            } else {
                format!("{tag}.{p}")
            }
        };
        let mut h = self.encoder.build_as(b, x, &name(self.encoder.prefix()))?;
        if let Some(p) = &self.projector {
            h = p.build_as(b, h, &name(p.prefix()))?;
        }
        let last_normalizes = match &self.projector {
            Some(p) => p.spec().normalize_output,
            None => self.encoder.spec().normalize_output,
        };
        Ok(if last_normalizes {
            h
        } else {
            b.l2_normalize(h)
        })
    }

    pub fn params(&self) -> ParamStore {
        let mut all = self.encoder.params().clone();
        if let Some(p) = &self.projector {
            all.extend(p.params().clone());
        }
        all
    }

    /// Parameters under the names used by `build_as(.., tag)`.
    pub fn params_tagged(&self, tag: &str) -> ParamStore {
        if tag.is_empty() {
            return self.params();
        }
        self.params()
            .into_iter()
            .map(|(k, v)| (format!("{tag}.{k}"), v))
            .collect()
    }

    /// Writes `params` (keyed by untagged names) back into the networks.
    pub fn set_params(&mut self, params: &ParamStore) {
        for (k, v) in params {
            if let Some(slot) = self.encoder.params_mut().get_mut(k) {
                *slot = v.clone();
            } else if let Some(slot) = self
                .projector
                .as_mut()
                .and_then(|p| p.params_mut().get_mut(k))
            {
                *slot = v.clone();
            }
        }
    }

    pub fn param_norms(&self) -> Vec<(String, f64)> {
        self.params()
            .iter()
            .map(|(k, v)| (k.clone(), v.norm()))
            .collect()
    }
}
