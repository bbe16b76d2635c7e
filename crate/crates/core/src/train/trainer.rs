use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::network::Model;
use super::optim::{momentum_update, sgd_step, MoCoState, OptConfig};
use crate::data::{Dataset, TransformationFamily};
use crate::error::{invalid, AbortSnapshot, Error, Result};
use crate::losses::{
    alignment_loss, ar_loss_empirical, contrastive_head, moco_head, sample_views, LossNodes,
    LossSpec, Objective, PositiveRule,
};
use crate::numcore::{
    check_gradients, Bindings, GradCheckReport, Graph, GraphBuilder, NodeId, ParamStore, Tensor,
};
use crate::seed;

/// Samples used for the per-epoch alignment diagnostics.
pub const DIAGNOSTIC_SAMPLES: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub ar_hat: f64,
    pub align: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub ar_hat: f64,
    pub align: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model,
    /// Diagnostics of the untrained encoder.
    pub initial: Diagnostics,
    pub history: Vec<EpochRecord>,
    pub moco: Option<MoCoState>,
}

struct Step {
    graph: Graph,
    nodes: LossNodes,
    key_out: Option<NodeId>,
}

fn build_step(
    model: &Model,
    spec: &LossSpec,
    n: usize,
    d: usize,
    queue_len: usize,
) -> Result<Step> {
    let m = spec.views;
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[n * m, d])?;
    let z = model.build_as(&mut b, x, "")?;
    if spec.objective == Objective::MocoArcl {
        let k = model.build_as(&mut b, x, "key")?;
        let p = b.shape_of(k)[1];
        let queue = b.input("queue", &[queue_len, p])?;
        let nodes = moco_head(&mut b, z, k, queue, n, m, spec.temperature, spec.lambda_reg)?;
        return Ok(Step {
            graph: b.finish()?,
            nodes,
            key_out: Some(k),
        });
    }
    let rule = PositiveRule::for_objective(spec.objective);
    let nodes = contrastive_head(&mut b, z, n, m, rule, spec.temperature, spec.lambda_reg)?;
    Ok(Step {
        graph: b.finish()?,
        nodes,
        key_out: None,
    })
}

/// Rows `[x_{i}^{(1)}, …, x_{i}^{(m)}]` for each batch sample, sample-major.
fn view_rows(
    ds: &Dataset,
    family: &TransformationFamily,
    ids: &[usize],
    m: usize,
    view_seed: u64,
) -> Result<Tensor> {
    let d = ds.dim();
    let mut data = Vec::with_capacity(ids.len() * m * d);
    for &i in ids {
        for t in sample_views(family, view_seed, i, m) {
            data.extend(t.apply(ds.sample(i))?);
        }
    }
    Tensor::matrix(ids.len() * m, d, data)
}

fn diagnostics(
    model: &Model,
    diag: &Dataset,
    family: &TransformationFamily,
    m: usize,
    seed: u64,
) -> Result<Diagnostics> {
    Ok(Diagnostics {
        ar_hat: ar_loss_empirical(&model.encoder, diag, family, m, seed)?,
        align: alignment_loss(&model.encoder, diag, family, 1, seed)?.mean,
    })
}

fn abort(model: &Model, epoch: usize, batch: usize, lr: f64, cause: impl Into<String>) -> Error {
    Error::NumericalAbort(Box::new(AbortSnapshot {
        epoch,
        batch,
        lr,
        cause: cause.into(),
        param_norms: model.param_norms(),
    }))
}

/// Mini-batch SGD on the contrastive objective in `spec`.
///
/// Every epoch shuffles the data, draws `m` transformations per sample for
/// each batch and steps on the batch loss. A trailing batch with a single
/// sample is skipped (it has no negatives). All randomness derives from
/// `opt.seed`.
pub fn train(
    mut model: Model,
    dataset: &Dataset,
    family: &TransformationFamily,
    spec: &LossSpec,
    opt: &OptConfig,
) -> Result<TrainOutput> {
    spec.validate()?;
    opt.validate()?;
    let d = dataset.dim();
    if model.encoder.input_dim() != d {
        return Err(invalid(
            "encoder",
            format!(
                "input dimension {} but data has {d}",
                model.encoder.input_dim()
            ),
        ));
    }
    if family.dim() != d {
        return Err(invalid(
            "family",
            format!("acts on dimension {} but data has {d}", family.dim()),
        ));
    }
    if dataset.n() < 2 {
        return Err(invalid("dataset", "need at least two samples"));
    }

    let m = spec.views;
    let shuffle_seed = seed::derive_seed(opt.seed, "shuffle");
    let view_seed = seed::derive_seed(opt.seed, "views");
    let diag_seed = seed::derive_seed(opt.seed, "diagnostics");

    let mut diag_ids: Vec<usize> = (0..dataset.n()).collect();
    diag_ids.shuffle(&mut seed::rng(diag_seed));
    diag_ids.truncate(DIAGNOSTIC_SAMPLES);
    diag_ids.sort_unstable();
    let diag = dataset.subset(&diag_ids)?;

    let mut moco = match (&spec.objective, &spec.queue) {
        (Objective::MocoArcl, Some(q)) => {
            let p = model
                .projector
                .as_ref()
                .map_or(model.encoder.output_dim(), |p| p.output_dim());
            Some(MoCoState::with_random_queue(
                model.params(),
                q.capacity,
                p,
                q.momentum,
                seed::derive_seed(opt.seed, "queue"),
            )?)
        }
        _ => None,
    };

    let initial = diagnostics(&model, &diag, family, m, diag_seed)?;
    let mut params = model.params();
    let mut velocity = ParamStore::new();
    let mut steps: BTreeMap<usize, Step> = BTreeMap::new();
    let mut history = Vec::with_capacity(opt.epochs);

    for epoch in 0..opt.epochs {
        let lr = opt.lr_at(epoch);
        let mut order: Vec<usize> = (0..dataset.n()).collect();
        order.shuffle(&mut seed::rng(seed::derive_index(
            shuffle_seed,
            epoch as u64,
        )));
        let epoch_views = seed::derive_index(view_seed, epoch as u64);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;

        for (bi, ids) in order.chunks(opt.batch_size).enumerate() {
            if ids.len() < 2 {
                continue;
            }
            let x = view_rows(dataset, family, ids, m, epoch_views)?;
            let queue_len = moco.as_ref().map_or(0, MoCoState::len);
            if !steps.contains_key(&ids.len()) {
                steps.insert(
                    ids.len(),
                    build_step(&model, spec, ids.len(), d, queue_len)?,
                );
            }
            let step = &steps[&ids.len()];

            let key_tagged;
            let queue_t;
            let mut bind = Bindings::new().with("x", &x);
            bind.extend(params.iter().map(|(k, v)| (k.clone(), v)));
            if let Some(state) = &moco {
                key_tagged = state
                    .key_params
                    .iter()
                    .map(|(k, v)| (format!("key.{k}"), v.clone()))
                    .collect::<ParamStore>();
                queue_t = state.queue_tensor();
                bind.extend(key_tagged.iter().map(|(k, v)| (k.clone(), v)));
                bind.bind("queue", &queue_t);
            }

            let fwd = match step.graph.forward(&bind) {
                Ok(f) => f,
                Err(e @ (Error::NonFinite { .. } | Error::DegenerateEmbedding { .. })) => {
                    model.set_params(&params);
                    return Err(abort(&model, epoch + 1, bi, lr, e.to_string()));
                }
                Err(e) => return Err(e),
            };
            let loss = fwd.value(step.nodes.loss).item()?;
            let grads = fwd.backward(step.nodes.loss)?;
            let keys = step.key_out.map(|k| fwd.value(k).clone());
            drop(fwd);

            let grads = grads
                .into_iter()
                .filter(|(k, _)| !k.starts_with("key."))
                .collect();
            sgd_step(&mut params, &grads, lr, opt.momentum, &mut velocity)?;
            if params
                .values()
                .any(|t| t.data().iter().any(|v| !v.is_finite()))
            {
                model.set_params(&params);
                return Err(abort(
                    &model,
                    epoch + 1,
                    bi,
                    lr,
                    "parameters became non-finite",
                ));
            }

            if let (Some(state), Some(keys)) = (moco.as_mut(), keys) {
                momentum_update(&mut state.key_params, &params, state.momentum)?;
                let enqueue_all = spec.queue.as_ref().is_some_and(|q| q.enqueue_all_views);
                let rows: Vec<usize> = (0..ids.len())
                    .flat_map(|i| {
                        if enqueue_all {
                            (i * m..(i + 1) * m).collect::<Vec<_>>()
                        } else {
                            vec![i * m]
                        }
                    })
                    .collect();
                let p = keys.shape()[1];
                let data = rows.iter().flat_map(|&r| keys.row(r).to_vec()).collect();
                state.update_queue(&Tensor::matrix(rows.len(), p, data)?)?;
            }
            loss_sum += loss;
            batches += 1;
        }

        model.set_params(&params);
        let diag_now = diagnostics(&model, &diag, family, m, diag_seed)?;
        history.push(EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / batches.max(1) as f64,
            ar_hat: diag_now.ar_hat,
            align: diag_now.align,
            lr,
        });
    }

    Ok(TrainOutput {
        model,
        initial,
        history,
        moco,
    })
}

/// Central-difference audit of the full training loss for one batch of view
/// rows `x` (`[N·m, d]`, sample-major). In MoCo mode `key` supplies the
/// momentum-encoder parameters and `queue` the negatives; both are held fixed.
pub fn batch_gradient_check(
    model: &Model,
    spec: &LossSpec,
    x: &Tensor,
    key: Option<&ParamStore>,
    queue: Option<&Tensor>,
    h: f64,
) -> Result<GradCheckReport> {
    spec.validate()?;
    let (rows, d) = (x.shape()[0], x.shape()[1]);
    if rows % spec.views != 0 {
        return Err(invalid(
            "x",
            format!("{rows} rows do not split into {} views", spec.views),
        ));
    }
    let n = rows / spec.views;
    let mut inputs = ParamStore::new();
    inputs.insert("x".into(), x.clone());
    let queue_len = match (spec.objective, key, queue) {
        (Objective::MocoArcl, Some(k), Some(q)) => {
            inputs.extend(k.iter().map(|(name, t)| (format!("key.{name}"), t.clone())));
            inputs.insert("queue".into(), q.clone());
            q.shape()[0]
        }
        (Objective::MocoArcl, ..) => {
            return Err(invalid("moco", "key parameters and a queue are required"))
        }
        _ => 0,
    };
    let step = build_step(model, spec, n, d, queue_len)?;
    check_gradients(&step.graph, &inputs, &model.params(), step.nodes.loss, h)
}

/// Long-format CSV rows `epoch,loss,ar_hat,align,lr`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,ar_hat,align,lr\n");
    for r in history {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?}\n",
            r.epoch, r.loss, r.ar_hat, r.align, r.lr
        ));
    }
    out
}
