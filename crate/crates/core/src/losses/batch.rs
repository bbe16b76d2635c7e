use super::spec::{LossSpec, Objective, ViewBatch};
use crate::error::{invalid, Result};
use crate::numcore::{Bindings, GraphBuilder, NodeId, Tensor};

/// How the positive similarity of a sample is formed from its view pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositiveRule {
    /// Similarity of views 1 and 2 only.
    FirstPair,
    /// Minimum over unordered pairs.
    Worst,
    /// Mean over unordered pairs.
    Average,
}

impl PositiveRule {
    pub fn for_objective(objective: Objective) -> Self {
        match objective {
            Objective::Infonce => PositiveRule::FirstPair,
            Objective::Arcl | Objective::MocoArcl => PositiveRule::Worst,
            Objective::Aal => PositiveRule::Average,
        }
    }
}

/// Nodes of a batch-loss head.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    /// Scalar batch loss.
    pub loss: NodeId,
    /// Positive similarity per sample, `[N]`.
    pub positive: NodeId,
    /// Log-sum-exp over scaled negatives per sample, `[N]`.
    pub negative_lse: NodeId,
    /// Min-selection node when the rule picks a worst pair.
    pub selection: Option<NodeId>,
}

/// Unordered view pairs `(j, k)`, `j < k`, in lexicographic order.
pub fn unordered_pairs(m: usize) -> Vec<(usize, usize)> {
    (0..m)
        .flat_map(|j| (j + 1..m).map(move |k| (j, k)))
        .collect()
}

/// Ordered view pairs `(j, l)`, `j != l`, in lexicographic order.
pub fn ordered_pairs(m: usize) -> Vec<(usize, usize)> {
    (0..m)
        .flat_map(|j| (0..m).filter(move |&l| l != j).map(move |l| (j, l)))
        .collect()
}

fn check_batch(n: usize, m: usize, tau: f64) -> Result<()> {
    if n < 2 {
        return Err(invalid("batch", "need at least two samples for negatives"));
    }
    if m < 2 {
        return Err(invalid("views", "a positive pair needs at least two views"));
    }
    if !(tau > 0.0) {
        return Err(invalid("temperature", "must be positive"));
    }
    Ok(())
}

fn finish_loss(
    b: &mut GraphBuilder,
    positive: NodeId,
    negatives: NodeId,
    tau: f64,
    lambda: f64,
) -> Result<(NodeId, NodeId)> {
    let scaled = b.scale(negatives, 1.0 / tau);
    let lse = b.log_sum_exp(scaled)?;
    let pos = b.scale(positive, -1.0 / tau);
    let reg = b.scale(lse, lambda);
    let per_sample = b.add(pos, reg)?;
    Ok((b.mean(per_sample), lse))
}

/// Single-branch contrastive head on unit rows `z` of shape `[N·m, p]`,
/// ordered sample-major.
///
/// Per sample, the loss is `−s⁺/τ + λ·log Σ exp(s⁻/τ)`, where the negatives
/// are the similarities of view 1 of the sample with views 1 and 2 of every
/// other sample.
pub fn contrastive_head(
    b: &mut GraphBuilder,
    z: NodeId,
    n: usize,
    m: usize,
    rule: PositiveRule,
    tau: f64,
    lambda: f64,
) -> Result<LossNodes> {
    check_batch(n, m, tau)?;
    let rows = n * m;
    let sims = b.pairwise_dot(z, z)?;

    let pairs = match rule {
        PositiveRule::FirstPair => vec![(0, 1)],
        PositiveRule::Worst | PositiveRule::Average => unordered_pairs(m),
    };
    let mut pos_idx = Vec::with_capacity(n * pairs.len());
    for i in 0..n {
        for &(j, k) in &pairs {
            pos_idx.push((i * m + j) * rows + i * m + k);
        }
    }
    let pair_sims = b.gather(sims, pos_idx, &[n, pairs.len()])?;
    let (positive, selection) = match rule {
        PositiveRule::FirstPair => (b.gather(pair_sims, (0..n).collect(), &[n])?, None),
        PositiveRule::Worst => {
            let s = b.min_select(pair_sims)?;
            (s, Some(s))
        }
        PositiveRule::Average => (b.row_mean(pair_sims)?, None),
    };

    let mut neg_idx = Vec::with_capacity(n * (2 * n - 2));
    for i in 0..n {
        for (j, view) in (0..n).filter(|&j| j != i).flat_map(|j| [(j, 0), (j, 1)]) {
            neg_idx.push(i * m * rows + j * m + view);
        }
    }
    let negatives = b.gather(sims, neg_idx, &[n, 2 * n - 2])?;
    let (loss, negative_lse) = finish_loss(b, positive, negatives, tau, lambda)?;
    Ok(LossNodes {
        loss,
        positive,
        negative_lse,
        selection,
    })
}

/// Two-branch head: `q` from the online encoder and `k` from the momentum
/// encoder, both `[N·m, p]`, plus a `[Q, p]` queue of negatives. Gradients
/// are blocked through `k` and the queue.
#[allow(clippy::too_many_arguments)]
pub fn moco_head(
    b: &mut GraphBuilder,
    q: NodeId,
    k: NodeId,
    queue: NodeId,
    n: usize,
    m: usize,
    tau: f64,
    lambda: f64,
) -> Result<LossNodes> {
    if n < 1 {
        return Err(invalid("batch", "empty batch"));
    }
    if m < 2 {
        return Err(invalid("views", "a positive pair needs at least two views"));
    }
    if !(tau > 0.0) {
        return Err(invalid("temperature", "must be positive"));
    }
    let qlen = b.shape_of(queue).first().copied().unwrap_or(0);
    if qlen == 0 {
        return Err(invalid("queue", "memory bank is empty"));
    }
    let rows = n * m;
    let k = b.stop_gradient(k);
    let queue = b.stop_gradient(queue);
    let cross = b.pairwise_dot(q, k)?;
    let pairs = ordered_pairs(m);
    let mut pos_idx = Vec::with_capacity(n * pairs.len());
    for i in 0..n {
        for &(j, l) in &pairs {
            pos_idx.push((i * m + j) * rows + i * m + l);
        }
    }
    let pair_sims = b.gather(cross, pos_idx, &[n, pairs.len()])?;
    let positive = b.min_select(pair_sims)?;

    let bank = b.pairwise_dot(q, queue)?;
    let mut neg_idx = Vec::with_capacity(n * qlen);
    for i in 0..n {
        neg_idx.extend((0..qlen).map(|c| i * m * qlen + c));
    }
    let negatives = b.gather(bank, neg_idx, &[n, qlen])?;
    let (loss, negative_lse) = finish_loss(b, positive, negatives, tau, lambda)?;
    Ok(LossNodes {
        loss,
        positive,
        negative_lse,
        selection: Some(positive),
    })
}

/// Value of a batch loss and the per-sample quantities behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub positive: Vec<f64>,
    pub negative_lse: Vec<f64>,
    /// Chosen view pair per sample, when the rule selects one.
    pub pairs: Option<Vec<(usize, usize)>>,
}

impl BatchLoss {
    /// Mean of `−s⁺/τ`.
    pub fn alignment_term(&self, tau: f64) -> f64 {
        -self.positive.iter().fold(0.0, |acc, s| acc + s) / (tau * self.positive.len() as f64)
    }

    /// Mean log-sum-exp over negatives.
    pub fn uniformity_term(&self) -> f64 {
        self.negative_lse.iter().fold(0.0, |acc, s| acc + s) / self.negative_lse.len() as f64
    }
}

fn evaluate_single(
    views: &ViewBatch,
    rule: PositiveRule,
    tau: f64,
    lambda: f64,
) -> Result<BatchLoss> {
    let (n, m, p) = (views.n(), views.views(), views.dim());
    let mut b = GraphBuilder::new();
    let z_in = b.input("z", &[n * m, p])?;
    let z = b.l2_normalize(z_in);
    let nodes = contrastive_head(&mut b, z, n, m, rule, tau, lambda)?;
    let graph = b.finish()?;
    let flat = views.flat();
    let fwd = graph.forward(&Bindings::new().with("z", &flat))?;
    let pairs = nodes.selection.map(|s| {
        let all = unordered_pairs(m);
        fwd.selection(s)
            .expect("selection recorded")
            .iter()
            .map(|&c| all[c])
            .collect()
    });
    Ok(BatchLoss {
        loss: fwd.value(nodes.loss).item()?,
        positive: fwd.value(nodes.positive).data().to_vec(),
        negative_lse: fwd.value(nodes.negative_lse).data().to_vec(),
        pairs,
    })
}

/// Two-view InfoNCE.
pub fn infonce_batch(views: &ViewBatch, tau: f64) -> Result<f64> {
    if views.views() != 2 {
        return Err(invalid(
            "views",
            format!("InfoNCE is a 2-view objective, got {}", views.views()),
        ));
    }
    Ok(evaluate_single(views, PositiveRule::FirstPair, tau, 1.0)?.loss)
}

/// Worst-pair loss and the selected `(j, k)` per sample.
pub fn arcl_batch(views: &ViewBatch, tau: f64) -> Result<(f64, Vec<(usize, usize)>)> {
    let out = evaluate_single(views, PositiveRule::Worst, tau, 1.0)?;
    Ok((out.loss, out.pairs.expect("worst rule selects")))
}

/// Average-alignment loss over unordered view pairs.
pub fn aal_batch(views: &ViewBatch, tau: f64) -> Result<f64> {
    Ok(evaluate_single(views, PositiveRule::Average, tau, 1.0)?.loss)
}

/// Full breakdown for any single-branch rule and weight `λ`.
pub fn batch_loss_terms(
    views: &ViewBatch,
    rule: PositiveRule,
    tau: f64,
    lambda: f64,
) -> Result<BatchLoss> {
    evaluate_single(views, rule, tau, lambda)
}

/// Loss selected by `spec` on a single-branch batch.
pub fn contrastive_loss(spec: &LossSpec, views: &ViewBatch) -> Result<f64> {
    spec.validate()?;
    if spec.objective == Objective::MocoArcl {
        return Err(invalid(
            "objective",
            "moco_arcl needs key views and a queue",
        ));
    }
    if views.views() != spec.views {
        return Err(invalid(
            "views",
            format!("spec has {} views, batch has {}", spec.views, views.views()),
        ));
    }
    let rule = PositiveRule::for_objective(spec.objective);
    Ok(evaluate_single(views, rule, spec.temperature, spec.lambda_reg)?.loss)
}

/// Momentum-encoder worst-pair loss. `queue` is `[Q, p]` with unit rows.
pub fn moco_arcl_batch(
    q_views: &ViewBatch,
    k_views: &ViewBatch,
    queue: &Tensor,
    tau: f64,
) -> Result<f64> {
    moco_arcl_terms(q_views, k_views, queue, tau, 1.0).map(|o| o.loss)
}

pub fn moco_arcl_terms(
    q_views: &ViewBatch,
    k_views: &ViewBatch,
    queue: &Tensor,
    tau: f64,
    lambda: f64,
) -> Result<BatchLoss> {
    let (n, m, p) = (q_views.n(), q_views.views(), q_views.dim());
    if k_views.embeddings().shape() != q_views.embeddings().shape() {
        return Err(invalid("k_views", "query and key batches differ in shape"));
    }
    if queue.rank() != 2 || queue.shape()[1] != p {
        return Err(invalid(
            "queue",
            format!("expected [Q, {p}], got {:?}", queue.shape()),
        ));
    }
    if queue.shape()[0] == 0 {
        return Err(invalid("queue", "memory bank is empty"));
    }
    let mut b = GraphBuilder::new();
    let q = b.input("q", &[n * m, p])?;
    let k = b.input("k", &[n * m, p])?;
    let bank = b.input("queue", queue.shape())?;
    let nodes = moco_head(&mut b, q, k, bank, n, m, tau, lambda)?;
    let graph = b.finish()?;
    let (qf, kf) = (q_views.flat(), k_views.flat());
    let fwd = graph.forward(
        &Bindings::new()
            .with("q", &qf)
            .with("k", &kf)
            .with("queue", queue),
    )?;
    let all = ordered_pairs(m);
    let pairs = fwd
        .selection(nodes.positive)
        .expect("selection recorded")
        .iter()
        .map(|&c| all[c])
        .collect();
    Ok(BatchLoss {
        loss: fwd.value(nodes.loss).item()?,
        positive: fwd.value(nodes.positive).data().to_vec(),
        negative_lse: fwd.value(nodes.negative_lse).data().to_vec(),
        pairs: Some(pairs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, m: usize, p: usize, rows: Vec<f64>) -> ViewBatch {
        ViewBatch::from_raw(Tensor::new(vec![n, m, p], rows).unwrap(), (0..n).collect()).unwrap()
    }

    #[test]
    fn identical_embeddings_give_log_two() {
        let v = batch(2, 2, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let l = infonce_batch(&v, 0.5).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_sample_rejected() {
        let v = batch(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(infonce_batch(&v, 0.5).is_err());
        assert!(arcl_batch(&v, 0.5).is_err());
    }

    #[test]
    fn selects_least_similar_pair() {
        // Three views with pairwise cosines 0.9 (0,1), 0.2 (0,2), 0.5 (1,2)
        // would need a consistent embedding; build one in R^3.
        let v0 = [1.0, 0.0, 0.0];
        let v1 = [0.9, (1.0f64 - 0.81).sqrt(), 0.0];
        let c = 0.2;
        let b = (0.5 - 0.9 * c) / v1[1];
        let v2 = [c, b, (1.0 - c * c - b * b).sqrt()];
        let mut rows = Vec::new();
        for v in [v0, v1, v2, v0, v1, v2] {
            rows.extend(v);
        }
        let vb = batch(2, 3, 3, rows);
        let (_, pairs) = arcl_batch(&vb, 0.5).unwrap();
        assert_eq!(pairs, vec![(0, 2), (0, 2)]);
    }

    #[test]
    fn two_views_make_all_rules_agree() {
        let v = batch(
            3,
            2,
            2,
            vec![1.0, 0.2, 0.3, 1.0, -1.0, 0.5, 0.1, 1.0, 0.7, -0.7, 0.2, 0.9],
        );
        let a = infonce_batch(&v, 0.3).unwrap();
        assert_eq!(a, arcl_batch(&v, 0.3).unwrap().0);
        assert_eq!(a, aal_batch(&v, 0.3).unwrap());
    }

    #[test]
    fn moco_orthogonal_queue() {
        let tau = 0.2;
        let q = batch(1, 2, 2, vec![1.0, 0.0, 1.0, 0.0]);
        let queue = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let l = moco_arcl_batch(&q, &q, &queue, tau).unwrap();
        assert!((l + 1.0 / tau).abs() < 1e-12);
        let empty = Tensor::zeros(&[0, 2]);
        assert!(moco_arcl_batch(&q, &q, &empty, tau).is_err());
    }

    #[test]
    fn lambda_scales_uniformity_only() {
        let v = batch(
            3,
            3,
            2,
            (0..18).map(|k| (k as f64 * 0.7).sin() + 0.1).collect(),
        );
        let one = batch_loss_terms(&v, PositiveRule::Worst, 0.5, 1.0).unwrap();
        let two = batch_loss_terms(&v, PositiveRule::Worst, 0.5, 2.0).unwrap();
        let expect = one.alignment_term(0.5) + 2.0 * one.uniformity_term();
        assert!((two.loss - expect).abs() < 1e-12);
    }
}
