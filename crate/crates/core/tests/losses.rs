mod common;

use common::{gaussian_dataset, normal_tensor, random_affine_grid, random_encoder, rng, unit_rows};
use contrastlab_core::data::{
    make_toy_axis_dataset, toy_axis_family, FamilyKind, FamilySpec, ParamDomain, Sampling,
    TransformationFamily,
};
use contrastlab_core::eval::ToyEncoder;
use contrastlab_core::losses::{
    aal_batch, alignment_loss, alignment_loss_grid, ar_loss_exact, arcl_batch, batch_loss_terms,
    empirical_ar_curve, infonce_batch, moco_arcl_terms, moco_head, LossSpec, Objective,
    PositiveRule, QueueConfig, ViewBatch, ViewMode,
};
use contrastlab_core::numcore::{Bindings, GraphBuilder, ParamStore, Tensor};
use contrastlab_core::seed::Rng;
use contrastlab_core::train::{batch_gradient_check, Model, Network};
use proptest::prelude::*;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn random_batch(n: usize, m: usize, p: usize, r: &mut Rng) -> ViewBatch {
    ViewBatch::new(
        Tensor::new(vec![n, m, p], unit_rows(n * m, p, r)).unwrap(),
        (0..n).collect(),
    )
    .unwrap()
}

/// Direct evaluation of the batch loss from its per-sample definition.
fn reference_loss(v: &ViewBatch, rule: PositiveRule, tau: f64) -> f64 {
    let (n, m) = (v.n(), v.views());
    let mut total = 0.0;
    for i in 0..n {
        let mut pair_sims = Vec::new();
        for j in 0..m {
            for k in j + 1..m {
                pair_sims.push(dot(v.z(i, j), v.z(i, k)));
            }
        }
        let pos = match rule {
            PositiveRule::FirstPair => dot(v.z(i, 0), v.z(i, 1)),
            PositiveRule::Worst => pair_sims.iter().copied().fold(f64::INFINITY, f64::min),
            PositiveRule::Average => pair_sims.iter().sum::<f64>() / pair_sims.len() as f64,
        };
        let negs: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .flat_map(|j| {
                [
                    dot(v.z(i, 0), v.z(j, 0)) / tau,
                    dot(v.z(i, 0), v.z(j, 1)) / tau,
                ]
            })
            .collect();
        total += -pos / tau + lse(&negs);
    }
    total / n as f64
}

#[test]
fn batch_losses_match_direct_evaluation() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let n = 2 + (seed as usize % 7);
        let m = 2 + (seed as usize % 5);
        let v = random_batch(n, m, 3, &mut r);
        let tau = 0.2 + 0.1 * seed as f64;
        let (arcl, _) = arcl_batch(&v, tau).unwrap();
        assert!((arcl - reference_loss(&v, PositiveRule::Worst, tau)).abs() < 1e-12);
        assert!(
            (aal_batch(&v, tau).unwrap() - reference_loss(&v, PositiveRule::Average, tau)).abs()
                < 1e-12
        );
        let terms = batch_loss_terms(&v, PositiveRule::Average, tau, 1.0).unwrap();
        for i in 0..n {
            let mut s = 0.0;
            let mut c = 0;
            for j in 0..m {
                for k in j + 1..m {
                    s += dot(v.z(i, j), v.z(i, k));
                    c += 1;
                }
            }
            assert!((terms.positive[i] - s / c as f64).abs() < 1e-14);
        }
        let two = random_batch(n, 2, 3, &mut r);
        assert!(
            (infonce_batch(&two, tau).unwrap()
                - reference_loss(&two, PositiveRule::FirstPair, tau))
            .abs()
                < 1e-12
        );
    }
}

#[test]
fn high_temperature_limit_is_log_negative_count() {
    let mut r = rng(2);
    for n in [2, 5, 16] {
        let v = random_batch(n, 2, 4, &mut r);
        let loss = infonce_batch(&v, 1e6).unwrap();
        let want = ((2 * n - 2) as f64).ln();
        assert!((loss - want).abs() < 1e-5, "n={n}: {loss} vs {want}");
    }
}

#[test]
fn moco_selection_and_loss_match_brute_force() {
    for seed in 0..20 {
        let mut r = rng(50 + seed);
        let (n, m, p, q) = (3 + seed as usize % 4, 2 + seed as usize % 4, 4, 5);
        let qv = random_batch(n, m, p, &mut r);
        let kv = random_batch(n, m, p, &mut r);
        let queue = Tensor::matrix(q, p, unit_rows(q, p, &mut r)).unwrap();
        let tau = 0.3;
        let out = moco_arcl_terms(&qv, &kv, &queue, tau, 1.0).unwrap();
        let mut want = 0.0;
        for i in 0..n {
            let mut best = (f64::INFINITY, (0, 0));
            for j in 0..m {
                for l in 0..m {
                    let s = dot(qv.z(i, j), kv.z(i, l));
                    if j != l && s < best.0 {
                        best = (s, (j, l));
                    }
                }
            }
            assert_eq!(out.pairs.as_ref().unwrap()[i], best.1);
            let negs: Vec<f64> = queue.rows().map(|k| dot(qv.z(i, 0), k) / tau).collect();
            want += -best.0 / tau + lse(&negs);
        }
        assert!((out.loss - want / n as f64).abs() < 1e-12);
    }
}

fn two_layer_model(d: usize, seed: u64) -> Model {
    let enc = random_encoder(d, 6, 5, seed);
    let proj = Network::init("proj", common::mlp_spec(4, 3), 5, seed + 1).unwrap();
    Model::new(enc, Some(proj)).unwrap()
}

#[test]
fn loss_gradients_through_encoder_and_projector() {
    let objectives = [
        (Objective::Infonce, 2),
        (Objective::Arcl, 4),
        (Objective::Aal, 4),
        (Objective::MocoArcl, 3),
    ];
    for (objective, m) in objectives {
        for seed in 0..20 {
            let mut r = rng(900 + seed);
            let (n, d) = (4, 3);
            let model = two_layer_model(d, seed);
            let x = normal_tensor(&[n * m, d], &mut r);
            let mut spec = LossSpec::new(objective, 0.5, m);
            let (key, queue) = if objective == Objective::MocoArcl {
                spec.queue = Some(QueueConfig {
                    capacity: 6,
                    momentum: 0.9,
                    enqueue_all_views: false,
                });
                let key = two_layer_model(d, seed + 100).params();
                (
                    Some(key),
                    Some(Tensor::matrix(6, 3, unit_rows(6, 3, &mut r)).unwrap()),
                )
            } else {
                (None, None)
            };
            let rep = batch_gradient_check(&model, &spec, &x, key.as_ref(), queue.as_ref(), 1e-5)
                .unwrap();
            assert!(rep.checked > 0);
            assert!(
                rep.rel_error < 1e-5,
                "{objective:?} seed {seed}: {}",
                rep.rel_error
            );
        }
    }
}

#[test]
fn key_branch_receives_no_gradient() {
    let mut r = rng(8);
    let model = two_layer_model(3, 1);
    let key_model = two_layer_model(3, 2);
    let (n, m) = (3, 3);
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[n * m, 3]).unwrap();
    let q = model.build_as(&mut b, x, "").unwrap();
    let k = key_model.build_as(&mut b, x, "key").unwrap();
    let bank = b.input("queue", &[4, 3]).unwrap();
    let nodes = moco_head(&mut b, q, k, bank, n, m, 0.5, 1.0).unwrap();
    let g = b.finish().unwrap();
    let xv = normal_tensor(&[n * m, 3], &mut r);
    let queue = Tensor::matrix(4, 3, unit_rows(4, 3, &mut r)).unwrap();
    let key_params: ParamStore = key_model
        .params()
        .into_iter()
        .map(|(k, v)| (format!("key.{k}"), v))
        .collect();
    let query_params = model.params();
    let mut bind = Bindings::new().with("x", &xv).with("queue", &queue);
    bind.extend(query_params.iter().map(|(k, v)| (k.clone(), v)));
    bind.extend(key_params.iter().map(|(k, v)| (k.clone(), v)));
    let grads = g.gradient(&bind, nodes.loss).unwrap();
    let mut saw_query = false;
    for (name, t) in &grads {
        if name.starts_with("key.") {
            assert!(
                t.data().iter().all(|v| *v == 0.0),
                "{name} received gradient"
            );
        } else {
            saw_query |= t.data().iter().any(|v| *v != 0.0);
        }
    }
    assert!(saw_query);
}

fn scale_grid(values: &[f64]) -> TransformationFamily {
    TransformationFamily::new(FamilySpec {
        kind: FamilyKind::AxisScale {
            dim: 3,
            axes: vec![0, 1, 2],
        },
        domain: ParamDomain::Box {
            lo: vec![-3.0; 3],
            hi: vec![3.0; 3],
        },
        pi: Sampling::Uniform,
        grid: Some(values.iter().map(|&v| vec![v, 1.0, v * v]).collect()),
    })
    .unwrap()
}

#[test]
fn exact_worst_pair_matches_double_loop() {
    let mut r = rng(31);
    let ds = gaussian_dataset(40, 3, 2, &mut r);
    let f = random_encoder(3, 8, 4, 17);
    let fam = scale_grid(&[0.5, 0.8, 1.0, 1.3, -1.7]);
    let grid = fam.grid_transformations().unwrap();
    let mut total = 0.0;
    for i in 0..ds.n() {
        let mut best = 0.0f64;
        for a in &grid {
            for b in &grid {
                let fa = f
                    .forward(&Tensor::matrix(1, 3, a.apply(ds.sample(i)).unwrap()).unwrap())
                    .unwrap();
                let fb = f
                    .forward(&Tensor::matrix(1, 3, b.apply(ds.sample(i)).unwrap()).unwrap())
                    .unwrap();
                let d: f64 = fa
                    .data()
                    .iter()
                    .zip(fb.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                best = best.max(d);
            }
        }
        total += best;
    }
    let exact = ar_loss_exact(&f, &ds, &fam).unwrap();
    assert!((exact - total / ds.n() as f64).abs() < 1e-12);
}

#[test]
fn toy_encoder_alignment_is_half_epsilon() {
    let ds = make_toy_axis_dataset(100_000, 77).unwrap();
    let est = alignment_loss(&ToyEncoder { epsilon: 0.04 }, &ds, &toy_axis_family(), 1, 5).unwrap();
    assert!((est.mean - 0.02).abs() < 0.002, "{est:?}");
    assert_eq!(est.draws, 100_000);
}

#[test]
fn family_invariant_encoder_has_no_misalignment() {
    let ds = make_toy_axis_dataset(1000, 1).unwrap();
    let first_only =
        |x: &Tensor| Tensor::matrix(x.shape()[0], 1, x.rows().map(|r| r[0].tanh()).collect());
    let est = alignment_loss(&first_only, &ds, &toy_axis_family(), 4, 3).unwrap();
    assert_eq!(est.mean, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn worst_pair_loss_dominates_average(seed in any::<u64>(), n in 2usize..=32, m in 2usize..=8, p in 2usize..6, tau in 0.05f64..2.0) {
        let v = random_batch(n, m, p, &mut rng(seed));
        let (arcl, _) = arcl_batch(&v, tau).unwrap();
        let aal = aal_batch(&v, tau).unwrap();
        prop_assert!(arcl >= aal - 1e-12 * aal.abs().max(1.0), "arcl {arcl} < aal {aal}");
    }

    /// Only views 3..m may be permuted: views 1 and 2 also supply negatives.
    #[test]
    fn trailing_view_permutations_leave_losses_unchanged(seed in any::<u64>(), n in 2usize..10, m in 3usize..7, shuffle in any::<u64>()) {
        let mut r = rng(seed);
        let v = random_batch(n, m, 3, &mut r);
        let mut perm_rng = rng(shuffle);
        let mut data = Vec::new();
        for i in 0..n {
            let mut tail: Vec<usize> = (2..m).collect();
            rand::seq::SliceRandom::shuffle(tail.as_mut_slice(), &mut perm_rng);
            for j in [0, 1].into_iter().chain(tail) {
                data.extend_from_slice(v.z(i, j));
            }
        }
        let w = ViewBatch::new(Tensor::new(vec![n, m, 3], data).unwrap(), (0..n).collect()).unwrap();
        prop_assert_eq!(arcl_batch(&v, 0.5).unwrap().0, arcl_batch(&w, 0.5).unwrap().0);
        prop_assert!((aal_batch(&v, 0.5).unwrap() - aal_batch(&w, 0.5).unwrap()).abs() < 1e-12);
    }

    /// The positive term alone is invariant under every view permutation.
    #[test]
    fn positive_similarity_ignores_view_order(seed in any::<u64>(), n in 2usize..6, m in 2usize..7, shuffle in any::<u64>()) {
        let v = random_batch(n, m, 3, &mut rng(seed));
        let mut perm_rng = rng(shuffle);
        let mut data = Vec::new();
        for i in 0..n {
            let mut order: Vec<usize> = (0..m).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut perm_rng);
            for j in order {
                data.extend_from_slice(v.z(i, j));
            }
        }
        let w = ViewBatch::new(Tensor::new(vec![n, m, 3], data).unwrap(), (0..n).collect()).unwrap();
        for rule in [PositiveRule::Worst, PositiveRule::Average] {
            let a = batch_loss_terms(&v, rule, 0.5, 1.0).unwrap().positive;
            let b = batch_loss_terms(&w, rule, 0.5, 1.0).unwrap().positive;
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-14);
            }
        }
    }

    /// Rotating view 2 of sample 0 toward its view 1 raises its positive
    /// similarity without touching its negatives; its loss term must drop.
    #[test]
    fn loss_term_decreases_in_positive_similarity(seed in any::<u64>(), n in 2usize..8, t in 0.05f64..5.0) {
        let v = random_batch(n, 2, 3, &mut rng(seed));
        let (z1, z2) = (v.z(0, 0).to_vec(), v.z(0, 1).to_vec());
        prop_assume!(dot(&z1, &z2) < 0.99);
        let moved: Vec<f64> = z2.iter().zip(&z1).map(|(b, a)| b + t * a).collect();
        let norm = dot(&moved, &moved).sqrt();
        let mut data = v.embeddings().data().to_vec();
        for (k, x) in moved.iter().enumerate() {
            data[3 + k] = x / norm;
        }
        let w = ViewBatch::new(Tensor::new(vec![n, 2, 3], data).unwrap(), (0..n).collect()).unwrap();
        let tau = 0.5;
        let before = batch_loss_terms(&v, PositiveRule::FirstPair, tau, 1.0).unwrap();
        let after = batch_loss_terms(&w, PositiveRule::FirstPair, tau, 1.0).unwrap();
        prop_assert_eq!(before.negative_lse[0], after.negative_lse[0]);
        prop_assert!(after.positive[0] > before.positive[0]);
        let term = |b: &contrastlab_core::losses::BatchLoss| -b.positive[0] / tau + b.negative_lse[0];
        prop_assert!(term(&after) < term(&before));
    }

    #[test]
    fn alignment_never_exceeds_worst_pair(seed in any::<u64>(), d in 2usize..=6, size in 2usize..=7) {
        let mut r = rng(seed);
        let ds = gaussian_dataset(30, d, 2, &mut r);
        let fam = random_affine_grid(d, size, &mut r);
        let f = random_encoder(d, 5, 3, seed);
        let align = alignment_loss_grid(&f, &ds, &fam).unwrap();
        let ar = ar_loss_exact(&f, &ds, &fam).unwrap();
        prop_assert!(align <= ar + 1e-10, "align {align} > ar {ar}");
    }

    #[test]
    fn nested_views_never_lower_the_estimate(seed in any::<u64>(), d in 2usize..5) {
        let mut r = rng(seed);
        let ds = gaussian_dataset(20, d, 2, &mut r);
        let fam = random_affine_grid(d, 6, &mut r);
        let f = random_encoder(d, 5, 3, seed);
        let ms = [2, 3, 5, 8, 13];
        let curve = empirical_ar_curve(&f, &ds, &fam, &ms, seed, ViewMode::Random).unwrap();
        for w in curve.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        let full = empirical_ar_curve(&f, &ds, &fam, &[6], seed, ViewMode::Exhaustive).unwrap()[0];
        prop_assert_eq!(full, ar_loss_exact(&f, &ds, &fam).unwrap());
    }
}
