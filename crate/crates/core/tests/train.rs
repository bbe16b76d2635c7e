mod common;

use common::{linear_spec, mlp_spec, normal, normal_tensor, rng, unit_rows};
use contrastlab_core::data::{make_toy_axis_dataset, toy_axis_family};
use contrastlab_core::losses::{LossSpec, Objective};
use contrastlab_core::numcore::{ParamStore, Tensor};
use contrastlab_core::train::{
    history_csv, load_checkpoint, momentum_update, save_checkpoint, sgd_step, train, LrSchedule,
    MoCoState, Model, Network, OptConfig,
};
use proptest::prelude::*;
use std::collections::VecDeque;

fn opt(lr: f64, epochs: usize, seed: u64) -> OptConfig {
    OptConfig {
        lr,
        schedule: LrSchedule::Constant,
        momentum: 0.9,
        batch_size: 64,
        epochs,
        seed,
    }
}

fn toy_model(seed: u64) -> Model {
    let enc = Network::init("enc", mlp_spec(16, 4), 2, seed).unwrap();
    let proj = Network::init("proj", linear_spec(2), 4, seed + 1).unwrap();
    Model::new(enc, Some(proj)).unwrap()
}

#[test]
fn small_steps_descend_for_every_objective() {
    let ds = make_toy_axis_dataset(512, 3).unwrap();
    for (objective, m) in [
        (Objective::Infonce, 2),
        (Objective::Arcl, 4),
        (Objective::Aal, 4),
    ] {
        for seed in 0..5 {
            let spec = LossSpec::new(objective, 0.5, m);
            let out = train(
                toy_model(seed),
                &ds,
                &toy_axis_family(),
                &spec,
                &opt(1e-3, 10, seed),
            )
            .unwrap();
            let losses: Vec<f64> = out.history.iter().map(|r| r.loss).collect();
            let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
            assert!(
                rises <= 1,
                "{objective:?} seed {seed}: {rises} rising epochs in {losses:?}"
            );
        }
    }
}

#[test]
fn worst_pair_training_shrinks_empirical_robust_loss() {
    let ds = make_toy_axis_dataset(256, 4).unwrap();
    let enc = Network::init("enc", linear_spec(2), 2, 9).unwrap();
    let spec = LossSpec::new(Objective::Arcl, 0.5, 4);
    let mut o = opt(0.05, 200, 2);
    o.batch_size = 128;
    let out = train(
        Model::new(enc, None).unwrap(),
        &ds,
        &toy_axis_family(),
        &spec,
        &o,
    )
    .unwrap();
    let last = out.history.last().unwrap().ar_hat;
    assert!(
        last < out.initial.ar_hat,
        "initial {} final {last}",
        out.initial.ar_hat
    );
}

#[test]
fn history_has_the_documented_columns() {
    let ds = make_toy_axis_dataset(64, 4).unwrap();
    let out = train(
        toy_model(1),
        &ds,
        &toy_axis_family(),
        &LossSpec::new(Objective::Arcl, 0.5, 4),
        &opt(0.01, 2, 1),
    )
    .unwrap();
    let csv = history_csv(&out.history);
    assert_eq!(csv.lines().next().unwrap(), "epoch,loss,ar_hat,align,lr");
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn training_and_checkpoints_reproduce_bit_for_bit() {
    let ds = make_toy_axis_dataset(128, 4).unwrap();
    let spec = LossSpec::new(Objective::Aal, 0.5, 3);
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for run in 0..2 {
        let out = train(
            toy_model(5),
            &ds,
            &toy_axis_family(),
            &spec,
            &opt(0.02, 2, 8),
        )
        .unwrap();
        let sub = dir.path().join(format!("run{run}"));
        let path = save_checkpoint(&sub, "model", &out.model, Some("abc"), 8).unwrap();
        bytes.push((
            std::fs::read(&path).unwrap(),
            std::fs::read(sub.join("model.bin")).unwrap(),
        ));
        assert_eq!(load_checkpoint(&path).unwrap().model, out.model);
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn two_heavy_ball_steps() {
    let mut params =
        ParamStore::from([("w".to_string(), Tensor::vector(vec![1.0, -2.0]).unwrap())]);
    let g = ParamStore::from([("w".to_string(), Tensor::vector(vec![0.5, 3.0]).unwrap())]);
    let mut buf = ParamStore::new();
    for _ in 0..2 {
        sgd_step(&mut params, &g, 0.1, 0.9, &mut buf).unwrap();
    }
    // Velocities g and 1.9g.
    let want = [1.0 - 0.1 * 0.5 * 2.9, -2.0 - 0.1 * 3.0 * 2.9];
    for (a, b) in params["w"].data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn plain_sgd_is_a_gradient_step(seed in any::<u64>(), lr in 0.0f64..1.0) {
        let mut r = rng(seed);
        let theta = normal_tensor(&[3, 2], &mut r);
        let grad = normal_tensor(&[3, 2], &mut r);
        let mut params = ParamStore::from([("w".to_string(), theta.clone())]);
        let grads = ParamStore::from([("w".to_string(), grad.clone())]);
        sgd_step(&mut params, &grads, lr, 0.0, &mut ParamStore::new()).unwrap();
        for ((new, old), g) in params["w"].data().iter().zip(theta.data()).zip(grad.data()) {
            prop_assert_eq!(*new, old - lr * g);
        }
    }

    #[test]
    fn momentum_blend_fixed_points(seed in any::<u64>(), m in 0.0f64..0.999) {
        let mut r = rng(seed);
        let q = ParamStore::from([("w".to_string(), normal_tensor(&[4], &mut r))]);
        let mut k = q.clone();
        momentum_update(&mut k, &q, m).unwrap();
        for (a, b) in k["w"].data().iter().zip(q["w"].data()) {
            prop_assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
        let mut copy = ParamStore::from([("w".to_string(), normal_tensor(&[4], &mut r))]);
        momentum_update(&mut copy, &q, 0.0).unwrap();
        prop_assert_eq!(&copy, &q);
    }

    #[test]
    fn lipschitz_estimate_bounds_local_jacobian(seed in any::<u64>()) {
        let mut r = rng(seed);
        let net = Network::init("enc", mlp_spec(6, 3), 4, seed).unwrap();
        let x = normal_tensor(&[1, 4], &mut r);
        let l = net.lipschitz_estimate(Some(&x)).unwrap();
        // Largest finite-difference gain over a handful of directions.
        let base = net.forward(&x).unwrap();
        for _ in 0..8 {
            let dir: Vec<f64> = (0..4).map(|_| normal(&mut r)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let h = 1e-6;
            let moved: Vec<f64> = x.data().iter().zip(&dir).map(|(a, d)| a + h * d / norm).collect();
            let y = net.forward(&Tensor::matrix(1, 4, moved).unwrap()).unwrap();
            let gain = y.data().iter().zip(base.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / h;
            prop_assert!(gain <= l * (1.0 + 1e-4), "gain {gain} above estimate {l}");
        }
    }
}

#[test]
fn queue_never_exceeds_capacity() {
    let mut r = rng(12);
    let (capacity, dim) = (37, 3);
    let mut state = MoCoState::new(ParamStore::new(), capacity, dim, 0.99).unwrap();
    let mut model: VecDeque<Vec<f64>> = VecDeque::new();
    for _ in 0..10_000 {
        let k = (normal(&mut r).abs() * 4.0) as usize % 9;
        let rows = unit_rows(k, dim, &mut r);
        if k > 0 {
            state
                .update_queue(&Tensor::matrix(k, dim, rows.clone()).unwrap())
                .unwrap();
        } else {
            state.update_queue(&Tensor::zeros(&[0, dim])).unwrap();
        }
        for row in rows.chunks(dim) {
            model.push_back(row.to_vec());
            if model.len() > capacity {
                model.pop_front();
            }
        }
        assert!(state.len() <= capacity);
    }
    let got: Vec<Vec<f64>> = state.entries().map(<[f64]>::to_vec).collect();
    assert_eq!(got, Vec::from(model));
}
