#![allow(dead_code)]

use contrastlab_core::data::{
    Dataset, FamilyKind, FamilySpec, ParamDomain, Sampling, TransformationFamily,
};
use contrastlab_core::numcore::Tensor;
use contrastlab_core::seed::{self, Rng};
use contrastlab_core::train::{Activation, Architecture, NetSpec, Network};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal(rng)).collect()).unwrap()
}

/// Random rows rescaled to unit length.
pub fn unit_rows(rows: usize, dim: usize, rng: &mut Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        out.extend(v.iter().map(|a| a / n));
    }
    out
}

pub fn mlp_spec(hidden: usize, out: usize) -> NetSpec {
    NetSpec {
        architecture: Architecture::Mlp2 { hidden },
        output_dim: out,
        activation: Activation::Tanh,
        normalize_output: true,
    }
}

pub fn linear_spec(out: usize) -> NetSpec {
    NetSpec {
        architecture: Architecture::Linear,
        output_dim: out,
        activation: Activation::Tanh,
        normalize_output: true,
    }
}

/// Two-layer tanh encoder onto the unit sphere.
pub fn random_encoder(input_dim: usize, hidden: usize, out: usize, seed: u64) -> Network {
    Network::init("enc", mlp_spec(hidden, out), input_dim, seed).unwrap()
}

pub fn gaussian_dataset(n: usize, d: usize, classes: usize, rng: &mut Rng) -> Dataset {
    let x = normal_tensor(&[n, d], rng);
    let labels = (0..n).map(|i| i % classes).collect();
    Dataset::new(x, Some(labels), classes).unwrap()
}

/// Finite family of per-axis scalings followed by shifts, with `size` random
/// grid members in `[-2, 2]^d × [-1, 1]^d`.
pub fn random_affine_grid(d: usize, size: usize, rng: &mut Rng) -> TransformationFamily {
    let axes: Vec<usize> = (0..d).collect();
    let grid = (0..size)
        .map(|_| {
            let mut theta: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..=2.0)).collect();
            theta.extend((0..d).map(|_| rng.random_range(-1.0..=1.0)));
            theta
        })
        .collect();
    TransformationFamily::new(FamilySpec {
        kind: FamilyKind::Composition {
            parts: vec![
                FamilyKind::AxisScale {
                    dim: d,
                    axes: axes.clone(),
                },
                FamilyKind::Shift { dim: d, axes },
            ],
        },
        domain: ParamDomain::Box {
            lo: [vec![-2.0; d], vec![-1.0; d]].concat(),
            hi: [vec![2.0; d], vec![1.0; d]].concat(),
        },
        pi: Sampling::Uniform,
        grid: Some(grid),
    })
    .unwrap()
}

/// Scaling of one axis by `θ ~ U[lo, hi]`.
pub fn uniform_axis_scale(d: usize, axis: usize, lo: f64, hi: f64) -> TransformationFamily {
    TransformationFamily::new(FamilySpec {
        kind: FamilyKind::AxisScale {
            dim: d,
            axes: vec![axis],
        },
        domain: ParamDomain::Box {
            lo: vec![lo],
            hi: vec![hi],
        },
        pi: Sampling::Uniform,
        grid: None,
    })
    .unwrap()
}

pub fn rng(seed: u64) -> Rng {
    seed::rng(seed)
}
