mod common;

use common::{normal, rng};
use contrastlab_core::data::{
    apply_transformation, dataset_to_string, header_for, induce_domain,
    make_concat_shortcut_dataset, make_gaussian_mixture, make_toy_axis_dataset, parse_dataset,
    sample_transformations, toy_axis_family, Dataset, FamilyKind, FamilySpec, ParamDomain,
    Sampling, Transformation, TransformationFamily,
};
use contrastlab_core::numcore::Tensor;
use proptest::prelude::*;

#[test]
fn toy_labels_are_balanced() {
    let ds = make_toy_axis_dataset(100_000, 11).unwrap();
    let ones = ds.labels().unwrap().iter().filter(|&&y| y == 1).count();
    let frac = ones as f64 / 1e5;
    assert!((frac - 0.5).abs() < 0.01, "label-1 fraction {frac}");
}

#[test]
fn well_separated_mixture_is_nearest_mean_separable() {
    let ds = make_gaussian_mixture(2, 4, 10.0, 0.1, 1000, 5).unwrap();
    let labels = ds.labels().unwrap();
    let mut means = vec![vec![0.0; 4]; 2];
    let mut counts = [0usize; 2];
    for i in 0..ds.n() {
        counts[labels[i]] += 1;
        for (m, x) in means[labels[i]].iter_mut().zip(ds.sample(i)) {
            *m += x;
        }
    }
    for (m, c) in means.iter_mut().zip(counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let errors = (0..ds.n())
        .filter(|&i| {
            let pred = usize::from(dist(ds.sample(i), &means[1]) < dist(ds.sample(i), &means[0]));
            pred != labels[i]
        })
        .count();
    assert_eq!(errors, 0);
}

/// Least-squares fit of `±1` targets on `[x_0, x_1, 1]`, solved by Gaussian
/// elimination, then thresholded at 0. Returns the training error.
fn shortcut_probe_error(ds: &Dataset) -> f64 {
    let labels = ds.labels().unwrap();
    let mut a = [[0.0f64; 4]; 3];
    for i in 0..ds.n() {
        let x = ds.sample(i);
        let row = [x[0], x[1], 1.0];
        let t = if labels[i] == 1 { 1.0 } else { -1.0 };
        for r in 0..3 {
            for c in 0..3 {
                a[r][c] += row[r] * row[c];
            }
            a[r][3] += row[r] * t;
        }
    }
    for p in 0..3 {
        let piv = (p..3)
            .max_by(|&i, &j| a[i][p].abs().total_cmp(&a[j][p].abs()))
            .unwrap();
        a.swap(p, piv);
        for r in 0..3 {
            if r != p {
                let f = a[r][p] / a[p][p];
                for c in p..4 {
                    a[r][c] -= f * a[p][c];
                }
            }
        }
    }
    let w: Vec<f64> = (0..3).map(|r| a[r][3] / a[r][r]).collect();
    let wrong = (0..ds.n())
        .filter(|&i| {
            let x = ds.sample(i);
            let pred = usize::from(w[0] * x[0] + w[1] * x[1] + w[2] >= 0.0);
            pred != labels[i]
        })
        .count();
    wrong as f64 / ds.n() as f64
}

#[test]
fn shortcut_block_predicts_label_only_through_corr() {
    let full = shortcut_probe_error(&make_concat_shortcut_dataset(2000, 1.0, 1).unwrap());
    assert!(full <= 0.05, "corr 1 error {full}");
    let none = shortcut_probe_error(&make_concat_shortcut_dataset(2000, 0.0, 2).unwrap());
    assert!((none - 0.5).abs() <= 0.03, "corr 0 error {none}");
    // With corr 1/2 the shortcut label agrees with y w.p. 3/4, and the block
    // itself is misread w.p. Φ(−3) ≈ 0.00135.
    let half = shortcut_probe_error(&make_concat_shortcut_dataset(2000, 0.5, 3).unwrap());
    assert!((half - 0.25).abs() <= 0.03, "corr 0.5 error {half}");
}

#[test]
fn toy_theta_has_zero_mean() {
    let fam = toy_axis_family();
    let mut r = rng(21);
    let n = 100_000;
    let mean = (0..n).map(|_| fam.sample_theta(&mut r)[0]).sum::<f64>() / n as f64;
    assert!(mean.abs() < 0.02, "mean {mean}");
}

fn support_families() -> Vec<TransformationFamily> {
    let scale = |pi: Sampling, domain: ParamDomain, grid: Option<Vec<Vec<f64>>>| {
        TransformationFamily::new(FamilySpec {
            kind: FamilyKind::AxisScale {
                dim: 3,
                axes: vec![0, 2],
            },
            domain,
            pi,
            grid,
        })
        .unwrap()
    };
    let bx = || ParamDomain::Box {
        lo: vec![0.5, -1.0],
        hi: vec![1.5, 2.0],
    };
    vec![
        scale(Sampling::Uniform, bx(), None),
        scale(
            Sampling::TruncatedGaussian {
                mean: vec![1.0, 0.0],
                std: vec![2.0, 0.5],
            },
            bx(),
            None,
        ),
        scale(
            Sampling::Uniform,
            ParamDomain::Ball {
                center: vec![1.0, 1.0],
                radius: 0.3,
            },
            None,
        ),
        scale(
            Sampling::Uniform,
            bx(),
            Some(vec![vec![1.0, 1.0], vec![0.5, 2.0], vec![1.5, -1.0]]),
        ),
        toy_axis_family(),
        TransformationFamily::new(FamilySpec {
            kind: FamilyKind::Rotation {
                dim: 2,
                plane: [0, 1],
            },
            domain: ParamDomain::Box {
                lo: vec![-0.5],
                hi: vec![0.5],
            },
            pi: Sampling::Uniform,
            grid: None,
        })
        .unwrap(),
    ]
}

#[test]
fn sampled_parameters_stay_in_the_domain() {
    for (k, fam) in support_families().iter().enumerate() {
        let mut r = rng(100 + k as u64);
        for _ in 0..1_000_000 {
            let theta = fam.sample_theta(&mut r);
            assert!(
                fam.realize(&theta).is_ok(),
                "family {k}: {theta:?} outside the domain"
            );
        }
    }
}

#[test]
fn identity_member_reproduces_inputs() {
    let mut r = rng(4);
    for fam in support_families() {
        let x: Vec<f64> = (0..fam.dim()).map(|_| normal(&mut r)).collect();
        assert_eq!(fam.identity().apply(&x).unwrap(), x);
    }
}

#[test]
fn zeroing_the_second_coordinate() {
    let ds = make_toy_axis_dataset(500, 9).unwrap();
    let flat = induce_domain(
        &ds,
        &Transformation::AxisScale {
            factors: vec![1.0, 0.0],
        },
    )
    .unwrap();
    assert!(flat.samples().rows().all(|r| r[1] == 0.0));
    assert_eq!(flat.labels(), ds.labels());
}

#[test]
fn same_seed_same_views() {
    let fam = &support_families()[1];
    assert_eq!(
        sample_transformations(fam, 5, 3).unwrap(),
        sample_transformations(fam, 5, 3).unwrap()
    );
    assert_ne!(
        sample_transformations(fam, 5, 3).unwrap(),
        sample_transformations(fam, 5, 4).unwrap()
    );
}

fn transformation() -> impl Strategy<Value = Transformation> {
    let leaf = prop_oneof![
        prop::collection::vec(-3.0f64..3.0, 3)
            .prop_map(|factors| Transformation::AxisScale { factors }),
        (
            -3.2f64..3.2,
            prop::sample::select(vec![[0, 1], [1, 2], [2, 0]])
        )
            .prop_map(|(angle, plane)| Transformation::Rotation { plane, angle }),
        prop::collection::vec(-2.0f64..2.0, 3).prop_map(|offset| Transformation::Shift { offset }),
        prop::collection::vec(any::<bool>(), 3).prop_map(|keep| Transformation::Mask { keep }),
    ];
    leaf.prop_recursive(2, 8, 3, |inner| {
        prop::collection::vec(inner, 1..4).prop_map(|steps| Transformation::Composition { steps })
    })
}

proptest! {
    #[test]
    fn transformations_are_pure(t in transformation(), x in prop::collection::vec(-5.0f64..5.0, 3)) {
        let a = apply_transformation(&t, &x).unwrap();
        let b = apply_transformation(&t, &x).unwrap();
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn induced_domains_keep_labels(t in transformation(), seed in 0u64..1000, n in 1usize..40) {
        let mut r = rng(seed);
        let data: Vec<f64> = (0..n * 3).map(|_| normal(&mut r)).collect();
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % 3).collect();
        let ds = Dataset::new(Tensor::matrix(n, 3, data).unwrap(), Some(labels), 3).unwrap();
        let dom = induce_domain(&ds, &t).unwrap();
        prop_assert_eq!(dom.labels(), ds.labels());
        for i in 0..n {
            let want = t.apply(ds.sample(i)).unwrap();
            prop_assert_eq!(dom.sample(i), want.as_slice());
        }
    }

    #[test]
    fn dataset_text_round_trip_is_exact(seed in 0u64..1000, n in 1usize..30, d in 1usize..5, labelled in any::<bool>()) {
        let mut r = rng(seed);
        let data: Vec<f64> = (0..n * d).map(|_| normal(&mut r) * 1e3).collect();
        let labels = labelled.then(|| (0..n).map(|i| i % 2).collect());
        let ds = Dataset::new(Tensor::matrix(n, d, data).unwrap(), labels, 2).unwrap();
        let text = dataset_to_string(&ds, &header_for(&ds, seed, None, None)).unwrap();
        let (back, header) = parse_dataset(&text).unwrap();
        prop_assert_eq!(header.seed, seed);
        prop_assert_eq!(back, ds);
    }
}
