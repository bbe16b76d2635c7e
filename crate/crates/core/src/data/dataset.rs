use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::transform::Transformation;
use crate::error::{invalid, Result};
use crate::numcore::Tensor;
use crate::seed;

/// `n × d` samples with optional class labels in `[0, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Tensor,
    labels: Option<Vec<usize>>,
    class_count: usize,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Option<Vec<usize>>, class_count: usize) -> Result<Self> {
        if samples.rank() != 2 {
            return Err(invalid(
                "samples",
                format!("expected [n, d], got {:?}", samples.shape()),
            ));
        }
        let n = samples.shape()[0];
        if n == 0 {
            return Err(invalid("samples", "dataset must hold at least one sample"));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(invalid(
                    "labels",
                    format!("{} labels for {n} samples", l.len()),
                ));
            }
            if let Some(bad) = l.iter().find(|&&y| y >= class_count) {
                return Err(invalid(
                    "labels",
                    format!("label {bad} outside [0, {class_count})"),
                ));
            }
        }
        Ok(Self {
            samples,
            labels,
            class_count,
        })
    }

    pub fn n(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.samples.row(i)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels()
            .ok_or_else(|| invalid("dataset", "labels required"))
    }

    /// Indices of the samples in class `k`.
    pub fn class_indices(&self, k: usize) -> Result<Vec<usize>> {
        let labels = self.require_labels()?;
        Ok(labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == k)
            .map(|(i, _)| i)
            .collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(
            Tensor::matrix(indices.len(), d, data)?,
            labels,
            self.class_count,
        )
    }

    pub fn without_labels(&self) -> Self {
        Self {
            samples: self.samples.clone(),
            labels: None,
            class_count: self.class_count,
        }
    }
}

/// A transformation-induced domain `D_A`.
#[derive(Clone, Debug)]
pub struct Domain {
    pub base: Dataset,
    pub transform: Transformation,
}

impl Domain {
    pub fn realize(&self) -> Result<Dataset> {
        induce_domain(&self.base, &self.transform)
    }
}

/// Applies `t` to every sample once; labels are carried over unchanged.
pub fn induce_domain(dataset: &Dataset, t: &Transformation) -> Result<Dataset> {
    t.check_dim(dataset.dim())?;
    let mut data = dataset.samples().data().to_vec();
    for row in data.chunks_mut(dataset.dim()) {
        t.apply_in_place(row);
    }
    Dataset::new(
        Tensor::matrix(dataset.n(), dataset.dim(), data)?,
        dataset.labels.clone(),
        dataset.class_count,
    )
}

/// Block layout of the shortcut dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShortcutLayout {
    pub shortcut_dim: usize,
    pub core_dim: usize,
    /// Distance of each shortcut-block class mean from the origin.
    pub shortcut_sep: f64,
    /// Distance of each core-block class mean from the origin.
    pub core_sep: f64,
    pub noise_std: f64,
}

impl Default for ShortcutLayout {
    fn default() -> Self {
        Self {
            shortcut_dim: 2,
            core_dim: 2,
            shortcut_sep: 3.0,
            core_sep: 1.5,
            noise_std: 1.0,
        }
    }
}

/// Generator descriptions, echoed into dataset file headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Toy {
        n: usize,
    },
    Mixture {
        classes: usize,
        dim: usize,
        separation: f64,
        cluster_std: f64,
        n: usize,
    },
    Shortcut {
        n: usize,
        corr: f64,
        #[serde(default)]
        layout: ShortcutLayout,
    },
}

impl DatasetSpec {
    pub fn n(&self) -> usize {
        match self {
            DatasetSpec::Toy { n }
            | DatasetSpec::Mixture { n, .. }
            | DatasetSpec::Shortcut { n, .. } => *n,
        }
    }

    pub fn with_n(&self, n: usize) -> Self {
        let mut out = self.clone();
        match &mut out {
            DatasetSpec::Toy { n: m }
            | DatasetSpec::Mixture { n: m, .. }
            | DatasetSpec::Shortcut { n: m, .. } => *m = n,
        }
        out
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::Toy { n } => make_toy_axis_dataset(*n, seed),
            DatasetSpec::Mixture {
                classes,
                dim,
                separation,
                cluster_std,
                n,
            } => make_gaussian_mixture(*classes, *dim, *separation, *cluster_std, *n, seed),
            DatasetSpec::Shortcut { n, corr, layout } => {
                make_shortcut_dataset(*n, *corr, layout, seed)
            }
        }
    }
}

/// `n` draws of `X ~ N(0, I_2)` labelled `1{x_1 >= 0}`.
pub fn make_toy_axis_dataset(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("n", "need at least one sample"));
    }
    let mut rng = seed::rng(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x1: f64 = StandardNormal.sample(&mut rng);
        let x2: f64 = StandardNormal.sample(&mut rng);
        data.push(x1);
        data.push(x2);
        labels.push(toy_label(x1));
    }
    Dataset::new(Tensor::matrix(n, 2, data)?, Some(labels), 2)
}

pub fn toy_label(x1: f64) -> usize {
    usize::from(x1 >= 0.0)
}

/// Isotropic Gaussian clusters with means `separation · e_k`. Sample `i`
/// belongs to component `i mod K`.
pub fn make_gaussian_mixture(
    classes: usize,
    dim: usize,
    separation: f64,
    cluster_std: f64,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(invalid("classes", "need at least two classes"));
    }
    if dim < 2 {
        return Err(invalid("dim", "need at least two dimensions"));
    }
    if dim < classes {
        return Err(invalid(
            "dim",
            format!("{classes} orthogonal class means do not fit in dimension {dim}"),
        ));
    }
    if n < classes {
        return Err(invalid(
            "n",
            format!("need at least one sample per class ({classes})"),
        ));
    }
    if !(cluster_std >= 0.0) {
        return Err(invalid("cluster_std", "must be non-negative"));
    }
    let mut rng = seed::rng(seed);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            let mean = if j == k { separation } else { 0.0 };
            data.push(mean + cluster_std * z);
        }
        labels.push(k);
    }
    Dataset::new(Tensor::matrix(n, dim, data)?, Some(labels), classes)
}

/// Binary data made of a "shortcut" block followed by a "core" block.
///
/// The label `y` is a fair coin and always drives the core block. The
/// shortcut block follows its own label `s`, equal to `y` with probability
/// `corr` and an independent fair coin otherwise.
pub fn make_concat_shortcut_dataset(n: usize, corr: f64, seed: u64) -> Result<Dataset> {
    make_shortcut_dataset(n, corr, &ShortcutLayout::default(), seed)
}

pub fn make_shortcut_dataset(
    n: usize,
    corr: f64,
    layout: &ShortcutLayout,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&corr) {
        return Err(invalid("corr", format!("{corr} outside [0, 1]")));
    }
    if n == 0 {
        return Err(invalid("n", "need at least one sample"));
    }
    if layout.shortcut_dim == 0 || layout.core_dim == 0 {
        return Err(invalid("layout", "blocks must be non-empty"));
    }
    let d = layout.shortcut_dim + layout.core_dim;
    let mut rng = seed::rng(seed);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = usize::from(rng.random::<bool>());
        let follow = rng.random::<f64>() < corr;
        let coin = usize::from(rng.random::<bool>());
        let s = if follow { y } else { coin };
        let sign = |c: usize| if c == 1 { 1.0 } else { -1.0 };
        for j in 0..layout.shortcut_dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            let mean = if j == 0 {
                sign(s) * layout.shortcut_sep
            } else {
                0.0
            };
            data.push(mean + layout.noise_std * z);
        }
        for j in 0..layout.core_dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            let mean = if j == 0 {
                sign(y) * layout.core_sep
            } else {
                0.0
            };
            data.push(mean + layout.noise_std * z);
        }
        labels.push(y);
    }
    Dataset::new(Tensor::matrix(n, d, data)?, Some(labels), 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_labels_follow_first_coordinate() {
        assert_eq!(toy_label(0.3), 1);
        assert_eq!(toy_label(-0.3), 0);
        assert_eq!(toy_label(0.0), 1);
        let ds = make_toy_axis_dataset(500, 4).unwrap();
        for (i, &y) in ds.labels().unwrap().iter().enumerate() {
            assert_eq!(y, toy_label(ds.sample(i)[0]));
        }
        assert!(make_toy_axis_dataset(0, 4).is_err());
    }

    #[test]
    fn toy_label_balance() {
        let ds = make_toy_axis_dataset(100_000, 11).unwrap();
        let ones = ds.labels().unwrap().iter().filter(|&&y| y == 1).count() as f64;
        assert!((ones / 1e5 - 0.5).abs() < 0.01);
    }

    #[test]
    fn mixture_minimal_instance() {
        let ds = make_gaussian_mixture(2, 2, 1.0, 0.1, 2, 0).unwrap();
        assert_eq!(ds.labels().unwrap(), &[0, 1]);
        assert!(make_gaussian_mixture(3, 2, 1.0, 0.1, 9, 0).is_err());
        assert!(make_gaussian_mixture(2, 2, 1.0, 0.1, 1, 0).is_err());
    }

    #[test]
    fn mixture_zero_separation_means_coincide() {
        let (n, std) = (4000, 0.5);
        let ds = make_gaussian_mixture(2, 3, 0.0, std, n, 9).unwrap();
        let mut means = [[0.0; 3]; 2];
        for i in 0..n {
            let k = ds.labels().unwrap()[i];
            for j in 0..3 {
                means[k][j] += ds.sample(i)[j] / (n / 2) as f64;
            }
        }
        let tol = 3.0 * std / ((n / 2) as f64).sqrt();
        for j in 0..3 {
            assert!((means[0][j] - means[1][j]).abs() < 2.0 * tol);
        }
    }

    #[test]
    fn shortcut_rejects_bad_corr() {
        assert!(make_concat_shortcut_dataset(10, 1.5, 0).is_err());
        assert!(make_concat_shortcut_dataset(10, -0.1, 0).is_err());
    }

    #[test]
    fn induce_domain_keeps_labels() {
        let ds = make_toy_axis_dataset(50, 2).unwrap();
        let same = induce_domain(&ds, &Transformation::identity(2)).unwrap();
        assert_eq!(same, ds);
        let flat = induce_domain(
            &ds,
            &Transformation::AxisScale {
                factors: vec![1.0, 0.0],
            },
        )
        .unwrap();
        assert_eq!(flat.labels(), ds.labels());
        assert!((0..50).all(|i| flat.sample(i)[1] == 0.0));
    }
}
