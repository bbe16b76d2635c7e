use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::losses::Representation;
use crate::numcore::Tensor;

/// Relative ridge strength: `ε_ridge = RIDGE_SCALE · trace(FᵀF/n) / p`.
pub const RIDGE_SCALE: f64 = 1e-8;

/// Linear map `h: R^p → R^K` with no bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    /// `[K, p]`.
    pub weight: Tensor,
    pub domain: String,
}

impl LinearHead {
    pub fn new(weight: Tensor, domain: impl Into<String>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(invalid(
                "weight",
                format!("expected [K, p], got {:?}", weight.shape()),
            ));
        }
        Ok(Self {
            weight,
            domain: domain.into(),
        })
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.weight.norm()
    }

    /// `h f` for one feature row.
    pub fn apply(&self, feature: &[f64]) -> Vec<f64> {
        self.weight
            .rows()
            .map(|w| w.iter().zip(feature).fold(0.0, |acc, (a, b)| acc + a * b))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub head: LinearHead,
    /// Mean squared residual against one-hot targets.
    pub risk: f64,
    pub ridge: f64,
    /// The unregularized normal equations were singular.
    pub degenerate: bool,
}

fn check_features(features: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, p) = match features.shape() {
        &[n, p] => (n, p),
        s => return Err(invalid("features", format!("expected [n, p], got {s:?}"))),
    };
    if labels.len() != n {
        return Err(invalid(
            "labels",
            format!("{} labels for {n} feature rows", labels.len()),
        ));
    }
    Ok((n, p))
}

/// Mean over samples of `‖h f_i − e_{y_i}‖²`.
pub fn square_risk(head: &LinearHead, features: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, p) = check_features(features, labels)?;
    if p != head.dim() {
        return Err(invalid(
            "features",
            format!("head expects dimension {}, got {p}", head.dim()),
        ));
    }
    let mut total = 0.0;
    for (row, &y) in features.rows().zip(labels) {
        let out = head.apply(row);
        total += out.iter().enumerate().fold(0.0, |acc, (k, v)| {
            acc + (v - f64::from(u8::from(k == y))).powi(2)
        });
    }
    Ok(total / n as f64)
}

/// Least-squares head on fixed features: solves
/// `(FᵀF/n + ε I) hᵀ = FᵀY/n` for one-hot `Y`.
pub fn fit_head(
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    domain: &str,
) -> Result<ProbeFit> {
    let (n, p) = check_features(features, labels)?;
    if n < classes {
        return Err(invalid(
            "dataset",
            format!("{n} samples for {classes} classes"),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(invalid(
            "labels",
            format!("label {bad} outside [0, {classes})"),
        ));
    }
    let f = DMatrix::from_row_slice(n, p, features.data());
    let mut y = DMatrix::<f64>::zeros(n, classes);
    for (i, &c) in labels.iter().enumerate() {
        y[(i, c)] = 1.0;
    }
    let cov = f.transpose() * &f / n as f64;
    let rhs = f.transpose() * &y / n as f64;
    let trace = cov.trace();
    let eig = SymmetricEigen::new(cov.clone()).eigenvalues;
    let min_eig = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let max_eig = eig.iter().copied().fold(0.0, f64::max);
    let degenerate = !(min_eig > 1e-12 * max_eig.max(f64::MIN_POSITIVE));

    let (ridge, h) = if trace > 0.0 {
        let ridge = RIDGE_SCALE * trace / p as f64;
        let reg = &cov + DMatrix::identity(p, p) * ridge;
        let sol = reg
            .cholesky()
            .ok_or_else(|| {
                invalid(
                    "features",
                    "regularized normal equations are not positive definite",
                )
            })?
            .solve(&rhs);
        (ridge, sol.transpose())
    } else {
        (0.0, DMatrix::zeros(classes, p))
    };
    let data: Vec<f64> = (0..classes)
        .flat_map(|k| (0..p).map(move |j| (k, j)))
        .map(|(k, j)| h[(k, j)])
        .collect();
    let head = LinearHead::new(Tensor::matrix(classes, p, data)?, domain)?;
    let risk = square_risk(&head, features, labels)?;
    Ok(ProbeFit {
        head,
        risk,
        ridge,
        degenerate,
    })
}

/// Probe of `f` on a labelled dataset.
pub fn linear_probe_sq(f: &dyn Representation, ds: &Dataset) -> Result<ProbeFit> {
    let labels = ds.require_labels()?;
    let features = f.features(ds.samples())?;
    fit_head(&features, labels, ds.class_count(), "train")
}

/// Decision rule turning a feature row into a class.
#[derive(Clone, Copy, Debug)]
pub enum Decision<'a> {
    /// `argmax_k (h f)_k`, lowest index on ties.
    Head(&'a LinearHead),
    /// Class 1 iff `f[feature] >= threshold`, else class 0.
    Threshold { feature: usize, threshold: f64 },
    /// Always the same class.
    Constant(usize),
}

impl Decision<'_> {
    pub fn classify(&self, row: &[f64]) -> usize {
        match self {
            Decision::Head(h) => {
                let out = h.apply(row);
                crate::numcore::select(&out, false)
            }
            Decision::Threshold { feature, threshold } => usize::from(row[*feature] >= *threshold),
            Decision::Constant(c) => *c,
        }
    }
}

/// Misclassification rate on precomputed features.
pub fn zero_one_error(decision: Decision<'_>, features: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = check_features(features, labels)?;
    let wrong = features
        .rows()
        .zip(labels)
        .filter(|(row, &y)| decision.classify(row) != y)
        .count();
    Ok(wrong as f64 / n as f64)
}

/// Empirical 0-1 risk of `decision ∘ f`.
pub fn risk_01(f: &dyn Representation, decision: Decision<'_>, ds: &Dataset) -> Result<f64> {
    let labels = ds.require_labels()?;
    zero_one_error(decision, &f.features(ds.samples())?, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_features_recover_identity() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let data: Vec<f64> = labels
            .iter()
            .flat_map(|&y| (0..3).map(move |k| f64::from(u8::from(k == y))))
            .collect();
        let feats = Tensor::matrix(30, 3, data).unwrap();
        let fit = fit_head(&feats, &labels, 3, "a").unwrap();
        for k in 0..3 {
            for j in 0..3 {
                let want = f64::from(u8::from(k == j));
                assert!((fit.head.weight.data()[k * 3 + j] - want).abs() < 1e-6);
            }
        }
        assert!(fit.risk < 1e-12);
        assert!(!fit.degenerate);
    }

    #[test]
    fn duplicated_feature_is_flagged() {
        let labels = vec![0, 1, 0, 1];
        let feats = Tensor::matrix(4, 2, vec![1.0, 1.0, -1.0, -1.0, 0.5, 0.5, -2.0, -2.0]).unwrap();
        let fit = fit_head(&feats, &labels, 2, "a").unwrap();
        assert!(fit.degenerate);
        assert!(fit.risk.is_finite());
    }

    #[test]
    fn decisions() {
        let feats = Tensor::matrix(4, 1, vec![-1.0, 2.0, -0.5, 0.1]).unwrap();
        let labels = [0, 1, 0, 1];
        let sep = Decision::Threshold {
            feature: 0,
            threshold: 0.0,
        };
        assert_eq!(zero_one_error(sep, &feats, &labels).unwrap(), 0.0);
        assert_eq!(
            zero_one_error(Decision::Constant(0), &feats, &labels).unwrap(),
            0.5
        );
    }
}
