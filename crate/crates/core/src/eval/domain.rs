use serde::{Deserialize, Serialize};

use super::probe::{fit_head, square_risk, zero_one_error, Decision, LinearHead, ProbeFit};
use crate::data::{induce_domain, make_toy_axis_dataset, toy_axis_family, Dataset, Transformation};
use crate::error::{invalid, Result};
use crate::losses::{alignment_loss, McEstimate, Representation};
use crate::numcore::Tensor;

/// A named transformation-induced domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedDomain {
    pub name: String,
    pub transform: Transformation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRiskReport {
    pub domains: Vec<String>,
    /// Square risk of each domain's own optimal head.
    pub risk: Vec<f64>,
    /// 0-1 error of each domain's own head.
    pub zero_one: Vec<f64>,
    /// `transfer[a][b]` = square risk of the head fit on `a`, evaluated on `b`.
    pub transfer: Vec<Vec<f64>>,
    /// Frobenius norm of each domain's head.
    pub head_norms: Vec<f64>,
    /// Head fit on the union of all domains.
    pub shared_head: LinearHead,
    pub shared_risk: Vec<f64>,
    pub shared_zero_one: Vec<f64>,
    /// `max_{a,b} |R(h∘f; D_a) − R(h∘f; D_b)|` for the shared head.
    pub worst_gap_shared: f64,
    /// Same gap in 0-1 error for the shared head.
    pub worst_zero_one_gap_shared: f64,
    /// `max_{a,b} |transfer[a][b] − transfer[a][a]|`.
    pub worst_gap_transfer: f64,
    pub heads: Vec<LinearHead>,
}

fn max_abs_gap(values: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for a in values {
        for b in values {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Features of every domain, in order.
pub fn domain_features(
    f: &dyn Representation,
    ds: &Dataset,
    domains: &[NamedDomain],
) -> Result<Vec<Tensor>> {
    domains
        .iter()
        .map(|d| f.features(induce_domain(ds, &d.transform)?.samples()))
        .collect()
}

/// Fits one head per domain plus a pooled head and evaluates every head on
/// every domain. A single domain gives a 1×1 transfer matrix.
pub fn domain_risk_report(
    f: &dyn Representation,
    domains: &[NamedDomain],
    ds: &Dataset,
) -> Result<DomainRiskReport> {
    if domains.is_empty() {
        return Err(invalid("domains", "need at least one domain"));
    }
    let labels = ds.require_labels()?;
    let k = ds.class_count();
    let feats = domain_features(f, ds, domains)?;
    let fits: Vec<ProbeFit> = domains
        .iter()
        .zip(&feats)
        .map(|(d, x)| fit_head(x, labels, k, &d.name))
        .collect::<Result<_>>()?;

    let mut transfer = vec![vec![0.0; domains.len()]; domains.len()];
    for (a, fit) in fits.iter().enumerate() {
        for (b, x) in feats.iter().enumerate() {
            transfer[a][b] = if a == b {
                fit.risk
            } else {
                square_risk(&fit.head, x, labels)?
            };
        }
    }
    let zero_one = fits
        .iter()
        .zip(&feats)
        .map(|(fit, x)| zero_one_error(Decision::Head(&fit.head), x, labels))
        .collect::<Result<Vec<_>>>()?;

    let p = feats[0].shape()[1];
    let pooled = Tensor::matrix(
        ds.n() * domains.len(),
        p,
        feats
            .iter()
            .flat_map(|x| x.data().iter().copied())
            .collect(),
    )?;
    let pooled_labels: Vec<usize> = (0..domains.len())
        .flat_map(|_| labels.iter().copied())
        .collect();
    let shared = fit_head(&pooled, &pooled_labels, k, "shared")?.head;
    let shared_risk = feats
        .iter()
        .map(|x| square_risk(&shared, x, labels))
        .collect::<Result<Vec<_>>>()?;
    let shared_zero_one = feats
        .iter()
        .map(|x| zero_one_error(Decision::Head(&shared), x, labels))
        .collect::<Result<Vec<_>>>()?;

    let mut worst_gap_transfer = 0.0f64;
    for (a, row) in transfer.iter().enumerate() {
        for v in row {
            worst_gap_transfer = worst_gap_transfer.max((v - row[a]).abs());
        }
    }

    Ok(DomainRiskReport {
        domains: domains.iter().map(|d| d.name.clone()).collect(),
        risk: fits.iter().map(|f| f.risk).collect(),
        zero_one,
        head_norms: fits.iter().map(|f| f.head.frobenius_norm()).collect(),
        worst_gap_shared: max_abs_gap(&shared_risk),
        worst_zero_one_gap_shared: max_abs_gap(&shared_zero_one),
        worst_gap_transfer,
        transfer,
        shared_head: shared,
        shared_risk,
        shared_zero_one,
        heads: fits.into_iter().map(|f| f.head).collect(),
    })
}

/// `f(x) = x₁ + (√ε/2)·x₂` as a one-dimensional, unnormalized feature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyEncoder {
    pub epsilon: f64,
}

impl ToyEncoder {
    pub fn weight(&self) -> f64 {
        self.epsilon.sqrt() / 2.0
    }
}

impl Representation for ToyEncoder {
    fn features(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[1] != 2 {
            return Err(invalid(
                "x",
                format!("toy encoder takes [n, 2], got {:?}", x.shape()),
            ));
        }
        let w = self.weight();
        Tensor::matrix(x.shape()[0], 1, x.rows().map(|r| r[0] + w * r[1]).collect())
    }
}

/// `P(sign(X₁ + b·X₂) ≠ sign(X₁))` for independent standard normals.
pub fn toy_risk(b: f64) -> f64 {
    (1.0 / (1.0 + b * b).sqrt()).acos() / std::f64::consts::PI
}

/// Scale of the second coordinate at which the toy risk reaches 1/4.
pub fn toy_far_scale(epsilon: f64) -> f64 {
    2.0 / epsilon.sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyAnalytic {
    pub align: f64,
    pub risk0: f64,
    pub risk1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyEmpirical {
    pub align: McEstimate,
    pub risk0: f64,
    pub risk1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub epsilon: f64,
    pub n: usize,
    pub seed: u64,
    /// Second-coordinate scales of the two probe domains.
    pub scales: [f64; 2],
    pub analytic: ToyAnalytic,
    pub empirical: ToyEmpirical,
    /// `|empirical − analytic| / std_err` for the alignment.
    pub align_z: f64,
}

/// The small-alignment, large-risk-gap construction: alignment `ε/2`
/// under `θ ~ N(0, 1)` scaling of `x₂`, yet 0-1 risk 0 on the domain
/// `x₂ ↦ 0` and 1/4 on `x₂ ↦ (2/√ε)·x₂`.
pub fn toy_counterexample(epsilon: f64, n: usize, seed: u64) -> Result<ToyReport> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(invalid("epsilon", "must be positive"));
    }
    let f = ToyEncoder { epsilon };
    let scales = [0.0, toy_far_scale(epsilon)];
    let ds = make_toy_axis_dataset(n, crate::seed::derive_seed(seed, "toy-data"))?;
    let align = alignment_loss(
        &f,
        &ds,
        &toy_axis_family(),
        1,
        crate::seed::derive_seed(seed, "toy-views"),
    )?;
    let sign = Decision::Threshold {
        feature: 0,
        threshold: 0.0,
    };
    let mut risks = [0.0; 2];
    for (r, &c) in risks.iter_mut().zip(&scales) {
        let dom = induce_domain(
            &ds,
            &Transformation::AxisScale {
                factors: vec![1.0, c],
            },
        )?;
        *r = super::probe::risk_01(&f, sign, &dom)?;
    }
    let analytic = ToyAnalytic {
        align: epsilon / 2.0,
        risk0: toy_risk(f.weight() * scales[0]),
        risk1: toy_risk(f.weight() * scales[1]),
    };
    Ok(ToyReport {
        epsilon,
        n,
        seed,
        scales,
        analytic,
        align_z: (align.mean - analytic.align).abs() / align.std_err,
        empirical: ToyEmpirical {
            align,
            risk0: risks[0],
            risk1: risks[1],
        },
    })
}
