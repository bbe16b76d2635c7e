use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::probe::{square_risk, LinearHead};
use super::sigma::SigmaDelta;
use crate::data::{induce_domain, Dataset, TransformationFamily};
use crate::error::{invalid, Result};
use crate::losses::{alignment_loss, ar_loss_exact, sample_views, Representation};
use crate::numcore::Tensor;
use crate::seed;

/// Draws per sample used for class-center and augmented-risk estimates.
pub const DEFAULT_REPETITIONS: usize = 16;

/// Itemized inequality check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound: String,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs`.
    pub margin: f64,
    pub terms: BTreeMap<String, f64>,
    /// Set only when every constant in the bound is known.
    pub pass: Option<bool>,
    pub fitted_constants: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

/// `τ(σ, δ) = 4(1 − σ(1 − Lδ/4))`.
pub fn tau(sigma: f64, delta: f64, lipschitz: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(invalid("sigma", format!("{sigma} outside (0, 1]")));
    }
    if !(delta >= 0.0) {
        return Err(invalid("delta", "must be non-negative"));
    }
    if !(lipschitz > 0.0) {
        return Err(invalid("lipschitz", "must be positive"));
    }
    Ok(4.0 * (1.0 - sigma * (1.0 - lipschitz * delta / 4.0)))
}

fn check_unit_rows(t: &Tensor, what: &'static str) -> Result<()> {
    for (r, row) in t.rows().enumerate() {
        let n = row.iter().fold(0.0, |acc, v| acc + v * v).sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(invalid(
                what,
                format!("feature row {r} has norm {n}; unit-norm features required"),
            ));
        }
    }
    Ok(())
}

/// Checks `|R(h∘f; D_A) − R(h∘f; D_A')| ≤ ‖h‖(2‖h‖ + 2)·√L_AR` over every
/// ordered pair of grid members, with `‖h‖` the Frobenius norm and `L_AR`
/// computed exactly on the grid.
///
/// For unit features and one-hot targets,
/// `|‖hf − e‖² − ‖hf' − e‖²| ≤ ‖h‖‖f − f'‖(2‖h‖ + 2)`, and by Jensen
/// `E‖f(Ax) − f(A'x)‖ ≤ √(E sup ‖Δf‖²)`. The report also gives the constant
/// the bound would need in the form `c‖h‖·L_AR`.
pub fn theorem2_check(
    f: &dyn Representation,
    head: &LinearHead,
    ds: &Dataset,
    family: &TransformationFamily,
) -> Result<BoundReport> {
    let labels = ds.require_labels()?;
    let grid = family
        .grid_transformations()
        .ok_or_else(|| invalid("family", "an exact L_AR needs a finite grid"))?;
    let mut risks = Vec::with_capacity(grid.len());
    for t in &grid {
        let feats = f.features(induce_domain(ds, t)?.samples())?;
        check_unit_rows(&feats, "f")?;
        risks.push(square_risk(head, &feats, labels)?);
    }
    let l_ar = ar_loss_exact(f, ds, family)?;
    let h = head.frobenius_norm();
    let mut gap = 0.0f64;
    let mut violations = 0usize;
    let rhs = h * (2.0 * h + 2.0) * l_ar.sqrt();
    for a in &risks {
        for b in &risks {
            let g = (a - b).abs();
            gap = gap.max(g);
            if g > rhs {
                violations += 1;
            }
        }
    }
    let mut terms = BTreeMap::new();
    terms.insert("head_norm".into(), h);
    terms.insert("l_ar_exact".into(), l_ar);
    terms.insert("sqrt_l_ar".into(), l_ar.sqrt());
    terms.insert("constant".into(), 2.0 * h + 2.0);
    let mut fitted = BTreeMap::new();
    if h > 0.0 && l_ar > 0.0 {
        fitted.insert("c_linear_l_ar".into(), gap / (h * l_ar));
    }
    Ok(BoundReport {
        bound: "theorem2".into(),
        lhs: gap,
        rhs,
        margin: rhs - gap,
        terms,
        pass: Some(violations == 0),
        fitted_constants: fitted,
        details: serde_json::json!({ "domain_risks": risks, "violations": violations }),
    })
}

/// Features of one fresh `π` draw per sample per repetition, with labels.
pub fn augmented_features(
    f: &dyn Representation,
    ds: &Dataset,
    family: &TransformationFamily,
    repetitions: usize,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    if repetitions == 0 {
        return Err(invalid("repetitions", "need at least one"));
    }
    let labels = ds.require_labels()?;
    let d = ds.dim();
    let mut data = Vec::with_capacity(ds.n() * repetitions * d);
    let mut out_labels = Vec::with_capacity(ds.n() * repetitions);
    for r in 0..repetitions {
        let rep_seed = seed::derive_index(seed, r as u64);
        for i in 0..ds.n() {
            let t = &sample_views(family, rep_seed, i, 1)[0];
            data.extend(t.apply(ds.sample(i))?);
            out_labels.push(labels[i]);
        }
    }
    let x = Tensor::matrix(ds.n() * repetitions, d, data)?;
    Ok((f.features(&x)?, out_labels))
}

/// Per-class mean feature `μ_k` and class weight `p_k`.
pub fn class_centers(
    features: &Tensor,
    labels: &[usize],
    classes: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let p = features.shape()[1];
    let mut sums = vec![vec![0.0; p]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &y) in features.rows().zip(labels) {
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(row) {
            *s += v;
        }
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(invalid("dataset", format!("class {k} has no samples")));
    }
    let n = labels.len() as f64;
    let centers = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect();
    Ok((centers, counts.iter().map(|&c| c as f64 / n).collect()))
}

/// Settings shared by the Lemma-style diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedEstimate {
    pub repetitions: usize,
    pub pair_draws: usize,
    pub seed: u64,
}

impl Default for AugmentedEstimate {
    fn default() -> Self {
        Self {
            repetitions: DEFAULT_REPETITIONS,
            pair_draws: 1,
            seed: 0,
        }
    }
}

/// Itemizes the three right-hand terms of the augmented-risk bound:
/// `‖h‖√(Kσ)·L_align^{1/4}`, `‖h‖·τ(σ, δ)` and `Σ_k p_k ‖e_k − hμ_k‖`.
/// The absolute constant on the first term is reported as the ratio that
/// would close the gap (clamped at 0); there is no pass flag.
#[allow(clippy::too_many_arguments)]
pub fn lemma1_report(
    f: &dyn Representation,
    head: &LinearHead,
    ds: &Dataset,
    family: &TransformationFamily,
    sd: &SigmaDelta,
    lipschitz: f64,
    est: AugmentedEstimate,
) -> Result<BoundReport> {
    let k = ds.class_count();
    let (feats, labels) = augmented_features(
        f,
        ds,
        family,
        est.repetitions,
        seed::derive_seed(est.seed, "augmented"),
    )?;
    let lhs = square_risk(head, &feats, &labels)?;
    let (centers, weights) = class_centers(&feats, &labels, k)?;
    let align = alignment_loss(
        f,
        ds,
        family,
        est.pair_draws,
        seed::derive_seed(est.seed, "align"),
    )?;
    let h = head.frobenius_norm();
    let t = tau(sd.sigma_hat, sd.delta, lipschitz)?;
    let align_term = h * (k as f64 * sd.sigma_hat).sqrt() * align.mean.max(0.0).powf(0.25);
    let tau_term = h * t;
    let center_term = centers
        .iter()
        .zip(&weights)
        .enumerate()
        .fold(0.0, |acc, (c, (mu, w))| {
            let out = head.apply(mu);
            let dist = out
                .iter()
                .enumerate()
                .fold(0.0, |s, (j, v)| {
                    s + (v - f64::from(u8::from(j == c))).powi(2)
                })
                .sqrt();
            acc + w * dist
        });
    let rhs = align_term + tau_term + center_term;
    let mut terms = BTreeMap::new();
    terms.insert("align_term".into(), align_term);
    terms.insert("tau_term".into(), tau_term);
    terms.insert("center_term".into(), center_term);
    terms.insert("l_align".into(), align.mean);
    terms.insert("l_align_std_err".into(), align.std_err);
    terms.insert("tau".into(), t);
    terms.insert("head_norm".into(), h);
    terms.insert("sigma".into(), sd.sigma_hat);
    terms.insert("delta".into(), sd.delta);
    terms.insert("lipschitz".into(), lipschitz);
    let mut fitted = BTreeMap::new();
    if align_term > 0.0 {
        fitted.insert(
            "c".into(),
            ((lhs - tau_term - center_term) / align_term).max(0.0),
        );
    }
    Ok(BoundReport {
        bound: "lemma1".into(),
        lhs,
        rhs,
        margin: rhs - lhs,
        terms,
        pass: None,
        fitted_constants: fitted,
        details: serde_json::json!({ "centers": centers, "class_weights": weights }),
    })
}

/// Center geometry and the margin quantity
/// `γ = 1 − c₁·L_align^{1/4} − τ − c₂·max_{k≠k'} |μ_kᵀμ_k'|`.
/// The report's `lhs` is 0 and `rhs` is γ, so `margin > 0` iff γ > 0.
#[allow(clippy::too_many_arguments)]
pub fn theorem1_diagnostics(
    f: &dyn Representation,
    ds: &Dataset,
    family: &TransformationFamily,
    sd: &SigmaDelta,
    lipschitz: f64,
    c1: f64,
    c2: f64,
    est: AugmentedEstimate,
) -> Result<BoundReport> {
    let k = ds.class_count();
    if ds.n() < k {
        return Err(invalid(
            "dataset",
            format!("{} samples for {k} classes", ds.n()),
        ));
    }
    let (feats, labels) = augmented_features(
        f,
        ds,
        family,
        est.repetitions,
        seed::derive_seed(est.seed, "augmented"),
    )?;
    let (centers, _) = class_centers(&feats, &labels, k)?;
    let (smin, max_inner) = center_geometry(&centers);
    let align = alignment_loss(
        f,
        ds,
        family,
        est.pair_draws,
        seed::derive_seed(est.seed, "align"),
    )?;
    let t = tau(sd.sigma_hat, sd.delta, lipschitz)?;
    let gamma = 1.0 - c1 * align.mean.max(0.0).powf(0.25) - t - c2 * max_inner;
    let mut terms = BTreeMap::new();
    terms.insert("gamma_reg".into(), gamma);
    terms.insert("l_align".into(), align.mean);
    terms.insert("tau".into(), t);
    terms.insert("max_center_inner".into(), max_inner);
    terms.insert("center_sigma_min".into(), smin);
    terms.insert("c1".into(), c1);
    terms.insert("c2".into(), c2);
    Ok(BoundReport {
        bound: "theorem1".into(),
        lhs: 0.0,
        rhs: gamma,
        margin: gamma,
        terms,
        pass: None,
        fitted_constants: BTreeMap::new(),
        details: serde_json::json!({
            "centers": centers,
            "gamma_reg_positive": gamma > 0.0,
            "centers_independent": smin > 1e-8,
        }),
    })
}

/// Smallest singular value of the `[K, p]` center matrix (0 when `K > p`)
/// and the largest off-diagonal `|μ_kᵀμ_k'|`.
pub fn center_geometry(centers: &[Vec<f64>]) -> (f64, f64) {
    let k = centers.len();
    let p = centers.first().map_or(0, Vec::len);
    let m = DMatrix::from_fn(k, p, |r, c| centers[r][c]);
    let sv = m.singular_values();
    let smin = if k > p {
        0.0
    } else {
        sv.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let mut max_inner = 0.0f64;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                let ip = centers[a]
                    .iter()
                    .zip(&centers[b])
                    .fold(0.0, |acc, (x, y)| acc + x * y);
                max_inner = max_inner.max(ip.abs());
            }
        }
    }
    (smin, max_inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_values() {
        assert_eq!(tau(1.0, 0.0, 3.0).unwrap(), 0.0);
        assert!((tau(1.0, 4.0 / 3.0, 3.0).unwrap() - 4.0).abs() < 1e-15);
        assert!(tau(0.9, 0.1, 2.0).unwrap() > tau(1.0, 0.1, 2.0).unwrap());
        assert!(tau(0.0, 0.1, 2.0).is_err());
        assert!(tau(1.1, 0.1, 2.0).is_err());
    }

    #[test]
    fn orthonormal_and_duplicated_centers() {
        let (smin, inner) = center_geometry(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(inner, 0.0);
        assert!((smin - 1.0).abs() < 1e-12);
        let (smin, _) = center_geometry(&[vec![0.6, 0.8], vec![0.6, 0.8]]);
        assert!(smin < 1e-12);
    }
}
