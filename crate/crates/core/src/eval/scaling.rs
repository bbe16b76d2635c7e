use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FamilySpec, ParamDomain, TransformationFamily};
use crate::error::{invalid, Result};
use crate::losses::{ar_loss_exact, empirical_ar_curve, Representation, ViewMode};
use crate::seed;

/// Points in the reference grid built for a one-parameter continuous family.
pub const DENSE_REFERENCE_POINTS: usize = 513;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    /// Requested view count.
    pub m: usize,
    /// View count actually used (differs only after clamping).
    pub m_used: usize,
    pub mean_gap: f64,
    pub max_gap: f64,
    pub min_gap: f64,
    pub std_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingStudy {
    pub reference: f64,
    /// How the reference supremum was computed.
    pub reference_kind: String,
    pub repeats: usize,
    pub seed: u64,
    pub mode: ViewMode,
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of `ln(mean_gap)` against `ln(m)` over rows with
    /// a positive gap; `None` with fewer than two such rows.
    pub log_log_slope: Option<f64>,
    pub notes: Vec<String>,
}

impl ScalingStudy {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("m,m_used,mean_gap,max_gap,min_gap,std_err\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:?},{:?},{:?},{:?}\n",
                r.m, r.m_used, r.mean_gap, r.max_gap, r.min_gap, r.std_err
            ));
        }
        out
    }
}

/// The family itself when it has a grid; for a one-parameter box family, a
/// copy whose grid is `DENSE_REFERENCE_POINTS` evenly spaced values
/// including both ends.
pub fn reference_family(family: &TransformationFamily) -> Result<(TransformationFamily, String)> {
    if let Some(g) = family.grid() {
        return Ok((family.clone(), format!("grid ({} members)", g.len())));
    }
    match &family.spec().domain {
        ParamDomain::Box { lo, hi } if lo.len() == 1 => {
            let (a, b) = (lo[0], hi[0]);
            let last = (DENSE_REFERENCE_POINTS - 1) as f64;
            let grid = (0..DENSE_REFERENCE_POINTS)
                .map(|i| vec![a + (b - a) * i as f64 / last])
                .collect();
            let spec = FamilySpec {
                grid: Some(grid),
                ..family.spec().clone()
            };
            Ok((
                TransformationFamily::new(spec)?,
                format!("dense grid ({DENSE_REFERENCE_POINTS} points on [{a}, {b}])"),
            ))
        }
        _ => Err(invalid(
            "family",
            "an exact reference needs a finite grid or a one-parameter box domain",
        )),
    }
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy = xs
        .iter()
        .zip(ys)
        .fold(0.0, |acc, (x, y)| acc + (x - mx) * (y - my));
    let sxx = xs.iter().fold(0.0, |acc, x| acc + (x - mx) * (x - mx));
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Gap between the exact worst-pair alignment and its `m`-view estimate,
/// for each `m` in `m_list` and over `repeats` independent view sets.
///
/// Within one repeat the views for every `m` are nested, so each repeat's
/// gap, and therefore the mean, is non-increasing in `m`.
pub fn view_scaling_study(
    f: &dyn Representation,
    ds: &Dataset,
    family: &TransformationFamily,
    m_list: &[usize],
    repeats: usize,
    seed: u64,
    mode: ViewMode,
) -> Result<ScalingStudy> {
    if m_list.is_empty() {
        return Err(invalid("m_list", "empty"));
    }
    if m_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("m_list", "must be strictly increasing"));
    }
    if repeats == 0 {
        return Err(invalid("repeats", "need at least one"));
    }
    let (reference_family, reference_kind) = reference_family(family)?;
    let reference = ar_loss_exact(f, ds, &reference_family)?;

    let mut notes = Vec::new();
    let used: Vec<usize> = match mode {
        ViewMode::Random => m_list.to_vec(),
        ViewMode::Exhaustive => {
            let size = family
                .grid()
                .ok_or_else(|| invalid("family", "exhaustive mode needs a finite grid"))?
                .len();
            m_list
                .iter()
                .map(|&m| {
                    if m > size {
                        notes.push(format!("m = {m} exceeds grid size {size}; clamped"));
                        size
                    } else {
                        m
                    }
                })
                .collect()
        }
    };

    let mut gaps = vec![Vec::with_capacity(repeats); m_list.len()];
    for r in 0..repeats {
        let curve = empirical_ar_curve(
            f,
            ds,
            family,
            &used,
            seed::derive_index(seed, r as u64),
            mode,
        )?;
        for (g, est) in gaps.iter_mut().zip(curve) {
            g.push(reference - est);
        }
    }

    let rows: Vec<ScalingRow> = m_list
        .iter()
        .zip(&used)
        .zip(&gaps)
        .map(|((&m, &m_used), g)| {
            let n = g.len() as f64;
            let mean = g.iter().sum::<f64>() / n;
            let var = if g.len() > 1 {
                g.iter().fold(0.0, |acc, v| acc + (v - mean) * (v - mean)) / (n - 1.0)
            } else {
                0.0
            };
            ScalingRow {
                m,
                m_used,
                mean_gap: mean,
                max_gap: g.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                min_gap: g.iter().copied().fold(f64::INFINITY, f64::min),
                std_err: (var / n).sqrt(),
            }
        })
        .collect();

    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.mean_gap > 0.0)
        .map(|r| ((r.m_used as f64).ln(), r.mean_gap.ln()))
        .unzip();
    Ok(ScalingStudy {
        reference,
        reference_kind,
        repeats,
        seed,
        mode,
        log_log_slope: least_squares_slope(&xs, &ys),
        rows,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_power_law() {
        let xs: Vec<f64> = [2.0f64, 4.0, 8.0].iter().map(|v| v.ln()).collect();
        let ys: Vec<f64> = [2.0f64, 4.0, 8.0].iter().map(|v| (3.0 / v).ln()).collect();
        assert!((least_squares_slope(&xs, &ys).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(least_squares_slope(&xs[..1], &ys[..1]), None);
    }
}
