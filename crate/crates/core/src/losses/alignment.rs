use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Transformation, TransformationFamily};
use crate::error::{invalid, Result};
use crate::numcore::Tensor;
use crate::seed;

/// A feature map applied row-wise to a `[n, d]` batch.
pub trait Representation {
    fn features(&self, x: &Tensor) -> Result<Tensor>;
}

impl<F> Representation for F
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    fn features(&self, x: &Tensor) -> Result<Tensor> {
        self(x)
    }
}

/// Monte-Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub draws: usize,
}

impl McEstimate {
    /// Mean and standard error of iid values.
    pub fn from_values(values: &[f64], draws: usize) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().fold(0.0, |acc, v| acc + v) / n;
        let var = if values.len() > 1 {
            values
                .iter()
                .fold(0.0, |acc, v| acc + (v - mean) * (v - mean))
                / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std_err: (var / n).sqrt(),
            draws,
        }
    }
}

/// How the views of a sample are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    /// Independent draws from `π`, one seeded stream per sample, so the first
    /// `m` views of a longer stream are exactly the `m`-view set.
    Random,
    /// The first `m` grid members, identical for every sample.
    Exhaustive,
}

fn check_nonempty(ds: &Dataset) -> Result<()> {
    if ds.n() == 0 {
        return Err(invalid("dataset", "empty dataset"));
    }
    Ok(())
}

/// `f` applied to `t(x_i)` for every sample.
pub fn transformed_features(
    f: &dyn Representation,
    ds: &Dataset,
    t: &Transformation,
) -> Result<Tensor> {
    let shifted = crate::data::induce_domain(ds, t)?;
    f.features(shifted.samples())
}

/// Applies per-sample transformation lists; `views[i][v]` acts on sample `i`.
/// Returns one `[n, p]` feature tensor per view slot.
fn per_sample_view_features(
    f: &dyn Representation,
    ds: &Dataset,
    views: &[Vec<Transformation>],
) -> Result<Vec<Tensor>> {
    let (n, d) = (ds.n(), ds.dim());
    let m = views.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(m);
    for v in 0..m {
        let mut data = Vec::with_capacity(n * d);
        for (i, list) in views.iter().enumerate() {
            let t = &list[v];
            t.check_dim(d)?;
            let mut row = ds.sample(i).to_vec();
            t.apply_in_place(&mut row);
            data.extend(row);
        }
        out.push(f.features(&Tensor::matrix(n, d, data)?)?);
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y))
}

/// Per-sample stream of view draws.
pub fn sample_views(
    family: &TransformationFamily,
    seed: u64,
    sample: usize,
    m: usize,
) -> Vec<Transformation> {
    let mut rng = seed::rng(seed::derive_index(seed, sample as u64));
    (0..m).map(|_| family.sample(&mut rng)).collect()
}

/// Monte-Carlo estimate of `E ‖f(A₁x) − f(A₂x)‖²` with `A₁, A₂ ~ π`
/// independent. Each sample gets `pair_draws` pairs; the standard error is
/// taken over per-sample averages.
pub fn alignment_loss(
    f: &dyn Representation,
    ds: &Dataset,
    family: &TransformationFamily,
    pair_draws: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_nonempty(ds)?;
    if pair_draws == 0 {
        return Err(invalid("pair_draws", "need at least one pair"));
    }
    let views: Vec<Vec<Transformation>> = (0..ds.n())
        .map(|i| sample_views(family, seed, i, 2 * pair_draws))
        .collect();
    let feats = per_sample_view_features(f, ds, &views)?;
    let per_sample: Vec<f64> = (0..ds.n())
        .map(|i| {
            let s = (0..pair_draws).fold(0.0, |acc, r| {
                acc + sq_dist(feats[2 * r].row(i), feats[2 * r + 1].row(i))
            });
            s / pair_draws as f64
        })
        .collect();
    Ok(McEstimate::from_values(&per_sample, ds.n() * pair_draws))
}

fn grid_features(
    f: &dyn Representation,
    ds: &Dataset,
    family: &TransformationFamily,
) -> Result<Vec<Tensor>> {
    check_nonempty(ds)?;
    let grid = family
        .grid_transformations()
        .ok_or_else(|| invalid("family", "a finite grid is required"))?;
    if grid.len() < 2 {
        return Err(invalid(
            "family",
            format!("grid of size {} has no pairs", grid.len()),
        ));
    }
    grid.iter()
        .map(|t| transformed_features(f, ds, t))
        .collect()
}

/// Alignment with `π` uniform over the grid, averaged exactly over all
/// ordered grid pairs (diagonal included).
pub fn alignment_loss_grid(
    f: &dyn Representation,
    ds: &Dataset,
    family: &TransformationFamily,
) -> Result<f64> {
    let feats = grid_features(f, ds, family)?;
    let g = feats.len();
    let mut total = 0.0;
    for i in 0..ds.n() {
        let mut s = 0.0;
        for a in &feats {
            for b in &feats {
                s += sq_dist(a.row(i), b.row(i));
            }
        }
        total += s / (g * g) as f64;
    }
    Ok(total / ds.n() as f64)
}

/// `sup_{A,A'} ‖f(Ax) − f(A'x)‖²` per sample over a finite grid.
pub fn ar_values_exact(
    f: &dyn Representation,
    ds: &Dataset,
    family: &TransformationFamily,
) -> Result<Vec<f64>> {
    let feats = grid_features(f, ds, family)?;
    Ok((0..ds.n())
        .map(|i| max_pair_dist(&feats, i, feats.len()))
        .collect())
}

/// Mean over samples of the largest squared feature distance across all
/// pairs of grid members.
pub fn ar_loss_exact(
    f: &dyn Representation,
    ds: &Dataset,
    family: &TransformationFamily,
) -> Result<f64> {
    let v = ar_values_exact(f, ds, family)?;
    Ok(v.iter().fold(0.0, |acc, x| acc + x) / v.len() as f64)
}

fn max_pair_dist(feats: &[Tensor], i: usize, m: usize) -> f64 {
    let mut best = 0.0f64;
    for a in 0..m {
        for b in a + 1..m {
            best = best.max(sq_dist(feats[a].row(i), feats[b].row(i)));
        }
    }
    best
}

/// Empirical worst-pair alignment with `m` random views per sample.
pub fn ar_loss_empirical(
    f: &dyn Representation,
    ds: &Dataset,
    family: &TransformationFamily,
    m: usize,
    seed: u64,
) -> Result<f64> {
    ar_loss_empirical_mode(f, ds, family, m, seed, ViewMode::Random)
}

pub fn ar_loss_empirical_mode(
    f: &dyn Representation,
    ds: &Dataset,
    family: &TransformationFamily,
    m: usize,
    seed: u64,
    mode: ViewMode,
) -> Result<f64> {
    Ok(empirical_ar_curve(f, ds, family, &[m], seed, mode)?[0])
}

/// `L̂_AR(m)` for every `m` in `m_list`, computed from one nested view set:
/// the views behind a smaller `m` are a prefix of those behind a larger one.
pub fn empirical_ar_curve(
    f: &dyn Representation,
    ds: &Dataset,
    family: &TransformationFamily,
    m_list: &[usize],
    seed: u64,
    mode: ViewMode,
) -> Result<Vec<f64>> {
    check_nonempty(ds)?;
    let Some(&m_max) = m_list.iter().max() else {
        return Ok(vec![]);
    };
    if let Some(bad) = m_list.iter().find(|&&m| m < 2) {
        return Err(invalid("m", format!("{bad} views cannot form a pair")));
    }
    let feats = match mode {
        ViewMode::Random => {
            let views: Vec<Vec<Transformation>> = (0..ds.n())
                .map(|i| sample_views(family, seed, i, m_max))
                .collect();
            per_sample_view_features(f, ds, &views)?
        }
        ViewMode::Exhaustive => family
            .exhaustive(m_max)?
            .iter()
            .map(|t| transformed_features(f, ds, t))
            .collect::<Result<_>>()?,
    };
    // Running max over the growing prefix, recorded at each requested m.
    let n = ds.n();
    let mut running = vec![0.0f64; n];
    let mut at = vec![0.0; m_max + 1];
    for v in 1..m_max {
        for (i, r) in running.iter_mut().enumerate() {
            for u in 0..v {
                *r = r.max(sq_dist(feats[u].row(i), feats[v].row(i)));
            }
        }
        at[v + 1] = running.iter().fold(0.0, |acc, x| acc + x) / n as f64;
    }
    Ok(m_list.iter().map(|&m| at[m]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_toy_axis_dataset, FamilyKind, FamilySpec, ParamDomain, Sampling};
    use crate::numcore::l2_normalize;

    fn scale_grid(values: &[f64]) -> TransformationFamily {
        TransformationFamily::new(FamilySpec {
            kind: FamilyKind::AxisScale {
                dim: 2,
                axes: vec![0, 1],
            },
            domain: ParamDomain::Box {
                lo: vec![-2.0, -2.0],
                hi: vec![2.0, 2.0],
            },
            pi: Sampling::Uniform,
            grid: Some(values.iter().map(|&v| vec![v, v]).collect()),
        })
        .unwrap()
    }

    #[test]
    fn antipodal_grid_gives_four() {
        let ds = make_toy_axis_dataset(20, 3).unwrap();
        let fam = scale_grid(&[1.0, -1.0]);
        let f = |x: &Tensor| l2_normalize(x);
        assert!((ar_loss_exact(&f, &ds, &fam).unwrap() - 4.0).abs() < 1e-12);
        let dup = scale_grid(&[1.0, 1.0]);
        assert_eq!(ar_loss_exact(&f, &ds, &dup).unwrap(), 0.0);
        assert!(ar_loss_exact(&f, &ds, &scale_grid(&[1.0])).is_err());
    }

    #[test]
    fn constant_encoder_is_aligned() {
        let ds = make_toy_axis_dataset(30, 3).unwrap();
        let f = |x: &Tensor| Tensor::matrix(x.shape()[0], 2, vec![0.6, 0.8].repeat(x.shape()[0]));
        let fam = crate::data::toy_axis_family();
        let est = alignment_loss(&f, &ds, &fam, 3, 1).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.draws, 90);
    }

    #[test]
    fn exhaustive_matches_exact_and_two_views_match_one_pair() {
        let ds = make_toy_axis_dataset(25, 5).unwrap();
        let fam = scale_grid(&[1.0, 0.5, -0.7, 1.5]);
        let f = |x: &Tensor| {
            l2_normalize(&Tensor::matrix(
                x.shape()[0],
                2,
                x.data().iter().map(|v| v + 0.3).collect(),
            )?)
        };
        let exact = ar_loss_exact(&f, &ds, &fam).unwrap();
        let full = ar_loss_empirical_mode(&f, &ds, &fam, 4, 0, ViewMode::Exhaustive).unwrap();
        assert!((exact - full).abs() < 1e-15);
        let two = ar_loss_empirical(&f, &ds, &fam, 2, 9).unwrap();
        let one_pair = alignment_loss(&f, &ds, &fam, 1, 9).unwrap();
        assert!((two - one_pair.mean).abs() < 1e-15);
        assert!(ar_loss_empirical(&f, &ds, &fam, 1, 9).is_err());
    }

    #[test]
    fn nested_views_are_monotone() {
        let ds = make_toy_axis_dataset(40, 1).unwrap();
        let fam = crate::data::toy_axis_family();
        let f = |x: &Tensor| {
            l2_normalize(&Tensor::matrix(
                x.shape()[0],
                2,
                x.data().iter().map(|v| v + 0.1).collect(),
            )?)
        };
        let curve = empirical_ar_curve(&f, &ds, &fam, &[2, 3, 5, 9], 4, ViewMode::Random).unwrap();
        assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        let single = ar_loss_empirical(&f, &ds, &fam, 5, 4).unwrap();
        assert_eq!(single, curve[2]);
    }
}
