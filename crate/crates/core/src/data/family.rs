//! Parameterized transformation families `{A_θ : θ ∈ Θ}` with a sampling
//! distribution over `Θ`.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::transform::Transformation;
use crate::error::{invalid, Result};
use crate::seed::{self, Rng};

/// How a parameter vector `θ` becomes a [`Transformation`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilyKind {
    /// `θ_i` scales coordinate `axes[i]`; other coordinates are untouched.
    AxisScale { dim: usize, axes: Vec<usize> },
    /// `θ_0` is the rotation angle in `plane`.
    Rotation { dim: usize, plane: [usize; 2] },
    /// `θ_i` is added to coordinate `axes[i]`.
    Shift { dim: usize, axes: Vec<usize> },
    /// Coordinate `axes[i]` is kept iff `θ_i >= 0.5`.
    Mask { dim: usize, axes: Vec<usize> },
    /// Concatenated parameters of the parts, applied in order.
    Composition { parts: Vec<FamilyKind> },
}

impl FamilyKind {
    pub fn dim(&self) -> usize {
        match self {
            FamilyKind::AxisScale { dim, .. }
            | FamilyKind::Rotation { dim, .. }
            | FamilyKind::Shift { dim, .. }
            | FamilyKind::Mask { dim, .. } => *dim,
            FamilyKind::Composition { parts } => parts.first().map_or(0, FamilyKind::dim),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            FamilyKind::AxisScale { axes, .. }
            | FamilyKind::Shift { axes, .. }
            | FamilyKind::Mask { axes, .. } => axes.len(),
            FamilyKind::Rotation { .. } => 1,
            FamilyKind::Composition { parts } => parts.iter().map(FamilyKind::param_count).sum(),
        }
    }

    /// A parameter value realizing the identity map.
    pub fn identity_theta(&self) -> Vec<f64> {
        match self {
            FamilyKind::AxisScale { axes, .. } | FamilyKind::Mask { axes, .. } => {
                vec![1.0; axes.len()]
            }
            FamilyKind::Shift { axes, .. } => vec![0.0; axes.len()],
            FamilyKind::Rotation { .. } => vec![0.0],
            FamilyKind::Composition { parts } => {
                parts.iter().flat_map(FamilyKind::identity_theta).collect()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let check_axes = |dim: usize, axes: &[usize]| {
            if dim == 0 {
                return Err(invalid("family", "dimension must be positive"));
            }
            if axes.is_empty() {
                return Err(invalid("family", "axis list is empty"));
            }
            if let Some(a) = axes.iter().find(|&&a| a >= dim) {
                return Err(invalid(
                    "family",
                    format!("axis {a} out of range for dimension {dim}"),
                ));
            }
            let mut sorted = axes.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != axes.len() {
                return Err(invalid("family", "duplicate axes"));
            }
            Ok(())
        };
        match self {
            FamilyKind::AxisScale { dim, axes }
            | FamilyKind::Shift { dim, axes }
            | FamilyKind::Mask { dim, axes } => check_axes(*dim, axes),
            FamilyKind::Rotation { dim, plane: [a, b] } => {
                if a == b || *a >= *dim || *b >= *dim {
                    Err(invalid(
                        "family",
                        format!("rotation plane ({a}, {b}) invalid for dimension {dim}"),
                    ))
                } else {
                    Ok(())
                }
            }
            FamilyKind::Composition { parts } => {
                let Some(first) = parts.first() else {
                    return Err(invalid("family", "composition without parts"));
                };
                for p in parts {
                    p.validate()?;
                    if p.dim() != first.dim() {
                        return Err(invalid("family", "composition parts disagree on dimension"));
                    }
                }
                Ok(())
            }
        }
    }

    /// Builds the transformation for `theta`. The length must equal
    /// [`param_count`](Self::param_count).
    pub fn realize(&self, theta: &[f64]) -> Transformation {
        match self {
            FamilyKind::AxisScale { dim, axes } => {
                let mut factors = vec![1.0; *dim];
                for (a, t) in axes.iter().zip(theta) {
                    factors[*a] = *t;
                }
                Transformation::AxisScale { factors }
            }
            FamilyKind::Rotation { plane, .. } => Transformation::Rotation {
                plane: *plane,
                angle: theta[0],
            },
            FamilyKind::Shift { dim, axes } => {
                let mut offset = vec![0.0; *dim];
                for (a, t) in axes.iter().zip(theta) {
                    offset[*a] = *t;
                }
                Transformation::Shift { offset }
            }
            FamilyKind::Mask { dim, axes } => {
                let mut keep = vec![true; *dim];
                for (a, t) in axes.iter().zip(theta) {
                    keep[*a] = *t >= 0.5;
                }
                Transformation::Mask { keep }
            }
            FamilyKind::Composition { parts } => {
                let mut offset = 0;
                let steps = parts
                    .iter()
                    .map(|p| {
                        let k = p.param_count();
                        let t = p.realize(&theta[offset..offset + k]);
                        offset += k;
                        t
                    })
                    .collect();
                Transformation::Composition { steps }
            }
        }
    }

    /// Largest Lipschitz constant over parameters with `|θ_i| <= bound_i`.
    fn lipschitz_over(&self, abs_bound: &[f64]) -> f64 {
        match self {
            FamilyKind::AxisScale { dim, axes } => {
                let untouched = if axes.len() < *dim { 1.0 } else { 0.0 };
                abs_bound.iter().fold(untouched, |m: f64, b| m.max(*b))
            }
            FamilyKind::Rotation { .. } | FamilyKind::Shift { .. } | FamilyKind::Mask { .. } => 1.0,
            FamilyKind::Composition { parts } => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let k = p.param_count();
                        let l = p.lipschitz_over(&abs_bound[offset..offset + k]);
                        offset += k;
                        l
                    })
                    .product()
            }
        }
    }
}

/// The parameter set `Θ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ParamDomain {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl ParamDomain {
    pub fn dim(&self) -> usize {
        match self {
            ParamDomain::Box { lo, .. } => lo.len(),
            ParamDomain::Ball { center, .. } => center.len(),
        }
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        match self {
            ParamDomain::Box { lo, hi } => {
                theta.len() == lo.len()
                    && theta
                        .iter()
                        .zip(lo.iter().zip(hi))
                        .all(|(t, (l, h))| l <= t && t <= h)
            }
            ParamDomain::Ball { center, radius } => {
                theta.len() == center.len()
                    && theta
                        .iter()
                        .zip(center)
                        .fold(0.0, |acc, (t, c)| acc + (t - c) * (t - c))
                        .sqrt()
                        <= *radius
            }
        }
    }

    fn abs_bounds(&self) -> Vec<f64> {
        match self {
            ParamDomain::Box { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(l, h)| l.abs().max(h.abs()))
                .collect(),
            ParamDomain::Ball { center, radius } => {
                center.iter().map(|c| c.abs() + radius).collect()
            }
        }
    }

    fn volume(&self) -> f64 {
        match self {
            ParamDomain::Box { lo, hi } => lo.iter().zip(hi).map(|(l, h)| h - l).product(),
            ParamDomain::Ball { center, radius } => {
                let k = center.len() as f64;
                std::f64::consts::PI.powf(k / 2.0) / statrs::function::gamma::gamma(k / 2.0 + 1.0)
                    * radius.powf(k)
            }
        }
    }
}

/// The sampling distribution `π` over `Θ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sampling {
    Uniform,
    /// Independent per-coordinate normals truncated to a box domain.
    TruncatedGaussian {
        mean: Vec<f64>,
        std: Vec<f64>,
    },
}

/// Serializable description of a family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub kind: FamilyKind,
    pub domain: ParamDomain,
    pub pi: Sampling,
    /// Explicit finite parameter list; when present, `π` is uniform over it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<Vec<f64>>>,
}

/// A validated family.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformationFamily {
    spec: FamilySpec,
    lipschitz_bound: f64,
    density_floor: Option<f64>,
}

impl TransformationFamily {
    pub fn new(spec: FamilySpec) -> Result<Self> {
        spec.kind.validate()?;
        let k = spec.kind.param_count();
        match &spec.domain {
            ParamDomain::Box { lo, hi } => {
                if lo.len() != k || hi.len() != k {
                    return Err(invalid("domain", format!("box needs {k} bounds per side")));
                }
                if lo
                    .iter()
                    .zip(hi)
                    .any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite())
                {
                    return Err(invalid("domain", "box requires finite lo <= hi"));
                }
            }
            ParamDomain::Ball { center, radius } => {
                if center.len() != k {
                    return Err(invalid(
                        "domain",
                        format!("ball center needs {k} coordinates"),
                    ));
                }
                if !(*radius > 0.0) || !radius.is_finite() {
                    return Err(invalid("domain", "ball radius must be positive"));
                }
            }
        }
        if !spec.domain.contains(&spec.kind.identity_theta()) {
            return Err(invalid(
                "domain",
                "parameter set does not contain the identity map",
            ));
        }
        if let Sampling::TruncatedGaussian { mean, std } = &spec.pi {
            if !matches!(spec.domain, ParamDomain::Box { .. }) {
                return Err(invalid("pi", "truncated Gaussian requires a box domain"));
            }
            if mean.len() != k || std.len() != k || std.iter().any(|s| !(*s > 0.0)) {
                return Err(invalid(
                    "pi",
                    format!("need {k} means and {k} positive deviations"),
                ));
            }
        }
        if let Some(grid) = &spec.grid {
            if grid.is_empty() {
                return Err(invalid("grid", "grid is empty"));
            }
            if let Some((i, _)) = grid
                .iter()
                .enumerate()
                .find(|(_, t)| !spec.domain.contains(t))
            {
                return Err(invalid(
                    "grid",
                    format!("grid point {i} lies outside the parameter set"),
                ));
            }
        }
        let lipschitz_bound = spec.kind.lipschitz_over(&spec.domain.abs_bounds());
        let density_floor = if spec.grid.is_some() {
            None
        } else {
            match &spec.pi {
                Sampling::Uniform => {
                    let v = spec.domain.volume();
                    (v > 0.0).then(|| 1.0 / v)
                }
                Sampling::TruncatedGaussian { mean, std } => {
                    let ParamDomain::Box { lo, hi } = &spec.domain else {
                        unreachable!()
                    };
                    truncated_gaussian_floor(lo, hi, mean, std)
                }
            }
        };
        Ok(Self {
            spec,
            lipschitz_bound,
            density_floor,
        })
    }

    pub fn spec(&self) -> &FamilySpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.kind.dim()
    }

    pub fn param_count(&self) -> usize {
        self.spec.kind.param_count()
    }

    /// Upper bound on the Lipschitz constant of every member.
    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz_bound
    }

    /// `inf_θ p_π(θ)` for continuous families.
    pub fn density_floor(&self) -> Option<f64> {
        self.density_floor
    }

    pub fn grid(&self) -> Option<&[Vec<f64>]> {
        self.spec.grid.as_deref()
    }

    pub fn grid_transformations(&self) -> Option<Vec<Transformation>> {
        self.grid()
            .map(|g| g.iter().map(|t| self.spec.kind.realize(t)).collect())
    }

    pub fn identity(&self) -> Transformation {
        self.spec.kind.realize(&self.spec.kind.identity_theta())
    }

    pub fn realize(&self, theta: &[f64]) -> Result<Transformation> {
        if !self.spec.domain.contains(theta) {
            return Err(invalid("theta", "parameter outside the family's domain"));
        }
        Ok(self.spec.kind.realize(theta))
    }

    /// One draw of `θ ~ π`.
    pub fn sample_theta(&self, rng: &mut Rng) -> Vec<f64> {
        if let Some(grid) = &self.spec.grid {
            return grid[rng.random_range(0..grid.len())].clone();
        }
        match (&self.spec.domain, &self.spec.pi) {
            (ParamDomain::Box { lo, hi }, Sampling::Uniform) => lo
                .iter()
                .zip(hi)
                .map(|(l, h)| l + (h - l) * rng.random::<f64>())
                .collect(),
            (ParamDomain::Ball { center, radius }, Sampling::Uniform) => {
                let k = center.len();
                let dir: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
                let norm = dir.iter().map(|d: &f64| d * d).sum::<f64>().sqrt();
                let r = radius * rng.random::<f64>().powf(1.0 / k as f64);
                center
                    .iter()
                    .zip(&dir)
                    .map(|(c, d)| c + r * d / norm)
                    .collect()
            }
            (ParamDomain::Box { lo, hi }, Sampling::TruncatedGaussian { mean, std }) => (0..lo
                .len())
                .map(|i| loop {
                    let z: f64 = StandardNormal.sample(rng);
                    let t = mean[i] + std[i] * z;
                    if lo[i] <= t && t <= hi[i] {
                        break t;
                    }
                })
                .collect(),
            (ParamDomain::Ball { .. }, Sampling::TruncatedGaussian { .. }) => {
                unreachable!("rejected in new")
            }
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Transformation {
        let theta = self.sample_theta(rng);
        self.spec.kind.realize(&theta)
    }

    /// The first `m` grid members in grid order.
    pub fn exhaustive(&self, m: usize) -> Result<Vec<Transformation>> {
        let grid = self
            .grid_transformations()
            .ok_or_else(|| invalid("family", "exhaustive sampling needs a finite grid"))?;
        if m > grid.len() {
            return Err(invalid(
                "m",
                format!("{m} views exceed grid size {}", grid.len()),
            ));
        }
        Ok(grid.into_iter().take(m).collect())
    }
}

fn truncated_gaussian_floor(lo: &[f64], hi: &[f64], mean: &[f64], std: &[f64]) -> Option<f64> {
    use statrs::function::erf::erf;
    let phi = |z: f64| 0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2));
    let mut floor = 1.0;
    for i in 0..lo.len() {
        let (l, h, m, s) = (lo[i], hi[i], mean[i], std[i]);
        let mass = phi((h - m) / s) - phi((l - m) / s);
        if !(mass > 0.0) || h <= l {
            return None;
        }
        let far = (l - m).abs().max((h - m).abs()) / s;
        let density = (-0.5 * far * far).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        floor *= density / mass;
    }
    Some(floor)
}

/// `m` iid draws from `π`, deterministic in `seed`.
pub fn sample_transformations(
    family: &TransformationFamily,
    m: usize,
    seed: u64,
) -> Result<Vec<Transformation>> {
    if m < 2 {
        return Err(invalid("m", "a positive pair needs at least two views"));
    }
    let mut rng = seed::rng(seed);
    Ok((0..m).map(|_| family.sample(&mut rng)).collect())
}

/// θ ~ N(0, 1) truncated to [−6, 6], multiplying the second coordinate of a
/// two-dimensional input.
pub fn toy_axis_family() -> TransformationFamily {
    TransformationFamily::new(FamilySpec {
        kind: FamilyKind::AxisScale {
            dim: 2,
            axes: vec![1],
        },
        domain: ParamDomain::Box {
            lo: vec![-6.0],
            hi: vec![6.0],
        },
        pi: Sampling::TruncatedGaussian {
            mean: vec![0.0],
            std: vec![1.0],
        },
        grid: None,
    })
    .expect("static family is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scale_grid(values: &[f64]) -> TransformationFamily {
        TransformationFamily::new(FamilySpec {
            kind: FamilyKind::AxisScale {
                dim: 2,
                axes: vec![1],
            },
            domain: ParamDomain::Box {
                lo: vec![-2.0],
                hi: vec![2.0],
            },
            pi: Sampling::Uniform,
            grid: Some(values.iter().map(|v| vec![*v]).collect()),
        })
        .unwrap()
    }

    #[test]
    fn exhaustive_returns_whole_grid() {
        let f = scale_grid(&[0.5, 1.0, 2.0]);
        let all = f.exhaustive(3).unwrap();
        assert_eq!(all, f.grid_transformations().unwrap());
        assert!(f.exhaustive(4).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_needs_two_views() {
        let f = toy_axis_family();
        assert_eq!(
            sample_transformations(&f, 5, 3).unwrap(),
            sample_transformations(&f, 5, 3).unwrap()
        );
        assert!(sample_transformations(&f, 1, 3).is_err());
    }

    #[test]
    fn grid_sampling_stays_on_grid() {
        let f = scale_grid(&[0.5, 2.0]);
        let mut rng = seed::rng(1);
        for _ in 0..200 {
            let t = f.sample_theta(&mut rng);
            assert!(t == vec![0.5] || t == vec![2.0]);
        }
    }

    #[test]
    fn identity_must_be_reachable() {
        let r = TransformationFamily::new(FamilySpec {
            kind: FamilyKind::AxisScale {
                dim: 2,
                axes: vec![1],
            },
            domain: ParamDomain::Box {
                lo: vec![2.0],
                hi: vec![3.0],
            },
            pi: Sampling::Uniform,
            grid: None,
        });
        assert!(r.is_err());
    }

    #[test]
    fn lipschitz_and_density_floor() {
        let f = toy_axis_family();
        assert_eq!(f.lipschitz_bound(), 6.0);
        // floor of the truncated standard normal sits at |θ| = 6
        let expected = (-18.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let got = f.density_floor().unwrap();
        assert!((got / expected - 1.0).abs() < 1e-6);

        let u = TransformationFamily::new(FamilySpec {
            kind: FamilyKind::Rotation {
                dim: 3,
                plane: [0, 2],
            },
            domain: ParamDomain::Ball {
                center: vec![0.0],
                radius: 0.5,
            },
            pi: Sampling::Uniform,
            grid: None,
        })
        .unwrap();
        assert!((u.density_floor().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(u.lipschitz_bound(), 1.0);
    }

    #[test]
    fn spec_json_round_trip() {
        let f = toy_axis_family();
        let s = serde_json::to_string(f.spec()).unwrap();
        let back: FamilySpec = serde_json::from_str(&s).unwrap();
        assert_eq!(&back, f.spec());
        assert!(
            serde_json::from_str::<FamilySpec>(&s.replace("\"pi\"", "\"bogus\":1,\"pi\"")).is_err()
        );
    }
}
