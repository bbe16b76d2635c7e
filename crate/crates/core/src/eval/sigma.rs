use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Transformation, TransformationFamily};
use crate::error::{invalid, Result};
use crate::seed;

/// Classes up to this size are searched exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CliqueMethod {
    Exhaustive,
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSigma {
    pub class: usize,
    pub size: usize,
    /// Dataset indices of the retained subset.
    pub members: Vec<usize>,
    pub sigma: f64,
    pub method: CliqueMethod,
    /// Pairwise `d̂_A` within the class, indexed like `class_indices`.
    pub distances: Vec<Vec<f64>>,
    pub class_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaDelta {
    pub delta: f64,
    /// `min_k σ̂_k`; a lower bound on σ for this δ.
    pub sigma_hat: f64,
    pub per_class: Vec<ClassSigma>,
    /// How the transformation set behind `d̂_A` was formed.
    pub transformations: String,
}

/// `min_{A₁,A₂ ∈ T} ‖A₁x₁ − A₂x₂‖` over the given images.
fn min_image_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for u in a {
        for v in b {
            let d = u
                .iter()
                .zip(v)
                .fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y));
            best = best.min(d);
        }
    }
    best.sqrt()
}

/// Exact `d̂_A` matrix for the given points and transformation set.
pub fn transformed_distances(
    points: &[&[f64]],
    transforms: &[Transformation],
) -> Result<Vec<Vec<f64>>> {
    let images: Vec<Vec<Vec<f64>>> = points
        .iter()
        .map(|x| transforms.iter().map(|t| t.apply(x)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let n = points.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = min_image_distance(&images[i], &images[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}

fn adjacency(d: &[Vec<f64>], delta: f64) -> Vec<Vec<bool>> {
    d.iter()
        .map(|row| row.iter().map(|&v| v <= delta).collect())
        .collect()
}

/// Largest clique by subset enumeration; among equally large cliques the one
/// with the smallest bitmask wins.
pub fn max_clique_exhaustive(adj: &[Vec<bool>]) -> Vec<usize> {
    let n = adj.len();
    assert!(
        n <= 20,
        "exhaustive clique search is limited to small graphs"
    );
    let mut best: u32 = 0;
    let mut best_size = 0;
    for mask in 1u32..(1u32 << n) {
        let size = mask.count_ones() as usize;
        if size <= best_size {
            continue;
        }
        let members: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        let clique = members
            .iter()
            .all(|&i| members.iter().all(|&j| i == j || adj[i][j]));
        if clique {
            best = mask;
            best_size = size;
        }
    }
    (0..n).filter(|&i| best & (1 << i) != 0).collect()
}

/// Starts at the highest-degree vertex and keeps adding the highest-degree
/// vertex adjacent to every member. Ties go to the lowest index.
pub fn greedy_clique(adj: &[Vec<bool>]) -> Vec<usize> {
    let n = adj.len();
    if n == 0 {
        return vec![];
    }
    let degree: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && adj[i][j]).count())
        .collect();
    let pick = |cands: &mut dyn Iterator<Item = usize>| {
        let mut best: Option<usize> = None;
        for c in cands {
            if best.is_none_or(|b| degree[c] > degree[b]) {
                best = Some(c);
            }
        }
        best
    };
    let mut clique = vec![pick(&mut (0..n)).expect("non-empty")];
    loop {
        let mut cands =
            (0..n).filter(|&c| !clique.contains(&c) && clique.iter().all(|&m| adj[m][c]));
        match pick(&mut cands) {
            Some(c) => clique.push(c),
            None => break,
        }
    }
    clique.sort_unstable();
    clique
}

/// Estimates the fraction σ of each class that stays within `d̂_A ≤ δ`.
///
/// `d̂_A` minimizes over the family's grid when it has one, otherwise over
/// `transformation_samples` draws from `π` (plus the identity), so it is an
/// upper bound of the true infimum and σ̂ is a lower bound.
pub fn estimate_sigma_delta(
    ds: &Dataset,
    family: &TransformationFamily,
    delta: f64,
    transformation_samples: usize,
    seed: u64,
) -> Result<SigmaDelta> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(invalid("delta", "must be finite and non-negative"));
    }
    let labels = ds.require_labels()?;
    if family.dim() != ds.dim() {
        return Err(invalid("family", "dimension differs from the dataset"));
    }
    let (transforms, how) = match family.grid_transformations() {
        Some(g) => {
            let n = g.len();
            (g, format!("grid ({n} members)"))
        }
        None => {
            if transformation_samples == 0 {
                return Err(invalid(
                    "transformation_samples",
                    "continuous family needs at least one draw",
                ));
            }
            let mut rng = seed::rng(seed);
            let mut t = vec![family.identity()];
            t.extend((0..transformation_samples).map(|_| family.sample(&mut rng)));
            (
                t,
                format!("identity + {transformation_samples} draws from pi"),
            )
        }
    };
    let mut per_class = Vec::with_capacity(ds.class_count());
    for k in 0..ds.class_count() {
        let idx: Vec<usize> = (0..ds.n()).filter(|&i| labels[i] == k).collect();
        if idx.is_empty() {
            return Err(invalid("dataset", format!("class {k} has no samples")));
        }
        let points: Vec<&[f64]> = idx.iter().map(|&i| ds.sample(i)).collect();
        let d = transformed_distances(&points, &transforms)?;
        let adj = adjacency(&d, delta);
        let (local, method) = if idx.len() <= EXHAUSTIVE_LIMIT {
            (max_clique_exhaustive(&adj), CliqueMethod::Exhaustive)
        } else {
            (greedy_clique(&adj), CliqueMethod::Greedy)
        };
        per_class.push(ClassSigma {
            class: k,
            size: idx.len(),
            sigma: local.len() as f64 / idx.len() as f64,
            members: local.iter().map(|&l| idx[l]).collect(),
            method,
            distances: d,
            class_indices: idx,
        });
    }
    Ok(SigmaDelta {
        delta,
        sigma_hat: per_class
            .iter()
            .map(|c| c.sigma)
            .fold(f64::INFINITY, f64::min),
        per_class,
        transformations: how,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FamilyKind, FamilySpec, ParamDomain, Sampling};
    use crate::numcore::Tensor;

    fn identity_family(dim: usize) -> TransformationFamily {
        TransformationFamily::new(FamilySpec {
            kind: FamilyKind::AxisScale { dim, axes: vec![0] },
            domain: ParamDomain::Box {
                lo: vec![1.0],
                hi: vec![1.0],
            },
            pi: Sampling::Uniform,
            grid: Some(vec![vec![1.0]]),
        })
        .unwrap()
    }

    fn line(points: &[f64]) -> Dataset {
        let data = points.iter().flat_map(|&p| [p, 0.0]).collect();
        Dataset::new(
            Tensor::matrix(points.len(), 2, data).unwrap(),
            Some(vec![0; points.len()]),
            1,
        )
        .unwrap()
    }

    #[test]
    fn diameter_covering_delta_keeps_everything() {
        let ds = line(&[0.0, 1.0, 3.0]);
        let sd = estimate_sigma_delta(&ds, &identity_family(2), 3.0, 0, 0).unwrap();
        assert_eq!(sd.sigma_hat, 1.0);
    }

    #[test]
    fn zero_delta_gives_singletons() {
        let ds = line(&[0.0, 1.0, 3.0, 4.5]);
        let sd = estimate_sigma_delta(&ds, &identity_family(2), 0.0, 0, 0).unwrap();
        assert_eq!(sd.sigma_hat, 0.25);
    }

    #[test]
    fn greedy_prefers_high_degree() {
        // Path 0-1-2 plus isolated 3: greedy starts at 1 and adds 0.
        let adj = vec![
            vec![true, true, false, false],
            vec![true, true, true, false],
            vec![false, true, true, false],
            vec![false, false, false, true],
        ];
        assert_eq!(greedy_clique(&adj), vec![0, 1]);
        assert_eq!(max_clique_exhaustive(&adj), vec![0, 1]);
    }
}
