use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// A deterministic map `R^d -> R^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transformation {
    /// Multiplies coordinate `i` by `factors[i]`.
    AxisScale { factors: Vec<f64> },
    /// Rotates the `(plane[0], plane[1])` coordinate plane by `angle` radians.
    Rotation { plane: [usize; 2], angle: f64 },
    /// Adds `offset`.
    Shift { offset: Vec<f64> },
    /// Zeroes every coordinate whose `keep` flag is false.
    Mask { keep: Vec<bool> },
    /// Applies `steps` in order.
    Composition { steps: Vec<Transformation> },
}

impl Transformation {
    pub fn identity(dim: usize) -> Self {
        Transformation::AxisScale {
            factors: vec![1.0; dim],
        }
    }

    /// Flat parameter vector of the map.
    pub fn theta(&self) -> Vec<f64> {
        match self {
            Transformation::AxisScale { factors } => factors.clone(),
            Transformation::Rotation { angle, .. } => vec![*angle],
            Transformation::Shift { offset } => offset.clone(),
            Transformation::Mask { keep } => {
                keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
            }
            Transformation::Composition { steps } => {
                steps.iter().flat_map(Transformation::theta).collect()
            }
        }
    }

    /// Checks that the map accepts `dim`-dimensional inputs.
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        let fixed = |len: usize, what: &'static str| {
            if len == dim {
                Ok(())
            } else {
                Err(invalid(
                    what,
                    format!("transformation expects dimension {len}, sample has {dim}"),
                ))
            }
        };
        match self {
            Transformation::AxisScale { factors } => fixed(factors.len(), "axis_scale"),
            Transformation::Shift { offset } => fixed(offset.len(), "shift"),
            Transformation::Mask { keep } => fixed(keep.len(), "mask"),
            Transformation::Rotation { plane: [a, b], .. } => {
                if a == b || *a >= dim || *b >= dim {
                    Err(invalid(
                        "rotation",
                        format!("plane ({a}, {b}) invalid for dimension {dim}"),
                    ))
                } else {
                    Ok(())
                }
            }
            Transformation::Composition { steps } => {
                if steps.is_empty() {
                    return Err(invalid("composition", "empty step list"));
                }
                steps.iter().try_for_each(|s| s.check_dim(dim))
            }
        }
    }

    /// Applies the map in place. Dimensions must already be validated.
    pub(crate) fn apply_in_place(&self, x: &mut [f64]) {
        match self {
            Transformation::AxisScale { factors } => {
                for (v, f) in x.iter_mut().zip(factors) {
                    *v *= f;
                }
            }
            Transformation::Rotation {
                plane: [a, b],
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let (xa, xb) = (x[*a], x[*b]);
                x[*a] = c * xa - s * xb;
                x[*b] = s * xa + c * xb;
            }
            Transformation::Shift { offset } => {
                for (v, o) in x.iter_mut().zip(offset) {
                    *v += o;
                }
            }
            Transformation::Mask { keep } => {
                for (v, &k) in x.iter_mut().zip(keep) {
                    if !k {
                        *v = 0.0;
                    }
                }
            }
            Transformation::Composition { steps } => {
                for s in steps {
                    s.apply_in_place(x);
                }
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let mut out = x.to_vec();
        self.apply_in_place(&mut out);
        Ok(out)
    }

    /// Exact Lipschitz constant (largest singular value) for the linear kinds,
    /// an upper bound for compositions.
    pub fn lipschitz(&self) -> f64 {
        match self {
            Transformation::AxisScale { factors } => {
                factors.iter().fold(0.0, |m: f64, f| m.max(f.abs()))
            }
            Transformation::Rotation { .. } | Transformation::Shift { .. } => 1.0,
            Transformation::Mask { keep } => {
                if keep.iter().any(|&k| k) {
                    1.0
                } else {
                    0.0
                }
            }
            Transformation::Composition { steps } => {
                steps.iter().map(Transformation::lipschitz).product()
            }
        }
    }
}

pub fn apply_transformation(t: &Transformation, x: &[f64]) -> Result<Vec<f64>> {
    t.apply(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_scale_second_coordinate() {
        let t = Transformation::AxisScale {
            factors: vec![1.0, -0.7],
        };
        assert_eq!(t.apply(&[2.0, 3.0]).unwrap(), vec![2.0, 3.0 * -0.7]);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let t = Transformation::Rotation {
            plane: [0, 1],
            angle: 0.0,
        };
        assert_eq!(t.apply(&[1.5, -2.0, 4.0]).unwrap(), vec![1.5, -2.0, 4.0]);
    }

    #[test]
    fn composition_of_diagonal_scales() {
        let t = Transformation::Composition {
            steps: vec![
                Transformation::AxisScale {
                    factors: vec![2.0, 1.0],
                },
                Transformation::AxisScale {
                    factors: vec![1.0, 3.0],
                },
            ],
        };
        assert_eq!(t.apply(&[1.0, 1.0]).unwrap(), vec![2.0, 3.0]);
        assert_eq!(t.lipschitz(), 6.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let t = Transformation::Shift {
            offset: vec![1.0; 3],
        };
        assert!(t.apply(&[1.0, 2.0]).is_err());
        let r = Transformation::Rotation {
            plane: [0, 2],
            angle: 1.0,
        };
        assert!(r.apply(&[1.0, 2.0]).is_err());
        let c = Transformation::Composition { steps: vec![] };
        assert!(c.apply(&[1.0]).is_err());
    }

    #[test]
    fn mask_zeroes_dropped_axes() {
        let t = Transformation::Mask {
            keep: vec![true, false, true],
        };
        assert_eq!(t.apply(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 0.0, 3.0]);
    }
}
