//! Reconstruction, sparsity, Laplacian smoothing and output regularization
//! losses, and their weighted sum.
//!
//! The public functions evaluate a single sample on domain types. The
//! `*_grad` kernels work on flat slices in any [`Real`] precision and
//! accumulate `scale * dL/dx` into a caller-provided buffer; training and
//! gradient checking use those.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{AdjacencyMatrix, DisplacementField, Vec3, VertexWeightMask};
use crate::netcore::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rec: f64,
    pub sparsity: f64,
    pub laplace: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    /// Tuned on the synthetic world.
    fn default() -> Self {
        Self {
            rec: 1.0,
            sparsity: 1e-2,
            laplace: 1e-5,
            reg: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            rec: 0.0,
            sparsity: 0.0,
            laplace: 0.0,
            reg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_rec", self.rec),
            ("lambda_sparsity", self.sparsity),
            ("lambda_laplace", self.laplace),
            ("lambda_reg", self.reg),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rec: f64,
    pub sparsity: f64,
    pub laplace: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rec: f64,
    pub sparsity: f64,
    pub laplace: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossReport {
    pub fn terms(&self) -> LossTerms {
        LossTerms {
            rec: self.rec,
            sparsity: self.sparsity,
            laplace: self.laplace,
            reg: self.reg,
        }
    }
}

/// Whether the per-vertex reconstruction residual enters as its Euclidean
/// norm or its squared norm.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecNorm {
    #[default]
    Norm,
    Squared,
}

/// What the Laplacian term smooths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaplaceTarget {
    /// template + predicted displacement
    #[default]
    Positions,
    /// predicted displacement only
    Displacement,
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::size(what, expected, got));
    }
    Ok(())
}

/// `(1/n_v) * sum_k w_k * ||pred_k - target_k||`.
pub fn rec_loss(
    pred: &DisplacementField,
    target: &DisplacementField,
    mask: &VertexWeightMask,
) -> Result<f64> {
    rec_loss_with(pred, target, mask, RecNorm::Norm)
}

pub fn rec_loss_with(
    pred: &DisplacementField,
    target: &DisplacementField,
    mask: &VertexWeightMask,
    form: RecNorm,
) -> Result<f64> {
    check_len("target length", pred.len(), target.len())?;
    check_len("mask length", pred.len(), mask.len())?;
    let p: Vec<f64> = pred.to_flat().iter().map(|&v| v as f64).collect();
    let t: Vec<f64> = target.to_flat().iter().map(|&v| v as f64).collect();
    Ok(rec_grad(&p, &t, mask.weights(), form, None, 1.0))
}

/// `||eps_a||_1 + ||eps_e||_1`.
pub fn sparsity_loss(eps_a: &[f32], eps_e: &[f32]) -> f64 {
    eps_a.iter().chain(eps_e).map(|&v| (v as f64).abs()).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceValue {
    pub value: f64,
    /// Vertices without neighbors, left out of the sum.
    pub isolated: Vec<usize>,
}

/// `sum_i || v_i - mean_{j in N(i)} v_j ||` over non-isolated vertices.
pub fn laplace_loss(vertices: &[Vec3], adjacency: &AdjacencyMatrix) -> Result<LaplaceValue> {
    check_len("vertex count", adjacency.n_vertices(), vertices.len())?;
    let flat: Vec<f64> = vertices.iter().flatten().map(|&v| v as f64).collect();
    Ok(LaplaceValue {
        value: laplace_grad(&flat, adjacency, None, 1.0),
        isolated: adjacency.isolated(),
    })
}

/// Mean squared per-vertex magnitude of the output deformation.
pub fn reg_loss(pred: &DisplacementField) -> f64 {
    let flat: Vec<f64> = pred.to_flat().iter().map(|&v| v as f64).collect();
    reg_grad(&flat, None, 1.0)
}

pub fn overall_loss(terms: LossTerms, weights: &LossWeights) -> Result<LossReport> {
    for (name, v) in [
        ("rec", terms.rec),
        ("sparsity", terms.sparsity),
        ("laplace", terms.laplace),
        ("reg", terms.reg),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss term ({v})")));
        }
    }
    weights.validate()?;
    Ok(LossReport {
        rec: terms.rec,
        sparsity: terms.sparsity,
        laplace: terms.laplace,
        reg: terms.reg,
        total: weights.rec * terms.rec
            + weights.sparsity * terms.sparsity
            + weights.laplace * terms.laplace
            + weights.reg * terms.reg,
    })
}

pub(crate) fn rec_grad<T: Real>(
    pred: &[T],
    target: &[T],
    mask: &[f32],
    form: RecNorm,
    grad: Option<&mut [T]>,
    scale: T,
) -> T {
    let n = T::of(mask.len() as f64);
    let mut total = T::zero();
    let mut grad = grad;
    for (k, (p, t)) in pred.chunks_exact(3).zip(target.chunks_exact(3)).enumerate() {
        let w = T::of_f32(mask[k]);
        let r = [p[0] - t[0], p[1] - t[1], p[2] - t[2]];
        let sq = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
        let (value, factor) = match form {
            RecNorm::Norm => {
                let norm = sq.sqrt();
                // zero residual: take the zero subgradient
                let f = if norm > T::zero() {
                    w / norm
                } else {
                    T::zero()
                };
                (w * norm, f)
            }
            RecNorm::Squared => (w * sq, T::of(2.0) * w),
        };
        total += value;
        if let Some(g) = grad.as_deref_mut() {
            let c = scale * factor / n;
            for d in 0..3 {
                g[3 * k + d] += c * r[d];
            }
        }
    }
    total / n
}

pub(crate) fn reg_grad<T: Real>(pred: &[T], grad: Option<&mut [T]>, scale: T) -> T {
    let n = T::of((pred.len() / 3).max(1) as f64);
    if let Some(g) = grad {
        let c = T::of(2.0) * scale / n;
        for (gi, &p) in g.iter_mut().zip(pred) {
            *gi += c * p;
        }
    }
    pred.iter().map(|&v| v * v).sum::<T>() / n
}

pub(crate) fn sparsity_grad<T: Real>(cross: &[T], grad: Option<&mut [T]>, scale: T) -> T {
    if let Some(g) = grad {
        for (gi, &v) in g.iter_mut().zip(cross) {
            if v > T::zero() {
                *gi += scale;
            } else if v < T::zero() {
                *gi -= scale;
            }
        }
    }
    cross.iter().map(|v| v.abs()).sum()
}

/// Laplacian term on flat `3 n_v` positions.
pub(crate) fn laplace_grad<T: Real>(
    positions: &[T],
    adjacency: &AdjacencyMatrix,
    grad: Option<&mut [T]>,
    scale: T,
) -> T {
    let mut total = T::zero();
    let mut grad = grad;
    for i in 0..adjacency.n_vertices() {
        let nb = adjacency.neighbors(i);
        if nb.is_empty() {
            continue;
        }
        let inv = T::one() / T::of(nb.len() as f64);
        let mut u = [positions[3 * i], positions[3 * i + 1], positions[3 * i + 2]];
        for &j in nb {
            for d in 0..3 {
                u[d] -= inv * positions[3 * j + d];
            }
        }
        let norm = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        total += norm;
        if norm > T::zero() {
            if let Some(g) = grad.as_deref_mut() {
                let dir = u.map(|c| scale * c / norm);
                for d in 0..3 {
                    g[3 * i + d] += dir[d];
                }
                for &j in nb {
                    for d in 0..3 {
                        g[3 * j + d] -= inv * dir[d];
                    }
                }
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_adjacency, FaceMesh};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(v: Vec<Vec3>) -> DisplacementField {
        DisplacementField::new(v).unwrap()
    }

    #[test]
    fn rec_examples() {
        let a = field(vec![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]);
        assert_eq!(
            rec_loss(&a, &a, &VertexWeightMask::uniform(2)).unwrap(),
            0.0
        );
        let p = field(vec![[3.0, 4.0, 0.0]]);
        let t = field(vec![[0.0, 0.0, 0.0]]);
        assert_eq!(
            rec_loss(&p, &t, &VertexWeightMask::uniform(1)).unwrap(),
            5.0
        );
        assert_eq!(
            rec_loss_with(&p, &t, &VertexWeightMask::uniform(1), RecNorm::Squared).unwrap(),
            25.0
        );
        assert!(rec_loss(&p, &a, &VertexWeightMask::uniform(1)).is_err());
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity_loss(&[0.0; 3], &[0.0; 3]), 0.0);
        assert_eq!(sparsity_loss(&[1.0, -2.0, 0.5], &[0.0, 0.0, 0.0]), 3.5);
    }

    #[test]
    fn reg_examples() {
        assert_eq!(reg_loss(&DisplacementField::zeros(4)), 0.0);
        assert_eq!(reg_loss(&field(vec![[2.0, 0.0, 0.0]])), 4.0);
    }

    #[test]
    fn overall_examples() {
        let terms = LossTerms {
            rec: 1.0,
            sparsity: 2.0,
            laplace: 3.0,
            reg: 4.0,
        };
        assert_eq!(
            overall_loss(terms, &LossWeights::zero()).unwrap().total,
            0.0
        );
        let ones = LossWeights {
            rec: 1.0,
            sparsity: 1.0,
            laplace: 1.0,
            reg: 1.0,
        };
        assert_eq!(overall_loss(terms, &ones).unwrap().total, 10.0);
        let bad = LossTerms {
            rec: f64::NAN,
            ..terms
        };
        assert!(matches!(overall_loss(bad, &ones), Err(Error::NonFinite(_))));
    }

    #[test]
    fn laplace_chain_and_constant() {
        // collinear path 0 - 1 - 2
        let mesh = FaceMesh::new(vec![[0.0; 3]; 3], vec![]).unwrap();
        let adj = AdjacencyMatrix::from_lists(vec![vec![1], vec![0, 2], vec![1]]).unwrap();
        let v = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let l = laplace_loss(&v, &adj).unwrap();
        // ends: distance 1 to their single neighbor; middle: 0
        assert!((l.value - 2.0).abs() < 1e-12);
        assert!(l.isolated.is_empty());

        let coincident = vec![[4.0, -1.0, 2.0]; 3];
        assert_eq!(laplace_loss(&coincident, &adj).unwrap().value, 0.0);
        assert!(
            laplace_loss(&v, &build_adjacency(&mesh))
                .unwrap()
                .isolated
                .len()
                == 3
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 6;
        let mesh = FaceMesh::new(
            (0..n)
                .map(|_| [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()])
                .collect(),
            vec![[0, 1, 2], [1, 2, 3], [2, 3, 4], [3, 4, 5], [0, 2, 4]],
        )
        .unwrap();
        let adj = build_adjacency(&mesh);
        let x: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask: Vec<f32> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();

        let fns: Vec<Box<dyn Fn(&[f64], Option<&mut [f64]>) -> f64>> = vec![
            Box::new(|p, g| rec_grad(p, &t, &mask, RecNorm::Norm, g, 1.0)),
            Box::new(|p, g| rec_grad(p, &t, &mask, RecNorm::Squared, g, 1.0)),
            Box::new(|p, g| reg_grad(p, g, 1.0)),
            Box::new(|p, g| sparsity_grad(p, g, 1.0)),
            Box::new(|p, g| laplace_grad(p, &adj, g, 1.0)),
        ];
        for f in &fns {
            let mut g = vec![0.0; x.len()];
            f(&x, Some(&mut g));
            for i in 0..x.len() {
                let h = 1e-6;
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (f(&xp, None) - f(&xm, None)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6, "component {i}: {fd} vs {}", g[i]);
            }
        }
    }
}
