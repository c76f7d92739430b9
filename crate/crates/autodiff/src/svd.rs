//! Polar-factor unitarization of square matrices and its reverse-mode rule.
//!
//! A latent matrix `G = U Σ Vᵀ` is mapped to the orthogonal matrix `Ĝ = U Vᵀ`.
//! With `A = Uᵀ dG V` the tangent is `dĜ = U W Vᵀ`, where
//! `W_ij = (A_ij − A_ji) / (σ_i + σ_j)`. The separate `1/(σ_j − σ_i)` terms of
//! the U and V differentials cancel in the product, so only the pairwise sums
//! of singular values appear as denominators.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;

use crate::tensor::{matmul, Tensor};
use crate::DiffError;

/// Smallest admissible `σ_i + σ_j` denominator.
pub const GAP_FLOOR: f64 = 1e-10;

static DEGENERATE_EVENTS: AtomicUsize = AtomicUsize::new(0);

/// Number of times a backward pass had to regularize a near-singular denominator.
pub fn degenerate_events() -> usize {
    DEGENERATE_EVENTS.load(Ordering::Relaxed)
}

/// Singular value decomposition of a square matrix in row-major form.
#[derive(Clone, Debug)]
pub struct PolarSvd {
    pub n: usize,
    /// `U`, row-major `n×n`.
    pub u: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `Vᵀ`, row-major `n×n`.
    pub vt: Vec<f64>,
    /// The decomposed matrix, row-major.
    pub g: Vec<f64>,
}

impl PolarSvd {
    pub fn compute(g: &Tensor) -> Result<Self, DiffError> {
        let n = g.rows();
        if g.shape().len() != 2 || g.cols() != n {
            return Err(DiffError::Shape(format!(
                "unitarize expects a square matrix, got {:?}",
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(DiffError::Svd(
                "latent matrix has non-finite entries".into(),
            ));
        }
        let m = DMatrix::from_row_slice(n, n, g.data());
        let svd = m
            .try_svd(true, true, f64::EPSILON, 0)
            .ok_or_else(|| DiffError::Svd("SVD did not converge".into()))?;
        let u = svd.u.ok_or_else(|| DiffError::Svd("missing U".into()))?;
        let vt = svd.v_t.ok_or_else(|| DiffError::Svd("missing Vᵀ".into()))?;
        let mut u_rm = vec![0.0; n * n];
        let mut vt_rm = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                u_rm[i * n + j] = u[(i, j)];
                vt_rm[i * n + j] = vt[(i, j)];
            }
        }
        Ok(Self {
            n,
            u: u_rm,
            sigma: svd.singular_values.iter().copied().collect(),
            vt: vt_rm,
            g: g.data().to_vec(),
        })
    }

    /// The orthogonal polar factor `U Vᵀ`.
    ///
    /// With nearly equal singular values the computed `U Vᵀ` can drift by
    /// ~1e-10 while staying orthogonal. One correction `Q ← Q (I + Ω + Ω²/2)`
    /// removes the skew part `K` of `QᵀG`, with `Ω Σ + Σ Ω = 2K` solved in the
    /// basis of `V`.
    pub fn polar(&self) -> Tensor {
        let n = self.n;
        let q = matmul(&self.u, &self.vt, n, n, n);
        let y = matmul(&transpose(&q, n), &self.g, n, n, n);
        let v = transpose(&self.vt, n);
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = 0.5 * (y[i * n + j] - y[j * n + i]);
            }
        }
        let mut om = matmul(&matmul(&self.vt, &k, n, n, n), &v, n, n, n);
        for i in 0..n {
            for j in 0..n {
                let denom = (self.sigma[i] + self.sigma[j]).max(GAP_FLOOR);
                om[i * n + j] *= 2.0 / denom;
            }
        }
        let om = matmul(&matmul(&v, &om, n, n, n), &self.vt, n, n, n);
        let om2 = matmul(&om, &om, n, n, n);
        let mut r = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                r[i * n + j] =
                    if i == j { 1.0 } else { 0.0 } + om[i * n + j] + 0.5 * om2[i * n + j];
            }
        }
        Tensor::matrix(n, n, matmul(&q, &r, n, n, n))
    }

    /// Adjoint of the latent matrix given the adjoint of `U Vᵀ`.
    pub fn vjp(&self, upstream: &Tensor) -> Tensor {
        let n = self.n;
        let v = transpose(&self.vt, n);
        let ut = transpose(&self.u, n);
        // B = Uᵀ Ḡ V
        let b = matmul(&matmul(&ut, upstream.data(), n, n, n), &v, n, n, n);
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let mut denom = self.sigma[i] + self.sigma[j];
                if denom < GAP_FLOOR {
                    DEGENERATE_EVENTS.fetch_add(1, Ordering::Relaxed);
                    denom = GAP_FLOOR;
                }
                w[i * n + j] = (b[i * n + j] - b[j * n + i]) / denom;
            }
        }
        Tensor::matrix(
            n,
            n,
            matmul(&matmul(&self.u, &w, n, n, n), &self.vt, n, n, n),
        )
    }
}

fn transpose(a: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[j * n + i] = a[i * n + j];
        }
    }
    out
}

/// `Ĝ = U Vᵀ` for the SVD of `g`.
pub fn unitarize(g: &Tensor) -> Result<Tensor, DiffError> {
    Ok(PolarSvd::compute(g)?.polar())
}

/// Adjoint of `g` for the map `g ↦ U Vᵀ`, given the adjoint of the output.
pub fn svd_unitarize_vjp(g: &Tensor, upstream: &Tensor) -> Result<Tensor, DiffError> {
    if upstream.shape() != g.shape() {
        return Err(DiffError::Shape(format!(
            "upstream adjoint {:?} does not match latent {:?}",
            upstream.shape(),
            g.shape()
        )));
    }
    Ok(PolarSvd::compute(g)?.vjp(upstream))
}

/// Largest entry of `|ĜᵀĜ − I|`.
pub fn orthogonality_defect(q: &Tensor) -> f64 {
    let n = q.rows();
    let qtq = q.transposed().matmul(q);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((qtq.at(i, j) - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_fixed() {
        let q = unitarize(&Tensor::identity(9)).unwrap();
        for (a, b) in q.data().iter().zip(Tensor::identity(9).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn scaled_rotation_maps_to_rotation() {
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let r = Tensor::matrix(2, 2, vec![c, -s, s, c]);
        let q = unitarize(&r.map(|x| 2.0 * x)).unwrap();
        for (a, b) in q.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn tangent_at_orthogonal_point_is_skew() {
        // At Σ = I, the adjoint is the skew part of Ḡ rotated into the U/V frame,
        // so the induced tangent keeps ĜᵀĜ = I to first order.
        let (c, s) = (0.7f64.cos(), 0.7f64.sin());
        let g = Tensor::matrix(2, 2, vec![c, -s, s, c]);
        let svd = PolarSvd::compute(&g).unwrap();
        let up = Tensor::matrix(2, 2, vec![0.3, -1.2, 0.5, 2.0]);
        let adj = svd.vjp(&up);
        // Ĝᵀ adj must be skew-symmetric
        let m = g.transposed().matmul(&adj);
        assert!((m.at(0, 1) + m.at(1, 0)).abs() < 1e-12);
        assert!(m.at(0, 0).abs() < 1e-12 && m.at(1, 1).abs() < 1e-12);
    }

    #[test]
    fn polar_factor_leaves_symmetric_remainder() {
        // nearly equal leading singular values
        let g = Tensor::matrix(
            3,
            3,
            vec![1.0, 0.2, 0.0, -0.2, 1.0 + 1e-9, 0.1, 0.0, 0.05, 0.3],
        );
        let q = unitarize(&g).unwrap();
        let h = q.transposed().matmul(&g);
        for i in 0..3 {
            for j in 0..3 {
                assert!((h.at(i, j) - h.at(j, i)).abs() < 1e-14);
            }
        }
        assert!(orthogonality_defect(&q) < 1e-14);
    }

    #[test]
    fn rejects_non_square() {
        assert!(matches!(
            unitarize(&Tensor::zeros(vec![2, 3])),
            Err(DiffError::Shape(_))
        ));
    }

    #[test]
    fn singular_input_is_regularized() {
        let before = degenerate_events();
        let g = Tensor::zeros(vec![3, 3]);
        let adj = svd_unitarize_vjp(&g, &Tensor::identity(3)).unwrap();
        assert!(adj.is_finite());
        assert!(degenerate_events() > before);
    }
}
