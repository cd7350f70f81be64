//! Geometry of the Stiefel manifold `S(d, p) = { W ∈ ℝ^{d×p} : WᵀW = I_p }`.
//!
//! The manifold is treated as an embedded submanifold of `ℝ^{d×p}` with the
//! Euclidean metric `⟨A, B⟩ = trace(AᵀB)`. Tangent vectors at `W` are the
//! matrices `H` with `WᵀH` skew-symmetric. Steps are pulled back to the
//! manifold with the QR retraction and moved between tangent spaces by
//! orthogonal projection.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{DspError, Result};

/// Maximum tolerated `‖WᵀW − I‖_F` for a point on the manifold.
pub const ORTHONORMALITY_TOL: f64 = 1e-10;

/// A `d × p` matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint {
    matrix: DMatrix<f64>,
}

/// A `d × p` matrix in the tangent space of some base point.
///
/// The base point is not stored; every operation that needs it takes it
/// explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    matrix: DMatrix<f64>,
}

impl StiefelPoint {
    /// Wraps `matrix`, checking the orthonormality invariant.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let (d, p) = matrix.shape();
        if p == 0 || d < p {
            return Err(DspError::dim("stiefel point", "d >= p >= 1", format!("{d}x{p}")));
        }
        let residual = orthonormality_residual(&matrix);
        if !(residual <= ORTHONORMALITY_TOL) {
            return Err(DspError::param(format!(
                "matrix is not column-orthonormal (residual {residual:e})"
            )));
        }
        Ok(StiefelPoint { matrix })
    }

    /// Orthonormalizes the columns of `matrix` with the QR factor `qf(matrix)`.
    pub fn from_qr(matrix: &DMatrix<f64>) -> Result<Self> {
        let (d, p) = matrix.shape();
        if p == 0 || d < p {
            return Err(DspError::dim("stiefel point", "d >= p >= 1", format!("{d}x{p}")));
        }
        Ok(StiefelPoint { matrix: qf(matrix)? })
    }

    /// The first `p` columns of the `d × d` identity.
    pub fn identity(d: usize, p: usize) -> Result<Self> {
        StiefelPoint::new(DMatrix::identity(d, p))
    }

    /// A random point, drawn as `qf` of a Gaussian matrix.
    pub fn random<R: Rng + ?Sized>(d: usize, p: usize, rng: &mut R) -> Result<Self> {
        let g = DMatrix::from_fn(d, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        StiefelPoint::from_qr(&g)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn rank(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn residual(&self) -> f64 {
        orthonormality_residual(&self.matrix)
    }

    /// Orthogonal projection of an ambient matrix onto the tangent space:
    /// `G − W·sym(WᵀG)`.
    pub fn project_tangent(&self, g: &DMatrix<f64>) -> Result<TangentVector> {
        self.check_shape("project_tangent", g)?;
        let wtg = self.matrix.transpose() * g;
        let sym = (&wtg + wtg.transpose()) * 0.5;
        Ok(TangentVector { matrix: g - &self.matrix * sym })
    }

    /// QR retraction `qf(W + tH)`, with the triangular factor's diagonal kept
    /// positive.
    pub fn retract(&self, h: &TangentVector, t: f64) -> Result<StiefelPoint> {
        self.check_shape("retract", &h.matrix)?;
        if !t.is_finite() {
            return Err(DspError::param(format!("retraction step must be finite, got {t}")));
        }
        if t == 0.0 {
            return Ok(self.clone());
        }
        let moved = &self.matrix + &h.matrix * t;
        Ok(StiefelPoint { matrix: qf(&moved)? })
    }

    /// Projection-based vector transport of `h` (tangent at `self`) to the
    /// tangent space at `to`.
    pub fn transport(&self, to: &StiefelPoint, h: &TangentVector) -> Result<TangentVector> {
        self.check_shape("transport", &h.matrix)?;
        self.check_shape("transport", &to.matrix)?;
        to.project_tangent(&h.matrix)
    }

    fn check_shape(&self, context: &'static str, m: &DMatrix<f64>) -> Result<()> {
        if m.shape() != self.matrix.shape() {
            return Err(DspError::dim(
                context,
                format!("{}x{}", self.matrix.nrows(), self.matrix.ncols()),
                format!("{}x{}", m.nrows(), m.ncols()),
            ));
        }
        Ok(())
    }
}

impl TangentVector {
    /// Wraps a matrix that the caller asserts is tangent at `base`.
    pub fn new_at(base: &StiefelPoint, matrix: DMatrix<f64>) -> Result<Self> {
        base.check_shape("tangent vector", &matrix)?;
        Ok(TangentVector { matrix })
    }

    pub fn zeros(d: usize, p: usize) -> Self {
        TangentVector { matrix: DMatrix::zeros(d, p) }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn inner(&self, other: &TangentVector) -> f64 {
        inner(&self.matrix, &other.matrix)
    }

    pub fn norm(&self) -> f64 {
        self.matrix.norm()
    }

    pub fn scale(&self, s: f64) -> TangentVector {
        TangentVector { matrix: &self.matrix * s }
    }

    /// `self + s·other`.
    pub fn axpy(&self, s: f64, other: &TangentVector) -> TangentVector {
        TangentVector { matrix: &self.matrix + &other.matrix * s }
    }

    /// `‖sym(WᵀH)‖_F`; zero for an exact tangent vector at `base`.
    pub fn skew_residual(&self, base: &StiefelPoint) -> f64 {
        let wth = base.matrix.transpose() * &self.matrix;
        ((&wth + wth.transpose()) * 0.5).norm()
    }
}

/// `trace(AᵀB)`.
pub fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

/// `‖WᵀW − I_p‖_F`.
pub fn orthonormality_residual(w: &DMatrix<f64>) -> f64 {
    let p = w.ncols();
    (w.transpose() * w - DMatrix::<f64>::identity(p, p)).norm()
}

/// The orthonormal factor of a thin QR decomposition with positive diagonal
/// in the triangular factor.
///
/// Classical Gram-Schmidt with one reorthogonalization pass, which keeps the
/// result orthonormal to machine precision and produces the positive-diagonal
/// factor directly.
pub fn qf(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (d, p) = a.shape();
    let mut q = DMatrix::<f64>::zeros(d, p);
    for j in 0..p {
        let mut v = a.column(j).into_owned();
        let original = v.norm();
        if !original.is_finite() {
            return Err(DspError::NonFinite { iteration: 0, what: "qr input" });
        }
        for _ in 0..2 {
            for k in 0..j {
                let qk = q.column(k);
                let r = qk.dot(&v);
                v.axpy(-r, &qk, 1.0);
            }
        }
        let pivot = v.norm();
        if pivot <= 1e-12 * original.max(f64::MIN_POSITIVE) || pivot == 0.0 {
            return Err(DspError::NumericalRank { column: j, pivot });
        }
        q.set_column(j, &(v / pivot));
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(d: usize, p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(d, p, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn e1() -> StiefelPoint {
        StiefelPoint::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap()
    }

    #[test]
    fn normal_direction_projects_to_zero() {
        let w = e1();
        let g = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert_eq!(w.project_tangent(&g).unwrap().norm(), 0.0);
    }

    #[test]
    fn tangent_direction_is_unchanged() {
        let w = e1();
        let g = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert_eq!(w.project_tangent(&g).unwrap().matrix(), &g);
    }

    #[test]
    fn projection_is_idempotent_and_tangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = StiefelPoint::random(5, 2, &mut rng).unwrap();
        let g = gaussian(5, 2, &mut rng);
        let once = w.project_tangent(&g).unwrap();
        let twice = w.project_tangent(once.matrix()).unwrap();
        assert!((once.matrix() - twice.matrix()).norm() <= 1e-12);
        assert!(once.skew_residual(&w) <= 1e-12);
    }

    #[test]
    fn zero_step_retraction_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = StiefelPoint::random(6, 3, &mut rng).unwrap();
        let h = w.project_tangent(&gaussian(6, 3, &mut rng)).unwrap();
        assert_eq!(w.retract(&h, 0.0).unwrap(), w);
    }

    #[test]
    fn single_column_retraction_normalizes() {
        let w = e1();
        let h = TangentVector::new_at(&w, DMatrix::from_column_slice(2, 1, &[0.0, 1.0])).unwrap();
        for s in [0.5, 2.0, -3.0] {
            let r = w.retract(&h, s).unwrap();
            let norm = (1.0 + s * s).sqrt();
            assert_relative_eq!(r.matrix()[(0, 0)], 1.0 / norm, epsilon = 1e-15);
            assert_relative_eq!(r.matrix()[(1, 0)], s / norm, epsilon = 1e-15);
        }
    }

    #[test]
    fn retraction_stays_on_manifold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = StiefelPoint::random(8, 3, &mut rng).unwrap();
        let h = w.project_tangent(&gaussian(8, 3, &mut rng)).unwrap();
        let r = w.retract(&h, 0.7).unwrap();
        assert!(r.residual() <= ORTHONORMALITY_TOL);
    }

    #[test]
    fn retraction_is_first_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = StiefelPoint::random(7, 2, &mut rng).unwrap();
        let h = w.project_tangent(&gaussian(7, 2, &mut rng)).unwrap();
        let t = 1e-4;
        let r = w.retract(&h, t).unwrap();
        let ratio = (r.matrix() - (w.matrix() + h.matrix() * t)).norm() / t;
        assert!(ratio <= 1e-3, "ratio {ratio}");
    }

    #[test]
    fn transport_at_same_base_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = StiefelPoint::random(6, 2, &mut rng).unwrap();
        let h = w.project_tangent(&gaussian(6, 2, &mut rng)).unwrap();
        let moved = w.transport(&w, &h).unwrap();
        assert!((moved.matrix() - h.matrix()).norm() <= 1e-13);
        let zero = w.transport(&w, &TangentVector::zeros(6, 2)).unwrap();
        assert_eq!(zero.norm(), 0.0);
    }

    #[test]
    fn transport_lands_in_target_tangent_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = StiefelPoint::random(6, 2, &mut rng).unwrap();
        let b = StiefelPoint::random(6, 2, &mut rng).unwrap();
        let h = a.project_tangent(&gaussian(6, 2, &mut rng)).unwrap();
        assert!(a.transport(&b, &h).unwrap().skew_residual(&b) <= 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let w = e1();
        let g = DMatrix::zeros(3, 1);
        assert!(matches!(w.project_tangent(&g), Err(DspError::Dimension { .. })));
        assert!(matches!(StiefelPoint::new(DMatrix::zeros(1, 2)), Err(DspError::Dimension { .. })));
    }

    #[test]
    fn rank_deficient_step_is_reported() {
        let w = StiefelPoint::identity(3, 2).unwrap();
        // W + H collapses the second column onto the first.
        let h = TangentVector::new_at(
            &w,
            DMatrix::from_column_slice(3, 2, &[0.0, 0.0, 0.0, 1.0, -1.0, 0.0]),
        )
        .unwrap();
        assert!(matches!(w.retract(&h, 1.0), Err(DspError::NumericalRank { column: 1, .. })));
    }

    #[test]
    fn non_orthonormal_matrix_is_rejected() {
        let m = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        assert!(StiefelPoint::new(m.clone()).is_err());
        let fixed = StiefelPoint::from_qr(&m).unwrap();
        assert_relative_eq!(fixed.matrix()[(0, 0)], 0.5f64.sqrt(), epsilon = 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn projection_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w = StiefelPoint::random(6, 3, &mut rng).unwrap();
                let g1 = gaussian(6, 3, &mut rng);
                let g2 = gaussian(6, 3, &mut rng);
                let lhs = w.project_tangent(&(&g1 * a + &g2 * b)).unwrap();
                let rhs = w.project_tangent(&g1).unwrap().scale(a)
                    .axpy(b, &w.project_tangent(&g2).unwrap());
                prop_assert!((lhs.matrix() - rhs.matrix()).norm() <= 1e-12);
            }

            #[test]
            fn retraction_preserves_orthonormality(seed in 0u64..1000, t in -5.0f64..5.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w = StiefelPoint::random(10, 4, &mut rng).unwrap();
                let h = w.project_tangent(&gaussian(10, 4, &mut rng)).unwrap();
                let r = w.retract(&h, t).unwrap();
                prop_assert!(r.residual() <= ORTHONORMALITY_TOL);
            }
        }
    }
}
