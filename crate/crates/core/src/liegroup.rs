//! SO(3) and SE_K(3) primitives.
//!
//! An [`ExtendedPose`] is a rotation together with `K` translation-like
//! columns that share it (velocity, position, anchor positions, ...). As a
//! matrix it is
//!
//! ```text
//! | R  c_1 ... c_K |
//! | 0     I_K      |
//! ```
//!
//! Tangent vectors are ordered `[θ; c_1; ...; c_K]` and have length `3 + 3K`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};

/// Angles below this use Taylor expansions in exp/log/Jacobians.
pub const SMALL_ANGLE: f64 = 1e-7;

/// Logarithms are refused within this distance of π.
pub const LOG_PI_MARGIN: f64 = 1e-6;

/// Skew-symmetric matrix `⌊v×⌋`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`]; reads the antisymmetric part of `m`.
#[inline]
pub fn unskew(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues formula without input validation. Hot loops call this directly.
pub fn exp_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = skew(omega);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + w + 0.5 * w * w;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + a * w + b * w * w
}

/// Exponential map of SO(3).
pub fn so3_exp(omega: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if !omega.iter().all(|x| x.is_finite()) {
        return Err(Error::invalid("so3_exp: non-finite rotation vector"));
    }
    Ok(exp_so3(omega))
}

/// Logarithm of SO(3). Fails within [`LOG_PI_MARGIN`] of a half turn.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    if !r.iter().all(|x| x.is_finite()) {
        return Err(Error::invalid("so3_log: non-finite rotation"));
    }
    let anti = unskew(r);
    let s = anti.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    if theta > std::f64::consts::PI - LOG_PI_MARGIN {
        return Err(Error::AmbiguousLog(theta));
    }
    if theta < SMALL_ANGLE {
        // θ/sinθ ≈ 1 + θ²/6
        return Ok(anti * (1.0 + s * s / 6.0));
    }
    if theta < 3.0 {
        return Ok(anti * (theta / s));
    }
    // Near π the antisymmetric part is tiny; take the axis from the
    // symmetric part and only its sign from `anti`.
    let sym = 0.5 * (r + r.transpose()) - Matrix3::identity() * c;
    let (mut col, mut best) = (0, sym[(0, 0)]);
    for i in 1..3 {
        if sym[(i, i)] > best {
            best = sym[(i, i)];
            col = i;
        }
    }
    let mut axis: Vector3<f64> = sym.column(col).into();
    axis /= axis.norm();
    if axis.dot(&anti) < 0.0 {
        axis = -axis;
    }
    Ok(axis * theta)
}

/// Left Jacobian of SO(3).
pub fn left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let w = skew(phi);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + 0.5 * w + w * w / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() + (1.0 - theta.cos()) / t2 * w + (theta - theta.sin()) / (t2 * theta) * w * w
}

/// Inverse of [`left_jacobian`].
pub fn left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let w = skew(phi);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() - 0.5 * w + w * w / 12.0;
    }
    let half = 0.5 * theta;
    let coef = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
    Matrix3::identity() - 0.5 * w + coef * w * w
}

/// Projects a nearly orthonormal matrix back onto SO(3) (polar decomposition).
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut out = u * vt;
    if out.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        out = u * vt;
    }
    out
}

/// Checks `RᵀR = I` and `det R = +1` to within `tol`.
pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    (r.transpose() * r - Matrix3::identity()).amax() <= tol && (r.determinant() - 1.0).abs() <= tol
}

/// Element of SE_K(3).
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedPose {
    pub rotation: Matrix3<f64>,
    pub columns: Vec<Vector3<f64>>,
}

impl ExtendedPose {
    pub fn new(rotation: Matrix3<f64>, columns: Vec<Vector3<f64>>) -> Self {
        Self { rotation, columns }
    }

    pub fn identity(k: usize) -> Self {
        Self {
            rotation: Matrix3::identity(),
            columns: vec![Vector3::zeros(); k],
        }
    }

    /// Number of translation-like columns.
    pub fn k(&self) -> usize {
        self.columns.len()
    }

    /// Tangent-space dimension `3 + 3K`.
    pub fn dim(&self) -> usize {
        3 + 3 * self.columns.len()
    }

    /// Exponential map. `k` is inferred from the vector length.
    pub fn exp(xi: &DVector<f64>) -> Result<Self> {
        if xi.len() < 3 || !xi.len().is_multiple_of(3) {
            return Err(Error::invalid(format!(
                "tangent vector length {} is not 3 + 3K",
                xi.len()
            )));
        }
        if !xi.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("exp: non-finite tangent vector"));
        }
        Ok(Self::exp_unchecked(xi.as_slice()))
    }

    pub(crate) fn exp_unchecked(xi: &[f64]) -> Self {
        let phi = Vector3::new(xi[0], xi[1], xi[2]);
        let jl = left_jacobian(&phi);
        let columns = xi[3..]
            .chunks_exact(3)
            .map(|c| jl * Vector3::new(c[0], c[1], c[2]))
            .collect();
        Self {
            rotation: exp_so3(&phi),
            columns,
        }
    }

    /// Exponential with an explicit column count check.
    pub fn exp_k(xi: &DVector<f64>, k: usize) -> Result<Self> {
        if xi.len() != 3 + 3 * k {
            return Err(Error::invalid(format!(
                "tangent vector length {} != {} for K = {k}",
                xi.len(),
                3 + 3 * k
            )));
        }
        Self::exp(xi)
    }

    /// Logarithm map, inverse of [`ExtendedPose::exp`].
    pub fn log(&self) -> Result<DVector<f64>> {
        let phi = so3_log(&self.rotation)?;
        let jinv = left_jacobian_inv(&phi);
        let mut out = DVector::zeros(self.dim());
        out.fixed_rows_mut::<3>(0).copy_from(&phi);
        for (i, c) in self.columns.iter().enumerate() {
            out.fixed_rows_mut::<3>(3 + 3 * i).copy_from(&(jinv * c));
        }
        Ok(out)
    }

    pub fn compose(&self, other: &Self) -> Result<Self> {
        if self.k() != other.k() {
            return Err(Error::invalid(format!(
                "compose: K mismatch ({} vs {})",
                self.k(),
                other.k()
            )));
        }
        Ok(Self {
            rotation: self.rotation * other.rotation,
            columns: self
                .columns
                .iter()
                .zip(&other.columns)
                .map(|(a, b)| self.rotation * b + a)
                .collect(),
        })
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            columns: self.columns.iter().map(|c| -(rt * c)).collect(),
        }
    }

    /// Adjoint matrix: `R` on the diagonal blocks and `⌊c_i×⌋R` in the
    /// first block column.
    pub fn adjoint(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut ad = DMatrix::zeros(n, n);
        for i in 0..=self.k() {
            ad.fixed_view_mut::<3, 3>(3 * i, 3 * i).copy_from(&self.rotation);
        }
        for (i, c) in self.columns.iter().enumerate() {
            ad.fixed_view_mut::<3, 3>(3 + 3 * i, 0)
                .copy_from(&(skew(c) * self.rotation));
        }
        ad
    }

    /// `(3+K)×(3+K)` homogeneous matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let k = self.k();
        let mut m = DMatrix::identity(3 + k, 3 + k);
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        for (i, c) in self.columns.iter().enumerate() {
            m.fixed_view_mut::<3, 1>(0, 3 + i).copy_from(c);
        }
        m
    }

    /// Reads a homogeneous matrix, validating the bottom block structure.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if n < 4 || m.ncols() != n {
            return Err(Error::invalid("from_matrix: expected square (3+K)x(3+K)"));
        }
        let k = n - 3;
        let bottom_ok = (0..k).all(|i| {
            (0..n).all(|j| {
                let expect = if j == 3 + i { 1.0 } else { 0.0 };
                (m[(3 + i, j)] - expect).abs() < 1e-12
            })
        });
        if !bottom_ok {
            return Err(Error::invalid("from_matrix: bottom rows are not [0 | I]"));
        }
        Ok(Self {
            rotation: m.fixed_view::<3, 3>(0, 0).into(),
            columns: (0..k).map(|i| m.fixed_view::<3, 1>(0, 3 + i).into()).collect(),
        })
    }
}

/// Lie algebra element of SE_K(3) as a `(3+K)×(3+K)` matrix.
pub fn hat(xi: &DVector<f64>) -> Result<DMatrix<f64>> {
    if xi.len() < 3 || !xi.len().is_multiple_of(3) {
        return Err(Error::invalid("hat: length is not 3 + 3K"));
    }
    let k = xi.len() / 3 - 1;
    let mut m = DMatrix::zeros(3 + k, 3 + k);
    let phi = Vector3::new(xi[0], xi[1], xi[2]);
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&phi));
    for i in 0..k {
        m.fixed_view_mut::<3, 1>(0, 3 + i)
            .copy_from(&xi.fixed_rows::<3>(3 + 3 * i));
    }
    Ok(m)
}

/// Inverse of [`hat`].
pub fn vee(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = m.nrows();
    if n < 3 || m.ncols() != n {
        return Err(Error::invalid("vee: expected square (3+K)x(3+K)"));
    }
    let k = n - 3;
    let mut xi = DVector::zeros(3 + 3 * k);
    xi[0] = m[(2, 1)];
    xi[1] = m[(0, 2)];
    xi[2] = m[(1, 0)];
    for i in 0..k {
        for r in 0..3 {
            xi[3 + 3 * i + r] = m[(r, 3 + i)];
        }
    }
    Ok(xi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    use proptest::prelude::*;

    /// Matrix exponential by power series, independent of Rodrigues.
    fn series_exp(m: &DMatrix<f64>, terms: usize) -> DMatrix<f64> {
        let n = m.nrows();
        let mut out = DMatrix::identity(n, n);
        let mut term = DMatrix::identity(n, n);
        for i in 1..terms {
            term = &term * m / i as f64;
            out += &term;
        }
        out
    }

    fn vec3() -> impl Strategy<Value = Vector3<f64>> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(a, b, c)| Vector3::new(a, b, c))
    }

    fn tangent(k: usize, rot_scale: f64) -> impl Strategy<Value = DVector<f64>> {
        prop::collection::vec(-1.0..1.0f64, 3 + 3 * k).prop_map(move |v| {
            let mut d = DVector::from_vec(v);
            d.rows_mut(0, 3).scale_mut(rot_scale);
            d.rows_mut(3, 3 * k).scale_mut(5.0);
            d
        })
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(so3_exp(&Vector3::zeros()).unwrap(), Matrix3::identity());
        let x = ExtendedPose::exp(&DVector::zeros(12)).unwrap();
        assert_eq!(x, ExtendedPose::identity(3));
    }

    #[test]
    fn quarter_turn_maps_x_to_y() {
        let r = so3_exp(&Vector3::new(0.0, 0.0, FRAC_PI_2)).unwrap();
        assert!((r * Vector3::x() - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(so3_exp(&Vector3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn log_of_identity_and_roundtrip() {
        assert_eq!(so3_log(&Matrix3::identity()).unwrap(), Vector3::zeros());
        let w = Vector3::new(0.1, -0.2, 0.3);
        let back = so3_log(&so3_exp(&w).unwrap()).unwrap();
        assert!((back - w).norm() < 1e-10);
    }

    #[test]
    fn log_near_pi_is_ambiguous() {
        let r = so3_exp(&Vector3::new(0.0, std::f64::consts::PI - 1e-8, 0.0)).unwrap();
        assert!(matches!(so3_log(&r), Err(Error::AmbiguousLog(_))));
    }

    #[test]
    fn log_close_to_pi_still_accurate() {
        let axis = Vector3::new(1.0, -2.0, 0.5).normalize();
        for theta in [3.0, 3.1, std::f64::consts::PI - 1e-5] {
            let w = axis * theta;
            let back = so3_log(&exp_so3(&w)).unwrap();
            assert!((back - w).norm() < 1e-9, "theta {theta}: {}", (back - w).norm());
        }
    }

    #[test]
    fn pure_translation_exp_and_log() {
        let xi = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0, -4.0, 5.0, 6.0]);
        let x = ExtendedPose::exp(&xi).unwrap();
        assert_eq!(x.rotation, Matrix3::identity());
        assert_eq!(x.columns[0], Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(x.columns[1], Vector3::new(-4.0, 5.0, 6.0));
        assert_eq!(x.log().unwrap(), xi);
    }

    #[test]
    fn exp_length_mismatch() {
        assert!(ExtendedPose::exp_k(&DVector::zeros(9), 3).is_err());
        assert!(ExtendedPose::exp(&DVector::zeros(7)).is_err());
    }

    #[test]
    fn adjoint_block_layout() {
        let x = ExtendedPose::new(
            Matrix3::identity(),
            vec![Vector3::x(), Vector3::zeros(), Vector3::zeros()],
        );
        let ad = x.adjoint();
        let block: Matrix3<f64> = ad.fixed_view::<3, 3>(3, 0).into();
        assert_eq!(block, skew(&Vector3::x()));
        assert_eq!(ExtendedPose::identity(3).adjoint(), DMatrix::identity(12, 12));
    }

    #[test]
    fn compose_dimension_mismatch() {
        assert!(ExtendedPose::identity(2)
            .compose(&ExtendedPose::identity(3))
            .is_err());
    }

    #[test]
    fn first_order_bound() {
        // ‖exp(εξ) − (I + ε ξ^)‖ ≤ C ε²; C measured at ε = 1e-3 on a fixed ξ.
        let xi = DVector::from_vec(vec![
            0.3, -0.7, 0.2, 1.0, -2.0, 0.5, 3.0, 1.0, -1.0, 0.2, 0.1, 4.0,
        ]);
        let resid = |eps: f64| {
            let x = ExtendedPose::exp(&(&xi * eps)).unwrap().to_matrix();
            let lin = DMatrix::identity(6, 6) + hat(&(&xi * eps)).unwrap();
            (x - lin).norm()
        };
        let c = resid(1e-3) / 1e-6;
        assert!(c < 10.0, "C = {c}");
        for eps in [1e-4, 3e-4, 1e-3] {
            assert!(resid(eps) <= 1.01 * c * eps * eps + 1e-15);
        }
    }

    #[test]
    fn orthogonality_under_many_compositions() {
        let step = ExtendedPose::exp(&DVector::from_vec(vec![0.013, -0.021, 0.017, 0.01, 0.0, 0.0])).unwrap();
        let mut x = ExtendedPose::identity(1);
        for i in 1..=1_000_000u32 {
            x = x.compose(&step).unwrap();
            if i % 100 == 0 {
                x.rotation = orthonormalize(&x.rotation);
            }
        }
        assert!(is_rotation(&x.rotation, 1e-6));
    }

    #[test]
    fn from_matrix_rejects_bad_bottom_block() {
        let mut m = ExtendedPose::identity(2).to_matrix();
        m[(4, 0)] = 0.5;
        assert!(ExtendedPose::from_matrix(&m).is_err());
    }

    proptest! {
        #[test]
        fn so3_exp_matches_series(w in vec3()) {
            let series = series_exp(&DMatrix::from_iterator(3, 3, skew(&w).iter().cloned()), 30);
            let r = so3_exp(&w).unwrap();
            for i in 0..3 { for j in 0..3 {
                prop_assert!((series[(i, j)] - r[(i, j)]).abs() < 1e-10);
            }}
        }

        #[test]
        fn sek3_exp_matches_series(xi in tangent(3, 1.5)) {
            let series = series_exp(&hat(&xi).unwrap(), 40);
            let x = ExtendedPose::exp(&xi).unwrap().to_matrix();
            prop_assert!((series - x).amax() < 1e-10);
        }

        #[test]
        fn sek3_roundtrip(xi in tangent(4, 3.0)) {
            let x = ExtendedPose::exp(&xi).unwrap();
            let back = ExtendedPose::exp(&x.log().unwrap()).unwrap();
            prop_assert!((back.to_matrix() - x.to_matrix()).amax() < 1e-9);
        }

        #[test]
        fn hat_vee_exact(xi in tangent(2, 1.0)) {
            prop_assert_eq!(vee(&hat(&xi).unwrap()).unwrap(), xi);
        }

        #[test]
        fn inverse_and_identity(xi in tangent(3, 2.0)) {
            let x = ExtendedPose::exp(&xi).unwrap();
            let e = x.compose(&x.inverse()).unwrap();
            prop_assert!((e.to_matrix() - DMatrix::identity(6, 6)).amax() < 1e-10);
            prop_assert!((x.inverse().inverse().to_matrix() - x.to_matrix()).amax() < 1e-12);
            prop_assert_eq!(ExtendedPose::identity(3).compose(&x).unwrap(), x);
        }

        #[test]
        fn adjoint_is_conjugation(a in tangent(3, 2.0), b in tangent(3, 1.0)) {
            let x = ExtendedPose::exp(&a).unwrap();
            let xm = x.to_matrix();
            let conj = &xm * hat(&b).unwrap() * x.inverse().to_matrix();
            let lhs = x.adjoint() * &b;
            prop_assert!((lhs - vee(&conj).unwrap()).amax() < 1e-10);
        }

        #[test]
        fn adjoint_homomorphism(a in tangent(3, 2.0), b in tangent(3, 2.0)) {
            let (xa, xb) = (ExtendedPose::exp(&a).unwrap(), ExtendedPose::exp(&b).unwrap());
            let lhs = xa.compose(&xb).unwrap().adjoint();
            let rhs = xa.adjoint() * xb.adjoint();
            prop_assert!((lhs - rhs).amax() < 1e-9);
        }

        #[test]
        fn left_jacobian_inverse(w in vec3()) {
            let w = w * 2.5;
            let prod = left_jacobian(&w) * left_jacobian_inv(&w);
            prop_assert!((prod - Matrix3::identity()).amax() < 1e-12);
        }
    }
}
