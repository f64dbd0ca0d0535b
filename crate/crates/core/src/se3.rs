//! Rigid-motion arithmetic on SE(3) and its Lie algebra se(3).
//!
//! Tangent vectors are ordered translation first, `[t1, t2, t3, w1, w2, w3]`,
//! matching the generator order `G1..G3` (translations along x, y, z) and
//! `G4..G6` (rotations about x, y, z).

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Below this rotation angle the exp/log coefficients switch to Taylor series.
const SMALL_ANGLE: f64 = 1e-6;
/// Below this angle the Jacobian coefficients use their Taylor series.
const SERIES_ANGLE: f64 = 1e-2;

/// `se3_log` refuses rotations this close to pi.
const BRANCH_CUT_MARGIN: f64 = 1e-6;

/// Degrees per radian, used to balance rotation against millimetres.
pub const DEG_PER_RAD: f64 = 180.0 / PI;

/// An element of se(3): translation coefficients (mm) and rotation
/// coefficients (rad).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3Vector {
    pub t: Vector3<f64>,
    pub w: Vector3<f64>,
}

impl Se3Vector {
    pub fn new(t: Vector3<f64>, w: Vector3<f64>) -> Self {
        Self { t, w }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new(Vector3::new(a[0], a[1], a[2]), Vector3::new(a[3], a[4], a[5]))
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.t[0], self.t[1], self.t[2], self.w[0], self.w[1], self.w[2]]
    }

    /// Unit-coefficient vector along generator `index` (0-based, 0..6).
    pub fn basis(index: usize) -> Self {
        let mut a = [0.0; 6];
        a[index] = 1.0;
        Self::from_array(a)
    }

    pub fn is_finite(&self) -> bool {
        self.t.iter().chain(self.w.iter()).all(|v| v.is_finite())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.t * s, self.w * s)
    }

    /// The 4x4 matrix `sum_i d_i G_i`.
    pub fn hat(&self) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&self.w));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        m
    }

    /// Geodesic norm with rotation scaled to degrees:
    /// `sqrt(2 |w_deg|^2 + |t|^2)`.
    pub fn distance_norm(&self) -> f64 {
        let w_deg = self.w * DEG_PER_RAD;
        (2.0 * w_deg.norm_squared() + self.t.norm_squared()).sqrt()
    }
}

impl Serialize for Se3Vector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Se3Vector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let a = <[f64; 6]>::deserialize(d)?;
        let v = Self::from_array(a);
        if !v.is_finite() {
            return Err(D::Error::custom("se(3) vector has non-finite components"));
        }
        Ok(v)
    }
}

/// The six se(3) generators, translations first.
pub fn generators() -> [Matrix4<f64>; 6] {
    std::array::from_fn(|i| Se3Vector::basis(i).hat())
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Homogeneous rigid transform.
///
/// Products of rigid transforms drift off SO(3) by rounding only; call
/// [`RigidTransform::renormalized`] to project back.
#[derive(Clone, Copy, PartialEq)]
pub struct RigidTransform {
    m: Matrix4<f64>,
}

impl fmt::Debug for RigidTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("RigidTransform").field(&self.to_row_major()).finish()
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { m: Matrix4::identity() }
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self { m }
    }

    pub fn translation(t: Vector3<f64>) -> Self {
        Self::from_parts(Matrix3::identity(), t)
    }

    /// Rotation about `axis` (normalized internally) by `angle` radians.
    pub fn rotation(axis: Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        let r = so3_exp(&(axis * (angle / n)));
        Self::from_parts(r, Vector3::zeros())
    }

    /// Rotation about `axis` through `center`.
    pub fn rotation_about(center: Vector3<f64>, axis: Vector3<f64>, angle: f64) -> Self {
        Self::translation(center)
            .compose(&Self::rotation(axis, angle))
            .compose(&Self::translation(-center))
    }

    /// Validating constructor from an arbitrary 4x4 matrix.
    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rigid transform"));
        }
        if m[(3, 0)] != 0.0 || m[(3, 1)] != 0.0 || m[(3, 2)] != 0.0 || m[(3, 3)] != 1.0 {
            return Err(Error::InvalidParameter(
                "bottom row of a rigid transform must be (0, 0, 0, 1)".into(),
            ));
        }
        let t = Self { m };
        let r = t.rotation_block();
        let ortho = (r.transpose() * r - Matrix3::identity()).amax();
        let det = r.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "rotation block is not special orthogonal (|RtR - I| = {ortho:e}, det = {det})"
            )));
        }
        Ok(t)
    }

    pub fn from_row_major(a: &[f64; 16]) -> Result<Self> {
        Self::from_matrix(Matrix4::from_row_slice(a))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.m[(r, c)];
            }
        }
        out
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.m
    }

    pub fn rotation_block(&self) -> Matrix3<f64> {
        self.m.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation_part(&self) -> Vector3<f64> {
        self.m.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().all(|v| v.is_finite())
    }

    /// Matrix product `self * other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        Self { m: self.m * other.m }
    }

    /// Exact rigid inverse `(R^T, -R^T t)`.
    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation_block().transpose();
        Self::from_parts(rt, -(rt * self.translation_part()))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_block() * p + self.translation_part()
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_block() * v
    }

    /// Projects the rotation block back onto SO(3).
    pub fn renormalized(&self) -> RigidTransform {
        let r = project_to_so3(&self.rotation_block()).unwrap_or_else(|_| Matrix3::identity());
        Self::from_parts(r, self.translation_part())
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        let r = self.rotation_block();
        let w = vee(&(r - r.transpose()));
        let sin = 0.5 * w.norm();
        let cos = 0.5 * (r.trace() - 1.0);
        sin.atan2(cos)
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let a = <[f64; 16]>::deserialize(d)?;
        Self::from_row_major(&a).map_err(D::Error::custom)
    }
}

/// `(1 - cos t) / t^2` without cancellation.
fn half_angle_versine(theta: f64) -> f64 {
    let s = (0.5 * theta).sin() / theta;
    2.0 * s * s
}

/// Rodrigues formula.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(w);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, half_angle_versine(theta))
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Left Jacobian `V(w)` mapping se(3) translation coefficients to the
/// translation column of `exp`.
pub fn left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(w);
    let b = if theta < SMALL_ANGLE { 0.5 - theta2 / 24.0 } else { half_angle_versine(theta) };
    let c = if theta < SERIES_ANGLE {
        1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0 - theta2 * theta2 * theta2 / 362_880.0
    } else {
        (theta - theta.sin()) / (theta2 * theta)
    };
    Matrix3::identity() + k * b + k * k * c
}

/// Inverse of [`left_jacobian`].
pub fn left_jacobian_inverse(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(w);
    let c = if theta < SERIES_ANGLE {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30_240.0 + theta2 * theta2 * theta2 / 1_209_600.0
    } else {
        let x = 0.5 * theta;
        (1.0 - x / x.tan()) / theta2
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

/// Closed-form exponential map se(3) -> SE(3).
pub fn se3_exp(d: &Se3Vector) -> Result<RigidTransform> {
    if !d.is_finite() {
        return Err(Error::NonFinite("se(3) vector"));
    }
    let r = so3_exp(&d.w);
    let t = left_jacobian(&d.w) * d.t;
    Ok(RigidTransform::from_parts(r, t))
}

fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let axis2 = vee(&(r - r.transpose()));
    let sin = 0.5 * axis2.norm();
    let cos = 0.5 * (r.trace() - 1.0);
    let theta = sin.atan2(cos);
    if theta >= PI - BRANCH_CUT_MARGIN {
        return Err(Error::BranchCut { angle: theta });
    }
    let factor = if theta < SMALL_ANGLE {
        0.5 + theta * theta / 12.0
    } else {
        0.5 * theta / sin
    };
    Ok(axis2 * factor)
}

/// Principal logarithm SE(3) -> se(3).
pub fn se3_log(t: &RigidTransform) -> Result<Se3Vector> {
    if !t.is_finite() {
        return Err(Error::NonFinite("rigid transform"));
    }
    let w = so3_log(&t.rotation_block())?;
    let u = left_jacobian_inverse(&w) * t.translation_part();
    Ok(Se3Vector::new(u, w))
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn inverse(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

/// Geodesic distance `|| log(b a^-1) ||` with rotation coefficients in
/// degrees and the factor two on the rotation block.
pub fn geodesic_distance(a: &RigidTransform, b: &RigidTransform) -> Result<f64> {
    let rel = b.compose(&a.inverse());
    Ok(se3_log(&rel)?.distance_norm())
}

/// Nearest rotation in Frobenius norm, with determinant correction.
pub fn project_to_so3(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let svd = m.svd(true, true);
    if svd.singular_values.iter().all(|s| *s < 1e-12) {
        return Err(Error::Degenerate(
            "mean rotation matrix has no singular value above 1e-12".into(),
        ));
    }
    let mut u = svd.u.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    // nalgebra does not sort singular values, so flip the column of the smallest one.
    if (u * v_t).determinant() < 0.0 {
        let (idx, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let col = -u.column(idx);
        u.set_column(idx, &col);
    }
    Ok(u * v_t)
}

/// L2 chordal mean: minimizes the summed squared Frobenius distance over SE(3).
pub fn chordal_mean(ts: &[RigidTransform]) -> Result<RigidTransform> {
    if ts.is_empty() {
        return Err(Error::Empty("chordal mean of no transforms"));
    }
    let n = ts.len() as f64;
    let mut r_sum = Matrix3::zeros();
    let mut t_sum = Vector3::zeros();
    for t in ts {
        r_sum += t.rotation_block();
        t_sum += t.translation_part();
    }
    let r = project_to_so3(&(r_sum / n))?;
    Ok(RigidTransform::from_parts(r, t_sum / n))
}

/// `sum_i ||T_i - T||_F^2`, the objective minimized by [`chordal_mean`].
pub fn chordal_objective(ts: &[RigidTransform], t: &RigidTransform) -> f64 {
    ts.iter().map(|x| (x.matrix() - t.matrix()).norm_squared()).sum()
}
