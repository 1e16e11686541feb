//! Visual residuals on the unit sphere: a landmark parameterized by inverse
//! depth along its first observed bearing is transformed through the
//! anchor-body/world/target-body chain into the target camera, normalized,
//! and compared against the measured bearing in the tangent plane of that
//! measurement.

use nalgebra::{SMatrix, Vector2};

use crate::geometry::{skew, Mat3, Quaternion, Vec3};
use crate::preintegration::NavState;

/// Camera-in-body rigid transform (camera frame `c`, body frame `b`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    pub p_cb: Vec3,
    pub q_cb: Quaternion,
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self {
            p_cb: Vec3::zeros(),
            q_cb: Quaternion::IDENTITY,
        }
    }

    /// R_c^b: camera frame into body frame.
    pub fn r_cb(&self) -> Mat3 {
        self.q_cb.rotation_matrix()
    }
}

/// One bearing measurement of one feature from one keyframe.
#[derive(Debug, Clone, Copy)]
pub struct VisualObservation {
    pub feature_id: u64,
    pub keyframe: usize,
    /// Unit-norm direction in the camera frame.
    pub bearing: Vec3,
}

/// Residual and Jacobians of one (anchor, target) bearing pair.
///
/// Pose Jacobian columns are ordered `[δp, δθ]`, matching the first six
/// error-state components of a keyframe.
#[derive(Debug, Clone)]
pub struct VisualEval {
    pub residual: Vector2<f64>,
    pub j_pose_i: SMatrix<f64, 2, 6>,
    pub j_pose_j: SMatrix<f64, 2, 6>,
    pub j_lambda: Vector2<f64>,
}

/// Two unit vectors spanning the plane orthogonal to `bearing`;
/// `{b1, b2, bearing}` is orthonormal. Continuity across nearby bearings is
/// not guaranteed (the axis branch may switch) and is not needed: the basis
/// only ever weights a residual at a fixed measurement.
pub fn tangent_basis(bearing: Vec3) -> (Vec3, Vec3) {
    // Cross with the axis the bearing points along least.
    let abs = bearing.map(f64::abs);
    let helper = if abs.x <= abs.y && abs.x <= abs.z {
        Vec3::x()
    } else if abs.y <= abs.z {
        Vec3::y()
    } else {
        Vec3::z()
    };
    let b1 = bearing.cross(&helper).normalize();
    let b2 = bearing.cross(&b1);
    (b1, b2)
}

/// Transformed landmark is considered degenerate (behind/at the target
/// camera center) below this norm; such pairs are excluded from the problem.
const MIN_POINT_NORM: f64 = 1e-8;

/// Evaluates the tangent-plane residual of a feature anchored in keyframe
/// `i` (bearing `b_i`, inverse depth `lambda`) against its measured bearing
/// `b_j` in keyframe `j`. Returns `None` when the transformed point is
/// degenerate.
pub fn visual_residual(
    bearing_i: Vec3,
    bearing_j: Vec3,
    x_i: &NavState,
    x_j: &NavState,
    lambda: f64,
    ext: &Extrinsics,
) -> Option<VisualEval> {
    debug_assert!(lambda > 0.0, "inverse depth must be positive");
    let r_cb = ext.r_cb();
    let r_bc = r_cb.transpose();
    let r_i = x_i.q.rotation_matrix(); // body i -> world
    let r_j = x_j.q.rotation_matrix();
    let r_wj = r_j.transpose(); // world -> body j

    // Anchor camera -> anchor body -> world -> target body -> target camera.
    let p_ci = bearing_i / lambda;
    let p_bi = r_cb * p_ci + ext.p_cb;
    let p_w = r_i * p_bi + x_i.p;
    let p_bj = r_wj * (p_w - x_j.p);
    let p_cj = r_bc * (p_bj - ext.p_cb);

    let norm = p_cj.norm();
    if norm < MIN_POINT_NORM {
        return None;
    }
    let unit = p_cj / norm;

    let (b1, b2) = tangent_basis(bearing_j);
    let mut basis_t = Matrix2x3::zeros();
    basis_t.row_mut(0).copy_from(&b1.transpose());
    basis_t.row_mut(1).copy_from(&b2.transpose());

    let residual = basis_t * (bearing_j - unit);

    // d(unit)/d(p_cj), then the chain into each state.
    let d_unit = (Mat3::identity() - unit * unit.transpose()) / norm;
    let d_res_d_point = -basis_t * d_unit;

    let chain_ij = r_bc * r_wj; // world-vector into target camera
    let d_point_d_pi = chain_ij;
    let d_point_d_thetai = -chain_ij * r_i * skew(p_bi);
    let d_point_d_pj = -chain_ij;
    let d_point_d_thetaj = r_bc * skew(p_bj);
    let d_point_d_lambda = chain_ij * r_i * r_cb * (-bearing_i / (lambda * lambda));

    let mut j_pose_i = SMatrix::<f64, 2, 6>::zeros();
    j_pose_i
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(d_res_d_point * d_point_d_pi));
    j_pose_i
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(d_res_d_point * d_point_d_thetai));
    let mut j_pose_j = SMatrix::<f64, 2, 6>::zeros();
    j_pose_j
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(d_res_d_point * d_point_d_pj));
    j_pose_j
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(d_res_d_point * d_point_d_thetaj));
    let j_lambda = d_res_d_point * d_point_d_lambda;

    Some(VisualEval {
        residual,
        j_pose_i,
        j_pose_j,
        j_lambda,
    })
}

type Matrix2x3 = SMatrix<f64, 2, 3>;
