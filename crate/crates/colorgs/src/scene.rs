//! Canonical (time-zero) Gaussian scene representation: raw parameters,
//! their activations, and 3D covariance construction.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{quat_normalize, quat_to_rotation, sh_coeff_count, sigmoid};

/// One screen-plane color anchor attached to a primitive. The offset is in
/// pixels relative to the primitive's projected center; the color is an
/// additive correction and may be negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub offset: Vector2<f64>,
    pub color: Vector3<f64>,
}

impl AnchorSpec {
    pub fn new(offset: Vector2<f64>, color: Vector3<f64>) -> Self {
        Self { offset, color }
    }
}

/// Default anchor layout: zero colors at the four axis-aligned unit-pixel
/// offsets. Zero color matches plain splatting at init; distinct offsets
/// break gradient symmetry between anchors.
pub fn default_anchors(k: usize) -> Vec<AnchorSpec> {
    let cross = [
        Vector2::new(1.0, 0.0),
        Vector2::new(0.0, 1.0),
        Vector2::new(-1.0, 0.0),
        Vector2::new(0.0, -1.0),
    ];
    (0..k)
        .map(|i| {
            let ring = (i / 4 + 1) as f64;
            AnchorSpec::new(cross[i % 4] * ring, Vector3::zeros())
        })
        .collect()
}

/// One splat with raw (unconstrained) parameters. Scales live in log-space
/// and opacity in logit-space; the quaternion is kept unit-norm by the
/// trainer but consumers must renormalize after deformation offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub center: Vector3<f64>,
    /// Quaternion (w, x, y, z).
    pub rotation: [f64; 4],
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    /// (L+1)^2 coefficient triples, band ordering.
    pub sh_coeffs: Vec<Vector3<f64>>,
    pub anchors: Vec<AnchorSpec>,
}

impl GaussianPrimitive {
    pub fn new(center: Vector3<f64>, sh_degree: usize, anchor_count: usize) -> Self {
        Self {
            center,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::zeros(),
            opacity_logit: 0.0,
            sh_coeffs: vec![Vector3::zeros(); sh_coeff_count(sh_degree)],
            anchors: default_anchors(anchor_count),
        }
    }
}

/// Activated (constrained) parameters of one primitive.
#[derive(Debug, Clone)]
pub struct ActivatedPrimitive {
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub rotation_unit: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianScene {
    pub primitives: Vec<GaussianPrimitive>,
    pub sh_degree: usize,
}

impl GaussianScene {
    pub fn new(sh_degree: usize) -> Self {
        Self {
            primitives: Vec::new(),
            sh_degree,
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Anchor count shared by all primitives (0 when the scene has none).
    pub fn anchor_count(&self) -> usize {
        self.primitives.first().map_or(0, |p| p.anchors.len())
    }

    /// Diagonal of the axis-aligned bounding box of the centers. Used as the
    /// scene extent reference for densification thresholds.
    pub fn extent(&self) -> f64 {
        if self.primitives.is_empty() {
            return 0.0;
        }
        let mut lo = self.primitives[0].center;
        let mut hi = lo;
        for p in &self.primitives {
            lo = lo.inf(&p.center);
            hi = hi.sup(&p.center);
        }
        (hi - lo).norm()
    }
}

/// Map raw parameters to their active (constrained) values, failing loudly
/// on non-finite inputs so parameter blow-ups are caught at the source.
pub fn activations(primitive: &GaussianPrimitive, index: usize) -> Result<ActivatedPrimitive> {
    let raw_finite = primitive.center.iter().all(|v| v.is_finite())
        && primitive.rotation.iter().all(|v| v.is_finite())
        && primitive.log_scale.iter().all(|v| v.is_finite())
        && primitive.opacity_logit.is_finite();
    if !raw_finite {
        return Err(Error::InvalidParameter {
            primitive: index,
            detail: "non-finite raw parameter".into(),
        });
    }
    Ok(ActivatedPrimitive {
        scale: primitive.log_scale.map(f64::exp),
        opacity: sigmoid(primitive.opacity_logit),
        rotation_unit: quat_normalize(primitive.rotation),
    })
}

/// Sigma = R S S^T R^T with S = diag(exp(log_scale)).
pub fn build_covariance(rotation_unit: [f64; 4], log_scale: Vector3<f64>) -> Matrix3<f64> {
    let r = quat_to_rotation(rotation_unit);
    let d = Matrix3::from_diagonal(&log_scale.map(|s| (2.0 * s).exp()));
    r * d * r.transpose()
}

/// exp(-1/2 (x-mu)^T Sigma^-1 (x-mu)); equals 1 exactly at the center.
pub fn evaluate_gaussian(primitive: &GaussianPrimitive, x: Vector3<f64>) -> f64 {
    let rot = quat_normalize(primitive.rotation);
    let cov = build_covariance(rot, primitive.log_scale);
    let delta = x - primitive.center;
    let inv = cov.try_inverse().expect("positive scales give invertible covariance");
    (-0.5 * (delta.transpose() * inv * delta)[(0, 0)]).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rot_z(angle: f64) -> [f64; 4] {
        [(angle / 2.0).cos(), 0.0, 0.0, (angle / 2.0).sin()]
    }

    #[test]
    fn covariance_identity_rotation_is_squared_scale_diagonal() {
        let ls = Vector3::new(0.1f64.ln(), 0.2f64.ln(), 0.3f64.ln());
        let cov = build_covariance([1.0, 0.0, 0.0, 0.0], ls);
        let expected = Matrix3::from_diagonal(&Vector3::new(0.01, 0.04, 0.09));
        assert_relative_eq!(cov, expected, epsilon = 1e-15);
    }

    #[test]
    fn covariance_quarter_turn_permutes_axes() {
        let ls = Vector3::new(0.1f64.ln(), 0.2f64.ln(), 0.3f64.ln());
        let cov = build_covariance(rot_z(std::f64::consts::FRAC_PI_2), ls);
        let expected = Matrix3::from_diagonal(&Vector3::new(0.04, 0.01, 0.09));
        assert_relative_eq!(cov, expected, epsilon = 1e-12);
    }

    #[test]
    fn covariance_matches_dense_product_oracle() {
        // Independent oracle: explicit R * S * S^T * R^T with a dense
        // rotation matrix written out for a 45 degree turn about z.
        let angle = std::f64::consts::FRAC_PI_4;
        let (c, s) = (angle.cos(), angle.sin());
        let r = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let sm = Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 1.0));
        let oracle = r * sm * sm.transpose() * r.transpose();

        let ls = Vector3::new(0.0, 2.0f64.ln(), 0.0);
        let cov = build_covariance(rot_z(angle), ls);
        assert_relative_eq!(cov, oracle, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_is_one_at_center_and_matches_scalar_oracle() {
        let mut p = GaussianPrimitive::new(Vector3::new(0.3, -0.2, 1.5), 0, 0);
        assert_eq!(evaluate_gaussian(&p, p.center), 1.0);

        // Sigma = I, |x - mu|^2 = 2.
        let x = p.center + Vector3::new(1.0, 1.0, 0.0);
        assert_relative_eq!(evaluate_gaussian(&p, x), (-1.0f64).exp(), epsilon = 1e-12);

        // Sigma = diag(4, 1, 1), x - mu = (2, 0, 0).
        p.log_scale = Vector3::new(2.0f64.ln() , 0.0, 0.0);
        let x = p.center + Vector3::new(2.0, 0.0, 0.0);
        assert_relative_eq!(evaluate_gaussian(&p, x), (-0.5f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn activation_examples() {
        let mut p = GaussianPrimitive::new(Vector3::zeros(), 1, 4);
        p.rotation = [2.0, 0.0, 0.0, 0.0];
        let a = activations(&p, 0).unwrap();
        assert_eq!(a.opacity, 0.5);
        assert_eq!(a.scale, Vector3::new(1.0, 1.0, 1.0));
        assert_eq!(a.rotation_unit, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn activation_rejects_non_finite() {
        let mut p = GaussianPrimitive::new(Vector3::zeros(), 1, 4);
        p.opacity_logit = f64::NAN;
        let err = activations(&p, 7).unwrap_err();
        assert!(err.to_string().contains("primitive 7"));
    }

    #[test]
    fn default_anchors_are_distinct_axis_cross() {
        let a = default_anchors(4);
        assert_eq!(a.len(), 4);
        assert_eq!(a[0].offset, Vector2::new(1.0, 0.0));
        assert_eq!(a[3].offset, Vector2::new(0.0, -1.0));
        assert!(a.iter().all(|s| s.color == Vector3::zeros()));
    }

    fn quat_strategy() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(-1.0f64..1.0)
            .prop_filter("non-degenerate", |q| {
                q.iter().map(|v| v * v).sum::<f64>() > 0.01
            })
            .prop_map(quat_normalize)
    }

    proptest! {
        #[test]
        fn covariance_symmetric_with_scale_squared_eigenvalues(
            q in quat_strategy(),
            ls in prop::array::uniform3(-2.0f64..1.0),
        ) {
            let ls = Vector3::from_row_slice(&ls);
            let cov = build_covariance(q, ls);
            prop_assert!((cov - cov.transpose()).abs().max() < 1e-12);

            let mut eig = cov.symmetric_eigen().eigenvalues.as_slice().to_vec();
            let mut expected: Vec<f64> = ls.iter().map(|s| (2.0 * s).exp()).collect();
            eig.sort_by(f64::total_cmp);
            expected.sort_by(f64::total_cmp);
            for (e, x) in eig.iter().zip(&expected) {
                prop_assert!((e - x).abs() < 1e-9);
            }
        }

        #[test]
        fn gaussian_invariant_under_joint_rotation(
            q in quat_strategy(),
            extra in quat_strategy(),
            offset in prop::array::uniform3(-1.5f64..1.5),
            ls in prop::array::uniform3(-1.0f64..0.5),
        ) {
            let mut p = GaussianPrimitive::new(Vector3::zeros(), 0, 0);
            p.rotation = q;
            p.log_scale = Vector3::from_row_slice(&ls);
            let x = Vector3::from_row_slice(&offset);
            let base = evaluate_gaussian(&p, x);

            // Rotate both the offset and the primitive by the same quaternion.
            let rot = quat_to_rotation(extra);
            let mut p2 = p.clone();
            // Hamilton product extra * q.
            let (a, b) = (extra, q);
            p2.rotation = [
                a[0]*b[0] - a[1]*b[1] - a[2]*b[2] - a[3]*b[3],
                a[0]*b[1] + a[1]*b[0] + a[2]*b[3] - a[3]*b[2],
                a[0]*b[2] - a[1]*b[3] + a[2]*b[0] + a[3]*b[1],
                a[0]*b[3] + a[1]*b[2] - a[2]*b[1] + a[3]*b[0],
            ];
            let rotated = evaluate_gaussian(&p2, rot * x);
            prop_assert!((base - rotated).abs() < 1e-9);
        }
    }
}
