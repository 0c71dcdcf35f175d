//! Color function of a primitive: view-dependent SH base color plus the
//! screen-space anchor field, floored at zero per channel.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::math::{sh_basis, SH_C0};
use crate::scene::AnchorSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorFieldConfig {
    /// Exponential decay rate, 1/pixels^2.
    pub lambda_e: f64,
    /// Anchors per primitive.
    pub k: usize,
}

impl Default for ColorFieldConfig {
    fn default() -> Self {
        Self { lambda_e: 0.1, k: 4 }
    }
}

/// exp(-lambda_e * |p - anchor|^2).
pub fn anchor_weight(p: Vector2<f64>, anchor_pos: Vector2<f64>, lambda_e: f64) -> f64 {
    (-lambda_e * (p - anchor_pos).norm_squared()).exp()
}

/// Summed anchor contribution at screen point `p`; anchors ride the
/// projected center.
pub fn anchor_color(
    p: Vector2<f64>,
    anchors: &[AnchorSpec],
    center2d: Vector2<f64>,
    lambda_e: f64,
) -> Vector3<f64> {
    let mut out = Vector3::zeros();
    for a in anchors {
        out += anchor_weight(p, center2d + a.offset, lambda_e) * a.color;
    }
    out
}

/// SH color with the splatting DC convention: 0.5 + C0 * sh0 + higher bands.
pub fn sh_color(sh_coeffs: &[Vector3<f64>], d: Vector3<f64>, degree: usize) -> Vector3<f64> {
    debug_assert_eq!(sh_coeffs.len(), crate::math::sh_coeff_count(degree));
    let basis = sh_basis(degree, d);
    let mut out = Vector3::new(0.5, 0.5, 0.5);
    for (b, c) in basis.iter().zip(sh_coeffs) {
        out += *b * c;
    }
    out
}

/// Full per-pixel color: SH base plus anchor field, each channel floored
/// at 0. No upper clamp before compositing.
pub fn combined_color(
    sh_coeffs: &[Vector3<f64>],
    degree: usize,
    anchors: &[AnchorSpec],
    p: Vector2<f64>,
    center2d: Vector2<f64>,
    d: Vector3<f64>,
    config: &ColorFieldConfig,
) -> Vector3<f64> {
    let raw = sh_color(sh_coeffs, d, degree) + anchor_color(p, anchors, center2d, config.lambda_e);
    raw.map(|c| c.max(0.0))
}

/// Inverse of the DC convention: SH dc coefficient reproducing `rgb` from
/// any view direction at degree 0.
pub fn rgb_to_sh_dc(rgb: Vector3<f64>) -> Vector3<f64> {
    (rgb - Vector3::new(0.5, 0.5, 0.5)) / SH_C0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::SH_C1;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn anchor_weight_examples() {
        let p = Vector2::new(3.0, 4.0);
        assert_eq!(anchor_weight(p, p, 0.1), 1.0);
        // |p - a|^2 = 10 at lambda_e = 0.1.
        let a = Vector2::new(6.0, 3.0);
        assert_relative_eq!(anchor_weight(p, a, 0.1), (-1.0f64).exp(), epsilon = 1e-12);
        // |p - a|^2 = 0.01.
        let a = Vector2::new(3.1, 4.0);
        assert_relative_eq!(anchor_weight(p, a, 0.1), (-0.001f64).exp(), epsilon = 1e-12);
        assert_relative_eq!(anchor_weight(p, a, 0.1), 0.999, epsilon = 1e-6);
    }

    #[test]
    fn anchor_color_zero_and_unit_weight_cases() {
        let center = Vector2::new(10.0, 10.0);
        let zeroed = vec![
            AnchorSpec::new(Vector2::new(1.0, 0.0), Vector3::zeros()),
            AnchorSpec::new(Vector2::new(0.0, 1.0), Vector3::zeros()),
        ];
        assert_eq!(
            anchor_color(Vector2::new(11.0, 9.0), &zeroed, center, 0.1),
            Vector3::zeros()
        );

        let one = vec![AnchorSpec::new(
            Vector2::new(2.0, -1.0),
            Vector3::new(0.2, -0.1, 0.0),
        )];
        let at_anchor = center + Vector2::new(2.0, -1.0);
        assert_eq!(
            anchor_color(at_anchor, &one, center, 0.1),
            Vector3::new(0.2, -0.1, 0.0)
        );
    }

    #[test]
    fn anchor_color_matches_two_term_hand_sum() {
        let lambda = 0.1;
        let center = Vector2::new(5.0, 5.0);
        let anchors = vec![
            AnchorSpec::new(Vector2::new(2.0, 0.0), Vector3::new(0.3, -0.2, 0.1)),
            AnchorSpec::new(Vector2::new(-1.0, 3.0), Vector3::new(-0.05, 0.4, 0.25)),
        ];
        let p = Vector2::new(6.0, 4.0);

        // Hand computation straight from the decay definition.
        let d1 = (p - (center + anchors[0].offset)).norm_squared();
        let d2 = (p - (center + anchors[1].offset)).norm_squared();
        let w1 = (-lambda * d1).exp();
        let w2 = (-lambda * d2).exp();
        let oracle = w1 * anchors[0].color + w2 * anchors[1].color;

        assert_relative_eq!(
            anchor_color(p, &anchors, center, lambda),
            oracle,
            epsilon = 1e-15
        );
    }

    #[test]
    fn sh_color_dc_cases() {
        let zeros = vec![Vector3::zeros()];
        let d = Vector3::new(0.0, 0.0, 1.0);
        assert_eq!(sh_color(&zeros, d, 0), Vector3::new(0.5, 0.5, 0.5));

        let dc = vec![Vector3::repeat(0.25 / SH_C0)];
        for dir in [Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 0.0)] {
            assert_relative_eq!(
                sh_color(&dc, dir, 0),
                Vector3::repeat(0.75),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn sh_band1_antisymmetry_along_z() {
        let coeffs = vec![
            Vector3::new(0.1, 0.2, 0.3),
            Vector3::new(0.4, -0.2, 0.05),
            Vector3::new(-0.3, 0.6, 0.2),
            Vector3::new(0.02, 0.08, -0.4),
        ];
        let plus = sh_color(&coeffs, Vector3::new(0.0, 0.0, 1.0), 1);
        let minus = sh_color(&coeffs, Vector3::new(0.0, 0.0, -1.0), 1);
        // Only the z-linear basis flips: difference is 2 * C1 * sh_{1,z},
        // the coefficient paired with the z basis (band index 2).
        assert_relative_eq!(plus - minus, 2.0 * SH_C1 * coeffs[2], epsilon = 1e-12);
    }

    #[test]
    fn combined_color_identities_and_floor() {
        let cfg = ColorFieldConfig::default();
        let d = Vector3::new(0.0, 0.0, 1.0);
        let center = Vector2::new(8.0, 8.0);
        let zeros = vec![Vector3::zeros()];

        let anchors = crate::scene::default_anchors(4);
        let c = combined_color(&zeros, 0, &anchors, center, center, d, &cfg);
        assert_eq!(c, Vector3::new(0.5, 0.5, 0.5));

        // Negative anchor color with unit weight floors the red channel.
        let neg = vec![AnchorSpec::new(Vector2::zeros(), Vector3::new(-0.7, 0.0, 0.0))];
        let c = combined_color(&zeros, 0, &neg, center, center, d, &cfg);
        assert_eq!(c, Vector3::new(0.0, 0.5, 0.5));

        // No anchors reduces exactly to the SH color.
        let coeffs = vec![Vector3::new(0.3, -0.1, 0.2)];
        let c = combined_color(&coeffs, 0, &[], Vector2::new(3.0, 2.0), center, d, &cfg);
        assert_eq!(c, sh_color(&coeffs, d, 0));
    }

    #[test]
    fn anchors_are_effectively_local() {
        // Contribution bound at squared distance >= 200 px^2 with the
        // default decay: e^-20 < 2.1e-9.
        let w = anchor_weight(Vector2::zeros(), Vector2::new(200f64.sqrt(), 0.0), 0.1);
        assert!(w < 2.1e-9);
    }

    proptest! {
        #[test]
        fn anchor_weight_translation_invariant(
            p in prop::array::uniform2(-20.0f64..20.0),
            a in prop::array::uniform2(-20.0f64..20.0),
            t in prop::array::uniform2(-50.0f64..50.0),
        ) {
            let p = Vector2::from_row_slice(&p);
            let a = Vector2::from_row_slice(&a);
            let t = Vector2::from_row_slice(&t);
            let base = anchor_weight(p, a, 0.1);
            let shifted = anchor_weight(p + t, a + t, 0.1);
            prop_assert!((base - shifted).abs() < 1e-12);
        }

        #[test]
        fn zero_anchor_colors_reduce_to_sh(
            px in -30.0f64..30.0,
            py in -30.0f64..30.0,
            dc in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let cfg = ColorFieldConfig::default();
            let coeffs = vec![Vector3::from_row_slice(&dc)];
            let anchors = crate::scene::default_anchors(4);
            let d = Vector3::new(0.0, 0.0, 1.0);
            let center = Vector2::new(4.0, -2.0);
            let c = combined_color(&coeffs, 0, &anchors, Vector2::new(px, py), center, d, &cfg);
            let sh_only = sh_color(&coeffs, d, 0).map(|v| v.max(0.0));
            prop_assert_eq!(c, sh_only);
        }
    }
}
