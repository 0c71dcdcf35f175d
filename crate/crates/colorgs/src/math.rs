//! Scalar activations, quaternion algebra and the real spherical-harmonic
//! basis, together with the hand-derived partial derivatives the backward
//! pass chains through.

use nalgebra::{Matrix3, Vector3};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub fn quat_to_rotation(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn quat_norm(q: [f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_normalize(q: [f64; 4]) -> [f64; 4] {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Partial derivatives dR/dq_k of `quat_to_rotation` treating the four
/// components as free parameters (normalization is chained separately).
pub fn quat_rotation_jacobian(q: [f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = q;
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    [dw, dx, dy, dz]
}

/// Pull a gradient w.r.t. the normalized quaternion back to the raw one:
/// d(q/|q|)/dq = (I - n n^T) / |q| with n = q/|q|.
pub fn quat_normalize_backward(raw: [f64; 4], grad_unit: [f64; 4]) -> [f64; 4] {
    let norm = quat_norm(raw);
    let n = quat_normalize(raw);
    let dot: f64 = (0..4).map(|i| n[i] * grad_unit[i]).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (grad_unit[i] - n[i] * dot) / norm;
    }
    out
}

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Real SH basis values at a unit direction, degrees 0..=3, in the
/// splatting-standard band ordering.
pub fn sh_basis(degree: usize, d: Vector3<f64>) -> Vec<f64> {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut b = Vec::with_capacity(sh_coeff_count(degree));
    b.push(SH_C0);
    if degree >= 1 {
        b.push(-SH_C1 * y);
        b.push(SH_C1 * z);
        b.push(-SH_C1 * x);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b.push(SH_C2[0] * x * y);
        b.push(SH_C2[1] * y * z);
        b.push(SH_C2[2] * (2.0 * zz - xx - yy));
        b.push(SH_C2[3] * x * z);
        b.push(SH_C2[4] * (xx - yy));
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b.push(SH_C3[0] * y * (3.0 * xx - yy));
        b.push(SH_C3[1] * x * y * z);
        b.push(SH_C3[2] * y * (4.0 * zz - xx - yy));
        b.push(SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy));
        b.push(SH_C3[4] * x * (4.0 * zz - xx - yy));
        b.push(SH_C3[5] * z * (xx - yy));
        b.push(SH_C3[6] * x * (xx - 3.0 * yy));
    }
    b
}

/// Gradient of every basis function w.r.t. the direction components.
pub fn sh_basis_gradient(degree: usize, d: Vector3<f64>) -> Vec<Vector3<f64>> {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut g = Vec::with_capacity(sh_coeff_count(degree));
    g.push(Vector3::zeros());
    if degree >= 1 {
        g.push(Vector3::new(0.0, -SH_C1, 0.0));
        g.push(Vector3::new(0.0, 0.0, SH_C1));
        g.push(Vector3::new(-SH_C1, 0.0, 0.0));
    }
    if degree >= 2 {
        g.push(SH_C2[0] * Vector3::new(y, x, 0.0));
        g.push(SH_C2[1] * Vector3::new(0.0, z, y));
        g.push(SH_C2[2] * Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z));
        g.push(SH_C2[3] * Vector3::new(z, 0.0, x));
        g.push(SH_C2[4] * Vector3::new(2.0 * x, -2.0 * y, 0.0));
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        g.push(SH_C3[0] * Vector3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0));
        g.push(SH_C3[1] * Vector3::new(y * z, x * z, x * y));
        g.push(SH_C3[2] * Vector3::new(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z));
        g.push(SH_C3[3] * Vector3::new(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy));
        g.push(SH_C3[4] * Vector3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z));
        g.push(SH_C3[5] * Vector3::new(2.0 * x * z, -2.0 * y * z, xx - yy));
        g.push(SH_C3[6] * Vector3::new(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0));
    }
    g
}
