//! Time-conditioned deformation of primitive attributes: weighted Gaussian
//! basis functions plus a time-independent global offset per channel, with
//! the Fourier+polynomial and no-offset ablation backends.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::GaussianScene;

/// Deformed attribute channels per primitive: 3 center + 4 quaternion +
/// 3 log-scale.
pub const CHANNELS: usize = 10;

/// Width floor preventing basis collapse into delta spikes.
pub const MIN_WIDTH: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeformBackend {
    /// Gaussian basis plus learnable global offset.
    Edm,
    /// Gaussian basis only; the offset is frozen at zero.
    Gs,
    /// Fourier series plus polynomial ablation backend.
    Fps,
}

impl std::str::FromStr for DeformBackend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edm" => Ok(Self::Edm),
            "gs" => Ok(Self::Gs),
            "fps" => Ok(Self::Fps),
            other => Err(Error::Config(format!("unknown deformation backend '{other}'"))),
        }
    }
}

impl DeformBackend {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Edm => "edm",
            Self::Gs => "gs",
            Self::Fps => "fps",
        }
    }
}

/// Weighted Gaussian basis set for one attribute channel. Widths are stored
/// in log-space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    pub weights: Vec<f64>,
    pub centers: Vec<f64>,
    pub log_widths: Vec<f64>,
}

impl BasisSet {
    /// Zero-weight set with centers uniformly covering [0, 1] and widths 1/B.
    pub fn uniform(basis_count: usize) -> Self {
        let centers = if basis_count == 1 {
            vec![0.5]
        } else {
            (0..basis_count)
                .map(|j| j as f64 / (basis_count - 1) as f64)
                .collect()
        };
        Self {
            weights: vec![0.0; basis_count],
            centers,
            log_widths: vec![(1.0 / basis_count as f64).ln(); basis_count],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weights: vec![0.0; self.weights.len()],
            centers: vec![0.0; self.centers.len()],
            log_widths: vec![0.0; self.log_widths.len()],
        }
    }
}

/// Fourier + polynomial coefficients for one attribute channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierPolySet {
    pub cos_coeffs: Vec<f64>,
    pub sin_coeffs: Vec<f64>,
    /// p_0..p_n, evaluated as sum p_n t^n.
    pub poly_coeffs: Vec<f64>,
}

impl FourierPolySet {
    pub fn zeros(fourier_pairs: usize, poly_degree: usize) -> Self {
        Self {
            cos_coeffs: vec![0.0; fourier_pairs],
            sin_coeffs: vec![0.0; fourier_pairs],
            poly_coeffs: vec![0.0; poly_degree + 1],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            cos_coeffs: vec![0.0; self.cos_coeffs.len()],
            sin_coeffs: vec![0.0; self.sin_coeffs.len()],
            poly_coeffs: vec![0.0; self.poly_coeffs.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ChannelParams {
    Basis(BasisSet),
    Fourier(FourierPolySet),
}

impl ChannelParams {
    pub fn zeros_like(&self) -> Self {
        match self {
            Self::Basis(b) => Self::Basis(b.zeros_like()),
            Self::Fourier(f) => Self::Fourier(f.zeros_like()),
        }
    }
}

/// Deformation parameters of one attribute channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDeform {
    pub params: ChannelParams,
    /// Time-independent global offset. Zero-fixed for the GS backend and
    /// unused by FPS (its p_0 plays that role).
    pub delta: f64,
}

impl ChannelDeform {
    pub fn zeros_like(&self) -> Self {
        Self {
            params: self.params.zeros_like(),
            delta: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveDeform {
    pub channels: Vec<ChannelDeform>,
}

impl PrimitiveDeform {
    pub fn zeros_like(&self) -> Self {
        Self {
            channels: self.channels.iter().map(ChannelDeform::zeros_like).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformConfig {
    pub backend: DeformBackend,
    /// B for the Gaussian-basis backends.
    pub basis_count: usize,
    /// Fourier pair count for FPS.
    pub fourier_pairs: usize,
    /// Polynomial degree for FPS.
    pub poly_degree: usize,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self {
            backend: DeformBackend::Edm,
            basis_count: 17,
            fourier_pairs: 8,
            poly_degree: 3,
        }
    }
}

/// Per-primitive, per-channel deformation field. The same structure doubles
/// as its own gradient container (`zeros_like`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationField {
    pub backend: DeformBackend,
    pub primitives: Vec<PrimitiveDeform>,
}

impl DeformationField {
    pub fn new(config: &DeformConfig, primitive_count: usize) -> Self {
        let channel = ChannelDeform {
            params: match config.backend {
                DeformBackend::Edm | DeformBackend::Gs => {
                    ChannelParams::Basis(BasisSet::uniform(config.basis_count))
                }
                DeformBackend::Fps => ChannelParams::Fourier(FourierPolySet::zeros(
                    config.fourier_pairs,
                    config.poly_degree,
                )),
            },
            delta: 0.0,
        };
        let prim = PrimitiveDeform {
            channels: vec![channel; CHANNELS],
        };
        Self {
            backend: config.backend,
            primitives: vec![prim; primitive_count],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            backend: self.backend,
            primitives: self.primitives.iter().map(PrimitiveDeform::zeros_like).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// All ten channel offsets of one primitive at time `t`.
    pub fn eval_primitive(&self, index: usize, t: f64) -> [f64; CHANNELS] {
        let mut out = [0.0; CHANNELS];
        for (c, slot) in self.primitives[index].channels.iter().zip(out.iter_mut()) {
            *slot = eval_channel(self.backend, c, t);
        }
        out
    }
}

/// exp(-(t - center)^2 / (2 width^2)); equals 1 at t = center.
pub fn basis_eval(t: f64, center: f64, width: f64) -> f64 {
    let u = t - center;
    (-u * u / (2.0 * width * width)).exp()
}

/// Weighted basis sum plus the global offset.
pub fn edm_eval(t: f64, basis: &BasisSet, delta: f64) -> f64 {
    let mut acc = 0.0;
    for j in 0..basis.len() {
        acc += basis.weights[j] * basis_eval(t, basis.centers[j], basis.log_widths[j].exp());
    }
    acc + delta
}

/// Fourier series plus polynomial: sum_m [a_m cos(2 pi m t) + b_m sin(2 pi m t)]
/// + sum_n p_n t^n.
pub fn fps_eval(t: f64, fps: &FourierPolySet) -> f64 {
    let mut acc = 0.0;
    for (m, (a, b)) in fps.cos_coeffs.iter().zip(&fps.sin_coeffs).enumerate() {
        let phase = 2.0 * std::f64::consts::PI * (m + 1) as f64 * t;
        acc += a * phase.cos() + b * phase.sin();
    }
    let mut tn = 1.0;
    for p in &fps.poly_coeffs {
        acc += p * tn;
        tn *= t;
    }
    acc
}

fn eval_channel(backend: DeformBackend, channel: &ChannelDeform, t: f64) -> f64 {
    match (&channel.params, backend) {
        (ChannelParams::Basis(b), DeformBackend::Edm) => edm_eval(t, b, channel.delta),
        (ChannelParams::Basis(b), DeformBackend::Gs) => edm_eval(t, b, channel.delta),
        (ChannelParams::Fourier(f), DeformBackend::Fps) => fps_eval(t, f),
        _ => panic!("deformation channel parameters do not match the field backend"),
    }
}

/// Accumulate the gradient of one channel's parameters given the upstream
/// gradient w.r.t. the channel offset value at time `t`.
pub fn channel_backward(
    backend: DeformBackend,
    channel: &ChannelDeform,
    t: f64,
    upstream: f64,
    grad: &mut ChannelDeform,
) {
    match (&channel.params, &mut grad.params) {
        (ChannelParams::Basis(b), ChannelParams::Basis(gb)) => {
            for j in 0..b.len() {
                let width = b.log_widths[j].exp();
                let u = t - b.centers[j];
                let bj = basis_eval(t, b.centers[j], width);
                gb.weights[j] += upstream * bj;
                gb.centers[j] += upstream * b.weights[j] * bj * u / (width * width);
                gb.log_widths[j] += upstream * b.weights[j] * bj * u * u / (width * width);
            }
            if backend == DeformBackend::Edm {
                grad.delta += upstream;
            }
        }
        (ChannelParams::Fourier(f), ChannelParams::Fourier(gf)) => {
            for m in 0..f.cos_coeffs.len() {
                let phase = 2.0 * std::f64::consts::PI * (m + 1) as f64 * t;
                gf.cos_coeffs[m] += upstream * phase.cos();
                gf.sin_coeffs[m] += upstream * phase.sin();
            }
            let mut tn = 1.0;
            for p in gf.poly_coeffs.iter_mut() {
                *p += upstream * tn;
                tn *= t;
            }
        }
        _ => panic!("gradient container shape does not match the field"),
    }
}

/// Derived scene at time `t`: centers, raw quaternions and log-scales get
/// the channel offsets added; opacity, SH and anchors are untouched.
pub fn deform_scene(scene: &GaussianScene, field: &DeformationField, t: f64) -> Result<GaussianScene> {
    if scene.len() != field.len() {
        return Err(Error::Config(format!(
            "deformation field covers {} primitives but the scene has {}",
            field.len(),
            scene.len()
        )));
    }
    let mut out = scene.clone();
    for (i, prim) in out.primitives.iter_mut().enumerate() {
        let psi = field.eval_primitive(i, t);
        prim.center += Vector3::new(psi[0], psi[1], psi[2]);
        for (q, offset) in prim.rotation.iter_mut().zip(&psi[3..7]) {
            *q += offset;
        }
        prim.log_scale += Vector3::new(psi[7], psi[8], psi[9]);
    }
    Ok(out)
}
