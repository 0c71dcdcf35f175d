//! Reverse-mode analytic gradients of the masked loss with respect to every
//! learnable parameter, plus the central-difference oracle used to verify
//! them.
//!
//! The backward pass replays the forward blending per pixel front-to-back,
//! reverse-scans the contributor list to get per-splat alpha/color/depth
//! gradients, and then runs the geometric chain (projection Jacobian, EWA
//! covariance, quaternion normalization, deformation basis) once per splat.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::camera::CameraModel;
use crate::dataset::FrameSample;
use crate::deform::{channel_backward, deform_scene, ChannelParams, DeformationField};
use crate::error::{Error, Result};
use crate::math::{quat_normalize_backward, quat_rotation_jacobian, quat_to_rotation, sh_basis, sh_basis_gradient};
use crate::render::{
    masked_loss_with_grad, prepare_frame, render_prepared, row_bands, splat_color_at,
    FrameGeometry, LossNorm, LossReport, PreparedSplat, RenderConfig, ALPHA_CLAMP, ALPHA_SKIP,
    TILE_SIZE, TRANSMITTANCE_FLOOR,
};
use crate::scene::GaussianScene;

/// Gradients mirroring one primitive's raw parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveGrads {
    pub center: Vector3<f64>,
    pub rotation: [f64; 4],
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub sh_coeffs: Vec<Vector3<f64>>,
    pub anchor_offsets: Vec<Vector2<f64>>,
    pub anchor_colors: Vec<Vector3<f64>>,
    /// ||dL/d mean2d|| of this pass, accumulated by the trainer for
    /// densification.
    pub screen_grad_norm: f64,
}

impl PrimitiveGrads {
    fn zeros(sh_len: usize, anchor_len: usize) -> Self {
        Self {
            center: Vector3::zeros(),
            rotation: [0.0; 4],
            log_scale: Vector3::zeros(),
            opacity_logit: 0.0,
            sh_coeffs: vec![Vector3::zeros(); sh_len],
            anchor_offsets: vec![Vector2::zeros(); anchor_len],
            anchor_colors: vec![Vector3::zeros(); anchor_len],
            screen_grad_norm: 0.0,
        }
    }

    fn is_finite(&self) -> Option<&'static str> {
        if !self.center.iter().all(|v| v.is_finite()) {
            return Some("center");
        }
        if !self.rotation.iter().all(|v| v.is_finite()) {
            return Some("rotation");
        }
        if !self.log_scale.iter().all(|v| v.is_finite()) {
            return Some("log_scale");
        }
        if !self.opacity_logit.is_finite() {
            return Some("opacity_logit");
        }
        if !self.sh_coeffs.iter().all(|c| c.iter().all(|v| v.is_finite())) {
            return Some("sh_coeffs");
        }
        if !self.anchor_offsets.iter().all(|c| c.iter().all(|v| v.is_finite())) {
            return Some("anchor_offsets");
        }
        if !self.anchor_colors.iter().all(|c| c.iter().all(|v| v.is_finite())) {
            return Some("anchor_colors");
        }
        None
    }
}

/// Gradient mirror of the full parameter set. The deformation part reuses
/// the field structure itself.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    pub primitives: Vec<PrimitiveGrads>,
    pub field: DeformationField,
}

impl GradientBuffer {
    pub fn zeros(scene: &GaussianScene, field: &DeformationField) -> Self {
        let primitives = scene
            .primitives
            .iter()
            .map(|p| PrimitiveGrads::zeros(p.sh_coeffs.len(), p.anchors.len()))
            .collect();
        Self {
            primitives,
            field: field.zeros_like(),
        }
    }
}

/// Per-splat accumulators filled by the pixel loop, consumed once by the
/// geometric chain.
#[derive(Debug, Clone)]
struct SplatAccum {
    mean2d: Vector2<f64>,
    /// dL/dM with M the inverse screen covariance.
    cov2d_inv: Matrix2<f64>,
    depth: f64,
    sh_rgb: Vector3<f64>,
    opacity: f64,
    anchor_offsets: Vec<Vector2<f64>>,
    anchor_colors: Vec<Vector3<f64>>,
}

impl SplatAccum {
    fn zeros(anchor_len: usize) -> Self {
        Self {
            mean2d: Vector2::zeros(),
            cov2d_inv: Matrix2::zeros(),
            depth: 0.0,
            sh_rgb: Vector3::zeros(),
            opacity: 0.0,
            anchor_offsets: vec![Vector2::zeros(); anchor_len],
            anchor_colors: vec![Vector3::zeros(); anchor_len],
        }
    }

    fn merge(&mut self, other: &SplatAccum) {
        self.mean2d += other.mean2d;
        self.cov2d_inv += other.cov2d_inv;
        self.depth += other.depth;
        self.sh_rgb += other.sh_rgb;
        self.opacity += other.opacity;
        for (a, b) in self.anchor_offsets.iter_mut().zip(&other.anchor_offsets) {
            *a += b;
        }
        for (a, b) in self.anchor_colors.iter_mut().zip(&other.anchor_colors) {
            *a += b;
        }
    }
}

struct Contributor {
    order: usize,
    alpha: f64,
    gaussian: f64,
    clamped: bool,
    transmittance: f64,
    color: Vector3<f64>,
    /// Channel passes the zero floor.
    pass: [bool; 3],
    delta: Vector2<f64>,
}

#[allow(clippy::too_many_arguments)]
fn backward_rows(
    scene_at_t: &GaussianScene,
    geometry: &FrameGeometry,
    config: &RenderConfig,
    grad_color: &crate::img::ColorImage,
    grad_depth: &crate::img::ScalarImage,
    width: usize,
    y0: usize,
    y1: usize,
) -> Vec<SplatAccum> {
    let lambda_e = config.color_field.lambda_e;
    let mut accums: Vec<SplatAccum> = geometry
        .splats
        .iter()
        .map(|s| SplatAccum::zeros(s.anchor_pos.len()))
        .collect();
    let mut contributors: Vec<Contributor> = Vec::new();

    for y in y0..y1 {
        let tile_row = &geometry.tiles
            [(y / TILE_SIZE) * geometry.tiles_x..(y / TILE_SIZE + 1) * geometry.tiles_x];
        for x in 0..width {
            let idx = y * width + x;
            let d_color = grad_color.data[idx];
            let d_depth = grad_depth.data[idx];
            if d_color == Vector3::zeros() && d_depth == 0.0 {
                continue;
            }
            let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);

            // Replay of the forward walk, recording contributors.
            contributors.clear();
            let mut transmittance = 1.0;
            for &order in &tile_row[x / TILE_SIZE] {
                let splat = &geometry.splats[order as usize];
                let delta = p - splat.mean2d;
                let power = 0.5 * (delta.transpose() * splat.cov2d_inv * delta)[(0, 0)];
                let gaussian = (-power).exp();
                let raw_alpha = splat.opacity * gaussian;
                let alpha = raw_alpha.min(ALPHA_CLAMP);
                if alpha < ALPHA_SKIP {
                    continue;
                }
                let anchors = &scene_at_t.primitives[splat.primitive].anchors;
                let pre = splat_color_at(splat, anchors, p, lambda_e);
                contributors.push(Contributor {
                    order: order as usize,
                    alpha,
                    gaussian,
                    clamped: raw_alpha > ALPHA_CLAMP,
                    transmittance,
                    color: pre.map(|v| v.max(0.0)),
                    pass: [pre.x > 0.0, pre.y > 0.0, pre.z > 0.0],
                    delta,
                });
                transmittance *= 1.0 - alpha;
                if transmittance < TRANSMITTANCE_FLOOR {
                    break;
                }
            }

            // Reverse scan: dL/d alpha_i needs the downstream transmittance
            // gradient.
            let mut g_t_next = 0.0;
            for c in contributors.iter().rev() {
                let splat = &geometry.splats[c.order];
                let accum = &mut accums[c.order];
                let weight = c.transmittance * c.alpha;

                let color_score = d_color.dot(&c.color) + d_depth * splat.depth;
                let d_alpha = color_score * c.transmittance - c.transmittance * g_t_next;
                g_t_next = color_score * c.alpha + (1.0 - c.alpha) * g_t_next;

                accum.depth += d_depth * weight;

                // Color path, channel-masked by the zero floor.
                let d_post = d_color * weight;
                let d_masked = Vector3::new(
                    if c.pass[0] { d_post.x } else { 0.0 },
                    if c.pass[1] { d_post.y } else { 0.0 },
                    if c.pass[2] { d_post.z } else { 0.0 },
                );
                accum.sh_rgb += d_masked;
                let anchors = &scene_at_t.primitives[splat.primitive].anchors;
                for (a, (pos, spec)) in splat.anchor_pos.iter().zip(anchors).enumerate() {
                    let to_p = p - pos;
                    let w = (-lambda_e * to_p.norm_squared()).exp();
                    accum.anchor_colors[a] += w * d_masked;
                    let d_w = d_masked.dot(&spec.color);
                    let d_pos = 2.0 * lambda_e * w * d_w * to_p;
                    accum.anchor_offsets[a] += d_pos;
                    accum.mean2d += d_pos;
                }

                // Alpha path, blocked when the 0.99 ceiling clamped.
                if !c.clamped {
                    let d_gaussian = d_alpha * splat.opacity;
                    accum.opacity += d_alpha * c.gaussian;
                    let m_delta = splat.cov2d_inv * c.delta;
                    accum.mean2d += d_gaussian * c.gaussian * m_delta;
                    accum.cov2d_inv +=
                        (-0.5 * d_gaussian * c.gaussian) * (c.delta * c.delta.transpose());
                }
            }
        }
    }
    accums
}

fn chain_splat(
    splat: &PreparedSplat,
    accum: &SplatAccum,
    scene_at_t: &GaussianScene,
    camera: &CameraModel,
    sh_degree: usize,
    grads: &mut PrimitiveGrads,
) {
    let prim = &scene_at_t.primitives[splat.primitive];

    // Opacity logit through the sigmoid.
    let o = splat.opacity;
    grads.opacity_logit += accum.opacity * o * (1.0 - o);

    // Anchor leaves.
    for (g, a) in grads.anchor_offsets.iter_mut().zip(&accum.anchor_offsets) {
        *g += a;
    }
    for (g, a) in grads.anchor_colors.iter_mut().zip(&accum.anchor_colors) {
        *g += a;
    }
    grads.screen_grad_norm += accum.mean2d.norm();

    // SH coefficients and the view-direction path.
    let basis = sh_basis(sh_degree, splat.view_dir);
    let basis_grad = sh_basis_gradient(sh_degree, splat.view_dir);
    let mut d_dir = Vector3::zeros();
    for (k, (b, bg)) in basis.iter().zip(&basis_grad).enumerate() {
        grads.sh_coeffs[k] += accum.sh_rgb * *b;
        d_dir += accum.sh_rgb.dot(&prim.sh_coeffs[k]) * bg;
    }
    // view_dir = (mu - cam) / r: project out the radial component.
    let rel = prim.center - camera.position();
    let r = rel.norm();
    let mut d_center = (d_dir - splat.view_dir * splat.view_dir.dot(&d_dir)) / r;

    // Screen covariance: dL/dM -> dL/dSigma2D -> (J, Sigma_cam) paths.
    let m = splat.cov2d_inv;
    let d_sigma2d = -(m * accum.cov2d_inv * m);
    let jv = splat.jacobian * splat.cov_cam;
    let d_jacobian = 2.0 * d_sigma2d * jv;
    let d_cov_cam = splat.jacobian.transpose() * d_sigma2d * splat.jacobian;

    // Camera-space point gradient: pixel projection + Jacobian entries +
    // blended depth.
    let (cx, cy, cz) = (splat.cam_point.x, splat.cam_point.y, splat.cam_point.z);
    let (fx, fy) = (camera.fx, camera.fy);
    let z2 = cz * cz;
    let mut d_cam = Vector3::new(
        accum.mean2d.x * fx / cz + d_jacobian[(0, 2)] * (-fx / z2),
        accum.mean2d.y * fy / cz + d_jacobian[(1, 2)] * (-fy / z2),
        -accum.mean2d.x * fx * cx / z2 - accum.mean2d.y * fy * cy / z2
            + d_jacobian[(0, 0)] * (-fx / z2)
            + d_jacobian[(1, 1)] * (-fy / z2)
            + d_jacobian[(0, 2)] * (2.0 * fx * cx / (z2 * cz))
            + d_jacobian[(1, 2)] * (2.0 * fy * cy / (z2 * cz)),
    );
    d_cam.z += accum.depth;
    d_center += camera.rotation.transpose() * d_cam;
    grads.center += d_center;

    // World covariance: Sigma = R D R^T with D = diag(exp(2 s)).
    let d_cov_world = camera.rotation.transpose() * d_cov_cam * camera.rotation;
    let rot = quat_to_rotation(splat.rotation_unit);
    let d_diag = rot.transpose() * d_cov_world * rot;
    for k in 0..3 {
        grads.log_scale[k] += d_diag[(k, k)] * 2.0 * (2.0 * prim.log_scale[k]).exp();
    }
    let diag = Matrix3::from_diagonal(&prim.log_scale.map(|s| (2.0 * s).exp()));
    let d_rot = 2.0 * d_cov_world * rot * diag;
    let jac = quat_rotation_jacobian(splat.rotation_unit);
    let mut d_unit = [0.0; 4];
    for k in 0..4 {
        d_unit[k] = jac[k].component_mul(&d_rot).sum();
    }
    let d_raw = quat_normalize_backward(prim.rotation, d_unit);
    for k in 0..4 {
        grads.rotation[k] += d_raw[k];
    }
}

/// Full backward pass: forward render, masked loss, per-pixel reverse scan
/// and the per-splat geometric chain, ending in gradients for the canonical
/// scene and the deformation field.
pub fn backward(
    frame: &FrameSample,
    camera: &CameraModel,
    scene: &GaussianScene,
    field: &DeformationField,
    t: f64,
    config: &RenderConfig,
    norm: LossNorm,
) -> Result<(LossReport, GradientBuffer)> {
    let scene_t = deform_scene(scene, field, t)?;
    let geometry = prepare_frame(&scene_t, camera, config)?;
    let output = render_prepared(&scene_t, &geometry, camera, config)?;
    let (report, grad_color, grad_depth) = masked_loss_with_grad(&output, frame, norm)?;

    let width = camera.width;
    let bands = row_bands(camera.height, config.workers);
    let mut band_accums: Vec<Vec<SplatAccum>> = if bands.len() <= 1 {
        bands
            .iter()
            .map(|&(y0, y1)| {
                backward_rows(
                    &scene_t, &geometry, config, &grad_color, &grad_depth, width, y0, y1,
                )
            })
            .collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = bands
                .iter()
                .map(|&(y0, y1)| {
                    let (sc, ge, gc, gd) = (&scene_t, &geometry, &grad_color, &grad_depth);
                    scope.spawn(move || backward_rows(sc, ge, config, gc, gd, width, y0, y1))
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    };

    // Fixed-order reduction across worker bands.
    let mut accums = band_accums.remove(0);
    for band in &band_accums {
        for (a, b) in accums.iter_mut().zip(band) {
            a.merge(b);
        }
    }

    let mut buffer = GradientBuffer::zeros(scene, field);
    for (splat, accum) in geometry.splats.iter().zip(&accums) {
        chain_splat(
            splat,
            accum,
            &scene_t,
            camera,
            scene.sh_degree,
            &mut buffer.primitives[splat.primitive],
        );

        // Deformed-parameter gradients feed the basis parameters; the
        // canonical scene sees the identical values (additive offsets).
        let grads = &buffer.primitives[splat.primitive];
        let mut upstream = [0.0; crate::deform::CHANNELS];
        upstream[..3].copy_from_slice(grads.center.as_slice());
        upstream[3..7].copy_from_slice(&grads.rotation);
        upstream[7..].copy_from_slice(grads.log_scale.as_slice());
        let channels = &field.primitives[splat.primitive].channels;
        let grad_channels = &mut buffer.field.primitives[splat.primitive].channels;
        for c in 0..crate::deform::CHANNELS {
            channel_backward(field.backend, &channels[c], t, upstream[c], &mut grad_channels[c]);
        }
    }

    for (i, grads) in buffer.primitives.iter().enumerate() {
        if let Some(bad_field) = grads.is_finite() {
            return Err(Error::NonFiniteGradient {
                primitive: i,
                field: bad_field.into(),
            });
        }
    }
    Ok((report, buffer))
}

/// Central finite differences (f(p+h) - f(p-h)) / 2h per coordinate, using
/// the exact same forward path as the loss being checked.
pub fn finite_diff<F>(mut loss_fn: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(params.len());
    let mut point = params.to_vec();
    for i in 0..params.len() {
        point[i] = params[i] + h;
        let plus = loss_fn(&point);
        point[i] = params[i] - h;
        let minus = loss_fn(&point);
        point[i] = params[i];
        grads.push((plus - minus) / (2.0 * h));
    }
    grads
}

/// Parameter classes reported by the gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamClass {
    Center,
    Rotation,
    LogScale,
    Opacity,
    Sh,
    AnchorOffset,
    AnchorColor,
    DeformWeight,
    DeformCenter,
    DeformLogWidth,
    DeformDelta,
    FpsCos,
    FpsSin,
    FpsPoly,
}

impl ParamClass {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Center => "center",
            Self::Rotation => "rotation",
            Self::LogScale => "log_scale",
            Self::Opacity => "opacity",
            Self::Sh => "sh",
            Self::AnchorOffset => "anchor_offset",
            Self::AnchorColor => "anchor_color",
            Self::DeformWeight => "deform_weight",
            Self::DeformCenter => "deform_center",
            Self::DeformLogWidth => "deform_log_width",
            Self::DeformDelta => "deform_delta",
            Self::FpsCos => "fps_cos",
            Self::FpsSin => "fps_sin",
            Self::FpsPoly => "fps_poly",
        }
    }
}

/// Visit every learnable scalar in a fixed order shared with
/// `flatten_grads`.
pub fn visit_params_mut(
    scene: &mut GaussianScene,
    field: &mut DeformationField,
    f: &mut impl FnMut(ParamClass, &mut f64),
) {
    for prim in &mut scene.primitives {
        for v in prim.center.iter_mut() {
            f(ParamClass::Center, v);
        }
        for v in prim.rotation.iter_mut() {
            f(ParamClass::Rotation, v);
        }
        for v in prim.log_scale.iter_mut() {
            f(ParamClass::LogScale, v);
        }
        f(ParamClass::Opacity, &mut prim.opacity_logit);
        for coeff in &mut prim.sh_coeffs {
            for v in coeff.iter_mut() {
                f(ParamClass::Sh, v);
            }
        }
        for anchor in &mut prim.anchors {
            for v in anchor.offset.iter_mut() {
                f(ParamClass::AnchorOffset, v);
            }
            for v in anchor.color.iter_mut() {
                f(ParamClass::AnchorColor, v);
            }
        }
    }
    for prim in &mut field.primitives {
        for channel in &mut prim.channels {
            match &mut channel.params {
                ChannelParams::Basis(b) => {
                    for v in &mut b.weights {
                        f(ParamClass::DeformWeight, v);
                    }
                    for v in &mut b.centers {
                        f(ParamClass::DeformCenter, v);
                    }
                    for v in &mut b.log_widths {
                        f(ParamClass::DeformLogWidth, v);
                    }
                }
                ChannelParams::Fourier(fp) => {
                    for v in &mut fp.cos_coeffs {
                        f(ParamClass::FpsCos, v);
                    }
                    for v in &mut fp.sin_coeffs {
                        f(ParamClass::FpsSin, v);
                    }
                    for v in &mut fp.poly_coeffs {
                        f(ParamClass::FpsPoly, v);
                    }
                }
            }
            f(ParamClass::DeformDelta, &mut channel.delta);
        }
    }
}

/// Flatten a gradient buffer in the same order as `visit_params_mut`.
pub fn flatten_grads(buffer: &GradientBuffer) -> Vec<(ParamClass, f64)> {
    let mut out = Vec::new();
    for prim in &buffer.primitives {
        for v in prim.center.iter() {
            out.push((ParamClass::Center, *v));
        }
        for v in prim.rotation.iter() {
            out.push((ParamClass::Rotation, *v));
        }
        for v in prim.log_scale.iter() {
            out.push((ParamClass::LogScale, *v));
        }
        out.push((ParamClass::Opacity, prim.opacity_logit));
        for coeff in &prim.sh_coeffs {
            for v in coeff.iter() {
                out.push((ParamClass::Sh, *v));
            }
        }
        for (offset, color) in prim.anchor_offsets.iter().zip(&prim.anchor_colors) {
            for v in offset.iter() {
                out.push((ParamClass::AnchorOffset, *v));
            }
            for v in color.iter() {
                out.push((ParamClass::AnchorColor, *v));
            }
        }
    }
    let mut grad_field = Vec::new();
    let mut clone = buffer.field.clone();
    visit_params_mut(&mut GaussianScene::new(0), &mut clone, &mut |class, v| {
        grad_field.push((class, *v));
    });
    out.extend(grad_field);
    out
}

/// Options for the standard gradient-check harness.
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub gaussians: usize,
    pub image_size: usize,
    pub anchors: usize,
    pub basis_count: usize,
    pub backend: crate::deform::DeformBackend,
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates where both gradients are below this are skipped.
    pub magnitude_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            gaussians: 5,
            image_size: 8,
            anchors: 4,
            basis_count: 4,
            backend: crate::deform::DeformBackend::Edm,
            step: 1e-4,
            tolerance: 1e-4,
            magnitude_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassStat {
    pub class: ParamClass,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub classes: Vec<ClassStat>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.classes
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

/// Randomized scene for gradient checks, built so every per-pixel gate
/// (alpha skip/clamp, transmittance floor, color floor, tile cull) stays
/// strictly away from its threshold: the finite-difference oracle then sees
/// a smooth loss.
pub fn gradcheck_setup(
    seed: u64,
    opts: &GradCheckOptions,
) -> (
    GaussianScene,
    DeformationField,
    CameraModel,
    FrameSample,
    f64,
) {
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let size = opts.image_size;
    let camera = CameraModel::facing_z(5.0 * size as f64, 5.0 * size as f64, size, size);

    let mut scene = GaussianScene::new(1);
    for i in 0..opts.gaussians {
        // Centers spread over the image, distinct depths, footprints wide
        // enough that every pixel keeps alpha far above the skip threshold.
        let px = (0.25 + 0.5 * (i as f64 + rng.random_range(0.0..0.6)) / opts.gaussians as f64)
            * size as f64;
        let py = rng.random_range(0.3..0.7) * size as f64;
        let z = 2.2 + 0.3 * i as f64 + rng.random_range(0.0..0.1);
        let center = crate::camera::back_project(&camera, Vector2::new(px, py), z);

        let mut prim = crate::scene::GaussianPrimitive::new(center, 1, opts.anchors);
        // Footprints wide relative to the image and clearly anisotropic so
        // the rotation path carries signal.
        let sigma_px = 0.75 * size as f64;
        let sigma_world = sigma_px * z / camera.fx;
        prim.log_scale =
            Vector3::from_fn(|_, _| (sigma_world * rng.random_range(0.7..1.45)).ln());
        prim.rotation = crate::math::quat_normalize([
            rng.random_range(0.5..1.0),
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.4..0.4),
        ]);
        prim.opacity_logit = rng.random_range(-1.0..1.0);
        prim.sh_coeffs[0] = Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3));
        for coeff in prim.sh_coeffs.iter_mut().skip(1) {
            *coeff = Vector3::from_fn(|_, _| rng.random_range(-0.06..0.06));
        }
        for anchor in &mut prim.anchors {
            anchor.color = Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05));
        }
        scene.primitives.push(prim);
    }

    let config = crate::deform::DeformConfig {
        backend: opts.backend,
        basis_count: opts.basis_count,
        fourier_pairs: 3,
        poly_degree: 3,
    };
    let mut field = DeformationField::new(&config, opts.gaussians);
    for prim in &mut field.primitives {
        for channel in &mut prim.channels {
            match &mut channel.params {
                ChannelParams::Basis(b) => {
                    for j in 0..b.weights.len() {
                        // Bounded away from zero so every theta/width
                        // gradient stays above the finite-difference
                        // roundoff floor.
                        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        b.weights[j] = sign * rng.random_range(0.02..0.05);
                        b.log_widths[j] += rng.random_range(0.1..0.5);
                    }
                    channel.delta = rng.random_range(-0.02..0.02);
                }
                ChannelParams::Fourier(f) => {
                    for v in f.cos_coeffs.iter_mut().chain(&mut f.sin_coeffs) {
                        *v = rng.random_range(-0.01..0.01);
                    }
                    for p in &mut f.poly_coeffs {
                        *p = rng.random_range(-0.01..0.01);
                    }
                }
            }
        }
    }

    // All-black target with a full mask: residuals stay strictly positive,
    // so the L1 sign never flips inside a finite-difference step. The
    // timestamp sits between basis centers.
    let frame = FrameSample {
        color: crate::img::ColorImage::zeros(size, size),
        depth: crate::img::ScalarImage::zeros(size, size),
        mask: vec![true; size * size],
        time: 0.53,
        camera_index: 0,
    };
    let t = frame.time;
    (scene, field, camera, frame, t)
}

/// Analytic-vs-central-difference comparison over every parameter class.
pub fn run_gradcheck(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    use std::collections::HashMap;

    let (scene, field, camera, frame, t) = gradcheck_setup(seed, opts);
    let config = RenderConfig::default();

    let (_, buffer) = backward(&frame, &camera, &scene, &field, t, &config, LossNorm::L1)?;
    let analytic = flatten_grads(&buffer);

    let loss_at = |scene: &GaussianScene, field: &DeformationField| -> Result<f64> {
        let scene_t = deform_scene(scene, field, t)?;
        let out = crate::render::render(&scene_t, &camera, &config)?;
        Ok(crate::render::masked_loss(&out, &frame, LossNorm::L1)?.total)
    };

    let mut stats: HashMap<ParamClass, ClassStat> = HashMap::new();
    for (index, &(class, analytic_grad)) in analytic.iter().enumerate() {
        let eval = |offset: f64| -> Result<f64> {
            let mut s = scene.clone();
            let mut f = field.clone();
            let mut k = 0usize;
            visit_params_mut(&mut s, &mut f, &mut |_, v| {
                if k == index {
                    *v += offset;
                }
                k += 1;
            });
            loss_at(&s, &f)
        };
        let fd = (eval(opts.step)? - eval(-opts.step)?) / (2.0 * opts.step);

        let entry = stats.entry(class).or_insert(ClassStat {
            class,
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
        });
        if analytic_grad.abs() < opts.magnitude_floor && fd.abs() < opts.magnitude_floor {
            entry.skipped += 1;
            continue;
        }
        let rel = (analytic_grad - fd).abs() / analytic_grad.abs().max(fd.abs());
        entry.checked += 1;
        entry.max_rel_error = entry.max_rel_error.max(rel);
    }

    let mut classes: Vec<ClassStat> = stats.into_values().collect();
    classes.sort_by_key(|s| s.class.name());
    Ok(GradCheckReport { classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_probe_functions() {
        // Quadratic: exact up to rounding at h = 1e-4.
        let g = finite_diff(|p| p[0] * p[0], &[3.0], 1e-4);
        assert!((g[0] - 6.0).abs() < 1e-8);
        // Linear: exact up to rounding.
        let g = finite_diff(|p| 5.0 * p[0], &[1.7], 1e-4);
        assert!((g[0] - 5.0).abs() < 1e-10);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let report = run_gradcheck(1, &GradCheckOptions::default()).unwrap();
        for c in &report.classes {
            println!(
                "{:<18} checked {:>4} skipped {:>3} max rel {:.3e}",
                c.class.name(),
                c.checked,
                c.skipped,
                c.max_rel_error
            );
        }
        assert!(
            report.passed(1e-4),
            "max relative error {:.3e}",
            report.max_rel_error()
        );
    }

    #[test]
    fn fps_backend_gradients_match_finite_differences() {
        let opts = GradCheckOptions {
            backend: crate::deform::DeformBackend::Fps,
            gaussians: 3,
            ..GradCheckOptions::default()
        };
        let report = run_gradcheck(5, &opts).unwrap();
        assert!(
            report.passed(1e-4),
            "max relative error {:.3e}",
            report.max_rel_error()
        );
    }

    #[test]
    fn zero_loss_configuration_gives_zero_gradients() {
        let opts = GradCheckOptions::default();
        let (scene, field, camera, mut frame, t) = gradcheck_setup(2, &opts);
        // Make the target equal the render: L1 subgradient 0 at 0.
        let scene_t = deform_scene(&scene, &field, t).unwrap();
        let out = crate::render::render(&scene_t, &camera, &RenderConfig::default()).unwrap();
        frame.color = out.color.clone();
        frame.depth = out.depth.clone();

        let (report, buffer) = backward(
            &frame,
            &camera,
            &scene,
            &field,
            t,
            &RenderConfig::default(),
            LossNorm::L1,
        )
        .unwrap();
        assert_eq!(report.total, 0.0);
        for (_, g) in flatten_grads(&buffer) {
            assert_eq!(g, 0.0);
        }
    }

    #[test]
    fn delta_gradient_equals_center_gradient() {
        let opts = GradCheckOptions::default();
        let (scene, field, camera, frame, t) = gradcheck_setup(3, &opts);
        let (_, buffer) = backward(
            &frame,
            &camera,
            &scene,
            &field,
            t,
            &RenderConfig::default(),
            LossNorm::L1,
        )
        .unwrap();
        // psi is linear in delta with unit slope: the two gradients are
        // bitwise identical.
        for (prim, grads) in buffer.field.primitives.iter().zip(&buffer.primitives) {
            assert_eq!(prim.channels[0].delta, grads.center.x);
            assert_eq!(prim.channels[1].delta, grads.center.y);
            assert_eq!(prim.channels[2].delta, grads.center.z);
            assert_eq!(prim.channels[3].delta, grads.rotation[0]);
            assert_eq!(prim.channels[9].delta, grads.log_scale.z);
        }
    }

    #[test]
    fn masked_out_pixels_contribute_no_gradient() {
        let opts = GradCheckOptions::default();
        let (scene, field, camera, mut frame, t) = gradcheck_setup(4, &opts);
        for (i, m) in frame.mask.iter_mut().enumerate() {
            *m = (i / 8 + i % 8) % 2 == 0;
        }
        let run = |frame: &FrameSample| {
            backward(
                frame,
                &camera,
                &scene,
                &field,
                t,
                &RenderConfig::default(),
                LossNorm::L1,
            )
            .unwrap()
        };
        let (report_a, buffer_a) = run(&frame);

        // Perturbing the target outside the mask changes nothing.
        let mut tampered = frame.clone();
        for (i, m) in tampered.mask.iter().enumerate() {
            if !m {
                tampered.color.data[i] += nalgebra::Vector3::repeat(0.77);
                tampered.depth.data[i] += 5.0;
            }
        }
        let (report_b, buffer_b) = run(&tampered);
        assert_eq!(report_a.total, report_b.total);
        let ga = flatten_grads(&buffer_a);
        let gb = flatten_grads(&buffer_b);
        assert_eq!(ga.len(), gb.len());
        for ((_, a), (_, b)) in ga.iter().zip(&gb) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn multi_worker_backward_matches_reference_statistically() {
        let opts = GradCheckOptions::default();
        let (scene, field, camera, frame, t) = gradcheck_setup(6, &opts);
        let run = |workers: usize| {
            let config = RenderConfig {
                workers,
                ..RenderConfig::default()
            };
            backward(&frame, &camera, &scene, &field, t, &config, LossNorm::L1).unwrap()
        };
        let (report_1, buffer_1) = run(1);
        let (report_3, buffer_3) = run(3);
        assert!((report_1.total - report_3.total).abs() < 1e-12);
        for ((_, a), (_, b)) in flatten_grads(&buffer_1)
            .iter()
            .zip(&flatten_grads(&buffer_3))
        {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0));
        }
    }
}
