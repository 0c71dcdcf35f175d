//! Forward rasterization: depth-sorted front-to-back alpha blending of
//! per-pixel combined colors and center depths, plus the masked training
//! loss.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{project_point, projection_jacobian, CameraModel, COV2D_DILATION};
use crate::color::ColorFieldConfig;
use crate::dataset::FrameSample;
use crate::error::{Error, Result};
use crate::img::{ColorImage, ScalarImage};
use crate::math::sh_basis;
use crate::scene::{activations, build_covariance, GaussianScene};

/// Per-pixel alpha ceiling.
pub const ALPHA_CLAMP: f64 = 0.99;
/// Contributions below this alpha are skipped.
pub const ALPHA_SKIP: f64 = 1.0 / 255.0;
/// Blending stops once the remaining transmittance falls below this.
pub const TRANSMITTANCE_FLOOR: f64 = 1e-4;
/// Tile edge for the screen-space culling grid.
pub const TILE_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub color_field: ColorFieldConfig,
    /// Pixel-parallel worker count; 1 is the determinism reference.
    pub workers: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            color_field: ColorFieldConfig::default(),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: ColorImage,
    pub depth: ScalarImage,
    /// Remaining transparency after blending, in [0, 1].
    pub transmittance: ScalarImage,
    /// Sum of blend weights per pixel; weight_sum + transmittance = 1.
    pub weight_sum: ScalarImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    L1,
    L2,
}

impl std::str::FromStr for LossNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            other => Err(Error::Config(format!("unknown loss norm '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub color_term: f64,
    pub depth_term: f64,
    pub total: f64,
}

/// One projected, activated primitive ready for per-pixel evaluation.
#[derive(Debug, Clone)]
pub(crate) struct PreparedSplat {
    /// Index into the scene's primitive list.
    pub primitive: usize,
    pub mean2d: Vector2<f64>,
    pub cov2d_inv: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    /// Pre-clamp SH base color at this view.
    pub sh_rgb: Vector3<f64>,
    /// Cached pieces for the backward chain.
    pub cam_point: Vector3<f64>,
    pub cov_cam: Matrix3<f64>,
    pub jacobian: Matrix2x3<f64>,
    pub view_dir: Vector3<f64>,
    pub rotation_unit: [f64; 4],
    /// Absolute anchor positions on the image plane.
    pub anchor_pos: Vec<Vector2<f64>>,
    /// Cull radius in pixels (alpha strictly below the skip threshold
    /// outside it).
    pub radius: f64,
}

pub(crate) struct FrameGeometry {
    /// Splats sorted front-to-back by depth (ties by primitive index).
    pub splats: Vec<PreparedSplat>,
    /// Per-tile lists of indices into `splats`, preserving sort order.
    pub tiles: Vec<Vec<u32>>,
    pub tiles_x: usize,
}

fn cull_radius(cov2d: &Matrix2<f64>, opacity: f64) -> Option<f64> {
    if opacity <= ALPHA_SKIP {
        return None;
    }
    let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
    let half_trace = 0.5 * (a + c);
    let lambda_max = half_trace + (0.25 * (a - c) * (a - c) + b * b).sqrt();
    // alpha < skip outside the Mahalanobis shell 2 ln(opacity / skip); the
    // largest Euclidean radius of that ellipse uses the top eigenvalue.
    let shell = 2.0 * (opacity / ALPHA_SKIP).ln();
    Some((shell * lambda_max).sqrt() * (1.0 + 1e-12) + 1e-9)
}

pub(crate) fn prepare_frame(
    scene_at_t: &GaussianScene,
    camera: &CameraModel,
    _config: &RenderConfig,
) -> Result<FrameGeometry> {
    let mut splats = Vec::with_capacity(scene_at_t.len());
    for (i, prim) in scene_at_t.primitives.iter().enumerate() {
        let act = activations(prim, i)?;
        let Some((mean2d, depth)) = project_point(camera, prim.center) else {
            continue;
        };

        let cov_world = build_covariance(act.rotation_unit, prim.log_scale);
        let cam_point = camera.world_to_camera(prim.center);
        let jacobian = projection_jacobian(camera, cam_point);
        let cov_cam = camera.rotation * cov_world * camera.rotation.transpose();
        let cov2d =
            jacobian * cov_cam * jacobian.transpose() + Matrix2::identity() * COV2D_DILATION;

        let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
        if !(det > 0.0) || !cov2d.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter {
                primitive: i,
                detail: format!("projected covariance is not positive definite (det {det})"),
            });
        }
        let cov2d_inv = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)])
            / det;

        let Some(radius) = cull_radius(&cov2d, act.opacity) else {
            continue;
        };

        let view_dir = camera.view_direction(prim.center);
        let basis = sh_basis(scene_at_t.sh_degree, view_dir);
        let mut sh_rgb = Vector3::new(0.5, 0.5, 0.5);
        for (b, coeff) in basis.iter().zip(&prim.sh_coeffs) {
            sh_rgb += *b * coeff;
        }

        splats.push(PreparedSplat {
            primitive: i,
            mean2d,
            cov2d_inv,
            depth,
            opacity: act.opacity,
            sh_rgb,
            cam_point,
            cov_cam,
            jacobian,
            view_dir,
            rotation_unit: act.rotation_unit,
            anchor_pos: prim.anchors.iter().map(|a| mean2d + a.offset).collect(),
            radius,
        });
    }

    splats.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap()
            .then(a.primitive.cmp(&b.primitive))
    });

    let tiles_x = camera.width.div_ceil(TILE_SIZE);
    let tiles_y = camera.height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (order, splat) in splats.iter().enumerate() {
        // Pixel index range whose centers fall inside the cull box.
        let x_min = (splat.mean2d.x - splat.radius - 0.5).ceil().max(0.0) as usize;
        let y_min = (splat.mean2d.y - splat.radius - 0.5).ceil().max(0.0) as usize;
        let x_max = (splat.mean2d.x + splat.radius - 0.5).floor();
        let y_max = (splat.mean2d.y + splat.radius - 0.5).floor();
        if x_max < 0.0 || y_max < 0.0 || x_min >= camera.width || y_min >= camera.height {
            continue;
        }
        let x_max = (x_max as usize).min(camera.width - 1);
        let y_max = (y_max as usize).min(camera.height - 1);
        for ty in y_min / TILE_SIZE..=y_max / TILE_SIZE {
            for tx in x_min / TILE_SIZE..=x_max / TILE_SIZE {
                tiles[ty * tiles_x + tx].push(order as u32);
            }
        }
    }

    Ok(FrameGeometry {
        splats,
        tiles,
        tiles_x,
    })
}

/// Pre-clamp combined color of one splat at a pixel center.
#[inline]
pub(crate) fn splat_color_at(
    splat: &PreparedSplat,
    anchors: &[crate::scene::AnchorSpec],
    p: Vector2<f64>,
    lambda_e: f64,
) -> Vector3<f64> {
    let mut c = splat.sh_rgb;
    for (pos, spec) in splat.anchor_pos.iter().zip(anchors) {
        let w = (-lambda_e * (p - pos).norm_squared()).exp();
        c += w * spec.color;
    }
    c
}

struct RowBand {
    y0: usize,
    y1: usize,
    color: Vec<Vector3<f64>>,
    depth: Vec<f64>,
    transmittance: Vec<f64>,
    weight_sum: Vec<f64>,
}

fn render_rows(
    scene_at_t: &GaussianScene,
    geometry: &FrameGeometry,
    config: &RenderConfig,
    width: usize,
    y0: usize,
    y1: usize,
) -> Result<RowBand> {
    let lambda_e = config.color_field.lambda_e;
    let n = width * (y1 - y0);
    let mut band = RowBand {
        y0,
        y1,
        color: vec![Vector3::zeros(); n],
        depth: vec![0.0; n],
        transmittance: vec![1.0; n],
        weight_sum: vec![0.0; n],
    };

    for y in y0..y1 {
        let tile_row = &geometry.tiles
            [(y / TILE_SIZE) * geometry.tiles_x..(y / TILE_SIZE + 1) * geometry.tiles_x];
        for x in 0..width {
            let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut color = Vector3::zeros();
            let mut depth = 0.0;
            let mut weight_sum = 0.0;
            let mut transmittance = 1.0;

            for &order in &tile_row[x / TILE_SIZE] {
                let splat = &geometry.splats[order as usize];
                let delta = p - splat.mean2d;
                let power = 0.5 * (delta.transpose() * splat.cov2d_inv * delta)[(0, 0)];
                let alpha = (splat.opacity * (-power).exp()).min(ALPHA_CLAMP);
                if !alpha.is_finite() {
                    return Err(Error::Render {
                        x,
                        y,
                        primitive: splat.primitive,
                        detail: "non-finite alpha".into(),
                    });
                }
                if alpha < ALPHA_SKIP {
                    continue;
                }
                let anchors = &scene_at_t.primitives[splat.primitive].anchors;
                let c = splat_color_at(splat, anchors, p, lambda_e).map(|v| v.max(0.0));
                if !c.iter().all(|v| v.is_finite()) {
                    return Err(Error::Render {
                        x,
                        y,
                        primitive: splat.primitive,
                        detail: "non-finite color".into(),
                    });
                }
                let w = transmittance * alpha;
                color += w * c;
                depth += w * splat.depth;
                weight_sum += w;
                transmittance *= 1.0 - alpha;
                if transmittance < TRANSMITTANCE_FLOOR {
                    break;
                }
            }

            let idx = (y - y0) * width + x;
            band.color[idx] = color;
            band.depth[idx] = depth;
            band.transmittance[idx] = transmittance;
            band.weight_sum[idx] = weight_sum;
        }
    }
    Ok(band)
}

/// Split `height` rows into at most `workers` contiguous bands.
pub(crate) fn row_bands(height: usize, workers: usize) -> Vec<(usize, usize)> {
    let workers = workers.max(1).min(height.max(1));
    let base = height / workers;
    let extra = height % workers;
    let mut bands = Vec::with_capacity(workers);
    let mut y = 0;
    for w in 0..workers {
        let len = base + usize::from(w < extra);
        if len == 0 {
            continue;
        }
        bands.push((y, y + len));
        y += len;
    }
    bands
}

/// Render the (already deformed) scene through `camera`. Pixels are
/// independent; bands are computed by `config.workers` threads and stitched
/// in a fixed order.
pub fn render(
    scene_at_t: &GaussianScene,
    camera: &CameraModel,
    config: &RenderConfig,
) -> Result<RenderOutput> {
    let geometry = prepare_frame(scene_at_t, camera, config)?;
    render_prepared(scene_at_t, &geometry, camera, config)
}

pub(crate) fn render_prepared(
    scene_at_t: &GaussianScene,
    geometry: &FrameGeometry,
    camera: &CameraModel,
    config: &RenderConfig,
) -> Result<RenderOutput> {
    let (width, height) = (camera.width, camera.height);
    let bands = row_bands(height, config.workers);

    let results: Vec<Result<RowBand>> = if bands.len() <= 1 {
        bands
            .iter()
            .map(|&(y0, y1)| render_rows(scene_at_t, geometry, config, width, y0, y1))
            .collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = bands
                .iter()
                .map(|&(y0, y1)| {
                    scope.spawn(move || render_rows(scene_at_t, geometry, config, width, y0, y1))
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    };

    let mut out = RenderOutput {
        color: ColorImage::zeros(width, height),
        depth: ScalarImage::zeros(width, height),
        transmittance: ScalarImage::filled(width, height, 1.0),
        weight_sum: ScalarImage::zeros(width, height),
    };
    for band in results {
        let band = band?;
        let dst = band.y0 * width..band.y1 * width;
        out.color.data[dst.clone()].copy_from_slice(&band.color);
        out.depth.data[dst.clone()].copy_from_slice(&band.depth);
        out.transmittance.data[dst.clone()].copy_from_slice(&band.transmittance);
        out.weight_sum.data[dst].copy_from_slice(&band.weight_sum);
    }
    Ok(out)
}

fn check_dims(render: &RenderOutput, frame: &FrameSample) -> Result<()> {
    if render.color.width != frame.color.width || render.color.height != frame.color.height {
        return Err(Error::Config(format!(
            "render is {}x{} but the frame is {}x{}",
            render.color.width, render.color.height, frame.color.width, frame.color.height
        )));
    }
    Ok(())
}

/// Masked photometric + depth loss. Pixels with mask 0 contribute nothing
/// to either the value or the gradient.
pub fn masked_loss(render: &RenderOutput, frame: &FrameSample, norm: LossNorm) -> Result<LossReport> {
    Ok(masked_loss_with_grad(render, frame, norm)?.0)
}

/// Loss plus its gradient images w.r.t. the rendered color and depth.
pub fn masked_loss_with_grad(
    render: &RenderOutput,
    frame: &FrameSample,
    norm: LossNorm,
) -> Result<(LossReport, ColorImage, ScalarImage)> {
    check_dims(render, frame)?;
    let masked = frame.mask.iter().filter(|&&m| m).count();
    if masked == 0 {
        return Err(Error::Config("tissue mask is empty (all zeros)".into()));
    }

    let mut grad_color = ColorImage::zeros(render.color.width, render.color.height);
    let mut grad_depth = ScalarImage::zeros(render.color.width, render.color.height);
    let color_n = (masked * 3) as f64;
    let depth_n = masked as f64;

    let mut color_term = 0.0;
    let mut depth_term = 0.0;
    for i in 0..render.color.data.len() {
        if !frame.mask[i] {
            continue;
        }
        let dc = render.color.data[i] - frame.color.data[i];
        let dd = render.depth.data[i] - frame.depth.data[i];
        match norm {
            LossNorm::L1 => {
                color_term += dc.abs().sum();
                depth_term += dd.abs();
                // Subgradient 0 at zero residual.
                grad_color.data[i] = dc.map(|v| {
                    if v > 0.0 {
                        1.0 / color_n
                    } else if v < 0.0 {
                        -1.0 / color_n
                    } else {
                        0.0
                    }
                });
                grad_depth.data[i] = if dd > 0.0 {
                    1.0 / depth_n
                } else if dd < 0.0 {
                    -1.0 / depth_n
                } else {
                    0.0
                };
            }
            LossNorm::L2 => {
                color_term += dc.norm_squared();
                depth_term += dd * dd;
                grad_color.data[i] = 2.0 * dc / color_n;
                grad_depth.data[i] = 2.0 * dd / depth_n;
            }
        }
    }
    color_term /= color_n;
    depth_term /= depth_n;

    Ok((
        LossReport {
            color_term,
            depth_term,
            total: color_term + depth_term,
        },
        grad_color,
        grad_depth,
    ))
}
