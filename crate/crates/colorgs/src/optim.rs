//! Bias-corrected Adam over the scene and deformation parameters, with
//! per-group learning rates and the post-step projections (quaternion
//! renormalization, basis-width floor).

use serde::{Deserialize, Serialize};

use crate::deform::{ChannelParams, DeformBackend, DeformationField, MIN_WIDTH};
use crate::error::{Error, Result};
use crate::grad::GradientBuffer;
use crate::math::quat_normalize;
use crate::scene::GaussianScene;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-15;

/// Parameter groups sharing a learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Center,
    Rotation,
    Scale,
    Opacity,
    Sh,
    Anchor,
    Deform,
}

/// Per-group learning rates for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupLr {
    pub center: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub sh: f64,
    pub anchor: f64,
    pub deform: f64,
}

impl GroupLr {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Center => self.center,
            ParamGroup::Rotation => self.rotation,
            ParamGroup::Scale => self.scale,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Sh => self.sh,
            ParamGroup::Anchor => self.anchor,
            ParamGroup::Deform => self.deform,
        }
    }
}

/// Which groups receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnFlags {
    pub center: bool,
    pub rotation: bool,
    pub scale: bool,
    pub opacity: bool,
    pub sh: bool,
    pub anchors: bool,
    pub deform: bool,
}

impl Default for LearnFlags {
    fn default() -> Self {
        Self {
            center: true,
            rotation: true,
            scale: true,
            opacity: true,
            sh: true,
            anchors: true,
            deform: true,
        }
    }
}

impl LearnFlags {
    pub fn deform_only() -> Self {
        Self {
            center: false,
            rotation: false,
            scale: false,
            opacity: false,
            sh: false,
            anchors: false,
            deform: true,
        }
    }

    fn get(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Center => self.center,
            ParamGroup::Rotation => self.rotation,
            ParamGroup::Scale => self.scale,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Sh => self.sh,
            ParamGroup::Anchor => self.anchors,
            ParamGroup::Deform => self.deform,
        }
    }
}

/// First/second moment accumulators mirroring the parameter set, plus the
/// shared step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: GradientBuffer,
    pub v: GradientBuffer,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(scene: &GaussianScene, field: &DeformationField) -> Self {
        Self {
            m: GradientBuffer::zeros(scene, field),
            v: GradientBuffer::zeros(scene, field),
            step: 0,
        }
    }
}

struct Stepper {
    lr_scale: f64, // bias-corrected lr multiplier for this step
}

impl Stepper {
    fn new(step: usize) -> Self {
        let t = step as i32;
        Self {
            lr_scale: (1.0 - ADAM_BETA2.powi(t)).sqrt() / (1.0 - ADAM_BETA1.powi(t)),
        }
    }

    #[inline]
    fn update(&self, lr: f64, param: &mut f64, grad: f64, m: &mut f64, v: &mut f64) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * grad;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * grad * grad;
        *param -= lr * self.lr_scale * *m / (v.sqrt() + ADAM_EPSILON);
    }
}

/// One bias-corrected Adam step over every learnable parameter, followed by
/// quaternion renormalization and the basis-width floor.
pub fn adam_step(
    scene: &mut GaussianScene,
    field: &mut DeformationField,
    grads: &GradientBuffer,
    state: &mut OptimizerState,
    lr: &GroupLr,
    flags: &LearnFlags,
) -> Result<()> {
    if grads.primitives.len() != scene.len() || grads.field.primitives.len() != field.len() {
        return Err(Error::Config("gradient buffer shape mismatch".into()));
    }
    state.step += 1;
    let stepper = Stepper::new(state.step);

    for (((prim, grad), m), v) in scene
        .primitives
        .iter_mut()
        .zip(&grads.primitives)
        .zip(&mut state.m.primitives)
        .zip(&mut state.v.primitives)
    {
        if flags.get(ParamGroup::Center) {
            let lr_g = lr.get(ParamGroup::Center);
            for k in 0..3 {
                stepper.update(lr_g, &mut prim.center[k], grad.center[k], &mut m.center[k], &mut v.center[k]);
            }
        }
        if flags.get(ParamGroup::Rotation) {
            let lr_g = lr.get(ParamGroup::Rotation);
            for k in 0..4 {
                stepper.update(lr_g, &mut prim.rotation[k], grad.rotation[k], &mut m.rotation[k], &mut v.rotation[k]);
            }
        }
        if flags.get(ParamGroup::Scale) {
            let lr_g = lr.get(ParamGroup::Scale);
            for k in 0..3 {
                stepper.update(lr_g, &mut prim.log_scale[k], grad.log_scale[k], &mut m.log_scale[k], &mut v.log_scale[k]);
            }
        }
        if flags.get(ParamGroup::Opacity) {
            stepper.update(
                lr.get(ParamGroup::Opacity),
                &mut prim.opacity_logit,
                grad.opacity_logit,
                &mut m.opacity_logit,
                &mut v.opacity_logit,
            );
        }
        if flags.get(ParamGroup::Sh) {
            let lr_g = lr.get(ParamGroup::Sh);
            for (c, (gc, (mc, vc))) in prim
                .sh_coeffs
                .iter_mut()
                .zip(grad.sh_coeffs.iter().zip(m.sh_coeffs.iter_mut().zip(&mut v.sh_coeffs)))
            {
                for k in 0..3 {
                    stepper.update(lr_g, &mut c[k], gc[k], &mut mc[k], &mut vc[k]);
                }
            }
        }
        if flags.get(ParamGroup::Anchor) {
            let lr_g = lr.get(ParamGroup::Anchor);
            for (a, idx) in prim.anchors.iter_mut().zip(0..) {
                for k in 0..2 {
                    stepper.update(
                        lr_g,
                        &mut a.offset[k],
                        grad.anchor_offsets[idx][k],
                        &mut m.anchor_offsets[idx][k],
                        &mut v.anchor_offsets[idx][k],
                    );
                }
                for k in 0..3 {
                    stepper.update(
                        lr_g,
                        &mut a.color[k],
                        grad.anchor_colors[idx][k],
                        &mut m.anchor_colors[idx][k],
                        &mut v.anchor_colors[idx][k],
                    );
                }
            }
        }

        if !prim.center.iter().all(|x| x.is_finite()) || !prim.opacity_logit.is_finite() {
            return Err(Error::Config("non-finite parameter after optimizer step".into()));
        }
        prim.rotation = quat_normalize(prim.rotation);
    }

    if flags.get(ParamGroup::Deform) {
        let lr_g = lr.get(ParamGroup::Deform);
        let freeze_delta = field.backend != DeformBackend::Edm;
        for ((prim, grad), (m, v)) in field
            .primitives
            .iter_mut()
            .zip(&grads.field.primitives)
            .zip(state.m.field.primitives.iter_mut().zip(&mut state.v.field.primitives))
        {
            for (((ch, gch), mch), vch) in prim
                .channels
                .iter_mut()
                .zip(&grad.channels)
                .zip(&mut m.channels)
                .zip(&mut v.channels)
            {
                match (&mut ch.params, &gch.params, &mut mch.params, &mut vch.params) {
                    (
                        ChannelParams::Basis(b),
                        ChannelParams::Basis(gb),
                        ChannelParams::Basis(mb),
                        ChannelParams::Basis(vb),
                    ) => {
                        for j in 0..b.weights.len() {
                            stepper.update(lr_g, &mut b.weights[j], gb.weights[j], &mut mb.weights[j], &mut vb.weights[j]);
                            stepper.update(lr_g, &mut b.centers[j], gb.centers[j], &mut mb.centers[j], &mut vb.centers[j]);
                            stepper.update(lr_g, &mut b.log_widths[j], gb.log_widths[j], &mut mb.log_widths[j], &mut vb.log_widths[j]);
                            b.log_widths[j] = b.log_widths[j].max(MIN_WIDTH.ln());
                        }
                    }
                    (
                        ChannelParams::Fourier(f),
                        ChannelParams::Fourier(gf),
                        ChannelParams::Fourier(mf),
                        ChannelParams::Fourier(vf),
                    ) => {
                        for j in 0..f.cos_coeffs.len() {
                            stepper.update(lr_g, &mut f.cos_coeffs[j], gf.cos_coeffs[j], &mut mf.cos_coeffs[j], &mut vf.cos_coeffs[j]);
                            stepper.update(lr_g, &mut f.sin_coeffs[j], gf.sin_coeffs[j], &mut mf.sin_coeffs[j], &mut vf.sin_coeffs[j]);
                        }
                        for j in 0..f.poly_coeffs.len() {
                            stepper.update(lr_g, &mut f.poly_coeffs[j], gf.poly_coeffs[j], &mut mf.poly_coeffs[j], &mut vf.poly_coeffs[j]);
                        }
                    }
                    _ => return Err(Error::Config("deformation gradient shape mismatch".into())),
                }
                if !freeze_delta {
                    stepper.update(lr_g, &mut ch.delta, gch.delta, &mut mch.delta, &mut vch.delta);
                }
            }
        }
    }
    Ok(())
}

/// Exponential decay from `lr_initial` to `lr_final` across the run.
pub fn decayed_lr(lr_initial: f64, lr_final: f64, iteration: usize, iterations: usize) -> f64 {
    if iterations <= 1 {
        return lr_initial;
    }
    let progress = iteration as f64 / (iterations - 1) as f64;
    lr_initial * (lr_final / lr_initial).powf(progress)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::DeformConfig;
    use crate::scene::GaussianPrimitive;
    use nalgebra::Vector3;

    fn setup(n: usize) -> (GaussianScene, DeformationField, OptimizerState) {
        let mut scene = GaussianScene::new(1);
        for i in 0..n {
            scene
                .primitives
                .push(GaussianPrimitive::new(Vector3::new(i as f64, 0.0, 3.0), 1, 4));
        }
        let field = DeformationField::new(&DeformConfig::default(), n);
        let state = OptimizerState::new(&scene, &field);
        (scene, field, state)
    }

    fn flat_lr(value: f64) -> GroupLr {
        GroupLr {
            center: value,
            rotation: value,
            scale: value,
            opacity: value,
            sh: value,
            anchor: value,
            deform: value,
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut scene, mut field, mut state) = setup(2);
        let before = scene.clone();
        let grads = GradientBuffer::zeros(&scene, &field);
        adam_step(&mut scene, &mut field, &grads, &mut state, &flat_lr(1e-2), &LearnFlags::default())
            .unwrap();
        assert_eq!(scene, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut scene, mut field, mut state) = setup(1);
        let mut grads = GradientBuffer::zeros(&scene, &field);
        grads.primitives[0].center.x = 1.0;
        let before = scene.primitives[0].center.x;
        adam_step(&mut scene, &mut field, &grads, &mut state, &flat_lr(1.6e-3), &LearnFlags::default())
            .unwrap();
        // Bias-corrected first step with g = 1 is exactly lr / (1 + eps-ish).
        let moved = before - scene.primitives[0].center.x;
        assert!((moved - 1.6e-3).abs() < 1e-12, "moved {moved}");
    }

    #[test]
    fn constant_gradient_update_approaches_learning_rate() {
        let (mut scene, mut field, mut state) = setup(1);
        let mut grads = GradientBuffer::zeros(&scene, &field);
        grads.primitives[0].opacity_logit = 0.37;
        let lr = 1e-3;
        let mut prev = scene.primitives[0].opacity_logit;
        let mut last_step = 0.0;
        for _ in 0..500 {
            adam_step(&mut scene, &mut field, &grads, &mut state, &flat_lr(lr), &LearnFlags::default())
                .unwrap();
            last_step = prev - scene.primitives[0].opacity_logit;
            prev = scene.primitives[0].opacity_logit;
        }
        assert!((last_step - lr).abs() < 1e-6, "final step {last_step}");
    }

    #[test]
    fn quaternion_is_renormalized_after_step() {
        let (mut scene, mut field, mut state) = setup(1);
        let mut grads = GradientBuffer::zeros(&scene, &field);
        grads.primitives[0].rotation = [0.5, -0.25, 0.1, 0.7];
        adam_step(&mut scene, &mut field, &grads, &mut state, &flat_lr(0.1), &LearnFlags::default())
            .unwrap();
        let n = crate::math::quat_norm(scene.primitives[0].rotation);
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_groups_do_not_move() {
        let (mut scene, mut field, mut state) = setup(1);
        let mut grads = GradientBuffer::zeros(&scene, &field);
        grads.primitives[0].center.x = 1.0;
        grads.field.primitives[0].channels[0].delta = 1.0;
        let before_center = scene.primitives[0].center;
        adam_step(&mut scene, &mut field, &grads, &mut state, &flat_lr(1e-2), &LearnFlags::deform_only())
            .unwrap();
        assert_eq!(scene.primitives[0].center, before_center);
        assert!(field.primitives[0].channels[0].delta != 0.0);
    }

    #[test]
    fn gs_backend_keeps_delta_frozen() {
        let mut scene = GaussianScene::new(1);
        scene
            .primitives
            .push(GaussianPrimitive::new(Vector3::new(0.0, 0.0, 3.0), 1, 4));
        let mut field = DeformationField::new(
            &DeformConfig {
                backend: crate::deform::DeformBackend::Gs,
                ..DeformConfig::default()
            },
            1,
        );
        let mut state = OptimizerState::new(&scene, &field);
        let mut grads = GradientBuffer::zeros(&scene, &field);
        grads.field.primitives[0].channels[0].delta = 1.0;
        adam_step(&mut scene, &mut field, &grads, &mut state, &flat_lr(1e-2), &LearnFlags::default())
            .unwrap();
        assert_eq!(field.primitives[0].channels[0].delta, 0.0);
    }

    #[test]
    fn width_floor_is_enforced() {
        let (mut scene, mut field, mut state) = setup(1);
        if let ChannelParams::Basis(b) = &mut field.primitives[0].channels[0].params {
            b.log_widths[0] = (2.0 * MIN_WIDTH).ln();
        }
        let mut grads = GradientBuffer::zeros(&scene, &field);
        if let ChannelParams::Basis(gb) = &mut grads.field.primitives[0].channels[0].params {
            gb.log_widths[0] = 1e9;
        }
        adam_step(&mut scene, &mut field, &grads, &mut state, &flat_lr(10.0), &LearnFlags::default())
            .unwrap();
        if let ChannelParams::Basis(b) = &field.primitives[0].channels[0].params {
            assert!(b.log_widths[0] >= MIN_WIDTH.ln());
        }
    }

    #[test]
    fn lr_decay_endpoints() {
        assert_eq!(decayed_lr(1.6e-3, 1.6e-5, 0, 3000), 1.6e-3);
        let end = decayed_lr(1.6e-3, 1.6e-5, 2999, 3000);
        assert!((end - 1.6e-5).abs() < 1e-12);
    }
}
