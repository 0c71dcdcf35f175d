use colorgs::dataset::{generate_synthetic, truth_center_at, Dataset, MotionType, SynthSpec};
use colorgs::deform::{deform_scene, ChannelParams, DeformBackend, DeformConfig, DeformationField};
use colorgs::render::LossNorm;
use colorgs::train::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let spec = SynthSpec {
        gaussians: 9,
        width: 48,
        height: 48,
        frames: 16,
        motion: MotionType::GlobalShift,
        shift: 0.05,
        seed: 5,
        min_sigma_px: 3.0,
        max_sigma_px: 4.5,
        center_margin: 0.16,
        grid_placement: true,
        ..SynthSpec::default()
    };
    let (dataset, truth) = generate_synthetic(&spec).unwrap();

    for backend in [DeformBackend::Edm, DeformBackend::Gs] {
        let config = TrainConfig {
            iterations: 18000,
            loss: LossNorm::L2,
            omega_l2: 1e-4,
            learn_center: false,
            learn_rotation: false,
            learn_scale: false,
            learn_opacity: false,
            learn_sh: false,
            learn_anchors: false,
            deform: DeformConfig { backend, ..DeformConfig::default() },
            seed: 5,
            grad_threshold: 1e9, // densification off: geometry is frozen
            ..TrainConfig::default()
        };
        let field = DeformationField::new(&config.deform, truth.scene.len());
        let start = Instant::now();
        let result = train(&dataset, &config, Some((truth.scene.clone(), field)), None).unwrap();

        // Per-primitive delta_x error and omega mass on the x channel.
        let mut delta_errs: Vec<f64> = Vec::new();
        let mut max_delta_err: f64 = 0.0;
        let mut max_omega_sum: f64 = 0.0;
        for prim in &result.field.primitives {
            let ch = &prim.channels[0];
            delta_errs.push((ch.delta - 0.05).abs());
            max_delta_err = max_delta_err.max((ch.delta - 0.05).abs());
            if let ChannelParams::Basis(b) = &ch.params {
                max_omega_sum = max_omega_sum.max(b.weights.iter().map(|w| w.abs()).sum());
            }
        }
        // Center-trajectory RMSE against the generator.
        let mut sq = 0.0;
        let mut count = 0;
        for i in 0..spec.frames {
            let t = Dataset::normalized_time(i, spec.frames);
            let deformed = deform_scene(&result.scene, &result.field, t).unwrap();
            for p in 0..spec.gaussians {
                sq += (deformed.primitives[p].center - truth_center_at(&truth, p, t)).norm_squared();
                count += 1;
            }
        }
        let rmse = (sq / count as f64).sqrt();
        delta_errs.sort_by(f64::total_cmp);
        println!("   delta errs: {:?}", delta_errs.iter().map(|v| format!("{v:.1e}")).collect::<Vec<_>>());
        println!(
            "{:?}: max|delta-0.05| {:.2e} max sum|w| {:.3} traj RMSE {:.3e} loss {:.2e} ({:.0}s)",
            backend,
            max_delta_err,
            max_omega_sum,
            rmse,
            result.metrics.last().unwrap().loss,
            start.elapsed().as_secs_f64()
        );
    }
}
