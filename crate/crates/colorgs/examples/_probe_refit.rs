use colorgs::dataset::{generate_synthetic, SynthSpec};
use colorgs::deform::{DeformConfig, DeformationField};
use colorgs::train::{test_psnr, train, TrainConfig};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use std::time::Instant;

fn main() {
    let spec = SynthSpec {
        gaussians: 20,
        width: 64,
        height: 64,
        frames: 16,
        seed: 11,
        ..SynthSpec::default()
    };
    let (dataset, truth) = generate_synthetic(&spec).unwrap();

    // Perturbed init: centers jittered by 2% of the extent, colors reset.
    let mut rng = ChaCha12Rng::seed_from_u64(99);
    let mut scene = truth.scene.clone();
    let sigma = 0.02 * scene.extent();
    println!("extent {:.3} jitter sigma {:.4}", scene.extent(), sigma);
    for p in &mut scene.primitives {
        for k in 0..3 {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            p.center[k] += sigma * n;
        }
        for c in &mut p.sh_coeffs {
            *c = nalgebra::Vector3::zeros();
        }
        for a in &mut p.anchors {
            a.color = nalgebra::Vector3::zeros();
        }
    }
    let config = TrainConfig { seed: 5, ..TrainConfig::default() };
    let field = DeformationField::new(&DeformConfig::default(), scene.len());

    let start = Instant::now();
    let result = train(&dataset, &config, Some((scene, field)), None).unwrap();
    let elapsed = start.elapsed();
    let psnr = test_psnr(&dataset, &result.scene, &result.field, &config.render_config())
        .unwrap()
        .unwrap();
    println!(
        "refit: {} prims, {:.2} dB in {:.1}s",
        result.scene.len(),
        psnr,
        elapsed.as_secs_f64()
    );
    for row in result.metrics.iter().filter(|r| r.psnr_test.is_some()) {
        println!("  iter {:4} loss {:.5} psnr {:.2}", row.iteration, row.loss, row.psnr_test.unwrap());
    }
}
