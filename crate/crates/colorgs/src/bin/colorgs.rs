use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use colorgs::dataset::{
    generate_synthetic, load_dataset, save_dataset, save_truth, MotionType, SynthSpec,
};
use colorgs::deform::{DeformBackend, DeformationField};
use colorgs::error::Error;
use colorgs::grad::{run_gradcheck, GradCheckOptions};
use colorgs::io::image_io::{write_png, write_ppm};
use colorgs::io::pfm::write_pfm;
use colorgs::io::ply::read_ply;
use colorgs::io::sidecar::read_sidecar;
use colorgs::metrics::{psnr, ssim};
use colorgs::render::{render, LossNorm};
use colorgs::scene::GaussianScene;
use colorgs::train::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "colorgs", version, about = "Deformable colored-Gaussian-splatting pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (plus ground truth) on disk.
    Synth(SynthArgs),
    /// Fit a scene and deformation field to a dataset.
    Train(TrainArgs),
    /// Render one frame of a trained model.
    Render(RenderArgs),
    /// Masked PSNR/SSIM of a trained model on the test split.
    Eval(EvalArgs),
    /// Analytic-vs-finite-difference gradient check.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Motion type: static, global_shift, periodic, composite.
    #[arg(long, default_value = "static")]
    motion: String,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 20)]
    gaussians: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Anchors per ground-truth primitive.
    #[arg(long, default_value_t = 4)]
    anchors: usize,
    /// Amplitude of ground-truth anchor colors (0 = plain splatting).
    #[arg(long, default_value_t = 0.0)]
    anchor_color_scale: f64,
    /// World-units x offset for global_shift / composite motion.
    #[arg(long, default_value_t = 0.05)]
    shift: f64,
    #[arg(long, default_value_t = 1)]
    sh_degree: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for manifest, checkpoints, metrics and the model.
    #[arg(long)]
    out: PathBuf,
    /// TOML config file with TrainConfig keys; CLI flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Deformation backend: edm, gs, fps.
    #[arg(long)]
    deform_backend: Option<String>,
    /// Anchors per primitive; 0 disables colored anchors.
    #[arg(long)]
    anchors: Option<usize>,
    /// Pixel-parallel worker count (1 = determinism reference).
    #[arg(long)]
    workers: Option<usize>,
    /// Loss norm: l1 or l2.
    #[arg(long)]
    loss: Option<String>,
    /// Iterations with densification frozen.
    #[arg(long)]
    densify_freeze: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    /// Model directory (final.ply + final.deform) or a .ply path.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory providing the camera and timestamps.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Frame index to render.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Color output format: png or ppm.
    #[arg(long, default_value = "png")]
    format: String,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model directory or .ply path.
    #[arg(long)]
    model: PathBuf,
    /// Optional output directory for metrics.csv and the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 3)]
    seed: u64,
    /// Seeds checked: seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// Deformation backend under test.
    #[arg(long, default_value = "edm")]
    deform_backend: String,
    /// Optional output directory for the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_manifest(dir: &Path, command: &str, seed: u64, config: serde_json::Value) -> colorgs::Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = serde_json::json!({
        "command": command,
        "engine_version": colorgs::ENGINE_VERSION,
        "seed": seed,
        "config": config,
    });
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn run_synth(args: SynthArgs) -> colorgs::Result<()> {
    let spec = SynthSpec {
        gaussians: args.gaussians,
        width: args.width,
        height: args.height,
        frames: args.frames,
        motion: args.motion.parse::<MotionType>()?,
        seed: args.seed,
        sh_degree: args.sh_degree,
        anchor_count: args.anchors,
        anchor_color_scale: args.anchor_color_scale,
        shift: args.shift,
        ..SynthSpec::default()
    };
    let (dataset, truth) = generate_synthetic(&spec)?;
    save_dataset(&args.out, &dataset)?;
    save_truth(&args.out.join("truth.json"), &truth)?;
    write_manifest(&args.out, "synth", spec.seed, serde_json::to_value(&spec)?)?;
    log::info!(
        "wrote {} frames to {}",
        dataset.frames.len(),
        args.out.display()
    );
    Ok(())
}

fn load_train_config(args: &TrainArgs) -> colorgs::Result<TrainConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Dataset {
                path: path.clone(),
                detail: e.to_string(),
            })?;
            toml::from_str(&text).map_err(|e| Error::Config(format!(
                "bad config file {}: {e}",
                path.display()
            )))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(iterations) = args.iterations {
        config.iterations = iterations;
    }
    if let Some(backend) = &args.deform_backend {
        config.deform.backend = backend.parse::<DeformBackend>()?;
    }
    if let Some(anchors) = args.anchors {
        config.anchors = anchors;
    }
    if let Some(workers) = args.workers {
        config.workers = workers;
    }
    if let Some(loss) = &args.loss {
        config.loss = loss.parse::<LossNorm>()?;
    }
    if let Some(freeze) = args.densify_freeze {
        config.densify_freeze_iters = freeze;
    }
    Ok(config)
}

fn run_train(args: TrainArgs) -> colorgs::Result<()> {
    if !args.data.is_dir() {
        return Err(Error::Dataset {
            path: args.data.clone(),
            detail: "dataset directory not found".into(),
        });
    }
    let config = load_train_config(&args)?;
    config.validate()?;
    let dataset = load_dataset(&args.data)?;
    let result = train(&dataset, &config, None, Some(&args.out))?;
    let final_psnr = result
        .metrics
        .iter()
        .rev()
        .find_map(|row| row.psnr_test)
        .map(|v| format!("{v:.2} dB"))
        .unwrap_or_else(|| "n/a".into());
    log::info!(
        "trained {} primitives over {} iterations, test PSNR {final_psnr}",
        result.scene.len(),
        config.iterations
    );
    println!(
        "final: primitives {} test_psnr {}",
        result.scene.len(),
        final_psnr
    );
    Ok(())
}

fn load_model(path: &Path) -> colorgs::Result<(GaussianScene, Option<DeformationField>)> {
    let (ply, sidecar) = if path.is_dir() {
        (path.join("final.ply"), path.join("final.deform"))
    } else {
        (path.to_path_buf(), path.with_extension("deform"))
    };
    if !ply.is_file() {
        return Err(Error::Dataset {
            path: ply,
            detail: "model checkpoint not found".into(),
        });
    }
    let scene = read_ply(&ply)?;
    let field = if sidecar.is_file() {
        Some(read_sidecar(&sidecar)?)
    } else {
        None
    };
    Ok((scene, field))
}

fn deformed(
    scene: &GaussianScene,
    field: &Option<DeformationField>,
    t: f64,
) -> colorgs::Result<GaussianScene> {
    match field {
        Some(field) => colorgs::deform::deform_scene(scene, field, t),
        None => Ok(scene.clone()),
    }
}

fn run_render(args: RenderArgs) -> colorgs::Result<()> {
    let dataset = load_dataset(&args.data)?;
    let (scene, field) = load_model(&args.model)?;
    let frame = dataset.frames.get(args.frame).ok_or_else(|| {
        Error::Config(format!(
            "frame {} out of range ({} frames)",
            args.frame,
            dataset.frames.len()
        ))
    })?;
    let camera = &dataset.cameras[frame.camera_index];
    let scene_t = deformed(&scene, &field, frame.time)?;
    let config = colorgs::render::RenderConfig {
        workers: args.workers,
        ..colorgs::render::RenderConfig::default()
    };
    let out = render(&scene_t, camera, &config)?;

    std::fs::create_dir_all(&args.out)?;
    let stem = format!("frame_{:06}", args.frame);
    match args.format.as_str() {
        "png" => write_png(&args.out.join(format!("{stem}_color.png")), &out.color)?,
        "ppm" => write_ppm(&args.out.join(format!("{stem}_color.ppm")), &out.color)?,
        other => return Err(Error::Config(format!("unknown format '{other}'"))),
    }
    write_pfm(&args.out.join(format!("{stem}_depth.pfm")), &out.depth)?;
    write_manifest(
        &args.out,
        "render",
        0,
        serde_json::json!({
            "model": args.model,
            "data": args.data,
            "frame": args.frame,
            "format": args.format,
            "workers": args.workers,
        }),
    )?;
    Ok(())
}

fn run_eval(args: EvalArgs) -> colorgs::Result<()> {
    let dataset = load_dataset(&args.data)?;
    let (scene, field) = load_model(&args.model)?;
    let config = colorgs::render::RenderConfig {
        workers: args.workers,
        ..colorgs::render::RenderConfig::default()
    };

    let mut rows = Vec::new();
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for &i in &dataset.test_indices {
        let frame = &dataset.frames[i];
        let camera = &dataset.cameras[frame.camera_index];
        let scene_t = deformed(&scene, &field, frame.time)?;
        let out = render(&scene_t, camera, &config)?;
        let p = psnr(&out.color, &frame.color, &frame.mask)?;
        let s = ssim(&out.color, &frame.color, &frame.mask)?;
        psnr_sum += p;
        ssim_sum += s;
        rows.push((i, p, s));
    }
    if rows.is_empty() {
        return Err(Error::Config(
            "dataset has no test frames (needs at least 8 frames)".into(),
        ));
    }

    let mut csv = String::from("frame,psnr,ssim\n");
    for (i, p, s) in &rows {
        csv.push_str(&format!("{i},{p:.4},{s:.6}\n"));
    }
    let n = rows.len() as f64;
    csv.push_str(&format!("mean,{:.4},{:.6}\n", psnr_sum / n, ssim_sum / n));
    print!("{csv}");

    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("metrics.csv"), &csv)?;
        write_manifest(
            out,
            "eval",
            0,
            serde_json::json!({ "model": args.model, "data": args.data }),
        )?;
    }
    Ok(())
}

fn run_gradcheck_cmd(args: GradcheckArgs) -> colorgs::Result<()> {
    let opts = GradCheckOptions {
        backend: args.deform_backend.parse::<DeformBackend>()?,
        ..GradCheckOptions::default()
    };
    let mut all_passed = true;
    for seed in args.seed..args.seed + args.count.max(1) {
        let report = run_gradcheck(seed, &opts)?;
        println!("seed {seed}:");
        println!("  {:<18} {:>8} {:>8} {:>14}", "class", "checked", "skipped", "max_rel_error");
        for c in &report.classes {
            println!(
                "  {:<18} {:>8} {:>8} {:>14.3e}",
                c.class.name(),
                c.checked,
                c.skipped,
                c.max_rel_error
            );
        }
        let passed = report.passed(opts.tolerance);
        println!(
            "  overall max {:.3e} tolerance {:.0e}: {}",
            report.max_rel_error(),
            opts.tolerance,
            if passed { "PASS" } else { "FAIL" }
        );
        all_passed &= passed;
    }
    if let Some(out) = &args.out {
        write_manifest(
            out,
            "gradcheck",
            args.seed,
            serde_json::json!({ "count": args.count, "backend": args.deform_backend }),
        )?;
    }
    if !all_passed {
        return Err(Error::NonFiniteGradient {
            primitive: 0,
            field: "gradient check exceeded tolerance".into(),
        });
    }
    Ok(())
}

fn dispatch(cli: Cli) -> colorgs::Result<()> {
    match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Train(args) => run_train(args),
        Command::Render(args) => run_render(args),
        Command::Eval(args) => run_eval(args),
        Command::Gradcheck(args) => run_gradcheck_cmd(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COLORGS_LOG", "info")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{err}");
                return ExitCode::SUCCESS;
            }
            eprintln!(
                "{}",
                serde_json::json!({ "kind": "validation", "error": err.to_string() })
            );
            return ExitCode::from(1);
        }
    };

    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = if err.is_validation() { "validation" } else { "runtime" };
            eprintln!(
                "{}",
                serde_json::json!({ "kind": kind, "error": err.to_string() })
            );
            ExitCode::from(if err.is_validation() { 1 } else { 2 })
        }
    }
}
