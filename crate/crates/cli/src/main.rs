use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kama::harness::{evaluate, experiment_init_comparison, synth_generate, SynthSpec};
use kama::io::{check_fits, load_fit, run, save_frames, write_fit, Mode, RunConfig, FITS_FILE, SUMMARY_FILE};
use kama::model::{load_model, make_synthetic_model, save_model, JointSpec};
use kama::refine::RefineConfig;
use kama::{Error, Result};

#[derive(Parser)]
#[command(name = "kama", version, about = "Fit a skinned body model to 3D keypoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit every frame of a keypoint file.
    Articulate(ArticulateArgs),
    /// Generate synthetic keypoint frames and their ground-truth fits.
    Synth {
        #[arg(long)]
        model: PathBuf,
        /// JSON synthesis spec; omitted fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score fits against ground truth.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        fits: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine synthetic frames from each initialization and compare.
    Experiment {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the built-in synthetic humanoid model.
    Model {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ArticulateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// kama, kama+refine or refine-only.
    #[arg(long, conflicts_with = "refine")]
    mode: Option<String>,
    /// Shorthand for --mode kama+refine.
    #[arg(long)]
    refine: bool,
    #[arg(long)]
    iters: Option<usize>,
    /// Weight of the 3D keypoint term.
    #[arg(long)]
    w1: Option<f64>,
    /// Weight of the shape prior.
    #[arg(long)]
    w2: Option<f64>,
    /// Weight of the pose prior.
    #[arg(long)]
    w3: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write one OBJ mesh per frame.
    #[arg(long)]
    obj: bool,
    /// Gaussian-mixture pose prior file.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Worker threads (default: KAMA_THREADS, else all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::NonFinite(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    }
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn require(what: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} file {} does not exist", path.display())))
    }
}

fn load_spec(path: Option<&Path>) -> Result<SynthSpec> {
    match path {
        Some(p) => {
            require("spec", p)?;
            SynthSpec::load(p)
        }
        None => Ok(SynthSpec::default()),
    }
}

fn articulate(a: ArticulateArgs) -> Result<()> {
    let mut cfg = RunConfig::new(a.model, a.input, a.out);
    cfg.mode = match (a.mode, a.refine) {
        (Some(m), _) => m.parse()?,
        (None, true) => Mode::KamaRefine,
        (None, false) => Mode::Kama,
    };
    let r: &mut RefineConfig = &mut cfg.refine;
    if let Some(n) = a.iters {
        r.iterations = n;
    }
    if let Some(w) = a.w1 {
        r.omega1 = w;
    }
    if let Some(w) = a.w2 {
        r.omega2 = w;
    }
    if let Some(w) = a.w3 {
        r.omega3 = w;
    }
    if let Some(s) = a.step {
        r.step_size = s;
    }
    cfg.seed = a.seed;
    cfg.write_obj = a.obj;
    cfg.prior = a.prior;
    cfg.threads = a.threads;
    let summary = run(&cfg)?;
    println!(
        "{} frames, mean PA-MPJPE {:.3} mm, {:.1} ms; wrote {} and {}",
        summary.frames.len(),
        summary.mean_pa_mpjpe_mm,
        summary.total_ms,
        cfg.out_dir.join(FITS_FILE).display(),
        cfg.out_dir.join(SUMMARY_FILE).display()
    );
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Articulate(a) => articulate(a),
        Command::Synth { model, spec, out } => {
            require("model", &model)?;
            let spec = load_spec(spec.as_deref())?;
            let m = load_model(&model)?;
            let data = synth_generate(&m, &spec)?;
            std::fs::create_dir_all(&out).map_err(|source| Error::Io { path: out.clone(), source })?;
            save_frames(&data.frames, m.tree(), &out.join("frames.json"))?;
            write_fit(&data.truth, &out.join("gt.json"))?;
            println!("{} frames written to {}", data.frames.len(), out.display());
            Ok(())
        }
        Command::Eval { model, fits, gt, out } => {
            require("model", &model)?;
            require("fits", &fits)?;
            require("ground-truth", &gt)?;
            let m = load_model(&model)?;
            let (pred, truth) = (load_fit(&fits)?, load_fit(&gt)?);
            check_fits(&pred, m.tree())?;
            check_fits(&truth, m.tree())?;
            let report = evaluate(&m, &pred, &truth)?;
            write_json(&out, &report)?;
            println!(
                "{} frames: MPVE {:.3} mm, MPJPE {:.3} mm, PA-MPJPE {:.3} mm",
                report.frames.len(),
                report.mean_mpve_mm,
                report.mean_mpjpe_mm,
                report.mean_pa_mpjpe_mm
            );
            Ok(())
        }
        Command::Experiment { model, spec, iters, out } => {
            require("model", &model)?;
            let spec = load_spec(spec.as_deref())?;
            let m = load_model(&model)?;
            let config = RefineConfig { iterations: iters, ..Default::default() };
            config.validate().map_err(|e| Error::Config(e.to_string()))?;
            let report = experiment_init_comparison(&m, &spec, &config)?;
            write_json(&out, &report)?;
            for arm in &report.arms {
                println!(
                    "{:?}: PA-MPJPE {:.2} -> {:.2} mm, loss {:.4} -> {:.4}",
                    arm.arm,
                    arm.mean_initial_pa_mpjpe_mm,
                    arm.mean_final_pa_mpjpe_mm,
                    arm.mean_initial_loss,
                    arm.mean_final_loss
                );
            }
            Ok(())
        }
        Command::Model { out } => {
            let m = make_synthetic_model(&JointSpec::humanoid())?;
            save_model(&m, &out)?;
            println!("{} joints, {} vertices written to {}", m.tree().joint_count(), m.vertex_count(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| execute(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
        // the hook has already printed the message
        Err(_) => ExitCode::from(70),
    }
}
