use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fit::{fits_to_json, FrameFit};
use super::frames::{load_frames, Frame};
use super::obj::write_obj;
use crate::articulate::{kama, similarity_init, ArticulateConfig};
use crate::error::{Error, Result};
use crate::harness::{eval_subset, metric_pa_mpjpe};
use crate::model::{load_model, SkinnedModel};
use crate::refine::{loss_terms, refine, LossTerms, PosePrior, RefineConfig};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "KAMA_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "kama")]
    Kama,
    #[serde(rename = "kama+refine")]
    KamaRefine,
    #[serde(rename = "refine-only")]
    RefineOnly,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kama" => Ok(Mode::Kama),
            "kama+refine" => Ok(Mode::KamaRefine),
            "refine-only" => Ok(Mode::RefineOnly),
            other => Err(Error::Config(format!("unknown mode `{other}` (kama, kama+refine, refine-only)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: PathBuf,
    pub input: PathBuf,
    pub out_dir: PathBuf,
    pub mode: Mode,
    pub refine: RefineConfig,
    /// Recorded in the summary. The pipeline itself draws no random numbers.
    pub seed: u64,
    pub write_obj: bool,
    /// Gaussian-mixture pose prior file; the quadratic prior otherwise.
    pub prior: Option<PathBuf>,
    /// Worker count; falls back to `KAMA_THREADS`, then to rayon's default.
    pub threads: Option<usize>,
    pub articulate: ArticulateConfig,
}

impl RunConfig {
    pub fn new(model: impl Into<PathBuf>, input: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            model: model.into(),
            input: input.into(),
            out_dir: out_dir.into(),
            mode: Mode::Kama,
            refine: RefineConfig::default(),
            seed: 0,
            write_obj: false,
            prior: None,
            threads: None,
            articulate: ArticulateConfig::default(),
        }
    }

    fn check(&self) -> Result<()> {
        for (what, p) in [("model", &self.model), ("input", &self.input)] {
            if !p.is_file() {
                return Err(Error::Config(format!("{what} file {} does not exist", p.display())));
            }
        }
        if let Some(p) = &self.prior {
            if !p.is_file() {
                return Err(Error::Config(format!("prior file {} does not exist", p.display())));
            }
        }
        if self.out_dir.exists() && !self.out_dir.is_dir() {
            return Err(Error::Config(format!("{} exists and is not a directory", self.out_dir.display())));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("thread count must be positive".into()));
        }
        if self.mode != Mode::Kama {
            self.refine.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn thread_count(&self) -> Result<Option<usize>> {
        if let Some(n) = self.threads {
            return Ok(Some(n));
        }
        match std::env::var(THREADS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(Some(n)),
                _ => Err(Error::Config(format!("{THREADS_ENV}=`{v}` is not a positive integer"))),
            },
            Err(_) => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub frame_id: u64,
    /// Loss terms of the articulation before refinement.
    pub initial_terms: LossTerms,
    pub final_terms: LossTerms,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_iteration: usize,
    pub trace: Vec<f64>,
    pub diagnostic: Option<String>,
    /// Similarity-aligned error of the fitted keypoints against the observed
    /// ones on the evaluation subset.
    pub pa_mpjpe_mm: f64,
    pub kama_ms: f64,
    pub refine_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub refine: Option<RefineConfig>,
    pub frames: Vec<FrameSummary>,
    pub mean_pa_mpjpe_mm: f64,
    pub total_ms: f64,
}

pub const FITS_FILE: &str = "fits.json";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn obj_file_name(frame_id: u64) -> String {
    format!("frame_{frame_id}.obj")
}

fn process_frame(
    model: &SkinnedModel,
    frame: &Frame,
    config: &RunConfig,
    prior: &PosePrior,
) -> Result<(FrameFit, FrameSummary)> {
    let x = &frame.keypoints;
    let camera = frame.camera.as_ref();
    let t0 = Instant::now();
    let init = match config.mode {
        Mode::Kama | Mode::KamaRefine => kama(model, x, &config.articulate)?,
        Mode::RefineOnly => similarity_init(model, x)?,
    };
    let kama_ms = t0.elapsed().as_secs_f64() * 1e3;
    let initial_terms = loss_terms(&init, model, x, camera, prior)?;
    let initial_loss = initial_terms.total(&config.refine);

    let t1 = Instant::now();
    let (state, best_iteration, trace, diagnostic) = if config.mode == Mode::Kama {
        (init, 0, Vec::new(), None)
    } else {
        let out = refine(&init, model, x, camera, &config.refine, prior)?;
        (out.state, out.best_iteration, out.trace, out.diagnostic)
    };
    let refine_ms = t1.elapsed().as_secs_f64() * 1e3;
    let final_terms = loss_terms(&state, model, x, camera, prior)?;
    let pa_mpjpe_mm = metric_pa_mpjpe(&eval_subset(model, &state.keypoints(model)?), &eval_subset(model, x.positions()))?;

    let summary = FrameSummary {
        frame_id: frame.frame_id,
        initial_terms,
        final_loss: final_terms.total(&config.refine),
        final_terms,
        initial_loss,
        best_iteration,
        trace,
        diagnostic,
        pa_mpjpe_mm,
        kama_ms,
        refine_ms,
    };
    Ok((FrameFit { frame_id: frame.frame_id, state }, summary))
}

/// Fits every frame of the input and writes `fits.json`, `summary.json`
/// and, if asked, one OBJ per frame into the output directory. Nothing is
/// written unless every frame succeeds.
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    let start = Instant::now();
    config.check()?;
    let threads = config.thread_count()?;
    let model = load_model(&config.model)?;
    let prior = match &config.prior {
        Some(p) => PosePrior::GaussianMixture(crate::refine::GaussianMixture::load(p, model.tree())?),
        None => PosePrior::default(),
    };
    let mut frames = load_frames(&config.input, model.tree())?;
    frames.sort_by_key(|f| f.frame_id);

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<(FrameFit, FrameSummary)> = pool.install(|| {
        frames
            .par_iter()
            .map(|f| process_frame(&model, f, config, &prior))
            .collect::<Result<_>>()
    })?;
    let (fits, summaries): (Vec<FrameFit>, Vec<FrameSummary>) = results.into_iter().unzip();

    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    write_text(&config.out_dir.join(FITS_FILE), &fits_to_json(&fits))?;
    if config.write_obj {
        for f in &fits {
            let mesh = f.state.mesh(&model)?;
            write_obj(&mesh, model.faces(), &config.out_dir.join(obj_file_name(f.frame_id)))?;
        }
    }
    let n = summaries.len().max(1) as f64;
    let summary = RunSummary {
        mode: config.mode,
        seed: config.seed,
        refine: (config.mode != Mode::Kama).then_some(config.refine),
        mean_pa_mpjpe_mm: summaries.iter().map(|s| s.pa_mpjpe_mm).sum::<f64>() / n,
        frames: summaries,
        total_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::NonFinite(e.to_string()))?;
    write_text(&config.out_dir.join(SUMMARY_FILE), &text)?;
    Ok(summary)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
