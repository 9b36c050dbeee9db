//! Keypoint and fit files, OBJ export, and the batch runner.

mod fit;
mod frames;
mod obj;
mod run;

pub use fit::{check_fits, fits_to_json, load_fit, parse_fits, write_fit, FrameFit};
pub use frames::{frames_to_json, load_frames, parse_frames, save_frames, Frame, FrameRecord, KeypointRecord};
pub use obj::{obj_to_string, write_obj};
pub use run::{obj_file_name, run, FrameSummary, Mode, RunConfig, RunSummary, FITS_FILE, SUMMARY_FILE, THREADS_ENV};
