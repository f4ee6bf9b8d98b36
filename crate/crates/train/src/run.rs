//! Train-then-evaluate pipeline shared by the CLI and the ablation grid.

use std::path::Path;
use std::sync::atomic::AtomicBool;

use lstcn_core::{LstcnModel, Scalar};

use crate::config::TrainConfig;
use crate::dataset::RunData;
use crate::eval::{extract_embeddings, rank1, write_report, EvalResult};
use crate::train::{train, TrainOutcome};
use crate::TrainError;

/// Scores `model` on the run's gallery and probe sets using fused LSTC kernels.
pub fn evaluate_model<S: Scalar>(
    model: &LstcnModel<S>,
    data: &RunData,
    include_same_view: bool,
) -> Result<EvalResult, TrainError> {
    let mut fused = model.clone();
    fused.fuse()?;
    let gallery = extract_embeddings(&fused, &data.gallery)?;
    let probe = extract_embeddings(&fused, &data.probe)?;
    rank1(&gallery, &probe, include_same_view)
}

/// Trains, evaluates and writes the eval report next to the metrics log.
pub fn run_experiment<S: Scalar>(
    cfg: &TrainConfig,
    data: &RunData,
    out_dir: &Path,
    stop: Option<&AtomicBool>,
) -> Result<(TrainOutcome<S>, EvalResult), TrainError> {
    let outcome = train::<S>(cfg, &data.train, out_dir, stop)?;
    let result = evaluate_model(&outcome.model, data, cfg.eval.include_same_view)?;
    write_report(&result, out_dir)?;
    log::info!("aggregate rank-1 {:.2}%", 100.0 * result.aggregate());
    Ok((outcome, result))
}
