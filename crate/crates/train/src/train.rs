//! The training loop.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use lstcn_core::{
    joint_loss, save_checkpoint, Adam, LossReport, LstcnModel, Mode, Scalar, Tape, TensorError,
};
use lstcn_data::synth::derive_seed;
use lstcn_data::{LabelMap, PkSampler, SilhouetteSequence};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::metrics::{MetricsLog, MetricsRecord};
use crate::TrainError;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const RESOLVED_CONFIG: &str = "train_config.toml";

const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;

pub struct TrainOutcome<S: Scalar> {
    pub model: LstcnModel<S>,
    pub labels: LabelMap,
    /// Iterations completed.
    pub iterations: u64,
    pub final_checkpoint: PathBuf,
    /// The stop flag ended the run early.
    pub interrupted: bool,
    pub last_report: Option<LossReport>,
}

pub fn checkpoint_path(out_dir: &Path, iteration: u64) -> PathBuf {
    out_dir
        .join(CHECKPOINT_DIR)
        .join(format!("iter_{iteration:07}.ckpt"))
}

/// Trains on `seqs` and writes the metrics log and checkpoints under
/// `out_dir`. Setting `stop` ends the run after the current iteration with
/// a final checkpoint.
pub fn train<S: Scalar>(
    cfg: &TrainConfig,
    seqs: &[SilhouetteSequence],
    out_dir: &Path,
    stop: Option<&AtomicBool>,
) -> Result<TrainOutcome<S>, TrainError> {
    cfg.validate()?;
    let labels = LabelMap::from_sequences(seqs);
    let sampler = PkSampler::new(seqs, &labels, cfg.frames_per_clip)?;
    if sampler.n_subjects() < cfg.p {
        return Err(TrainError::Config(format!(
            "p = {} but only {} subjects have sequences of at least 15 frames",
            cfg.p,
            sampler.n_subjects()
        )));
    }
    let mut model_cfg = cfg.effective_model();
    model_cfg.n_classes = labels.len();
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_INIT]));
    let mut model = LstcnModel::<S>::with_init(model_cfg, &mut init_rng)?;

    std::fs::create_dir_all(out_dir.join(CHECKPOINT_DIR))
        .map_err(|e| TrainError::io(out_dir, e))?;
    let mut resolved = cfg.clone();
    resolved.model = model.config().clone();
    resolved.variant = None;
    let resolved_path = out_dir.join(RESOLVED_CONFIG);
    std::fs::write(&resolved_path, resolved.to_text())
        .map_err(|e| TrainError::io(&resolved_path, e))?;
    let mut log = MetricsLog::open(&out_dir.join(METRICS_FILE))?;

    let dtype = cfg.precision.dtype();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_BATCH]));
    let mut adam = Adam::<S>::new(cfg.adam);
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut last_report = None;
    let mut interrupted = false;
    let mut done = 0u64;
    let started = Instant::now();
    log::info!(
        "training {} parts, {} subjects, {} sequences, {} iterations",
        model.n_parts(),
        labels.len(),
        seqs.len(),
        cfg.max_iters
    );

    while done < cfg.max_iters {
        if stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
            interrupted = true;
            log::warn!("stop requested after {done} iterations");
            break;
        }
        let lr = cfg.lr_schedule.at(done);
        let batch = sampler.sample::<S, _>(seqs, cfg.p, cfg.k, &mut rng)?;
        let mut tape = Tape::<S>::new();
        let bound = model.store().bind(&mut tape, true);
        let x = tape.constant(batch.clips);
        let (out, bn) = model.forward_on_tape(&mut tape, &bound, x, Mode::Train)?;
        let (loss, report) = joint_loss(
            &mut tape,
            out.features,
            out.logits,
            &batch.labels,
            &cfg.loss,
        )
        .map_err(|e: TensorError| TrainError::Loss(e.to_string()))?;
        done += 1;
        log.append(&MetricsRecord {
            iteration: done,
            triplet: report.triplet,
            focal: report.focal,
            total: report.total,
            n_active: report.n_active_triplets,
            lr,
        })?;
        if !report.total.is_finite() {
            return Err(TrainError::NonFinite {
                iteration: done,
                what: "loss".into(),
                last_checkpoint,
            });
        }
        let mut grads = tape
            .backward(loss)
            .map_err(|e| TrainError::Loss(e.to_string()))?;
        let g = model.store().collect_grads(&bound, &mut grads);
        adam.step(model.store_mut(), &g, lr);
        model.apply_bn_updates(bn);
        if let Some(name) = model.first_non_finite_param() {
            return Err(TrainError::NonFinite {
                iteration: done,
                what: format!("parameter {name}"),
                last_checkpoint,
            });
        }
        if done % 50 == 0 || done == 1 {
            log::info!(
                "iter {done} total {:.5} triplet {:.5} focal {:.5} active {}/{} lr {lr:e} ({:.1}s)",
                report.total,
                report.triplet,
                report.focal,
                report.n_active_triplets,
                report.n_total_triplets,
                started.elapsed().as_secs_f64()
            );
        }
        last_report = Some(report);
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.max_iters {
            let path = checkpoint_path(out_dir, done);
            save_checkpoint(&model, &path, dtype)?;
            last_checkpoint = Some(path);
        }
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&model, &final_checkpoint, dtype)?;
    log::info!(
        "finished {done} iterations in {:.1}s, wrote {}",
        started.elapsed().as_secs_f64(),
        final_checkpoint.display()
    );
    Ok(TrainOutcome {
        model,
        labels,
        iterations: done,
        final_checkpoint,
        interrupted,
        last_report,
    })
}
