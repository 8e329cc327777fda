//! Alternating encoder/generator and discriminator training.

mod adam;
mod checkpoint;
mod config;
mod step;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, ImageBank};
use crate::error::{Error, Result};

pub use adam::Adam;
pub use checkpoint::{
    checkpoint_path, latest_checkpoint, load_checkpoint, load_train_state, mark_latest, resolve_checkpoint,
    save_checkpoint, save_model, Checkpoint, FORMAT_VERSION, LATEST_FILE, MAGIC,
};
pub use config::{AdamConfig, Precision, TrainConfig, TrainMode};
pub use step::{
    augmentation_decision, train_iteration, train_step, StepTrace, TrainState, TrainStats, DIVERGENCE_LIMIT,
};

pub const METRICS_FILE: &str = "metrics.jsonl";

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub iter: u64,
    pub value_key: usize,
    pub transfer: f64,
    pub back: f64,
    pub attr: f64,
    pub dis: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    /// Iteration the run started from (0 unless resumed).
    pub start_iteration: u64,
    pub final_iteration: u64,
    pub latest: PathBuf,
    pub stats: TrainStats,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Cuts the metrics log back to the records of iterations up to
/// `iteration`. Kept lines are copied verbatim; a torn line from an
/// interrupted write ends the log.
fn truncate_metrics(path: &Path, iteration: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines() {
        match serde_json::from_str::<MetricRecord>(line) {
            Ok(r) if r.iter <= iteration => {
                kept.push_str(line);
                kept.push('\n');
            }
            Ok(_) => {}
            Err(_) => break,
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn check_data(config: &TrainConfig, manifest: &DatasetManifest) -> Result<()> {
    if let Some(sc) = manifest.sprite_config() {
        if sc.image_size != config.network.input_size {
            return Err(Error::Validation(format!(
                "dataset images are {0}x{0} but the network expects {1}x{1}",
                sc.image_size, config.network.input_size
            )));
        }
    }
    let schema = manifest.schema();
    for v in schema.all_values() {
        if manifest.records_with(v.global).is_empty() {
            return Err(Error::Sampling(format!(
                "domain {}={} has no records",
                schema.attribute_name(v.attr),
                schema.value_name(v)
            )));
        }
    }
    Ok(())
}

/// Trains to `config.iterations`, checkpointing into `out_dir`.
///
/// With `resume`, continues from the `latest` checkpoint in `out_dir` when
/// there is one; the config may differ only in length and cadence.
pub fn run_training(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    out_dir: &Path,
    resume: bool,
    device: &Device,
) -> Result<RunSummary> {
    config.validate()?;
    check_data(config, manifest)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);

    let latest = if resume { latest_checkpoint(out_dir)? } else { None };
    let mut state = match latest {
        Some(path) => {
            let mut state = load_train_state(&path, device)?;
            if !config.resumable_from(&state.config) {
                return Err(Error::Validation(format!(
                    "config differs from the one {} was trained with",
                    path.display()
                )));
            }
            if state.schema != *manifest.schema() {
                return Err(Error::SchemaMismatch(format!(
                    "dataset schema differs from the one {} was trained with",
                    path.display()
                )));
            }
            state.config = config.clone();
            truncate_metrics(&metrics_path, state.iteration)?;
            log::info!("resuming from {} at iteration {}", path.display(), state.iteration);
            state
        }
        None => {
            let state = TrainState::new(config, manifest.schema(), device)?;
            std::fs::write(&metrics_path, "").map_err(|e| Error::io(&metrics_path, e))?;
            let ckpt = checkpoint_path(out_dir, 0);
            save_checkpoint(&ckpt, &state)?;
            mark_latest(out_dir, &ckpt)?;
            state
        }
    };
    let start_iteration = state.iteration;
    let bank = ImageBank::load(manifest, config.precision.dtype(), device)?;

    let mut metrics = std::fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let started = Instant::now();
    while state.iteration < config.iterations {
        let reports = train_iteration(&mut state, manifest, &bank)?;
        let mut lines = String::new();
        for (r, trace) in &reports {
            let rec = MetricRecord {
                iter: state.iteration,
                value_key: trace.value.global,
                transfer: r.transfer,
                back: r.back,
                attr: r.attr,
                dis: r.discriminator,
            };
            lines.push_str(&serde_json::to_string(&rec)?);
            lines.push('\n');
        }
        metrics
            .write_all(lines.as_bytes())
            .and_then(|_| metrics.flush())
            .map_err(|e| Error::io(&metrics_path, e))?;

        let done = state.iteration - start_iteration;
        if state.iteration % config.checkpoint_every == 0 || state.iteration == config.iterations {
            let ckpt = checkpoint_path(out_dir, state.iteration);
            save_checkpoint(&ckpt, &state)?;
            mark_latest(out_dir, &ckpt)?;
            let per = started.elapsed().as_secs_f64() / done as f64;
            log::info!(
                "iteration {}/{} ({per:.2}s/iter), checkpoint {}",
                state.iteration,
                config.iterations,
                ckpt.display()
            );
        } else if done % 50 == 0 {
            let mean = |f: fn(&crate::losses::LossReport) -> f64| {
                reports.iter().map(|(r, _)| f(r)).sum::<f64>() / reports.len() as f64
            };
            log::info!(
                "iteration {}: transfer {:.3} back {:.3} attr {:.3} dis {:.3}",
                state.iteration,
                mean(|r| r.transfer),
                mean(|r| r.back),
                mean(|r| r.attr),
                mean(|r| r.discriminator)
            );
        }
    }
    let latest = latest_checkpoint(out_dir)?.expect("a checkpoint was written");
    Ok(RunSummary {
        start_iteration,
        final_iteration: state.iteration,
        latest,
        stats: state.stats,
    })
}
