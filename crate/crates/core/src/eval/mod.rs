//! Grading trained models: probe accuracy on translations, preservation of
//! other attributes, cycle errors, slot separation and figure grids.

mod embed;
mod grid;
mod probes;
mod translation;

use serde::Serialize;

use crate::data::DatasetManifest;
use crate::error::Result;
use crate::nets::ModelParams;
use crate::slots::AverageVectorRegistry;

pub use embed::{export_embeddings, pca_2d, pooled_slots, project, EmbeddingPoint, EmbeddingReport, NearestCentroid};
pub use grid::{canvas_extent, compose_grid, render_grid, Role, BORDER, PADDING};
pub use probes::{per_attribute_accuracy, split_indices, train_probes, ProbeSet, ProbeSummary, HELD_OUT_FRACTION, PROBE_GATE};
pub use translation::{evaluate_multiplex, evaluate_translation, reconstruction_l1, MultiplexReport, TranslationRow};

/// Full report written by `slotswap evaluate`.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    /// The acceptance bounds used by this project are chosen, not measured
    /// reference numbers.
    pub note: &'static str,
    pub iteration: Option<u64>,
    pub probes: ProbeSummary,
    pub reconstruction_l1: f64,
    pub translations: Vec<TranslationRow>,
    pub separation: Vec<EmbeddingReport>,
    pub multiplex: Option<MultiplexReport>,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub samples: usize,
    pub seed: u64,
    /// Attributes edited at once in the multiplex check (0 disables it).
    pub multiplex_edits: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            samples: 100,
            seed: 0,
            multiplex_edits: 2,
        }
    }
}

/// Runs every grade over all attribute values.
pub fn evaluate(
    models: &ModelParams,
    registry: &AverageVectorRegistry,
    manifest: &DatasetManifest,
    iteration: Option<u64>,
    opts: EvalOptions,
) -> Result<EvalReport> {
    let probes = train_probes(manifest, opts.seed)?;
    let schema = manifest.schema();
    let mut translations = Vec::new();
    for v in schema.all_values() {
        translations.push(evaluate_translation(
            models,
            registry,
            &probes,
            manifest,
            schema.attribute_name(v.attr),
            schema.value_name(v),
            opts.samples,
            opts.seed.wrapping_add(v.global as u64),
        )?);
    }
    let mut separation = Vec::new();
    for a in schema.attributes() {
        separation.push(export_embeddings(
            models,
            Some(registry),
            manifest,
            &a.name,
            manifest.len(),
            opts.seed,
            None,
        )?);
    }
    let multiplex = if opts.multiplex_edits > 0 && opts.multiplex_edits <= schema.n() {
        Some(evaluate_multiplex(
            models,
            registry,
            &probes,
            manifest,
            opts.multiplex_edits,
            opts.samples,
            opts.seed,
        )?)
    } else {
        None
    };
    Ok(EvalReport {
        note: "thresholds applied to these numbers are chosen bounds; separation is nearest-centroid accuracy on \
               mean-pooled slots",
        iteration,
        probes: probes.summary(),
        reconstruction_l1: reconstruction_l1(models, &probes, manifest, opts.samples)?,
        translations,
        separation,
        multiplex,
    })
}
