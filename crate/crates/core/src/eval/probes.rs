use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{DatasetManifest, SpriteOracle};
use crate::error::{Error, Result};
use crate::pixels::Pixels;

/// Minimum held-out accuracy on real images for a probe to be trusted.
pub const PROBE_GATE: f64 = 0.98;
/// Share of the manifest held out for grading.
pub const HELD_OUT_FRACTION: f64 = 0.2;

/// Attribute classifiers used to grade generated images.
///
/// On sprites the analytic label oracle plays the role of every probe, so
/// there is nothing to fit; the split still matters because held-out
/// records are the sources used for evaluation.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    oracle: SpriteOracle,
    names: Vec<String>,
    train: Vec<usize>,
    held_out: Vec<usize>,
    accuracy: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeSummary {
    pub kind: &'static str,
    pub held_out: usize,
    pub accuracy: BTreeMap<String, f64>,
    pub gate: f64,
}

/// Deterministic train / held-out split of `0..len`.
pub fn split_indices(len: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = ((len as f64 * HELD_OUT_FRACTION).round() as usize).clamp(usize::from(len > 1), len);
    let mut held_out = idx[..held].to_vec();
    let mut train = idx[held..].to_vec();
    held_out.sort_unstable();
    train.sort_unstable();
    (train, held_out)
}

/// Fraction of agreeing labels per attribute.
pub fn per_attribute_accuracy(predicted: &[Vec<usize>], truth: &[&[usize]], n: usize) -> Vec<f64> {
    (0..n)
        .map(|a| {
            let hits = predicted.iter().zip(truth).filter(|(p, t)| p[a] == t[a]).count();
            hits as f64 / predicted.len().max(1) as f64
        })
        .collect()
}

/// Builds the probe set and checks it against the accuracy gate on real
/// held-out images.
pub fn train_probes(manifest: &DatasetManifest, seed: u64) -> Result<ProbeSet> {
    let schema = manifest.schema();
    let sprite = manifest.sprite_config().ok_or_else(|| {
        Error::EvaluationVoid("dataset has no sprite config, so no analytic probe is available".into())
    })?;
    let oracle = SpriteOracle::new(sprite);
    let readable = oracle.readable();
    if readable != (0..schema.n()).collect::<Vec<_>>() {
        return Err(Error::EvaluationVoid(format!(
            "the sprite oracle can only read attributes {readable:?} of {}",
            schema.n()
        )));
    }
    if manifest.is_empty() {
        return Err(Error::EvaluationVoid("empty manifest".into()));
    }
    let (train, held_out) = split_indices(manifest.len(), seed);
    let mut predicted = Vec::with_capacity(held_out.len());
    for &i in &held_out {
        let img = Pixels::load_png(&manifest.image_path(i))?;
        predicted.push(oracle.classify(&img));
    }
    let truth: Vec<&[usize]> = held_out.iter().map(|&i| manifest.labels_of(i)).collect();
    let accuracy = per_attribute_accuracy(&predicted, &truth, schema.n());
    let names: Vec<String> = schema.attributes().iter().map(|a| a.name.clone()).collect();
    for (name, acc) in names.iter().zip(&accuracy) {
        if *acc < PROBE_GATE {
            return Err(Error::EvaluationVoid(format!(
                "probe for `{name}` scores {acc:.3} on real held-out images (gate {PROBE_GATE})"
            )));
        }
    }
    Ok(ProbeSet {
        oracle,
        names,
        train,
        held_out,
        accuracy,
    })
}

impl ProbeSet {
    /// Predicted value index for every attribute.
    pub fn classify(&self, img: &Pixels) -> Vec<usize> {
        self.oracle.classify(img)
    }

    pub fn oracle(&self) -> &SpriteOracle {
        &self.oracle
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn held_out(&self) -> &[usize] {
        &self.held_out
    }

    pub fn accuracy(&self) -> &[f64] {
        &self.accuracy
    }

    pub fn summary(&self) -> ProbeSummary {
        ProbeSummary {
            kind: "analytic sprite oracle",
            held_out: self.held_out.len(),
            accuracy: self.names.iter().cloned().zip(self.accuracy.iter().copied()).collect(),
            gate: PROBE_GATE,
        }
    }
}
