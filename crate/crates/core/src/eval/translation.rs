use std::collections::BTreeMap;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::nets::ModelParams;
use crate::pixels::{self, Pixels};
use crate::schema::ValueIndex;
use crate::slots::{
    attribute_cycle, back_translate, multiplex_translate, reconstruct, transfer_domain, transfer_instance,
    AverageVectorRegistry, Edit, EditSource,
};

use super::probes::ProbeSet;

const EVAL_BATCH: usize = 25;

/// Grades for translating sources to one attribute value.
#[derive(Debug, Clone, Serialize)]
pub struct TranslationRow {
    pub attribute: String,
    pub value: String,
    pub samples: usize,
    /// Domain-level translation judged by the probes.
    pub domain_target_accuracy: f64,
    pub domain_preservation: BTreeMap<String, f64>,
    /// Instance-level transfer from a random reference of the value.
    pub instance_target_accuracy: f64,
    pub instance_preservation: BTreeMap<String, f64>,
    /// Mean L1 between the source and its back-transfer (instance level).
    pub back_transfer_l1: f64,
    /// Mean L1 between the attribute cycle and the reference.
    pub attr_consistency_l1: f64,
    /// Mean sprite displacement (px) between source and domain translation.
    pub position_error: f64,
    /// Mean rotation deviation (degrees) where both images have a
    /// measurable orientation.
    pub rotation_error: Option<f64>,
    pub rotation_samples: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MultiplexReport {
    pub samples: usize,
    pub edited_attributes: usize,
    /// Every edited attribute reaches its target.
    pub all_targets_accuracy: f64,
    /// Per edited attribute (over the samples where it was edited).
    pub target_accuracy: BTreeMap<String, f64>,
    /// Per unedited attribute (over the samples where it was not edited).
    pub preservation: BTreeMap<String, f64>,
}

fn mean_l1(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let d = (a - b)?.abs()?.flatten_from(1)?.mean(1)?;
    Ok(d.to_dtype(candle_core::DType::F64)?.to_vec1()?)
}

fn batch_tensor(models: &ModelParams, images: &[Pixels]) -> Result<Tensor> {
    let refs: Vec<&Pixels> = images.iter().collect();
    pixels::to_tensor(&refs, models.dtype(), models.device())
}

/// Draws `count` items from `pool`, without replacement while possible.
fn draw<R: Rng>(pool: &[usize], count: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut p = pool.to_vec();
        p.shuffle(rng);
        out.extend(p.into_iter().take(count - out.len()));
    }
    out
}

fn source_pool(manifest: &DatasetManifest, probes: &ProbeSet, attr: usize, value: usize) -> Vec<usize> {
    let differs = |&i: &usize| manifest.labels_of(i)[attr] != value;
    let held: Vec<usize> = probes.held_out().iter().copied().filter(differs).collect();
    if held.is_empty() {
        (0..manifest.len()).filter(differs).collect()
    } else {
        held
    }
}

struct Tally {
    hits: Vec<usize>,
    totals: Vec<usize>,
}

impl Tally {
    fn new(n: usize) -> Self {
        Self {
            hits: vec![0; n],
            totals: vec![0; n],
        }
    }

    fn add(&mut self, attr: usize, hit: bool) {
        self.totals[attr] += 1;
        self.hits[attr] += usize::from(hit);
    }

    fn rate(&self, attr: usize) -> f64 {
        self.hits[attr] as f64 / self.totals[attr].max(1) as f64
    }
}

/// Translates `sample_count` held-out sources (whose value differs from the
/// target) and grades the results.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_translation(
    models: &ModelParams,
    registry: &AverageVectorRegistry,
    probes: &ProbeSet,
    manifest: &DatasetManifest,
    attribute: &str,
    value: &str,
    sample_count: usize,
    seed: u64,
) -> Result<TranslationRow> {
    if sample_count == 0 {
        return Err(Error::Validation("sample_count must be at least 1".into()));
    }
    let schema = manifest.schema();
    let target: ValueIndex = schema.value_index(attribute, value)?;
    registry.require(target)?;
    let sources_pool = source_pool(manifest, probes, target.attr, target.value);
    if sources_pool.is_empty() {
        return Err(Error::Sampling(format!("no sources with {attribute} other than {value}")));
    }
    let refs_pool = manifest.records_with(target.global);
    if refs_pool.is_empty() {
        return Err(Error::Sampling(format!("no references with {attribute}={value}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources = draw(&sources_pool, sample_count, &mut rng);
    let refs = draw(refs_pool, sample_count, &mut rng);

    let n = schema.n();
    let mut dom = Tally::new(n);
    let mut inst = Tally::new(n);
    let (mut back_sum, mut attr_sum, mut pos_sum) = (0.0, 0.0, 0.0);
    let (mut rot_sum, mut rot_n) = (0.0, 0usize);
    for (src_chunk, ref_chunk) in sources.chunks(EVAL_BATCH).zip(refs.chunks(EVAL_BATCH)) {
        let src_imgs: Vec<_> = src_chunk.iter().map(|&i| manifest.load_image(i)).collect::<Result<_>>()?;
        let ref_imgs: Vec<_> = ref_chunk.iter().map(|&i| manifest.load_image(i)).collect::<Result<_>>()?;
        let x_src = batch_tensor(models, &src_imgs.iter().map(|l| l.pixels.clone()).collect::<Vec<_>>())?;
        let x_ref = batch_tensor(models, &ref_imgs.iter().map(|l| l.pixels.clone()).collect::<Vec<_>>())?;

        let x_dom = pixels::from_tensor(&transfer_domain(models, registry, &x_src, target)?)?;
        let tr = transfer_instance(models, &x_src, &x_ref, target.attr)?;
        let x_inst = pixels::from_tensor(&tr.x_trans)?;
        let x_back = back_translate(models, &tr.x_trans, &tr.z_src, target.attr)?;
        let x_attr = attribute_cycle(models, &tr.x_trans, &tr.z_ref, target.attr)?;
        back_sum += mean_l1(&x_back, &x_src)?.iter().sum::<f64>();
        attr_sum += mean_l1(&x_attr, &x_ref)?.iter().sum::<f64>();

        for (k, &src) in src_chunk.iter().enumerate() {
            let truth = manifest.labels_of(src);
            for (tally, img) in [(&mut dom, &x_dom[k]), (&mut inst, &x_inst[k])] {
                let pred = probes.classify(img);
                for a in 0..n {
                    let want = if a == target.attr { target.value } else { truth[a] };
                    tally.add(a, pred[a] == want);
                }
            }
            if let Some(j) = &src_imgs[k].jitter {
                let (pos, _, rot) = probes.oracle().jitter_error(&x_dom[k], j);
                pos_sum += pos;
                // orientation is only defined when the source itself has one
                if let (Some(r), Some(_)) = (rot, probes.oracle().estimate_jitter(&src_imgs[k].pixels).rot) {
                    rot_sum += r;
                    rot_n += 1;
                }
            }
        }
    }
    let count = sources.len() as f64;
    let others = |t: &Tally| -> BTreeMap<String, f64> {
        (0..n)
            .filter(|&a| a != target.attr)
            .map(|a| (schema.attribute_name(a).to_string(), t.rate(a)))
            .collect()
    };
    Ok(TranslationRow {
        attribute: attribute.to_string(),
        value: value.to_string(),
        samples: sources.len(),
        domain_target_accuracy: dom.rate(target.attr),
        domain_preservation: others(&dom),
        instance_target_accuracy: inst.rate(target.attr),
        instance_preservation: others(&inst),
        back_transfer_l1: back_sum / count,
        attr_consistency_l1: attr_sum / count,
        position_error: pos_sum / count,
        rotation_error: (rot_n > 0).then(|| rot_sum / rot_n as f64),
        rotation_samples: rot_n,
    })
}

/// Mean L1 of `G(E(x))` against `x` over up to `sample_count` held-out images.
pub fn reconstruction_l1(
    models: &ModelParams,
    probes: &ProbeSet,
    manifest: &DatasetManifest,
    sample_count: usize,
) -> Result<f64> {
    let picks: Vec<usize> = probes.held_out().iter().copied().take(sample_count).collect();
    if picks.is_empty() {
        return Err(Error::Validation("no held-out images to reconstruct".into()));
    }
    let mut sum = 0.0;
    for chunk in picks.chunks(EVAL_BATCH) {
        let imgs: Vec<Pixels> = chunk.iter().map(|&i| Pixels::load_png(&manifest.image_path(i))).collect::<Result<_>>()?;
        let x = batch_tensor(models, &imgs)?;
        sum += mean_l1(&reconstruct(models, &x)?, &x)?.iter().sum::<f64>();
    }
    Ok(sum / picks.len() as f64)
}

/// Simultaneous domain-level edits of `edit_count` random attributes, each
/// to a random value different from the source's.
pub fn evaluate_multiplex(
    models: &ModelParams,
    registry: &AverageVectorRegistry,
    probes: &ProbeSet,
    manifest: &DatasetManifest,
    edit_count: usize,
    sample_count: usize,
    seed: u64,
) -> Result<MultiplexReport> {
    let schema = manifest.schema();
    let n = schema.n();
    if sample_count == 0 {
        return Err(Error::Validation("sample_count must be at least 1".into()));
    }
    if edit_count == 0 || edit_count > n {
        return Err(Error::Validation(format!("cannot edit {edit_count} of {n} attributes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<usize> = if probes.held_out().is_empty() {
        (0..manifest.len()).collect()
    } else {
        probes.held_out().to_vec()
    };
    let sources = draw(&pool, sample_count, &mut rng);
    let mut edited = Tally::new(n);
    let mut kept = Tally::new(n);
    let mut all_hits = 0usize;
    for &src in &sources {
        let truth = manifest.labels_of(src).to_vec();
        let mut attrs: Vec<usize> = (0..n).collect();
        attrs.shuffle(&mut rng);
        attrs.truncate(edit_count);
        let mut targets = truth.clone();
        let mut edits = Vec::new();
        for &a in &attrs {
            let k = schema.attributes()[a].values.len();
            if k < 2 {
                return Err(Error::Validation(format!(
                    "attribute {} has a single value",
                    schema.attribute_name(a)
                )));
            }
            let v = (truth[a] + rng.gen_range(1..k)) % k;
            targets[a] = v;
            edits.push(Edit {
                attr: a,
                source: EditSource::Value(v),
            });
        }
        let img = Pixels::load_png(&manifest.image_path(src))?;
        let x = batch_tensor(models, std::slice::from_ref(&img))?;
        let out = pixels::from_tensor(&multiplex_translate(models, registry, &x, &edits)?)?;
        let pred = probes.classify(&out[0]);
        let mut all = true;
        for a in 0..n {
            let hit = pred[a] == targets[a];
            if attrs.contains(&a) {
                edited.add(a, hit);
                all &= hit;
            } else {
                kept.add(a, hit);
            }
        }
        all_hits += usize::from(all);
    }
    let named = |t: &Tally| -> BTreeMap<String, f64> {
        (0..n)
            .filter(|&a| t.totals[a] > 0)
            .map(|a| (schema.attribute_name(a).to_string(), t.rate(a)))
            .collect()
    };
    Ok(MultiplexReport {
        samples: sources.len(),
        edited_attributes: edit_count,
        all_targets_accuracy: all_hits as f64 / sources.len() as f64,
        target_accuracy: named(&edited),
        preservation: named(&kept),
    })
}
