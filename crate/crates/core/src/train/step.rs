use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_indices, DatasetManifest, ImageBank};
use crate::error::{Error, Result};
use crate::losses::{
    attribute_consistency_loss, back_transfer_loss, discriminator_loss, generation_loss_tensor, transfer_loss,
    AttrTarget, LossReport,
};
use crate::nets::{build_models, Mode, ModelParams, Network};
use crate::schema::{AttributeSchema, ValueIndex};
use crate::slots::{
    attribute_cycle_in, back_translate_in, encode_code, generate_code, AverageVectorRegistry, UpdateMode,
};

use super::adam::Adam;
use super::config::{TrainConfig, TrainMode};

/// `|generator_total|` above this aborts training.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

/// Counters kept across steps (and checkpoints).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TrainStats {
    pub steps: u64,
    pub attribute_cycle_calls: u64,
    pub augmented_steps: u64,
}

/// Everything needed to continue training bit-identically.
pub struct TrainState {
    pub config: TrainConfig,
    pub schema: AttributeSchema,
    pub models: ModelParams,
    pub generator_opt: Adam,
    pub discriminator_opt: Adam,
    /// Minibatch-replaced averages used during training.
    pub live_registry: AverageVectorRegistry,
    /// Slowly averaged copy used for inference.
    pub frozen_registry: AverageVectorRegistry,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub stats: TrainStats,
}

/// What one step did, for instrumentation and tests.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub value: ValueIndex,
    pub src_indices: Vec<usize>,
    pub ref_indices: Vec<usize>,
    /// Non-target attribute converted on the source, and the value used.
    pub augmentation: Option<(usize, usize)>,
    /// Slot written into the target position (`N×C×H×W` or `1×C×H×W`).
    pub target_slot: Tensor,
    pub attribute_cycle_evaluated: bool,
    /// Whether the discriminator loss produced any encoder/generator gradient.
    pub discriminator_touched_eg: bool,
}

impl TrainState {
    /// Fresh state: weights from stream 0 of `seed`, sampling from stream 1.
    pub fn new(config: &TrainConfig, schema: &AttributeSchema, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_rng.set_stream(0);
        let models = build_models(&config.network, schema, &mut init_rng, config.precision.dtype(), device)?;
        let layout = models.layout().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config: config.clone(),
            schema: schema.clone(),
            generator_opt: Adam::new(config.generator_optimizer),
            discriminator_opt: Adam::new(config.discriminator_optimizer),
            live_registry: AverageVectorRegistry::new(schema, &layout, config.registry_decay)?,
            frozen_registry: AverageVectorRegistry::new(schema, &layout, config.registry_decay)?,
            models,
            iteration: 0,
            rng,
            stats: TrainStats::default(),
        })
    }
}

/// Picks a non-target attribute to convert, or `None`.
///
/// Draws nothing from `rng` when `prob == 0` or there is no other attribute.
pub fn augmentation_decision<R: Rng + ?Sized>(rng: &mut R, prob: f64, n: usize, target_attr: usize) -> Option<usize> {
    if prob <= 0.0 || n < 2 {
        return None;
    }
    if rng.gen::<f64>() >= prob {
        return None;
    }
    let k = rng.gen_range(0..n - 1);
    Some(if k >= target_attr { k + 1 } else { k })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// One transfer / back-transfer / attribute-consistency step for `value`,
/// followed by the discriminator update for that value.
pub fn train_step(
    state: &mut TrainState,
    manifest: &DatasetManifest,
    bank: &ImageBank,
    value: ValueIndex,
) -> Result<(LossReport, StepTrace)> {
    let cfg = state.config.clone();
    let weights = cfg.effective_weights();
    let models = &state.models;
    let all: Vec<usize> = (0..manifest.len()).collect();
    let domain = manifest.records_with(value.global);
    if domain.is_empty() {
        return Err(Error::Sampling(format!(
            "no records for {}={}",
            state.schema.attribute_name(value.attr),
            state.schema.value_name(value)
        )));
    }
    let src_indices = sample_indices(manifest, &all, cfg.batch_size, &mut state.rng)?;
    let ref_indices = sample_indices(manifest, domain, cfg.batch_size, &mut state.rng)?;
    let x_src = bank.batch(&src_indices)?.to_dtype(models.dtype())?;
    let x_ref = bank.batch(&ref_indices)?.to_dtype(models.dtype())?;

    let aug_attr = augmentation_decision(&mut state.rng, cfg.multiplex_augment_prob, state.schema.n(), value.attr);
    let augmentation = match aug_attr {
        Some(k) => {
            let ready: Vec<usize> = (0..state.schema.attributes()[k].values.len())
                .filter(|&v| {
                    let idx = state.schema.index_at(k, v).expect("in range");
                    !state.live_registry.is_empty_entry(idx)
                })
                .collect();
            if ready.is_empty() {
                None
            } else {
                Some((k, ready[state.rng.gen_range(0..ready.len())]))
            }
        }
        None => None,
    };

    // generator / encoder pass
    let z_src = encode_code(models, &x_src, Mode::Train)?;
    let z_ref = encode_code(models, &x_ref, Mode::Train)?;
    let mut z_edit = z_src.clone();
    if let Some((k, v)) = augmentation {
        let idx = state.schema.index_at(k, v)?;
        z_edit = z_edit.replace_slot(k, state.live_registry.require(idx)?)?;
    }
    let ref_slot = z_ref.slot(value.attr)?;
    let target_slot = match cfg.mode {
        TrainMode::Instance => ref_slot.clone(),
        TrainMode::Domain => ref_slot.mean_keepdim(0)?,
    };
    let x_trans = generate_code(models, &z_edit.replace_slot(value.attr, &target_slot)?, Mode::Train)?;
    let p_trans = models.discriminate(value.global, &x_trans, Mode::Train)?;
    let l_trans = transfer_loss(&p_trans)?;

    let mut restored = vec![value.attr];
    restored.extend(augmentation.map(|(k, _)| k));
    let x_back = back_translate_in(models, &x_trans, &z_src, &restored, Mode::Train)?;
    let l_back = back_transfer_loss(&x_src, &x_back, weights.dist)?;

    let attribute_cycle_evaluated = weights.lambda3 != 0.0;
    let l_attr = if attribute_cycle_evaluated {
        state.stats.attribute_cycle_calls += 1;
        let x_attr = attribute_cycle_in(models, &x_trans, &z_ref, value.attr, Mode::Train)?;
        let target = match weights.attr_target {
            AttrTarget::Reference => &x_ref,
            AttrTarget::Transferred => &x_trans,
        };
        Some(attribute_consistency_loss(&x_attr, target, weights.dist)?)
    } else {
        None
    };
    let l_gen = generation_loss_tensor(&l_trans, &l_back, l_attr.as_ref(), &weights)?;

    let report_partial = (
        scalar(&l_trans)?,
        scalar(&l_back)?,
        l_attr.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
        scalar(&l_gen)?,
    );
    let diverged = |dis: f64| {
        let report = LossReport {
            transfer: report_partial.0,
            back: report_partial.1,
            attr: report_partial.2,
            generator_total: report_partial.3,
            discriminator: dis,
        };
        (!report.is_finite() || report.generator_total.abs() > DIVERGENCE_LIMIT, report)
    };
    if let (true, report) = diverged(0.0) {
        return Err(Error::Divergence {
            iteration: state.iteration + 1,
            value_key: value.global,
            report,
        });
    }

    let eg_params: Vec<_> = models
        .named_params()
        .into_iter()
        .filter(|(n, _)| matches!(Network::of(n), Some(Network::Encoder | Network::Generator)))
        .collect();
    let d_params: Vec<_> = models
        .named_params()
        .into_iter()
        .filter(|(n, _)| Network::of(n) == Some(Network::Discriminator(value.global)))
        .collect();

    let grads = l_gen.backward()?;
    state.generator_opt.step(&eg_params, &grads)?;
    drop(grads);

    // discriminator pass on detached translations
    let mut discriminator_touched_eg = false;
    let mut l_dis_value = 0.0;
    for k in 0..cfg.discriminator_steps {
        let (fake, real) = if k == 0 {
            (x_trans.detach(), x_ref.clone())
        } else {
            let src = sample_indices(manifest, &all, cfg.batch_size, &mut state.rng)?;
            let refs = sample_indices(manifest, domain, cfg.batch_size, &mut state.rng)?;
            let xs = bank.batch(&src)?.to_dtype(models.dtype())?;
            let xr = bank.batch(&refs)?.to_dtype(models.dtype())?;
            let zs = encode_code(models, &xs, Mode::Train)?;
            let zr = encode_code(models, &xr, Mode::Train)?;
            let slot = match cfg.mode {
                TrainMode::Instance => zr.slot(value.attr)?.clone(),
                TrainMode::Domain => zr.slot(value.attr)?.mean_keepdim(0)?,
            };
            let xt = generate_code(models, &zs.replace_slot(value.attr, &slot)?, Mode::Train)?;
            (xt.detach(), xr)
        };
        let p_fake = models.discriminate(value.global, &fake, Mode::Train)?;
        let p_real = models.discriminate(value.global, &real, Mode::Train)?;
        let l_dis = discriminator_loss(&p_fake, &p_real)?;
        if k == 0 {
            l_dis_value = scalar(&l_dis)?;
        }
        let grads = l_dis.backward()?;
        discriminator_touched_eg |= eg_params.iter().any(|(_, v)| grads.get(v.as_tensor()).is_some());
        state.discriminator_opt.step(&d_params, &grads)?;
    }

    let (bad, report) = diverged(l_dis_value);
    if bad {
        return Err(Error::Divergence {
            iteration: state.iteration + 1,
            value_key: value.global,
            report,
        });
    }

    let ref_slots = ref_slot.detach();
    state.live_registry.update(value, &ref_slots, UpdateMode::Minibatch)?;
    state.frozen_registry.update(value, &ref_slots, UpdateMode::Ema)?;
    state.stats.steps += 1;
    if augmentation.is_some() {
        state.stats.augmented_steps += 1;
    }

    Ok((
        report,
        StepTrace {
            value,
            src_indices,
            ref_indices,
            augmentation,
            target_slot: target_slot.detach(),
            attribute_cycle_evaluated,
            discriminator_touched_eg,
        },
    ))
}

/// One step per attribute value, in global order; advances the iteration.
pub fn train_iteration(
    state: &mut TrainState,
    manifest: &DatasetManifest,
    bank: &ImageBank,
) -> Result<Vec<(LossReport, StepTrace)>> {
    let values: Vec<ValueIndex> = state.schema.all_values().collect();
    for v in &values {
        if manifest.records_with(v.global).is_empty() {
            return Err(Error::Sampling(format!(
                "domain {}={} is empty",
                state.schema.attribute_name(v.attr),
                state.schema.value_name(*v)
            )));
        }
    }
    let mut out = Vec::with_capacity(values.len());
    for v in values {
        out.push(train_step(state, manifest, bank, v)?);
    }
    state.iteration += 1;
    Ok(out)
}
