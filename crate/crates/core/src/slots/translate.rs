//! Translation operations built from encode, slot replacement and generate.
//!
//! Public functions run the networks in evaluation mode. The `*_in` variants
//! take an explicit [`Mode`] and are what the trainer differentiates through.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nets::{Mode, ModelParams};
use crate::schema::ValueIndex;

use super::code::{join_code, split_code, SlotCode};
use super::registry::AverageVectorRegistry;

/// Encodes images and splits the latent into slots.
pub fn encode_code(models: &ModelParams, images: &Tensor, mode: Mode) -> Result<SlotCode> {
    split_code(&models.encode(images, mode)?, models.layout())
}

/// Joins a code and runs the generator.
pub fn generate_code(models: &ModelParams, code: &SlotCode, mode: Mode) -> Result<Tensor> {
    models.generate(&join_code(code)?, mode)
}

/// `G(E(x))`.
pub fn reconstruct(models: &ModelParams, images: &Tensor) -> Result<Tensor> {
    generate_code(models, &encode_code(models, images, Mode::Eval)?, Mode::Eval)
}

/// Result of an instance-level transfer.
#[derive(Debug, Clone)]
pub struct Transfer {
    pub x_trans: Tensor,
    pub z_src: SlotCode,
    pub z_ref: SlotCode,
}

pub(crate) fn check_attr(models: &ModelParams, attr: usize) -> Result<()> {
    if attr >= models.layout().n() {
        return Err(Error::Lookup(format!(
            "attribute index {attr} out of range for {} attributes",
            models.layout().n()
        )));
    }
    Ok(())
}

pub fn transfer_instance_in(
    models: &ModelParams,
    x_src: &Tensor,
    x_ref: &Tensor,
    attr: usize,
    mode: Mode,
) -> Result<Transfer> {
    check_attr(models, attr)?;
    let z_src = encode_code(models, x_src, mode)?;
    let z_ref = encode_code(models, x_ref, mode)?;
    let edited = z_src.replace_slot(attr, z_ref.slot(attr)?)?;
    let x_trans = generate_code(models, &edited, mode)?;
    Ok(Transfer { x_trans, z_src, z_ref })
}

/// `G(E(x_src)` with slot `attr` taken from `E(x_ref))`.
pub fn transfer_instance(models: &ModelParams, x_src: &Tensor, x_ref: &Tensor, attr: usize) -> Result<Transfer> {
    transfer_instance_in(models, x_src, x_ref, attr, Mode::Eval)
}

/// `G(E(x_src)` with slot `value.attr` replaced by the registry average).
pub fn transfer_domain(
    models: &ModelParams,
    registry: &AverageVectorRegistry,
    x_src: &Tensor,
    value: ValueIndex,
) -> Result<Tensor> {
    check_attr(models, value.attr)?;
    let avg = registry.require(value)?;
    let z_src = encode_code(models, x_src, Mode::Eval)?;
    generate_code(models, &z_src.replace_slot(value.attr, avg)?, Mode::Eval)
}

/// Re-encodes `x_trans` and restores the listed slots from `z_src`.
pub fn back_translate_in(
    models: &ModelParams,
    x_trans: &Tensor,
    z_src: &SlotCode,
    attrs: &[usize],
    mode: Mode,
) -> Result<Tensor> {
    let mut z = encode_code(models, x_trans, mode)?;
    for &a in attrs {
        check_attr(models, a)?;
        z = z.replace_slot(a, z_src.slot(a)?)?;
    }
    generate_code(models, &z, mode)
}

/// `G(E(x_trans)` with slot `attr` restored from `z_src)`.
pub fn back_translate(models: &ModelParams, x_trans: &Tensor, z_src: &SlotCode, attr: usize) -> Result<Tensor> {
    back_translate_in(models, x_trans, z_src, &[attr], Mode::Eval)
}

pub fn attribute_cycle_in(
    models: &ModelParams,
    x_trans: &Tensor,
    z_ref: &SlotCode,
    attr: usize,
    mode: Mode,
) -> Result<Tensor> {
    check_attr(models, attr)?;
    let z_trans = encode_code(models, x_trans, mode)?;
    generate_code(models, &z_ref.replace_slot(attr, z_trans.slot(attr)?)?, mode)
}

/// `G(z_ref` with slot `attr` taken from `E(x_trans))`.
pub fn attribute_cycle(models: &ModelParams, x_trans: &Tensor, z_ref: &SlotCode, attr: usize) -> Result<Tensor> {
    attribute_cycle_in(models, x_trans, z_ref, attr, Mode::Eval)
}

/// Where a multiplex edit takes its slot from.
#[derive(Debug, Clone)]
pub enum EditSource {
    /// Registry average of a value of the edited attribute.
    Value(usize),
    /// Encoded slot of a reference batch (`N×3×S×S`, or one image).
    Reference(Tensor),
}

#[derive(Debug, Clone)]
pub struct Edit {
    pub attr: usize,
    pub source: EditSource,
}

/// Replaces every edited slot on a single encoding, then generates once.
pub fn multiplex_translate(
    models: &ModelParams,
    registry: &AverageVectorRegistry,
    x_src: &Tensor,
    edits: &[Edit],
) -> Result<Tensor> {
    for (i, e) in edits.iter().enumerate() {
        check_attr(models, e.attr)?;
        if edits[..i].iter().any(|o| o.attr == e.attr) {
            return Err(Error::Validation(format!("attribute {} edited twice", e.attr)));
        }
    }
    let mut z = encode_code(models, x_src, Mode::Eval)?;
    for e in edits {
        let slot = match &e.source {
            EditSource::Value(v) => {
                let idx = registry.schema().index_at(e.attr, *v)?;
                registry.require(idx)?.clone()
            }
            EditSource::Reference(img) => encode_code(models, img, Mode::Eval)?.slot(e.attr)?.clone(),
        };
        z = z.replace_slot(e.attr, &slot)?;
    }
    generate_code(models, &z, Mode::Eval)
}
