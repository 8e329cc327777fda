use std::sync::Arc;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::schema::SlotLayout;

/// A batch of factored latents: the uniqueness slot plus one tensor per
/// attribute slot, all `N×C×H×W` on the layout's grid.
///
/// Values are immutable; editing returns a new code sharing untouched slots.
#[derive(Debug, Clone)]
pub struct SlotCode {
    uniqueness: Tensor,
    slots: Vec<Tensor>,
    layout: Arc<SlotLayout>,
}

fn check_latent(latent: &Tensor, layout: &SlotLayout) -> Result<usize> {
    let (h, w) = layout.spatial;
    let c = layout.total_channels();
    match latent.dims() {
        [n, lc, lh, lw] if *lc == c && *lh == h && *lw == w => Ok(*n),
        dims => Err(Error::Shape(format!("latent {dims:?} does not match layout N×{c}×{h}×{w}"))),
    }
}

/// Splits an encoder output into its slots.
pub fn split_code(latent: &Tensor, layout: &SlotLayout) -> Result<SlotCode> {
    check_latent(latent, layout)?;
    let r = layout.uniqueness_range();
    let uniqueness = latent.narrow(1, r.start, r.len())?;
    let slots = (0..layout.n())
        .map(|i| {
            let r = layout.slot_range(i)?;
            Ok(latent.narrow(1, r.start, r.len())?)
        })
        .collect::<Result<_>>()?;
    Ok(SlotCode {
        uniqueness,
        slots,
        layout: Arc::new(layout.clone()),
    })
}

/// Concatenates the slots back into one latent tensor.
pub fn join_code(code: &SlotCode) -> Result<Tensor> {
    let mut parts = Vec::with_capacity(code.slots.len() + 1);
    parts.push(&code.uniqueness);
    parts.extend(code.slots.iter());
    Ok(Tensor::cat(&parts, 1)?)
}

impl SlotCode {
    pub fn layout(&self) -> &SlotLayout {
        &self.layout
    }

    pub fn batch(&self) -> usize {
        self.uniqueness.dims()[0]
    }

    pub fn uniqueness(&self) -> &Tensor {
        &self.uniqueness
    }

    pub fn slots(&self) -> &[Tensor] {
        &self.slots
    }

    pub fn slot(&self, attr: usize) -> Result<&Tensor> {
        self.slots
            .get(attr)
            .ok_or_else(|| Error::Lookup(format!("slot index {attr} out of range for {} slots", self.slots.len())))
    }

    /// Returns a copy whose slot `attr` is `new_slot`.
    ///
    /// `new_slot` is either `N×C×H×W`, or a single `C×H×W` / `1×C×H×W` slot
    /// broadcast over the batch.
    pub fn replace_slot(&self, attr: usize, new_slot: &Tensor) -> Result<SlotCode> {
        let current = self.slot(attr)?;
        let want = current.dims();
        let n = want[0];
        let slot = match new_slot.dims() {
            d if d == want => new_slot.clone(),
            [1, c, h, w] if [*c, *h, *w] == want[1..] => new_slot.broadcast_as(want)?,
            [c, h, w] if [*c, *h, *w] == want[1..] => new_slot.unsqueeze(0)?.broadcast_as(want)?,
            d => {
                return Err(Error::Shape(format!(
                    "slot {attr} expects {want:?} (or a single {:?}), got {d:?}",
                    &want[1..]
                )))
            }
        };
        let slot = if slot.dtype() != current.dtype() { slot.to_dtype(current.dtype())? } else { slot };
        debug_assert_eq!(slot.dims()[0], n);
        let mut slots = self.slots.clone();
        slots[attr] = slot;
        Ok(SlotCode {
            uniqueness: self.uniqueness.clone(),
            slots,
            layout: self.layout.clone(),
        })
    }

    /// Element-wise identical contents (bit equality after widening to f64).
    pub fn exact_eq(&self, other: &SlotCode) -> Result<bool> {
        if self.layout != other.layout {
            return Ok(false);
        }
        Ok(tensors_identical(&join_code(self)?, &join_code(other)?)?)
    }

    /// Detached copy, cut from any autograd graph.
    pub fn detach(&self) -> SlotCode {
        SlotCode {
            uniqueness: self.uniqueness.detach(),
            slots: self.slots.iter().map(Tensor::detach).collect(),
            layout: self.layout.clone(),
        }
    }
}

pub fn tensors_identical(a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.dims() != b.dims() {
        return Ok(false);
    }
    let a: Vec<f64> = a.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let b: Vec<f64> = b.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()))
}
