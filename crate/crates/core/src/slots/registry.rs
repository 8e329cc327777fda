use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{AttributeSchema, SlotLayout, ValueIndex};

/// How a batch of slots folds into a registry entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    /// The entry becomes the batch mean.
    Minibatch,
    /// `mean <- (1 - decay) * mean + decay * batch_mean`; an empty entry
    /// takes the batch mean directly.
    Ema,
}

#[derive(Debug, Clone)]
struct Entry {
    mean: Option<Tensor>,
    count: u64,
}

/// Average slot vector per attribute value, used for domain-level
/// translation.
#[derive(Debug, Clone)]
pub struct AverageVectorRegistry {
    schema: AttributeSchema,
    layout: SlotLayout,
    decay: f64,
    entries: Vec<Entry>,
}

impl AverageVectorRegistry {
    pub fn new(schema: &AttributeSchema, layout: &SlotLayout, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Validation(format!("registry decay {decay} outside [0, 1]")));
        }
        if layout.n() != schema.n() {
            return Err(Error::Validation("layout and schema disagree on attribute count".into()));
        }
        Ok(Self {
            schema: schema.clone(),
            layout: layout.clone(),
            decay,
            entries: vec![Entry { mean: None, count: 0 }; schema.m()],
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    fn slot_dims(&self, attr: usize) -> Result<[usize; 3]> {
        let [_, c, h, w] = self.layout.slot_shape(attr, 1)?;
        Ok([c, h, w])
    }

    /// Folds `slot_batch` (`N×C×H×W`) into the entry for `idx`.
    pub fn update(&mut self, idx: ValueIndex, slot_batch: &Tensor, mode: UpdateMode) -> Result<()> {
        let want = self.slot_dims(idx.attr)?;
        let n = match slot_batch.dims() {
            [n, c, h, w] if [*c, *h, *w] == want && *n > 0 => *n,
            d => return Err(Error::Shape(format!("registry update expects N×{want:?} slots, got {d:?}"))),
        };
        let batch_mean = slot_batch.detach().mean(0)?;
        let entry = &mut self.entries[idx.global];
        entry.mean = Some(match (mode, entry.mean.take()) {
            (UpdateMode::Ema, Some(old)) => ((old * (1.0 - self.decay))? + (batch_mean * self.decay)?)?,
            _ => batch_mean,
        });
        entry.count += n as u64;
        Ok(())
    }

    /// Mean slot (`C×H×W`) of a value, or `None` if never updated.
    pub fn mean(&self, idx: ValueIndex) -> Option<&Tensor> {
        self.entries.get(idx.global).and_then(|e| e.mean.as_ref())
    }

    pub fn count(&self, idx: ValueIndex) -> u64 {
        self.entries.get(idx.global).map_or(0, |e| e.count)
    }

    pub fn is_empty_entry(&self, idx: ValueIndex) -> bool {
        self.mean(idx).is_none()
    }

    /// Like [`mean`](Self::mean) but reports an empty entry as an error.
    pub fn require(&self, idx: ValueIndex) -> Result<&Tensor> {
        self.mean(idx).ok_or_else(|| Error::NotReady {
            attribute: self.schema.attribute_name(idx.attr).to_string(),
            value: self.schema.value_name(idx).to_string(),
        })
    }

    /// Archive key of an entry.
    pub fn key(&self, idx: ValueIndex) -> String {
        format!("avg/{}/{}", self.schema.attribute_name(idx.attr), self.schema.value_name(idx))
    }

    /// Non-empty entries as `(key, mean, count)`.
    pub fn named_entries(&self) -> Vec<(String, Tensor, u64)> {
        self.schema
            .all_values()
            .filter_map(|idx| {
                let e = &self.entries[idx.global];
                e.mean.as_ref().map(|m| (self.key(idx), m.clone(), e.count))
            })
            .collect()
    }

    /// Restores one entry from its archive key.
    pub fn restore(&mut self, key: &str, mean: Tensor, count: u64) -> Result<()> {
        let rest = key
            .strip_prefix("avg/")
            .ok_or_else(|| Error::Checkpoint(format!("`{key}` is not a registry key")))?;
        let (a, v) = rest
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("`{key}` is not a registry key")))?;
        let idx = self.schema.value_index(a, v)?;
        let want = self.slot_dims(idx.attr)?;
        if mean.dims() != want {
            return Err(Error::Checkpoint(format!("registry entry `{key}` has shape {:?}", mean.dims())));
        }
        self.entries[idx.global] = Entry {
            mean: Some(mean),
            count,
        };
        Ok(())
    }

    pub fn to_dtype(&self, dtype: DType, device: &Device) -> Result<Self> {
        let mut out = self.clone();
        for e in &mut out.entries {
            if let Some(m) = &e.mean {
                e.mean = Some(m.to_dtype(dtype)?.to_device(device)?);
            }
        }
        Ok(out)
    }
}
