//! Attribute catalogue and the channel partition of the latent code.
//!
//! An [`AttributeSchema`] lists `n` attributes, each with at least two
//! discrete values (`m` values in total). A [`SlotLayout`] splits the encoder
//! output into one uniqueness slot followed by one slot per attribute, in
//! schema order.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchema {
    attributes: Vec<Attribute>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct AttributeSchema {
    attributes: Vec<Attribute>,
    // first global index of each attribute's values
    offsets: Vec<usize>,
}

/// Position of one attribute value inside a schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ValueIndex {
    pub attr: usize,
    pub value: usize,
    pub global: usize,
}

impl TryFrom<RawSchema> for AttributeSchema {
    type Error = Error;

    fn try_from(raw: RawSchema) -> Result<Self> {
        AttributeSchema::new(raw.attributes)
    }
}

impl From<AttributeSchema> for RawSchema {
    fn from(schema: AttributeSchema) -> Self {
        RawSchema {
            attributes: schema.attributes,
        }
    }
}

impl AttributeSchema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Validation("schema needs at least one attribute".into()));
        }
        let mut offsets = Vec::with_capacity(attributes.len());
        let mut next = 0;
        for (i, attr) in attributes.iter().enumerate() {
            if attr.name.is_empty() {
                return Err(Error::Validation(format!("attribute {i} has an empty name")));
            }
            if attributes[..i].iter().any(|a| a.name == attr.name) {
                return Err(Error::Validation(format!("duplicate attribute `{}`", attr.name)));
            }
            if attr.values.len() < 2 {
                return Err(Error::Validation(format!(
                    "attribute `{}` needs at least two values",
                    attr.name
                )));
            }
            for (j, v) in attr.values.iter().enumerate() {
                if v.is_empty() || attr.values[..j].contains(v) {
                    return Err(Error::Validation(format!(
                        "attribute `{}` has an empty or duplicate value `{v}`",
                        attr.name
                    )));
                }
            }
            offsets.push(next);
            next += attr.values.len();
        }
        Ok(Self {
            attributes,
            offsets,
        })
    }

    /// Convenience constructor from `(name, [values])` pairs.
    pub fn from_pairs(pairs: &[(&str, &[&str])]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|(name, values)| Attribute {
                    name: name.to_string(),
                    values: values.iter().map(|v| v.to_string()).collect(),
                })
                .collect(),
        )
    }

    /// The default sprite schema: shape, color, size.
    pub fn sprites() -> Self {
        Self::from_pairs(&[
            ("shape", &["circle", "square"]),
            ("color", &["red", "green", "blue"]),
            ("size", &["small", "large"]),
        ])
        .expect("static schema is valid")
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    /// Number of attributes.
    pub fn n(&self) -> usize {
        self.attributes.len()
    }

    /// Total number of attribute values across all attributes.
    pub fn m(&self) -> usize {
        self.attributes.iter().map(|a| a.values.len()).sum()
    }

    pub fn attr_index(&self, attribute: &str) -> Result<usize> {
        self.attributes
            .iter()
            .position(|a| a.name == attribute)
            .ok_or_else(|| Error::Lookup(format!("unknown attribute `{attribute}`")))
    }

    pub fn value_index(&self, attribute: &str, value: &str) -> Result<ValueIndex> {
        let attr = self.attr_index(attribute)?;
        let value_idx = self.attributes[attr]
            .values
            .iter()
            .position(|v| v == value)
            .ok_or_else(|| {
                Error::Lookup(format!("unknown value `{value}` for attribute `{attribute}`"))
            })?;
        Ok(ValueIndex {
            attr,
            value: value_idx,
            global: self.offsets[attr] + value_idx,
        })
    }

    /// Index for a known `(attr, value)` position.
    pub fn index_at(&self, attr: usize, value: usize) -> Result<ValueIndex> {
        let a = self
            .attributes
            .get(attr)
            .ok_or_else(|| Error::Lookup(format!("attribute index {attr} out of range")))?;
        if value >= a.values.len() {
            return Err(Error::Lookup(format!(
                "value index {value} out of range for `{}`",
                a.name
            )));
        }
        Ok(ValueIndex {
            attr,
            value,
            global: self.offsets[attr] + value,
        })
    }

    /// Inverse of the global enumeration.
    pub fn from_global(&self, global: usize) -> Result<ValueIndex> {
        let attr = self
            .offsets
            .iter()
            .rposition(|&o| o <= global)
            .filter(|_| global < self.m())
            .ok_or_else(|| Error::Lookup(format!("value key {global} out of range")))?;
        self.index_at(attr, global - self.offsets[attr])
    }

    /// All values in global order.
    pub fn all_values(&self) -> impl Iterator<Item = ValueIndex> + '_ {
        self.attributes.iter().enumerate().flat_map(move |(a, attr)| {
            (0..attr.values.len()).map(move |v| ValueIndex {
                attr: a,
                value: v,
                global: self.offsets[a] + v,
            })
        })
    }

    pub fn attribute_name(&self, attr: usize) -> &str {
        &self.attributes[attr].name
    }

    pub fn value_name(&self, idx: ValueIndex) -> &str {
        &self.attributes[idx.attr].values[idx.value]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Hex SHA-256 of the compact JSON form; order-sensitive.
    pub fn fingerprint(&self) -> String {
        let compact = serde_json::to_string(self).expect("schema serializes");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotLayout {
    pub spatial: (usize, usize),
    pub uniqueness_channels: usize,
    pub attribute_channels: Vec<usize>,
}

impl SlotLayout {
    pub fn n(&self) -> usize {
        self.attribute_channels.len()
    }

    pub fn total_channels(&self) -> usize {
        self.uniqueness_channels + self.attribute_channels.iter().sum::<usize>()
    }

    pub fn uniqueness_range(&self) -> Range<usize> {
        0..self.uniqueness_channels
    }

    pub fn slot_range(&self, attr: usize) -> Result<Range<usize>> {
        if attr >= self.n() {
            return Err(Error::Lookup(format!(
                "slot index {attr} out of range for {} attribute slots",
                self.n()
            )));
        }
        let start = self.uniqueness_channels + self.attribute_channels[..attr].iter().sum::<usize>();
        Ok(start..start + self.attribute_channels[attr])
    }

    /// Shape of attribute slot `attr` for a batch of `batch` codes (NCHW).
    pub fn slot_shape(&self, attr: usize, batch: usize) -> Result<[usize; 4]> {
        let r = self.slot_range(attr)?;
        Ok([batch, r.len(), self.spatial.0, self.spatial.1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.spatial.0 == 0 || self.spatial.1 == 0 {
            return Err(Error::Validation("latent spatial grid must be positive".into()));
        }
        if self.uniqueness_channels == 0 {
            return Err(Error::Validation("uniqueness channels must be positive".into()));
        }
        if self.attribute_channels.is_empty() || self.attribute_channels.contains(&0) {
            return Err(Error::Validation(
                "every attribute slot needs a positive channel count".into(),
            ));
        }
        Ok(())
    }
}

/// Uniqueness slot first, then one `per_attribute_channels`-wide slot per
/// attribute in schema order.
pub fn build_layout(
    schema: &AttributeSchema,
    latent_spatial: (usize, usize),
    uniqueness_channels: usize,
    per_attribute_channels: usize,
) -> Result<SlotLayout> {
    let layout = SlotLayout {
        spatial: latent_spatial,
        uniqueness_channels,
        attribute_channels: vec![per_attribute_channels; schema.n()],
    };
    layout.validate()?;
    Ok(layout)
}
