//! Slot-coded attribute transfer.
//!
//! An encoder maps an image to a latent split into a uniqueness slot and one
//! slot per attribute. Swapping slots between codes and regenerating
//! transfers attributes between images, either from a single reference
//! (instance level) or from a value's average slot (domain level).
//!
//! ```no_run
//! use candle_core::Device;
//! use slotswap::{data::load_manifest, train::{run_training, TrainConfig}};
//!
//! let manifest = load_manifest("data/".as_ref())?;
//! let config = TrainConfig::desk(100);
//! run_training(&config, &manifest, "runs/a".as_ref(), true, &Device::Cpu)?;
//! # Ok::<(), slotswap::Error>(())
//! ```

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod pixels;
pub mod schema;
pub mod slots;
pub mod train;

pub use candle_core;
pub use error::{Error, Result};
pub use schema::{build_layout, AttributeSchema, SlotLayout, ValueIndex};
