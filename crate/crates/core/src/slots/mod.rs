//! Slot codes and the editing algebra over them.

mod code;
mod registry;
mod translate;

pub use code::{join_code, split_code, SlotCode};
pub use code::tensors_identical;
pub use registry::{AverageVectorRegistry, UpdateMode};
pub use translate::{
    attribute_cycle, attribute_cycle_in, back_translate, back_translate_in, encode_code, generate_code,
    multiplex_translate, reconstruct, transfer_domain, transfer_instance, transfer_instance_in, Edit, EditSource,
    Transfer,
};
