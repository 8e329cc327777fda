//! Synthetic sprite data: generation, manifests, sampling and the analytic
//! label oracle used to grade translations.

mod manifest;
mod oracle;
mod sprite;

pub use manifest::{
    build_dataset, combinations, load_manifest, named_counts, sample_batch, sample_indices, DatasetManifest,
    ImageBank, ManifestRecord, MANIFEST_FILE, SCHEMA_FILE, SPRITE_CONFIG_FILE,
};
pub use oracle::{JitterEstimate, SpriteOracle};
pub use sprite::{
    generate_sprite, label_indices, Jitter, JitterRange, LabeledImage, Labels, RenderKind, RenderParam,
    ShapeKind, SpriteConfig,
};
