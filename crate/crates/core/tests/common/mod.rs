#![allow(dead_code)]
pub mod checks;

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slotswap::data::{build_dataset, DatasetManifest, JitterRange, SpriteConfig};
use slotswap::losses::LossWeights;
use slotswap::nets::{build_models, ModelParams, NetworkConfig, Normalization};
use slotswap::slots::{encode_code, AverageVectorRegistry, UpdateMode};
use slotswap::train::{AdamConfig, Precision, TrainConfig, TrainMode};
use slotswap::AttributeSchema;

/// 16x16 network with two channels everywhere.
pub fn micro_network() -> NetworkConfig {
    NetworkConfig {
        input_size: 16,
        base_channels: 2,
        uniqueness_channels: 2,
        attribute_channels: 2,
        discriminator_base_channels: 2,
        normalization: Normalization::Instance,
        negative_slope: 0.2,
    }
}

pub fn micro_models(dtype: DType, seed: u64) -> (AttributeSchema, ModelParams) {
    micro_models_at(16, dtype, seed)
}

/// Micro models for `size`-pixel images.
pub fn micro_models_at(size: usize, dtype: DType, seed: u64) -> (AttributeSchema, ModelParams) {
    let schema = AttributeSchema::sprites();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = NetworkConfig {
        input_size: size,
        ..micro_network()
    };
    let models = build_models(&cfg, &schema, &mut rng, dtype, &Device::Cpu).unwrap();
    (schema, models)
}

/// Jittered 32x32 sprites, which the analytic probes read reliably.
pub fn probe_dataset(dir: &Path, count: usize) -> DatasetManifest {
    let mut cfg = SpriteConfig::default_sprites(32);
    cfg.seed = 4;
    build_dataset(&cfg, count, dir).unwrap()
}

pub fn micro_train_config(iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 2,
        generator_optimizer: AdamConfig::default(),
        discriminator_optimizer: AdamConfig::default(),
        weights: LossWeights::instance_default(),
        mode: TrainMode::Instance,
        multiplex_augment_prob: 0.0,
        checkpoint_every: 2,
        seed: 7,
        network: micro_network(),
        discriminator_steps: 1,
        registry_decay: 0.01,
        precision: Precision::F32,
    }
}

/// Jittered 16x16 sprites, `count` per combination.
pub fn micro_dataset(dir: &Path, count: usize) -> DatasetManifest {
    let mut cfg = SpriteConfig::default_sprites(16);
    cfg.seed = 3;
    build_dataset(&cfg, count, dir).unwrap()
}

pub fn still_sprites(size: usize) -> SpriteConfig {
    let mut cfg = SpriteConfig::default_sprites(size);
    cfg.jitter = JitterRange::none();
    cfg
}

/// Images uniformly in [-1, 1].
pub fn random_images(n: usize, size: usize, dtype: DType, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..n * 3 * size * size).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, (n, 3, size, size), &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

/// Registry with every value filled from encodings of random images.
pub fn filled_registry(schema: &AttributeSchema, models: &ModelParams, seed: u64) -> AverageVectorRegistry {
    let mut reg = AverageVectorRegistry::new(schema, models.layout(), 0.01).unwrap();
    for (k, v) in schema.all_values().enumerate() {
        let x = random_images(2, models.config().input_size, models.dtype(), seed + k as u64);
        let code = encode_code(models, &x, slotswap::nets::Mode::Eval).unwrap();
        reg.update(v, code.slot(v.attr).unwrap(), UpdateMode::Minibatch).unwrap();
    }
    reg
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    to_vec(a)
        .iter()
        .zip(to_vec(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
