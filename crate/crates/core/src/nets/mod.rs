//! Encoder, generator and per-value discriminators.
//!
//! The layer stack follows the classic two-stage downsampling translator:
//!
//! | encoder                  | generator                   | discriminator (per value)     |
//! |--------------------------|-----------------------------|-------------------------------|
//! | 7x7 conv `b`             | 7x7 conv `4b`               | 4x4/2 conv `d` (no norm)      |
//! | 3x3/2 conv `2b`          | residual `4b`               | 4x4/2 conv `2d`               |
//! | 3x3/2 conv `4b`          | residual `4b`               | 4x4/2 conv `4d`               |
//! | residual -> layout width | 3x3/2 deconv `2b`           | 4x4/2 conv `8d`               |
//! |                          | 3x3/2 deconv `b`            | 4x4/2 conv `16d`              |
//! |                          | 7x7 conv `3`, tanh          | global conv `1`, sigmoid      |
//!
//! Encoder and generator blocks use ReLU, discriminator blocks a leaky ReLU.
//! Small inputs get fewer discriminator stages: stages stop once the grid
//! reaches 1x1, and stages with a 1x1 output skip normalization.

mod layers;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::schema::{build_layout, AttributeSchema, SlotLayout};

use layers::{leaky_relu, sigmoid, Conv2d, ConvBlock, ConvTranspose2d, Init, Named, Norm, Residual};

/// Probabilities are kept inside `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

const MAX_DISCRIMINATOR_STAGES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Batch,
    #[default]
    Instance,
}

/// Training mode updates batch-norm running statistics; evaluation mode
/// reads them. Instance normalization behaves identically in both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub base_channels: usize,
    pub uniqueness_channels: usize,
    /// Width of every attribute slot.
    pub attribute_channels: usize,
    pub discriminator_base_channels: usize,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "default_slope")]
    pub negative_slope: f64,
}

fn default_slope() -> f64 {
    0.2
}

impl NetworkConfig {
    /// 128x128 input, 64 base channels, 256 + 100-per-attribute latent.
    pub fn paper() -> Self {
        Self {
            input_size: 128,
            base_channels: 64,
            uniqueness_channels: 256,
            attribute_channels: 100,
            discriminator_base_channels: 64,
            normalization: Normalization::Instance,
            negative_slope: 0.2,
        }
    }

    /// 64x64 input, 16 base channels.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            base_channels: 16,
            uniqueness_channels: 64,
            attribute_channels: 16,
            discriminator_base_channels: 16,
            normalization: Normalization::Instance,
            negative_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 4 != 0 {
            return Err(Error::Validation(format!(
                "input size {} must be a positive multiple of 4",
                self.input_size
            )));
        }
        if self.base_channels == 0
            || self.uniqueness_channels == 0
            || self.attribute_channels == 0
            || self.discriminator_base_channels == 0
        {
            return Err(Error::Validation("channel counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.negative_slope) {
            return Err(Error::Validation("negative slope must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.input_size / 4
    }

    pub fn layout(&self, schema: &AttributeSchema) -> Result<SlotLayout> {
        build_layout(
            schema,
            (self.latent_size(), self.latent_size()),
            self.uniqueness_channels,
            self.attribute_channels,
        )
    }

    /// Output grid after each strided discriminator stage.
    pub fn discriminator_grids(&self) -> Vec<usize> {
        let mut grids = Vec::new();
        let mut s = self.input_size;
        while grids.len() < MAX_DISCRIMINATOR_STAGES && s >= 2 {
            s = (s + 2 - 4) / 2 + 1;
            grids.push(s);
        }
        grids
    }

    /// Trainable parameter count, derived from the layer table alone.
    pub fn param_count(&self, schema: &AttributeSchema) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let norm = |c: usize| 2 * c;
        let residual = |cin: usize, cout: usize| {
            conv(cin, cout, 3) + norm(cout) + conv(cout, cout, 3) + norm(cout) + if cin != cout { conv(cin, cout, 1) } else { 0 }
        };
        let b = self.base_channels;
        let total = self.uniqueness_channels + self.attribute_channels * schema.n();
        let encoder = conv(3, b, 7) + norm(b) + conv(b, 2 * b, 3) + norm(2 * b) + conv(2 * b, 4 * b, 3) + norm(4 * b)
            + residual(4 * b, total);
        let deconv = |cin: usize, cout: usize| cin * cout * 9 + cout;
        let generator = conv(total, 4 * b, 7)
            + norm(4 * b)
            + 2 * residual(4 * b, 4 * b)
            + deconv(4 * b, 2 * b)
            + norm(2 * b)
            + deconv(2 * b, b)
            + norm(b)
            + conv(b, 3, 7);
        let d = self.discriminator_base_channels;
        let grids = self.discriminator_grids();
        let mut disc = 0;
        let mut cin = 3;
        for (i, &g) in grids.iter().enumerate() {
            let cout = d << i;
            disc += conv(cin, cout, 4);
            if i > 0 && g > 1 {
                disc += norm(cout);
            }
            cin = cout;
        }
        let last = *grids.last().unwrap_or(&self.input_size);
        disc += conv(cin, 1, last);
        encoder + generator + schema.m() * disc
    }
}

pub struct Encoder {
    stem: ConvBlock,
    down1: ConvBlock,
    down2: ConvBlock,
    res: Residual,
}

impl Encoder {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.stem.forward(x, mode)?.relu()?;
        let h = self.down1.forward(&h, mode)?.relu()?;
        let h = self.down2.forward(&h, mode)?.relu()?;
        self.res.forward(&h, mode)
    }

    fn collect(&self, out: &mut Named) {
        self.stem.collect("encoder.stem", out);
        self.down1.collect("encoder.down1", out);
        self.down2.collect("encoder.down2", out);
        self.res.collect("encoder.res", out);
    }

    fn norms<'a>(&'a self, out: &mut Vec<(String, &'a Norm)>) {
        self.stem.norms("encoder.stem", out);
        self.down1.norms("encoder.down1", out);
        self.down2.norms("encoder.down2", out);
        self.res.norms("encoder.res", out);
    }
}

pub struct Generator {
    stem: ConvBlock,
    res1: Residual,
    res2: Residual,
    up1: ConvTranspose2d,
    up1_norm: Norm,
    up2: ConvTranspose2d,
    up2_norm: Norm,
    head: Conv2d,
}

impl Generator {
    fn forward(&self, z: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.stem.forward(z, mode)?.relu()?;
        let h = self.res1.forward(&h, mode)?;
        let h = self.res2.forward(&h, mode)?;
        let h = self.up1_norm.forward(&self.up1.forward(&h)?, mode)?.relu()?;
        let h = self.up2_norm.forward(&self.up2.forward(&h)?, mode)?.relu()?;
        Ok(self.head.forward(&h)?.tanh()?)
    }

    fn collect(&self, out: &mut Named) {
        self.stem.collect("generator.stem", out);
        self.res1.collect("generator.res1", out);
        self.res2.collect("generator.res2", out);
        self.up1.collect("generator.up1", out);
        self.up1_norm.collect("generator.up1.norm", out);
        self.up2.collect("generator.up2", out);
        self.up2_norm.collect("generator.up2.norm", out);
        self.head.collect("generator.head", out);
    }

    fn norms<'a>(&'a self, out: &mut Vec<(String, &'a Norm)>) {
        self.stem.norms("generator.stem", out);
        self.res1.norms("generator.res1", out);
        self.res2.norms("generator.res2", out);
        out.push(("generator.up1.norm".into(), &self.up1_norm));
        out.push(("generator.up2.norm".into(), &self.up2_norm));
    }
}

pub struct Discriminator {
    stages: Vec<ConvBlock>,
    head: Conv2d,
    slope: f64,
}

impl Discriminator {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for stage in &self.stages {
            h = leaky_relu(&stage.forward(&h, mode)?, self.slope)?;
        }
        let logits = self.head.forward(&h)?;
        let n = logits.dims()[0];
        let p = sigmoid(&logits.reshape(n)?)?;
        Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS)?)
    }

    fn collect(&self, prefix: &str, out: &mut Named) {
        for (i, s) in self.stages.iter().enumerate() {
            s.collect(&format!("{prefix}.stage{i}"), out);
        }
        self.head.collect(&format!("{prefix}.head"), out);
    }

    fn norms<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Norm)>) {
        for (i, s) in self.stages.iter().enumerate() {
            s.norms(&format!("{prefix}.stage{i}"), out);
        }
    }
}

/// Which network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Network {
    Encoder,
    Generator,
    Discriminator(usize),
}

impl Network {
    pub fn of(name: &str) -> Option<Network> {
        if name.starts_with("encoder.") {
            Some(Network::Encoder)
        } else if name.starts_with("generator.") {
            Some(Network::Generator)
        } else {
            let rest = name.strip_prefix("discriminator.")?;
            let key = rest.split('.').next()?.parse().ok()?;
            Some(Network::Discriminator(key))
        }
    }
}

/// Encoder, generator and one discriminator per attribute value.
pub struct ModelParams {
    config: NetworkConfig,
    layout: SlotLayout,
    dtype: DType,
    device: Device,
    encoder: Encoder,
    generator: Generator,
    discriminators: Vec<Discriminator>,
}

impl std::fmt::Debug for ModelParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelParams")
            .field("config", &self.config)
            .field("layout", &self.layout)
            .field("dtype", &self.dtype)
            .field("discriminators", &self.discriminators.len())
            .finish()
    }
}

/// Builds all networks with weights drawn from `init_rng` (normal, std 0.02;
/// zero biases; unit norm scales).
pub fn build_models<R: Rng + ?Sized>(
    config: &NetworkConfig,
    schema: &AttributeSchema,
    init_rng: &mut R,
    dtype: DType,
    device: &Device,
) -> Result<ModelParams> {
    config.validate()?;
    let layout = config.layout(schema)?;
    let mut init = Init {
        rng: init_rng,
        dtype,
        device,
    };
    let norm = config.normalization;
    let b = config.base_channels;
    let total = layout.total_channels();
    let block = |init: &mut Init<'_, R>, cin, cout, k, s, p| -> Result<ConvBlock> {
        Ok(ConvBlock {
            conv: Conv2d::new(init, cin, cout, k, s, p)?,
            norm: Some(Norm::new(init, norm, cout)?),
        })
    };
    let encoder = Encoder {
        stem: block(&mut init, 3, b, 7, 1, 3)?,
        down1: block(&mut init, b, 2 * b, 3, 2, 1)?,
        down2: block(&mut init, 2 * b, 4 * b, 3, 2, 1)?,
        res: Residual::new(&mut init, norm, 4 * b, total)?,
    };
    let generator = Generator {
        stem: block(&mut init, total, 4 * b, 7, 1, 3)?,
        res1: Residual::new(&mut init, norm, 4 * b, 4 * b)?,
        res2: Residual::new(&mut init, norm, 4 * b, 4 * b)?,
        up1: ConvTranspose2d::upsample(&mut init, 4 * b, 2 * b)?,
        up1_norm: Norm::new(&mut init, norm, 2 * b)?,
        up2: ConvTranspose2d::upsample(&mut init, 2 * b, b)?,
        up2_norm: Norm::new(&mut init, norm, b)?,
        head: Conv2d::new(&mut init, b, 3, 7, 1, 3)?,
    };
    let grids = config.discriminator_grids();
    let last = *grids.last().unwrap_or(&config.input_size);
    let mut discriminators = Vec::with_capacity(schema.m());
    for _ in 0..schema.m() {
        let mut stages = Vec::with_capacity(grids.len());
        let mut cin = 3;
        for (i, &g) in grids.iter().enumerate() {
            let cout = config.discriminator_base_channels << i;
            let conv = Conv2d::new(&mut init, cin, cout, 4, 2, 1)?;
            let norm = if i > 0 && g > 1 { Some(Norm::new(&mut init, norm, cout)?) } else { None };
            stages.push(ConvBlock { conv, norm });
            cin = cout;
        }
        let head = Conv2d::new(&mut init, cin, 1, last, 1, 0)?;
        discriminators.push(Discriminator {
            stages,
            head,
            slope: config.negative_slope,
        });
    }
    Ok(ModelParams {
        config: config.clone(),
        layout,
        dtype,
        device: device.clone(),
        encoder,
        generator,
        discriminators,
    })
}

impl ModelParams {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layout(&self) -> &SlotLayout {
        &self.layout
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn discriminator_count(&self) -> usize {
        self.discriminators.len()
    }

    fn check_images(&self, images: &Tensor) -> Result<Tensor> {
        let s = self.config.input_size;
        match images.dims() {
            [_, 3, h, w] if *h == s && *w == s => Ok(images.to_dtype(self.dtype)?),
            dims => Err(Error::Shape(format!("expected N×3×{s}×{s} images, got {dims:?}"))),
        }
    }

    /// Images `N×3×S×S` in `[-1, 1]` to latents `N×C×S/4×S/4`.
    pub fn encode(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        let x = self.check_images(images)?;
        self.encoder.forward(&x, mode)
    }

    /// Latents to images in `[-1, 1]`.
    pub fn generate(&self, latent: &Tensor, mode: Mode) -> Result<Tensor> {
        let (h, w) = self.layout.spatial;
        let c = self.layout.total_channels();
        match latent.dims() {
            [_, lc, lh, lw] if *lc == c && *lh == h && *lw == w => {}
            dims => return Err(Error::Shape(format!("expected N×{c}×{h}×{w} latents, got {dims:?}"))),
        }
        self.generator.forward(&latent.to_dtype(self.dtype)?, mode)
    }

    /// One probability per image from the discriminator of global value `key`.
    pub fn discriminate(&self, key: usize, images: &Tensor, mode: Mode) -> Result<Tensor> {
        let d = self.discriminators.get(key).ok_or_else(|| {
            Error::Lookup(format!("no discriminator for value key {key} (m = {})", self.discriminators.len()))
        })?;
        let x = self.check_images(images)?;
        d.forward(&x, mode)
    }

    /// All trainable parameters, in a fixed order.
    pub fn named_params(&self) -> Named {
        let mut out = Vec::new();
        self.encoder.collect(&mut out);
        self.generator.collect(&mut out);
        for (k, d) in self.discriminators.iter().enumerate() {
            d.collect(&format!("discriminator.{k}"), &mut out);
        }
        out
    }

    pub fn params_of(&self, network: Network) -> Vec<Var> {
        self.named_params()
            .into_iter()
            .filter(|(n, _)| Network::of(n) == Some(network))
            .map(|(_, v)| v)
            .collect()
    }

    fn norms(&self) -> Vec<(String, &Norm)> {
        let mut out = Vec::new();
        self.encoder.norms(&mut out);
        self.generator.norms(&mut out);
        for (k, d) in self.discriminators.iter().enumerate() {
            d.norms(&format!("discriminator.{k}"), &mut out);
        }
        out
    }

    /// Batch-norm running statistics (empty under instance normalization).
    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        self.norms()
            .into_iter()
            .flat_map(|(name, n)| n.buffers(&name))
            .collect()
    }

    pub fn set_buffer_pair(&self, norm_name: &str, mean: Tensor, var: Tensor) -> Result<()> {
        let norms = self.norms();
        let (_, n) = norms
            .iter()
            .find(|(name, n)| name == norm_name && n.has_buffers())
            .ok_or_else(|| Error::Checkpoint(format!("no normalization buffers named `{norm_name}`")))?;
        n.set_buffers(mean.to_dtype(self.dtype)?, var.to_dtype(self.dtype)?);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// SHA-256 over names and little-endian f64 values of selected parameters.
    pub fn fingerprint_of(&self, filter: impl Fn(Network) -> bool) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.named_params() {
            if !Network::of(&name).is_some_and(&filter) {
                continue;
            }
            h.update(name.as_bytes());
            let vals: Vec<f64> = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            for v in vals {
                h.update(v.to_le_bytes());
            }
        }
        for (name, t) in self.buffers() {
            if !Network::of(&name).is_some_and(&filter) {
                continue;
            }
            h.update(name.as_bytes());
            let vals: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            for v in vals {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn fingerprint(&self) -> Result<String> {
        self.fingerprint_of(|_| true)
    }
}
