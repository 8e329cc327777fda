//! Procedural sprites: one colored shape on a gray background.
//!
//! Shape, color and size are driven by attribute labels through the render
//! map. Position, background shade and rotation are drawn from the random
//! source and recorded so an image can be re-rendered exactly.

use std::collections::BTreeMap;
use std::f32::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pixels::Pixels;
use crate::schema::AttributeSchema;

/// Labels as attribute name -> value name.
pub type Labels = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderParam {
    Shape(ShapeKind),
    Color([u8; 3]),
    /// Radius as a fraction of the image side.
    Radius(f32),
}

impl RenderParam {
    fn kind(&self) -> RenderKind {
        match self {
            RenderParam::Shape(_) => RenderKind::Shape,
            RenderParam::Color(_) => RenderKind::Color,
            RenderParam::Radius(_) => RenderKind::Radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderKind {
    Shape,
    Color,
    Radius,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterRange {
    /// Maximum absolute offset of the sprite center, in pixels.
    pub position: f32,
    /// Gray level range of the background, in `[0, 1]`.
    pub background: (f32, f32),
    /// Maximum absolute rotation in degrees.
    pub rotation: f32,
}

impl JitterRange {
    pub fn none() -> Self {
        Self {
            position: 0.0,
            background: (0.3, 0.3),
            rotation: 0.0,
        }
    }
}

/// Sample-specific parameters of one rendered sprite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub dx: f32,
    pub dy: f32,
    pub bg: f32,
    pub rot: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpriteConfig {
    pub image_size: usize,
    pub schema: AttributeSchema,
    pub render: BTreeMap<String, BTreeMap<String, RenderParam>>,
    pub jitter: JitterRange,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Pixels,
    pub labels: Labels,
    /// Recorded jitter, when the image came from the sprite generator.
    pub jitter: Option<Jitter>,
}

impl SpriteConfig {
    /// 2 shapes x 3 colors x 2 sizes at the given resolution.
    pub fn default_sprites(image_size: usize) -> Self {
        let schema = AttributeSchema::sprites();
        let mut render = BTreeMap::new();
        render.insert(
            "shape".to_string(),
            BTreeMap::from([
                ("circle".to_string(), RenderParam::Shape(ShapeKind::Circle)),
                ("square".to_string(), RenderParam::Shape(ShapeKind::Square)),
            ]),
        );
        render.insert(
            "color".to_string(),
            BTreeMap::from([
                ("red".to_string(), RenderParam::Color([220, 40, 40])),
                ("green".to_string(), RenderParam::Color([40, 200, 40])),
                ("blue".to_string(), RenderParam::Color([40, 60, 230])),
            ]),
        );
        render.insert(
            "size".to_string(),
            BTreeMap::from([
                ("small".to_string(), RenderParam::Radius(0.12)),
                ("large".to_string(), RenderParam::Radius(0.2)),
            ]),
        );
        Self {
            image_size,
            schema,
            render,
            jitter: JitterRange {
                position: image_size as f32 * 0.125,
                background: (0.15, 0.45),
                rotation: 15.0,
            },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Validation(format!(
                "image_size {} is below the minimum of 16",
                self.image_size
            )));
        }
        let j = &self.jitter;
        if !(j.position >= 0.0 && j.rotation >= 0.0) {
            return Err(Error::Validation("jitter ranges must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&j.background.0)
            || !(0.0..=1.0).contains(&j.background.1)
            || j.background.0 > j.background.1
        {
            return Err(Error::Validation("background range must be an ordered pair in [0, 1]".into()));
        }
        let mut seen_kinds = Vec::new();
        for attr in self.schema.attributes() {
            let params = self.render.get(&attr.name).ok_or_else(|| {
                Error::Validation(format!("no render parameters for attribute `{}`", attr.name))
            })?;
            let mut kind = None;
            for value in &attr.values {
                let p = params.get(value).ok_or_else(|| {
                    Error::Validation(format!("no render parameter for `{}`={value}", attr.name))
                })?;
                if let RenderParam::Radius(r) = p {
                    if !(*r > 0.0 && *r < 0.5) {
                        return Err(Error::Validation(format!("radius {r} outside (0, 0.5)")));
                    }
                }
                match kind {
                    None => kind = Some(p.kind()),
                    Some(k) if k != p.kind() => {
                        return Err(Error::Validation(format!(
                            "attribute `{}` mixes render parameter kinds",
                            attr.name
                        )))
                    }
                    _ => {}
                }
            }
            let kind = kind.expect("at least two values");
            if seen_kinds.contains(&kind) {
                return Err(Error::Validation(format!(
                    "render kind {kind:?} is controlled by more than one attribute"
                )));
            }
            seen_kinds.push(kind);
        }
        Ok(())
    }

    /// The attribute controlling `kind`, if any.
    pub fn attribute_for(&self, kind: RenderKind) -> Option<usize> {
        self.schema.attributes().iter().position(|a| {
            self.render
                .get(&a.name)
                .and_then(|p| p.values().next())
                .is_some_and(|p| p.kind() == kind)
        })
    }

    pub(crate) fn param(&self, attr: usize, value: usize) -> RenderParam {
        let a = &self.schema.attributes()[attr];
        self.render[&a.name][&a.values[value]]
    }

    /// Resolves a label map to per-attribute value indices.
    pub fn label_indices(&self, labels: &Labels) -> Result<Vec<usize>> {
        label_indices(&self.schema, labels)
    }

    fn resolve(&self, labels: &Labels) -> Result<(ShapeKind, [u8; 3], f32)> {
        let idx = self.label_indices(labels)?;
        let mut shape = ShapeKind::Circle;
        let mut color = [255, 255, 255];
        let mut radius = 0.2;
        for (attr, &value) in idx.iter().enumerate() {
            match self.param(attr, value) {
                RenderParam::Shape(s) => shape = s,
                RenderParam::Color(c) => color = c,
                RenderParam::Radius(r) => radius = r,
            }
        }
        Ok((shape, color, radius))
    }

    /// Draws jitter from `rng`; always consumes exactly four draws.
    pub fn draw_jitter<R: Rng + ?Sized>(&self, rng: &mut R) -> Jitter {
        let j = &self.jitter;
        let mut span = |lo: f32, hi: f32| lo + rng.gen::<f32>() * (hi - lo);
        Jitter {
            dx: span(-j.position, j.position),
            dy: span(-j.position, j.position),
            bg: span(j.background.0, j.background.1),
            rot: span(-j.rotation, j.rotation),
        }
    }

    /// Deterministic render of `labels` under explicit jitter.
    pub fn render(&self, labels: &Labels, jitter: &Jitter) -> Result<Pixels> {
        let (shape, color, radius) = self.resolve(labels)?;
        let s = self.image_size;
        let r = radius * s as f32;
        // equal-area square so that size does not depend on shape
        let half_side = r * PI.sqrt() / 2.0;
        let cx = s as f32 / 2.0 + jitter.dx;
        let cy = s as f32 / 2.0 + jitter.dy;
        let (sin, cos) = jitter.rot.to_radians().sin_cos();
        let bg = (jitter.bg * 255.0).round();
        const SUB: usize = 4;
        let mut raw = Vec::with_capacity(s * s * 3);
        for y in 0..s {
            for x in 0..s {
                let mut hits = 0usize;
                for sy in 0..SUB {
                    for sx in 0..SUB {
                        let px = x as f32 + (sx as f32 + 0.5) / SUB as f32 - cx;
                        let py = y as f32 + (sy as f32 + 0.5) / SUB as f32 - cy;
                        let u = cos * px + sin * py;
                        let v = -sin * px + cos * py;
                        let inside = match shape {
                            ShapeKind::Circle => u * u + v * v <= r * r,
                            ShapeKind::Square => u.abs() <= half_side && v.abs() <= half_side,
                        };
                        hits += inside as usize;
                    }
                }
                let cover = hits as f32 / (SUB * SUB) as f32;
                for c in color {
                    let v = bg * (1.0 - cover) + c as f32 * cover;
                    raw.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        let img = image::RgbImage::from_raw(s as u32, s as u32, raw).expect("buffer sized");
        Pixels::from_rgb8(&img)
    }
}

pub fn label_indices(schema: &AttributeSchema, labels: &Labels) -> Result<Vec<usize>> {
    if labels.len() != schema.n() {
        for key in labels.keys() {
            schema.attr_index(key)?;
        }
    }
    schema
        .attributes()
        .iter()
        .map(|a| {
            let v = labels
                .get(&a.name)
                .ok_or_else(|| Error::Validation(format!("missing label for attribute `{}`", a.name)))?;
            Ok(schema.value_index(&a.name, v)?.value)
        })
        .collect()
}

/// Renders one sprite with jitter drawn from `rng`.
pub fn generate_sprite<R: Rng + ?Sized>(
    config: &SpriteConfig,
    labels: &Labels,
    rng: &mut R,
) -> Result<LabeledImage> {
    config.label_indices(labels)?;
    let jitter = config.draw_jitter(rng);
    let pixels = config.render(labels, &jitter)?;
    Ok(LabeledImage {
        pixels,
        labels: labels.clone(),
        jitter: Some(jitter),
    })
}
