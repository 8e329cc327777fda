//! Analytic label reader for sprite images.
//!
//! Works on any image in `[-1, 1]`, including generated ones. The sprite is
//! found through saturation (the background is gray), then:
//! - color: nearest configured chroma of the fully covered pixels,
//! - size: coverage-weighted area, nearest configured area in log space,
//! - shape: magnitude of the fourth-order complex moment of the coverage map
//!   (zero for a disc, about 0.43 for a square); its phase gives the rotation.

use std::f64::consts::PI;

use crate::pixels::Pixels;

use super::sprite::{Jitter, RenderKind, RenderParam, ShapeKind, SpriteConfig};

/// Square vs. disc threshold on the normalized fourth-order moment.
const SQUARENESS_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct SpriteOracle {
    image_size: usize,
    n: usize,
    shape: Option<(usize, Vec<ShapeKind>)>,
    color: Option<(usize, Vec<[f64; 3]>)>,
    size: Option<(usize, Vec<f64>)>,
}

/// Jitter re-estimated from pixels. `rot` is only observable for squares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterEstimate {
    pub dx: f32,
    pub dy: f32,
    pub bg: f32,
    pub rot: Option<f32>,
}

#[derive(Debug, Clone, Copy)]
struct Moments {
    area: f64,
    cx: f64,
    cy: f64,
    squareness: f64,
    phase: f64,
    bg: f64,
}

fn chroma(rgb: [f64; 3]) -> [f64; 3] {
    let mean = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
    [rgb[0] - mean, rgb[1] - mean, rgb[2] - mean]
}

fn saturation(rgb: [f64; 3]) -> f64 {
    rgb.iter().cloned().fold(f64::MIN, f64::max) - rgb.iter().cloned().fold(f64::MAX, f64::min)
}

impl SpriteOracle {
    pub fn new(config: &SpriteConfig) -> Self {
        let schema = &config.schema;
        let values = |attr: usize| -> Vec<RenderParam> {
            (0..schema.attributes()[attr].values.len())
                .map(|v| config.param(attr, v))
                .collect()
        };
        let shape = config.attribute_for(RenderKind::Shape).map(|a| {
            let kinds = values(a)
                .into_iter()
                .map(|p| match p {
                    RenderParam::Shape(s) => s,
                    _ => unreachable!("validated render kind"),
                })
                .collect();
            (a, kinds)
        });
        let color = config.attribute_for(RenderKind::Color).map(|a| {
            let colors = values(a)
                .into_iter()
                .map(|p| match p {
                    RenderParam::Color(c) => c.map(|v| v as f64 / 255.0),
                    _ => unreachable!("validated render kind"),
                })
                .collect();
            (a, colors)
        });
        let size = config.attribute_for(RenderKind::Radius).map(|a| {
            let s = config.image_size as f64;
            let areas = values(a)
                .into_iter()
                .map(|p| match p {
                    RenderParam::Radius(r) => PI * (r as f64 * s).powi(2),
                    _ => unreachable!("validated render kind"),
                })
                .collect();
            (a, areas)
        });
        Self {
            image_size: config.image_size,
            n: schema.n(),
            shape,
            color,
            size,
        }
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Attributes this oracle can read.
    pub fn readable(&self) -> Vec<usize> {
        let mut v: Vec<usize> = [
            self.shape.as_ref().map(|s| s.0),
            self.color.as_ref().map(|c| c.0),
            self.size.as_ref().map(|s| s.0),
        ]
        .into_iter()
        .flatten()
        .collect();
        v.sort_unstable();
        v
    }

    fn palette(&self) -> Vec<[f64; 3]> {
        self.color
            .as_ref()
            .map(|(_, c)| c.clone())
            .unwrap_or_else(|| vec![[1.0, 1.0, 1.0]])
    }

    fn moments(&self, img: &Pixels) -> (Moments, usize) {
        let s = img.size();
        let palette = self.palette();
        let min_sat = palette.iter().map(|&c| saturation(c)).fold(f64::MAX, f64::min).max(1e-3);
        let rgb_at = |y: usize, x: usize| img.get(y, x).map(|v| (v as f64 + 1.0) / 2.0);

        // pass 1: color from clearly saturated pixels
        let mut sum = [0f64; 3];
        let mut count = 0usize;
        for y in 0..s {
            for x in 0..s {
                let p = rgb_at(y, x);
                if saturation(p) >= 0.5 * min_sat {
                    for c in 0..3 {
                        sum[c] += p[c];
                    }
                    count += 1;
                }
            }
        }
        let mean_chroma = if count == 0 {
            [0.0; 3]
        } else {
            chroma(sum.map(|v| v / count as f64))
        };
        let color_idx = palette
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let d: f64 = chroma(c).iter().zip(&mean_chroma).map(|(a, b)| (a - b).powi(2)).sum();
                (i, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let sat_ref = saturation(palette[color_idx]).max(1e-3);

        // pass 2: coverage map
        let mut cover = vec![0f64; s * s];
        let (mut area, mut mx, mut my) = (0.0, 0.0, 0.0);
        let (mut bg_sum, mut bg_n) = (0.0, 0usize);
        for y in 0..s {
            for x in 0..s {
                let p = rgb_at(y, x);
                let mut c = (saturation(p) / sat_ref).min(1.0);
                if c < 0.2 {
                    c = 0.0;
                }
                if c < 0.05 {
                    bg_sum += (p[0] + p[1] + p[2]) / 3.0;
                    bg_n += 1;
                }
                cover[y * s + x] = c;
                area += c;
                mx += c * (x as f64 + 0.5);
                my += c * (y as f64 + 0.5);
            }
        }
        let (cx, cy) = if area > 0.0 {
            (mx / area, my / area)
        } else {
            (s as f64 / 2.0, s as f64 / 2.0)
        };
        let (mut re, mut im, mut norm) = (0.0, 0.0, 0.0);
        for y in 0..s {
            for x in 0..s {
                let c = cover[y * s + x];
                if c == 0.0 {
                    continue;
                }
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let r2 = dx * dx + dy * dy;
                // (dx + i dy)^4
                let a = dx * dx - dy * dy;
                let b = 2.0 * dx * dy;
                re += c * (a * a - b * b);
                im += c * (2.0 * a * b);
                norm += c * r2 * r2;
            }
        }
        let squareness = if norm > 0.0 { (re * re + im * im).sqrt() / norm } else { 0.0 };
        let moments = Moments {
            area,
            cx,
            cy,
            squareness,
            phase: im.atan2(re),
            bg: if bg_n > 0 { bg_sum / bg_n as f64 } else { 0.0 },
        };
        (moments, color_idx)
    }

    /// Value index per attribute. Attributes the oracle cannot read get 0.
    pub fn classify(&self, img: &Pixels) -> Vec<usize> {
        let (m, color_idx) = self.moments(img);
        let mut out = vec![0; self.n];
        if let Some((a, _)) = &self.color {
            out[*a] = color_idx;
        }
        if let Some((a, areas)) = &self.size {
            let la = m.area.max(1e-6).ln();
            out[*a] = areas
                .iter()
                .enumerate()
                .min_by(|x, y| (x.1.ln() - la).abs().total_cmp(&(y.1.ln() - la).abs()))
                .map(|(i, _)| i)
                .unwrap_or(0);
        }
        if let Some((a, kinds)) = &self.shape {
            let want = if m.squareness > SQUARENESS_THRESHOLD {
                ShapeKind::Square
            } else {
                ShapeKind::Circle
            };
            out[*a] = kinds.iter().position(|&k| k == want).unwrap_or(0);
        }
        out
    }

    /// Position, background and (for squares) rotation of the sprite.
    pub fn estimate_jitter(&self, img: &Pixels) -> JitterEstimate {
        let (m, _) = self.moments(img);
        let half = img.size() as f64 / 2.0;
        let rot = (m.squareness > SQUARENESS_THRESHOLD).then(|| {
            // a square at angle t has fourth-moment phase pi + 4t
            let mut t = (m.phase - PI) / 4.0;
            let quarter = PI / 2.0;
            while t <= -quarter / 2.0 {
                t += quarter;
            }
            while t > quarter / 2.0 {
                t -= quarter;
            }
            t.to_degrees() as f32
        });
        JitterEstimate {
            dx: (m.cx - half) as f32,
            dy: (m.cy - half) as f32,
            bg: m.bg as f32,
            rot,
        }
    }

    /// Jitter error against recorded ground truth: (position px, background, rotation deg).
    pub fn jitter_error(&self, img: &Pixels, truth: &Jitter) -> (f64, f64, Option<f64>) {
        let est = self.estimate_jitter(img);
        let pos = (((est.dx - truth.dx) as f64).powi(2) + ((est.dy - truth.dy) as f64).powi(2)).sqrt();
        let bg = (est.bg - truth.bg).abs() as f64;
        let rot = est.rot.map(|r| {
            let mut d = (r - truth.rot) as f64;
            while d > 45.0 {
                d -= 90.0;
            }
            while d < -45.0 {
                d += 90.0;
            }
            d.abs()
        });
        (pos, bg, rot)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::sprite::{generate_sprite, JitterRange, Labels};

    fn all_labels(cfg: &SpriteConfig) -> Vec<(Labels, Vec<usize>)> {
        let schema = &cfg.schema;
        let mut out = vec![(Labels::new(), vec![])];
        for attr in schema.attributes() {
            out = out
                .into_iter()
                .flat_map(|(l, idx)| {
                    attr.values.iter().enumerate().map(move |(vi, v)| {
                        let mut l = l.clone();
                        l.insert(attr.name.clone(), v.clone());
                        let mut idx = idx.clone();
                        idx.push(vi);
                        (l, idx)
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn reads_every_combination_without_jitter() {
        for size in [32, 64] {
            let cfg = SpriteConfig {
                jitter: JitterRange::none(),
                ..SpriteConfig::default_sprites(size)
            };
            let oracle = SpriteOracle::new(&cfg);
            assert_eq!(oracle.readable(), vec![0, 1, 2]);
            for (labels, idx) in all_labels(&cfg) {
                let img = generate_sprite(&cfg, &labels, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
                assert_eq!(oracle.classify(&img.pixels), idx, "size {size}: {labels:?}");
            }
        }
    }

    #[test]
    fn reads_jittered_sprites_and_recovers_jitter() {
        for size in [32, 64] {
            let cfg = SpriteConfig::default_sprites(size);
            let oracle = SpriteOracle::new(&cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for (labels, idx) in all_labels(&cfg) {
                for _ in 0..20 {
                    let img = generate_sprite(&cfg, &labels, &mut rng).unwrap();
                    assert_eq!(oracle.classify(&img.pixels), idx, "size {size}: {labels:?}");
                    let truth = img.jitter.unwrap();
                    let (pos, bg, rot) = oracle.jitter_error(&img.pixels, &truth);
                    assert!(pos < 0.3, "position error {pos}");
                    assert!(bg < 0.01, "background error {bg}");
                    if labels["shape"] == "square" {
                        let rot = rot.expect("square rotation observable");
                        let tol = if labels["size"] == "small" && size == 32 { 6.0 } else { 3.0 };
                        assert!(rot < tol, "rotation error {rot} for {labels:?} at {size}");
                    } else {
                        assert!(rot.is_none());
                    }
                }
            }
        }
    }

    #[test]
    fn blank_image_does_not_panic() {
        let cfg = SpriteConfig::default_sprites(32);
        let oracle = SpriteOracle::new(&cfg);
        let img = Pixels::filled(32, [0.0, 0.0, 0.0]);
        assert_eq!(oracle.classify(&img).len(), 3);
        let est = oracle.estimate_jitter(&img);
        assert_eq!((est.dx, est.dy), (0.0, 0.0));
    }
}
