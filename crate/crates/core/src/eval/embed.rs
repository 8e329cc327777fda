use std::path::Path;

use candle_core::{DType, Tensor};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::nets::{Mode, ModelParams};
use crate::pixels::{self, Pixels};
use crate::slots::{encode_code, transfer_domain, AverageVectorRegistry};

use super::probes::split_indices;

/// Nearest class centroid under per-dimension standardization.
///
/// Scaling statistics come from the fitting data, which makes predictions
/// invariant to any positive per-dimension affine map of the vectors.
#[derive(Debug, Clone)]
pub struct NearestCentroid {
    mean: Vec<f64>,
    scale: Vec<f64>,
    centroids: Vec<Option<Vec<f64>>>,
}

impl NearestCentroid {
    pub fn fit(vectors: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Self> {
        if vectors.is_empty() || vectors.len() != labels.len() {
            return Err(Error::Validation("need one label per vector and at least one vector".into()));
        }
        let d = vectors[0].len();
        let n = vectors.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = vectors.iter().map(|v| (v[j] - mean[j]).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        let mut sums = vec![vec![0.0; d]; classes];
        let mut counts = vec![0usize; classes];
        for (v, &l) in vectors.iter().zip(labels) {
            if l >= classes {
                return Err(Error::Validation(format!("label {l} outside {classes} classes")));
            }
            counts[l] += 1;
            for j in 0..d {
                sums[l][j] += (v[j] - mean[j]) / scale[j];
            }
        }
        let centroids = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|x| x / c as f64).collect()))
            .collect();
        Ok(Self { mean, scale, centroids })
    }

    pub fn predict(&self, v: &[f64]) -> usize {
        let z: Vec<f64> = v.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) / s).collect();
        let mut best = (f64::INFINITY, 0);
        for (k, c) in self.centroids.iter().enumerate() {
            if let Some(c) = c {
                let d: f64 = c.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
        }
        best.1
    }

    pub fn accuracy(&self, vectors: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = vectors.iter().zip(labels).filter(|(v, &l)| self.predict(v) == l).count();
        hits as f64 / vectors.len().max(1) as f64
    }
}

/// First two principal components of the rows of `data`, with each axis
/// signed so its largest loading is positive.
pub fn pca_2d(data: &[Vec<f64>]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if data.is_empty() {
        return Err(Error::Validation("no vectors to project".into()));
    }
    let d = data[0].len();
    let n = data.len();
    let mean: Vec<f64> = (0..d).map(|j| data.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = DMatrix::zeros(d, 2);
    for (col, &k) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(k).clone_owned();
        let (imax, _) = v.iter().enumerate().fold((0, 0.0f64), |acc, (i, x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc });
        if v[imax] < 0.0 {
            v = -v;
        }
        axes.set_column(col, &v);
    }
    Ok((mean, axes))
}

/// Coordinates of `v` on the axes from [`pca_2d`].
pub fn project(mean: &[f64], axes: &DMatrix<f64>, v: &[f64]) -> (f64, f64) {
    let mut xy = [0.0; 2];
    for (c, out) in xy.iter_mut().enumerate() {
        *out = v.iter().zip(mean).enumerate().map(|(j, (x, m))| (x - m) * axes[(j, c)]).sum();
    }
    (xy[0], xy[1])
}

#[derive(Debug, Clone, Serialize)]
pub struct EmbeddingPoint {
    pub x: f64,
    pub y: f64,
    pub value: String,
    /// `real` or `translated`.
    pub origin: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct EmbeddingReport {
    pub attribute: String,
    pub pooling: &'static str,
    pub real_points: usize,
    pub translated_points: usize,
    /// Held-out nearest-centroid accuracy of real slots, in the full slot space.
    pub separation_real: f64,
    /// Share of translated slots assigned to their target value.
    pub separation_translated: Option<f64>,
    #[serde(skip)]
    pub points: Vec<EmbeddingPoint>,
}

/// Mean over the latent grid of one attribute slot, one vector per image.
pub fn pooled_slots(models: &ModelParams, images: &Tensor, attr: usize) -> Result<Vec<Vec<f64>>> {
    let code = encode_code(models, images, Mode::Eval)?;
    let pooled = code.slot(attr)?.mean(3)?.mean(2)?.to_dtype(DType::F64)?;
    Ok(pooled.to_vec2()?)
}

const EMBED_BATCH: usize = 32;

fn pooled_for(models: &ModelParams, manifest: &DatasetManifest, picks: &[usize], attr: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(picks.len());
    for chunk in picks.chunks(EMBED_BATCH) {
        let imgs: Vec<Pixels> = chunk.iter().map(|&i| Pixels::load_png(&manifest.image_path(i))).collect::<Result<_>>()?;
        let refs: Vec<&Pixels> = imgs.iter().collect();
        let x = pixels::to_tensor(&refs, models.dtype(), models.device())?;
        out.extend(pooled_slots(models, &x, attr)?);
    }
    Ok(out)
}

/// Slot embeddings of `attribute` for up to `limit` real images and, when a
/// registry is given, for domain translations of held-out images to random
/// other values. Writes `x,y,value,origin` rows to `out_path` if given.
pub fn export_embeddings(
    models: &ModelParams,
    registry: Option<&AverageVectorRegistry>,
    manifest: &DatasetManifest,
    attribute: &str,
    limit: usize,
    seed: u64,
    out_path: Option<&Path>,
) -> Result<EmbeddingReport> {
    let schema = manifest.schema();
    let attr = schema.attr_index(attribute)?;
    let classes = schema.attributes()[attr].values.len();
    let (train_all, held_all) = split_indices(manifest.len(), seed);
    let share = |v: &[usize], frac: f64| -> Vec<usize> {
        let k = ((limit as f64 * frac).ceil() as usize).min(v.len());
        v[..k].to_vec()
    };
    let train = share(&train_all, 0.8);
    let held = share(&held_all, 0.2);
    if train.is_empty() || held.is_empty() {
        return Err(Error::Validation("too few images for a held-out separation score".into()));
    }
    let label = |i: usize| manifest.labels_of(i)[attr];
    let train_vecs = pooled_for(models, manifest, &train, attr)?;
    let train_labels: Vec<usize> = train.iter().map(|&i| label(i)).collect();
    let held_vecs = pooled_for(models, manifest, &held, attr)?;
    let held_labels: Vec<usize> = held.iter().map(|&i| label(i)).collect();
    let clf = NearestCentroid::fit(&train_vecs, &train_labels, classes)?;
    let separation_real = clf.accuracy(&held_vecs, &held_labels);

    let mut translated = Vec::new();
    if let Some(reg) = registry {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let targets: Vec<usize> = held.iter().map(|&i| (label(i) + rng.gen_range(1..classes.max(2))) % classes).collect();
        for (chunk, tchunk) in held.chunks(EMBED_BATCH).zip(targets.chunks(EMBED_BATCH)) {
            for (&i, &t) in chunk.iter().zip(tchunk) {
                let img = Pixels::load_png(&manifest.image_path(i))?;
                let x = pixels::to_tensor(&[&img], models.dtype(), models.device())?;
                let xt = transfer_domain(models, reg, &x, schema.index_at(attr, t)?)?;
                translated.push((pooled_slots(models, &xt, attr)?.remove(0), t));
            }
        }
    }
    let separation_translated = (!translated.is_empty()).then(|| {
        let (v, l): (Vec<_>, Vec<_>) = translated.iter().cloned().unzip();
        clf.accuracy(&v, &l)
    });

    let real: Vec<(Vec<f64>, usize)> = train_vecs
        .into_iter()
        .zip(train_labels)
        .chain(held_vecs.into_iter().zip(held_labels))
        .collect();
    let (mean, axes) = pca_2d(&real.iter().map(|(v, _)| v.clone()).collect::<Vec<_>>())?;
    let name = |k: usize| schema.attributes()[attr].values[k].clone();
    let mut points = Vec::with_capacity(real.len() + translated.len());
    for (origin, set) in [("real", &real), ("translated", &translated)] {
        for (v, l) in set {
            let (x, y) = project(&mean, &axes, v);
            points.push(EmbeddingPoint {
                x,
                y,
                value: name(*l),
                origin,
            });
        }
    }
    if let Some(path) = out_path {
        let mut text = String::from("x,y,value,origin\n");
        for p in &points {
            text.push_str(&format!("{},{},{},{}\n", p.x, p.y, p.value, p.origin));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(EmbeddingReport {
        attribute: attribute.to_string(),
        pooling: "mean over the latent grid",
        real_points: real.len(),
        translated_points: translated.len(),
        separation_real,
        separation_translated,
        points,
    })
}
