//! On-disk sprite datasets: `images/*.png`, `manifest.jsonl`, `schema.json`
//! and the generating `sprites.json`.
//!
//! The first manifest line is a header naming the schema file and its
//! fingerprint; every following line is one record.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pixels::{self, Pixels};
use crate::schema::AttributeSchema;

use super::sprite::{generate_sprite, label_indices, Jitter, LabeledImage, Labels, SpriteConfig};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SCHEMA_FILE: &str = "schema.json";
pub const SPRITE_CONFIG_FILE: &str = "sprites.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    schema_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sprite_config: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub path: String,
    pub labels: Labels,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter: Option<Jitter>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    root: PathBuf,
    schema: AttributeSchema,
    sprite_config: Option<SpriteConfig>,
    records: Vec<ManifestRecord>,
    labels: Vec<Vec<usize>>,
    // record indices per global value index
    by_value: Vec<Vec<usize>>,
}

impl DatasetManifest {
    fn assemble(
        root: PathBuf,
        schema: AttributeSchema,
        sprite_config: Option<SpriteConfig>,
        records: Vec<ManifestRecord>,
    ) -> Result<Self> {
        let mut labels = Vec::with_capacity(records.len());
        let mut by_value = vec![Vec::new(); schema.m()];
        let mut seen = HashSet::new();
        for (i, rec) in records.iter().enumerate() {
            // header occupies line 1
            let line = i + 2;
            let idx = label_indices(&schema, &rec.labels).map_err(|e| Error::MalformedRecord {
                line,
                reason: format!("record `{}`: {e}", rec.path),
            })?;
            if !seen.insert(rec.path.clone()) {
                return Err(Error::MalformedRecord {
                    line,
                    reason: format!("duplicate path `{}`", rec.path),
                });
            }
            for (a, &v) in idx.iter().enumerate() {
                by_value[schema.index_at(a, v)?.global].push(i);
            }
            labels.push(idx);
        }
        Ok(Self {
            root,
            schema,
            sprite_config,
            records,
            labels,
            by_value,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn sprite_config(&self) -> Option<&SpriteConfig> {
        self.sprite_config.as_ref()
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Value index per attribute for record `i`.
    pub fn labels_of(&self, i: usize) -> &[usize] {
        &self.labels[i]
    }

    /// Record count per global value index.
    pub fn counts(&self) -> Vec<usize> {
        self.by_value.iter().map(Vec::len).collect()
    }

    /// Records carrying the given global value.
    pub fn records_with(&self, global: usize) -> &[usize] {
        &self.by_value[global]
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.records[i].path)
    }

    pub fn load_image(&self, i: usize) -> Result<LabeledImage> {
        let rec = &self.records[i];
        Ok(LabeledImage {
            pixels: Pixels::load_png(&self.image_path(i))?,
            labels: rec.labels.clone(),
            jitter: rec.jitter,
        })
    }

    /// Resolves an `(attribute, value)` filter to its record subset.
    pub fn filtered(&self, filter: Option<(&str, &str)>) -> Result<Vec<usize>> {
        match filter {
            None => Ok((0..self.records.len()).collect()),
            Some((a, v)) => {
                let idx = self
                    .schema
                    .value_index(a, v)
                    .map_err(|e| Error::Sampling(format!("filter {a}={v}: {e}")))?;
                Ok(self.by_value[idx.global].clone())
            }
        }
    }

    /// Writes the manifest and schema into `self.root()`.
    pub fn write(&self) -> Result<()> {
        let schema_path = self.root.join(SCHEMA_FILE);
        fs::write(&schema_path, self.schema.to_json()).map_err(|e| Error::io(&schema_path, e))?;
        if let Some(cfg) = &self.sprite_config {
            let p = self.root.join(SPRITE_CONFIG_FILE);
            fs::write(&p, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&p, e))?;
        }
        let path = self.root.join(MANIFEST_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let header = Header {
            schema: SCHEMA_FILE.into(),
            schema_sha256: self.schema.fingerprint(),
            sprite_config: self.sprite_config.as_ref().map(|_| SPRITE_CONFIG_FILE.into()),
        };
        let mut emit = |line: String| writeln!(w, "{line}").map_err(|e| Error::io(&path, e));
        emit(serde_json::to_string(&header)?)?;
        for rec in &self.records {
            emit(serde_json::to_string(rec)?)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

/// Every full label combination, in schema order with the last attribute
/// varying fastest.
pub fn combinations(schema: &AttributeSchema) -> Vec<Labels> {
    let mut out = vec![Labels::new()];
    for attr in schema.attributes() {
        out = out
            .into_iter()
            .flat_map(|l| {
                attr.values.iter().map(move |v| {
                    let mut l = l.clone();
                    l.insert(attr.name.clone(), v.clone());
                    l
                })
            })
            .collect();
    }
    out
}

/// Renders `count_per_combination` sprites for every label combination.
///
/// Record `i` uses stream `i` of a generator seeded with `config.seed`, so
/// records are independent of one another.
pub fn build_dataset(config: &SpriteConfig, count_per_combination: usize, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let combos = combinations(&config.schema);
    let mut records = Vec::with_capacity(combos.len() * count_per_combination);
    if count_per_combination > 0 {
        let images = out_dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    }
    for labels in &combos {
        for _ in 0..count_per_combination {
            let i = records.len();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let img = generate_sprite(config, labels, &mut rng)?;
            let rel = format!("images/{i:06}.png");
            img.pixels.save_png(&out_dir.join(&rel))?;
            records.push(ManifestRecord {
                path: rel,
                labels: labels.clone(),
                jitter: img.jitter,
            });
        }
    }
    let manifest = DatasetManifest::assemble(out_dir.to_path_buf(), config.schema.clone(), Some(config.clone()), records)?;
    manifest.write()?;
    Ok(manifest)
}

/// Loads `manifest.jsonl` (or a directory containing it).
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::MalformedRecord {
            line: 1,
            reason: "missing header".into(),
        })?
        .map_err(|e| Error::io(&path, e))?;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::MalformedRecord {
        line: 1,
        reason: format!("bad header: {e}"),
    })?;
    let schema_path = root.join(&header.schema);
    let schema_text = fs::read_to_string(&schema_path).map_err(|e| Error::io(&schema_path, e))?;
    let schema = AttributeSchema::from_json(&schema_text)?;
    if schema.fingerprint() != header.schema_sha256 {
        return Err(Error::SchemaMismatch(format!(
            "{} does not match the schema the manifest was written against",
            schema_path.display()
        )));
    }
    let sprite_config = match &header.sprite_config {
        Some(name) => {
            let p = root.join(name);
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let cfg: SpriteConfig = serde_json::from_str(&text)?;
            if cfg.schema != schema {
                return Err(Error::SchemaMismatch(format!("{} uses a different schema", p.display())));
            }
            Some(cfg)
        }
        None => None,
    };
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: line_no,
            reason: e.to_string(),
        })?;
        records.push(rec);
    }
    DatasetManifest::assemble(root, schema, sprite_config, records)
}

/// Uniform sampling with replacement from the filtered subset.
pub fn sample_indices<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    subset: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if subset.is_empty() {
        return Err(Error::Sampling("no records match the requested domain".into()));
    }
    debug_assert!(subset.iter().all(|&i| i < manifest.len()));
    Ok((0..batch_size).map(|_| subset[rng.gen_range(0..subset.len())]).collect())
}

pub fn sample_batch<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    filter: Option<(&str, &str)>,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<LabeledImage>> {
    let subset = manifest.filtered(filter)?;
    let picks = sample_indices(manifest, &subset, batch_size, rng)?;
    picks.into_iter().map(|i| manifest.load_image(i)).collect()
}

/// All images of a manifest decoded once and kept as one `N×3×S×S` tensor.
#[derive(Debug, Clone)]
pub struct ImageBank {
    images: Tensor,
}

impl ImageBank {
    pub fn load(manifest: &DatasetManifest, dtype: DType, device: &Device) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::Validation("cannot bank an empty manifest".into()));
        }
        let pix: Vec<Pixels> = (0..manifest.len())
            .map(|i| Pixels::load_png(&manifest.image_path(i)))
            .collect::<Result<_>>()?;
        let refs: Vec<&Pixels> = pix.iter().collect();
        Ok(Self {
            images: pixels::to_tensor(&refs, dtype, device)?,
        })
    }

    pub fn image_size(&self) -> usize {
        self.images.dims()[2]
    }

    pub fn len(&self) -> usize {
        self.images.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let idx = Tensor::from_vec(idx, indices.len(), self.images.device())?;
        Ok(self.images.index_select(&idx, 0)?)
    }
}

/// Per-value counts keyed by `attribute/value`, for reports.
pub fn named_counts(manifest: &DatasetManifest) -> BTreeMap<String, usize> {
    let schema = manifest.schema();
    schema
        .all_values()
        .map(|v| {
            (
                format!("{}/{}", schema.attribute_name(v.attr), schema.value_name(v)),
                manifest.records_with(v.global).len(),
            )
        })
        .collect()
}
