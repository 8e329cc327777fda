//! Square RGB images stored as `H×W×3` floats in `[-1, 1]`, and their
//! conversions to PNG files and NCHW tensors.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::RgbImage;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Pixels {
    size: usize,
    data: Vec<f32>,
}

impl Pixels {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != size * size * 3 {
            return Err(Error::Shape(format!(
                "{} floats cannot form a {size}x{size}x3 image",
                data.len()
            )));
        }
        Ok(Self { size, data })
    }

    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let data = (0..size * size).flat_map(|_| rgb).collect();
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.size + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        if w != h {
            return Err(Error::Shape(format!("image is {w}x{h}, expected a square")));
        }
        let data = img.as_raw().iter().map(|&b| b as f32 / 127.5 - 1.0).collect();
        Ok(Self {
            size: w as usize,
            data,
        })
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
            .collect();
        RgbImage::from_raw(self.size as u32, self.size as u32, raw).expect("buffer sized")
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        Self::from_rgb8(&img)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Mean absolute difference per element.
    pub fn mean_abs_diff(&self, other: &Pixels) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        sum / self.data.len() as f64
    }
}

/// Stacks images into an `N×3×S×S` tensor.
pub fn to_tensor(images: &[&Pixels], dtype: DType, device: &Device) -> Result<Tensor> {
    let size = images
        .first()
        .map(|p| p.size)
        .ok_or_else(|| Error::Validation("empty image batch".into()))?;
    let mut buf: Vec<f32> = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        if img.size != size {
            return Err(Error::Shape(format!(
                "mixed image sizes {} and {size} in one batch",
                img.size
            )));
        }
        for c in 0..3 {
            buf.extend(img.data.iter().skip(c).step_by(3).copied());
        }
    }
    let t = Tensor::from_vec(buf, (images.len(), 3, size, size), device)?;
    Ok(t.to_dtype(dtype)?)
}

/// Splits an `N×3×S×S` tensor back into images.
pub fn from_tensor(t: &Tensor) -> Result<Vec<Pixels>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 || h != w {
        return Err(Error::Shape(format!("expected N×3×S×S, got {:?}", t.dims())));
    }
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let plane = h * w;
    Ok((0..n)
        .map(|i| {
            let base = i * 3 * plane;
            let mut data = vec![0f32; 3 * plane];
            for p in 0..plane {
                for ch in 0..3 {
                    data[p * 3 + ch] = flat[base + ch * plane + p];
                }
            }
            Pixels { size: h, data }
        })
        .collect())
}
