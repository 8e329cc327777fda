use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

use super::{Mode, Normalization};

const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

pub(crate) struct Init<'a, R: Rng + ?Sized> {
    pub rng: &'a mut R,
    pub dtype: DType,
    pub device: &'a Device,
}

impl<R: Rng + ?Sized> Init<'_, R> {
    fn normal(&mut self, shape: &[usize], mean: f64, std: f64) -> Result<Var> {
        let dist = Normal::new(mean, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(self.rng)).collect();
        let t = Tensor::from_vec(data, shape, self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    fn constant(&mut self, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, self.dtype, self.device)? * value)?;
        Ok(Var::from_tensor(&t)?)
    }
}

pub(crate) type Named = Vec<(String, Var)>;

pub(crate) struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        init: &mut Init<'_, R>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: init.normal(&[cout, cin, kernel, kernel], 0.0, 0.02)?,
            bias: init.constant(&[cout], 0.0)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, self.weight.as_tensor(), self.padding, self.stride)?;
        let c = self.bias.dims()[0];
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut Named) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// `x.conv2d(w, ..)` that sidesteps a layout check in candle's CPU kernel.
///
/// The tiled CPU path treats any input whose strides equal
/// `[H*W*C, W*C, C, 1]` as already channels-last and skips the transpose.
/// A contiguous NCHW tensor has exactly those strides when `C == H == W`,
/// and the result is silently wrong. Such inputs are handed over as a
/// strided view instead, which takes the copying path.
pub(crate) fn conv2d(x: &Tensor, w: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (_, c, h, wd) = x.dims4()?;
    let (_, _, kh, kw) = w.dims4()?;
    let one_by_one = kh == 1 && kw == 1;
    if !one_by_one && c == h && c == wd && x.is_contiguous() {
        let view = x.pad_with_zeros(3, 0, 1)?.narrow(3, 0, wd)?;
        return Ok(view.conv2d(w, padding, stride, 1, 1)?);
    }
    Ok(x.conv2d(w, padding, stride, 1, 1)?)
}

pub(crate) struct ConvTranspose2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
    output_padding: usize,
}

impl ConvTranspose2d {
    /// Kernel 3, stride 2, output exactly twice the input size.
    pub fn upsample<R: Rng + ?Sized>(init: &mut Init<'_, R>, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            weight: init.normal(&[cin, cout, 3, 3], 0.0, 0.02)?,
            bias: init.constant(&[cout], 0.0)?,
            stride: 2,
            padding: 1,
            output_padding: 1,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, self.padding, self.output_padding, self.stride, 1)?;
        let c = self.bias.dims()[0];
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut Named) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

pub(crate) struct Norm {
    kind: Normalization,
    gamma: Var,
    beta: Var,
    running: Option<Mutex<(Tensor, Tensor)>>,
}

impl Norm {
    pub fn new<R: Rng + ?Sized>(init: &mut Init<'_, R>, kind: Normalization, channels: usize) -> Result<Self> {
        let running = match kind {
            Normalization::Instance => None,
            Normalization::Batch => Some(Mutex::new((
                Tensor::zeros(channels, init.dtype, init.device)?,
                Tensor::ones(channels, init.dtype, init.device)?,
            ))),
        };
        Ok(Self {
            kind,
            gamma: init.constant(&[channels], 1.0)?,
            beta: init.constant(&[channels], 0.0)?,
            running,
        })
    }

    fn affine(&self, normed: &Tensor) -> Result<Tensor> {
        let c = self.gamma.dims()[0];
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self.kind {
            Normalization::Instance => {
                let flat = x.flatten_from(2)?;
                let mean = flat.mean_keepdim(D::Minus1)?;
                let centered = flat.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
                let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
                self.affine(&normed.reshape(x.dims())?)
            }
            Normalization::Batch => {
                let c = x.dims()[1];
                let running = self.running.as_ref().expect("batch norm keeps running stats");
                let (mean, var) = match mode {
                    Mode::Train => {
                        let perm = x.transpose(0, 1)?.flatten_from(1)?;
                        let mean = perm.mean_keepdim(D::Minus1)?;
                        let var = perm.broadcast_sub(&mean)?.sqr()?.mean_keepdim(D::Minus1)?;
                        let mut guard = running.lock().expect("norm stats lock");
                        let (rm, rv) = &*guard;
                        let new_m = ((rm * (1.0 - BN_MOMENTUM))? + (mean.flatten_all()?.detach() * BN_MOMENTUM)?)?;
                        let new_v = ((rv * (1.0 - BN_MOMENTUM))? + (var.flatten_all()?.detach() * BN_MOMENTUM)?)?;
                        *guard = (new_m, new_v);
                        (mean.reshape((1, c, 1, 1))?, var.reshape((1, c, 1, 1))?)
                    }
                    Mode::Eval => {
                        let guard = running.lock().expect("norm stats lock");
                        (guard.0.reshape((1, c, 1, 1))?, guard.1.reshape((1, c, 1, 1))?)
                    }
                };
                let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
                self.affine(&normed)
            }
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Named) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }

    pub fn buffers(&self, prefix: &str) -> Vec<(String, Tensor)> {
        match &self.running {
            None => vec![],
            Some(m) => {
                let g = m.lock().expect("norm stats lock");
                vec![
                    (format!("{prefix}.running_mean"), g.0.clone()),
                    (format!("{prefix}.running_var"), g.1.clone()),
                ]
            }
        }
    }

    pub fn set_buffers(&self, mean: Tensor, var: Tensor) {
        if let Some(m) = &self.running {
            *m.lock().expect("norm stats lock") = (mean, var);
        }
    }

    pub fn has_buffers(&self) -> bool {
        self.running.is_some()
    }
}

pub(crate) fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// Logistic function with the logit clamped so `exp` stays finite.
pub(crate) fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.clamp(-40.0, 40.0)?.neg()?.exp()? + 1.0)?.recip()?)
}

/// conv -> norm -> activation
pub(crate) struct ConvBlock {
    pub conv: Conv2d,
    pub norm: Option<Norm>,
}

impl ConvBlock {
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        match &self.norm {
            Some(n) => n.forward(&y, mode),
            None => Ok(y),
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Named) {
        self.conv.collect(&format!("{prefix}.conv"), out);
        if let Some(n) = &self.norm {
            n.collect(&format!("{prefix}.norm"), out);
        }
    }

    pub fn norms<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Norm)>) {
        if let Some(n) = &self.norm {
            out.push((format!("{prefix}.norm"), n));
        }
    }
}

/// `3x3 conv, norm, relu, 3x3 conv, norm` plus a skip path; a 1x1
/// projection on the skip when the channel count changes.
pub(crate) struct Residual {
    first: ConvBlock,
    second: ConvBlock,
    project: Option<Conv2d>,
}

impl Residual {
    pub fn new<R: Rng + ?Sized>(
        init: &mut Init<'_, R>,
        norm: Normalization,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        let first = ConvBlock {
            conv: Conv2d::new(init, cin, cout, 3, 1, 1)?,
            norm: Some(Norm::new(init, norm, cout)?),
        };
        let second = ConvBlock {
            conv: Conv2d::new(init, cout, cout, 3, 1, 1)?,
            norm: Some(Norm::new(init, norm, cout)?),
        };
        let project = if cin != cout {
            Some(Conv2d::new(init, cin, cout, 1, 1, 0)?)
        } else {
            None
        };
        Ok(Self { first, second, project })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.first.forward(x, mode)?.relu()?;
        let h = self.second.forward(&h, mode)?;
        let skip = match &self.project {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut Named) {
        self.first.collect(&format!("{prefix}.0"), out);
        self.second.collect(&format!("{prefix}.1"), out);
        if let Some(p) = &self.project {
            p.collect(&format!("{prefix}.skip"), out);
        }
    }

    pub fn norms<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Norm)>) {
        self.first.norms(&format!("{prefix}.0"), out);
        self.second.norms(&format!("{prefix}.1"), out);
    }
}
