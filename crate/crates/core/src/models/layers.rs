//! Parameter storage and the small set of differentiable layers the two
//! architectures are built from.

use std::cell::RefCell;

use candle_core::{DType, Device, Tensor, Var, D};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// Trainable parameters plus non-trainable buffers (batch-norm running statistics),
/// both keyed by dotted path.
pub struct Params {
    dtype: DType,
    device: Device,
    vars: RefCell<Vec<(String, Var)>>,
    buffers: RefCell<Vec<(String, Var)>>,
    rng: RefCell<rng::Rng>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Normal truncated to two standard deviations.
    TruncNormal(f64),
}

impl Params {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            vars: RefCell::new(Vec::new()),
            buffers: RefCell::new(Vec::new()),
            rng: RefCell::new(rng::seeded(seed, stream::INIT)),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            params: self,
            path: String::new(),
        }
    }

    fn make(&self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) | Init::TruncNormal(std) => {
                let dist = Normal::new(0.0, std)
                    .map_err(|e| Error::Model(format!("bad init std {std}: {e}")))?;
                let truncate = matches!(init, Init::TruncNormal(_));
                let mut rng = self.rng.borrow_mut();
                (0..n)
                    .map(|_| loop {
                        let v: f64 = dist.sample(&mut *rng);
                        if !truncate || v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Trainable variables in creation order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars.borrow().clone()
    }

    pub fn buffers(&self) -> Vec<(String, Var)> {
        self.buffers.borrow().clone()
    }

    /// Exact number of trainable scalars.
    pub fn count(&self) -> usize {
        self.vars.borrow().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Deep copies of every named tensor (parameters and buffers). Variables are
    /// updated in place, so a shallow clone would keep tracking later steps.
    pub fn named_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        self.vars
            .borrow()
            .iter()
            .chain(self.buffers.borrow().iter())
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites tensors by name. Returns the names found in `src` but unknown here.
    pub fn load(&self, src: &std::collections::HashMap<String, Tensor>, strict: bool) -> Result<Vec<String>> {
        let vars = self.vars.borrow();
        let buffers = self.buffers.borrow();
        let mut seen = 0usize;
        for (name, var) in vars.iter().chain(buffers.iter()) {
            match src.get(name) {
                Some(t) => {
                    if t.dims() != var.dims() {
                        return Err(Error::Checkpoint(format!(
                            "tensor `{name}` has shape {:?}, model expects {:?}",
                            t.dims(),
                            var.dims()
                        )));
                    }
                    var.set(&t.to_dtype(self.dtype)?)?;
                    seen += 1;
                }
                None if strict => {
                    return Err(Error::Checkpoint(format!("tensor `{name}` missing")));
                }
                None => {}
            }
        }
        let known: std::collections::HashSet<&str> =
            vars.iter().chain(buffers.iter()).map(|(n, _)| n.as_str()).collect();
        let unknown: Vec<String> = src.keys().filter(|k| !known.contains(k.as_str())).cloned().collect();
        if strict && !unknown.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has tensors unknown to this architecture, e.g. `{}`",
                unknown[0]
            )));
        }
        log::debug!("loaded {seen} tensors");
        Ok(unknown)
    }
}

#[derive(Clone)]
pub struct Scope<'a> {
    params: &'a Params,
    path: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope<'a> {
        let path = if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.path)
        };
        Scope {
            params: self.params,
            path,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.path.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.path)
        }
    }

    pub fn var(&self, leaf: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let var = Var::from_tensor(&self.params.make(shape, init)?)?;
        let t = var.as_tensor().clone();
        self.params.vars.borrow_mut().push((self.name(leaf), var));
        Ok(t)
    }

    fn buffer(&self, leaf: &str, shape: &[usize], init: Init) -> Result<Var> {
        let var = Var::from_tensor(&self.params.make(shape, init)?)?;
        self.params
            .buffers
            .borrow_mut()
            .push((self.name(leaf), var.clone()));
        Ok(var)
    }
}

pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &Scope, in_dim: usize, out_dim: usize, bias: bool, std: f64) -> Result<Self> {
        let weight = s.var("weight", &[out_dim, in_dim], Init::TruncNormal(std))?;
        let bias = bias
            .then(|| s.var("bias", &[out_dim], Init::Zeros))
            .transpose()?;
        Ok(Self { weight, bias })
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("non-scalar input");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Square-kernel conv2d. candle's CPU kernel takes a contiguous NCHW input for
/// NHWC when channels, height and width are all equal, so that case runs on the
/// spatially transposed problem instead.
pub fn conv2d(x: &Tensor, weight: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let (_, _, kh, kw) = weight.dims4()?;
    if c == h && c == w && (kh, kw) != (1, 1) {
        let y = x
            .transpose(2, 3)?
            .conv2d(&weight.transpose(2, 3)?, padding, stride, 1, 1)?;
        return Ok(y.transpose(2, 3)?.contiguous()?);
    }
    Ok(x.conv2d(weight, padding, stride, 1, 1)?)
}

pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        s: &Scope,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        // He initialisation over fan-out, as used for the transformer's conv stems
        let fan_out = kernel * kernel * out_ch;
        let weight = s.var(
            "weight",
            &[out_ch, in_ch, kernel, kernel],
            Init::Normal((2.0 / fan_out as f64).sqrt()),
        )?;
        let bias = bias
            .then(|| s.var("bias", &[out_ch], Init::Zeros))
            .transpose()?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.padding, self.stride)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }
}

/// 3×3 depthwise convolution, stride 1, zero padding 1. Weight layout matches a
/// grouped convolution, `(C, 1, 3, 3)`.
pub struct DepthwiseConv3x3 {
    weight: Tensor,
    bias: Tensor,
}

impl DepthwiseConv3x3 {
    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        let weight = s.var(
            "weight",
            &[channels, 1, 3, 3],
            Init::Normal((2.0 / 9.0f64).sqrt()),
        )?;
        let bias = s.var("bias", &[channels], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let kernel = self.weight.reshape((c, 9))?;
        let mut acc = self.bias.reshape((1, c, 1, 1))?.broadcast_as((b, c, h, w))?;
        for dy in 0..3 {
            for dx in 0..3 {
                let tap = kernel.narrow(1, dy * 3 + dx, 1)?.reshape((1, c, 1, 1))?;
                let shifted = padded.narrow(2, dy, h)?.narrow(3, dx, w)?;
                acc = acc.add(&shifted.broadcast_mul(&tap)?)?;
            }
        }
        Ok(acc)
    }
}

/// Layer normalisation over the last dimension.
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &Scope, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: s.var("weight", &[dim], Init::Ones)?,
            bias: s.var("bias", &[dim], Init::Zeros)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Batch normalisation over `(B, C, H, W)`; running statistics live in buffers.
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: s.var("weight", &[channels], Init::Ones)?,
            bias: s.var("bias", &[channels], Init::Zeros)?,
            running_mean: s.buffer("running_mean", &[channels], Init::Zeros)?,
            running_var: s.buffer("running_var", &[channels], Init::Ones)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let shape = (1, c, 1, 1);
        let (mean, var) = if train {
            let n = b * h * w;
            let mean = x.mean_keepdim(3)?.mean_keepdim(2)?.mean_keepdim(0)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(2)?.mean_keepdim(0)?;
            let m = self.momentum;
            let unbiased = if n > 1 {
                (var.detach() * (n as f64 / (n - 1) as f64))?
            } else {
                var.detach()
            };
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().reshape(c)? * m)?)?;
            let new_var =
                ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.reshape(c)? * m)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape(shape)?,
                self.running_var.as_tensor().reshape(shape)?,
            )
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape(shape)?)?
            .broadcast_add(&self.bias.reshape(shape)?)?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Numerically stable softmax along `dim`.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Row `i` holds the weights that output position `i` takes from each input
/// position under half-pixel-centred bilinear interpolation.
pub fn bilinear_weights(out_len: usize, in_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[i * in_len + i0] += 1.0 - frac;
        m[i * in_len + i1] += frac;
    }
    m
}

/// Bilinear resize of `(B, C, h, w)` to `(B, C, out_h, out_w)` as two matrix
/// products, so it is differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let aw = Tensor::from_vec(bilinear_weights(out_w, w), (out_w, w), dev)?.to_dtype(x.dtype())?;
    let ah = Tensor::from_vec(bilinear_weights(out_h, h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let rows = x.contiguous()?.reshape((b * c * h, w))?.matmul(&aw.t()?)?;
    let cols = ah.broadcast_matmul(&rows.reshape((b * c, h, out_w))?)?;
    Ok(cols.reshape((b, c, out_h, out_w))?)
}

/// Channel dropout: zeroes whole `(sample, channel)` planes with probability `p`
/// and rescales survivors by `1 / (1 - p)`. The mask is drawn from `seed`.
pub fn channel_dropout(x: &Tensor, p: f64, seed: u64) -> Result<Tensor> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must lie in (0, 1), got {p}"
        )));
    }
    use rand::Rng as _;
    let (b, c, _, _) = x.dims4()?;
    let mut rng = rng::seeded(seed, stream::DROPOUT);
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..b * c)
        .map(|_| if rng.random_bool(p) { 0.0 } else { keep })
        .collect();
    let mask = Tensor::from_vec(mask, (b, c, 1, 1), x.device())?.to_dtype(x.dtype())?;
    Ok(x.broadcast_mul(&mask)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_layer_parameter_count() {
        let params = Params::new(DType::F32, 0);
        Linear::new(&params.root().pp("fc"), 4, 3, true, 0.02).unwrap();
        assert_eq!(params.count(), 15);
        let names: Vec<String> = params.vars().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["fc.weight", "fc.bias"]);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = Params::new(DType::F32, 3);
        let b = Params::new(DType::F32, 3);
        let ta = a.root().var("w", &[10], Init::Normal(1.0)).unwrap();
        let tb = b.root().var("w", &[10], Init::Normal(1.0)).unwrap();
        assert_eq!(ta.to_vec1::<f32>().unwrap(), tb.to_vec1::<f32>().unwrap());
    }

    #[test]
    fn bilinear_rows_sum_to_one_and_identity() {
        for (o, i) in [(8, 2), (64, 16), (5, 7), (3, 3)] {
            let m = bilinear_weights(o, i);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let id = bilinear_weights(4, 4);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(id[r * 4 + c], (r == c) as u8 as f64);
            }
        }
    }

    #[test]
    fn bilinear_upsample_2x_values() {
        // half-pixel centres: output 0 clamps to input 0, output 1 sits 0.25 past input 0
        let x = Tensor::from_vec(vec![0f64, 4.0], (1, 1, 1, 2), &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 1, 4).unwrap();
        let v: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn depthwise_matches_grouped_conv() {
        let params = Params::new(DType::F64, 1);
        let dw = DepthwiseConv3x3::new(&params.root(), 3).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 3, 5, 6), &Device::Cpu).unwrap();
        let ours = dw.forward(&x).unwrap();
        let reference = x
            .conv2d(&dw.weight, 1, 1, 1, 3)
            .unwrap()
            .broadcast_add(&dw.bias.reshape((1, 3, 1, 1)).unwrap())
            .unwrap();
        let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn softmax_and_log_softmax_agree() {
        let x = Tensor::new(&[[1f64, 2.0, 3.0], [1000.0, 1000.0, 0.0]], &Device::Cpu).unwrap();
        let p = softmax(&x, 1).unwrap();
        let lp = log_softmax(&x, 1).unwrap().exp().unwrap();
        let diff = (p.clone() - lp).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
        let rows: Vec<f64> = p.sum(1).unwrap().to_vec1().unwrap();
        assert!(rows.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn dropout_rejects_bad_rates() {
        let x = Tensor::ones((1, 2, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(channel_dropout(&x, 0.0, 0).is_err());
        assert!(channel_dropout(&x, 1.0, 0).is_err());
        assert!(channel_dropout(&x, 0.5, 0).is_ok());
    }

    #[test]
    fn batch_norm_train_and_eval() {
        let params = Params::new(DType::F64, 0);
        let bn = BatchNorm2d::new(&params.root(), 2).unwrap();
        let x = Tensor::randn(3f64, 2.0, (4, 2, 3, 3), &Device::Cpu).unwrap();
        let y = bn.forward(&x, true).unwrap();
        let mean: Vec<f64> = y.mean_keepdim(3).unwrap().mean_keepdim(2).unwrap().mean_keepdim(0).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-10));
        assert_eq!(params.count(), 4);
        assert_eq!(params.buffers().len(), 2);
        let rm: Vec<f64> = bn.running_mean.as_tensor().to_vec1().unwrap();
        assert!(rm.iter().all(|&m| m > 0.0));
        let _ = bn.forward(&x, false).unwrap();
    }
}
