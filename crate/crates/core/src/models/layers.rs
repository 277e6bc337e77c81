//! Minimal layer set on top of candle tensors.
//!
//! Parameters are candle `Var`s registered in a [`VarStore`] under stable
//! dotted names; layers hold clones of the same `Var`s, so optimizer updates
//! through the store are visible to the layers.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::batch_norm::{batch_norm, batch_stats};
use super::matmul::{affine, matmul};
use super::pool::{pool_time, PoolKind};
use super::row_ops;
use super::temporal_conv::temporal_conv;
use super::ModelError;

type Result<T> = std::result::Result<T, ModelError>;

/// Named trainable parameters and non-trainable buffers.
#[derive(Debug, Clone, Default)]
pub struct VarStore {
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
}

impl VarStore {
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, Var)] {
        &self.buffers
    }

    /// Parameters followed by buffers.
    pub fn all(&self) -> impl Iterator<Item = &(String, Var)> {
        self.params.iter().chain(self.buffers.iter())
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.all().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }
}

/// Initializes parameters from a seeded stream and registers them.
pub(crate) struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    dtype: DType,
    store: &'a mut VarStore,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng, dtype: DType, store: &'a mut VarStore) -> Self {
        Self {
            rng,
            dtype,
            store,
            prefix: String::new(),
        }
    }

    /// Child initializer whose names are prefixed with `name.`.
    pub fn scoped(&mut self, name: &str) -> Init<'_> {
        Init {
            prefix: self.name(name),
            rng: self.rng,
            dtype: self.dtype,
            store: self.store,
        }
    }

    fn name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn tensor(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    /// `Uniform(-bound, bound)` parameter.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| bound * (2.0 * self.rng.random::<f64>() - 1.0))
            .collect();
        let var = Var::from_tensor(&self.tensor(values, shape)?)?;
        self.store.params.push((self.name(name), var.clone()));
        Ok(var)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let var = Var::from_tensor(&self.tensor(vec![value; n], shape)?)?;
        self.store.params.push((self.name(name), var.clone()));
        Ok(var)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let var = Var::from_tensor(&self.tensor(vec![value; n], shape)?)?;
        self.store.buffers.push((self.name(name), var.clone()));
        Ok(var)
    }
}

/// Training/evaluation switch plus the dropout stream for one component.
pub struct Mode<'a> {
    pub train: bool,
    /// Dropout is skipped when `None`, even in training mode.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl Mode<'_> {
    pub fn eval() -> Mode<'static> {
        Mode {
            train: false,
            dropout_rng: None,
        }
    }

    /// Training mode with dropout disabled (batch statistics still used).
    pub fn train_no_dropout() -> Mode<'static> {
        Mode {
            train: true,
            dropout_rng: None,
        }
    }
}

impl<'a> Mode<'a> {
    pub fn train(rng: &'a mut ChaCha8Rng) -> Mode<'a> {
        Mode {
            train: true,
            dropout_rng: Some(rng),
        }
    }
}

/// Inverted dropout with a mask drawn from the mode's stream.
pub(crate) fn dropout(x: &Tensor, p: f64, mode: &mut Mode<'_>) -> Result<Tensor> {
    if !mode.train || p == 0.0 {
        return Ok(x.clone());
    }
    let Some(rng) = mode.dropout_rng.as_deref_mut() else {
        return Ok(x.clone());
    };
    // Keep with probability 1 - p, compared on 32-bit draws.
    let threshold = (p * 4_294_967_296.0).round() as u64;
    let keep = 1.0 / (1.0 - p);
    let mask = match x.dtype() {
        DType::F32 => {
            let keep = keep as f32;
            let m: Vec<f32> = (0..x.elem_count())
                .map(|_| {
                    if u64::from(rng.random::<u32>()) < threshold {
                        0.0
                    } else {
                        keep
                    }
                })
                .collect();
            Tensor::from_vec(m, x.shape(), x.device())?
        }
        _ => {
            let m: Vec<f64> = (0..x.elem_count())
                .map(|_| {
                    if u64::from(rng.random::<u32>()) < threshold {
                        0.0
                    } else {
                        keep
                    }
                })
                .collect();
            Tensor::from_vec(m, x.shape(), x.device())?.to_dtype(x.dtype())?
        }
    };
    Ok(x.mul(&mask)?)
}

/// Fully connected layer `y = x Wᵀ + b` over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    /// PyTorch-style default init: `U(-1/√fan_in, 1/√fan_in)` for weight and bias.
    pub(crate) fn new(
        init: &mut Init<'_>,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = init.uniform("weight", &[out_dim, in_dim], bound)?;
        let bias = if bias {
            Some(init.uniform("bias", &[out_dim], bound)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Xavier-uniform weight with zero bias, as used for attention projections.
    pub(crate) fn xavier(init: &mut Init<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = init.uniform("weight", &[out_dim, in_dim], bound)?;
        let bias = Some(init.constant("bias", &[out_dim], 0.0)?);
        Ok(Self { weight, bias })
    }

    /// Default-initialized weight with a zero bias (attention output projection).
    pub(crate) fn zero_bias(init: &mut Init<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = init.uniform("weight", &[out_dim, in_dim], bound)?;
        let bias = Some(init.constant("bias", &[out_dim], 0.0)?);
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims
            .last()
            .ok_or_else(|| ModelError::Shape("scalar input to linear layer".into()))?;
        if last != self.in_dim() {
            return Err(ModelError::Shape(format!(
                "linear layer expects width {}, got {last}",
                self.in_dim()
            )));
        }
        let rows = x.elem_count() / last;
        let x = x.reshape((rows, last))?;
        let y = match &self.bias {
            Some(b) => affine(&x, self.weight.as_tensor(), b.as_tensor())?,
            None => matmul(&x, &self.weight.as_tensor().t()?)?,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

fn conv_params(
    init: &mut Init<'_>,
    in_ch: usize,
    out_ch: usize,
    kernel: (usize, usize),
    groups: usize,
    bias: bool,
) -> Result<(Var, Option<Var>)> {
    if groups == 0 || in_ch % groups != 0 || out_ch % groups != 0 {
        return Err(ModelError::Build(format!(
            "convolution {in_ch} -> {out_ch} channels is not divisible into {groups} groups"
        )));
    }
    let fan_in = (in_ch / groups) * kernel.0 * kernel.1;
    let bound = 1.0 / (fan_in as f64).sqrt();
    let weight = init.uniform(
        "weight",
        &[out_ch, in_ch / groups, kernel.0, kernel.1],
        bound,
    )?;
    let bias = if bias {
        Some(init.uniform("bias", &[out_ch], bound)?)
    } else {
        None
    };
    Ok((weight, bias))
}

fn add_channel_bias(y: Tensor, bias: &Option<Var>) -> Result<Tensor> {
    Ok(match bias {
        Some(b) => {
            let out_ch = b.dims()[0];
            y.broadcast_add(&b.as_tensor().reshape((1, out_ch, 1, 1))?)?
        }
        None => y,
    })
}

/// Convolution with a `1 × K` kernel along time, zero-padded `pad` samples.
#[derive(Debug, Clone)]
pub struct TemporalConv {
    weight: Var,
    bias: Option<Var>,
    groups: usize,
    pad: (usize, usize),
}

impl TemporalConv {
    pub(crate) fn new(
        init: &mut Init<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        groups: usize,
        bias: bool,
        pad: (usize, usize),
    ) -> Result<Self> {
        let (weight, bias) = conv_params(init, in_ch, out_ch, (1, kernel), groups, bias)?;
        Ok(Self {
            weight,
            bias,
            groups,
            pad,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = temporal_conv(x, self.weight.as_tensor(), self.groups, self.pad)?;
        add_channel_bias(y, &self.bias)
    }
}

/// Convolution whose kernel spans the whole height axis (`H × 1`), collapsing
/// it to 1; with `H = 1` this is a pointwise convolution.
#[derive(Debug, Clone)]
pub struct SpatialConv {
    weight: Var,
    bias: Option<Var>,
    groups: usize,
}

impl SpatialConv {
    pub(crate) fn new(
        init: &mut Init<'_>,
        in_ch: usize,
        out_ch: usize,
        height: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        let (weight, bias) = conv_params(init, in_ch, out_ch, (height, 1), groups, bias)?;
        Ok(Self {
            weight,
            bias,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c_in, h, w) = x.dims4()?;
        let (c_out, cg, kh, _) = self.weight.dims4()?;
        if kh != h || cg * self.groups != c_in {
            return Err(ModelError::Shape(format!(
                "spatial convolution expects [N, {}, {kh}, W], got {:?}",
                cg * self.groups,
                x.dims()
            )));
        }
        let g = self.groups;
        let og = c_out / g;
        let x = x.reshape((n, g, cg * h, w))?;
        let k = self.weight.as_tensor().reshape((1, g, og, cg * h))?;
        let y = k.broadcast_matmul(&x)?.reshape((n, c_out, 1, w))?;
        add_channel_bias(y, &self.bias)
    }
}

/// Batch normalization over axis 1 of a 2-D `[N, F]` or 4-D `[N, F, H, W]` input.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub(crate) fn new(
        init: &mut Init<'_>,
        features: usize,
        momentum: f64,
        eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            gamma: init.constant("weight", &[features], 1.0)?,
            beta: init.constant("bias", &[features], 0.0)?,
            running_mean: init.buffer("running_mean", &[features], 0.0)?,
            running_var: init.buffer("running_var", &[features], 1.0)?,
            momentum,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &Mode<'_>) -> Result<Tensor> {
        let dims = x.dims();
        let f = self.gamma.dims()[0];
        if dims.len() < 2 || dims[1] != f {
            return Err(ModelError::Shape(format!(
                "batch norm expects {f} features on axis 1, got {dims:?}"
            )));
        }
        let to_vec = |v: &Var| -> Result<Vec<f64>> {
            Ok(v.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?)
        };
        let (mean, var) = if mode.train {
            let (mean, var) = batch_stats(x)?;
            let count = x.elem_count() / f;
            // Running statistics track the unbiased variance.
            let unbias = if count > 1 {
                count as f64 / (count as f64 - 1.0)
            } else {
                1.0
            };
            let m = self.momentum;
            let blend = |old: Vec<f64>, new: &[f64], k: f64| -> Vec<f64> {
                old.iter()
                    .zip(new)
                    .map(|(o, n)| (1.0 - m) * o + m * n * k)
                    .collect()
            };
            let new_mean = blend(to_vec(&self.running_mean)?, &mean, 1.0);
            let new_var = blend(to_vec(&self.running_var)?, &var, unbias);
            let dtype = self.running_mean.dtype();
            self.running_mean
                .set(&Tensor::from_vec(new_mean, f, &Device::Cpu)?.to_dtype(dtype)?)?;
            self.running_var
                .set(&Tensor::from_vec(new_var, f, &Device::Cpu)?.to_dtype(dtype)?)?;
            (mean, var)
        } else {
            (to_vec(&self.running_mean)?, to_vec(&self.running_var)?)
        };
        Ok(batch_norm(
            x,
            self.gamma.as_tensor(),
            self.beta.as_tensor(),
            &mean,
            &var,
            self.eps,
            mode.train,
        )?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Var,
    beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub(crate) fn new(init: &mut Init<'_>, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: init.constant("weight", &[dim], 1.0)?,
            beta: init.constant("bias", &[dim], 0.0)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(row_ops::layer_norm(
            x,
            self.gamma.as_tensor(),
            self.beta.as_tensor(),
            self.eps,
        )?)
    }
}

/// Softmax over the last dimension.
pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(row_ops::softmax_last(x)?)
}

/// Average pooling along the last axis with arbitrary kernel and stride.
pub(crate) fn avg_pool_time(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    check_window(x, kernel)?;
    Ok(pool_time(x, PoolKind::Avg, kernel, stride)?)
}

/// Max pooling along the last axis with arbitrary kernel and stride.
pub(crate) fn max_pool_time(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    check_window(x, kernel)?;
    Ok(pool_time(x, PoolKind::Max, kernel, stride)?)
}

fn check_window(x: &Tensor, kernel: usize) -> Result<()> {
    let w = x.dims().last().copied().unwrap_or(0);
    if w < kernel {
        return Err(ModelError::Shape(format!(
            "pooling kernel {kernel} exceeds time length {w}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn dropout_scales_kept_units_and_is_seeded() {
        let x = Tensor::ones(20_000, DType::F32, &Device::Cpu).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            dropout(&x, 0.25, &mut Mode::train(&mut rng))
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
        };
        let y = draw(3);
        assert_eq!(y, draw(3));
        let kept = y.iter().filter(|&&v| v != 0.0).count() as f64 / y.len() as f64;
        assert!((kept - 0.75).abs() < 0.02, "kept fraction {kept}");
        assert!(y.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-6));
        let eval = dropout(&x, 0.25, &mut Mode::eval()).unwrap();
        assert_eq!(eval.to_vec1::<f32>().unwrap(), vec![1.0; 20_000]);
    }
}
