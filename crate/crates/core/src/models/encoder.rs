//! Transformer encoder over channel tokens and the MLP projector.
//!
//! Each of the C channels is one token whose embedding is its T samples. The
//! encoder layers are post-norm (residual, then layer norm) with ReLU
//! feed-forward blocks of width 2·T; no positional encoding is added.

use candle_core::{Tensor, D};

use super::layers::{dropout, softmax_last, BatchNorm, Init, LayerNorm, Linear, Mode};
use super::ModelError;

type Result<T> = std::result::Result<T, ModelError>;

pub const ENCODER_DROPOUT: f64 = 0.1;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct EncoderLayer {
    in_proj: Linear,
    out_proj: Linear,
    ff1: Linear,
    ff2: Linear,
    norm1: LayerNorm,
    norm2: LayerNorm,
    heads: usize,
}

impl EncoderLayer {
    fn new(init: &mut Init<'_>, d_model: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            in_proj: Linear::xavier(&mut init.scoped("self_attn.in_proj"), d_model, 3 * d_model)?,
            out_proj: Linear::zero_bias(&mut init.scoped("self_attn.out_proj"), d_model, d_model)?,
            ff1: Linear::new(&mut init.scoped("linear1"), d_model, 2 * d_model, true)?,
            ff2: Linear::new(&mut init.scoped("linear2"), 2 * d_model, d_model, true)?,
            norm1: LayerNorm::new(&mut init.scoped("norm1"), d_model, LAYER_NORM_EPS)?,
            norm2: LayerNorm::new(&mut init.scoped("norm2"), d_model, LAYER_NORM_EPS)?,
            heads,
        })
    }

    fn self_attention(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let (n, tokens, e) = x.dims3()?;
        let h = self.heads;
        let dh = e / h;
        let qkv = self.in_proj.forward(x)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(D::Minus1, i * e, e)?
                .reshape((n, tokens, h, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
        let attn = dropout(&softmax_last(&scores)?, ENCODER_DROPOUT, mode)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((n, tokens, e))?;
        self.out_proj.forward(&out)
    }

    fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let a = dropout(&self.self_attention(x, mode)?, ENCODER_DROPOUT, mode)?;
        let x = self.norm1.forward(&(x + a)?)?;
        let f = self.ff1.forward(&x)?.relu()?;
        let f = dropout(&f, ENCODER_DROPOUT, mode)?;
        let f = dropout(&self.ff2.forward(&f)?, ENCODER_DROPOUT, mode)?;
        self.norm2.forward(&(x + f)?)
    }
}

/// Stack of Transformer encoder layers, shape-preserving on `[N, C, T]`.
#[derive(Debug, Clone)]
pub struct Encoder {
    layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub(crate) fn new(
        init: &mut Init<'_>,
        d_model: usize,
        n_layers: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(ModelError::Build(format!(
                "embedding width {d_model} is not divisible into {heads} attention heads"
            )));
        }
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::new(&mut init.scoped(&format!("layers.{i}")), d_model, heads))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let mut x = x.clone();
        for layer in &self.layers {
            x = layer.forward(&x, mode)?;
        }
        Ok(x)
    }
}

/// `Linear(C·T → 4·d_f) → BatchNorm → ReLU → Linear(4·d_f → d_f)`.
#[derive(Debug, Clone)]
pub struct Projector {
    fc1: Linear,
    bn: BatchNorm,
    fc2: Linear,
}

impl Projector {
    pub(crate) fn new(init: &mut Init<'_>, in_dim: usize, feature_dim: usize) -> Result<Self> {
        let hidden = 4 * feature_dim;
        Ok(Self {
            fc1: Linear::new(&mut init.scoped("fc1"), in_dim, hidden, true)?,
            bn: BatchNorm::new(&mut init.scoped("bn"), hidden, 0.1, 1e-5)?,
            fc2: Linear::new(&mut init.scoped("fc2"), hidden, feature_dim, true)?,
        })
    }

    /// `(input, hidden, output)` widths.
    pub fn widths(&self) -> (usize, usize, usize) {
        (self.fc1.in_dim(), self.fc1.out_dim(), self.fc2.out_dim())
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let h = self.fc1.forward(x)?;
        let h = self.bn.forward(&h, mode)?.relu()?;
        self.fc2.forward(&h)
    }
}
