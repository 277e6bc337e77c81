//! Feature-extracting backbones. Layer tables follow the original publications
//! (EEGNet-8,2; Deep and Shallow ConvNet), with stride-1 convolutions and
//! unpadded "valid" convolutions except where noted.
//!
//! EEGNet, input `[N, 1, C, T]`:
//!
//! | layer                         | output            |
//! |-------------------------------|-------------------|
//! | conv 1×64, 8 filters, "same"  | 8 × C × T         |
//! | batch norm                    |                   |
//! | depthwise conv C×1, ×2        | 16 × 1 × T        |
//! | batch norm, ELU               |                   |
//! | avg pool 1×4, dropout 0.25    | 16 × 1 × T/4      |
//! | depthwise conv 1×16, "same"   | 16 × 1 × T/4      |
//! | pointwise conv 1×1, 16        | 16 × 1 × T/4      |
//! | batch norm, ELU               |                   |
//! | avg pool 1×8, dropout 0.25    | 16 × 1 × T/32     |
//!
//! ShallowConvNet: conv 1×25 (40) → conv C×1 (40, no bias) → batch norm →
//! square → avg pool 1×75 stride 15 → log → dropout 0.5.
//!
//! DeepConvNet: conv 1×10 (25) → conv C×1 (25, no bias) → batch norm → ELU →
//! max pool 1×3, then three blocks of dropout 0.5 → conv 1×10 (50/100/200,
//! no bias) → batch norm → ELU → max pool 1×3.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{
    avg_pool_time, dropout, max_pool_time, BatchNorm, Init, Mode, SpatialConv, TemporalConv,
};
use super::ModelError;

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackboneKind {
    EEGNet,
    DeepCNN,
    ShallowCNN,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::EEGNet => "EEGNet",
            BackboneKind::DeepCNN => "DeepCNN",
            BackboneKind::ShallowCNN => "ShallowCNN",
        }
    }

    /// Flattened feature width for `C × T` input, or a build error when the
    /// pooling chain leaves no time samples.
    pub fn feature_dim(self, n_timepoints: usize) -> Result<usize> {
        let t = n_timepoints;
        let too_short = |min: usize| {
            ModelError::Build(format!(
                "{} needs at least {min} time samples, got {t}",
                self.name()
            ))
        };
        match self {
            BackboneKind::EEGNet => {
                let w = t / 4 / 8;
                if w == 0 {
                    return Err(too_short(32));
                }
                Ok(EEGNET_F2 * w)
            }
            BackboneKind::ShallowCNN => {
                let min = SHALLOW_KERNEL - 1 + SHALLOW_POOL;
                if t < min {
                    return Err(too_short(min));
                }
                Ok(SHALLOW_FILTERS
                    * ((t - SHALLOW_KERNEL + 1 - SHALLOW_POOL) / SHALLOW_POOL_STRIDE + 1))
            }
            BackboneKind::DeepCNN => {
                let mut w = t;
                for _ in 0..4 {
                    if w < DEEP_KERNEL {
                        return Err(too_short(deep_min_length()));
                    }
                    w = (w - DEEP_KERNEL + 1) / DEEP_POOL;
                    if w == 0 {
                        return Err(too_short(deep_min_length()));
                    }
                }
                Ok(DEEP_FILTERS[3] * w)
            }
        }
    }
}

const EEGNET_F1: usize = 8;
const EEGNET_D: usize = 2;
const EEGNET_F2: usize = 16;
const EEGNET_KERNEL: usize = 64;
const EEGNET_SEP_KERNEL: usize = 16;
const EEGNET_DROPOUT: f64 = 0.25;

const SHALLOW_FILTERS: usize = 40;
const SHALLOW_KERNEL: usize = 25;
const SHALLOW_POOL: usize = 75;
const SHALLOW_POOL_STRIDE: usize = 15;
const SHALLOW_DROPOUT: f64 = 0.5;

const DEEP_FILTERS: [usize; 4] = [25, 50, 100, 200];
const DEEP_KERNEL: usize = 10;
const DEEP_POOL: usize = 3;
const DEEP_DROPOUT: f64 = 0.5;

fn deep_min_length() -> usize {
    let mut w = 1;
    for _ in 0..4 {
        w = w * DEEP_POOL + DEEP_KERNEL - 1;
    }
    w
}

/// Zero padding that keeps the length for an even or odd kernel.
fn same_padding(kernel: usize) -> (usize, usize) {
    ((kernel - 1) / 2, kernel / 2)
}

#[derive(Debug, Clone)]
pub struct EegNet {
    temporal: TemporalConv,
    bn1: BatchNorm,
    depthwise: SpatialConv,
    bn2: BatchNorm,
    separable_depthwise: TemporalConv,
    separable_pointwise: SpatialConv,
    bn3: BatchNorm,
}

impl EegNet {
    fn new(init: &mut Init<'_>, n_channels: usize) -> Result<Self> {
        let f1d = EEGNET_F1 * EEGNET_D;
        // Batch norm epsilon 1e-3 as in the reference EEGNet; momentum 0.1 so the
        // running statistics settle within the few steps of small training sets.
        Ok(Self {
            temporal: TemporalConv::new(
                &mut init.scoped("conv_temporal"),
                1,
                EEGNET_F1,
                EEGNET_KERNEL,
                1,
                false,
                same_padding(EEGNET_KERNEL),
            )?,
            bn1: BatchNorm::new(&mut init.scoped("bn_temporal"), EEGNET_F1, 0.1, 1e-3)?,
            depthwise: SpatialConv::new(
                &mut init.scoped("conv_depthwise"),
                EEGNET_F1,
                f1d,
                n_channels,
                EEGNET_F1,
                false,
            )?,
            bn2: BatchNorm::new(&mut init.scoped("bn_depthwise"), f1d, 0.1, 1e-3)?,
            separable_depthwise: TemporalConv::new(
                &mut init.scoped("conv_separable_depth"),
                f1d,
                f1d,
                EEGNET_SEP_KERNEL,
                f1d,
                false,
                same_padding(EEGNET_SEP_KERNEL),
            )?,
            separable_pointwise: SpatialConv::new(
                &mut init.scoped("conv_separable_point"),
                f1d,
                EEGNET_F2,
                1,
                1,
                false,
            )?,
            bn3: BatchNorm::new(&mut init.scoped("bn_separable"), EEGNET_F2, 0.1, 1e-3)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let x = self.temporal.forward(x)?;
        let x = self.bn1.forward(&x, mode)?;
        let x = self.depthwise.forward(&x)?;
        let x = self.bn2.forward(&x, mode)?.elu(1.0)?;
        let x = avg_pool_time(&x, 4, 4)?;
        let x = dropout(&x, EEGNET_DROPOUT, mode)?;
        let x = self.separable_depthwise.forward(&x)?;
        let x = self.separable_pointwise.forward(&x)?;
        let x = self.bn3.forward(&x, mode)?.elu(1.0)?;
        let x = avg_pool_time(&x, 8, 8)?;
        let x = dropout(&x, EEGNET_DROPOUT, mode)?;
        Ok(x.flatten_from(1)?)
    }
}

#[derive(Debug, Clone)]
pub struct ShallowConvNet {
    temporal: TemporalConv,
    spatial: SpatialConv,
    bn: BatchNorm,
}

impl ShallowConvNet {
    fn new(init: &mut Init<'_>, n_channels: usize) -> Result<Self> {
        Ok(Self {
            temporal: TemporalConv::new(
                &mut init.scoped("conv_time"),
                1,
                SHALLOW_FILTERS,
                SHALLOW_KERNEL,
                1,
                true,
                (0, 0),
            )?,
            spatial: SpatialConv::new(
                &mut init.scoped("conv_spat"),
                SHALLOW_FILTERS,
                SHALLOW_FILTERS,
                n_channels,
                1,
                false,
            )?,
            bn: BatchNorm::new(&mut init.scoped("bn"), SHALLOW_FILTERS, 0.1, 1e-5)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let x = self.temporal.forward(x)?;
        let x = self.spatial.forward(&x)?;
        let x = self.bn.forward(&x, mode)?.sqr()?;
        let x = avg_pool_time(&x, SHALLOW_POOL, SHALLOW_POOL_STRIDE)?;
        let x = x.maximum(1e-6)?.log()?;
        let x = dropout(&x, SHALLOW_DROPOUT, mode)?;
        Ok(x.flatten_from(1)?)
    }
}

#[derive(Debug, Clone)]
pub struct DeepConvNet {
    temporal: TemporalConv,
    spatial: SpatialConv,
    bn0: BatchNorm,
    blocks: Vec<(TemporalConv, BatchNorm)>,
}

impl DeepConvNet {
    fn new(init: &mut Init<'_>, n_channels: usize) -> Result<Self> {
        let f0 = DEEP_FILTERS[0];
        let temporal = TemporalConv::new(
            &mut init.scoped("conv_time"),
            1,
            f0,
            DEEP_KERNEL,
            1,
            true,
            (0, 0),
        )?;
        let spatial =
            SpatialConv::new(&mut init.scoped("conv_spat"), f0, f0, n_channels, 1, false)?;
        let bn0 = BatchNorm::new(&mut init.scoped("bn_0"), f0, 0.1, 1e-5)?;
        let mut blocks = Vec::new();
        for (i, pair) in DEEP_FILTERS.windows(2).enumerate() {
            let mut scope = init.scoped(&format!("block_{}", i + 1));
            let conv = TemporalConv::new(
                &mut scope.scoped("conv"),
                pair[0],
                pair[1],
                DEEP_KERNEL,
                1,
                false,
                (0, 0),
            )?;
            let bn = BatchNorm::new(&mut scope.scoped("bn"), pair[1], 0.1, 1e-5)?;
            blocks.push((conv, bn));
        }
        Ok(Self {
            temporal,
            spatial,
            bn0,
            blocks,
        })
    }

    fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let x = self.temporal.forward(x)?;
        let x = self.spatial.forward(&x)?;
        let x = self.bn0.forward(&x, mode)?.elu(1.0)?;
        let mut x = max_pool_time(&x, DEEP_POOL, DEEP_POOL)?;
        for (conv, bn) in &self.blocks {
            let h = dropout(&x, DEEP_DROPOUT, mode)?;
            let h = conv.forward(&h)?;
            let h = bn.forward(&h, mode)?.elu(1.0)?;
            x = max_pool_time(&h, DEEP_POOL, DEEP_POOL)?;
        }
        Ok(x.flatten_from(1)?)
    }
}

#[derive(Debug, Clone)]
pub enum Backbone {
    EegNet(EegNet),
    Deep(DeepConvNet),
    Shallow(ShallowConvNet),
}

impl Backbone {
    pub(crate) fn new(init: &mut Init<'_>, kind: BackboneKind, n_channels: usize) -> Result<Self> {
        Ok(match kind {
            BackboneKind::EEGNet => Backbone::EegNet(EegNet::new(init, n_channels)?),
            BackboneKind::DeepCNN => Backbone::Deep(DeepConvNet::new(init, n_channels)?),
            BackboneKind::ShallowCNN => Backbone::Shallow(ShallowConvNet::new(init, n_channels)?),
        })
    }

    /// `[N, 1, C, T]` → `[N, d_f]`.
    pub fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        match self {
            Backbone::EegNet(m) => m.forward(x, mode),
            Backbone::Deep(m) => m.forward(x, mode),
            Backbone::Shallow(m) => m.forward(x, mode),
        }
    }
}
