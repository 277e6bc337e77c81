//! Fused last-axis layer normalization and softmax with closed-form
//! backward passes:
//!
//! ```text
//! layer norm: dx = σ⁻¹ (dŷ − mean(dŷ) − x̂ · mean(dŷ · x̂)),  dŷ = γ dy
//! softmax:    dx = y (dy − Σ dy · y)
//! ```
//!
//! Row statistics accumulate in `f64` for either storage type.

use candle_core::{
    CpuStorage, CustomOp1, CustomOp3, DType, Layout, Result, Shape, Tensor, WithDType,
};

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("row op needs contiguous inputs".into()))?;
    Ok(&T::cpu_storage_as_slice(s)?[start..end])
}

fn row_len(l: &Layout) -> Result<usize> {
    match l.dims().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => candle_core::bail!("row op needs a non-empty last axis, got {:?}", l.dims()),
    }
}

fn to_f64(t: &Tensor) -> Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

struct LayerNorm {
    eps: f64,
}

impl LayerNorm {
    /// Per-row `(mean, 1/σ)`.
    fn stats<T: WithDType>(&self, x: &[T], e: usize) -> Vec<(f64, f64)> {
        x.chunks_exact(e)
            .map(|row| {
                let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / e as f64;
                let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / e as f64;
                (mean, 1.0 / (var + self.eps).sqrt())
            })
            .collect()
    }

    fn forward<T: WithDType>(&self, x: &[T], gamma: &[T], beta: &[T], e: usize) -> Vec<T> {
        let mut y = Vec::with_capacity(x.len());
        for (row, (mean, inv)) in x.chunks_exact(e).zip(self.stats(x, e)) {
            y.extend(row.iter().zip(gamma.iter().zip(beta)).map(|(v, (g, b))| {
                T::from_f64((v.to_f64() - mean) * inv * g.to_f64() + b.to_f64())
            }));
        }
        y
    }
}

impl CustomOp3 for LayerNorm {
    fn name(&self) -> &'static str {
        "layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let e = row_len(l1)?;
        if l2.shape().elem_count() != e || l3.shape().elem_count() != e {
            candle_core::bail!("layer norm affine parameters must have {e} entries");
        }
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(self.forward::<f32>(
                slice(s1, l1)?,
                slice(s2, l2)?,
                slice(s3, l3)?,
                e,
            )),
            CpuStorage::F64(_) => CpuStorage::F64(self.forward::<f64>(
                slice(s1, l1)?,
                slice(s2, l2)?,
                slice(s3, l3)?,
                e,
            )),
            _ => candle_core::bail!("layer norm supports f32 and f64 only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let e = *x.dims().last().expect("checked in forward");
        let xs = to_f64(x)?;
        let gs = to_f64(grad)?;
        let gamma = to_f64(gamma)?;
        let mut dx = Vec::with_capacity(xs.len());
        let mut dgamma = vec![0f64; e];
        let mut dbeta = vec![0f64; e];
        let mut xhat = vec![0f64; e];
        let mut dyhat = vec![0f64; e];
        for ((xr, gr), (mean, inv)) in xs
            .chunks_exact(e)
            .zip(gs.chunks_exact(e))
            .zip(self.stats(&xs, e))
        {
            for j in 0..e {
                xhat[j] = (xr[j] - mean) * inv;
                dyhat[j] = gr[j] * gamma[j];
                dgamma[j] += gr[j] * xhat[j];
                dbeta[j] += gr[j];
            }
            let m1 = dyhat.iter().sum::<f64>() / e as f64;
            let m2 = dyhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / e as f64;
            dx.extend((0..e).map(|j| inv * (dyhat[j] - m1 - xhat[j] * m2)));
        }
        let (dev, dtype) = (x.device(), x.dtype());
        Ok((
            Some(Tensor::from_vec(dx, x.shape(), dev)?.to_dtype(dtype)?),
            Some(Tensor::from_vec(dgamma, e, dev)?.to_dtype(dtype)?),
            Some(Tensor::from_vec(dbeta, e, dev)?.to_dtype(dtype)?),
        ))
    }
}

/// Layer normalization over the last axis with affine `gamma`, `beta`.
pub(crate) fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, LayerNorm { eps })
}

struct Softmax;

fn softmax_rows<T: WithDType>(x: &[T], e: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(e) {
        let max = row
            .iter()
            .map(|v| v.to_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        y.extend(exps.iter().map(|v| T::from_f64(v / sum)));
    }
    y
}

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let e = row_len(l)?;
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(softmax_rows::<f32>(slice(s, l)?, e)),
            CpuStorage::F64(_) => CpuStorage::F64(softmax_rows::<f64>(slice(s, l)?, e)),
            _ => candle_core::bail!("softmax supports f32 and f64 only"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let e = *res.dims().last().expect("checked in forward");
        let ys = to_f64(res)?;
        let gs = to_f64(grad)?;
        let mut dx = Vec::with_capacity(ys.len());
        for (yr, gr) in ys.chunks_exact(e).zip(gs.chunks_exact(e)) {
            let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
            dx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
        }
        Ok(Some(
            Tensor::from_vec(dx, res.shape(), res.device())?.to_dtype(res.dtype())?,
        ))
    }
}

/// Softmax over the last axis, shifted by the row maximum.
pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Softmax)
}
