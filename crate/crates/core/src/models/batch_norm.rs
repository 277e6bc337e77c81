//! Fused batch normalization `y = γ (x − μ) σ⁻¹ + β` over axis 1 of an
//! `[N, F, inner]`-shaped tensor, with the closed-form backward pass
//!
//! ```text
//! dx = γ σ⁻¹ (dy − mean(dy) − x̂ · mean(dy · x̂))   (batch statistics)
//! dx = γ σ⁻¹ dy                                    (fixed statistics)
//! ```
//!
//! where the means run over every element of a feature. Kernels accumulate in
//! `f64` for either storage type.

use candle_core::{CpuStorage, CustomOp3, DType, Layout, Result, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy)]
struct Dims {
    n: usize,
    f: usize,
    inner: usize,
}

impl Dims {
    fn of(shape: &[usize]) -> Result<Self> {
        if shape.len() < 2 {
            candle_core::bail!("batch norm needs at least 2 dimensions, got {shape:?}");
        }
        Ok(Self {
            n: shape[0],
            f: shape[1],
            inner: shape[2..].iter().product(),
        })
    }

    fn count(&self) -> usize {
        self.n * self.inner
    }

    /// Calls `visit(feature, contiguous row)` for every `inner`-long row.
    fn rows<'a, T>(&self, data: &'a [T], mut visit: impl FnMut(usize, &'a [T])) {
        for (r, row) in data.chunks_exact(self.inner.max(1)).enumerate() {
            visit(r % self.f, row);
        }
    }
}

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("batch norm needs contiguous inputs".into()))?;
    Ok(&T::cpu_storage_as_slice(s)?[start..end])
}

/// Per-feature mean and biased variance of a contiguous `[N, F, ...]` tensor.
pub(crate) fn batch_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let dims = Dims::of(x.dims())?;
    let data = x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let mut sum = vec![0f64; dims.f];
    dims.rows(&data, |f, row| sum[f] += row.iter().sum::<f64>());
    let count = dims.count() as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let mut sq = vec![0f64; dims.f];
    dims.rows(&data, |f, row| {
        let m = mean[f];
        sq[f] += row.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    });
    let var = sq.iter().map(|s| s / count).collect();
    Ok((mean, var))
}

struct Normalize {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// Statistics were computed from this batch (gradient flows through them).
    batch_stats: bool,
}

impl Normalize {
    fn forward<T: WithDType>(&self, dims: Dims, x: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
        let mut y = Vec::with_capacity(x.len());
        dims.rows(x, |f, row| {
            let scale = gamma[f].to_f64() * self.inv_std[f];
            let shift = beta[f].to_f64() - self.mean[f] * scale;
            y.extend(row.iter().map(|v| T::from_f64(v.to_f64() * scale + shift)));
        });
        y
    }
}

impl CustomOp3 for Normalize {
    fn name(&self) -> &'static str {
        "batch-norm"
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
        let dims = Dims::of(l1.dims())?;
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(self.forward::<f32>(
                dims,
                slice(s1, l1)?,
                slice(s2, l2)?,
                slice(s3, l3)?,
            )),
            CpuStorage::F64(_) => CpuStorage::F64(self.forward::<f64>(
                dims,
                slice(s1, l1)?,
                slice(s2, l2)?,
                slice(s3, l3)?,
            )),
            _ => candle_core::bail!("batch norm supports f32 and f64 only"),
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
        let dtype = x.dtype();
        let dims = Dims::of(x.dims())?;
        let xs = x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let gs = grad.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let gamma = gamma.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let xhat = |f: usize, v: f64| (v - self.mean[f]) * self.inv_std[f];

        // Per-feature sums of dy and dy·x̂.
        let mut sum_g = vec![0f64; dims.f];
        let mut sum_gx = vec![0f64; dims.f];
        let inner = dims.inner.max(1);
        for (r, (xr, gr)) in xs
            .chunks_exact(inner)
            .zip(gs.chunks_exact(inner))
            .enumerate()
        {
            let f = r % dims.f;
            for (&xv, &gv) in xr.iter().zip(gr) {
                sum_g[f] += gv;
                sum_gx[f] += gv * xhat(f, xv);
            }
        }
        let count = dims.count() as f64;
        let mut dx = Vec::with_capacity(xs.len());
        for (r, (xr, gr)) in xs
            .chunks_exact(inner)
            .zip(gs.chunks_exact(inner))
            .enumerate()
        {
            let f = r % dims.f;
            let k = gamma[f] * self.inv_std[f];
            if self.batch_stats {
                let (mg, mgx) = (sum_g[f] / count, sum_gx[f] / count);
                dx.extend(
                    xr.iter()
                        .zip(gr)
                        .map(|(&xv, &gv)| k * (gv - mg - xhat(f, xv) * mgx)),
                );
            } else {
                dx.extend(gr.iter().map(|&gv| k * gv));
            }
        }
        let dev = x.device();
        let dx = Tensor::from_vec(dx, x.shape(), dev)?.to_dtype(dtype)?;
        let dgamma = Tensor::from_vec(sum_gx, dims.f, dev)?.to_dtype(dtype)?;
        let dbeta = Tensor::from_vec(sum_g, dims.f, dev)?.to_dtype(dtype)?;
        Ok((Some(dx), Some(dgamma), Some(dbeta)))
    }
}

/// Normalizes with the given per-feature statistics. With `batch_stats`
/// the statistics are treated as functions of `x` in the backward pass.
pub(crate) fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    batch_stats: bool,
) -> Result<Tensor> {
    let op = Normalize {
        mean: mean.to_vec(),
        inv_std: var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect(),
        batch_stats,
    };
    x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, op)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};

    /// Batch norm from primitive candle ops, differentiated by candle.
    fn reference(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let f = x.dims()[1];
        let mut bshape = vec![1usize; x.rank()];
        bshape[1] = f;
        let flat = x
            .transpose(0, 1)
            .unwrap()
            .contiguous()
            .unwrap()
            .reshape((f, ()))
            .unwrap();
        let mean = flat.mean_keepdim(D::Minus1).unwrap();
        let var = flat
            .broadcast_sub(&mean)
            .unwrap()
            .sqr()
            .unwrap()
            .mean_keepdim(D::Minus1)
            .unwrap();
        let mean = mean.reshape(bshape.clone()).unwrap();
        let inv = (var.reshape(bshape.clone()).unwrap() + eps)
            .unwrap()
            .sqrt()
            .unwrap()
            .recip()
            .unwrap();
        x.broadcast_sub(&mean)
            .unwrap()
            .broadcast_mul(&inv)
            .unwrap()
            .broadcast_mul(&gamma.reshape(bshape.clone()).unwrap())
            .unwrap()
            .broadcast_add(&beta.reshape(bshape).unwrap())
            .unwrap()
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn matches_primitive_ops_with_gradients() {
        let dev = Device::Cpu;
        for shape in [vec![5usize, 3], vec![4, 3, 2, 6]] {
            let x = Var::from_tensor(&Tensor::randn(0.5f64, 2.0, shape.as_slice(), &dev).unwrap())
                .unwrap();
            let g = Var::from_tensor(&Tensor::randn(1f64, 0.3, 3, &dev).unwrap()).unwrap();
            let b = Var::from_tensor(&Tensor::randn(0f64, 0.3, 3, &dev).unwrap()).unwrap();
            let (mean, var) = batch_stats(x.as_tensor()).unwrap();
            let ours = batch_norm(
                x.as_tensor(),
                g.as_tensor(),
                b.as_tensor(),
                &mean,
                &var,
                1e-3,
                true,
            )
            .unwrap();
            let theirs = reference(x.as_tensor(), g.as_tensor(), b.as_tensor(), 1e-3);
            assert!(max_abs(&ours, &theirs) < 1e-12);
            let probe = Tensor::randn(0f64, 1.0, shape.as_slice(), &dev).unwrap();
            let g1 = (ours * &probe)
                .unwrap()
                .sum_all()
                .unwrap()
                .backward()
                .unwrap();
            let g2 = (theirs * &probe)
                .unwrap()
                .sum_all()
                .unwrap()
                .backward()
                .unwrap();
            for v in [&x, &g, &b] {
                assert!(
                    max_abs(
                        g1.get(v.as_tensor()).unwrap(),
                        g2.get(v.as_tensor()).unwrap()
                    ) < 1e-10
                );
            }
        }
    }

    #[test]
    fn fixed_statistics_gradient_is_scaled_identity() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (3, 2, 4), &dev).unwrap()).unwrap();
        let g = Tensor::new(&[2.0f64, 0.5], &dev).unwrap();
        let b = Tensor::zeros(2, DType::F64, &dev).unwrap();
        let y = batch_norm(x.as_tensor(), &g, &b, &[0.0, 1.0], &[3.0, 0.0], 1.0, false).unwrap();
        let grads = y.sum_all().unwrap().backward().unwrap();
        let dx = grads.get(x.as_tensor()).unwrap().to_vec3::<f64>().unwrap();
        for row in &dx {
            assert!(row[0].iter().all(|v| (v - 1.0).abs() < 1e-12));
            assert!(row[1].iter().all(|v| (v - 0.5).abs() < 1e-12));
        }
    }
}
