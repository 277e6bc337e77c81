//! Average and max pooling along the last axis with any kernel and stride
//! (floor output length). candle's pooling backward assumes the input length
//! is covered exactly by the windows, which EEG trial lengths rarely are.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Result, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum PoolKind {
    Avg,
    Max,
}

struct TimePool {
    kind: PoolKind,
    kernel: usize,
    stride: usize,
}

impl TimePool {
    fn out_len(&self, w: usize) -> usize {
        (w - self.kernel) / self.stride + 1
    }

    fn forward<T: WithDType>(&self, x: &[T], w: usize) -> Vec<T> {
        let w_out = self.out_len(w);
        let mut y = Vec::with_capacity(x.len() / w * w_out);
        for row in x.chunks_exact(w) {
            for j in 0..w_out {
                let win = &row[j * self.stride..j * self.stride + self.kernel];
                y.push(match self.kind {
                    PoolKind::Avg => T::from_f64(
                        win.iter().map(|v| v.to_f64()).sum::<f64>() / self.kernel as f64,
                    ),
                    PoolKind::Max => win
                        .iter()
                        .copied()
                        .fold(win[0], |m, v| if v > m { v } else { m }),
                });
            }
        }
        y
    }
}

impl CustomOp1 for TimePool {
    fn name(&self) -> &'static str {
        "time-pool"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (start, end) = l
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("pooling needs a contiguous input".into()))?;
        let mut dims = l.dims().to_vec();
        let w = *dims.last().unwrap_or(&0);
        if w < self.kernel || self.kernel == 0 || self.stride == 0 {
            candle_core::bail!(
                "pooling window {}/{} does not fit length {w}",
                self.kernel,
                self.stride
            );
        }
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(self.forward(&v[start..end], w)),
            CpuStorage::F64(v) => CpuStorage::F64(self.forward(&v[start..end], w)),
            _ => candle_core::bail!("pooling supports f32 and f64 only"),
        };
        *dims.last_mut().expect("checked") = self.out_len(w);
        Ok((out, Shape::from(dims)))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let w = *x.dims().last().expect("checked in forward");
        let w_out = self.out_len(w);
        let xs = x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let gs = grad.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let mut gx = vec![0f64; xs.len()];
        for ((xr, gr), dst) in xs
            .chunks_exact(w)
            .zip(gs.chunks_exact(w_out))
            .zip(gx.chunks_exact_mut(w))
        {
            for (j, &g) in gr.iter().enumerate() {
                let lo = j * self.stride;
                match self.kind {
                    PoolKind::Avg => {
                        for d in &mut dst[lo..lo + self.kernel] {
                            *d += g / self.kernel as f64;
                        }
                    }
                    PoolKind::Max => {
                        // First maximal position takes the gradient.
                        let win = &xr[lo..lo + self.kernel];
                        let arg =
                            (1..self.kernel).fold(0, |a, i| if win[i] > win[a] { i } else { a });
                        dst[lo + arg] += g;
                    }
                }
            }
        }
        Ok(Some(
            Tensor::from_vec(gx, x.shape(), x.device())?.to_dtype(x.dtype())?,
        ))
    }
}

pub(crate) fn pool_time(
    x: &Tensor,
    kind: PoolKind,
    kernel: usize,
    stride: usize,
) -> Result<Tensor> {
    x.contiguous()?.apply_op1(TimePool {
        kind,
        kernel,
        stride,
    })
}
