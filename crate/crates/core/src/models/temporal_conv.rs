//! Grouped convolution along the time axis (kernel `1 × K`) as a candle custom
//! op with hand-written backward kernels.
//!
//! candle's generic conv path materializes large im2col buffers for the
//! long-kernel, few-channel shapes EEG backbones use; direct loops are an
//! order of magnitude faster here.

use candle_core::{CpuStorage, CustomOp2, Layout, Result, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c_in: usize,
    c_out: usize,
    groups: usize,
    h: usize,
    w_in: usize,
    k: usize,
    pad_left: usize,
    w_out: usize,
}

impl Geometry {
    fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// Output positions `t` with a valid input tap `t + k - pad_left`.
    fn valid(&self, k: usize) -> (usize, usize) {
        let lo = self.pad_left.saturating_sub(k);
        let hi = self
            .w_out
            .min((self.w_in + self.pad_left).saturating_sub(k));
        (lo, hi.max(lo))
    }

    fn x_row(&self, n: usize, c: usize, h: usize) -> usize {
        ((n * self.c_in + c) * self.h + h) * self.w_in
    }

    fn y_row(&self, n: usize, o: usize, h: usize) -> usize {
        ((n * self.c_out + o) * self.h + h) * self.w_out
    }

    fn w_row(&self, o: usize, cl: usize) -> usize {
        (o * self.in_per_group() + cl) * self.k
    }
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("temporal conv needs contiguous inputs".into()))?;
    Ok(&T::cpu_storage_as_slice(s)?[start..end])
}

#[inline(always)]
fn forward<T: WithDType>(g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); g.n * g.c_out * g.h * g.w_out];
    let (cg, og) = (g.in_per_group(), g.out_per_group());
    for n in 0..g.n {
        for o in 0..g.c_out {
            let grp = o / og;
            for cl in 0..cg {
                let ci = grp * cg + cl;
                let wrow = &w[g.w_row(o, cl)..][..g.k];
                for h in 0..g.h {
                    let xin = &x[g.x_row(n, ci, h)..][..g.w_in];
                    let out = &mut y[g.y_row(n, o, h)..][..g.w_out];
                    for (k, &wk) in wrow.iter().enumerate() {
                        let (lo, hi) = g.valid(k);
                        let src = &xin[lo + k - g.pad_left..hi + k - g.pad_left];
                        for (o_t, &x_t) in out[lo..hi].iter_mut().zip(src) {
                            *o_t += wk * x_t;
                        }
                    }
                }
            }
        }
    }
    y
}

#[inline(always)]
fn grad_input<T: WithDType>(g: &Geometry, gy: &[T], w: &[T]) -> Vec<T> {
    let mut gx = vec![T::zero(); g.n * g.c_in * g.h * g.w_in];
    let (cg, og) = (g.in_per_group(), g.out_per_group());
    for n in 0..g.n {
        for o in 0..g.c_out {
            let grp = o / og;
            for cl in 0..cg {
                let ci = grp * cg + cl;
                let wrow = &w[g.w_row(o, cl)..][..g.k];
                for h in 0..g.h {
                    let grow = &gy[g.y_row(n, o, h)..][..g.w_out];
                    let xrow = g.x_row(n, ci, h);
                    let dst_row = &mut gx[xrow..xrow + g.w_in];
                    for (k, &wk) in wrow.iter().enumerate() {
                        let (lo, hi) = g.valid(k);
                        let dst = &mut dst_row[lo + k - g.pad_left..hi + k - g.pad_left];
                        for (d, &gv) in dst.iter_mut().zip(&grow[lo..hi]) {
                            *d += wk * gv;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline(always)]
fn dot<T: WithDType>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// Kernels at least this long accumulate the weight gradient along taps
/// (one axpy per output sample); shorter ones use a dot product over time.
const TAP_MAJOR_MIN_K: usize = 16;

#[inline(always)]
fn grad_weight<T: WithDType>(g: &Geometry, x: &[T], gy: &[T]) -> Vec<T> {
    let mut gw = vec![T::zero(); g.c_out * g.in_per_group() * g.k];
    let (cg, og) = (g.in_per_group(), g.out_per_group());
    for n in 0..g.n {
        for o in 0..g.c_out {
            let grp = o / og;
            for cl in 0..cg {
                let ci = grp * cg + cl;
                let base = g.w_row(o, cl);
                for h in 0..g.h {
                    let grow = &gy[g.y_row(n, o, h)..][..g.w_out];
                    let xrow = &x[g.x_row(n, ci, h)..][..g.w_in];
                    let acc = &mut gw[base..base + g.k];
                    if g.k >= TAP_MAJOR_MIN_K {
                        for (t, &gv) in grow.iter().enumerate() {
                            let k_lo = g.pad_left.saturating_sub(t);
                            let k_hi = g.k.min((g.w_in + g.pad_left).saturating_sub(t));
                            if k_lo >= k_hi {
                                continue;
                            }
                            let src = &xrow[t + k_lo - g.pad_left..t + k_hi - g.pad_left];
                            for (a, &xv) in acc[k_lo..k_hi].iter_mut().zip(src) {
                                *a += gv * xv;
                            }
                        }
                    } else {
                        for (k, a) in acc.iter_mut().enumerate() {
                            let (lo, hi) = g.valid(k);
                            *a += dot(
                                &grow[lo..hi],
                                &xrow[lo + k - g.pad_left..hi + k - g.pad_left],
                            );
                        }
                    }
                }
            }
        }
    }
    gw
}

/// Compiles a kernel twice: generic, and with AVX2/FMA enabled for CPUs that
/// report them at run time.
macro_rules! multiversion {
    ($name:ident, $kernel:ident, $a:ident, $b:ident) => {
        fn $name<T: WithDType>(g: &Geometry, $a: &[T], $b: &[T]) -> Vec<T> {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2,fma")]
                unsafe fn wide<T: WithDType>(g: &Geometry, $a: &[T], $b: &[T]) -> Vec<T> {
                    $kernel(g, $a, $b)
                }
                if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                    // SAFETY: the required CPU features were detected above.
                    return unsafe { wide(g, $a, $b) };
                }
            }
            $kernel(g, $a, $b)
        }
    };
}

multiversion!(forward_mv, forward, x, w);
multiversion!(grad_input_mv, grad_input, gy, w);
multiversion!(grad_weight_mv, grad_weight, x, gy);

macro_rules! dispatch {
    ($s:expr, $body:ident, $g:expr, $a:expr, $la:expr, $b:expr, $lb:expr) => {
        match $s {
            CpuStorage::F32(_) => {
                let out = $body::<f32>($g, contiguous($a, $la)?, contiguous($b, $lb)?);
                CpuStorage::F32(out)
            }
            CpuStorage::F64(_) => {
                let out = $body::<f64>($g, contiguous($a, $la)?, contiguous($b, $lb)?);
                CpuStorage::F64(out)
            }
            _ => candle_core::bail!("temporal conv supports f32 and f64 only"),
        }
    };
}

struct ConvForward(Geometry);
struct ConvGradInput(Geometry);
struct ConvGradWeight(Geometry);

impl CustomOp2 for ConvForward {
    fn name(&self) -> &'static str {
        "temporal-conv"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = dispatch!(s1, forward_mv, g, s1, l1, s2, l2);
        Ok((out, Shape::from((g.n, g.c_out, g.h, g.w_out))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(w, &ConvGradInput(self.0))?;
        let gw = x.apply_op2_no_bwd(&grad, &ConvGradWeight(self.0))?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "temporal-conv-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = dispatch!(s1, grad_input_mv, g, s1, l1, s2, l2);
        Ok((out, Shape::from((g.n, g.c_in, g.h, g.w_in))))
    }
}

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "temporal-conv-grad-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = dispatch!(s1, grad_weight_mv, g, s1, l1, s2, l2);
        Ok((out, Shape::from((g.c_out, g.c_in / g.groups, 1, g.k))))
    }
}

/// Convolves `x` `[N, C_in, H, W]` with `weight` `[C_out, C_in/groups, 1, K]`
/// along the last axis, zero-padding `pad.0` samples before and `pad.1` after.
pub fn temporal_conv(
    x: &Tensor,
    weight: &Tensor,
    groups: usize,
    pad: (usize, usize),
) -> Result<Tensor> {
    let (n, c_in, h, w_in) = x.dims4()?;
    let (c_out, cg, kh, k) = weight.dims4()?;
    if kh != 1 || groups == 0 || c_in % groups != 0 || c_out % groups != 0 || cg != c_in / groups {
        candle_core::bail!(
            "temporal conv: incompatible input {:?}, kernel {:?}, groups {groups}",
            x.dims(),
            weight.dims()
        );
    }
    let padded = w_in + pad.0 + pad.1;
    if padded < k {
        candle_core::bail!("temporal conv: kernel {k} longer than padded input {padded}");
    }
    let geometry = Geometry {
        n,
        c_in,
        c_out,
        groups,
        h,
        w_in,
        k,
        pad_left: pad.0,
        w_out: padded - k + 1,
    };
    x.contiguous()?
        .apply_op2(&weight.contiguous()?, ConvForward(geometry))
}
