//! Two-dimensional matrix products as candle custom ops backed by
//! `matrixmultiply`, which reads arbitrary row/column strides, so transposed
//! operands in the backward pass need no copies.

use candle_core::{
    CpuStorage, CustomOp2, CustomOp3, DType, Layout, Result, Shape, Tensor, WithDType,
};

struct MatMul;

/// `(rows, cols, row stride, col stride, offset)` of a 2-D strided view.
fn view(l: &Layout, len: usize) -> Result<(usize, usize, isize, isize, usize)> {
    let (dims, stride) = (l.dims(), l.stride());
    if dims.len() != 2 {
        candle_core::bail!("matmul expects 2-D operands, got {dims:?}");
    }
    let (r, c) = (dims[0], dims[1]);
    let off = l.start_offset();
    if r > 0 && c > 0 && off + (r - 1) * stride[0] + (c - 1) * stride[1] >= len {
        candle_core::bail!("matmul operand view exceeds its storage");
    }
    Ok((r, c, stride[0] as isize, stride[1] as isize, off))
}

macro_rules! gemm {
    ($gemm:path, $a:expr, $la:expr, $b:expr, $lb:expr) => {
        gemm!($gemm, $a, $la, $b, $lb, |m: usize, n: usize| Result::Ok((
            vec![0.0; m * n],
            0.0
        )))
    };
    ($gemm:path, $a:expr, $la:expr, $b:expr, $lb:expr, $init:expr) => {{
        let (m, k, rsa, csa, oa) = view($la, $a.len())?;
        let (k2, n, rsb, csb, ob) = view($lb, $b.len())?;
        if k != k2 {
            candle_core::bail!("matmul inner dimensions differ: {k} vs {k2}");
        }
        let (mut c, beta) = $init(m, n)?;
        if m > 0 && n > 0 && k > 0 {
            // SAFETY: `view` checked that every addressed element of both
            // operands lies inside its slice, and `c` is a dense m × n buffer.
            unsafe {
                $gemm(
                    m,
                    k,
                    n,
                    1.0,
                    $a.as_ptr().add(oa),
                    rsa,
                    csa,
                    $b.as_ptr().add(ob),
                    rsb,
                    csb,
                    beta,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        (c, Shape::from((m, n)))
    }};
}

impl CustomOp2 for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let (c, shape) = gemm!(matrixmultiply::sgemm, a, l1, b, l2);
                Ok((CpuStorage::F32(c), shape))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let (c, shape) = gemm!(matrixmultiply::dgemm, a, l1, b, l2);
                Ok((CpuStorage::F64(c), shape))
            }
            _ => candle_core::bail!("matmul supports matching f32 or f64 operands only"),
        }
    }

    fn bwd(
        &self,
        a: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let ga = grad.apply_op2_no_bwd(&b.t()?, &MatMul)?;
        let gb = a.t()?.apply_op2_no_bwd(grad, &MatMul)?;
        Ok((Some(ga), Some(gb)))
    }
}

/// `a [M, K] · b [K, N]`; either operand may be a transposed view.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.apply_op2(b, MatMul)
}

/// `x Wᵀ + b` with the bias added before accumulation.
struct Affine;

/// `m` copies of the contiguous bias row, as the initial accumulator.
fn bias_rows<T: WithDType>(bias: &[T], l: &Layout, m: usize, n: usize) -> Result<Vec<T>> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("affine bias must be contiguous".into()))?;
    if end - start != n {
        candle_core::bail!("affine bias has {} entries, expected {n}", end - start);
    }
    Ok(bias[start..end].repeat(m))
}

impl CustomOp3 for Affine {
    fn name(&self) -> &'static str {
        "affine"
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
        let wt = l2.transpose(0, 1)?;
        match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => {
                let (c, shape) = gemm!(matrixmultiply::sgemm, x, l1, w, &wt, |m, n| {
                    bias_rows(b, l3, m, n).map(|c| (c, 1.0))
                });
                Ok((CpuStorage::F32(c), shape))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => {
                let (c, shape) = gemm!(matrixmultiply::dgemm, x, l1, w, &wt, |m, n| {
                    bias_rows(b, l3, m, n).map(|c| (c, 1.0))
                });
                Ok((CpuStorage::F64(c), shape))
            }
            _ => candle_core::bail!("affine supports matching f32 or f64 operands only"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let gx = grad.apply_op2_no_bwd(w, &MatMul)?;
        let gw = grad.t()?.apply_op2_no_bwd(x, &MatMul)?;
        let gb = column_sums(grad)?;
        Ok((Some(gx), Some(gw), Some(gb)))
    }
}

/// Sums over the rows of a 2-D tensor (candle's reduction over a leading
/// axis walks memory with a stride and is several times slower).
fn column_sums(t: &Tensor) -> Result<Tensor> {
    let (_, n) = t.dims2()?;
    let t = t.contiguous()?;
    match t.dtype() {
        DType::F32 => {
            let v = t.flatten_all()?.to_vec1::<f32>()?;
            let mut sums = vec![0f32; n];
            for row in v.chunks_exact(n.max(1)) {
                for (s, x) in sums.iter_mut().zip(row) {
                    *s += x;
                }
            }
            Tensor::from_vec(sums, n, t.device())
        }
        _ => t.sum(0),
    }
}

/// `x [M, K] · wᵀ + b` for `w [N, K]` and `b [N]`.
pub(crate) fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.apply_op3(w, b, Affine)
}
