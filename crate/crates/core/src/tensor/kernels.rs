//! Value-level kernels. No graph bookkeeping happens here.

use super::{Result, Tensor, TensorError};

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(mismatch(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `in_shape` laid over `out_shape`, zero along broadcast axes.
fn broadcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let lead = nd - in_shape.len();
    let mut strides = vec![0; nd];
    let mut s = 1;
    for d in (0..in_shape.len()).rev() {
        if in_shape[d] != 1 {
            strides[d + lead] = s;
        }
        s *= in_shape[d];
    }
    strides
}

/// Source offset for every position of `out_shape`, walking it in row-major order.
fn strided_offsets(out_shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let nd = out_shape.len();
    let mut res = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        res.push(off);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    res
}

fn is_broadcastable_to(from: &[usize], to: &[usize]) -> bool {
    from.len() <= to.len()
        && from
            .iter()
            .rev()
            .zip(to.iter().rev())
            .all(|(&f, &t)| f == t || f == 1)
}

pub(crate) fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    if b.numel() == 1 && b.ndim() <= a.ndim() {
        let y = b.data[0];
        return Ok(Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&x| f(x, y)).collect(),
        });
    }
    if a.numel() == 1 && a.ndim() <= b.ndim() {
        let x = a.data[0];
        return Ok(Tensor {
            shape: b.shape.clone(),
            data: b.data.iter().map(|&y| f(x, y)).collect(),
        });
    }
    let shape = broadcast_shape(op, &a.shape, &b.shape)?;
    let oa = strided_offsets(&shape, &broadcast_strides(&a.shape, &shape));
    let ob = strided_offsets(&shape, &broadcast_strides(&b.shape, &shape));
    let data = oa
        .iter()
        .zip(&ob)
        .map(|(&i, &j)| f(a.data[i], b.data[j]))
        .collect();
    Ok(Tensor { shape, data })
}

pub(crate) fn broadcast_to(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if !is_broadcastable_to(&t.shape, shape) {
        return Err(mismatch("broadcast_to", &t.shape, shape));
    }
    if t.shape == shape {
        return Ok(t.clone());
    }
    let offs = strided_offsets(shape, &broadcast_strides(&t.shape, shape));
    Ok(Tensor {
        shape: shape.to_vec(),
        data: offs.iter().map(|&i| t.data[i]).collect(),
    })
}

/// Sums `t` down to `shape`, the inverse of [`broadcast_to`].
pub(crate) fn sum_to(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if !is_broadcastable_to(shape, &t.shape) {
        return Err(mismatch("sum_to", &t.shape, shape));
    }
    if t.shape == shape {
        return Ok(t.clone());
    }
    let n: usize = shape.iter().product();
    let mut data = vec![0.0; n];
    if n == 1 {
        data[0] = t.data.iter().sum();
    } else {
        let offs = strided_offsets(&t.shape, &broadcast_strides(shape, &t.shape));
        for (&o, &v) in offs.iter().zip(&t.data) {
            data[o] += v;
        }
    }
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

pub(crate) fn keepdim_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = 1;
    s
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.ndim(), b.ndim()) {
        (2, 2) => {
            let (m, k) = (a.shape[0], a.shape[1]);
            let (k2, n) = (b.shape[0], b.shape[1]);
            if k != k2 {
                return Err(mismatch("matmul", &a.shape, &b.shape));
            }
            let mut out = vec![0.0; m * n];
            gemm(&a.data, &b.data, &mut out, m, k, n);
            Ok(Tensor {
                shape: vec![m, n],
                data: out,
            })
        }
        (3, 3) => {
            let (bs, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
            let (bs2, k2, n) = (b.shape[0], b.shape[1], b.shape[2]);
            if k != k2 || bs != bs2 {
                return Err(mismatch("matmul", &a.shape, &b.shape));
            }
            let mut out = vec![0.0; bs * m * n];
            for i in 0..bs {
                gemm(
                    &a.data[i * m * k..(i + 1) * m * k],
                    &b.data[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            Ok(Tensor {
                shape: vec![bs, m, n],
                data: out,
            })
        }
        _ => Err(mismatch("matmul", &a.shape, &b.shape)),
    }
}

fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn permute(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let nd = t.ndim();
    let mut seen = vec![false; nd];
    if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
        return Err(invalid(
            "permute",
            format!("axes {:?} are not a permutation for shape {:?}", axes, t.shape),
        ));
    }
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * t.shape[d + 1];
    }
    let shape: Vec<usize> = axes.iter().map(|&a| t.shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let offs = strided_offsets(&shape, &strides);
    Ok(Tensor {
        shape,
        data: offs.iter().map(|&i| t.data[i]).collect(),
    })
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.ndim() {
        return Err(invalid(op, format!("axis {} out of range for shape {:?}", axis, t.shape)));
    }
    Ok(())
}

pub(crate) fn slice(t: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    check_axis("slice", t, axis)?;
    let (outer, dim, inner) = split_at_axis(&t.shape, axis);
    if start > end || end > dim {
        return Err(invalid(
            "slice",
            format!("range {}..{} out of bounds for axis {} of {:?}", start, end, axis, t.shape),
        ));
    }
    let len = end - start;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * dim * inner;
        data.extend_from_slice(&t.data[base + start * inner..base + end * inner]);
    }
    let mut shape = t.shape.clone();
    shape[axis] = len;
    Ok(Tensor { shape, data })
}

/// Zero-pads `t` along `axis`, the adjoint of [`slice`].
pub(crate) fn pad(t: &Tensor, axis: usize, before: usize, after: usize) -> Result<Tensor> {
    check_axis("pad", t, axis)?;
    let (outer, dim, inner) = split_at_axis(&t.shape, axis);
    let new_dim = before + dim + after;
    let mut data = vec![0.0; outer * new_dim * inner];
    for o in 0..outer {
        let dst = o * new_dim * inner + before * inner;
        data[dst..dst + dim * inner].copy_from_slice(&t.data[o * dim * inner..(o + 1) * dim * inner]);
    }
    let mut shape = t.shape.clone();
    shape[axis] = new_dim;
    Ok(Tensor { shape, data })
}

pub(crate) fn concat(ts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = ts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
    check_axis("concat", first, axis)?;
    for t in ts {
        let ok = t.ndim() == first.ndim()
            && t.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(mismatch("concat", &first.shape, &t.shape));
        }
    }
    let (outer, _, inner) = split_at_axis(&first.shape, axis);
    let total: usize = ts.iter().map(|t| t.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in ts {
            let d = t.shape[axis];
            data.extend_from_slice(&t.data[o * d * inner..(o + 1) * d * inner]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor { shape, data })
}

/// Geometry of a 2-D cross-correlation over an `N×C×H×W` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn cols_shape(&self) -> [usize; 2] {
        let (ho, wo) = self.out_hw();
        [self.n * ho * wo, self.c * self.k * self.k]
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn from_input(shape: &[usize], k: usize, stride: usize, pad: usize) -> Result<Self> {
        if shape.len() != 4 {
            return Err(invalid("conv2d", format!("input must be N×C×H×W, got {:?}", shape)));
        }
        if stride == 0 || k == 0 || shape[2] + 2 * pad < k || shape[3] + 2 * pad < k {
            return Err(invalid(
                "conv2d",
                format!("kernel {} stride {} pad {} does not fit input {:?}", k, stride, pad, shape),
            ));
        }
        Ok(Self {
            n: shape[0],
            c: shape[1],
            h: shape[2],
            w: shape[3],
            k,
            stride,
            pad,
        })
    }

    /// Calls `f(col_index, input_index)` for every in-bounds patch element.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = self.out_hw();
        let kk = self.k * self.k;
        let row_len = self.c * kk;
        for n in 0..self.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (n * ho + oy) * wo + ox;
                    for ci in 0..self.c {
                        for ky in 0..self.k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for kx in 0..self.k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                let col = row * row_len + ci * kk + ky * self.k + kx;
                                let inp = ((n * self.c + ci) * self.h + iy as usize) * self.w
                                    + ix as usize;
                                f(col, inp);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn im2col(x: &Tensor, g: &ConvGeom) -> Result<Tensor> {
    if x.shape != g.input_shape() {
        return Err(mismatch("im2col", &x.shape, &g.input_shape()));
    }
    let shape = g.cols_shape();
    let mut data = vec![0.0; shape[0] * shape[1]];
    g.for_each(|col, inp| data[col] = x.data[inp]);
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

pub(crate) fn col2im(cols: &Tensor, g: &ConvGeom) -> Result<Tensor> {
    if cols.shape != g.cols_shape() {
        return Err(mismatch("col2im", &cols.shape, &g.cols_shape()));
    }
    let shape = g.input_shape();
    let mut data = vec![0.0; shape.iter().product()];
    g.for_each(|col, inp| data[inp] += cols.data[col]);
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

pub(crate) fn softmax_last(t: &Tensor) -> Result<Tensor> {
    let n = *t
        .shape
        .last()
        .ok_or_else(|| invalid("softmax", "scalar input has no last axis"))?;
    let mut data = t.data.clone();
    if n == 0 {
        return Ok(Tensor {
            shape: t.shape.clone(),
            data,
        });
    }
    for row in data.chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(Tensor {
        shape: t.shape.clone(),
        data,
    })
}

pub(crate) fn max_last_keepdim(t: &Tensor) -> Result<Tensor> {
    let n = *t
        .shape
        .last()
        .ok_or_else(|| invalid("max", "scalar input has no last axis"))?;
    let data = t
        .data
        .chunks(n.max(1))
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(Tensor {
        shape: keepdim_shape(&t.shape, t.ndim() - 1),
        data,
    })
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
