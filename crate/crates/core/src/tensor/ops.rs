//! Numeric kernels on [`Tensor`]. Every kernel validates shapes up front and
//! fails loudly; there is no broadcasting beyond a shared right-hand matrix
//! in [`matmul`].

use crate::analysis::macs;
use crate::error::{invalid, Error, Result};

use super::{numel, strides, Scalar, Tensor};

/// Sentinel in a gather index meaning "write zero".
pub const GATHER_ZERO: usize = usize::MAX;

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Matrix product over the last two axes.
///
/// `a` is `[..., m, k]`; `b` is either `[k, n]` (shared by every leading
/// batch entry of `a`) or `[..., k, n]` with the same leading axes as `a`.
/// Every scalar multiply-accumulate is reported to the active MAC scopes.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || rb < 2 {
        return Err(mismatch("matmul", a.shape(), b.shape()));
    }
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    let a_batch = &a.shape()[..ra - 2];
    let b_batch = &b.shape()[..rb - 2];
    if k != k2 || !(b_batch.is_empty() || b_batch == a_batch) {
        return Err(mismatch("matmul", a.shape(), b.shape()));
    }
    let batch = numel(a_batch);
    let shared_b = b_batch.is_empty();
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let a_off = bi * m * k;
        let b_off = if shared_b { 0 } else { bi * k * n };
        let o_off = bi * m * n;
        for i in 0..m {
            let row = &mut out[o_off + i * n..o_off + (i + 1) * n];
            for p in 0..k {
                let av = ad[a_off + i * k + p];
                let brow = &bd[b_off + p * n..b_off + (p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    }
    macs::record((batch * m * k * n) as u64);
    let mut shape = a_batch.to_vec();
    shape.extend([m, n]);
    Tensor::new(&shape, out)
}

/// Softmax over the last axis, stabilised by subtracting each row's maximum.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *logits
        .shape()
        .last()
        .ok_or_else(|| invalid("softmax_rows", "input must have at least one axis"))?;
    if let Some(index) = logits.first_non_finite() {
        return Err(Error::NonFinite {
            op: "softmax_rows",
            index,
        });
    }
    let mut out = logits.to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::new(logits.shape(), out)
}

/// Like [`softmax_rows`] but `-inf` entries are allowed and map to zero.
/// Each row must contain at least one finite logit.
pub fn masked_softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *logits
        .shape()
        .last()
        .ok_or_else(|| invalid("masked_softmax_rows", "input must have at least one axis"))?;
    let mut out = logits.to_vec();
    for (r, row) in out.chunks_mut(n).enumerate() {
        if let Some(i) = row.iter().position(|v| v.is_nan() || *v == T::infinity()) {
            return Err(Error::NonFinite {
                op: "masked_softmax_rows",
                index: r * n + i,
            });
        }
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        if max == T::neg_infinity() {
            return Err(invalid("masked_softmax_rows", format!("row {r} is fully masked")));
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::new(logits.shape(), out)
}

pub fn check_permutation(op: &'static str, order: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if order.len() != rank {
        return Err(invalid(
            op,
            format!("axis order {order:?} is not a permutation of 0..{rank}"),
        ));
    }
    for &o in order {
        if o >= rank || seen[o] {
            return Err(invalid(
                op,
                format!("axis order {order:?} is not a permutation of 0..{rank}"),
            ));
        }
        seen[o] = true;
    }
    Ok(())
}

/// Flat source index for every output element of `permute(shape, order)`.
pub fn permute_index(shape: &[usize], order: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = order.iter().map(|&o| shape[o]).collect();
    let src_strides: Vec<usize> = order.iter().map(|&o| in_strides[o]).collect();
    let total = numel(shape);
    let mut index = Vec::with_capacity(total);
    let mut counter = vec![0usize; shape.len()];
    let mut src = 0usize;
    for _ in 0..total {
        index.push(src);
        for ax in (0..counter.len()).rev() {
            counter[ax] += 1;
            src += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    index
}

/// Axis transposition: output axis `i` is input axis `order[i]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, order: &[usize]) -> Result<Tensor<T>> {
    check_permutation("permute", order, x.rank())?;
    let out_shape: Vec<usize> = order.iter().map(|&o| x.shape()[o]).collect();
    let data = x.data();
    let out = permute_index(x.shape(), order).into_iter().map(|i| data[i]).collect();
    Tensor::new(&out_shape, out)
}

/// Row-major reshape to `new_shape` followed by the axis transposition
/// `order`. This is the primitive behind the window/raster correspondence.
pub fn reshape_permute<T: Scalar>(x: &Tensor<T>, new_shape: &[usize], order: &[usize]) -> Result<Tensor<T>> {
    check_permutation("reshape_permute", order, new_shape.len())?;
    let reshaped = x
        .reshape(new_shape)
        .map_err(|_| mismatch("reshape_permute", x.shape(), new_shape))?;
    permute(&reshaped, order)
}

/// Inverse of an axis order: `inverse[order[i]] == i`.
pub fn inverse_order(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}

pub fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 {
        return Err(invalid("transpose", "need at least two axes"));
    }
    let mut order: Vec<usize> = (0..r).collect();
    order.swap(r - 2, r - 1);
    permute(x, &order)
}

/// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
pub fn gather<T: Scalar>(x: &Tensor<T>, index: &[usize], out_shape: &[usize]) -> Result<Tensor<T>> {
    if numel(out_shape) != index.len() {
        return Err(mismatch("gather", &[index.len()], out_shape));
    }
    let data = x.data();
    let mut out = Vec::with_capacity(index.len());
    for &i in index {
        if i == GATHER_ZERO {
            out.push(T::zero());
        } else if i < data.len() {
            out.push(data[i]);
        } else {
            return Err(invalid(
                "gather",
                format!("index {i} out of range for {} elements", data.len()),
            ));
        }
    }
    Tensor::new(out_shape, out)
}

/// Adjoint of [`gather`]: accumulates `grad[i]` into `out[index[i]]`.
pub fn scatter_add<T: Scalar>(grad: &Tensor<T>, index: &[usize], src_shape: &[usize]) -> Result<Tensor<T>> {
    let mut out = vec![T::zero(); numel(src_shape)];
    for (&i, &g) in index.iter().zip(grad.data()) {
        if i != GATHER_ZERO {
            out[i] = out[i] + g;
        }
    }
    Tensor::new(src_shape, out)
}

fn zip_with<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a.shape(), b.shape()));
    }
    let out = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), out)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("sub", a, b, |x, y| x - y)
}

/// Hadamard product.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    a.map(|v| v * c)
}

/// Adds `bias` (shape `[last]`) to every row of `a`.
pub fn add_bias<T: Scalar>(a: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *a.shape().last().unwrap_or(&0);
    if bias.shape() != [n] {
        return Err(mismatch("add_bias", a.shape(), bias.shape()));
    }
    let b = bias.data();
    let out = a.data().iter().enumerate().map(|(i, &v)| v + b[i % n]).collect();
    Tensor::new(a.shape(), out)
}

pub fn sum_all<T: Scalar>(a: &Tensor<T>) -> T {
    a.data().iter().copied().sum()
}

/// Sums over `axis`, removing it from the shape.
pub fn sum_axis<T: Scalar>(a: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= a.rank() {
        return Err(invalid(
            "sum_axis",
            format!("axis {axis} out of range for {:?}", a.shape()),
        ));
    }
    let outer = numel(&a.shape()[..axis]);
    let len = a.shape()[axis];
    let inner = numel(&a.shape()[axis + 1..]);
    let d = a.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let base = (o * len + l) * inner;
            for i in 0..inner {
                out[o * inner + i] = out[o * inner + i] + d[base + i];
            }
        }
    }
    let mut shape = a.shape().to_vec();
    shape.remove(axis);
    Tensor::new(&shape, out)
}

/// Sum of each row over the last axis; the last axis is removed.
pub fn row_sums<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    sum_axis(
        a,
        a.rank()
            .checked_sub(1)
            .ok_or_else(|| invalid("row_sums", "scalar input"))?,
    )
}

/// Concatenation along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
    if axis >= first.rank() {
        return Err(invalid(
            "concat",
            format!("axis {axis} out of range for {:?}", first.shape()),
        ));
    }
    for p in parts {
        let same = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(mismatch("concat", first.shape(), p.shape()));
        }
    }
    let outer = numel(&first.shape()[..axis]);
    let inner = numel(&first.shape()[axis + 1..]);
    let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    Tensor::new(&shape, out)
}

/// Slice `[start, start + len)` along `axis`.
pub fn narrow<T: Scalar>(a: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= a.rank() || start + len > a.shape()[axis] || len == 0 {
        return Err(invalid(
            "narrow",
            format!("[{start}, {}) on axis {axis} of {:?}", start + len, a.shape()),
        ));
    }
    let outer = numel(&a.shape()[..axis]);
    let extent = a.shape()[axis];
    let inner = numel(&a.shape()[axis + 1..]);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out.extend_from_slice(&a.data()[base..base + len * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, out)
}
