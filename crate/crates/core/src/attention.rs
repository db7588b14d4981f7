//! Global multi-head self-attention with relative position bias, and the
//! granular variant that attends only inside 2×2 subregions and assembles
//! the per-subregion maps block-diagonally.
//!
//! Everything is written once against the [`Tape`]; the eager functions at
//! the bottom of this module record onto a throwaway tape, so the model and
//! the standalone kernels share a single code path.

use std::sync::Arc;

use crate::autograd::{Tape, Var, GATHER_ZERO};
use crate::error::{invalid, Error, Result};
use crate::tensor::ops;
use crate::tensor::{Scalar, Tensor};

/// Token ordering of an attention map or a token sequence.
///
/// `Nested(0)` is raster order on the coarsest grid. `Nested(d)` groups the
/// four children of every depth-`d − 1` token contiguously.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ordering {
    Raster,
    Nested(usize),
}

/// Per-head square attention matrix `[heads, n, n]` with its ordering tag.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T> {
    pub values: Tensor<T>,
    pub ordering: Ordering,
    pub scale_id: usize,
}

impl<T: Scalar> AttentionMap<T> {
    pub fn new(values: Tensor<T>, ordering: Ordering, scale_id: usize) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(invalid("attention_map", format!("expected [heads, n, n], got {s:?}")));
        }
        Ok(Self {
            values,
            ordering,
            scale_id,
        })
    }

    pub fn heads(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn with_ordering(mut self, ordering: Ordering) -> Self {
        self.ordering = ordering;
        self
    }

    /// Largest deviation of any row sum from one, and whether every entry
    /// is nonnegative.
    pub fn row_stochastic_error(&self) -> (T, bool) {
        let n = self.tokens();
        let mut worst = T::zero();
        let mut nonneg = true;
        for row in self.values.data().chunks(n) {
            let s: T = row.iter().copied().sum();
            worst = worst.max((s - T::one()).abs());
            nonneg &= row.iter().all(|&v| v >= T::zero());
        }
        (worst, nonneg)
    }
}

/// Queries, keys and values `[heads, n, d_k]`.
#[derive(Clone, Debug)]
pub struct AttentionInputs<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> AttentionInputs<T> {
    pub fn new(q: Tensor<T>, k: Tensor<T>, v: Tensor<T>) -> Result<Self> {
        if q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                op: "attention_inputs",
                lhs: q.shape().to_vec(),
                rhs: if q.shape() != k.shape() { k.shape() } else { v.shape() }.to_vec(),
            });
        }
        Ok(Self { q, k, v })
    }

    pub fn heads(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.q.shape()[2]
    }
}

/// Relative position bias table for a `wh × ww` token window.
///
/// Offsets `(Δrow, Δcol)` map to `(Δrow + wh − 1)·(2ww − 1) + (Δcol + ww − 1)`.
/// One table serves every window of a module.
#[derive(Clone, Debug, PartialEq)]
pub struct RpbTable<T> {
    pub values: Tensor<T>,
    window: (usize, usize),
}

impl<T: Scalar> RpbTable<T> {
    pub fn table_len(wh: usize, ww: usize) -> usize {
        (2 * wh - 1) * (2 * ww - 1)
    }

    pub fn new(values: Tensor<T>, wh: usize, ww: usize) -> Result<Self> {
        if wh == 0 || ww == 0 {
            return Err(invalid("rpb", "window extents must be positive"));
        }
        if values.rank() != 2 || values.shape()[1] != Self::table_len(wh, ww) {
            return Err(invalid(
                "rpb",
                format!(
                    "a {wh}x{ww} window needs [heads, {}], got {:?}",
                    Self::table_len(wh, ww),
                    values.shape()
                ),
            ));
        }
        Ok(Self {
            values,
            window: (wh, ww),
        })
    }

    pub fn zeros(heads: usize, wh: usize, ww: usize) -> Self {
        Self::new(Tensor::zeros(&[heads, Self::table_len(wh, ww)]), wh, ww).expect("valid extents")
    }

    pub fn heads(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn window(&self) -> (usize, usize) {
        self.window
    }

    pub fn index(&self, drow: isize, dcol: isize) -> usize {
        offset_index(self.window, drow, dcol)
    }
}

fn offset_index((wh, ww): (usize, usize), drow: isize, dcol: isize) -> usize {
    let r = (drow + wh as isize - 1) as usize;
    let c = (dcol + ww as isize - 1) as usize;
    r * (2 * ww - 1) + c
}

/// Table index for every (query, key) pair of a raster-ordered `wh × ww`
/// window, flattened row-major over `n × n`.
pub fn pair_index(wh: usize, ww: usize) -> Vec<usize> {
    let n = wh * ww;
    let mut out = Vec::with_capacity(n * n);
    for p in 0..n {
        for q in 0..n {
            let dr = (p / ww) as isize - (q / ww) as isize;
            let dc = (p % ww) as isize - (q % ww) as isize;
            out.push(offset_index((wh, ww), dr, dc));
        }
    }
    out
}

/// Gather map broadcasting a `[heads, table]` bias over `groups` windows of
/// `n` tokens: output shape `[heads, groups, n, n]`.
pub fn bias_gather_index(heads: usize, table: usize, groups: usize, pairs: &[usize]) -> Arc<[usize]> {
    let mut out = Vec::with_capacity(heads * groups * pairs.len());
    for h in 0..heads {
        for _ in 0..groups {
            out.extend(pairs.iter().map(|&t| h * table + t));
        }
    }
    out.into()
}

/// Projects `x: [n, C]` with `w: [C, heads·d]` and splits heads:
/// result `[heads, n / group, group, d]`.
pub fn project_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, heads: usize, group: usize) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    let s = tape.shape(y)?;
    let (n, c) = (s[0], s[1]);
    if heads == 0 || c % heads != 0 || group == 0 || n % group != 0 {
        return Err(invalid(
            "project_heads",
            format!("{n} tokens x {c} channels cannot split into {heads} heads, groups of {group}"),
        ));
    }
    tape.reshape_permute(y, &[n / group, group, heads, c / heads], &[2, 0, 1, 3])
}

/// `[heads, n, d] → [n, heads·d]`.
pub fn merge_heads<T: Scalar>(tape: &mut Tape<T>, y: Var) -> Result<Var> {
    let s = tape.shape(y)?;
    if s.len() != 3 {
        return Err(invalid("merge_heads", format!("expected [heads, n, d], got {s:?}")));
    }
    let p = tape.permute(y, &[1, 0, 2])?;
    tape.reshape(p, &[s[1], s[0] * s[2]])
}

/// `softmax(Q·Kᵀ/√d_k + B)` for `q, k: [heads, groups, n, d]`, with the bias
/// gathered from `rpb: [heads, table]` through `pairs` (one table index per
/// query/key pair of a window). Returns `[heads, groups, n, n]`.
pub fn attention_scores<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, rpb: Var, pairs: &[usize]) -> Result<Var> {
    let qs = tape.shape(q)?;
    if qs.len() != 4 || tape.shape(k)? != qs {
        return Err(Error::ShapeMismatch {
            op: "attention_scores",
            lhs: qs,
            rhs: tape.shape(k)?,
        });
    }
    let (heads, groups, n, d) = (qs[0], qs[1], qs[2], qs[3]);
    let table = tape.shape(rpb)?;
    if table.len() != 2 || table[0] != heads || pairs.len() != n * n || pairs.iter().any(|&p| p >= table[1]) {
        return Err(invalid(
            "attention_map",
            format!("bias table {table:?} does not match {heads} heads over {n}-token windows"),
        ));
    }
    let kt = tape.transpose_last2(k)?;
    let raw = tape.matmul(q, kt)?;
    let scaled = tape.scale(raw, T::one() / T::lit(d as f64).sqrt())?;
    let bias = tape.gather(
        rpb,
        bias_gather_index(heads, table[1], groups, pairs),
        &[heads, groups, n, n],
    )?;
    let logits = tape.add(scaled, bias)?;
    tape.softmax(logits)
}

/// Gather map placing `[heads, N, 4, 4]` blocks on the diagonal of
/// `[heads, 4N, 4N]`; off-block entries are zero.
pub fn block_diagonal_index(heads: usize, blocks: usize, b: usize) -> Arc<[usize]> {
    let n = blocks * b;
    let mut out = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        for p in 0..n {
            for q in 0..n {
                out.push(if p / b == q / b {
                    let s = p / b;
                    ((h * blocks + s) * b + p % b) * b + q % b
                } else {
                    GATHER_ZERO
                });
            }
        }
    }
    out.into()
}

/// Tape form of [`gmsa_assemble`]: `[heads, N, b, b] → [heads, N·b, N·b]`.
pub fn assemble_blocks<T: Scalar>(tape: &mut Tape<T>, blocks: Var) -> Result<Var> {
    let s = tape.shape(blocks)?;
    if s.len() != 4 || s[2] != s[3] {
        return Err(invalid(
            "gmsa_assemble",
            format!("expected [heads, N, b, b], got {s:?}"),
        ));
    }
    let (heads, count, b) = (s[0], s[1], s[2]);
    let n = count * b;
    tape.gather(blocks, block_diagonal_index(heads, count, b), &[heads, n, n])
}

/// Weights of one attention module. Projections are bias-free `[C_in, C]`.
#[derive(Clone, Debug)]
pub struct Projections<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub heads: usize,
}

impl<T: Scalar> Projections<T> {
    pub fn new(wq: Tensor<T>, wk: Tensor<T>, wv: Tensor<T>, heads: usize) -> Result<Self> {
        let s = wq.shape().to_vec();
        if s.len() != 2 || wk.shape() != s.as_slice() || wv.shape() != s.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "projections",
                lhs: s,
                rhs: wk.shape().to_vec(),
            });
        }
        if heads == 0 || !s[1].is_multiple_of(heads) {
            return Err(invalid(
                "projections",
                format!("{} channels do not split into {heads} heads", s[1]),
            ));
        }
        Ok(Self { wq, wk, wv, heads })
    }

    pub fn in_channels(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.wq.shape()[1]
    }
}

struct Bound {
    q: Var,
    k: Var,
    v: Var,
}

fn bind_projections<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &Projections<T>, group: usize) -> Result<Bound> {
    let wq = tape.constant(p.wq.clone());
    let wk = tape.constant(p.wk.clone());
    let wv = tape.constant(p.wv.clone());
    Ok(Bound {
        q: project_heads(tape, x, wq, p.heads, group)?,
        k: project_heads(tape, x, wk, p.heads, group)?,
        v: project_heads(tape, x, wv, p.heads, group)?,
    })
}

fn check_hwc<T: Scalar>(op: &'static str, features: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match features.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(invalid(op, format!("expected [H, W, C], got {s:?}"))),
    }
}

/// Attention map per head: `softmax(Q·Kᵀ/√d_k + B)` where tokens are the
/// raster-ordered cells of the bias table's window.
pub fn attention_map<T: Scalar>(inputs: &AttentionInputs<T>, rpb: &RpbTable<T>) -> Result<AttentionMap<T>> {
    let (heads, n, d) = (inputs.heads(), inputs.tokens(), inputs.head_dim());
    let (wh, ww) = rpb.window();
    if wh * ww != n || rpb.heads() != heads {
        return Err(invalid(
            "attention_map",
            format!("{heads}-head bias over a {wh}x{ww} grid does not fit {heads} heads x {n} tokens"),
        ));
    }
    if d == 0 {
        return Err(invalid("attention_map", "d_k must be positive"));
    }
    let mut tape = Tape::new();
    let q = tape.constant(inputs.q.reshape(&[heads, 1, n, d])?);
    let k = tape.constant(inputs.k.reshape(&[heads, 1, n, d])?);
    let table = tape.constant(rpb.values.clone());
    let am = attention_scores(&mut tape, q, k, table, &pair_index(wh, ww))?;
    AttentionMap::new(tape.value(am)?.reshape(&[heads, n, n])?, Ordering::Nested(0), 0)
}

/// `AM · V` per head.
pub fn attention_output<T: Scalar>(am: &AttentionMap<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if v.rank() != 3 || v.shape()[0] != am.heads() || v.shape()[1] != am.tokens() {
        return Err(Error::ShapeMismatch {
            op: "attention_output",
            lhs: am.values.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    ops::matmul(&am.values, v)
}

/// `[B, H, W, C] → [B, (H/2)(W/2), 4, C]`; subregion `(wr, wc)` holds pixels
/// `(2wr + ir, 2wc + ic)` for `(ir, ic)` in raster order.
pub fn partition_2x2<T: Scalar>(features: &Tensor<T>) -> Result<Tensor<T>> {
    let &[b, h, w, c] = features.shape() else {
        return Err(invalid(
            "partition_2x2",
            format!("expected [B, H, W, C], got {:?}", features.shape()),
        ));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid("partition_2x2", format!("H and W must be even, got {h}x{w}")));
    }
    ops::reshape_permute(features, &[b, h / 2, 2, w / 2, 2, c], &[0, 1, 3, 2, 4, 5])?.reshape(&[
        b,
        (h / 2) * (w / 2),
        4,
        c,
    ])
}

/// Inverse of [`partition_2x2`].
pub fn unpartition_2x2<T: Scalar>(parts: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let &[b, n, four, c] = parts.shape() else {
        return Err(invalid(
            "unpartition_2x2",
            format!("expected [B, N, 4, C], got {:?}", parts.shape()),
        ));
    };
    if four != 4 || !h.is_multiple_of(2) || !w.is_multiple_of(2) || n != (h / 2) * (w / 2) {
        return Err(invalid(
            "unpartition_2x2",
            format!("{:?} does not tile a {h}x{w} grid", parts.shape()),
        ));
    }
    ops::reshape_permute(parts, &[b, h / 2, w / 2, 2, 2, c], &[0, 1, 3, 2, 4, 5])?.reshape(&[b, h, w, c])
}

fn subregion_tokens<T: Scalar>(features: &Tensor<T>) -> Result<(Tensor<T>, usize, usize)> {
    let (h, w, c) = check_hwc("gmsa", features)?;
    let parts = partition_2x2(&features.reshape(&[1, h, w, c])?)?;
    let count = parts.shape()[1];
    Ok((parts.reshape(&[count * 4, c])?, count, c))
}

/// Per-subregion 4×4 attention maps of granular attention over `[H, W, C]`
/// features. Projection weights and the 9-entry bias table are shared by
/// every subregion; maps are returned in subregion raster order.
pub fn gmsa_subregion_maps<T: Scalar>(
    features: &Tensor<T>,
    projections: &Projections<T>,
    rpb: &RpbTable<T>,
) -> Result<Vec<AttentionMap<T>>> {
    let blocks = gmsa_blocks_eager(features, projections, rpb)?.0;
    let (heads, count) = (blocks.shape()[0], blocks.shape()[1]);
    let per_head = ops::permute(&blocks, &[1, 0, 2, 3])?;
    (0..count)
        .map(|s| {
            let block = ops::narrow(&per_head, 0, s, 1)?.reshape(&[heads, 4, 4])?;
            AttentionMap::new(block, Ordering::Nested(1), 0)
        })
        .collect()
}

fn check_gmsa_rpb<T: Scalar>(projections: &Projections<T>, rpb: &RpbTable<T>) -> Result<()> {
    if rpb.window() != (2, 2) || rpb.heads() != projections.heads {
        return Err(invalid(
            "gmsa",
            format!(
                "granular attention needs a {}-head 2x2 bias table, got {} heads over {:?}",
                projections.heads,
                rpb.heads(),
                rpb.window()
            ),
        ));
    }
    Ok(())
}

/// Returns `([heads, N, 4, 4] blocks, [heads, N, 4, d] values)`.
fn gmsa_blocks_eager<T: Scalar>(
    features: &Tensor<T>,
    projections: &Projections<T>,
    rpb: &RpbTable<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_gmsa_rpb(projections, rpb)?;
    let (tokens, _, _) = subregion_tokens(features)?;
    let mut tape = Tape::new();
    let x = tape.constant(tokens);
    let b = bind_projections(&mut tape, x, projections, 4)?;
    let table = tape.constant(rpb.values.clone());
    let blocks = attention_scores(&mut tape, b.q, b.k, table, &pair_index(2, 2))?;
    Ok((tape.value(blocks)?.clone(), tape.value(b.v)?.clone()))
}

/// Places 4×4 subregion maps on the diagonal of one `[heads, 4N, 4N]` map.
/// Token order is subregion-major.
pub fn gmsa_assemble<T: Scalar>(blocks: &[AttentionMap<T>]) -> Result<AttentionMap<T>> {
    let first = blocks.first().ok_or_else(|| invalid("gmsa_assemble", "no blocks"))?;
    let heads = first.heads();
    for b in blocks {
        if b.values.shape() != [heads, 4, 4] {
            return Err(Error::ShapeMismatch {
                op: "gmsa_assemble",
                lhs: first.values.shape().to_vec(),
                rhs: b.values.shape().to_vec(),
            });
        }
    }
    let parts: Vec<Tensor<T>> = blocks
        .iter()
        .map(|b| b.values.reshape(&[heads, 1, 4, 4]))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    let stacked = ops::concat(&refs, 1)?;
    let n = blocks.len() * 4;
    let values = ops::gather(&stacked, &block_diagonal_index(heads, blocks.len(), 4), &[heads, n, n])?;
    AttentionMap::new(values, Ordering::Nested(1), first.scale_id)
}

/// Global attention over raster `[h, w, C]` features with a `(2h−1)(2w−1)`
/// bias table. Returns the map and the merged-head output `[h, w, C]`.
pub fn msa_forward<T: Scalar>(
    features: &Tensor<T>,
    projections: &Projections<T>,
    rpb: &RpbTable<T>,
) -> Result<(AttentionMap<T>, Tensor<T>)> {
    let (h, w, c) = check_hwc("msa", features)?;
    if rpb.window() != (h, w) || rpb.heads() != projections.heads {
        return Err(invalid(
            "msa",
            format!("bias table over {:?} does not match a {h}x{w} grid", rpb.window()),
        ));
    }
    let n = h * w;
    let mut tape = Tape::new();
    let x = tape.constant(features.reshape(&[n, c])?);
    let b = bind_projections(&mut tape, x, projections, n)?;
    let table = tape.constant(rpb.values.clone());
    let am = attention_scores(&mut tape, b.q, b.k, table, &pair_index(h, w))?;
    let heads = projections.heads;
    let am3 = tape.reshape(am, &[heads, n, n])?;
    let d = projections.out_channels() / heads;
    let v3 = tape.reshape(b.v, &[heads, n, d])?;
    let y = tape.matmul(am3, v3)?;
    let y = merge_heads(&mut tape, y)?;
    let out = tape.value(y)?.reshape(&[h, w, heads * d])?;
    Ok((
        AttentionMap::new(tape.value(am3)?.clone(), Ordering::Nested(0), 0)?,
        out,
    ))
}

/// Granular attention restricted to each subregion: per-subregion maps plus
/// the block-local output `[H, W, C]` in raster order.
pub fn gmsa_forward<T: Scalar>(
    features: &Tensor<T>,
    projections: &Projections<T>,
    rpb: &RpbTable<T>,
) -> Result<(Vec<AttentionMap<T>>, Tensor<T>)> {
    let (h, w, _) = check_hwc("gmsa", features)?;
    let (blocks, v) = gmsa_blocks_eager(features, projections, rpb)?;
    let mixed = ops::matmul(&blocks, &v)?;
    let (heads, count, d) = (mixed.shape()[0], mixed.shape()[1], mixed.shape()[3]);
    let tokens = ops::permute(&mixed, &[1, 2, 0, 3])?.reshape(&[1, count, 4, heads * d])?;
    let out = unpartition_2x2(&tokens, h, w)?.reshape(&[h, w, heads * d])?;
    let per_head = ops::permute(&blocks, &[1, 0, 2, 3])?;
    let maps = (0..count)
        .map(|s| {
            let block = ops::narrow(&per_head, 0, s, 1)?.reshape(&[heads, 4, 4])?;
            AttentionMap::new(block, Ordering::Nested(1), 0)
        })
        .collect::<Result<_>>()?;
    Ok((maps, out))
}
