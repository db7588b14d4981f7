//! Attention-map merging across scales and the nested↔raster token
//! correspondence.
//!
//! Maps travel through the decoder in nested order: the four children of
//! each coarser token are contiguous, so a coarse map upsamples to the next
//! scale by Kronecker expansion with a 4×4 all-ones block. A fixed binary
//! mask template then decides which entries come from the current scale.
//! [`dcm`] converts nested order back to raster order one reshape-permute
//! per nesting level.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMap, Ordering};
use crate::autograd::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::fixture::{read_fixtures, write_fixtures};
use crate::tensor::ops;
use crate::tensor::{Scalar, Tensor};

/// Granularity of the mask template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskGranularity {
    /// Identity matrix: only each token's self-entry is taken from the
    /// current scale.
    Element,
    /// Block-diagonal 4×4 all-ones blocks aligned with the 2×2 subregions.
    #[default]
    Block,
}

/// Binary `[n, n]` matrix `E` selecting the current-scale entries.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTemplate<T> {
    pub granularity: MaskGranularity,
    pub matrix: Tensor<T>,
}

impl<T: Scalar> MaskTemplate<T> {
    /// Wraps an explicit matrix. Entries must be 0 or 1; the structure is
    /// not checked against `granularity`.
    pub fn from_parts(granularity: MaskGranularity, matrix: Tensor<T>) -> Result<Self> {
        let s = matrix.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(invalid("mask", format!("expected a square matrix, got {s:?}")));
        }
        if matrix.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(invalid("mask", "entries must be 0 or 1"));
        }
        Ok(Self { granularity, matrix })
    }

    pub fn size(&self) -> usize {
        self.matrix.shape()[0]
    }

    /// Serialises as two named tensors: `mask.matrix` and `mask.block`
    /// (the block edge, 1 for element granularity).
    pub fn to_fixture(&self) -> String {
        let block = Tensor::scalar(T::lit(match self.granularity {
            MaskGranularity::Element => 1.0,
            MaskGranularity::Block => 4.0,
        }));
        write_fixtures(&[("mask.matrix", &self.matrix), ("mask.block", &block)])
    }

    pub fn from_fixture(text: &str) -> Result<Self> {
        let tensors = read_fixtures::<T>(text)?;
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| invalid("mask", format!("fixture lacks {name}")))
        };
        let granularity = match find("mask.block")?.item()?.as_f64() {
            1.0 => MaskGranularity::Element,
            4.0 => MaskGranularity::Block,
            b => return Err(invalid("mask", format!("unsupported block edge {b}"))),
        };
        Self::from_parts(granularity, find("mask.matrix")?)
    }
}

/// Builds the fixed mask template for `n` tokens.
pub fn build_mask<T: Scalar>(n: usize, granularity: MaskGranularity) -> Result<MaskTemplate<T>> {
    if n == 0 {
        return Err(invalid("build_mask", "n must be positive"));
    }
    let matrix = match granularity {
        MaskGranularity::Element => Tensor::eye(n),
        MaskGranularity::Block => {
            if !n.is_multiple_of(4) {
                return Err(invalid(
                    "build_mask",
                    format!("block mask needs n divisible by 4, got {n}"),
                ));
            }
            Tensor::from_fn(&[n, n], |i| {
                if (i / n) / 4 == (i % n) / 4 {
                    T::one()
                } else {
                    T::zero()
                }
            })
        }
    };
    Ok(MaskTemplate { granularity, matrix })
}

/// An attention map produced by merging, with the decoder levels it draws on.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedAttention<T> {
    pub map: AttentionMap<T>,
    pub source_scales: Vec<usize>,
}

impl<T: Scalar> MergedAttention<T> {
    /// Merges this map, as the deeper input, with the next scale's map.
    pub fn merge(&self, fine: &AttentionMap<T>, mask: &MaskTemplate<T>, renormalize: bool) -> Result<Self> {
        let mut merged = merge_maps(&self.map, fine, mask, renormalize)?;
        let mut sources = self.source_scales.clone();
        sources.push(fine.scale_id);
        merged.source_scales = sources;
        Ok(merged)
    }
}

/// Gather map for `(1/4)·(am ⊗ J₄)` before scaling: `[heads, n, n] → [heads, 4n, 4n]`.
pub fn upsample_index(heads: usize, n: usize) -> Arc<[usize]> {
    let m = 4 * n;
    let mut out = Vec::with_capacity(heads * m * m);
    for h in 0..heads {
        for p in 0..m {
            for q in 0..m {
                out.push((h * n + p / 4) * n + q / 4);
            }
        }
    }
    out.into()
}

fn nested_depth(op: &'static str, ordering: Ordering) -> Result<usize> {
    match ordering {
        Ordering::Nested(d) => Ok(d),
        Ordering::Raster => Err(invalid(op, "map must be in nested order")),
    }
}

fn check_square(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        &[h, n, m] if n == m => Ok((h, n)),
        s => Err(invalid(op, format!("expected [heads, n, n], got {s:?}"))),
    }
}

/// Tape form of [`upsample_attention`].
pub fn upsample_on<T: Scalar>(tape: &mut Tape<T>, am: Var) -> Result<Var> {
    let (heads, n) = check_square("upsample_attention", &tape.shape(am)?)?;
    let g = tape.gather(am, upsample_index(heads, n), &[heads, 4 * n, 4 * n])?;
    tape.scale(g, T::lit(0.25))
}

/// Tape form of [`merge_maps`] on raw `[heads, n, n]` / `[heads, 4n, 4n]`
/// values: `(1 − E)∘up(deep) + E∘fine`, optionally row-renormalised.
pub fn merge_on<T: Scalar>(
    tape: &mut Tape<T>,
    deep: Var,
    fine: Var,
    mask: &MaskTemplate<T>,
    renormalize: bool,
) -> Result<Var> {
    let (hd, n) = check_square("merge_maps", &tape.shape(deep)?)?;
    let (hf, m) = check_square("merge_maps", &tape.shape(fine)?)?;
    if hd != hf || m != 4 * n || mask.size() != m {
        return Err(Error::ShapeMismatch {
            op: "merge_maps",
            lhs: vec![hd, n, n, mask.size()],
            rhs: vec![hf, m, m],
        });
    }
    let tile = |t: &Tensor<T>| -> Result<Tensor<T>> {
        let parts: Vec<&Tensor<T>> = std::iter::repeat_n(t, hd).collect();
        ops::concat(&parts, 0)?.reshape(&[hd, m, m])
    };
    let keep = tape.constant(tile(&mask.matrix.map(|e| T::one() - e))?);
    let insert = tape.constant(tile(&mask.matrix)?);
    let up = upsample_on(tape, deep)?;
    let kept = tape.mul(up, keep)?;
    let inserted = tape.mul(fine, insert)?;
    let merged = tape.add(kept, inserted)?;
    if renormalize {
        tape.row_normalize(merged, T::lit(1e-12))
    } else {
        Ok(merged)
    }
}

/// `U = (1/4)·(am ⊗ J₄)`: each token becomes its four children; row sums of
/// children equal the parent's.
pub fn upsample_attention<T: Scalar>(am: &AttentionMap<T>) -> Result<AttentionMap<T>> {
    let depth = nested_depth("upsample_attention", am.ordering)?;
    let mut tape = Tape::new();
    let v = tape.constant(am.values.clone());
    let u = upsample_on(&mut tape, v)?;
    AttentionMap::new(tape.value(u)?.clone(), Ordering::Nested(depth + 1), am.scale_id)
}

/// `M = (1 − E)∘up(deep) + E∘fine`. With `renormalize`, each row is divided
/// by its sum (rows summing to at most 1e-12 are rejected). The result is in
/// nested order one level deeper than `deep`.
pub fn merge_maps<T: Scalar>(
    deep: &AttentionMap<T>,
    fine: &AttentionMap<T>,
    mask: &MaskTemplate<T>,
    renormalize: bool,
) -> Result<MergedAttention<T>> {
    let depth = nested_depth("merge_maps", deep.ordering)?;
    let fine_depth = nested_depth("merge_maps", fine.ordering)?;
    if fine_depth != depth + 1 {
        return Err(invalid(
            "merge_maps",
            format!("fine map is nested({fine_depth}), expected nested({})", depth + 1),
        ));
    }
    let mut tape = Tape::new();
    let d = tape.constant(deep.values.clone());
    let f = tape.constant(fine.values.clone());
    let m = merge_on(&mut tape, d, f, mask, renormalize)?;
    Ok(MergedAttention {
        map: AttentionMap::new(tape.value(m)?.clone(), Ordering::Nested(depth + 1), fine.scale_id)?,
        source_scales: vec![deep.scale_id, fine.scale_id],
    })
}

/// Bijection between nested token order and raster order on an `h × w`
/// grid with `depth` nesting levels above the coarsest grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrderingSpec {
    h: usize,
    w: usize,
    depth: usize,
    /// `permutation[k]` is the raster index of nested token `k`.
    permutation: Vec<usize>,
}

impl OrderingSpec {
    pub fn new(h: usize, w: usize, depth: usize) -> Result<Self> {
        let f = 1usize.checked_shl(depth as u32).unwrap_or(0);
        if h == 0 || w == 0 || f == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(invalid(
                "ordering",
                format!("a {h}x{w} grid does not support {depth} nesting levels"),
            ));
        }
        let n = h * w;
        let ids = Tensor::<f64>::from_fn(&[1, n], |i| i as f64);
        let raster = dcm_steps(&ids, h, w, depth, false)?;
        let mut permutation = vec![0; n];
        for (r, &k) in raster.data().iter().enumerate() {
            permutation[k as usize] = r;
        }
        Ok(Self {
            h,
            w,
            depth,
            permutation,
        })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    /// Extents of the coarsest grid.
    pub fn coarse_grid(&self) -> (usize, usize) {
        (self.h >> self.depth, self.w >> self.depth)
    }

    /// Nested index → raster index.
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// Raster index → nested index.
    pub fn inverse(&self) -> Vec<usize> {
        ops::inverse_order(&self.permutation)
    }

    /// Serialises as `ordering.grid = [h, w, depth]` and
    /// `ordering.permutation` (integers stored exactly as f64).
    pub fn to_fixture(&self) -> String {
        let grid = Tensor::<f64>::new(&[3], vec![self.h as f64, self.w as f64, self.depth as f64]).expect("3 values");
        let perm = Tensor::<f64>::from_fn(&[self.tokens()], |i| self.permutation[i] as f64);
        write_fixtures(&[("ordering.grid", &grid), ("ordering.permutation", &perm)])
    }

    /// Reads a fixture and checks the stored permutation against a fresh
    /// computation.
    pub fn from_fixture(text: &str) -> Result<Self> {
        let tensors = read_fixtures::<f64>(text)?;
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| invalid("ordering", format!("fixture lacks {name}")))
        };
        let grid = find("ordering.grid")?;
        let g = grid.data();
        if g.len() != 3 {
            return Err(invalid("ordering", "grid must hold [h, w, depth]"));
        }
        let spec = Self::new(g[0] as usize, g[1] as usize, g[2] as usize)?;
        let stored: Vec<usize> = find("ordering.permutation")?
            .data()
            .iter()
            .map(|&v| v as usize)
            .collect();
        if stored != spec.permutation {
            return Err(invalid("ordering", "stored permutation disagrees with the grid"));
        }
        Ok(spec)
    }
}

/// Applies (or undoes) the per-level reshape-permute sequence to the token
/// axis of `x: [B, h·w, rest...]`.
fn dcm_steps<T: Scalar>(x: &Tensor<T>, h: usize, w: usize, depth: usize, inverse: bool) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 2 || s[1] != h * w {
        return Err(invalid(
            "dcm",
            format!("token axis of {s:?} does not hold a {h}x{w} grid"),
        ));
    }
    let b = s[0];
    let rest: usize = s[2..].iter().product();
    let mut cur = x.reshape(&[b, h * w * rest])?;
    let levels: Vec<usize> = if inverse {
        (1..=depth).rev().collect()
    } else {
        (1..=depth).collect()
    };
    for j in levels {
        // grid that is raster-ordered before (forward) or after (inverse) this step
        let (hc, wc) = (h >> (depth - j + 1), w >> (depth - j + 1));
        let inner = (1usize << (2 * (depth - j))) * rest;
        let shape = if inverse {
            [b, hc, 2, wc, 2, inner]
        } else {
            [b, hc, wc, 2, 2, inner]
        };
        cur = ops::reshape_permute(&cur, &shape, &[0, 1, 3, 2, 4, 5])?;
    }
    cur.reshape(s)
}

/// Nested → raster along axis 1 of `x: [B, h·w, ...]`, one reshape-permute
/// per nesting level.
pub fn dcm<T: Scalar>(x: &Tensor<T>, spec: &OrderingSpec) -> Result<Tensor<T>> {
    dcm_steps(x, spec.h, spec.w, spec.depth, false)
}

/// Raster → nested; inverse of [`dcm`].
pub fn inverse_dcm<T: Scalar>(x: &Tensor<T>, spec: &OrderingSpec) -> Result<Tensor<T>> {
    dcm_steps(x, spec.h, spec.w, spec.depth, true)
}

/// Reorders both token axes of a nested map into raster order:
/// `out[p, q] = am[π⁻¹(p), π⁻¹(q)]`.
pub fn dcm_attention<T: Scalar>(am: &AttentionMap<T>, spec: &OrderingSpec) -> Result<AttentionMap<T>> {
    let depth = nested_depth("dcm_attention", am.ordering)?;
    if depth != spec.depth || am.tokens() != spec.tokens() {
        return Err(invalid(
            "dcm_attention",
            format!(
                "map is nested({depth}) over {} tokens, spec is depth {} over {}",
                am.tokens(),
                spec.depth,
                spec.tokens()
            ),
        ));
    }
    let rows = dcm(&am.values, spec)?;
    let cols = dcm(&ops::transpose_last2(&rows)?, spec)?;
    AttentionMap::new(ops::transpose_last2(&cols)?, Ordering::Raster, am.scale_id)
}

/// Gather map taking `[n, C]` nested tokens to raster order.
pub fn to_raster_index(spec: &OrderingSpec, channels: usize) -> Arc<[usize]> {
    let inv = spec.inverse();
    inv.iter()
        .flat_map(|&k| (0..channels).map(move |c| k * channels + c))
        .collect()
}

/// Gather map taking `[n, C]` raster tokens to nested order.
pub fn to_nested_index(spec: &OrderingSpec, channels: usize) -> Arc<[usize]> {
    spec.permutation()
        .iter()
        .flat_map(|&r| (0..channels).map(move |c| r * channels + c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stochastic(rng: &mut ChaCha8Rng, heads: usize, n: usize, ordering: Ordering) -> AttentionMap<f64> {
        let logits = Tensor::from_fn(&[heads, n, n], |_| rng.gen_range(-2.0..2.0));
        AttentionMap::new(ops::softmax_rows(&logits).unwrap(), ordering, 0).unwrap()
    }

    /// Nested index via bit interleaving of the fine coordinates.
    fn nested_of(r: usize, c: usize, w: usize, depth: usize) -> usize {
        let (cr, cc) = (r >> depth, c >> depth);
        let mut k = cr * (w >> depth) + cc;
        for lvl in (0..depth).rev() {
            k = k * 4 + ((r >> lvl) & 1) * 2 + ((c >> lvl) & 1);
        }
        k
    }

    #[test]
    fn upsample_single_token() {
        let am = AttentionMap::new(Tensor::<f64>::ones(&[1, 1, 1]), Ordering::Nested(0), 0).unwrap();
        let u = upsample_attention(&am).unwrap();
        assert_eq!(u.values, Tensor::full(&[1, 4, 4], 0.25));
        assert_eq!(u.ordering, Ordering::Nested(1));
    }

    #[test]
    fn upsample_is_kronecker() {
        let vals = Tensor::<f64>::new(&[1, 2, 2], vec![0.1, 0.9, 0.6, 0.4]).unwrap();
        let am = AttentionMap::new(vals.clone(), Ordering::Nested(0), 0).unwrap();
        let u = upsample_attention(&am).unwrap();
        for p in 0..8 {
            for q in 0..8 {
                assert_eq!(u.values.at(&[0, p, q]), vals.at(&[0, p / 4, q / 4]) / 4.0);
            }
        }
        let (err, _) = u.row_stochastic_error();
        assert!(err < 1e-12);
        assert!(upsample_attention(&am.with_ordering(Ordering::Raster)).is_err());
    }

    #[test]
    fn mask_shapes() {
        assert_eq!(
            build_mask::<f64>(4, MaskGranularity::Element).unwrap().matrix,
            Tensor::eye(4)
        );
        assert_eq!(
            build_mask::<f64>(4, MaskGranularity::Block).unwrap().matrix,
            Tensor::ones(&[4, 4])
        );
        let m = build_mask::<f64>(8, MaskGranularity::Block).unwrap().matrix;
        for p in 0..8 {
            for q in 0..8 {
                assert_eq!(m.at(&[p, q]), if p / 4 == q / 4 { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(ops::mul(&m, &m).unwrap(), m);
        assert!(build_mask::<f64>(6, MaskGranularity::Block).is_err());
        assert!(build_mask::<f64>(6, MaskGranularity::Element).is_ok());
    }

    #[test]
    fn degenerate_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let deep = stochastic(&mut rng, 2, 2, Ordering::Nested(0));
        let fine = stochastic(&mut rng, 2, 8, Ordering::Nested(1));
        let ones = MaskTemplate::from_parts(MaskGranularity::Block, Tensor::ones(&[8, 8])).unwrap();
        let zeros = MaskTemplate::from_parts(MaskGranularity::Block, Tensor::zeros(&[8, 8])).unwrap();
        assert_eq!(merge_maps(&deep, &fine, &ones, false).unwrap().map.values, fine.values);
        assert_eq!(
            merge_maps(&deep, &fine, &zeros, false).unwrap().map.values,
            upsample_attention(&deep).unwrap().values
        );
    }

    #[test]
    fn single_deep_token_block_mask_yields_fine() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let deep = AttentionMap::new(Tensor::<f64>::ones(&[1, 1, 1]), Ordering::Nested(0), 0).unwrap();
        let fine = stochastic(&mut rng, 1, 4, Ordering::Nested(1));
        let mask = build_mask(4, MaskGranularity::Block).unwrap();
        let m = merge_maps(&deep, &fine, &mask, false).unwrap();
        assert_eq!(m.map.values, fine.values);
        assert_eq!(m.map.ordering, Ordering::Nested(1));
        assert_eq!(m.source_scales, vec![0, 0]);
    }

    #[test]
    fn uniform_deep_identity_fine() {
        let deep = AttentionMap::new(Tensor::<f64>::full(&[1, 4, 4], 0.25), Ordering::Nested(0), 0).unwrap();
        let fine = AttentionMap::new(
            Tensor::<f64>::eye(16).reshape(&[1, 16, 16]).unwrap(),
            Ordering::Nested(1),
            1,
        )
        .unwrap();
        let mask = build_mask(16, MaskGranularity::Block).unwrap();
        let m = merge_maps(&deep, &fine, &mask, false).unwrap().map.values;
        for p in 0..16 {
            for q in 0..16 {
                let e = if p / 4 == q / 4 { 1.0 } else { 0.0 };
                let expected = (1.0 - e) * 0.25 / 4.0 + e * if p == q { 1.0 } else { 0.0 };
                assert_eq!(m.at(&[0, p, q]), expected);
                if p / 4 != q / 4 {
                    assert_eq!(m.at(&[0, p, q]), 1.0 / 16.0);
                }
            }
        }
    }

    #[test]
    fn renormalized_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &n in &[1usize, 4, 16] {
            for g in [MaskGranularity::Block, MaskGranularity::Element] {
                let deep = stochastic(&mut rng, 2, n, Ordering::Nested(0));
                let fine = stochastic(&mut rng, 2, 4 * n, Ordering::Nested(1));
                let mask = build_mask(4 * n, g).unwrap();
                let m = merge_maps(&deep, &fine, &mask, true).unwrap();
                let (err, nonneg) = m.map.row_stochastic_error();
                assert!(err < 1e-6 && nonneg);
            }
        }
    }

    #[test]
    fn merge_rejects_mismatches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let deep = stochastic(&mut rng, 2, 2, Ordering::Nested(0));
        let fine = stochastic(&mut rng, 1, 8, Ordering::Nested(1));
        let mask = build_mask(8, MaskGranularity::Block).unwrap();
        assert!(merge_maps(&deep, &fine, &mask, false).is_err());
        let fine = stochastic(&mut rng, 2, 8, Ordering::Nested(1));
        assert!(merge_maps(&deep, &fine, &build_mask(4, MaskGranularity::Block).unwrap(), false).is_err());
        assert!(merge_maps(&deep, &fine.clone().with_ordering(Ordering::Nested(2)), &mask, false).is_err());
        let zero = AttentionMap::new(Tensor::<f64>::zeros(&[2, 8, 8]), Ordering::Nested(1), 0).unwrap();
        let zdeep = AttentionMap::new(Tensor::<f64>::zeros(&[2, 2, 2]), Ordering::Nested(0), 0).unwrap();
        assert!(merge_maps(&zdeep, &zero, &mask, true).is_err());
        assert!(merge_maps(&zdeep, &zero, &mask, false).is_ok());
    }

    #[test]
    fn chained_merge_tracks_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let deep = stochastic(&mut rng, 1, 1, Ordering::Nested(0));
        let mut f1 = stochastic(&mut rng, 1, 4, Ordering::Nested(1));
        f1.scale_id = 1;
        let mut f2 = stochastic(&mut rng, 1, 16, Ordering::Nested(2));
        f2.scale_id = 2;
        let m1 = merge_maps(&deep, &f1, &build_mask(4, MaskGranularity::Block).unwrap(), true).unwrap();
        let m2 = m1
            .merge(&f2, &build_mask(16, MaskGranularity::Block).unwrap(), true)
            .unwrap();
        assert_eq!(m2.source_scales, vec![0, 1, 2]);
        assert_eq!(m2.map.ordering, Ordering::Nested(2));
    }

    #[test]
    fn dcm_examples() {
        assert_eq!(OrderingSpec::new(2, 2, 1).unwrap().permutation(), &[0, 1, 2, 3]);
        assert_eq!(
            OrderingSpec::new(4, 4, 1).unwrap().permutation(),
            &[0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]
        );
        assert!(OrderingSpec::new(6, 4, 2).is_err());
        assert_eq!(OrderingSpec::new(6, 4, 1).unwrap().coarse_grid(), (3, 2));
    }

    #[test]
    fn permutation_matches_bit_interleaving() {
        for &(h, w) in &[(2usize, 2usize), (4, 4), (8, 8), (4, 8), (8, 2), (6, 10), (12, 8)] {
            let mut depth = 0;
            while h % (1 << depth) == 0 && w % (1 << depth) == 0 {
                let spec = OrderingSpec::new(h, w, depth).unwrap();
                for r in 0..h {
                    for c in 0..w {
                        assert_eq!(
                            spec.permutation()[nested_of(r, c, w, depth)],
                            r * w + c,
                            "{h}x{w} d{depth}"
                        );
                    }
                }
                depth += 1;
            }
        }
    }

    #[test]
    fn dcm_round_trip_and_attention() {
        let spec = OrderingSpec::new(8, 4, 2).unwrap();
        let x = Tensor::<f64>::from_fn(&[2, 32, 3], |i| (i as f64).sin());
        let raster = dcm(&x, &spec).unwrap();
        assert_eq!(inverse_dcm(&raster, &spec).unwrap(), x);
        for k in 0..32 {
            for c in 0..3 {
                assert_eq!(raster.at(&[1, spec.permutation()[k], c]), x.at(&[1, k, c]));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = OrderingSpec::new(4, 4, 1).unwrap();
        let am = stochastic(&mut rng, 2, 16, Ordering::Nested(1));
        let r = dcm_attention(&am, &spec).unwrap();
        let inv = spec.inverse();
        for h in 0..2 {
            for p in 0..16 {
                for q in 0..16 {
                    assert_eq!(r.values.at(&[h, p, q]), am.values.at(&[h, inv[p], inv[q]]));
                }
            }
        }
        assert_eq!(r.ordering, Ordering::Raster);

        let flat = OrderingSpec::new(4, 4, 0).unwrap();
        let am0 = am.clone().with_ordering(Ordering::Nested(0));
        assert_eq!(dcm_attention(&am0, &flat).unwrap().values, am0.values);
        assert!(dcm_attention(&am, &flat).is_err());
    }

    #[test]
    fn gather_maps_agree_with_dcm() {
        let spec = OrderingSpec::new(4, 8, 2).unwrap();
        let x = Tensor::<f64>::from_fn(&[32, 5], |i| i as f64);
        let via_gather = ops::gather(&x, &to_raster_index(&spec, 5), &[32, 5]).unwrap();
        let via_dcm = dcm(&x.reshape(&[1, 32, 5]).unwrap(), &spec)
            .unwrap()
            .reshape(&[32, 5])
            .unwrap();
        assert_eq!(via_gather, via_dcm);
        let back = ops::gather(&via_gather, &to_nested_index(&spec, 5), &[32, 5]).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn fixtures_round_trip() {
        let spec = OrderingSpec::new(8, 8, 2).unwrap();
        assert_eq!(OrderingSpec::from_fixture(&spec.to_fixture()).unwrap(), spec);
        let mask = build_mask::<f64>(8, MaskGranularity::Block).unwrap();
        assert_eq!(MaskTemplate::from_fixture(&mask.to_fixture()).unwrap(), mask);
        let tampered = spec.to_fixture().replacen("\n0.0 ", "\n1.0 ", 1);
        assert!(OrderingSpec::from_fixture(&tampered).is_err());
    }
}
