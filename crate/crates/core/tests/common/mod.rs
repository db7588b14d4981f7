//! Reference implementations for integration tests. Plain loops over
//! coordinates; nothing here calls the kernels under test.

#![allow(dead_code)]

use num_bigint::BigUint;
use rand::Rng;

/// `len` uniform draws in `[-1, 1)`.
pub fn uniform(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Row, column of token `t` when an `h × w` grid is listed 2×2 subregion
/// by subregion, subregions in raster order.
pub fn subregion_coord(t: usize, w: usize) -> (usize, usize) {
    let (s, i) = (t / 4, t % 4);
    let (sr, sc) = (s / (w / 2), s % (w / 2));
    (2 * sr + i / 2, 2 * sc + i % 2)
}

/// Dense multi-head attention over all `h·w` tokens of `x` (`[h, w, c]`
/// row-major) with logits between different 2×2 subregions set to −∞.
/// `rpb[head][(dr + 1) * 3 + (dc + 1)]`. Output `[heads, n, n]` in
/// subregion-major token order.
#[allow(clippy::too_many_arguments)]
pub fn masked_dense_attention(
    x: &[f64],
    wq: &[f64],
    wk: &[f64],
    rpb: &[f64],
    h: usize,
    w: usize,
    c: usize,
    heads: usize,
) -> Vec<f64> {
    let n = h * w;
    let d = c / heads;
    let project = |wt: &[f64], t: usize, head: usize| -> Vec<f64> {
        let (r, col) = subregion_coord(t, w);
        let px = &x[(r * w + col) * c..(r * w + col + 1) * c];
        (0..d)
            .map(|j| (0..c).map(|i| px[i] * wt[i * c + head * d + j]).sum())
            .collect()
    };
    let mut out = vec![0.0; heads * n * n];
    for head in 0..heads {
        let q: Vec<_> = (0..n).map(|t| project(wq, t, head)).collect();
        let k: Vec<_> = (0..n).map(|t| project(wk, t, head)).collect();
        for a in 0..n {
            let (ra, ca) = subregion_coord(a, w);
            let logits: Vec<f64> = (0..n)
                .map(|b| {
                    let (rb, cb) = subregion_coord(b, w);
                    if (ra / 2, ca / 2) != (rb / 2, cb / 2) {
                        return f64::NEG_INFINITY;
                    }
                    let dot: f64 = q[a].iter().zip(&k[b]).map(|(u, v)| u * v).sum();
                    let bias = rpb[head * 9 + (ra + 1 - rb) * 3 + (ca + 1 - cb)];
                    dot / (d as f64).sqrt() + bias
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for b in 0..n {
                out[(head * n + a) * n + b] = (logits[b] - max).exp() / z;
            }
        }
    }
    out
}

/// Merge rule evaluated entrywise: `(1 − E[p][q]) · deep[p/4][q/4] / 4 +
/// E[p][q] · fine[p][q]` on `[heads, m, m]` maps with `m = 4 · deep tokens`.
pub fn merge_entrywise(
    deep: &[f64],
    fine: &[f64],
    e: impl Fn(usize, usize) -> f64,
    heads: usize,
    m: usize,
) -> Vec<f64> {
    let n = m / 4;
    let mut out = vec![0.0; heads * m * m];
    for h in 0..heads {
        for p in 0..m {
            for q in 0..m {
                let up = deep[(h * n + p / 4) * n + q / 4] / 4.0;
                let f = fine[(h * m + p) * m + q];
                let ev = e(p, q);
                out[(h * m + p) * m + q] = (1.0 - ev) * up + ev * f;
            }
        }
    }
    out
}

/// Nested position of raster cell `(r, c)` on an `h × w` grid with `depth`
/// levels: coarse raster index followed by the interleaved low bits of the
/// row and column, most significant level first.
pub fn nested_position(r: usize, c: usize, w: usize, depth: usize) -> usize {
    let coarse_w = w >> depth;
    let mut k = (r >> depth) * coarse_w + (c >> depth);
    for bit in (0..depth).rev() {
        k = (k << 2) | (((r >> bit) & 1) << 1) | ((c >> bit) & 1);
    }
    k
}

pub struct OmegaInputs {
    pub h: u64,
    pub w: u64,
    pub c: u64,
    pub m: u64,
    pub h0: u64,
    pub w0: u64,
}

fn big(v: u64) -> BigUint {
    BigUint::from(v)
}

pub fn omega_msa_big(p: &OmegaInputs) -> BigUint {
    let hw = big(p.h) * big(p.w);
    big(4) * &hw * big(p.c) * big(p.c) + big(2) * &hw * &hw * big(p.c)
}

pub fn omega_wmsa_big(p: &OmegaInputs) -> BigUint {
    let hw = big(p.h) * big(p.w);
    big(4) * &hw * big(p.c) * big(p.c) + big(2) * big(p.m) * big(p.m) * &hw * big(p.c)
}

pub fn omega_gmsa_big(p: &OmegaInputs) -> BigUint {
    let hw = big(p.h) * big(p.w);
    let base = big(p.h0) * big(p.w0);
    let mut ratio = &hw / &base;
    let mut log2 = 0u64;
    while ratio > big(1) {
        ratio >>= 1;
        log2 += 1;
    }
    big(4) * &hw * big(p.c) * big(p.c) + &base * &base * big(p.c) + big(16) * big(log2) * big(p.c)
}

/// Per-class IoU and binary accuracy counted pixel by pixel.
pub struct BruteScores {
    pub iou: Vec<f64>,
    pub acc: Vec<f64>,
    pub miou: f64,
    pub macc: f64,
}

pub fn brute_scores(pred: &[usize], truth: &[usize], classes: usize) -> BruteScores {
    let mut iou = Vec::with_capacity(classes);
    let mut acc = Vec::with_capacity(classes);
    for c in 0..classes {
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let union = tp + fp + fn_;
        iou.push(if union == 0 { 1.0 } else { tp as f64 / union as f64 });
        acc.push((tp + tn) as f64 / (tp + fp + fn_ + tn) as f64);
    }
    let miou = iou.iter().sum::<f64>() / classes as f64;
    let macc = acc.iter().sum::<f64>() / classes as f64;
    BruteScores { iou, acc, miou, macc }
}

/// Multiply-accumulates of one attention forward over `n` tokens of width
/// `c`: three `n × c × c` projections, then per window of `t` tokens a
/// `t × d × t` score product and a `t × t × d` mixing product per head.
/// Summed over heads, windows cover `n` tokens, giving `2·n·t·c`.
pub fn attention_macs(n: u64, c: u64, window_tokens: u64) -> u64 {
    3 * n * c * c + 2 * n * window_tokens * c
}
