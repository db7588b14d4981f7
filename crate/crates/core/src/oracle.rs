//! Brute-force reference suites driven by the `oracle` and `gradcheck`
//! commands. References here are plain loops over tokens and coordinates and
//! share no code with the kernels they check beyond tensor storage.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    block_diagonal_index, gmsa_assemble, gmsa_subregion_maps, AttentionMap, Ordering, Projections, RpbTable,
};
use crate::error::{invalid, Result};
use crate::merge::{
    build_mask, dcm, inverse_dcm, merge_maps, upsample_attention, MaskGranularity, MaskTemplate, OrderingSpec,
};
use crate::model::{Model, ModelConfig};
use crate::tensor::ops;
use crate::tensor::Tensor;

/// One invariant checked over many cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantResult {
    pub name: String,
    pub tolerance: f64,
    pub cases: usize,
    pub max_error: f64,
    pub passed: bool,
    pub first_failure: Option<String>,
}

/// Outcome of one oracle suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub invariants: Vec<InvariantResult>,
    pub max_error: f64,
    pub passed: bool,
}

impl SuiteResult {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            invariants: Vec::new(),
            max_error: 0.0,
            passed: true,
        }
    }

    fn record(&mut self, invariant: &str, tolerance: f64, case: &str, error: f64) {
        let pos = match self.invariants.iter().position(|i| i.name == invariant) {
            Some(p) => p,
            None => {
                self.invariants.push(InvariantResult {
                    name: invariant.into(),
                    tolerance,
                    cases: 0,
                    max_error: 0.0,
                    passed: true,
                    first_failure: None,
                });
                self.invariants.len() - 1
            }
        };
        let inv = &mut self.invariants[pos];
        inv.cases += 1;
        inv.max_error = inv.max_error.max(error);
        self.max_error = self.max_error.max(error);
        if !(error <= inv.tolerance) {
            inv.passed = false;
            self.passed = false;
            inv.first_failure
                .get_or_insert_with(|| format!("{case} (error {error:e})"));
        }
    }

    /// Names of violated invariants.
    pub fn failed_invariants(&self) -> Vec<&str> {
        self.invariants
            .iter()
            .filter(|i| !i.passed)
            .map(|i| i.name.as_str())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub seed: u64,
    pub mask: MaskGranularity,
    pub suites: Vec<SuiteResult>,
    pub max_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct OracleOptions {
    pub seed: u64,
    pub mask: MaskGranularity,
    /// Seeds per (grid, heads) case in the attention suite.
    pub trials: usize,
    /// Flip one off-block mask entry before merging. Test hook for the
    /// failure path.
    pub corrupt_mask: bool,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn stochastic(rng: &mut ChaCha8Rng, heads: usize, n: usize, depth: usize) -> Result<AttentionMap<f64>> {
    let logits = Tensor::from_fn(&[heads, n, n], |_| rng.gen_range(-3.0..3.0));
    AttentionMap::new(ops::softmax_rows(&logits)?, Ordering::Nested(depth), 0)
}

/// Dense attention over every token of an `h × w` grid, listed subregion by
/// subregion, with logits between different subregions set to −∞.
fn masked_dense(x: &Tensor<f64>, p: &Projections<f64>, rpb: &Tensor<f64>, h: usize, w: usize) -> Vec<f64> {
    let c = x.shape()[2];
    let heads = p.heads;
    let d = p.out_channels() / heads;
    let n = h * w;
    let coord = |t: usize| {
        let (s, i) = (t / 4, t % 4);
        let (wr, wc) = (s / (w / 2), s % (w / 2));
        (2 * wr + i / 2, 2 * wc + i % 2)
    };
    let proj = |wt: &Tensor<f64>, t: usize, hd: usize| -> Vec<f64> {
        let (r, col) = coord(t);
        (0..d)
            .map(|j| (0..c).map(|ci| x.at(&[r, col, ci]) * wt.at(&[ci, hd * d + j])).sum())
            .collect()
    };
    let mut out = vec![0.0; heads * n * n];
    for hd in 0..heads {
        let q: Vec<Vec<f64>> = (0..n).map(|t| proj(&p.wq, t, hd)).collect();
        let k: Vec<Vec<f64>> = (0..n).map(|t| proj(&p.wk, t, hd)).collect();
        for a in 0..n {
            let (ra, ca) = coord(a);
            let logits: Vec<f64> = (0..n)
                .map(|b| {
                    if a / 4 != b / 4 {
                        return f64::NEG_INFINITY;
                    }
                    let (rb, cb) = coord(b);
                    let dot: f64 = q[a].iter().zip(&k[b]).map(|(u, v)| u * v).sum();
                    let idx = (ra as isize - rb as isize + 1) as usize * 3 + (ca as isize - cb as isize + 1) as usize;
                    dot / (d as f64).sqrt() + rpb.at(&[hd, idx])
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for b in 0..n {
                out[(hd * n + a) * n + b] = (logits[b] - m).exp() / z;
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Granular attention assembled block-diagonally against masked dense
/// attention, for every even grid up to 8×8 and 1–4 heads.
pub fn gmsa_suite(seed: u64, trials: usize) -> Result<SuiteResult> {
    let mut res = SuiteResult::new("gmsa_masked_dense");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for h in (2..=8).step_by(2) {
        for w in (2..=8).step_by(2) {
            for heads in 1..=4 {
                for t in 0..trials {
                    let c = 2 * heads;
                    let x = rand_tensor(&mut rng, &[h, w, c]);
                    let p = Projections::new(
                        rand_tensor(&mut rng, &[c, c]),
                        rand_tensor(&mut rng, &[c, c]),
                        rand_tensor(&mut rng, &[c, c]),
                        heads,
                    )?;
                    let rpb = RpbTable::new(rand_tensor(&mut rng, &[heads, 9]), 2, 2)?;
                    let blocks = gmsa_subregion_maps(&x, &p, &rpb)?;
                    let got = gmsa_assemble(&blocks)?;
                    let want = masked_dense(&x, &p, &rpb.values, h, w);
                    let case = format!("{h}x{w} heads={heads} trial={t}");
                    res.record(
                        "block_diagonal_equals_masked_dense",
                        1e-12,
                        &case,
                        max_diff(got.values.data(), &want),
                    );
                    let (row_err, nonneg) = got.row_stochastic_error();
                    res.record(
                        "row_stochastic",
                        1e-6,
                        &case,
                        if nonneg { row_err } else { f64::INFINITY },
                    );
                }
            }
        }
    }
    Ok(res)
}

/// The mask a template should realise, decided per entry.
fn reference_mask(g: MaskGranularity, p: usize, q: usize) -> f64 {
    let inside = match g {
        MaskGranularity::Element => p == q,
        MaskGranularity::Block => p / 4 == q / 4,
    };
    if inside {
        1.0
    } else {
        0.0
    }
}

/// Merged maps at 16, 64 and 256 fine tokens against entrywise evaluation of the merge rule, the support
/// split between current and deeper scale, and row-stochasticity after
/// renormalisation.
pub fn merge_suite(seed: u64, granularity: MaskGranularity, corrupt: bool) -> Result<SuiteResult> {
    let mut res = SuiteResult::new("merge_brute_force");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d65_7267);
    for &n in &[4usize, 16, 64] {
        for trial in 0..100 {
            let heads = 1 + trial % 2;
            let deep = stochastic(&mut rng, heads, n, 0)?;
            let blocks = ops::softmax_rows(&rand_tensor(&mut rng, &[heads, n, 4, 4]))?;
            let fine = AttentionMap::new(
                ops::gather(&blocks, &block_diagonal_index(heads, n, 4), &[heads, 4 * n, 4 * n])?,
                Ordering::Nested(1),
                1,
            )?;
            let mut mask = build_mask::<f64>(4 * n, granularity)?;
            if corrupt {
                let m = mask.matrix.with_value(4, 1.0 - mask.matrix.data()[4]);
                mask = MaskTemplate::from_parts(granularity, m)?;
            }
            let case = format!("n={} heads={heads} trial={trial}", 4 * n);
            let merged = merge_maps(&deep, &fine, &mask, false)?.map.values;
            let up = upsample_attention(&deep)?.values;
            let m = 4 * n;
            let mut eq_err = 0.0f64;
            let mut support_err = 0.0f64;
            for h in 0..heads {
                for p in 0..m {
                    for q in 0..m {
                        let e = reference_mask(granularity, p, q);
                        let u = deep.values.at(&[h, p / 4, q / 4]) / 4.0;
                        let f = fine.values.at(&[h, p, q]);
                        let got = merged.at(&[h, p, q]);
                        eq_err = eq_err.max((got - ((1.0 - e) * u + e * f)).abs());
                        let src = if e == 1.0 { f } else { up.at(&[h, p, q]) };
                        support_err = support_err.max((got - src).abs());
                    }
                }
            }
            res.record("merge_matches_entrywise_rule", 1e-12, &case, eq_err);
            res.record("merge_support", 0.0, &case, support_err);
            let err = match merge_maps(&deep, &fine, &mask, true) {
                Ok(r) => match r.map.row_stochastic_error() {
                    (err, true) => err,
                    (_, false) => f64::INFINITY,
                },
                Err(_) => f64::INFINITY,
            };
            res.record("renormalized_row_stochastic", 1e-6, &case, err);
        }
    }
    Ok(res)
}

/// Nested index of fine cell `(r, c)` by interleaving coordinate bits below
/// the coarse grid.
pub fn nested_index(r: usize, c: usize, w: usize, depth: usize) -> usize {
    let mut k = (r >> depth) * (w >> depth) + (c >> depth);
    for lvl in (0..depth).rev() {
        k = 4 * k + 2 * ((r >> lvl) & 1) + ((c >> lvl) & 1);
    }
    k
}

/// Nested↔raster permutation against coordinate enumeration, and dcm /
/// inverse_dcm round trips.
pub fn dcm_suite(seed: u64) -> Result<SuiteResult> {
    let mut res = SuiteResult::new("dcm_enumeration");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x64_636d);
    for h in [2usize, 4, 8] {
        for w in [2usize, 4, 8] {
            let mut depth = 0;
            while h % (1 << depth) == 0 && w % (1 << depth) == 0 {
                let spec = OrderingSpec::new(h, w, depth)?;
                let case = format!("{h}x{w} depth={depth}");
                let mut hits = vec![0usize; h * w];
                let mut bad = 0usize;
                for r in 0..h {
                    for c in 0..w {
                        let raster = spec.permutation()[nested_index(r, c, w, depth)];
                        hits[raster] += 1;
                        bad += usize::from(raster != r * w + c);
                    }
                }
                bad += hits.iter().filter(|&&x| x != 1).count();
                res.record("permutation_matches_enumeration", 0.0, &case, bad as f64);
                let x = rand_tensor(&mut rng, &[2, h * w, 3]);
                let back = inverse_dcm(&dcm(&x, &spec)?, &spec)?;
                res.record("round_trip_bit_exact", 0.0, &case, if back == x { 0.0 } else { 1.0 });
                depth += 1;
            }
        }
    }
    Ok(res)
}

/// Runs every suite.
pub fn run_oracles(opts: &OracleOptions) -> Result<OracleReport> {
    let suites = vec![
        gmsa_suite(opts.seed, opts.trials.max(1))?,
        merge_suite(opts.seed, opts.mask, opts.corrupt_mask)?,
        dcm_suite(opts.seed)?,
    ];
    let max_error = suites.iter().map(|s| s.max_error).fold(0.0, f64::max);
    let passed = suites.iter().all(|s| s.passed);
    Ok(OracleReport {
        seed: opts.seed,
        mask: opts.mask,
        suites,
        max_error,
        passed,
    })
}

/// Largest analytic/numeric disagreement within one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub size: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub eps_rel: f64,
    pub floor: f64,
    pub tolerance: f64,
    pub loss: f64,
    pub coordinates: usize,
    pub params: Vec<ParamCheck>,
    pub worst: ParamCheck,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` gradients with central differences of `loss` for
/// every coordinate of every named parameter, stepping by
/// `eps_rel · max(1, |p|)`.
pub fn check_gradients(
    names: &[String],
    values: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    loss: impl Fn(usize, &Tensor<f64>) -> Result<f64>,
    eps_rel: f64,
    floor: f64,
) -> Result<Vec<ParamCheck>> {
    if names.is_empty() {
        return Err(invalid("gradcheck", "model has no parameters"));
    }
    if names.len() != values.len() || values.len() != analytic.len() {
        return Err(invalid(
            "gradcheck",
            "parameter, value and gradient lists differ in length",
        ));
    }
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let numeric = crate::autograd::finite_difference_grad_scaled(|p| loss(i, p), &values[i], eps_rel)?;
            let mut worst = ParamCheck {
                name: name.clone(),
                size: values[i].len(),
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
                rel_error: -1.0,
            };
            for (j, (&a, &n)) in analytic[i].data().iter().zip(numeric.data()).enumerate() {
                let e = relative_error(a, n, floor);
                if e > worst.rel_error || e.is_nan() {
                    worst = ParamCheck {
                        worst_index: j,
                        analytic: a,
                        numeric: n,
                        rel_error: e,
                        ..worst
                    };
                }
            }
            Ok(worst)
        })
        .collect()
}

/// Narrow network used by the end-to-end gradient check.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        encoder_channels: [4, 8, 8, 8],
        decoder_channels: [8, 8, 8, 4],
        head_hidden: 8,
        deep_heads: 2,
        level_heads: 1,
        ..Default::default()
    }
}

/// Model, `[1, H, W, 3]` images and per-pixel labels.
pub type GradcheckProblem = (Model<f64>, Tensor<f64>, Arc<[usize]>);

/// Seeded model, one noise image and random labels. Relative-bias tables
/// are drawn in ±0.5 so the check is not taken at the zero-bias point.
pub fn gradcheck_problem(config: &ModelConfig, seed: u64) -> Result<GradcheckProblem> {
    let mut model = Model::<f64>::init(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let tables: Vec<_> = (model.names().iter().zip(model.values()))
        .filter(|(n, _)| n.ends_with(".rpb"))
        .map(|(n, v)| (n.clone(), v.shape().to_vec()))
        .collect();
    for (name, shape) in tables {
        model.set_param(&name, Tensor::from_fn(&shape, |_| rng.gen_range(-0.5..0.5)))?;
    }
    let (h, w) = (config.input_h, config.input_w);
    let images = rand_tensor(&mut rng, &[1, h, w, 3]);
    let labels: Arc<[usize]> = (0..h * w).map(|_| rng.gen_range(0..config.classes)).collect();
    Ok((model, images, labels))
}

/// End-to-end gradient check of `model` on one batch.
pub fn gradcheck_model(
    model: &Model<f64>,
    images: &Tensor<f64>,
    labels: &Arc<[usize]>,
    eps_rel: f64,
    floor: f64,
    tolerance: f64,
) -> Result<GradcheckReport> {
    let (loss, grads) = model.loss_and_grads(images, labels)?;
    let names = model.names().to_vec();
    let perturbed = |i: usize, p: &Tensor<f64>| {
        let mut m = model.clone();
        m.set_param(&names[i], p.clone())?;
        m.loss(images, labels)
    };
    let params = check_gradients(&names, model.values(), &grads, perturbed, eps_rel, floor)?;
    let worst = params
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .cloned()
        .expect("at least one parameter");
    let passed = params.iter().all(|p| p.rel_error < tolerance);
    Ok(GradcheckReport {
        eps_rel,
        floor,
        tolerance,
        loss,
        coordinates: model.param_count(),
        params,
        worst,
        passed,
    })
}
