//! Desk-scale segmentation network.
//!
//! A toy convolutional encoder produces a four-level pyramid at H/4 … H/32.
//! The decoder runs global attention on the deepest level, then two granular
//! attention levels (H/16, H/8) whose block-diagonal maps are merged with the
//! upsampled deeper map. Decoder features stay in nested token order until
//! the H/4 fusion stage converts them back to raster, upsamples and fuses the
//! stage-1 skip with a 3×3 convolution. A pointwise MLP head produces logits
//! that are upsampled 4× to the input resolution.
//!
//! Every stage is written against the autodiff [`Tape`], so the same code
//! serves inference, gradient checks and training.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::complexity::ModuleMacs;
use crate::analysis::macs::count_macs;
use crate::attention::{
    assemble_blocks, attention_scores, merge_heads, pair_index, project_heads, AttentionMap, Ordering, RpbTable,
};
use crate::autograd::{Tape, Var, GATHER_ZERO};
use crate::error::{invalid, Error, Result};
use crate::merge::{
    build_mask, merge_on, to_nested_index, to_raster_index, MaskGranularity, MergedAttention, OrderingSpec,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::fixture::{read_fixtures, write_fixtures};
use crate::tensor::ops;
use crate::tensor::{DType, Scalar, Tensor};

/// Network shape. `decoder_channels` are the widths of the deepest MSA, the
/// H/16 and H/8 granular levels, and the H/4 fusion convolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub encoder_channels: [usize; 4],
    pub decoder_channels: [usize; 4],
    pub head_hidden: usize,
    pub classes: usize,
    pub deep_heads: usize,
    pub level_heads: usize,
    pub mask: MaskGranularity,
    pub renormalize: bool,
    pub dtype: DType,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_h: 64,
            input_w: 64,
            encoder_channels: [16, 32, 64, 128],
            decoder_channels: [64, 32, 32, 16],
            head_hidden: 32,
            classes: 3,
            deep_heads: 4,
            level_heads: 2,
            mask: MaskGranularity::Block,
            renormalize: true,
            dtype: DType::F64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_h == 0
            || self.input_w == 0
            || !self.input_h.is_multiple_of(32)
            || !self.input_w.is_multiple_of(32)
        {
            return bad(format!(
                "input {}x{} must be a positive multiple of 32",
                self.input_h, self.input_w
            ));
        }
        if self.encoder_channels.contains(&0) || self.decoder_channels.contains(&0) || self.head_hidden == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.deep_heads == 0 || self.level_heads == 0 || !self.deep_heads.is_multiple_of(self.level_heads) {
            return bad(format!(
                "deep_heads ({}) must be a positive multiple of level_heads ({})",
                self.deep_heads, self.level_heads
            ));
        }
        if !self.decoder_channels[0].is_multiple_of(self.deep_heads) {
            return bad(format!(
                "decoder width {} does not split into {} heads",
                self.decoder_channels[0], self.deep_heads
            ));
        }
        for &c in &self.decoder_channels[1..3] {
            if c % self.level_heads != 0 {
                return bad(format!(
                    "decoder width {c} does not split into {} heads",
                    self.level_heads
                ));
            }
        }
        Ok(())
    }

    /// Spatial extents of encoder stage `i` (0-based): input / (4·2^i).
    pub fn stage_grid(&self, i: usize) -> (usize, usize) {
        let f = 4 << i;
        (self.input_h / f, self.input_w / f)
    }

    /// Names and shapes of every parameter, in binding order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let e = self.encoder_channels;
        let d = self.decoder_channels;
        let (h4, w4) = self.stage_grid(3);
        let mut out = Vec::new();
        let mut cin = 3;
        for (i, &c) in e.iter().enumerate() {
            out.push((format!("enc{i}.w"), vec![9 * cin, c]));
            out.push((format!("enc{i}.b"), vec![c]));
            cin = c;
        }
        for n in ["wq", "wk", "wv"] {
            out.push((format!("deep.{n}"), vec![e[3], d[0]]));
        }
        out.push((
            "deep.rpb".into(),
            vec![self.deep_heads, RpbTable::<f64>::table_len(h4, w4)],
        ));
        for (j, skip) in [(1usize, e[2]), (2, e[1])] {
            out.push((format!("lvl{j}.proj.w"), vec![d[j - 1] + skip, d[j]]));
            out.push((format!("lvl{j}.proj.b"), vec![d[j]]));
            for n in ["wq", "wk", "wv"] {
                out.push((format!("lvl{j}.{n}"), vec![d[j], d[j]]));
            }
            out.push((format!("lvl{j}.rpb"), vec![self.level_heads, 9]));
        }
        out.push(("fuse.w".into(), vec![9 * (d[2] + e[0]), d[3]]));
        out.push(("fuse.b".into(), vec![d[3]]));
        out.push(("head.fc1.w".into(), vec![d[3], self.head_hidden]));
        out.push(("head.fc1.b".into(), vec![self.head_hidden]));
        out.push(("head.fc2.w".into(), vec![self.head_hidden, self.classes]));
        out.push(("head.fc2.b".into(), vec![self.classes]));
        out
    }
}

/// Optimiser and smoke-run settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub poly_power: f64,
    pub steps: usize,
    pub batch: usize,
    /// Zero the output layer so the initial posterior is uniform.
    pub uniform_logit_init: bool,
    pub target_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            poly_power: 0.9,
            steps: 500,
            batch: 2,
            uniform_logit_init: true,
            target_loss: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            poly_power: self.poly_power,
            total_steps: self.steps,
        }
    }
}

/// Contents of a run config file: `[model]` and `[train]` tables, both
/// optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        if cfg.train.steps == 0 || cfg.train.batch == 0 || !(cfg.train.lr > 0.0) {
            return Err(Error::Config(
                "train.steps, train.batch and train.lr must be positive".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Widths used by the single-batch overfit run. At lr 1e-4 the margin
    /// reachable in 500 steps grows with layer width; the default widths
    /// plateau near ln 2.
    pub fn smoke() -> Self {
        Self {
            model: ModelConfig {
                encoder_channels: [32, 64, 64, 128],
                decoder_channels: [64, 64, 64, 128],
                head_hidden: 512,
                ..Default::default()
            },
            train: TrainConfig::default(),
        }
    }
}

/// Looks up bound parameter variables by name.
pub struct Bound<'a> {
    names: &'a [String],
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| invalid("model", format!("no parameter named {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn hwc(tape: &Tape<impl Scalar>, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match tape.shape(x)?.as_slice() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(invalid(op, format!("expected [H, W, C], got {s:?}"))),
    }
}

/// im2col gather map for a 3×3, padding-1 convolution of `[h, w, c]`.
pub fn im2col_index(h: usize, w: usize, c: usize, stride: usize) -> (Arc<[usize]>, usize, usize) {
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let mut idx = Vec::with_capacity(ho * wo * 9 * c);
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    let ix = (ox * stride + kx) as isize - 1;
                    let inside = (0..h as isize).contains(&iy) && (0..w as isize).contains(&ix);
                    for ch in 0..c {
                        idx.push(if inside {
                            (iy as usize * w + ix as usize) * c + ch
                        } else {
                            GATHER_ZERO
                        });
                    }
                }
            }
        }
    }
    (idx.into(), ho, wo)
}

/// 3×3 convolution with padding 1: `[h, w, c_in] → [h/s, w/s, c_out]`,
/// weights `[9·c_in, c_out]` ordered (ky, kx, c_in).
pub fn conv3x3<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
    let (h, wd, c) = hwc(tape, x, "conv3x3")?;
    let (idx, ho, wo) = im2col_index(h, wd, c, stride);
    let cols = tape.gather(x, idx, &[ho * wo, 9 * c])?;
    let y = tape.matmul(cols, w)?;
    let y = tape.add_bias(y, b)?;
    let cout = tape.shape(y)?[1];
    tape.reshape(y, &[ho, wo, cout])
}

/// Nearest-neighbour upsampling of raster `[h, w, c]` by `f`.
pub fn upsample_raster<T: Scalar>(tape: &mut Tape<T>, x: Var, f: usize) -> Result<Var> {
    let (h, w, c) = hwc(tape, x, "upsample")?;
    let idx: Arc<[usize]> = (0..h * f)
        .flat_map(|y| (0..w * f).flat_map(move |xx| (0..c).map(move |ch| ((y / f) * w + xx / f) * c + ch)))
        .collect();
    tape.gather(x, idx, &[h * f, w * f, c])
}

/// Nearest-neighbour upsampling of nested-order `[n, c]` tokens: each token
/// becomes its four contiguous children.
pub fn upsample_nested<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x)?;
    let (n, c) = (s[0], s[1]);
    let idx: Arc<[usize]> = (0..4 * n)
        .flat_map(|k| (0..c).map(move |ch| (k / 4) * c + ch))
        .collect();
    tape.gather(x, idx, &[4 * n, c])
}

/// Averages `[h, n, n]` attention heads in consecutive groups down to `heads`.
pub fn group_heads<T: Scalar>(tape: &mut Tape<T>, map: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(map)?;
    let (h, n) = (s[0], s[1]);
    if h == heads {
        return Ok(map);
    }
    if heads == 0 || h % heads != 0 {
        return Err(invalid("group_heads", format!("{h} heads do not group into {heads}")));
    }
    let g = h / heads;
    let r = tape.reshape(map, &[heads, g, n, n])?;
    let summed = tape.sum_axis(r, 1)?;
    tape.scale(summed, T::one() / T::lit(g as f64))
}

/// Four strided conv + SiLU stages, strides (4, 2, 2, 2).
pub fn toy_encoder<T: Scalar>(tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<[Var; 4]> {
    let mut x = image;
    let mut out = [image; 4];
    for (i, stride) in [4, 2, 2, 2].into_iter().enumerate() {
        let y = conv3x3(
            tape,
            x,
            p.get(&format!("enc{i}.w"))?,
            p.get(&format!("enc{i}.b"))?,
            stride,
        )?;
        x = tape.silu(y)?;
        out[i] = x;
    }
    Ok(out)
}

/// Tape variables of one decoder level.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    /// `[n, C]` in nested order.
    pub features: Var,
    /// Merged map `[heads, n, n]`.
    pub attention: Var,
    /// Block-diagonal current-scale map `[heads, n, n]`.
    pub fine: Var,
    /// Per-head values `[heads, n, d]`.
    pub values: Var,
    pub depth: usize,
    pub grid: (usize, usize),
}

/// Global attention over the deepest grid. Features are `AM·V` with heads
/// concatenated, `[n, C]`; raster order is nested(0) here.
pub fn decoder_deepest<T: Scalar>(tape: &mut Tape<T>, p: &Bound, feat4: Var, heads: usize) -> Result<LevelVars> {
    let (h, w, c) = hwc(tape, feat4, "decoder_deepest")?;
    let n = h * w;
    let x = tape.reshape(feat4, &[n, c])?;
    let q = project_heads(tape, x, p.get("deep.wq")?, heads, n)?;
    let k = project_heads(tape, x, p.get("deep.wk")?, heads, n)?;
    let v = project_heads(tape, x, p.get("deep.wv")?, heads, n)?;
    let am = attention_scores(tape, q, k, p.get("deep.rpb")?, &pair_index(h, w))?;
    let am = tape.reshape(am, &[heads, n, n])?;
    let d = tape.shape(v)?[3];
    let v = tape.reshape(v, &[heads, n, d])?;
    let y = tape.matmul(am, v)?;
    let features = merge_heads(tape, y)?;
    Ok(LevelVars {
        features,
        attention: am,
        fine: am,
        values: v,
        depth: 0,
        grid: (h, w),
    })
}

/// One granular attention level: upsample, fuse the skip in nested order,
/// project, granular attention over consecutive groups of four, merge with
/// the deeper map and mix values with the merged map.
pub fn decoder_level<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    level: usize,
    state: &LevelVars,
    skip: Var,
    cfg: &ModelConfig,
) -> Result<LevelVars> {
    let (hs, ws, cs) = hwc(tape, skip, "decoder_level")?;
    let (h, w) = state.grid;
    if (hs, ws) != (2 * h, 2 * w) {
        return Err(Error::ShapeMismatch {
            op: "decoder_level",
            lhs: vec![2 * h, 2 * w],
            rhs: vec![hs, ws],
        });
    }
    let depth = state.depth + 1;
    let spec = OrderingSpec::new(hs, ws, depth)?;
    let n = hs * ws;
    let heads = cfg.level_heads;

    let up = upsample_nested(tape, state.features)?;
    let skip = tape.reshape(skip, &[n, cs])?;
    let skip = tape.gather(skip, to_nested_index(&spec, cs), &[n, cs])?;
    let cat = tape.concat(&[up, skip], 1)?;
    let x = tape.matmul(cat, p.get(&format!("lvl{level}.proj.w"))?)?;
    let x = tape.add_bias(x, p.get(&format!("lvl{level}.proj.b"))?)?;

    let q = project_heads(tape, x, p.get(&format!("lvl{level}.wq"))?, heads, 4)?;
    let k = project_heads(tape, x, p.get(&format!("lvl{level}.wk"))?, heads, 4)?;
    let v = project_heads(tape, x, p.get(&format!("lvl{level}.wv"))?, heads, 4)?;
    let blocks = attention_scores(tape, q, k, p.get(&format!("lvl{level}.rpb"))?, &pair_index(2, 2))?;
    let fine = assemble_blocks(tape, blocks)?;

    let deep = group_heads(tape, state.attention, heads)?;
    let mask = build_mask(n, cfg.mask)?;
    let merged = merge_on(tape, deep, fine, &mask, cfg.renormalize)?;
    let d = tape.shape(v)?[3];
    let v = tape.reshape(v, &[heads, n, d])?;
    let y = tape.matmul(merged, v)?;
    let features = merge_heads(tape, y)?;
    Ok(LevelVars {
        features,
        attention: merged,
        fine,
        values: v,
        depth,
        grid: (hs, ws),
    })
}

/// Nested features back to raster, 2× upsampling, concatenation with the
/// stage-1 skip and one 3×3 convolution: `[H/4, W/4, C']`.
pub fn decoder_final<T: Scalar>(tape: &mut Tape<T>, p: &Bound, state: &LevelVars, skip1: Var) -> Result<Var> {
    let (h, w) = state.grid;
    let c = tape.shape(state.features)?[1];
    let spec = OrderingSpec::new(h, w, state.depth)?;
    let raster = tape.gather(state.features, to_raster_index(&spec, c), &[h, w, c])?;
    let up = upsample_raster(tape, raster, 2)?;
    let (hs, ws, _) = hwc(tape, skip1, "decoder_final")?;
    if (hs, ws) != (2 * h, 2 * w) {
        return Err(Error::ShapeMismatch {
            op: "decoder_final",
            lhs: vec![2 * h, 2 * w],
            rhs: vec![hs, ws],
        });
    }
    let cat = tape.concat(&[up, skip1], 2)?;
    conv3x3(tape, cat, p.get("fuse.w")?, p.get("fuse.b")?, 1)
}

/// SiLU → fc1 → SiLU → fc2 per pixel, then 4× nearest upsampling:
/// `[H/4, W/4, C'] → [H·W, classes]`.
pub fn mlp_head<T: Scalar>(tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
    let (h, w, c) = hwc(tape, x, "mlp_head")?;
    let x = tape.reshape(x, &[h * w, c])?;
    let x = tape.silu(x)?;
    let x = tape.matmul(x, p.get("head.fc1.w")?)?;
    let x = tape.add_bias(x, p.get("head.fc1.b")?)?;
    let x = tape.silu(x)?;
    let x = tape.matmul(x, p.get("head.fc2.w")?)?;
    let x = tape.add_bias(x, p.get("head.fc2.b")?)?;
    let classes = tape.shape(x)?[1];
    let x = tape.reshape(x, &[h, w, classes])?;
    let x = upsample_raster(tape, x, 4)?;
    tape.reshape(x, &[16 * h * w, classes])
}

/// Tape variables of one full forward pass over a single image.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub pyramid: [Var; 4],
    pub deep: LevelVars,
    pub levels: [LevelVars; 2],
    pub fused: Var,
    /// `[H·W, classes]`.
    pub logits: Var,
}

/// Records the whole network for one `[H, W, 3]` image.
pub fn forward_on<T: Scalar>(tape: &mut Tape<T>, p: &Bound, image: Var, cfg: &ModelConfig) -> Result<ForwardVars> {
    let (h, w, c) = hwc(tape, image, "forward")?;
    if (h, w, c) != (cfg.input_h, cfg.input_w, 3) {
        return Err(invalid(
            "forward",
            format!(
                "image [{h}, {w}, {c}] does not match config {}x{}x3",
                cfg.input_h, cfg.input_w
            ),
        ));
    }
    let pyramid = toy_encoder(tape, p, image)?;
    let deep = decoder_deepest(tape, p, pyramid[3], cfg.deep_heads)?;
    let l1 = decoder_level(tape, p, 1, &deep, pyramid[2], cfg)?;
    let l2 = decoder_level(tape, p, 2, &l1, pyramid[1], cfg)?;
    let fused = decoder_final(tape, p, &l2, pyramid[0])?;
    let logits = mlp_head(tape, p, fused)?;
    Ok(ForwardVars {
        pyramid,
        deep,
        levels: [l1, l2],
        fused,
        logits,
    })
}

/// Materialised state of one decoder level.
#[derive(Clone, Debug)]
pub struct DecoderState<T> {
    pub level: usize,
    pub grid: (usize, usize),
    /// `[n, C]` in `attention.map.ordering`.
    pub features: Tensor<T>,
    pub attention: MergedAttention<T>,
    pub fine: AttentionMap<T>,
    pub values: Tensor<T>,
}

/// Every intermediate of a single-image forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub pyramid: [Tensor<T>; 4],
    pub deep: DecoderState<T>,
    pub levels: [DecoderState<T>; 2],
    pub fused: Tensor<T>,
    /// `[H, W, classes]`.
    pub logits: Tensor<T>,
}

/// Parameters plus configuration.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// Uniform ±1/√fan_in weights and biases; attention bias tables start at
    /// zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        // biases directly follow their weight in binding order
        let mut fan_in = 1;
        Self::build(
            config,
            |name, shape, rng| {
                if name.ends_with(".rpb") {
                    return Tensor::zeros(shape);
                }
                if shape.len() == 2 {
                    fan_in = shape[0];
                }
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
            },
            seed,
        )
    }

    /// All parameters zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::build(config, |_, shape, _| Tensor::zeros(shape), 0)
    }

    fn build(
        config: ModelConfig,
        mut f: impl FnMut(&str, &[usize], &mut ChaCha8Rng) -> Tensor<T>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if config.dtype != T::DTYPE {
            return Err(Error::Config(format!(
                "config dtype {} does not match {}",
                config.dtype,
                T::DTYPE
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = config.param_shapes();
        let mut names = Vec::with_capacity(shapes.len());
        let mut values = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            values.push(f(&name, &shape, &mut rng));
            names.push(name);
        }
        Ok(Self { config, names, values })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| invalid("model", format!("no parameter named {name}")))?;
        if value.shape() != self.values[i].shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                lhs: self.values[i].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[i] = value;
        Ok(())
    }

    /// Zeroes the output layer so every pixel starts at a uniform posterior.
    pub fn zero_output_layer(&mut self) {
        for (n, v) in self.names.iter().zip(self.values.iter_mut()) {
            if n.starts_with("head.fc2.") {
                *v = Tensor::zeros(v.shape());
            }
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound<'_> {
        let vars = self.values.iter().map(|v| tape.param(v.clone())).collect();
        Bound {
            names: &self.names,
            vars,
        }
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<usize> {
        let c = &self.config;
        match images.shape() {
            &[b, h, w, 3] if h == c.input_h && w == c.input_w => Ok(b),
            s => Err(invalid(
                "forward",
                format!("images {s:?} do not match [B, {}, {}, 3]", c.input_h, c.input_w),
            )),
        }
    }

    fn image(images: &Tensor<T>, i: usize) -> Result<Tensor<T>> {
        let s = images.shape();
        ops::narrow(images, 0, i, 1)?.reshape(&s[1..])
    }

    /// Logits `[B·H·W, classes]` for a batch, recorded on `tape`.
    pub fn logits_on(&self, tape: &mut Tape<T>, p: &Bound, images: &Tensor<T>) -> Result<Var> {
        let b = self.check_images(images)?;
        let mut parts = Vec::with_capacity(b);
        for i in 0..b {
            let img = tape.constant(Self::image(images, i)?);
            parts.push(forward_on(tape, p, img, &self.config)?.logits);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat(&parts, 0)
        }
    }

    /// Logits `[B, H, W, classes]`.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.check_images(images)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let logits = self.logits_on(&mut tape, &p, images)?;
        let c = &self.config;
        tape.value(logits)?.reshape(&[b, c.input_h, c.input_w, c.classes])
    }

    /// Forward pass over one `[H, W, 3]` image keeping every intermediate.
    pub fn trace(&self, image: &Tensor<T>) -> Result<ForwardTrace<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let img = tape.constant(image.clone());
        let f = forward_on(&mut tape, &p, img, &self.config)?;
        let val = |v: Var| tape.value(v).cloned();
        let state = |lv: &LevelVars, level: usize, sources: Vec<usize>| -> Result<DecoderState<T>> {
            let ordering = Ordering::Nested(lv.depth);
            Ok(DecoderState {
                level,
                grid: lv.grid,
                features: val(lv.features)?,
                attention: MergedAttention {
                    map: AttentionMap::new(val(lv.attention)?, ordering, level)?,
                    source_scales: sources,
                },
                fine: AttentionMap::new(val(lv.fine)?, ordering, level)?,
                values: val(lv.values)?,
            })
        };
        let pyramid = [
            val(f.pyramid[0])?,
            val(f.pyramid[1])?,
            val(f.pyramid[2])?,
            val(f.pyramid[3])?,
        ];
        let c = &self.config;
        Ok(ForwardTrace {
            pyramid,
            deep: state(&f.deep, 0, vec![0])?,
            levels: [
                state(&f.levels[0], 1, vec![0, 1])?,
                state(&f.levels[1], 2, vec![0, 1, 2])?,
            ],
            fused: val(f.fused)?,
            logits: val(f.logits)?.reshape(&[c.input_h, c.input_w, c.classes])?,
        })
    }

    /// Mean pixel cross-entropy of a batch against `labels` (`B·H·W`, row-major).
    pub fn loss(&self, images: &Tensor<T>, labels: &Arc<[usize]>) -> Result<T> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let logits = self.logits_on(&mut tape, &p, images)?;
        let loss = tape.cross_entropy(logits, Arc::clone(labels))?;
        tape.value(loss)?.item()
    }

    /// Loss and the gradient of every parameter, in [`Model::names`] order.
    pub fn loss_and_grads(&self, images: &Tensor<T>, labels: &Arc<[usize]>) -> Result<(T, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let logits = self.logits_on(&mut tape, &p, images)?;
        let loss = tape.cross_entropy(logits, Arc::clone(labels))?;
        let grads = tape.backward(loss)?;
        let g = p
            .vars()
            .iter()
            .zip(&self.values)
            .map(|(&v, t)| grads.get(v, t.shape()))
            .collect::<Result<Vec<_>>>()?;
        Ok((tape.value(loss)?.item()?, g))
    }

    /// Cross-entropy plus one optimiser update. Returns the loss before the
    /// update.
    pub fn train_step(&mut self, images: &Tensor<T>, labels: &Arc<[usize]>, opt: &mut AdamW<T>) -> Result<T> {
        let (loss, grads) = self.loss_and_grads(images, labels)?;
        opt.update(&mut self.values, &grads)?;
        Ok(loss)
    }

    /// Multiply-accumulates of each stage of a single-image forward pass.
    pub fn module_macs(&self, image: &Tensor<T>) -> Result<Vec<ModuleMacs>> {
        let cfg = &self.config;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let img = tape.constant(image.clone());
        let mut out = Vec::new();
        let mut stage = |name: &str, macs: u64| {
            out.push(ModuleMacs {
                module: name.to_string(),
                macs,
            })
        };
        let (pyramid, n) = count_macs("encoder", || toy_encoder(&mut tape, &p, img))?;
        let pyramid = pyramid?;
        stage("encoder", n);
        let (deep, n) = count_macs("decoder_deep", || {
            decoder_deepest(&mut tape, &p, pyramid[3], cfg.deep_heads)
        })?;
        let deep = deep?;
        stage("decoder_deep", n);
        let (l1, n) = count_macs("decoder_level1", || {
            decoder_level(&mut tape, &p, 1, &deep, pyramid[2], cfg)
        })?;
        let l1 = l1?;
        stage("decoder_level1", n);
        let (l2, n) = count_macs("decoder_level2", || {
            decoder_level(&mut tape, &p, 2, &l1, pyramid[1], cfg)
        })?;
        let l2 = l2?;
        stage("decoder_level2", n);
        let (fused, n) = count_macs("decoder_final", || decoder_final(&mut tape, &p, &l2, pyramid[0]))?;
        let fused = fused?;
        stage("decoder_final", n);
        let (logits, n) = count_macs("head", || mlp_head(&mut tape, &p, fused))?;
        logits?;
        stage("head", n);
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> String {
        let pairs: Vec<(&str, &Tensor<T>)> = self.names.iter().map(String::as_str).zip(&self.values).collect();
        write_fixtures(&pairs)
    }

    /// Reads a checkpoint; names and shapes must match `config` exactly.
    pub fn from_checkpoint(config: ModelConfig, text: &str) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let tensors = read_fixtures::<T>(text)?;
        if tensors.len() != model.names.len() {
            return Err(invalid(
                "checkpoint",
                format!("{} tensors, model has {} parameters", tensors.len(), model.names.len()),
            ));
        }
        for (name, t) in tensors {
            model.set_param(&name, t)?;
        }
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load_checkpoint(config: ModelConfig, path: &Path) -> Result<Self> {
        Self::from_checkpoint(config, &std::fs::read_to_string(path)?)
    }
}
