//! Reverse-mode differentiation over a Wengert tape.
//!
//! Every operation appends a node holding its forward value; nodes are
//! stored in creation order, which is a topological order, so the backward
//! pass is a single reverse sweep. [`Var`] handles carry the tape generation
//! and are rejected once the tape has been [`reset`](Tape::reset).

use std::sync::Arc;

use crate::error::{invalid, Error, Result};
pub use crate::tensor::ops::GATHER_ZERO;

use crate::tensor::ops;
use crate::tensor::{numel, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    generation: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Param,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddBias(usize, usize),
    Silu(usize),
    Softmax(usize),
    RowNormalize(usize),
    Gather(usize, Arc<[usize]>),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    SumAll(usize),
    SumAxis(usize, usize),
    CrossEntropy(usize, Arc<[usize]>),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Param | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Silu(a)
            | Op::Softmax(a)
            | Op::RowNormalize(a)
            | Op::Gather(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::SumAll(a)
            | Op::SumAxis(a, _)
            | Op::CrossEntropy(a, _) => vec![*a],
            Op::Concat(v, _) => v.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::Silu(..) => "silu",
            Op::Softmax(..) => "softmax",
            Op::RowNormalize(..) => "row_normalize",
            Op::Gather(..) => "gather",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::SumAll(..) => "sum_all",
            Op::SumAxis(..) => "sum_axis",
            Op::CrossEntropy(..) => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass. Single-threaded.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    generation: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    generation: u64,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros if `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var, shape: &[usize]) -> Result<Tensor<T>> {
        if v.generation != self.generation {
            return Err(Error::StaleVar {
                var: v.generation,
                tape: self.generation,
            });
        }
        Ok(self
            .grads
            .get(v.index)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(shape)))
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.generation != self.generation {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            generation: 0,
        }
    }

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.generation += 1;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.index >= self.nodes.len() {
            return Err(Error::StaleVar {
                var: v.generation,
                tape: self.generation,
            });
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = match &op {
            Op::Param => true,
            Op::Constant => false,
            other => other.inputs().iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Param)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        Ok(self.value(v)?.shape().to_vec())
    }

    /// Operation names in the order [`backward`](Self::backward) visits them.
    pub fn backward_order(&self) -> Vec<(usize, &'static str)> {
        (0..self.nodes.len())
            .rev()
            .map(|i| (i, self.nodes[i].op.name()))
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = ops::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(out, Op::MatMul(ia, ib)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = ops::add(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(out, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = ops::sub(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(out, Op::Sub(ia, ib)))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = ops::mul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(out, Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let ia = self.check(a)?;
        let out = ops::scale(&self.nodes[ia].value, c);
        Ok(self.push(out, Op::Scale(ia, c)))
    }

    /// Adds a `[last]`-shaped bias to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(bias)?);
        let out = ops::add_bias(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(out, Op::AddBias(ia, ib)))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|x| x / (T::one() + (-x).exp()));
        Ok(self.push(out, Op::Silu(ia)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = ops::softmax_rows(&self.nodes[ia].value)?;
        Ok(self.push(out, Op::Softmax(ia)))
    }

    /// Divides every row (last axis) by its sum. Rows summing to at most
    /// `min_sum` are rejected.
    pub fn row_normalize(&mut self, a: Var, min_sum: T) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        let n = *x
            .shape()
            .last()
            .ok_or_else(|| invalid("row_normalize", "scalar input"))?;
        let mut out = x.to_vec();
        for (r, row) in out.chunks_mut(n).enumerate() {
            let s: T = row.iter().copied().sum();
            if !(s > min_sum) {
                return Err(invalid(
                    "row_normalize",
                    format!("row {r} sums to {s}, not above {min_sum}"),
                ));
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.push(out, Op::RowNormalize(ia)))
    }

    /// `out[i] = a[index[i]]`, zero where the index is [`GATHER_ZERO`].
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, out_shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let out = ops::gather(&self.nodes[ia].value, &index, out_shape)?;
        Ok(self.push(out, Op::Gather(ia, index)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.reshape(shape)?;
        Ok(self.push(out, Op::Reshape(ia)))
    }

    pub fn permute(&mut self, a: Var, order: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let out = ops::permute(&self.nodes[ia].value, order)?;
        Ok(self.push(out, Op::Permute(ia, order.to_vec())))
    }

    pub fn reshape_permute(&mut self, a: Var, shape: &[usize], order: &[usize]) -> Result<Var> {
        ops::check_permutation("reshape_permute", order, shape.len())?;
        let r = self.reshape(a, shape)?;
        self.permute(r, order)
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a)?.rank();
        if r < 2 {
            return Err(invalid("transpose", "need at least two axes"));
        }
        let mut order: Vec<usize> = (0..r).collect();
        order.swap(r - 2, r - 1);
        self.permute(a, &order)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let tensors: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = ops::concat(&tensors, axis)?;
        Ok(self.push(out, Op::Concat(idx, axis)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = Tensor::scalar(ops::sum_all(&self.nodes[ia].value));
        Ok(self.push(out, Op::SumAll(ia)))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let out = ops::sum_axis(&self.nodes[ia].value, axis)?;
        Ok(self.push(out, Op::SumAxis(ia, axis)))
    }

    /// Mean cross-entropy of `logits: [P, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<[usize]>) -> Result<Var> {
        let il = self.check(logits)?;
        let x = &self.nodes[il].value;
        if x.rank() != 2 || x.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: x.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let c = x.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(invalid(
                "cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        if let Some(index) = x.first_non_finite() {
            return Err(Error::NonFinite {
                op: "cross_entropy",
                index,
            });
        }
        // compensated sum: finite-difference checks difference two nearby losses
        let (mut total, mut carry) = (T::zero(), T::zero());
        for (row, &l) in x.data().chunks(c).zip(labels.iter()) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            let y = (lse - row[l]) - carry;
            let t = total + y;
            carry = (t - total) - y;
            total = t;
        }
        let out = Tensor::scalar(total / T::lit(labels.len() as f64));
        Ok(self.push(out, Op::CrossEntropy(il, labels)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let il = self.check(loss)?;
        let lv = &self.nodes[il].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[il] = Some(Tensor::ones(lv.shape()));

        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].clone() else { continue };
            debug_assert_eq!(g.shape(), node.value.shape());
            for (input, ig) in self.vjp(i, &g)? {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                if ig.shape() != self.nodes[input].value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "backward",
                        lhs: ig.shape().to_vec(),
                        rhs: self.nodes[input].value.shape().to_vec(),
                    });
                }
                grads[input] = Some(match grads[input].take() {
                    Some(acc) => ops::add(&acc, &ig)?,
                    None => ig,
                });
            }
        }
        Ok(Gradients {
            grads,
            generation: self.generation,
        })
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn vjp(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        Ok(match &node.op {
            Op::Param | Op::Constant => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = ops::matmul(g, &ops::transpose_last2(bv)?)?;
                let gb = if bv.rank() == 2 && av.rank() > 2 {
                    let k = av.shape()[av.rank() - 1];
                    let n = g.shape()[g.rank() - 1];
                    let a2 = av.reshape(&[av.len() / k, k])?;
                    let g2 = g.reshape(&[g.len() / n, n])?;
                    ops::matmul(&ops::transpose_last2(&a2)?, &g2)?
                } else {
                    ops::matmul(&ops::transpose_last2(av)?, g)?
                };
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, ops::scale(g, -T::one()))],
            Op::Mul(a, b) => vec![(*a, ops::mul(g, val(*b))?), (*b, ops::mul(g, val(*a))?)],
            Op::Scale(a, c) => vec![(*a, ops::scale(g, *c))],
            Op::AddBias(a, b) => {
                let n = val(*b).len();
                let g2 = g.reshape(&[g.len() / n, n])?;
                vec![(*a, g.clone()), (*b, ops::sum_axis(&g2, 0)?)]
            }
            Op::Silu(a) => {
                let x = val(*a);
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| {
                        let s = T::one() / (T::one() + (-x).exp());
                        g * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                vec![(*a, Tensor::new(x.shape(), d)?)]
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    d.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
                }
                vec![(*a, Tensor::new(y.shape(), d)?)]
            }
            Op::RowNormalize(a) => {
                let (x, y) = (val(*a), &node.value);
                let n = *y.shape().last().unwrap();
                let mut d = Vec::with_capacity(y.len());
                for ((xr, yr), gr) in x.data().chunks(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                    let s: T = xr.iter().copied().sum();
                    let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    d.extend(gr.iter().map(|&g| (g - dot) / s));
                }
                vec![(*a, Tensor::new(y.shape(), d)?)]
            }
            Op::Gather(a, index) => vec![(*a, ops::scatter_add(g, index, val(*a).shape())?)],
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
            Op::Permute(a, order) => vec![(*a, ops::permute(g, &ops::inverse_order(order))?)],
            Op::Concat(parts, axis) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    out.push((p, ops::narrow(g, *axis, start, len)?));
                    start += len;
                }
                out
            }
            Op::SumAll(a) => {
                let gv = g.item()?;
                vec![(*a, Tensor::full(val(*a).shape(), gv))]
            }
            Op::SumAxis(a, axis) => {
                let shape = val(*a).shape();
                let outer = numel(&shape[..*axis]);
                let len = shape[*axis];
                let inner = numel(&shape[*axis + 1..]);
                let gd = g.data();
                let d = (0..outer * len * inner)
                    .map(|f| {
                        let o = f / (len * inner);
                        let r = f % inner;
                        gd[o * inner + r]
                    })
                    .collect();
                vec![(*a, Tensor::new(shape, d)?)]
            }
            Op::CrossEntropy(a, labels) => {
                let x = val(*a);
                let c = x.shape()[1];
                let scale = g.item()? / T::lit(labels.len() as f64);
                let mut d = ops::softmax_rows(x)?.to_vec();
                for (row, &l) in d.chunks_mut(c).zip(labels.iter()) {
                    row[l] = row[l] - T::one();
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                }
                vec![(*a, Tensor::new(x.shape(), d)?)]
            }
        })
    }
}

/// Central finite differences `(f(p + e_i·ε) − f(p − e_i·ε)) / 2ε` for
/// every coordinate of `p`.
pub fn finite_difference_grad<T: Scalar>(
    f: impl FnMut(&Tensor<T>) -> Result<T>,
    p: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    fd_impl(f, p, |_| eps)
}

/// Like [`finite_difference_grad`] with a per-coordinate step
/// `eps_rel · max(1, |p_i|)`.
pub fn finite_difference_grad_scaled<T: Scalar>(
    f: impl FnMut(&Tensor<T>) -> Result<T>,
    p: &Tensor<T>,
    eps_rel: T,
) -> Result<Tensor<T>> {
    fd_impl(f, p, |v| eps_rel * T::one().max(v.abs()))
}

fn fd_impl<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    p: &Tensor<T>,
    step: impl Fn(T) -> T,
) -> Result<Tensor<T>> {
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let v = p.data()[i];
        let h = step(v);
        if !(h > T::zero()) {
            return Err(invalid("finite_difference_grad", "step must be positive"));
        }
        let fp = f(&p.with_value(i, v + h))?;
        let fm = f(&p.with_value(i, v - h))?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_difference_grad",
                index: i,
            });
        }
        out.push((fp - fm) / (h + h));
    }
    Tensor::new(p.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Compares the tape gradient of `build` w.r.t. each input against
    /// central differences.
    fn check(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k], input.shape()).unwrap();
            let numeric = finite_difference_grad_scaled(
                |p| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, x)| t.param(if j == k { p.clone() } else { x.clone() }))
                        .collect();
                    let l = build(&mut t, &vs)?;
                    t.value(l)?.item()
                },
                input,
                1e-4,
            )
            .unwrap();
            for (a, n) in analytic.data().iter().zip(numeric.data()) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(rel < 1e-5, "input {k}: analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::<f64>::from_fn(&[2, 3], |i| i as f64));
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x, &[2, 3]).unwrap(), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn square_gradient_is_twice_x() {
        let xv = Tensor::<f64>::from_fn(&[4], |i| i as f64 - 1.5);
        let mut tape = Tape::new();
        let x = tape.param(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap().get(x, &[4]).unwrap();
        assert_eq!(g, xv.map(|v| 2.0 * v));
    }

    #[test]
    fn finite_differences_basic() {
        let p = Tensor::<f64>::new(&[2], vec![1.0, 2.0]).unwrap();
        let ones = finite_difference_grad(|p| Ok(p.data().iter().sum()), &p, 0.1).unwrap();
        for v in ones.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let sq = finite_difference_grad(|p| Ok(p.data().iter().map(|v| v * v).sum()), &p, 1e-3).unwrap();
        assert!((sq.data()[0] - 2.0).abs() < 1e-6);
        assert!((sq.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn finite_differences_report_non_finite() {
        let p = Tensor::<f64>::new(&[3], vec![1.0, 0.0, 2.0]).unwrap();
        let err =
            finite_difference_grad(|p| Ok(if p.data()[0] > 1.0 { f64::INFINITY } else { 0.0 }), &p, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 0, .. }), "{err}");
    }

    #[test]
    fn stale_and_non_scalar_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        tape.reset();
        assert!(matches!(tape.sum(x), Err(Error::StaleVar { .. })));
        assert!(matches!(tape.backward(x), Err(Error::StaleVar { .. })));
    }

    #[test]
    fn backward_visits_in_reverse_creation_order() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[2, 2]));
        let y = tape.matmul(x, x).unwrap();
        let z = tape.softmax(y).unwrap();
        let _ = tape.sum(z).unwrap();
        let order: Vec<&str> = tape.backward_order().into_iter().map(|(_, n)| n).collect();
        assert_eq!(order, ["sum_all", "softmax", "matmul", "param"]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::ones(&[3]));
        let x = tape.param(Tensor::ones(&[3]));
        let m = tape.mul(c, x).unwrap();
        let l = tape.sum(m).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.try_get(c).is_none());
        assert_eq!(g.get(x, &[3]).unwrap(), Tensor::ones(&[3]));
    }

    #[test]
    fn per_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[4, 5]);
        let b3 = rand_tensor(&mut rng, &[2, 4, 5]);
        let w = rand_tensor(&mut rng, &[2, 5, 3]);
        let weights = rand_tensor(&mut rng, &[2, 3, 5]);
        let weights45 = rand_tensor(&mut rng, &[2, 4, 5]);

        // weighted sums make the loss sensitive to every output element
        let weighted = |t: &mut Tape<f64>, v: Var, w: &Tensor<f64>| -> Result<Var> {
            let c = t.constant(w.clone());
            let m = t.mul(v, c)?;
            t.sum(m)
        };

        check(&[a.clone(), b.clone()], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted(t, y, &weights)
        });
        check(&[a.clone(), b3.clone()], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted(t, y, &weights)
        });
        check(std::slice::from_ref(&b3), |t, v| {
            let y = t.softmax(v[0])?;
            weighted(t, y, &weights45)
        });
        check(&[b3.map(|x| x.abs() + 0.5)], |t, v| {
            let y = t.row_normalize(v[0], 1e-12)?;
            weighted(t, y, &weights45)
        });
        check(std::slice::from_ref(&b3), |t, v| {
            let y = t.silu(v[0])?;
            weighted(t, y, &weights45)
        });
        check(&[b3.clone(), rand_tensor(&mut rng, &[5])], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            weighted(t, y, &weights45)
        });
        check(&[b3.clone(), weights45.clone()], |t, v| {
            let y = t.sub(v[0], v[1])?;
            let z = t.mul(y, y)?;
            let s = t.scale(z, 0.3)?;
            t.sum(s)
        });
        check(std::slice::from_ref(&w), |t, v| {
            let y = t.reshape_permute(v[0], &[2, 5, 3], &[0, 2, 1])?;
            let y = t.reshape(y, &[2, 3, 5])?;
            weighted(t, y, &weights)
        });
        check(&[a.clone(), rand_tensor(&mut rng, &[2, 3, 1])], |t, v| {
            let y = t.concat(&[v[0], v[1]], 2)?;
            weighted(t, y, &weights)
        });
        check(std::slice::from_ref(&w), |t, v| {
            let y = t.sum_axis(v[0], 1)?;
            let y = t.reshape(y, &[6])?;
            let y = t.mul(y, y)?;
            t.sum(y)
        });
        let index: Arc<[usize]> = (0..30)
            .map(|i| if i % 7 == 3 { GATHER_ZERO } else { (i * 11) % 30 / 2 })
            .collect();
        check(std::slice::from_ref(&w), move |t, v| {
            let y = t.gather(v[0], index.clone(), &[2, 3, 5])?;
            weighted(t, y, &weights)
        });
        let labels: Arc<[usize]> = vec![0, 2, 1, 1].into();
        check(&[rand_tensor(&mut rng, &[4, 3])], move |t, v| {
            t.cross_entropy(v[0], labels.clone())
        });
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_c() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[5, 6]));
        let l = tape.cross_entropy(x, vec![0, 1, 2, 3, 5].into()).unwrap();
        assert!((tape.value(l).unwrap().item().unwrap() - 6f64.ln()).abs() < 1e-15);
        assert!(tape.cross_entropy(x, vec![0, 1, 2, 3, 6].into()).is_err());
    }
}
