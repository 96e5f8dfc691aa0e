use std::sync::Arc;

use super::kernels;
use super::linalg::{self, Lu};
use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::quant::{self, Granularity};
use crate::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Rounding statistics of one fake-quant node, frozen so the straight-through
/// surrogate can be evaluated at perturbed points.
#[derive(Clone, Debug)]
pub struct FrozenQuant<T> {
    pub absmax: Vec<T>,
    pub residual: Vec<T>,
}

/// Controls whether fake-quant nodes record or replay their rounding state.
#[derive(Clone, Debug, Default)]
pub enum QuantFreeze<T> {
    #[default]
    Live,
    Record(Vec<FrozenQuant<T>>),
    Replay(Vec<FrozenQuant<T>>, usize),
}

#[derive(Debug)]
pub(crate) struct FakeQuantParams {
    pub bits: u32,
    pub granularity: Granularity,
    /// Per-row exemption pattern (repeats with its own length) for per-token
    /// quantization; exempt rows pass through unquantized.
    pub exempt_rows: Option<Arc<[bool]>>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batched: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        k: T,
    },
    Transpose {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    SumAxis {
        a: usize,
        axis: usize,
    },
    Square {
        a: usize,
    },
    Sqrt {
        a: usize,
    },
    Exp {
        a: usize,
    },
    Softmax {
        a: usize,
    },
    LayerNorm {
        a: usize,
        inv_std: Vec<T>,
    },
    Gelu {
        a: usize,
    },
    Clamp {
        a: usize,
        lo: T,
        hi: T,
    },
    RoundSte {
        a: usize,
    },
    FakeQuant {
        x: usize,
        clip: usize,
        groups: Vec<usize>,
        /// per element: code (possibly non-integer in replay), inside flag, x/s
        codes: Vec<T>,
        inside: Vec<bool>,
        ratio: Vec<T>,
        /// per group d(scale)/d(clip)
        dscale: Vec<T>,
        exempt: Vec<bool>,
        passthrough: bool,
    },
    Solve {
        p: usize,
        w: usize,
        lu: Lu<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Append-only computation record. Every node's inputs precede it, so the
/// record is topologically ordered by construction.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    checked: bool,
    freeze: QuantFreeze<T>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<T: Scalar> Tape<T> {
    /// New tape in checked mode (non-finite outputs raise errors).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
            freeze: QuantFreeze::Live,
        }
    }

    pub fn unchecked() -> Self {
        Self {
            checked: false,
            ..Self::new()
        }
    }

    pub fn set_freeze(&mut self, freeze: QuantFreeze<T>) {
        self.freeze = freeze;
    }

    pub fn take_freeze(&mut self) -> QuantFreeze<T> {
        std::mem::take(&mut self.freeze)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor, zeros when none has been accumulated.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(&shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Marks an intermediate value so gradients flow to (and are kept for)
    /// it; only affects nodes recorded afterwards.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].requires_grad = true;
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[usize],
    ) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    // ---- forward primitives -------------------------------------------------

    /// `[.., k] x [k, n]`, or batched `[.., m, k] x [.., k, n]` with equal
    /// leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.val(a).shape().to_vec(), self.val(b).shape().to_vec());
        if sa.is_empty() || sb.len() < 2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        if sb.len() == 2 {
            let k = *sa.last().unwrap();
            if sb[0] != k {
                return Err(shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
            }
            let out = self.val(a).matmul(self.val(b))?;
            return self.push(
                "matmul",
                out,
                Op::MatMul {
                    a: a.0,
                    b: b.0,
                    batched: false,
                },
                &[a.0, b.0],
            );
        }
        let r = sa.len();
        if sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.val(a).data(), self.val(b).data());
            for bi in 0..batch {
                kernels::matmul(
                    &da[bi * m * k..(bi + 1) * m * k],
                    &db[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = sa.clone();
        shape[r - 1] = n;
        let t = Tensor::new(&shape, out)?;
        self.push(
            "matmul",
            t,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batched: true,
            },
            &[a.0, b.0],
        )
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.val(a), self.val(b));
        if !suffix_broadcast(ta.shape(), tb.shape()) {
            return Err(shape_err(
                name,
                format!("cannot broadcast {:?} onto {:?}", tb.shape(), ta.shape()),
            ));
        }
        let nb = tb.len();
        let db = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, db[i % nb]))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    /// Elementwise `a + b`, `b` broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        let t = self.val(a).map(|x| x * k);
        self.push("scale", t, Op::Scale { a: a.0, k }, &[a.0])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        let s = ta.shape();
        if s.len() < 2 {
            return Err(shape_err("transpose", format!("{:?}", s)));
        }
        let r = s.len();
        let (rows, cols) = (s[r - 2], s[r - 1]);
        let batch = ta.len() / (rows * cols).max(1);
        let mut out = vec![T::zero(); ta.len()];
        kernels::transpose(ta.data(), &mut out, batch, rows, cols);
        let mut shape = s.to_vec();
        shape.swap(r - 2, r - 1);
        let t = Tensor::new(&shape, out)?;
        self.push("transpose", t, Op::Transpose { a: a.0 }, &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(a).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape { a: a.0 }, &[a.0])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let base = self.val(inputs[0]).shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err(
                "concat",
                format!("axis {} for rank {}", axis, base.len()),
            ));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.val(*v).shape();
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(shape_err("concat", format!("{:?} vs {:?}", s, base)));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.val(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        self.push(
            "concat",
            t,
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.val(a);
        let s = ta.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err(
                "slice",
                format!("{:?} axis {} [{}, {})", s, axis, start, start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        self.push(
            "slice",
            t,
            Op::Slice {
                a: a.0,
                axis,
                start,
            },
            &[a.0],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.val(a).sum());
        self.push("sum", t, Op::Sum { a: a.0 }, &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        let n = T::lit(ta.len() as f64);
        let t = Tensor::scalar(ta.sum() / n);
        self.push("mean", t, Op::Mean { a: a.0 }, &[a.0])
    }

    /// Sums over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.val(a);
        let s = ta.shape().to_vec();
        if axis >= s.len() {
            return Err(shape_err("sum_axis", format!("axis {} for {:?}", axis, s)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..s[axis] {
                let src = &ta.data()[(o * s[axis] + j) * inner..(o * s[axis] + j + 1) * inner];
                for (d, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += x;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let t = Tensor::new(&shape, out)?;
        self.push("sum_axis", t, Op::SumAxis { a: a.0, axis }, &[a.0])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a).map(|x| x * x);
        self.push("square", t, Op::Square { a: a.0 }, &[a.0])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a).map(|x| x.sqrt());
        self.push("sqrt", t, Op::Sqrt { a: a.0 }, &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a).map(|x| x.exp());
        self.push("exp", t, Op::Exp { a: a.0 }, &[a.0])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        let n = ta.last_dim();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let t = Tensor::new(ta.shape(), out)?;
        self.push("softmax", t, Op::Softmax { a: a.0 }, &[a.0])
    }

    /// Normalization over the last axis without affine parameters.
    pub fn layernorm(&mut self, a: Var, eps: T) -> Result<Var> {
        let ta = self.val(a);
        let n = ta.last_dim();
        let nf = T::lit(n as f64);
        let mut out = ta.data().to_vec();
        let mut inv_std = Vec::with_capacity(ta.len() / n.max(1));
        for row in out.chunks_mut(n) {
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mu) * r;
            }
            inv_std.push(r);
        }
        let t = Tensor::new(ta.shape(), out)?;
        self.push("layernorm", t, Op::LayerNorm { a: a.0, inv_std }, &[a.0])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a).map(gelu_fwd);
        self.push("gelu", t, Op::Gelu { a: a.0 }, &[a.0])
    }

    /// Clamp with subgradient 1 on `[lo, hi]` (boundaries included), 0 outside.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!(
                "clamp lo {} > hi {}",
                lo, hi
            )));
        }
        let t = self.val(a).map(|x| x.max(lo).min(hi));
        self.push("clamp", t, Op::Clamp { a: a.0, lo, hi }, &[a.0])
    }

    /// Round half away from zero with a straight-through (identity) gradient.
    pub fn round_ste(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a).map(|x| x.round_half_away());
        self.push("round_ste", t, Op::RoundSte { a: a.0 }, &[a.0])
    }

    /// `P^{-1} W` by LU solve, differentiable in both arguments. Fails when
    /// the condition estimate of `P` exceeds `max_cond`.
    pub fn solve(&mut self, p: Var, w: Var, max_cond: f64) -> Result<Var> {
        let (tp, tw) = (self.val(p), self.val(w));
        let sp = tp.shape();
        if sp.len() != 2 || sp[0] != sp[1] || tw.rank() != 2 || tw.shape()[0] != sp[0] {
            return Err(shape_err("solve", format!("{:?} \\ {:?}", sp, tw.shape())));
        }
        let n = sp[0];
        let m = tw.shape()[1];
        let lu = Lu::factor(tp.data(), n)?;
        let cond = linalg::norm1(tp.data(), n) * lu.inverse_norm1_estimate();
        if !(cond <= max_cond) {
            return Err(Error::IllConditioned(cond));
        }
        let x = lu.solve(tw.data(), m)?;
        let t = Tensor::new(&[n, m], x)?;
        self.push("solve", t, Op::Solve { p: p.0, w: w.0, lu }, &[p.0, w.0])
    }

    /// Symmetric fake quantization (quantize then dequantize) with a
    /// learnable clip factor and straight-through gradients. `clip` holds one
    /// factor per group or a single shared factor.
    pub(crate) fn fake_quant(
        &mut self,
        x: Var,
        clip: Var,
        params: &FakeQuantParams,
    ) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let shape = tx.shape().to_vec();
        let n = tx.len();
        if params.bits >= 16 {
            let t = tx.clone();
            return self.push(
                "fake_quant",
                t,
                Op::FakeQuant {
                    x: x.0,
                    clip: clip.0,
                    groups: vec![],
                    codes: vec![],
                    inside: vec![],
                    ratio: vec![],
                    dscale: vec![],
                    exempt: vec![],
                    passthrough: true,
                },
                &[x.0, clip.0],
            );
        }
        let layout = quant::GroupLayout::new(&shape, params.granularity)?;
        let ngroups = layout.groups;
        let tclip = &self.nodes[clip.0].value;
        if tclip.len() != 1 && tclip.len() != ngroups {
            return Err(shape_err(
                "fake_quant",
                format!("clip has {} entries for {} groups", tclip.len(), ngroups),
            ));
        }
        let clip_at = |g: usize| {
            if tclip.len() == 1 {
                tclip.data()[0]
            } else {
                tclip.data()[g]
            }
        };
        let row = shape.last().copied().unwrap_or(1);
        let exempt: Vec<bool> = match (&params.exempt_rows, params.granularity) {
            (Some(mask), Granularity::PerToken) if !mask.is_empty() => {
                (0..n).map(|i| mask[(i / row) % mask.len()]).collect()
            }
            _ => vec![false; n],
        };
        let groups: Vec<usize> = (0..n).map(|i| layout.group_of(i)).collect();
        let qmax = T::lit(quant::qmax(params.bits) as f64);
        let qmin = -qmax;

        let replay = match &mut self.freeze {
            QuantFreeze::Replay(list, cursor) => {
                let f = list
                    .get(*cursor)
                    .cloned()
                    .ok_or_else(|| Error::Record("replay log exhausted".into()))?;
                *cursor += 1;
                Some(f)
            }
            _ => None,
        };
        let absmax: Vec<T> = match &replay {
            Some(f) => f.absmax.clone(),
            None => {
                let mut m = vec![T::zero(); ngroups];
                for (i, &v) in tx.data().iter().enumerate() {
                    if !exempt[i] {
                        let g = groups[i];
                        m[g] = m[g].max(v.abs());
                    }
                }
                m
            }
        };
        let mut scale = vec![T::one(); ngroups];
        let mut dscale = vec![T::zero(); ngroups];
        for g in 0..ngroups {
            if absmax[g] > T::zero() {
                scale[g] = clip_at(g) * absmax[g] / qmax;
                dscale[g] = absmax[g] / qmax;
            }
        }
        let mut out = vec![T::zero(); n];
        let mut codes = vec![T::zero(); n];
        let mut inside = vec![true; n];
        let mut ratio = vec![T::zero(); n];
        let mut residual = vec![T::zero(); n];
        for i in 0..n {
            let v = tx.data()[i];
            if exempt[i] {
                out[i] = v;
                continue;
            }
            let g = groups[i];
            let s = scale[g];
            let u = v / s;
            let c = u.max(qmin).min(qmax);
            let q = match &replay {
                Some(f) => c + f.residual[i],
                None => c.round_half_away(),
            };
            residual[i] = q - c;
            inside[i] = u >= qmin && u <= qmax;
            ratio[i] = u;
            codes[i] = q;
            out[i] = q * s;
        }
        if let QuantFreeze::Record(list) = &mut self.freeze {
            list.push(FrozenQuant {
                absmax: absmax.clone(),
                residual,
            });
        }
        let t = Tensor::new(&shape, out)?;
        self.push(
            "fake_quant",
            t,
            Op::FakeQuant {
                x: x.0,
                clip: clip.0,
                groups,
                codes,
                inside,
                ratio,
                dscale,
                exempt,
                passthrough: false,
            },
            &[x.0, clip.0],
        )
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse pass from a scalar root. Gradients accumulate additively into
    /// every node that requires grad; call [`Tape::zero_grad`] to reset.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Record(format!("root {} not on tape", root.0)));
        }
        if !self.nodes[root.0].value.shape().is_empty() {
            return Err(Error::Record(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut scratch: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        scratch[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = scratch[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut scratch)?;
            scratch[i] = Some(g);
        }
        for (i, g) in scratch.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], scratch: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let needs = |j: usize| self.nodes[j].requires_grad;
        let check = |j: usize| -> Result<()> {
            if j >= i {
                return Err(Error::Record(format!(
                    "node {} depends on later node {}",
                    i, j
                )));
            }
            Ok(())
        };
        macro_rules! acc {
            ($j:expr) => {{
                let j = $j;
                let len = self.nodes[j].value.len();
                scratch[j].get_or_insert_with(|| vec![T::zero(); len])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, batched } => {
                check(*a)?;
                check(*b)?;
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let sa = ta.shape();
                let sb = tb.shape();
                if !batched {
                    let k = *sa.last().unwrap();
                    let n = sb[1];
                    let m = ta.len() / k.max(1);
                    if needs(*a) {
                        kernels::matmul_nt_acc(g, tb.data(), acc!(*a), m, n, k);
                    }
                    if needs(*b) {
                        kernels::matmul_tn_acc(ta.data(), g, acc!(*b), m, k, n);
                    }
                } else {
                    let r = sa.len();
                    let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
                    let batch = ta.len() / (m * k).max(1);
                    if needs(*a) {
                        let ga = acc!(*a);
                        for bi in 0..batch {
                            kernels::matmul_nt_acc(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &tb.data()[bi * k * n..(bi + 1) * k * n],
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    if needs(*b) {
                        let gb = acc!(*b);
                        for bi in 0..batch {
                            kernels::matmul_tn_acc(
                                &ta.data()[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                check(*a)?;
                check(*b)?;
                let neg = matches!(node.op, Op::Sub { .. });
                if needs(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if needs(*b) {
                    let gb = acc!(*b);
                    let nb = gb.len();
                    for (idx, &y) in g.iter().enumerate() {
                        if neg {
                            gb[idx % nb] -= y;
                        } else {
                            gb[idx % nb] += y;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                check(*a)?;
                check(*b)?;
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let nb = tb.len();
                if needs(*a) {
                    let ga = acc!(*a);
                    for (idx, x) in ga.iter_mut().enumerate() {
                        *x += g[idx] * tb.data()[idx % nb];
                    }
                }
                if needs(*b) {
                    let gb = acc!(*b);
                    for (idx, &y) in g.iter().enumerate() {
                        gb[idx % nb] += y * ta.data()[idx];
                    }
                }
            }
            Op::Scale { a, k } => {
                check(*a)?;
                if needs(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(x, &y)| *x += y * *k);
                }
            }
            Op::Transpose { a } => {
                check(*a)?;
                if needs(*a) {
                    let s = node.value.shape();
                    let r = s.len();
                    let (rows, cols) = (s[r - 2], s[r - 1]);
                    let batch = g.len() / (rows * cols).max(1);
                    let mut tmp = vec![T::zero(); g.len()];
                    kernels::transpose(g, &mut tmp, batch, rows, cols);
                    acc!(*a).iter_mut().zip(&tmp).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Reshape { a } => {
                check(*a)?;
                if needs(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Concat { inputs, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis];
                let mut offset = 0;
                for &j in inputs {
                    check(j)?;
                    let len = self.nodes[j].value.shape()[*axis];
                    if needs(j) {
                        let gj = acc!(j);
                        for o in 0..outer {
                            let src = &g
                                [(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gj[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                check(*a)?;
                if needs(*a) {
                    let sa = self.nodes[*a].value.shape();
                    let len = node.value.shape()[*axis];
                    let outer: usize = sa[..*axis].iter().product();
                    let inner: usize = sa[axis + 1..].iter().product();
                    let full = sa[*axis];
                    let ga = acc!(*a);
                    for o in 0..outer {
                        let dst =
                            &mut ga[(o * full + start) * inner..(o * full + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Sum { a } | Op::Mean { a } => {
                check(*a)?;
                if needs(*a) {
                    let ga = acc!(*a);
                    let d = if matches!(node.op, Op::Mean { .. }) {
                        g[0] / T::lit(ga.len() as f64)
                    } else {
                        g[0]
                    };
                    ga.iter_mut().for_each(|x| *x += d);
                }
            }
            Op::SumAxis { a, axis } => {
                check(*a)?;
                if needs(*a) {
                    let sa = self.nodes[*a].value.shape();
                    let outer: usize = sa[..*axis].iter().product();
                    let inner: usize = sa[axis + 1..].iter().product();
                    let ga = acc!(*a);
                    for o in 0..outer {
                        for j in 0..sa[*axis] {
                            let dst = &mut ga
                                [(o * sa[*axis] + j) * inner..(o * sa[*axis] + j + 1) * inner];
                            let src = &g[o * inner..(o + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                        }
                    }
                }
            }
            Op::Square { a } => {
                check(*a)?;
                if needs(*a) {
                    let xa = self.nodes[*a].value.data();
                    let two = T::lit(2.0);
                    acc!(*a)
                        .iter_mut()
                        .enumerate()
                        .for_each(|(idx, x)| *x += two * xa[idx] * g[idx]);
                }
            }
            Op::Sqrt { a } => {
                check(*a)?;
                if needs(*a) {
                    let y = node.value.data();
                    let two = T::lit(2.0);
                    acc!(*a)
                        .iter_mut()
                        .enumerate()
                        .for_each(|(idx, x)| *x += g[idx] / (two * y[idx]));
                }
            }
            Op::Exp { a } => {
                check(*a)?;
                if needs(*a) {
                    let y = node.value.data();
                    acc!(*a)
                        .iter_mut()
                        .enumerate()
                        .for_each(|(idx, x)| *x += g[idx] * y[idx]);
                }
            }
            Op::Softmax { a } => {
                check(*a)?;
                if needs(*a) {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    let ga = acc!(*a);
                    for r in 0..y.len() / n.max(1) {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..n {
                            ga[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a, inv_std } => {
                check(*a)?;
                if needs(*a) {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    let nf = T::lit(n as f64);
                    let ga = acc!(*a);
                    for (r, &rs) in inv_std.iter().enumerate() {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let mg = gr.iter().copied().sum::<T>() / nf;
                        let mgy = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>() / nf;
                        for j in 0..n {
                            ga[r * n + j] += rs * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                check(*a)?;
                if needs(*a) {
                    let xa = self.nodes[*a].value.data();
                    acc!(*a)
                        .iter_mut()
                        .enumerate()
                        .for_each(|(idx, x)| *x += g[idx] * gelu_grad(xa[idx]));
                }
            }
            Op::Clamp { a, lo, hi } => {
                check(*a)?;
                if needs(*a) {
                    let xa = self.nodes[*a].value.data();
                    acc!(*a).iter_mut().enumerate().for_each(|(idx, x)| {
                        if xa[idx] >= *lo && xa[idx] <= *hi {
                            *x += g[idx];
                        }
                    });
                }
            }
            Op::RoundSte { a } => {
                check(*a)?;
                if needs(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::FakeQuant {
                x,
                clip,
                groups,
                codes,
                inside,
                ratio,
                dscale,
                exempt,
                passthrough,
            } => {
                check(*x)?;
                check(*clip)?;
                if *passthrough {
                    if needs(*x) {
                        acc!(*x).iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                    }
                    return Ok(());
                }
                if needs(*x) {
                    let gx = acc!(*x);
                    for idx in 0..g.len() {
                        if exempt[idx] || inside[idx] {
                            gx[idx] += g[idx];
                        }
                    }
                }
                if needs(*clip) {
                    let gc = acc!(*clip);
                    let shared = gc.len() == 1;
                    for idx in 0..g.len() {
                        if exempt[idx] {
                            continue;
                        }
                        let grp = groups[idx];
                        let d = if inside[idx] {
                            codes[idx] - ratio[idx]
                        } else {
                            codes[idx]
                        };
                        let c = g[idx] * d * dscale[grp];
                        if shared {
                            gc[0] += c;
                        } else {
                            gc[grp] += c;
                        }
                    }
                }
            }
            Op::Solve { p, w, lu } => {
                check(*p)?;
                check(*w)?;
                let m = node.value.shape()[1];
                let n = lu.dim();
                // G_W = P^{-T} G_Y ; G_P = -G_W Y^T
                let gw = lu.solve_transpose(g, m)?;
                if needs(*p) {
                    kernels::matmul_nt_acc(
                        &gw.iter().map(|&v| -v).collect::<Vec<_>>(),
                        node.value.data(),
                        acc!(*p),
                        n,
                        m,
                        n,
                    );
                }
                if needs(*w) {
                    acc!(*w).iter_mut().zip(&gw).for_each(|(x, &y)| *x += y);
                }
            }
        }
        Ok(())
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu_fwd<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}
