//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive as it executes. [`Graph::backward`]
//! walks the recorded nodes in reverse insertion order, which is a reverse
//! topological order because a node can only reference earlier nodes.
//! Graphs are rebuilt for every training step.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d3x3 {
        input: Var,
        kernel: Var,
    },
    AddBias {
        input: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Relu(Var),
    Reshape(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
    },
    SteBlend(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Tape of primitive operations.
#[derive(Debug)]
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that takes no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value.with_requires_grad(false), Op::Leaf)
    }

    /// Records a leaf whose gradient is populated by [`Graph::backward`].
    pub fn parameter(&mut self, value: Tensor<T>) -> Var {
        self.push(value.with_requires_grad(true), Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[self.check(var).expect("variable from another graph")].value
    }

    pub fn try_value(&self, var: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.check(var)?].value)
    }

    /// Gradient of the last backward pass with respect to `var`.
    pub fn grad(&self, var: Var) -> Option<&[T]> {
        self.try_value(var).ok().and_then(Tensor::grad)
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.graph != self.id || var.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(var.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { value, op });
        Var {
            graph: self.id,
            index,
        }
    }

    fn needs_grad(&self, inputs: &[Var]) -> bool {
        inputs
            .iter()
            .any(|v| self.nodes[v.index].value.requires_grad())
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.needs_grad(inputs);
        let value = Tensor::new(shape, data)
            .expect("primitive produced inconsistent shape")
            .with_requires_grad(requires_grad);
        self.push(value, op)
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(
            self.nodes[ia].value.data(),
            self.nodes[ib].value.data(),
            n,
            k,
            m,
        );
        Ok(self.record(vec![n, m], out, Op::MatMul(a, b), &[a, b]))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose_raw(self.nodes[ia].value.data(), r, c);
        Ok(self.record(vec![c, r], out, Op::Transpose(a), &[a]))
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    ///
    /// `input: [n, c, h, w]`, `kernel: [o, c, 3, 3]` -> `[n, o, h, w]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (ix, ik) = (self.check(input)?, self.check(kernel)?);
        let (sx, sk) = (self.nodes[ix].value.shape(), self.nodes[ik].value.shape());
        if sx.len() != 4 || sk.len() != 4 || sk[1] != sx[1] || sk[2] != 3 || sk[3] != 3 {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        let dims = ConvDims {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            o: sk[0],
        };
        let out = conv_forward(
            self.nodes[ix].value.data(),
            self.nodes[ik].value.data(),
            dims,
        );
        Ok(self.record(
            vec![dims.n, dims.o, dims.h, dims.w],
            out,
            Op::Conv2d3x3 { input, kernel },
            &[input, kernel],
        ))
    }

    /// Adds `bias[c]` along axis 1 of `input: [n, c, ...]`.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(input)?, self.check(bias)?);
        let (sx, sb) = (self.nodes[ix].value.shape(), self.nodes[ib].value.shape());
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let channels = sx[1];
        let inner: usize = sx[2..].iter().product();
        let shape = sx.to_vec();
        let b = self.nodes[ib].value.data();
        let out = self.nodes[ix]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[(i / inner) % channels])
            .collect();
        Ok(self.record(shape, out, Op::AddBias { input, bias }, &[input, bias]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, shape) = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.record(shape, out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, shape) = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.record(shape, out, Op::Mul(a, b), &[a, b]))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<T>, Vec<usize>)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((out, ta.shape().to_vec()))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s: T = self.nodes[ia].value.data().iter().copied().sum();
        Ok(self.record(vec![1], vec![s], Op::Sum(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].value.shape().to_vec();
        let out = self.nodes[ia]
            .value
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        Ok(self.record(shape, out, Op::Relu(a), &[a]))
    }

    /// `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.shape();
        if s.is_empty() {
            return Err(Error::Shape {
                op: "flatten",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let n = s[0];
        let rest = s[1..].iter().product::<usize>();
        let out = self.nodes[ia].value.data().to_vec();
        Ok(self.record(vec![n, rest], out, Op::Reshape(a), &[a]))
    }

    /// Mean softmax cross-entropy of `logits: [n, c]` against class targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let s = self.nodes[il].value.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(format!(
                "target class {t} out of range for {c} classes"
            )));
        }
        let data = self.nodes[il].value.data();
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = T::zero();
        for (row, &t) in data.chunks(c).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
            let z: T = exps.iter().copied().sum();
            loss = loss + (z.ln() - (row[t] - max));
            probs.extend(exps.iter().map(|&e| e / z));
        }
        let loss = loss / T::count(n);
        Ok(self.record(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Straight-through blend `x + lambda * (target - x)`.
    ///
    /// `target` is a constant: the backward pass hands the upstream gradient
    /// to `x` unchanged.
    pub fn ste_blend(&mut self, x: Var, target: &Tensor<T>, lambda: T) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        if tx.shape() != target.shape() {
            return Err(Error::Shape {
                op: "ste_blend",
                lhs: tx.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let shape = tx.shape().to_vec();
        let out = if lambda == T::zero() {
            tx.data().to_vec()
        } else {
            tx.data()
                .iter()
                .zip(target.data())
                .map(|(&v, &q)| v + lambda * (q - v))
                .collect()
        };
        Ok(self.record(shape, out, Op::SteBlend(x), &[x]))
    }

    /// Populates gradients of every `requires_grad` tensor reachable from `loss`.
    ///
    /// Gradients from a previous call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.check(loss)?;
        if self.nodes[il].value.numel() != 1 {
            return Err(Error::NotScalar(self.nodes[il].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[il] = Some(vec![T::one()]);

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let g = if node.value.requires_grad() { g } else { None };
            node.value.set_grad(g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.index].value.requires_grad() {
                return;
            }
            match &mut grads[v.index] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e = *e + c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if ta.requires_grad() {
                    let bt = transpose_raw(tb.data(), k, m);
                    acc(*a, matmul_raw(g, &bt, n, m, k));
                }
                if tb.requires_grad() {
                    let at = transpose_raw(ta.data(), n, k);
                    acc(*b, matmul_raw(&at, g, k, n, m));
                }
            }
            Op::Transpose(a) => {
                let s = self.nodes[a.index].value.shape();
                acc(*a, transpose_raw(g, s[1], s[0]));
            }
            Op::Conv2d3x3 { input, kernel } => {
                let (tx, tk) = (
                    &self.nodes[input.index].value,
                    &self.nodes[kernel.index].value,
                );
                let dims = ConvDims {
                    n: tx.shape()[0],
                    c: tx.shape()[1],
                    h: tx.shape()[2],
                    w: tx.shape()[3],
                    o: tk.shape()[0],
                };
                let (gx, gk) = conv_backward(tx.data(), tk.data(), g, dims);
                if tx.requires_grad() {
                    acc(*input, gx);
                }
                if tk.requires_grad() {
                    acc(*kernel, gk);
                }
            }
            Op::AddBias { input, bias } => {
                let s = self.nodes[input.index].value.shape();
                let channels = s[1];
                let inner: usize = s[2..].iter().product();
                acc(*input, g.to_vec());
                let mut gb = vec![T::zero(); channels];
                for (idx, &gv) in g.iter().enumerate() {
                    let c = (idx / inner) % channels;
                    gb[c] = gb[c] + gv;
                }
                acc(*bias, gb);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
                acc(
                    *a,
                    g.iter().zip(tb.data()).map(|(&gv, &y)| gv * y).collect(),
                );
                acc(
                    *b,
                    g.iter().zip(ta.data()).map(|(&gv, &x)| gv * x).collect(),
                );
            }
            Op::Sum(a) => {
                let n = self.nodes[a.index].value.numel();
                acc(*a, vec![g[0]; n]);
            }
            Op::Relu(a) => {
                let x = self.nodes[a.index].value.data();
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect(),
                );
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let n = targets.len();
                let c = probs.len() / n;
                let scale = g[0] / T::count(n);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * c + t] = gl[r * c + t] - scale;
                }
                acc(*logits, gl);
            }
            Op::SteBlend(x) => acc(*x, g.to_vec()),
        }
    }
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
}

/// Iterates the in-bounds taps of a padded 3x3 window centred at `(i, j)`.
fn taps(h: usize, w: usize, i: usize, j: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..3usize).flat_map(move |di| {
        (0..3usize).filter_map(move |dj| {
            let y = (i + di).checked_sub(1)?;
            let x = (j + dj).checked_sub(1)?;
            (y < h && x < w).then_some((di * 3 + dj, y, x))
        })
    })
}

fn conv_forward<T: Scalar>(x: &[T], k: &[T], d: ConvDims) -> Vec<T> {
    let mut out = vec![T::zero(); d.n * d.o * d.h * d.w];
    for n in 0..d.n {
        for o in 0..d.o {
            for i in 0..d.h {
                for j in 0..d.w {
                    let mut s = T::zero();
                    for c in 0..d.c {
                        let kbase = (o * d.c + c) * 9;
                        let xbase = (n * d.c + c) * d.h * d.w;
                        for (tap, y, xx) in taps(d.h, d.w, i, j) {
                            s = s + k[kbase + tap] * x[xbase + y * d.w + xx];
                        }
                    }
                    out[((n * d.o + o) * d.h + i) * d.w + j] = s;
                }
            }
        }
    }
    out
}

fn conv_backward<T: Scalar>(x: &[T], k: &[T], g: &[T], d: ConvDims) -> (Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    for n in 0..d.n {
        for o in 0..d.o {
            for i in 0..d.h {
                for j in 0..d.w {
                    let gv = g[((n * d.o + o) * d.h + i) * d.w + j];
                    for c in 0..d.c {
                        let kbase = (o * d.c + c) * 9;
                        let xbase = (n * d.c + c) * d.h * d.w;
                        for (tap, y, xx) in taps(d.h, d.w, i, j) {
                            gx[xbase + y * d.w + xx] =
                                gx[xbase + y * d.w + xx] + gv * k[kbase + tap];
                            gk[kbase + tap] = gk[kbase + tap] + gv * x[xbase + y * d.w + xx];
                        }
                    }
                }
            }
        }
    }
    (gx, gk)
}

/// Compares the analytic gradient of `f` at `x` against central differences.
///
/// `f` builds a scalar loss from its input variable. Returns the maximum over
/// coordinates of `|analytic - numeric| / (|analytic| + max(h, 1e-8))`; the
/// step in the denominator keeps rounding noise on zero gradients bounded.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if h <= T::zero() {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut g = Graph::new();
    let xv = g.parameter(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g
        .grad(xv)
        .map(<[T]>::to_vec)
        .unwrap_or_else(|| vec![T::zero(); x.numel()]);

    let eval = |probe: Tensor<T>| -> Result<T> {
        let mut g = Graph::new();
        let v = g.constant(probe);
        let out = f(&mut g, v)?;
        g.value(out).item()
    };

    let two = T::of(2.0);
    let floor = h.max(T::of(1e-8));
    let mut worst = T::zero();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] = plus.data()[i] + h;
        let mut minus = x.clone();
        minus.data_mut()[i] = minus.data()[i] - h;
        let numeric = (eval(plus)? - eval(minus)?) / (two * h);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}
