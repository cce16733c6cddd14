//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! Every op appends a node holding its output value. `backward` walks the tape
//! in reverse, accumulating gradients into leaves (inputs and parameters).
//! Parameter gradients are later flushed into the owning [`ParamStore`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Rows { x: Var, idx: Vec<usize> },
    SumAxis { x: Var, axis: usize },
    WeightedSum { w: Var, x: Var },
    Softmax(Var),
    LogSoftmax(Var),
    Elu(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Slice { x: Var, start: usize, len: usize },
    SumAll(Var),
    Pick { x: Var, index: usize },
}

#[derive(Clone, Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Vec<F>>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            leaf_grads: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op, needs_grad: bool) -> Var {
        debug_assert!(
            matches!(op, Op::Leaf | Op::Param) || value.all_finite(),
            "non-finite output from {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input; its gradient is available through [`Graph::grad`].
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(F::c(x)))
    }

    /// Loads a parameter onto the tape once; later calls return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Accumulated gradient of a leaf, present after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.leaf_grads.get(&v.0).map(|g| g.as_slice())
    }

    /// Adds this tape's parameter gradients into the store's gradient buffers.
    pub fn flush_param_grads(&self, store: &mut ParamStore<F>) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.leaf_grads.get(&v.0) {
                add_into(store.grad_mut(id).data_mut(), g);
            }
        }
    }

    // ---- ops ----

    /// `x · wᵀ + b` over the trailing axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[1] {
            return Err(Error::dim("linear", &xs, &ws));
        }
        let (m, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(Error::dim("linear.bias", self.shape(b), &[m]));
            }
        }
        let rows = self.value(x).len() / n;
        let mut out = vec![F::zero(); rows * m];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for r in 0..rows {
                let xr = &xv[r * n..(r + 1) * n];
                let yr = &mut out[r * m..(r + 1) * m];
                for (i, y) in yr.iter_mut().enumerate() {
                    let wr = &wv[i * n..(i + 1) * n];
                    let mut acc = F::zero();
                    for k in 0..n {
                        acc += xr[k] * wr[k];
                    }
                    *y = match bv {
                        Some(bv) => acc + bv[i],
                        None => acc,
                    };
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = m;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, ng))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op,
    ) -> Result<Var> {
        self.broadcast_check(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let out: Vec<F> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product; `b` may broadcast over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = F::c(c);
        let av = self.value(a);
        let t = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|&x| x * k).collect(),
        )
        .expect("shape preserved");
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat.axis", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = outer_inner(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let s = self.shape(v)[axis];
                let chunk = s * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let axis = self
            .shape(*first)
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::contract("concat of scalars"))?;
        self.concat(inputs, axis)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let mut lifted = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(v));
            lifted.push(self.reshape(v, &s)?);
        }
        self.concat(&lifted, 0)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Gathers slices along the leading axis (embedding lookup, frame selection).
    pub fn rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::contract("rows() on a scalar"));
        }
        if idx.is_empty() {
            return Err(Error::contract("rows() with no indices"));
        }
        let n0 = s[0];
        let inner: usize = s[1..].iter().product();
        let mut out = Vec::with_capacity(idx.len() * inner);
        let xv = self.value(x).data();
        for &i in idx {
            if i >= n0 {
                return Err(Error::Vocabulary {
                    index: i,
                    size: n0,
                });
            }
            out.extend_from_slice(&xv[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Rows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let r = self.rows(x, &[i])?;
        let s = self.shape(r)[1..].to_vec();
        self.reshape(r, &s)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::dim("sum_axis", &s, &[axis]));
        }
        let (outer, mid, inner) = outer_inner(&s, axis);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                add_into(dst, &xv[base..base + inner]);
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis { x, axis }, ng))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::dim("mean_axis", self.shape(x), &[axis]))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Contracts the last axis of `w` against the matching axis of `x`:
    /// `out[p.., q..] = Σ_t w[p.., t] · x[p.., t, q..]`.
    pub fn weighted_sum(&mut self, w: Var, x: Var) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.is_empty() || xs.len() < ws.len() || xs[..ws.len()] != ws[..] {
            return Err(Error::dim("weighted_sum", &ws, &xs));
        }
        let t_len = *ws.last().unwrap();
        let batch: usize = ws[..ws.len() - 1].iter().product();
        let inner: usize = xs[ws.len()..].iter().product();
        let wv = self.value(w).data();
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); batch * inner];
        for b in 0..batch {
            let dst = &mut out[b * inner..(b + 1) * inner];
            for t in 0..t_len {
                let a = wv[b * t_len + t];
                let base = (b * t_len + t) * inner;
                for (d, &v) in dst.iter_mut().zip(&xv[base..base + inner]) {
                    *d += a * v;
                }
            }
        }
        let mut shape = ws[..ws.len() - 1].to_vec();
        shape.extend_from_slice(&xs[ws.len()..]);
        let ng = self.ng(w) || self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::WeightedSum { w, x }, ng))
    }

    /// Softmax over the trailing axis, stabilized by max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = softmax_last(self.value(x));
        let ng = self.ng(x);
        self.push(t, Op::Softmax(x), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<F>().ln() + mx;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(xv.shape().to_vec(), out).expect("shape preserved");
        let ng = self.ng(x);
        self.push(t, Op::LogSoftmax(x), ng)
    }

    fn unary(&mut self, x: Var, f: impl Fn(F) -> F, op: Op) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())
            .expect("shape preserved");
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, elu, Op::Elu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(F::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    /// `len` entries of the trailing axis starting at `start`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| Error::contract("slice of a scalar"))?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_last", &s, &[start, len]));
        }
        let out: Vec<F> = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, start, len }, ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    /// Scalar at a flat index.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        if index >= xv.len() {
            return Err(Error::dim("pick", xv.shape(), &[index]));
        }
        let t = Tensor::scalar(xv.data()[index]);
        let ng = self.ng(x);
        Ok(self.push(t, Op::Pick { x, index }, ng))
    }

    // ---- composite helpers ----

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = self.scalar(c);
        self.add(a, k)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Reverse pass from a scalar loss. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf | Op::Param => {
                    match self.leaf_grads.get_mut(&i) {
                        Some(acc) => add_into(acc, &g),
                        None => {
                            self.leaf_grads.insert(i, g);
                        }
                    }
                    continue;
                }
                _ => {}
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => unreachable!(),
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (m, n) = (ws[0], ws[1]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let rows = xv.len() / n;
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let gxr = &mut gx[r * n..(r + 1) * n];
                        for i in 0..m {
                            let gy = g[r * m + i];
                            if gy == F::zero() {
                                continue;
                            }
                            for (d, &wk) in gxr.iter_mut().zip(&wv[i * n..(i + 1) * n]) {
                                *d += gy * wk;
                            }
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    for r in 0..rows {
                        let xr = &xv[r * n..(r + 1) * n];
                        for i in 0..m {
                            let gy = g[r * m + i];
                            if gy == F::zero() {
                                continue;
                            }
                            for (d, &xk) in gw[i * n..(i + 1) * n].iter_mut().zip(xr) {
                                *d += gy * xk;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        for r in 0..rows {
                            add_into(gb, &g[r * m..(r + 1) * m]);
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let nb = gb.len();
                    for (k, &v) in g.iter().enumerate() {
                        if neg {
                            gb[k % nb] -= v;
                        } else {
                            gb[k % nb] += v;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let nb = bv.len();
                if let Some(ga) = self.slot(grads, *a) {
                    for (k, d) in ga.iter_mut().enumerate() {
                        *d += g[k] * bv[k % nb];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (k, &v) in g.iter().enumerate() {
                        gb[k % nb] += v * av[k];
                    }
                }
            }
            Op::Scale(a, c) => {
                let k = F::c(*c);
                if let Some(ga) = self.slot(grads, *a) {
                    for (d, &v) in ga.iter_mut().zip(g) {
                        *d += v * k;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = outer_inner(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let s = self.shape(v)[*axis];
                    let chunk = s * inner;
                    if let Some(gv) = self.slot(grads, v) {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            add_into(&mut gv[o * chunk..(o + 1) * chunk], &g[src..src + chunk]);
                        }
                    }
                    offset += s;
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Rows { x, idx } => {
                let inner = node.value.len() / idx.len();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &j) in idx.iter().enumerate() {
                        add_into(
                            &mut gx[j * inner..(j + 1) * inner],
                            &g[r * inner..(r + 1) * inner],
                        );
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                let (outer, mid, inner) = outer_inner(self.shape(*x), *axis);
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            add_into(&mut gx[base..base + inner], src);
                        }
                    }
                }
            }
            Op::WeightedSum { w, x } => {
                let ws = self.shape(*w);
                let t_len = *ws.last().unwrap();
                let batch = self.value(*w).len() / t_len;
                let inner = node.value.len() / batch;
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                if let Some(gw) = self.slot(grads, *w) {
                    for b in 0..batch {
                        let gy = &g[b * inner..(b + 1) * inner];
                        for t in 0..t_len {
                            let base = (b * t_len + t) * inner;
                            let mut acc = F::zero();
                            for (&a, &c) in gy.iter().zip(&xv[base..base + inner]) {
                                acc += a * c;
                            }
                            gw[b * t_len + t] += acc;
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for b in 0..batch {
                        let gy = &g[b * inner..(b + 1) * inner];
                        for t in 0..t_len {
                            let a = wv[b * t_len + t];
                            let base = (b * t_len + t) * inner;
                            for (d, &v) in gx[base..base + inner].iter_mut().zip(gy) {
                                *d += a * v;
                            }
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((gxr, yr), gr) in gx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for k in 0..n {
                            gxr[k] += yr[k] * (gr[k] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((gxr, yr), gr) in gx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let total: F = gr.iter().copied().sum();
                        for k in 0..n {
                            gxr[k] += gr[k] - yr[k].exp() * total;
                        }
                    }
                }
            }
            Op::Elu(x) => {
                let xv = self.value(*x).data();
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for k in 0..gx.len() {
                        let d = if xv[k] >= F::zero() {
                            F::one()
                        } else {
                            y[k] + F::one()
                        };
                        gx[k] += g[k] * d;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for k in 0..gx.len() {
                        if xv[k] > F::zero() {
                            gx[k] += g[k];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for k in 0..gx.len() {
                        gx[k] += g[k] * y[k] * (F::one() - y[k]);
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for k in 0..gx.len() {
                        gx[k] += g[k] * (F::one() - y[k] * y[k]);
                    }
                }
            }
            Op::Slice { x, start, len } => {
                let n = self.value(*x).last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for (gxr, gr) in gx.chunks_mut(n).zip(g.chunks(*len)) {
                        add_into(&mut gxr[*start..start + len], gr);
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Pick { x, index } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx[*index] += g[0];
                }
            }
        }
    }
}

#[inline]
pub fn elu<F: Real>(v: F) -> F {
    if v >= F::zero() {
        v
    } else {
        v.exp() - F::one()
    }
}

#[inline]
pub fn sigmoid<F: Real>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

/// Softmax over the trailing axis of a plain tensor.
pub fn softmax_last<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let n = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let mx = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut total = F::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), d).unwrap()
    }

    #[test]
    fn linear_selects_column_for_unit_input() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 0.0]));
        let w = g.constant(t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
        let b = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 4.0]);
    }

    #[test]
    fn linear_of_zero_is_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([3]));
        let w = g.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.1, 9.0]));
        let b = g.constant(t(&[2], &[0.25, -7.0]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -7.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([3]));
        let w = g.constant(Tensor::zeros([2, 4]));
        match g.linear(x, w, None) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![3]);
                assert_eq!(right, vec![2, 4]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let c = g.constant(t(&[3], &[0.7, 0.7, 0.7]));
        let s = g.softmax(c);
        for &p in g.value(s).data() {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
        let one = g.constant(t(&[1], &[-42.0]));
        let s1 = g.softmax(one);
        assert_eq!(g.value(s1).data(), &[1.0]);
        let big = g.constant(t(&[2], &[1000.0, 0.0]));
        let sb = g.softmax(big);
        let v = g.value(sb).data();
        assert!(v.iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let m = g.mul(a, b).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 8.0]);
        let x = g.constant(t(&[1], &[5.0]));
        let y = g.constant(t(&[1], &[6.0]));
        let c = g.concat(&[x, y], 0).unwrap();
        assert_eq!(g.value(c).data(), &[5.0, 6.0]);
        let bad = g.constant(Tensor::zeros([3]));
        assert!(matches!(g.mul(a, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn elu_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 2.0, -1.0]));
        let y = g.elu(x);
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 2.0);
        assert_abs_diff_eq!(v[2], (-1.0f64).exp() - 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[2], -0.632, epsilon = 1e-3);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let w = g.input(t(&[2, 3], &[1.0, -2.0, 0.5, 4.0, 3.0, -1.0]));
        let s = g.sum_all(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_twice_w() {
        let vals = [0.3, -1.2, 2.5];
        let mut g = Graph::new();
        let w = g.input(t(&[3], &vals));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum_all(sq);
        g.backward(s).unwrap();
        let grad = g.grad(w).unwrap();
        for (gv, v) in grad.iter().zip(vals) {
            assert_abs_diff_eq!(*gv, 2.0 * v, epsilon = 1e-15);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let w = g.input(t(&[2], &[1.0, 2.0]));
        let s = g.sum_all(w);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.input(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn weighted_sum_batches_over_leading_axes() {
        let mut g = Graph::new();
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.25, 0.75]));
        let x = g.constant(t(&[2, 2, 1], &[3.0, 5.0, 4.0, 8.0]));
        let y = g.weighted_sum(w, x).unwrap();
        assert_eq!(g.shape(y), &[2, 1]);
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn param_grads_flush_into_store() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.weight("w", &[2, 2]).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let again = g.param(&store, id);
        assert_eq!(w, again);
        let s = g.sum_all(w);
        g.backward(s).unwrap();
        g.flush_param_grads(&mut store);
        assert_eq!(store.grad(id).data(), &[1.0; 4]);
    }
}
