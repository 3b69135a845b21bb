//! Reverse-mode tape over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so reverse insertion order is a
//! valid topological order for backpropagation. Parameters are bound by name
//! from a [`ParamStore`]; after [`Graph::backward`] their gradients can be
//! added back into the store with [`Graph::accumulate_into`].

use std::collections::BTreeMap;

use super::ops;
use super::tensor::gemm;
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: usize, w: usize, b: usize },
    MatMul { a: usize, b: usize },
    Relu(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    MaxPoolSet { a: usize, argmax: Vec<usize> },
    MeanRows(usize),
    ConcatCols { a: usize, b: usize },
    Reshape(usize),
    Pick { a: usize, index: usize },
    AreaPool { a: usize, from: (usize, usize), to: (usize, usize) },
    Upsample { a: usize, from: (usize, usize), to: (usize, usize) },
    Sum(usize),
    Mse { a: usize, target: Tensor },
    SoftmaxXent { logits: usize, probs: Tensor, targets: Vec<usize>, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, usize>,
}

/// Output dims of a broadcasting binary op, or `None` if incompatible.
fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

#[inline]
fn bidx(dims: (usize, usize), r: usize, c: usize) -> usize {
    let r = if dims.0 == 1 { 0 } else { r };
    let c = if dims.1 == 1 { 0 } else { c };
    r * dims.1 + c
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Binds a named parameter; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&idx) = self.params.get(name) {
            return Ok(Var(idx));
        }
        let v = self.push(store.value(name)?.clone(), Op::Leaf);
        self.params.insert(name.to_string(), v.0);
        Ok(v)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::affine(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Affine { x: x.0, w: w.0, b: b.0 }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul { a: a.0, b: b.0 }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = ops::relu(self.value(a));
        self.push(y, Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = ops::sigmoid(self.value(a));
        self.push(y, Op::Sigmoid(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let y = ops::softmax_rows(self.value(a));
        self.push(y, Op::SoftmaxRows(a.0))
    }

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (da, db) = (ta.dims2(), tb.dims2());
        let out = broadcast_dims(da, db).ok_or_else(|| Error::dim(name, ta.shape(), tb.shape()))?;
        let mut data = Vec::with_capacity(out.0 * out.1);
        for r in 0..out.0 {
            for c in 0..out.1 {
                data.push(f(ta.data()[bidx(da, r, c)], tb.data()[bidx(db, r, c)]));
            }
        }
        Tensor::matrix(out.0, out.1, data)
    }

    /// Elementwise sum with row/column/scalar broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(y, Op::Add { a: a.0, b: b.0 }))
    }

    /// Elementwise product with row/column/scalar broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(y, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let y = self.value(a).map(|v| v * factor);
        self.push(y, Op::Scale { a: a.0, factor })
    }

    /// Symmetric max over rows; see [`ops::max_pool_set`].
    pub fn max_pool_set(&mut self, a: Var) -> Result<Var> {
        let (y, argmax) = ops::max_pool_set(self.value(a))?;
        Ok(self.push(y, Op::MaxPoolSet { a: a.0, argmax }))
    }

    /// Mean over rows (global average pooling for pixel-major maps).
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, d) = t.dims2();
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let y = Tensor::matrix(1, d, out).expect("non-empty");
        self.push(y, Op::MeanRows(a.0))
    }

    /// Horizontal concatenation; a single-row `b` is repeated for every row of `a`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((na, da), (nb, db)) = (ta.dims2(), tb.dims2());
        if nb != na && nb != 1 {
            return Err(Error::dim("concat_cols", ta.shape(), tb.shape()));
        }
        let mut data = Vec::with_capacity(na * (da + db));
        for r in 0..na {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(if nb == 1 { 0 } else { r }));
        }
        let y = Tensor::matrix(na, da + db, data)?;
        Ok(self.push(y, Op::ConcatCols { a: a.0, b: b.0 }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(y, Op::Reshape(a.0)))
    }

    /// Selects one element (flat index) as a `1x1` scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        if index >= t.len() {
            return Err(Error::dim("pick", t.shape(), &[index]));
        }
        let y = Tensor::scalar(t.data()[index]);
        Ok(self.push(y, Op::Pick { a: a.0, index }))
    }

    pub fn area_pool(&mut self, a: Var, from: (usize, usize), to: (usize, usize)) -> Result<Var> {
        let y = ops::area_pool(self.value(a), from, to)?;
        Ok(self.push(y, Op::AreaPool { a: a.0, from, to }))
    }

    pub fn upsample_nearest(&mut self, a: Var, from: (usize, usize), to: (usize, usize)) -> Result<Var> {
        let y = ops::upsample_nearest(self.value(a), from, to)?;
        Ok(self.push(y, Op::Upsample { a: a.0, from, to }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    /// Mean squared difference to a constant target.
    pub fn mse(&mut self, a: Var, target: &Tensor) -> Result<Var> {
        let t = self.value(a);
        if t.len() != target.len() {
            return Err(Error::dim("mse", t.shape(), target.shape()));
        }
        let n = t.len() as f64;
        let s = t.data().iter().zip(target.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(s), Op::Mse { a: a.0, target: target.clone() }))
    }

    /// Weighted mean cross-entropy of row-wise softmax over `logits`:
    /// `sum_i w_i * -ln p[i, t_i] / sum_i w_i`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        let (n, d) = t.dims2();
        if targets.len() != n || weights.len() != n {
            return Err(Error::dim("softmax_cross_entropy", t.shape(), &[targets.len(), weights.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&k| k >= d) {
            return Err(Error::dim("softmax_cross_entropy target", t.shape(), &[bad]));
        }
        let probs = ops::softmax_rows(t);
        let total: f64 = weights.iter().sum();
        let mut loss = 0.0;
        for i in 0..n {
            loss -= weights[i] * probs.get(i, targets[i]).max(f64::MIN_POSITIVE).ln();
        }
        loss /= total;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent { logits: logits.0, probs, targets: targets.to_vec(), weights: weights.to_vec() },
        ))
    }

    fn add_grad(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
        match &mut grads[idx] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Reduces a broadcast gradient `g` (shape `out`) back to `dims`.
    fn reduce_to(g: &[f64], out: (usize, usize), dims: (usize, usize)) -> Vec<f64> {
        if out == dims {
            return g.to_vec();
        }
        let mut red = vec![0.0; dims.0 * dims.1];
        for r in 0..out.0 {
            for c in 0..out.1 {
                red[bidx(dims, r, c)] += g[r * out.1 + c];
            }
        }
        red
    }

    /// Backpropagates from the scalar node `loss`, replacing any previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::dim("backward", lv.shape(), &[1]));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("loss {}", lv.item())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |i: usize| &self.nodes[i].value;
            match &node.op {
                Op::Leaf => {}
                Op::Affine { x, w, b } => {
                    let (n, din) = val(*x).dims2();
                    let dout = val(*w).cols();
                    let mut dx = vec![0.0; n * din];
                    gemm(n, dout, din, gy.data(), false, val(*w).data(), true, 0.0, &mut dx);
                    let mut dw = vec![0.0; din * dout];
                    gemm(din, n, dout, val(*x).data(), true, gy.data(), false, 0.0, &mut dw);
                    let db = Self::reduce_to(gy.data(), (n, dout), (1, dout));
                    Self::add_grad(&mut grads, *x, Tensor::new(val(*x).shape().to_vec(), dx)?);
                    Self::add_grad(&mut grads, *w, Tensor::new(val(*w).shape().to_vec(), dw)?);
                    Self::add_grad(&mut grads, *b, Tensor::new(val(*b).shape().to_vec(), db)?);
                }
                Op::MatMul { a, b } => {
                    let (n, k) = val(*a).dims2();
                    let m = val(*b).cols();
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, gy.data(), false, val(*b).data(), true, 0.0, &mut da);
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, val(*a).data(), true, gy.data(), false, 0.0, &mut db);
                    Self::add_grad(&mut grads, *a, Tensor::new(val(*a).shape().to_vec(), da)?);
                    Self::add_grad(&mut grads, *b, Tensor::new(val(*b).shape().to_vec(), db)?);
                }
                Op::Relu(a) => {
                    let mut g = gy.clone();
                    for (gv, y) in g.data_mut().iter_mut().zip(node.value.data()) {
                        if *y <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    let g = g.reshaped(val(*a).shape())?;
                    Self::add_grad(&mut grads, *a, g);
                }
                Op::Sigmoid(a) => {
                    let mut g = gy.clone();
                    for (gv, s) in g.data_mut().iter_mut().zip(node.value.data()) {
                        *gv *= s * (1.0 - s);
                    }
                    let g = g.reshaped(val(*a).shape())?;
                    Self::add_grad(&mut grads, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let (n, d) = node.value.dims2();
                    let mut g = gy.data().to_vec();
                    for r in 0..n {
                        let s = node.value.row(r);
                        let row = &mut g[r * d..(r + 1) * d];
                        let dot: f64 = row.iter().zip(s).map(|(x, y)| x * y).sum();
                        for (gv, sv) in row.iter_mut().zip(s) {
                            *gv = sv * (*gv - dot);
                        }
                    }
                    Self::add_grad(&mut grads, *a, Tensor::new(val(*a).shape().to_vec(), g)?);
                }
                Op::Add { a, b } => {
                    let out = node.value.dims2();
                    let ga = Self::reduce_to(gy.data(), out, val(*a).dims2());
                    let gb = Self::reduce_to(gy.data(), out, val(*b).dims2());
                    Self::add_grad(&mut grads, *a, Tensor::new(val(*a).shape().to_vec(), ga)?);
                    Self::add_grad(&mut grads, *b, Tensor::new(val(*b).shape().to_vec(), gb)?);
                }
                Op::Mul { a, b } => {
                    let out = node.value.dims2();
                    let (da, db) = (val(*a).dims2(), val(*b).dims2());
                    let (ad, bd) = (val(*a).data(), val(*b).data());
                    let mut ga_full = Vec::with_capacity(out.0 * out.1);
                    let mut gb_full = Vec::with_capacity(out.0 * out.1);
                    for r in 0..out.0 {
                        for c in 0..out.1 {
                            let g = gy.data()[r * out.1 + c];
                            ga_full.push(g * bd[bidx(db, r, c)]);
                            gb_full.push(g * ad[bidx(da, r, c)]);
                        }
                    }
                    let ga = Self::reduce_to(&ga_full, out, da);
                    let gb = Self::reduce_to(&gb_full, out, db);
                    Self::add_grad(&mut grads, *a, Tensor::new(val(*a).shape().to_vec(), ga)?);
                    Self::add_grad(&mut grads, *b, Tensor::new(val(*b).shape().to_vec(), gb)?);
                }
                Op::Scale { a, factor } => {
                    let g = gy.map(|v| v * factor).reshaped(val(*a).shape())?;
                    Self::add_grad(&mut grads, *a, g);
                }
                Op::MaxPoolSet { a, argmax } => {
                    let src = val(*a);
                    let d = src.cols();
                    let mut g = vec![0.0; src.len()];
                    for (k, &r) in argmax.iter().enumerate() {
                        g[r * d + k] += gy.data()[k];
                    }
                    Self::add_grad(&mut grads, *a, Tensor::new(src.shape().to_vec(), g)?);
                }
                Op::MeanRows(a) => {
                    let src = val(*a);
                    let (n, d) = src.dims2();
                    let mut g = Vec::with_capacity(n * d);
                    for _ in 0..n {
                        g.extend(gy.data().iter().map(|v| v / n as f64));
                    }
                    Self::add_grad(&mut grads, *a, Tensor::new(src.shape().to_vec(), g)?);
                }
                Op::ConcatCols { a, b } => {
                    let (na, da) = val(*a).dims2();
                    let (nb, db) = val(*b).dims2();
                    let mut ga = Vec::with_capacity(na * da);
                    let mut gb = vec![0.0; nb * db];
                    for r in 0..na {
                        let row = &gy.data()[r * (da + db)..(r + 1) * (da + db)];
                        ga.extend_from_slice(&row[..da]);
                        let dst = if nb == 1 { 0 } else { r };
                        for (o, v) in gb[dst * db..(dst + 1) * db].iter_mut().zip(&row[da..]) {
                            *o += v;
                        }
                    }
                    Self::add_grad(&mut grads, *a, Tensor::new(val(*a).shape().to_vec(), ga)?);
                    Self::add_grad(&mut grads, *b, Tensor::new(val(*b).shape().to_vec(), gb)?);
                }
                Op::Reshape(a) => {
                    let g = gy.clone().reshaped(val(*a).shape())?;
                    Self::add_grad(&mut grads, *a, g);
                }
                Op::Pick { a, index } => {
                    let mut g = Tensor::zeros(val(*a).shape());
                    g.data_mut()[*index] = gy.item();
                    Self::add_grad(&mut grads, *a, g);
                }
                Op::AreaPool { a, from, to } => {
                    let src = val(*a);
                    let c = src.cols();
                    let mut g = vec![0.0; src.len()];
                    for i in 0..to.0 {
                        let (r0, r1) = ops::area_window(i, from.0, to.0);
                        for j in 0..to.1 {
                            let (c0, c1) = ops::area_window(j, from.1, to.1);
                            let count = ((r1 - r0) * (c1 - c0)) as f64;
                            let go = &gy.data()[(i * to.1 + j) * c..(i * to.1 + j + 1) * c];
                            for r in r0..r1 {
                                for cc in c0..c1 {
                                    let base = (r * from.1 + cc) * c;
                                    for (k, v) in go.iter().enumerate() {
                                        g[base + k] += v / count;
                                    }
                                }
                            }
                        }
                    }
                    Self::add_grad(&mut grads, *a, Tensor::new(src.shape().to_vec(), g)?);
                }
                Op::Upsample { a, from, to } => {
                    let src = val(*a);
                    let c = src.cols();
                    let mut g = vec![0.0; src.len()];
                    for i in 0..to.0 {
                        let si = ops::nearest_index(i, from.0, to.0);
                        for j in 0..to.1 {
                            let sj = ops::nearest_index(j, from.1, to.1);
                            let go = &gy.data()[(i * to.1 + j) * c..(i * to.1 + j + 1) * c];
                            let base = (si * from.1 + sj) * c;
                            for (k, v) in go.iter().enumerate() {
                                g[base + k] += v;
                            }
                        }
                    }
                    Self::add_grad(&mut grads, *a, Tensor::new(src.shape().to_vec(), g)?);
                }
                Op::Sum(a) => {
                    let g = Tensor::filled(val(*a).shape(), gy.item());
                    Self::add_grad(&mut grads, *a, g);
                }
                Op::Mse { a, target } => {
                    let src = val(*a);
                    let scale = 2.0 * gy.item() / src.len() as f64;
                    let g = src.data().iter().zip(target.data()).map(|(p, q)| scale * (p - q)).collect();
                    Self::add_grad(&mut grads, *a, Tensor::new(src.shape().to_vec(), g)?);
                }
                Op::SoftmaxXent { logits, probs, targets, weights } => {
                    let (n, d) = probs.dims2();
                    let total: f64 = weights.iter().sum();
                    let mut g = probs.clone().into_data();
                    for i in 0..n {
                        let f = gy.item() * weights[i] / total;
                        g[i * d + targets[i]] -= 1.0;
                        for v in &mut g[i * d..(i + 1) * d] {
                            *v *= f;
                        }
                    }
                    Self::add_grad(&mut grads, *logits, Tensor::new(val(*logits).shape().to_vec(), g)?);
                }
            }
            grads[idx] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradients of all bound parameters into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, &idx) in &self.params {
            if let Some(g) = self.grads.get(idx).and_then(Option::as_ref) {
                store.accumulate(name, g)?;
            }
        }
        Ok(())
    }

    /// Gradients of all bound parameters, by name.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &idx)| {
                let g = self.grads.get(idx).and_then(Option::as_ref).cloned();
                (name.clone(), g.unwrap_or_else(|| Tensor::zeros(self.nodes[idx].value.shape())))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numkit::{grad_check, GraphFn};

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn store(specs: &[(&str, &[usize])], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for (name, shape) in specs {
            s.insert(*name, random(&mut rng, shape)).unwrap();
        }
        s
    }

    /// Contracts `y` against fixed pseudo-random coefficients so every output
    /// entry contributes a distinct weight to the scalar.
    fn project(g: &mut Graph, y: Var) -> Result<Var> {
        let shape = g.value(y).shape().to_vec();
        let n: usize = shape.iter().product();
        let coeffs = (0..n).map(|i| 0.5 + (i * 37 % 11) as f64 / 10.0).collect();
        let c = g.input(Tensor::new(shape, coeffs)?);
        let prod = g.mul(y, c)?;
        Ok(g.sum(prod))
    }

    fn check(specs: &[(&str, &[usize])], f: impl FnMut(&mut Graph, &ParamStore) -> Result<Var>) {
        let mut s = store(specs, 11);
        let report = grad_check(&mut GraphFn(f), &mut s, 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn affine_and_matmul_gradients() {
        check(&[("x", &[4, 3]), ("w", &[3, 5]), ("b", &[5])], |g, s| {
            let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
            let y = g.affine(x, w, b)?;
            project(g, y)
        });
        check(&[("a", &[3, 2]), ("b", &[2, 2])], |g, s| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            let y = g.matmul(a, b)?;
            project(g, y)
        });
    }

    #[test]
    fn activation_gradients() {
        check(&[("x", &[3, 4])], |g, s| {
            let x = g.param(s, "x")?;
            let a = g.relu(x);
            let b = g.sigmoid(x);
            let c = g.softmax_rows(x);
            let ab = g.add(a, b)?;
            let y = g.add(ab, c)?;
            project(g, y)
        });
    }

    #[test]
    fn broadcasting_gradients() {
        check(&[("m", &[3, 4]), ("row", &[1, 4]), ("col", &[3, 1]), ("s", &[1, 1])], |g, s| {
            let (m, row, col, sc) = (g.param(s, "m")?, g.param(s, "row")?, g.param(s, "col")?, g.param(s, "s")?);
            let a = g.mul(m, row)?;
            let b = g.mul(col, a)?;
            let c = g.add(b, sc)?;
            let d = g.mul(c, sc)?;
            let e = g.scale(d, -1.5);
            project(g, e)
        });
    }

    #[test]
    fn pooling_and_layout_gradients() {
        check(&[("x", &[5, 3]), ("y", &[1, 2]), ("v", &[4])], |g, s| {
            let (x, y, v) = (g.param(s, "x")?, g.param(s, "y")?, g.param(s, "v")?);
            let pooled = g.max_pool_set(x)?;
            let mean = g.mean_rows(x);
            let both = g.concat_cols(x, y)?;
            let t = g.reshape(v, &[2, 2])?;
            let picked = g.pick(v, 2)?;
            let parts = [project(g, pooled)?, project(g, mean)?, project(g, both)?, project(g, t)?, picked];
            let mut acc = parts[0];
            for p in &parts[1..] {
                acc = g.add(acc, *p)?;
            }
            Ok(acc)
        });
    }

    #[test]
    fn resampling_gradients() {
        check(&[("x", &[15, 2])], |g, s| {
            let x = g.param(s, "x")?;
            let down = g.area_pool(x, (3, 5), (2, 2))?;
            let up = g.upsample_nearest(down, (2, 2), (5, 7))?;
            project(g, up)
        });
    }

    #[test]
    fn loss_gradients() {
        check(&[("x", &[4, 2])], |g, s| {
            let x = g.param(s, "x")?;
            let target = Tensor::new(vec![4, 2], vec![0.5; 8])?;
            let a = g.mse(x, &target)?;
            let b = g.softmax_cross_entropy(x, &[0, 1, 1, 0], &[1.0, 2.0, 2.0, 0.5])?;
            g.add(a, b)
        });
    }

    #[test]
    fn max_pool_routes_gradient_to_first_maximum() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&[[2.0, 1.0], [2.0, 3.0]]).unwrap());
        let p = g.max_pool_set(x).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn broadcast_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[3, 2]));
        let b = g.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
        assert!(matches!(g.concat_cols(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn forward_is_deterministic() {
        let s = store(&[("x", &[6, 4]), ("w", &[4, 3]), ("b", &[3])], 5);
        let run = || {
            let mut g = Graph::new();
            let (x, w, b) = (g.param(&s, "x").unwrap(), g.param(&s, "w").unwrap(), g.param(&s, "b").unwrap());
            let y = g.affine(x, w, b).unwrap();
            let y = g.sigmoid(y);
            g.value(y).clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
