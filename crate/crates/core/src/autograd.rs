//! A small reverse-mode tape over [`Tensor`] values.
//!
//! A [`Graph`] records every operation whose inputs require gradients.
//! [`Graph::inference`] records nothing, so intermediate values are freed as
//! soon as their [`Var`] handles drop.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvSpec, Tensor};

#[derive(Clone, Debug)]
pub struct Var {
    id: usize,
    value: Rc<Tensor>,
    tracked: bool,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Shared handle to the value, for reuse in another graph.
    pub fn value_rc(&self) -> Rc<Tensor> {
        self.value.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tracked(&self) -> bool {
        self.tracked
    }
}

enum Op {
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    ConvTranspose2x2 {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    MulConst {
        x: Var,
        mask: Rc<Tensor>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Stack {
        parts: Vec<Var>,
    },
    SelectBatch {
        x: Var,
        index: usize,
    },
    LstmCell {
        gates: Var,
        c_prev: Var,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    WeightedBce {
        p: Var,
        target: Rc<Tensor>,
        weights: Vec<f64>,
        scale: f64,
        eps: f64,
    },
}

struct Record {
    out: usize,
    out_value: Rc<Tensor>,
    op: Op,
}

pub struct Graph {
    records: RefCell<Vec<Record>>,
    next_id: Cell<usize>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a shape into `(outer, axis, inner)` sizes around axis 1.
fn split_axis1(shape: &[usize]) -> (usize, usize, usize) {
    let outer = shape[0];
    let axis = shape.get(1).copied().unwrap_or(1);
    let inner = shape.iter().skip(2).product();
    (outer, axis, inner)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            records: RefCell::new(Vec::new()),
            next_id: Cell::new(0),
            recording: true,
        }
    }

    /// A graph that never records; use for forward-only evaluation.
    pub fn inference() -> Self {
        Graph {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn alloc(&self) -> usize {
        let id = self.next_id.get();
        self.next_id.set(id + 1);
        id
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.constant_rc(Rc::new(value))
    }

    pub fn constant_rc(&self, value: Rc<Tensor>) -> Var {
        Var {
            id: self.alloc(),
            value,
            tracked: false,
        }
    }

    /// A differentiable input whose gradient can be read after
    /// [`Graph::backward`].
    pub fn leaf(&self, value: Tensor) -> Var {
        self.leaf_rc(Rc::new(value))
    }

    pub fn leaf_rc(&self, value: Rc<Tensor>) -> Var {
        Var {
            id: self.alloc(),
            value,
            tracked: self.recording,
        }
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var {
        let id = self.alloc();
        let value = Rc::new(value);
        let tracked = tracked && self.recording;
        if tracked {
            self.records.borrow_mut().push(Record {
                out: id,
                out_value: value.clone(),
                op,
            });
        }
        Var { id, value, tracked }
    }

    pub fn conv2d(&self, x: &Var, w: &Var, b: Option<&Var>, spec: ConvSpec) -> Result<Var> {
        let y = tensor::conv2d(&x.value, &w.value, b.map(|b| &*b.value), spec)?;
        let tracked = x.tracked || w.tracked || b.is_some_and(|b| b.tracked);
        Ok(self.push(
            y,
            Op::Conv2d {
                x: x.clone(),
                w: w.clone(),
                b: b.cloned(),
                spec,
            },
            tracked,
        ))
    }

    pub fn conv_transpose2x2(&self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        let y = tensor::conv_transpose2x2(&x.value, &w.value, &b.value)?;
        let tracked = x.tracked || w.tracked || b.tracked;
        Ok(self.push(
            y,
            Op::ConvTranspose2x2 {
                x: x.clone(),
                w: w.clone(),
                b: b.clone(),
            },
            tracked,
        ))
    }

    pub fn max_pool2(&self, x: &Var) -> Var {
        let (y, argmax) = tensor::max_pool2(&x.value);
        self.push(y, Op::MaxPool2 { x: x.clone(), argmax }, x.tracked)
    }

    /// Normalizes each `(n, c)` plane to zero mean and unit variance (no
    /// affine). A single-pixel plane carries no statistics and passes
    /// through unchanged.
    pub fn instance_norm(&self, x: &Var, eps: f64) -> Var {
        let (n, c, h, w) = x.value.dims4();
        let hw = h * w;
        if hw == 1 {
            return x.clone();
        }
        let mut y = (*x.value).clone();
        let mut inv_std = Vec::with_capacity(n * c);
        for plane in y.data_mut().chunks_mut(hw) {
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + eps).sqrt();
            plane.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        self.push(y, Op::InstanceNorm { x: x.clone(), inv_std }, x.tracked)
    }

    pub fn leaky_relu(&self, x: &Var, slope: f64) -> Var {
        let y = x.value.map(|v| if v > 0.0 { v } else { slope * v });
        self.push(y, Op::LeakyRelu { x: x.clone(), slope }, x.tracked)
    }

    pub fn tanh(&self, x: &Var) -> Var {
        self.push(x.value.map(f64::tanh), Op::Tanh { x: x.clone() }, x.tracked)
    }

    pub fn sigmoid(&self, x: &Var) -> Var {
        self.push(x.value.map(sigmoid), Op::Sigmoid { x: x.clone() }, x.tracked)
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(Error::shape(a.shape(), b.shape()));
        }
        let mut y = (*a.value).clone();
        y.add_assign(&b.value);
        Ok(self.push(
            y,
            Op::Add {
                a: a.clone(),
                b: b.clone(),
            },
            a.tracked || b.tracked,
        ))
    }

    pub fn scale(&self, x: &Var, s: f64) -> Var {
        self.push(x.value.map(|v| v * s), Op::Scale { x: x.clone(), s }, x.tracked)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&self, x: &Var, mask: Tensor) -> Result<Var> {
        if x.shape() != mask.shape() {
            return Err(Error::shape(x.shape(), mask.shape()));
        }
        let mut y = (*x.value).clone();
        for (v, m) in y.data_mut().iter_mut().zip(mask.data()) {
            *v *= m;
        }
        Ok(self.push(
            y,
            Op::MulConst {
                x: x.clone(),
                mask: Rc::new(mask),
            },
            x.tracked,
        ))
    }

    /// Concatenates along axis 1; all other axes must agree.
    pub fn concat(&self, parts: &[&Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of nothing".into()))?;
        let (outer, _, inner) = split_axis1(first.shape());
        let mut total = 0;
        for p in parts {
            let (o, a, i) = split_axis1(p.shape());
            if o != outer || i != inner || p.shape().len() != first.shape().len() {
                return Err(Error::shape(first.shape(), p.shape()));
            }
            total += a;
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let (_, a, _) = split_axis1(p.shape());
                data.extend_from_slice(&p.value.data()[o * a * inner..(o + 1) * a * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[1] = total;
        let tracked = parts.iter().any(|p| p.tracked);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.iter().map(|&p| p.clone()).collect(),
            },
            tracked,
        ))
    }

    /// `x[:, start..start+len, ...]`.
    pub fn slice(&self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let (outer, axis, inner) = split_axis1(x.shape());
        if start + len > axis {
            return Err(Error::InvalidInput(format!(
                "slice {start}..{} of axis with {axis} entries",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis + start) * inner;
            data.extend_from_slice(&x.value.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[1] = len;
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { x: x.clone(), start }, x.tracked))
    }

    /// Concatenates along axis 0.
    pub fn stack(&self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("stack of nothing".into()))?;
        let tail = &first.shape()[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape()[1..] != tail {
                return Err(Error::shape(first.shape(), p.shape()));
            }
            rows += p.shape()[0];
            data.extend_from_slice(p.value.data());
        }
        let mut shape = first.shape().to_vec();
        shape[0] = rows;
        let tracked = parts.iter().any(|p| p.tracked);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Stack {
                parts: parts.to_vec(),
            },
            tracked,
        ))
    }

    /// `x[index..index+1, ...]`.
    pub fn select(&self, x: &Var, index: usize) -> Result<Var> {
        let n = x.shape()[0];
        if index >= n {
            return Err(Error::InvalidInput(format!("index {index} of {n}")));
        }
        let row = x.value.numel() / n;
        let mut shape = x.shape().to_vec();
        shape[0] = 1;
        let data = x.value.data()[index * row..(index + 1) * row].to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::SelectBatch { x: x.clone(), index }, x.tracked))
    }

    /// Fused LSTM pointwise update. `gates: [N,4F,H,W]` holds the
    /// pre-activations in (input, forget, output, candidate) order and
    /// `c_prev: [N,F,H,W]`; the result is `[N,2F,H,W]` with the new hidden map
    /// in the first F channels and the new cell map in the last F.
    pub fn lstm_cell(&self, gates: &Var, c_prev: &Var) -> Result<Var> {
        let (n, g4, h, w) = gates.value.dims4();
        let f = g4 / 4;
        if g4 % 4 != 0 || c_prev.shape() != [n, f, h, w] {
            return Err(Error::shape([n, f, h, w], c_prev.shape()));
        }
        let plane = f * h * w;
        let mut out = Tensor::zeros(&[n, 2 * f, h, w]);
        for b in 0..n {
            let gs = &gates.value.data()[b * 4 * plane..(b + 1) * 4 * plane];
            let cp = &c_prev.value.data()[b * plane..(b + 1) * plane];
            let (hs, cs) = out.data_mut()[b * 2 * plane..(b + 1) * 2 * plane].split_at_mut(plane);
            for k in 0..plane {
                let i = sigmoid(gs[k]);
                let fg = sigmoid(gs[plane + k]);
                let o = sigmoid(gs[2 * plane + k]);
                let g = gs[3 * plane + k].tanh();
                let c = fg * cp[k] + i * g;
                cs[k] = c;
                hs[k] = o * c.tanh();
            }
        }
        Ok(self.push(
            out,
            Op::LstmCell {
                gates: gates.clone(),
                c_prev: c_prev.clone(),
            },
            gates.tracked || c_prev.tracked,
        ))
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&self, x: &Var) -> Var {
        self.push(Tensor::scalar(x.value.sum()), Op::Sum { x: x.clone() }, x.tracked)
    }

    pub fn reshape(&self, x: &Var, shape: &[usize]) -> Result<Var> {
        let y = (*x.value).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x: x.clone() }, x.tracked))
    }

    /// Class-weighted binary cross-entropy on `p: [N,K,...]` against a
    /// constant target of the same shape:
    /// `scale / K * sum_k weights[k] * mean_{n,...} bce(p, y)`, with `p`
    /// clipped to `[eps, 1 - eps]` before the logarithm.
    pub fn weighted_bce(
        &self,
        p: &Var,
        target: Rc<Tensor>,
        weights: &[f64],
        scale: f64,
        eps: f64,
    ) -> Result<Var> {
        if p.shape() != target.shape() {
            return Err(Error::shape(p.shape(), target.shape()));
        }
        let (outer, k, inner) = split_axis1(p.shape());
        if weights.len() != k {
            return Err(Error::shape(k, weights.len()));
        }
        let mut per_class = vec![0.0; k];
        for o in 0..outer {
            for (c, acc) in per_class.iter_mut().enumerate() {
                let base = (o * k + c) * inner;
                let ps = &p.value.data()[base..base + inner];
                let ys = &target.data()[base..base + inner];
                *acc += ps
                    .iter()
                    .zip(ys)
                    .map(|(&pv, &y)| {
                        let pc = pv.clamp(eps, 1.0 - eps);
                        -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
                    })
                    .sum::<f64>();
            }
        }
        let m = (outer * inner) as f64;
        let loss = scale / k as f64
            * per_class
                .iter()
                .zip(weights)
                .map(|(s, w)| w * s / m)
                .sum::<f64>();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedBce {
                p: p.clone(),
                target,
                weights: weights.to_vec(),
                scale,
                eps,
            },
            p.tracked,
        ))
    }

    /// Reverse-mode gradients of the scalar `root` with respect to every
    /// tracked leaf.
    pub fn backward(&self, root: &Var) -> Result<Gradients> {
        if root.value.numel() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward from non-scalar of shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.next_id.get()];
        if root.tracked {
            grads[root.id] = Some(Tensor::full(root.shape(), 1.0));
        }
        let records = self.records.borrow();
        for rec in records.iter().rev().filter(|r| r.out <= root.id) {
            let Some(gout) = grads[rec.out].take() else {
                continue;
            };
            backprop(rec, &gout, &mut grads)?;
        }
        Ok(Gradients { grads })
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the root does not depend on it.
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zero-filled when the root does not depend on it.
    pub fn get_or_zeros(&self, v: &Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: &Var, g: Tensor) {
    if !v.tracked {
        return;
    }
    match &mut grads[v.id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Adds `f(chunk)` into the flat range `offset..offset+len` of `v`'s
/// gradient without materializing a full-size temporary.
fn accumulate_into(grads: &mut [Option<Tensor>], v: &Var, mut f: impl FnMut(&mut [f64])) {
    if !v.tracked {
        return;
    }
    let acc = grads[v.id].get_or_insert_with(|| Tensor::zeros(v.shape()));
    f(acc.data_mut());
}

fn backprop(rec: &Record, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    match &rec.op {
        Op::Conv2d { x, w, b, spec } => {
            let (dx, dw, db) = tensor::conv2d_backward(&x.value, &w.value, *spec, gout)?;
            accumulate(grads, x, dx);
            accumulate(grads, w, dw);
            if let Some(b) = b {
                accumulate(grads, b, db);
            }
        }
        Op::ConvTranspose2x2 { x, w, b } => {
            let (dx, dw, db) = tensor::conv_transpose2x2_backward(&x.value, &w.value, gout)?;
            accumulate(grads, x, dx);
            accumulate(grads, w, dw);
            accumulate(grads, b, db);
        }
        Op::MaxPool2 { x, argmax } => {
            accumulate_into(grads, x, |acc| {
                for (g, &i) in gout.data().iter().zip(argmax) {
                    acc[i] += g;
                }
            });
        }
        Op::InstanceNorm { x, inv_std } => {
            let (_, _, h, w) = gout.dims4();
            let hw = h * w;
            let mut dx = Tensor::zeros(x.shape());
            let y = rec.out_value.data();
            for (p, &is) in inv_std.iter().enumerate() {
                let r = p * hw..(p + 1) * hw;
                let (gy, yy) = (&gout.data()[r.clone()], &y[r.clone()]);
                let mean_g = gy.iter().sum::<f64>() / hw as f64;
                let mean_gy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                for ((d, &g), &yv) in dx.data_mut()[r].iter_mut().zip(gy).zip(yy) {
                    *d = is * (g - mean_g - yv * mean_gy);
                }
            }
            accumulate(grads, x, dx);
        }
        Op::LeakyRelu { x, slope } => {
            let mut dx = gout.clone();
            for (d, &v) in dx.data_mut().iter_mut().zip(x.value.data()) {
                if v <= 0.0 {
                    *d *= slope;
                }
            }
            accumulate(grads, x, dx);
        }
        Op::Tanh { x } => {
            let mut dx = gout.clone();
            for (d, &y) in dx.data_mut().iter_mut().zip(rec.out_value.data()) {
                *d *= 1.0 - y * y;
            }
            accumulate(grads, x, dx);
        }
        Op::Sigmoid { x } => {
            let mut dx = gout.clone();
            for (d, &y) in dx.data_mut().iter_mut().zip(rec.out_value.data()) {
                *d *= y * (1.0 - y);
            }
            accumulate(grads, x, dx);
        }
        Op::Add { a, b } => {
            accumulate(grads, a, gout.clone());
            accumulate(grads, b, gout.clone());
        }
        Op::Scale { x, s } => accumulate(grads, x, gout.map(|g| g * s)),
        Op::MulConst { x, mask } => {
            let mut dx = gout.clone();
            for (d, m) in dx.data_mut().iter_mut().zip(mask.data()) {
                *d *= m;
            }
            accumulate(grads, x, dx);
        }
        Op::Concat { parts } => {
            let (outer, total, inner) = split_axis1(gout.shape());
            let mut offset = 0;
            for p in parts {
                let (_, a, _) = split_axis1(p.shape());
                let off = offset;
                accumulate_into(grads, p, |acc| {
                    for o in 0..outer {
                        let src = &gout.data()[(o * total + off) * inner..][..a * inner];
                        for (d, s) in acc[o * a * inner..(o + 1) * a * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
                offset += a;
            }
        }
        Op::Slice { x, start } => {
            let (outer, axis, inner) = split_axis1(x.shape());
            let len = gout.shape()[1];
            accumulate_into(grads, x, |acc| {
                for o in 0..outer {
                    let dst = &mut acc[(o * axis + start) * inner..][..len * inner];
                    for (d, s) in dst.iter_mut().zip(&gout.data()[o * len * inner..(o + 1) * len * inner]) {
                        *d += s;
                    }
                }
            });
        }
        Op::Stack { parts } => {
            let mut offset = 0;
            for p in parts {
                let n = p.value.numel();
                let off = offset;
                accumulate_into(grads, p, |acc| {
                    for (d, s) in acc.iter_mut().zip(&gout.data()[off..off + n]) {
                        *d += s;
                    }
                });
                offset += n;
            }
        }
        Op::SelectBatch { x, index } => {
            let row = gout.numel();
            accumulate_into(grads, x, |acc| {
                for (d, s) in acc[index * row..(index + 1) * row].iter_mut().zip(gout.data()) {
                    *d += s;
                }
            });
        }
        Op::LstmCell { gates, c_prev } => {
            let (n, g4, h, w) = gates.value.dims4();
            let plane = g4 / 4 * h * w;
            let mut dgates = Tensor::zeros(gates.shape());
            let mut dc_prev = Tensor::zeros(c_prev.shape());
            let out = rec.out_value.data();
            for b in 0..n {
                let gs = &gates.value.data()[b * 4 * plane..(b + 1) * 4 * plane];
                let cp = &c_prev.value.data()[b * plane..(b + 1) * plane];
                let c_new = &out[b * 2 * plane + plane..(b + 1) * 2 * plane];
                let dh = &gout.data()[b * 2 * plane..b * 2 * plane + plane];
                let dc = &gout.data()[b * 2 * plane + plane..(b + 1) * 2 * plane];
                let dg = &mut dgates.data_mut()[b * 4 * plane..(b + 1) * 4 * plane];
                let dcp = &mut dc_prev.data_mut()[b * plane..(b + 1) * plane];
                for k in 0..plane {
                    let i = sigmoid(gs[k]);
                    let f = sigmoid(gs[plane + k]);
                    let o = sigmoid(gs[2 * plane + k]);
                    let g = gs[3 * plane + k].tanh();
                    let tc = c_new[k].tanh();
                    let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
                    dg[k] = dct * g * i * (1.0 - i);
                    dg[plane + k] = dct * cp[k] * f * (1.0 - f);
                    dg[2 * plane + k] = dh[k] * tc * o * (1.0 - o);
                    dg[3 * plane + k] = dct * i * (1.0 - g * g);
                    dcp[k] = dct * f;
                }
            }
            accumulate(grads, gates, dgates);
            accumulate(grads, c_prev, dc_prev);
        }
        Op::Sum { x } => accumulate(grads, x, Tensor::full(x.shape(), gout.item())),
        Op::Reshape { x } => {
            let g = gout.clone().reshape(x.shape())?;
            accumulate(grads, x, g);
        }
        Op::WeightedBce {
            p,
            target,
            weights,
            scale,
            eps,
        } => {
            let (outer, k, inner) = split_axis1(p.shape());
            let coef = gout.item() * scale / (k as f64 * (outer * inner) as f64);
            let mut dp = Tensor::zeros(p.shape());
            for o in 0..outer {
                for (c, w) in weights.iter().enumerate() {
                    let base = (o * k + c) * inner;
                    let ps = &p.value.data()[base..base + inner];
                    let ys = &target.data()[base..base + inner];
                    for ((d, &pv), &y) in dp.data_mut()[base..base + inner].iter_mut().zip(ps).zip(ys) {
                        if pv > *eps && pv < 1.0 - eps {
                            *d = coef * w * (pv - y) / (pv * (1.0 - pv));
                        }
                    }
                }
            }
            accumulate(grads, p, dp);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(sum(r * f(x)))/dx for a graph
    /// function of one input.
    fn check_unary(x0: Tensor, f: impl Fn(&Graph, &Var) -> Var) {
        let g = Graph::new();
        let x = g.leaf(x0.clone());
        let y = f(&g, &x);
        let r = Tensor::new(
            y.shape().to_vec(),
            (0..y.value().numel()).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3 + 0.1).collect(),
        )
        .unwrap();
        let loss = g.sum(&g.mul_const(&y, r.clone()).unwrap());
        let analytic = g.backward(&loss).unwrap().get_or_zeros(&x);
        let h = 1e-6;
        for i in 0..x0.numel() {
            let eval = |delta: f64| {
                let gi = Graph::inference();
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let y = f(&gi, &gi.constant(xp));
                y.value().data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                "entry {i}: analytic {a} numeric {numeric}"
            );
        }
    }

    fn sample(shape: &[usize], seed: usize) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|i| (((i + seed) * 2654435761) % 1000) as f64 / 500.0 - 1.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn elementwise_gradients() {
        let x = sample(&[2, 3, 3, 2], 1);
        check_unary(x.clone(), |g, v| g.tanh(v));
        check_unary(x.clone(), |g, v| g.sigmoid(v));
        check_unary(x.clone(), |g, v| g.leaky_relu(v, 0.01));
        check_unary(x.clone(), |g, v| g.instance_norm(v, 1e-5));
        check_unary(x.clone(), |g, v| g.max_pool2(v));
        check_unary(x.clone(), |g, v| g.scale(v, -2.5));
        check_unary(x, |g, v| g.reshape(v, &[6, 6]).unwrap());
    }

    #[test]
    fn structural_gradients() {
        let x = sample(&[3, 4, 2, 2], 3);
        check_unary(x.clone(), |g, v| g.slice(v, 1, 2).unwrap());
        check_unary(x.clone(), |g, v| g.select(v, 2).unwrap());
        check_unary(x.clone(), |g, v| {
            let a = g.slice(v, 0, 1).unwrap();
            g.concat(&[v, &a, v]).unwrap()
        });
        check_unary(x, |g, v| {
            let a = g.select(v, 0).unwrap();
            let b = g.select(v, 2).unwrap();
            g.stack(&[b, a, v.clone()]).unwrap()
        });
    }

    #[test]
    fn conv_gradients() {
        let x = sample(&[2, 3, 5, 4], 5);
        let w = sample(&[2, 3, 3, 3], 7);
        let b = sample(&[2], 9);
        let spec = ConvSpec {
            stride: (2, 1),
            padding: crate::tensor::Padding {
                top: 1,
                bottom: 0,
                left: 1,
                right: 1,
            },
        };
        check_unary(x.clone(), |g, v| {
            g.conv2d(v, &g.constant(w.clone()), Some(&g.constant(b.clone())), spec).unwrap()
        });
        check_unary(w.clone(), |g, v| {
            g.conv2d(&g.constant(x.clone()), v, Some(&g.constant(b.clone())), spec).unwrap()
        });
        check_unary(b, |g, v| g.conv2d(&g.constant(x.clone()), &g.constant(w.clone()), Some(v), spec).unwrap());

        let wt = sample(&[3, 2, 2, 2], 11);
        let bt = sample(&[2], 13);
        check_unary(x.clone(), |g, v| {
            g.conv_transpose2x2(v, &g.constant(wt.clone()), &g.constant(bt.clone())).unwrap()
        });
        check_unary(wt, |g, v| g.conv_transpose2x2(&g.constant(x.clone()), v, &g.constant(bt.clone())).unwrap());
    }

    #[test]
    fn lstm_cell_gradients() {
        let gates = sample(&[2, 8, 2, 2], 17);
        let c = sample(&[2, 2, 2, 2], 19);
        check_unary(gates.clone(), |g, v| g.lstm_cell(v, &g.constant(c.clone())).unwrap());
        check_unary(c, |g, v| g.lstm_cell(&g.constant(gates.clone()), v).unwrap());
    }

    #[test]
    fn weighted_bce_value_and_gradient() {
        let g = Graph::new();
        let p = g.leaf(Tensor::new(vec![1, 1, 1, 1], vec![0.5]).unwrap());
        let y = Rc::new(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let loss = g.weighted_bce(&p, y.clone(), &[0.75], 200.0, 1e-7).unwrap();
        let expected = 200.0 * 0.75 * std::f64::consts::LN_2;
        assert!((loss.value().item() - expected).abs() < 1e-12);
        let grads = g.backward(&loss).unwrap();
        // d/dp of -ln p at 0.5 is -2
        assert!((grads.get(&p).unwrap().item() - 200.0 * 0.75 * -2.0).abs() < 1e-9);

        let pm = sample(&[2, 3, 2, 2], 23).map(|v| 0.5 + 0.4 * v);
        let target = Rc::new(sample(&[2, 3, 2, 2], 29).map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        check_unary(pm, |g, v| g.weighted_bce(v, target.clone(), &[0.2, 0.5, 0.9], 3.0, 1e-7).unwrap());
    }

    #[test]
    fn inference_graph_records_nothing() {
        let g = Graph::inference();
        let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 0.3));
        let y = g.tanh(&x);
        assert!(!y.tracked());
        assert!(g.records.borrow().is_empty());
    }
}
