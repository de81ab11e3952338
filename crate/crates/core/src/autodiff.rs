//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] is the tape: every differentiable operation appends one node
//! holding its value and the indices of its inputs. [`Graph::backward`]
//! walks the nodes in reverse recording order, so each node's backward rule
//! runs exactly once, after all of its consumers. Only leaves keep their
//! gradients; intermediate gradients are dropped as soon as they have been
//! propagated.
//!
//! Gradients accumulate (`+=`): calling `backward` twice on the same loss
//! doubles every leaf gradient, and [`Graph::accumulate_into`] adds into
//! whatever the [`ParamStore`] already holds. Call
//! [`ParamStore::zero_grads`] between optimizer steps.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::attention::{softmax_rows, AttentionMask};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, broadcast_kind, gemm, Broadcast, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

type CustomVjp = Box<dyn Fn(&Tensor) -> Tensor>;

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize, Broadcast),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    MeanRows(usize),
    SumAll(usize),
    MeanAll(usize),
    Softmax(usize),
    Relu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    PadRows(usize),
    Select(usize, usize),
    Custom(usize, CustomVjp),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// The computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a registered parameter. Repeated requests for the same id
    /// return the same node, so shared weights accumulate one gradient.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var {
                graph: self,
                id: node,
            };
        }
        let v = self.leaf(store.value(id).clone());
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    /// Gradient accumulated on a node by [`Graph::backward`], if any.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
            let node = &mut nodes[id];
            if matches!(node.op, Op::Leaf) {
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Adds every parameter-leaf gradient into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        let nodes = self.nodes.borrow();
        for (&pid, &node) in self.params.borrow().iter() {
            if let Some(g) = &nodes[node].grad {
                store.accumulate_grad(pid, g);
            }
        }
    }

    /// Records a unary op with a caller-supplied vector-Jacobian product.
    /// `vjp` maps the output gradient to the input gradient.
    pub fn custom_unary<'g>(
        &'g self,
        input: Var<'g>,
        value: Tensor,
        vjp: impl Fn(&Tensor) -> Tensor + 'static,
    ) -> Result<Var<'g>> {
        let value = value.ensure_finite("custom_unary")?;
        let rg = self.needs(&[input.id]);
        Ok(self.push(value, Op::Custom(input.id, Box::new(vjp)), rg))
    }
}

fn add_grad(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let rg = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| nodes[i].value.as_ref();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            let (r, s) = dims(val(a));
            let t = val(b).cols();
            if rg(a) {
                // dA = G · Bᵀ
                let mut out = vec![0.0; r * s];
                gemm(r, t, s, g.data(), (t as isize, 1), val(b).data(), (1, t as isize), &mut out, false);
                add_grad(grads, a, Tensor::from_parts(r, s, out));
            }
            if rg(b) {
                // dB = Aᵀ · G
                let mut out = vec![0.0; s * t];
                gemm(s, r, t, val(a).data(), (1, s as isize), g.data(), (t as isize, 1), &mut out, false);
                add_grad(grads, b, Tensor::from_parts(s, t, out));
            }
        }
        Op::MatMulNt(a, b) => {
            // out = A · Bᵀ, A: r×s, B: t×s
            let (a, b) = (*a, *b);
            let (r, s) = dims(val(a));
            let t = val(b).rows();
            if rg(a) {
                let mut out = vec![0.0; r * s];
                gemm(r, t, s, g.data(), (t as isize, 1), val(b).data(), (s as isize, 1), &mut out, false);
                add_grad(grads, a, Tensor::from_parts(r, s, out));
            }
            if rg(b) {
                // dB = Gᵀ · A
                let mut out = vec![0.0; t * s];
                gemm(t, r, s, g.data(), (1, t as isize), val(a).data(), (s as isize, 1), &mut out, false);
                add_grad(grads, b, Tensor::from_parts(t, s, out));
            }
        }
        Op::Transpose(a) => {
            if rg(*a) {
                add_grad(grads, *a, tensor::transpose(g).expect("2-D gradient"));
            }
        }
        Op::Add(a, b, kind) => {
            if rg(*a) {
                add_grad(grads, *a, g.clone());
            }
            if rg(*b) {
                let gb = match kind {
                    Broadcast::Same => g.clone(),
                    Broadcast::Row => {
                        let c = g.cols();
                        let mut out = vec![0.0; c];
                        for row in g.data().chunks(c) {
                            for (o, v) in out.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        Tensor::from_parts(1, c, out)
                    }
                    Broadcast::Scalar => Tensor::full(val(*b).shape(), g.sum()),
                };
                add_grad(grads, *b, gb);
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                add_grad(grads, *a, g.clone());
            }
            if rg(*b) {
                add_grad(grads, *b, g.map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            if rg(a) {
                add_grad(grads, a, g.zip_map(val(b), "mul", |x, y| x * y).expect("same shape"));
            }
            if rg(b) {
                add_grad(grads, b, g.zip_map(val(a), "mul", |x, y| x * y).expect("same shape"));
            }
        }
        Op::Scale(a, c) => {
            if rg(*a) {
                let c = *c;
                add_grad(grads, *a, g.map(|v| v * c));
            }
        }
        Op::ScaleBy(a, s) => {
            let (a, s) = (*a, *s);
            if rg(a) {
                let sv = val(s).item();
                add_grad(grads, a, g.map(|v| v * sv));
            }
            if rg(s) {
                let dot: f64 = g.data().iter().zip(val(a).data()).map(|(x, y)| x * y).sum();
                add_grad(grads, s, Tensor::full(val(s).shape(), dot));
            }
        }
        Op::MeanRows(a) => {
            if rg(*a) {
                let (r, c) = dims(val(*a));
                let inv = 1.0 / r as f64;
                let row: Vec<f64> = g.data().iter().map(|v| v * inv).collect();
                let data = row.iter().copied().cycle().take(r * c).collect();
                add_grad(grads, *a, Tensor::from_parts(r, c, data));
            }
        }
        Op::SumAll(a) => {
            if rg(*a) {
                add_grad(grads, *a, Tensor::full(val(*a).shape(), g.item()));
            }
        }
        Op::MeanAll(a) => {
            if rg(*a) {
                let n = val(*a).numel() as f64;
                add_grad(grads, *a, Tensor::full(val(*a).shape(), g.item() / n));
            }
        }
        Op::Softmax(a) => {
            if rg(*a) {
                let p = nodes[id].value.as_ref();
                let c = p.cols();
                let mut out = vec![0.0; p.numel()];
                for ((o, pr), gr) in out.chunks_mut(c).zip(p.data().chunks(c)).zip(g.data().chunks(c)) {
                    let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for ((o, &pv), &gv) in o.iter_mut().zip(pr).zip(gr) {
                        *o = pv * (gv - dot);
                    }
                }
                add_grad(grads, *a, Tensor::from_parts(p.rows(), c, out));
            }
        }
        Op::Relu(a) => {
            if rg(*a) {
                add_grad(
                    grads,
                    *a,
                    g.zip_map(val(*a), "relu", |gv, x| if x > 0.0 { gv } else { 0.0 })
                        .expect("same shape"),
                );
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let (r, c) = dims(xhat);
            let gamma = val(*gain).data();
            if rg(*gain) {
                let mut dg = vec![0.0; c];
                for (gr, xr) in g.data().chunks(c).zip(xhat.data().chunks(c)) {
                    for ((d, gv), xv) in dg.iter_mut().zip(gr).zip(xr) {
                        *d += gv * xv;
                    }
                }
                add_grad(grads, *gain, Tensor::from_parts(1, c, dg));
            }
            if rg(*bias) {
                let mut db = vec![0.0; c];
                for gr in g.data().chunks(c) {
                    for (d, gv) in db.iter_mut().zip(gr) {
                        *d += gv;
                    }
                }
                add_grad(grads, *bias, Tensor::from_parts(1, c, db));
            }
            if rg(*x) {
                let mut dx = vec![0.0; r * c];
                let n = c as f64;
                for i in 0..r {
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let xr = &xhat.data()[i * c..(i + 1) * c];
                    let dxhat: Vec<f64> = gr.iter().zip(gamma).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n;
                    let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..c {
                        dx[i * c + j] = inv_std[i] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                    }
                }
                add_grad(grads, *x, Tensor::from_parts(r, c, dx));
            }
        }
        Op::SliceRows(a, start) => {
            if rg(*a) {
                let (r, c) = dims(val(*a));
                let mut out = vec![0.0; r * c];
                out[start * c..start * c + g.numel()].copy_from_slice(g.data());
                add_grad(grads, *a, Tensor::from_parts(r, c, out));
            }
        }
        Op::SliceCols(a, start) => {
            if rg(*a) {
                let (r, c) = dims(val(*a));
                let w = g.cols();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    out[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                add_grad(grads, *a, Tensor::from_parts(r, c, out));
            }
        }
        Op::ConcatRows(parts) => {
            let c = g.cols();
            let mut offset = 0;
            for &p in parts {
                let pr = val(p).rows();
                if rg(p) {
                    let slice = g.data()[offset * c..(offset + pr) * c].to_vec();
                    add_grad(grads, p, Tensor::from_parts(pr, c, slice));
                }
                offset += pr;
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                if rg(p) {
                    add_grad(grads, p, g.slice_cols(offset, offset + w).expect("in range"));
                }
                offset += w;
            }
        }
        Op::PadRows(a) => {
            if rg(*a) {
                let r = val(*a).rows();
                add_grad(grads, *a, g.slice_rows(0, r).expect("in range"));
            }
        }
        Op::Select(a, idx) => {
            if rg(*a) {
                let mut out = Tensor::zeros(val(*a).shape());
                out.data_mut()[*idx] = g.item();
                add_grad(grads, *a, out);
            }
        }
        Op::Custom(a, vjp) => {
            if rg(*a) {
                add_grad(grads, *a, vjp(g));
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs"
        );
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.graph.needs(&[self.id]);
        self.graph.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        self.same_graph(other);
        let rg = self.graph.needs(&[self.id, other.id]);
        self.graph.push(value, op, rg)
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let v = tensor::matmul(&self.value(), &other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let v = tensor::matmul_nt(&self.value(), &other.value())?;
        Ok(self.binary(other, v, Op::MatMulNt(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'g>> {
        let v = tensor::transpose(&self.value())?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    /// Elementwise add; `other` may be same-shape, a `1×s` row, or a `1×1` scalar.
    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let kind = broadcast_kind(&a, &b)?;
        let v = tensor::broadcast_add(&a, &b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id, kind)))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let v = self
            .value()
            .zip_map(&other.value(), "sub", |a, b| a - b)?
            .ensure_finite("sub")?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let v = self
            .value()
            .zip_map(&other.value(), "mul", |a, b| a * b)?
            .ensure_finite("mul")?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'g>> {
        let v = self.value().map(|x| x * c).ensure_finite("scale")?;
        Ok(self.unary(v, Op::Scale(self.id, c)))
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn scale_by(&self, s: &Var<'g>) -> Result<Var<'g>> {
        let sv = s.value();
        if sv.numel() != 1 {
            return Err(Error::dim("scale_by", &self.shape(), sv.shape()));
        }
        let c = sv.item();
        let v = self.value().map(|x| x * c).ensure_finite("scale_by")?;
        Ok(self.binary(s, v, Op::ScaleBy(self.id, s.id)))
    }

    pub fn mean_rows(&self) -> Result<Var<'g>> {
        let v = tensor::mean_rows(&self.value())?;
        Ok(self.unary(v, Op::MeanRows(self.id)))
    }

    pub fn sum(&self) -> Result<Var<'g>> {
        let v = Tensor::scalar(self.value().sum()).ensure_finite("sum")?;
        Ok(self.unary(v, Op::SumAll(self.id)))
    }

    pub fn mean(&self) -> Result<Var<'g>> {
        let val = self.value();
        let v = Tensor::scalar(val.sum() / val.numel() as f64).ensure_finite("mean")?;
        Ok(self.unary(v, Op::MeanAll(self.id)))
    }

    pub fn softmax(&self, mask: &AttentionMask) -> Result<Var<'g>> {
        let v = softmax_rows(&self.value(), mask)?;
        Ok(self.unary(v, Op::Softmax(self.id)))
    }

    pub fn relu(&self) -> Result<Var<'g>> {
        let v = self.value().map(|x| x.max(0.0));
        Ok(self.unary(v, Op::Relu(self.id)))
    }

    /// Row-wise layer normalization with `1×c` gain and bias.
    pub fn layer_norm(&self, gain: &Var<'g>, bias: &Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let (r, c) = x.dims2("layer_norm")?;
        for p in [gain, bias] {
            if p.value().shape() != [1, c] {
                return Err(Error::dim("layer_norm", x.shape(), p.value().shape()));
            }
        }
        let (gv, bv) = (gain.value(), bias.value());
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::from_parts(r, c, out).ensure_finite("layer_norm")?;
        let rg = self.graph.needs(&[self.id, gain.id, bias.id]);
        Ok(self.graph.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat: Tensor::from_parts(r, c, xhat),
                inv_std,
            },
            rg,
        ))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'g>> {
        let v = self.value().slice_rows(start, end)?;
        Ok(self.unary(v, Op::SliceRows(self.id, start)))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'g>> {
        let v = self.value().slice_cols(start, end)?;
        Ok(self.unary(v, Op::SliceCols(self.id, start)))
    }

    /// Appends zero rows up to `rows` total.
    pub fn pad_rows(&self, rows: usize) -> Result<Var<'g>> {
        let val = self.value();
        let (r, c) = val.dims2("pad_rows")?;
        if rows < r {
            return Err(Error::Length(format!("cannot pad {r} rows down to {rows}")));
        }
        if rows == r {
            return Ok(*self);
        }
        let mut data = val.data().to_vec();
        data.resize(rows * c, 0.0);
        Ok(self.unary(Tensor::from_parts(rows, c, data), Op::PadRows(self.id)))
    }

    /// Element `idx` (flat) as a `1×1` value.
    pub fn select(&self, idx: usize) -> Result<Var<'g>> {
        let val = self.value();
        if idx >= val.numel() {
            return Err(Error::Length(format!(
                "index {idx} out of range for {} elements",
                val.numel()
            )));
        }
        Ok(self.unary(Tensor::scalar(val.data()[idx]), Op::Select(self.id, idx)))
    }

    pub fn concat_rows(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        if parts.len() == 1 {
            return Ok(*first);
        }
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
        let v = tensor::concat_rows(&refs)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = first.graph.needs(&ids);
        Ok(first.graph.push(v, Op::ConcatRows(ids), rg))
    }

    pub fn concat_cols(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        if parts.len() == 1 {
            return Ok(*first);
        }
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
        let v = tensor::concat_cols(&refs)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = first.graph.needs(&ids);
        Ok(first.graph.push(v, Op::ConcatCols(ids), rg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
    }

    /// Central-difference check of `f` w.r.t. every coordinate of `x0`.
    #[track_caller]
    fn check(x0: &Tensor, f: impl for<'a> Fn(&'a Graph, Var<'a>) -> Var<'a>) {
        let g = Graph::new();
        let x = g.leaf(x0.clone());
        let loss = f(&g, x);
        g.backward(loss).unwrap();
        let analytic = g.grad(x).unwrap();
        let eval = |t: Tensor| {
            let g = Graph::new();
            let x = g.constant(t);
            let v = f(&g, x).value().item();
            v
        };
        let eps = 1e-6;
        for i in 0..x0.numel() {
            let mut p = x0.clone();
            p.data_mut()[i] += eps;
            let mut m = x0.clone();
            m.data_mut()[i] -= eps;
            let num = (eval(p) - eval(m)) / (2.0 * eps);
            let e = rel_err(analytic.data()[i], num);
            assert!(e < 1e-5, "coord {i}: analytic {} numeric {num} rel {e}", analytic.data()[i]);
        }
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let loss = x.sum().unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), Tensor::ones(&[2, 2]));
    }

    #[test]
    fn grad_of_square() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let loss = x.mul(&x).unwrap().sum().unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let loss = x.mul(&x).unwrap().sum().unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 12.0);
    }

    #[test]
    fn backward_errors() {
        let g = Graph::new();
        let empty = Graph::new();
        let x = g.leaf(Tensor::ones(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let dangling = Var { graph: &empty, id: 0 };
        assert!(matches!(empty.backward(dangling), Err(Error::EmptyTape)));
    }

    #[test]
    fn two_layer_network_matches_finite_differences() {
        let w1 = rand(&[4, 5], 1);
        let w2 = rand(&[5, 3], 2);
        let b1 = rand(&[1, 5], 3);
        let input = rand(&[6, 4], 4);
        // gradient w.r.t. the first weight matrix
        check(&w1, |g, w| {
            let x = g.constant(input.clone());
            let h = x.matmul(&w).unwrap().add(&g.constant(b1.clone())).unwrap();
            let h = h.mul(&h).unwrap();
            h.matmul(&g.constant(w2.clone())).unwrap().mean().unwrap()
        });
        // and w.r.t. the input through both layers
        check(&input, |g, x| {
            let h = x.matmul(&g.constant(w1.clone())).unwrap();
            let h = h.add(&g.constant(b1.clone())).unwrap();
            let o = h.mul(&h).unwrap().matmul(&g.constant(w2.clone())).unwrap();
            o.mul(&o).unwrap().sum().unwrap()
        });
    }

    #[test]
    fn broadcast_row_grad_is_column_sums() {
        let a0 = rand(&[3, 2], 5);
        let b0 = rand(&[1, 2], 6);
        let w = rand(&[3, 2], 7);
        let g = Graph::new();
        let b = g.leaf(b0.clone());
        let loss = g
            .constant(a0.clone())
            .add(&b)
            .unwrap()
            .mul(&g.constant(w.clone()))
            .unwrap()
            .sum()
            .unwrap();
        g.backward(loss).unwrap();
        let got = g.grad(b).unwrap();
        for c in 0..2 {
            let col: f64 = (0..3).map(|r| w.get(r, c)).sum();
            assert!((got.get(0, c) - col).abs() < 1e-12);
        }
        check(&b0, |g, b| {
            g.constant(a0.clone())
                .add(&b)
                .unwrap()
                .mul(&g.constant(w.clone()))
                .unwrap()
                .sum()
                .unwrap()
        });
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let x0 = rand(&[4, 6], 10);
        let w = rand(&[4, 6], 11);
        // Linear probe with weights in [0.5, 1.5]: keeps every coordinate's
        // gradient well above the round-off floor of the central difference.
        fn proj<'a>(g: &'a Graph, v: Var<'a>, seed: u64) -> Var<'a> {
            let r = g.constant(rand(&v.shape(), seed).map(|w| 1.0 + 0.5 * w));
            v.mul(&r).unwrap().sum().unwrap()
        }
        check(&x0, |g, x| proj(g, x.transpose().unwrap(), 20));
        check(&x0, |g, x| proj(g, x.matmul_nt(&g.constant(w.clone())).unwrap(), 21));
        check(&x0, |g, x| proj(g, x.mean_rows().unwrap(), 22));
        check(&x0, |g, x| proj(g, x.softmax(&AttentionMask::None).unwrap(), 23));
        check(&x0, |g, x| proj(g, x.softmax(&AttentionMask::Causal).unwrap(), 24));
        check(&x0, |g, x| proj(g, x.relu().unwrap(), 25));
        check(&x0, |g, x| proj(g, x.slice_rows(1, 3).unwrap(), 26));
        check(&x0, |g, x| proj(g, x.slice_cols(2, 5).unwrap(), 27));
        check(&x0, |g, x| proj(g, x.pad_rows(7).unwrap(), 28));
        check(&x0, |g, x| proj(g, x.scale(-1.7).unwrap(), 29));
        check(&x0, |g, x| proj(g, x.sub(&g.constant(w.clone())).unwrap(), 30));
        check(&x0, |g, x| {
            let a = x.slice_rows(0, 2).unwrap();
            let b = x.slice_rows(2, 4).unwrap();
            proj(g, Var::concat_rows(&[b, a]).unwrap(), 31)
        });
        check(&x0, |g, x| {
            let a = x.slice_cols(0, 2).unwrap();
            let b = x.slice_cols(2, 6).unwrap();
            proj(g, Var::concat_cols(&[b, a, b]).unwrap(), 32)
        });
        check(&x0, |g, x| {
            let s = x.select(5).unwrap();
            proj(g, g.constant(w.clone()).scale_by(&s).unwrap(), 33)
        });
        check(&x0, |g, x| {
            let gain = g.constant(rand(&[1, 6], 40));
            let bias = g.constant(rand(&[1, 6], 41));
            proj(g, x.layer_norm(&gain, &bias).unwrap(), 34)
        });
        let gain0 = rand(&[1, 6], 42);
        check(&gain0, |g, gain| {
            let bias = g.constant(rand(&[1, 6], 43));
            proj(g, g.constant(x0.clone()).layer_norm(&gain, &bias).unwrap(), 35)
        });
        check(&gain0, |g, bias| {
            let gain = g.constant(rand(&[1, 6], 44));
            proj(g, g.constant(x0.clone()).layer_norm(&gain, &bias).unwrap(), 36)
        });
        let s0 = Tensor::scalar(0.3);
        check(&s0, |g, s| proj(g, g.constant(x0.clone()).add(&s).unwrap(), 37));
    }

    #[test]
    fn shared_param_gets_one_accumulated_grad() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0));
        let g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a.id(), b.id());
        let loss = a.mul(&b).unwrap().sum().unwrap();
        g.backward(loss).unwrap();
        g.accumulate_into(&mut store);
        assert_eq!(store.get(id).grad.item(), 4.0);
    }
}
