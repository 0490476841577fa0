//! Per-primitive reverse-mode tape.
//!
//! Forward code records each primitive on a [`Tape`] together with whatever
//! it needs for its adjoint. [`Tape::backward`] replays the records in
//! exact reverse order. Operations defined outside this module (pooling,
//! patch attention, losses) plug in through the [`Backward`] trait.

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, LnStats};
use crate::numerics::{Real, Tensor};

/// Index of a learnable tensor in a parameter store.
pub type ParamId = usize;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything an adjoint sees: input values, the output value, the upstream
/// gradient, and which inputs actually need a gradient.
pub struct BackwardCtx<'a, T: Real> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

/// Adjoint of a recorded operation. Returns one entry per input, `None` for
/// inputs that do not need a gradient.
pub trait Backward<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, cx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    param: Option<ParamId>,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor<T>, param: Option<ParamId>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            param,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, None, false)
    }

    /// A leaf that receives a gradient but is not a parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, None, true)
    }

    /// Records a learnable tensor. The tape keeps its own copy.
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        self.leaf(value.clone(), Some(id), true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation computed outside the tape.
    pub fn push(&mut self, inputs: &[Var], output: Tensor<T>, op: impl Backward<T> + 'static) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: output,
            inputs: inputs.to_vec(),
            op: Some(Box::new(op)),
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before a forward pass".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let seed = Tensor::full(self.nodes[loss.0].value.shape(), T::ONE);
        self.backward_with(loss, seed)
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if out.0 >= self.nodes.len() {
            return Err(Error::State("backward called before a forward pass".into()));
        }
        if seed.shape() != self.nodes[out.0].value.shape() {
            return Err(Error::shape(
                "backward seed",
                seed.shape(),
                self.nodes[out.0].value.shape(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let cx = BackwardCtx {
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                grad: &g,
                needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
            };
            let input_grads = op.backward(&cx)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for (v, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if ig.shape() != self.nodes[v.0].value.shape() {
                    return Err(Error::shape(op.name(), ig.shape(), self.nodes[v.0].value.shape()));
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&ig)?,
                    slot => *slot = Some(ig),
                }
            }
        }
        let params = self.nodes[..=out.0]
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Result of a reverse pass: gradients of every leaf that required one.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf recorded by [`Tape::input`] or
    /// [`Tape::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter, summed over every time it was recorded.
    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for &(p, i) in &self.params {
            if p != id {
                continue;
            }
            if let Some(g) = &self.grads[i] {
                match &mut acc {
                    Some(a) => a.add_assign(g).expect("param grads share a shape"),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.iter().map(|&(p, _)| p)
    }
}

// ---------------------------------------------------------------------------
// Primitive operations

struct MatMulOp;

impl<T: Real> Backward<T> for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, cx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (cx.inputs[0], cx.inputs[1]);
        let da = if cx.needs[0] {
            Some(kernels::matmul_nt(cx.grad, b)?)
        } else {
            None
        };
        let db = if cx.needs[1] {
            Some(kernels::matmul_tn(a, cx.grad)?)
        } else {
            None
        };
        Ok(vec![da, db])
    }
}

struct AddOp;

impl<T: Real> Backward<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, cx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(cx.needs.iter().map(|&n| n.then(|| cx.grad.clone())).collect())
    }
}

struct AddRowOp;

impl<T: Real> Backward<T> for AddRowOp {
    fn name(&self) -> &'static str {
        "add_row"
    }
    fn backward(&self, cx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let da = cx.needs[0].then(|| cx.grad.clone());
        let db = cx.needs[1].then(|| column_sums(cx.grad, cx.inputs[1].shape()));
        Ok(vec![da, db])
    }
}

fn column_sums<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let c = g.cols();
    let mut out = vec![T::ZERO; c];
    for row in g.data().chunks(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::wrap(shape.to_vec(), out)
}

struct MulOp;

impl<T: Real> Backward<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, cx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (cx.inputs[0], cx.inputs[1]);
        let da = if cx.needs[0] {
            Some(cx.grad.zip_map(b, "mul", |g, y| g * y)?)
        } else {
            None
        };
        let db = if cx.needs[1] {
            Some(cx.grad.zip_map(a, "mul", |g, x| g * x)?)
        } else {
            None
        };
        Ok(vec![da, db])
    }
}

struct MulRowOp;

impl<T: Real> Backward<T> for MulRowOp {
    fn name(&self) -> &'static str {
        "mul_row"
    }
    fn backward(&self, cx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, r) = (cx.inputs[0], cx.inputs[1]);
        let c = a.cols();
        let da = cx.needs[0].then(|| {
            let mut d = cx.grad.clone();
            for row in d.data_mut().chunks_mut(c) {
                for (x, &s) in row.iter_mut().zip(r.data()) {
                    *x *= s;
                }
            }
            d
        });
        let dr = cx.needs[1].then(|| {
            let mut out = vec![T::ZERO; c];
            for (grow, arow) in cx.grad.data().chunks(c).zip(a.data().chunks(c)) {
                for j in 0..c {
                    out[j] += grow[j] * arow[j];
                }
            }
            Tensor::wrap(r.shape().to_vec(), out)
        });
        Ok(vec![da, dr])
    }
}

struct ScaleOp<T>(T);

impl<T: Real> Backward<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, cx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let s = self.0;
        Ok(vec![Some(cx.grad.map(|g| g * s))])
    }
}

struct GeluOp;

impl<T: Real> Backward<T> for GeluOp {
    fn name(&self) -> &'static str {
        "gelu"
    }
    fn backward(&self, cx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let dx = cx
            .grad
            .zip_map(cx.inputs[0], "gelu", |g, x| g * kernels::gelu_grad_scalar(x))?;
        Ok(vec![Some(dx)])
    }
}

struct LayerNormOp<T> {
    stats: LnStats<T>,
}

impl<T: Real> Backward<T> for LayerNormOp<T> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn backward(&self, cx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (dx, dg, db) = kernels::layer_norm_bwd(cx.inputs[0], cx.inputs[1], &self.stats, cx.grad);
        Ok(vec![
            cx.needs[0].then_some(dx),
            cx.needs[1].then_some(dg),
            cx.needs[2].then_some(db),
        ])
    }
}

struct SoftmaxOp;

impl<T: Real> Backward<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax_rows"
    }
    fn backward(&self, cx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let y = cx.output;
        let c = y.cols();
        let mut dx = cx.grad.clone();
        for (drow, yrow) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
            let dot: T = drow.iter().zip(yrow).map(|(&g, &p)| g * p).sum();
            for (g, &p) in drow.iter_mut().zip(yrow) {
                *g = p * (*g - dot);
            }
        }
        Ok(vec![Some(dx)])
    }
}

struct SumOp;

impl<T: Real> Backward<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, cx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let g = cx.grad.data()[0];
        Ok(vec![Some(Tensor::full(cx.inputs[0].shape(), g))])
    }
}

/// Row gather where `None` produces a zero row.
struct GatherRowsOp {
    index: Vec<Option<usize>>,
}

impl<T: Real> Backward<T> for GatherRowsOp {
    fn name(&self) -> &'static str {
        "gather_rows"
    }
    fn backward(&self, cx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let mut d = Tensor::zeros(cx.inputs[0].shape());
        for (dst_row, idx) in self.index.iter().enumerate() {
            if let Some(i) = *idx {
                let g = cx.grad.row(dst_row);
                for (o, &v) in d.row_mut(i).iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
        Ok(vec![Some(d)])
    }
}

struct MaskRowsOp {
    keep: Vec<bool>,
}

impl<T: Real> Backward<T> for MaskRowsOp {
    fn name(&self) -> &'static str {
        "mask_rows"
    }
    fn backward(&self, cx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let mut d = cx.grad.clone();
        for (i, &k) in self.keep.iter().enumerate() {
            if !k {
                d.row_mut(i).iter_mut().for_each(|x| *x = T::ZERO);
            }
        }
        Ok(vec![Some(d)])
    }
}

struct SliceRowsOp {
    start: usize,
}

impl<T: Real> Backward<T> for SliceRowsOp {
    fn name(&self) -> &'static str {
        "slice_rows"
    }
    fn backward(&self, cx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let src = cx.inputs[0];
        let c = src.cols();
        let mut d = Tensor::zeros(src.shape());
        let off = self.start * c;
        d.data_mut()[off..off + cx.grad.len()].copy_from_slice(cx.grad.data());
        Ok(vec![Some(d)])
    }
}

struct ConcatRowsOp;

impl<T: Real> Backward<T> for ConcatRowsOp {
    fn name(&self) -> &'static str {
        "concat_rows"
    }
    fn backward(&self, cx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let mut off = 0;
        let mut out = Vec::with_capacity(cx.inputs.len());
        for (x, &need) in cx.inputs.iter().zip(&cx.needs) {
            let n = x.len();
            out.push(need.then(|| {
                Tensor::wrap(x.shape().to_vec(), cx.grad.data()[off..off + n].to_vec())
            }));
            off += n;
        }
        Ok(out)
    }
}

impl<T: Real> Tape<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(&[a, b], out, MatMulOp))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(&[a, b], out, AddOp))
    }

    /// `a + 1·bias` with `bias` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let c = x.cols();
        if b.len() != c {
            return Err(Error::shape("add_row", x.shape(), b.shape()));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &v) in row.iter_mut().zip(b.data()) {
                *o += v;
            }
        }
        Ok(self.push(&[a, bias], out, AddRowOp))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(&[a, b], out, MulOp))
    }

    /// Elementwise product with `row` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        let c = x.cols();
        if r.len() != c {
            return Err(Error::shape("mul_row", x.shape(), r.shape()));
        }
        let mut out = x.clone();
        for orow in out.data_mut().chunks_mut(c) {
            for (o, &s) in orow.iter_mut().zip(r.data()) {
                *o *= s;
            }
        }
        Ok(self.push(&[a, row], out, MulRowOp))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(&[a], out, ScaleOp(s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = kernels::gelu(self.value(a));
        self.push(&[a], out, GeluOp)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, stats) = kernels::layer_norm_fwd(
            self.value(x),
            self.value(gain),
            self.value(bias),
            T::from_f64(kernels::LN_EPS),
        )?;
        Ok(self.push(&[x, gain, bias], out, LayerNormOp { stats }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(x))?;
        Ok(self.push(&[x], out, SoftmaxOp))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(&[x], out, SumOp)
    }

    /// Builds a tensor whose row `r` is row `index[r]` of `x`, or zeros for
    /// `None`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let src = self.value(x);
        let c = src.cols();
        let mut out = vec![T::ZERO; index.len() * c];
        for (r, idx) in index.iter().enumerate() {
            if let Some(i) = *idx {
                if i >= src.rows() {
                    return Err(Error::shape("gather_rows", src.shape(), &[i]));
                }
                out[r * c..(r + 1) * c].copy_from_slice(src.row(i));
            }
        }
        let out = Tensor::wrap(vec![index.len(), c], out);
        Ok(self.push(&[x], out, GatherRowsOp { index }))
    }

    /// Zeroes every row whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let mut out = self.value(x).clone();
        if keep.len() != out.rows() {
            return Err(Error::shape("mask_rows", out.shape(), &[keep.len()]));
        }
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                out.row_mut(i).iter_mut().for_each(|v| *v = T::ZERO);
            }
        }
        Ok(self.push(&[x], out, MaskRowsOp { keep: keep.to_vec() }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let src = self.value(x);
        if start > end || end > src.rows() {
            return Err(Error::shape("slice_rows", src.shape(), &[start, end]));
        }
        let c = src.cols();
        let out = Tensor::wrap(vec![end - start, c], src.data()[start * c..end * c].to_vec());
        Ok(self.push(&[x], out, SliceRowsOp { start }))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = self.value(xs[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in xs {
            let t = self.value(v);
            if t.cols() != c {
                return Err(Error::shape("concat_rows", &[rows, c], t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::wrap(vec![rows, c], data);
        Ok(self.push(xs, out, ConcatRowsOp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_before_forward_is_state_error() {
        let tape = Tape::<f64>::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::State(_))));
    }

    #[test]
    fn linear_map_gradient_is_outer_product() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(0, &Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap());
        let x = tape.constant(Tensor::from_rows(&[&[0.5], &[-2.0]]).unwrap());
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap().param(0).unwrap();
        for i in 0..3 {
            assert_eq!(g.row(i), &[0.5, -2.0]);
        }
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_rows(&[&[0.3, -1.2, 2.0], &[4.0, 0.0, 1.0]]).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn param_recorded_twice_accumulates() {
        let mut tape = Tape::<f64>::new();
        let w = Tensor::from_rows(&[&[2.0]]).unwrap();
        let a = tape.param(3, &w);
        let b = tape.param(3, &w);
        let p = tape.mul(a, b).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(3).unwrap().data(), &[4.0]);
    }
}
