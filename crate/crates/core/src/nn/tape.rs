//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Var::backward`] walks the record in reverse and returns gradients for
//! every parameter leaf that was bound through [`Tape::param`]. Tapes are
//! cheap and single-threaded; parallel training builds one tape per example
//! and sums the resulting [`Gradients`].

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use super::params::{ParamId, ParamStore};

pub type Matrix = Array2<f64>;

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    LeakyRelu(usize, f64),
    Elu(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Rc<Vec<usize>>),
    ScatterAddRows(usize, Rc<Vec<usize>>),
    SegmentSoftmax(usize, Rc<Vec<usize>>),
    SoftmaxRows(usize),
    Sum(usize),
    MeanRows(usize),
    SumCols(usize),
    LayerNorm(usize, Matrix),
    RowNll(usize, Rc<Vec<usize>>, Matrix),
    BceWithLogits(usize, Rc<Matrix>),
    StraightThroughStep(usize),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}[{}x{}]", self.id, r, c)
    }
}

/// Gradients keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.map {
            match self.map.get_mut(id) {
                Some(acc) => *acc += g,
                None => {
                    self.map.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Matrix, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a constant.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Matrix::from_elem((1, 1), value))
    }

    /// Binds a parameter. Repeated binds on one tape share a node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let var = self.push(store.get(id).clone(), Op::Param);
        self.bound.borrow_mut().insert(id, var.id);
        var
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Matrix> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn backward_from(&self, root: usize) -> Gradients {
        let nodes = self.nodes.borrow();
        let (r, c) = nodes[root].value.dim();
        let mut grads: Vec<Option<Matrix>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Matrix::ones((r, c)));

        fn acc(grads: &mut [Option<Matrix>], id: usize, g: Matrix) {
            match &mut grads[id] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &nodes[*b].value;
                    let gb = &g * &nodes[*a].value;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *b, gb);
                }
                Op::MulCol(a, b) => {
                    let bv = &nodes[*b].value;
                    let ga = &g * bv;
                    let gb = (&g * &nodes[*a].value)
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulRow(a, b) => {
                    let bv = &nodes[*b].value;
                    let ga = &g * bv;
                    let gb = (&g * &nodes[*a].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g.mapv(|x| x * f)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&nodes[*b].value.t());
                    let gb = nodes[*a].value.t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::LeakyRelu(a, slope) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&nodes[*a].value)
                        .for_each(|g, &x| {
                            if x <= 0.0 {
                                *g *= slope
                            }
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::Elu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&nodes[*a].value)
                        .and(val)
                        .for_each(|g, &x, &y| {
                            if x <= 0.0 {
                                *g *= y + 1.0
                            }
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&nodes[*a].value)
                        .for_each(|g, &x| {
                            if x <= 0.0 {
                                *g = 0.0
                            }
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val).for_each(|g, &y| *g *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val).for_each(|g, &y| *g *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * val),
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p].value.ncols();
                        acc(&mut grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = nodes[p].value.nrows();
                        acc(&mut grads, p, g.slice(s![offset..offset + h, ..]).to_owned());
                        offset += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = &nodes[*a].value;
                    let mut ga = Matrix::zeros(src.dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let src = &nodes[*a].value;
                    let mut ga = Matrix::zeros(src.dim());
                    for (row, &k) in idx.iter().enumerate() {
                        let mut target = ga.row_mut(k);
                        target += &g.row(row);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ScatterAddRows(a, idx) => {
                    let src = &nodes[*a].value;
                    let mut ga = Matrix::zeros(src.dim());
                    for (row, &k) in idx.iter().enumerate() {
                        ga.row_mut(row).assign(&g.row(k));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SegmentSoftmax(a, seg) => {
                    let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; n_seg];
                    for (e, &sg) in seg.iter().enumerate() {
                        dot[sg] += g[[e, 0]] * val[[e, 0]];
                    }
                    let mut ga = Matrix::zeros(val.dim());
                    for (e, &sg) in seg.iter().enumerate() {
                        ga[[e, 0]] = val[[e, 0]] * (g[[e, 0]] - dot[sg]);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = Matrix::zeros(val.dim());
                    for ((y, gr), mut out) in val
                        .rows()
                        .into_iter()
                        .zip(g.rows())
                        .zip(ga.rows_mut())
                    {
                        let d: f64 = y.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut out)
                            .and(&y)
                            .and(&gr)
                            .for_each(|o, &y, &g| *o = y * (g - d));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let dim = nodes[*a].value.dim();
                    acc(&mut grads, *a, Matrix::from_elem(dim, g[[0, 0]]));
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = nodes[*a].value.dim();
                    let scaled = g.mapv(|x| x / rows as f64);
                    let ga = scaled.broadcast((rows, cols)).unwrap().to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let dim = nodes[*a].value.dim();
                    let ga = g.broadcast(dim).unwrap().to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm(a, inv_std) => {
                    let cols = val.ncols() as f64;
                    let mut ga = Matrix::zeros(val.dim());
                    for (r, mut out) in ga.rows_mut().into_iter().enumerate() {
                        let gr = g.row(r);
                        let xh = val.row(r);
                        let mean_g = gr.sum() / cols;
                        let mean_gx = gr.dot(&xh) / cols;
                        let is = inv_std[[r, 0]];
                        Zip::from(&mut out)
                            .and(&gr)
                            .and(&xh)
                            .for_each(|o, &g, &x| *o = is * (g - mean_g - x * mean_gx));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowNll(a, targets, probs) => {
                    let mut ga = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        ga[[r, t]] -= 1.0;
                        let gr = g[[r, 0]];
                        ga.row_mut(r).mapv_inplace(|x| x * gr);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::BceWithLogits(a, targets) => {
                    let mut ga = nodes[*a].value.mapv(sigmoid);
                    Zip::from(&mut ga)
                        .and(&**targets)
                        .and(&g)
                        .for_each(|p, &t, &g| *p = (*p - t) * g);
                    acc(&mut grads, *a, ga);
                }
                Op::StraightThroughStep(a) => acc(&mut grads, *a, g),
            }
        }

        let mut out = Gradients::default();
        for (pid, &node) in self.bound.borrow().iter() {
            if node <= root {
                if let Some(g) = grads[node].take() {
                    out.map.insert(*pid, g);
                }
            }
        }
        out
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Matrix {
        self.tape.value_of(self.id).clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.value_of(self.id).dim()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    /// The single entry of a 1x1 value.
    pub fn item(&self) -> f64 {
        let v = self.tape.value_of(self.id);
        assert_eq!(v.dim(), (1, 1), "item() on non-scalar");
        v[[0, 0]]
    }

    /// Gradients of this (scalar) value w.r.t. every bound parameter.
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.shape(), (1, 1), "backward() requires a scalar");
        self.tape.backward_from(self.id)
    }

    fn unary(&self, f: impl FnOnce(&Matrix) -> Matrix, op: Op) -> Var<'t> {
        let value = f(&self.tape.value_of(self.id));
        self.tape.push(value, op)
    }

    fn binary(&self, other: Var<'t>, f: impl FnOnce(&Matrix, &Matrix) -> Matrix, op: Op) -> Var<'t> {
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            f(&a, &b)
        };
        self.tape.push(value, op)
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        assert_eq!(self.shape(), other.shape(), "mul shape mismatch");
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// `self [R x C] + row [1 x C]` broadcast over rows.
    pub fn add_row(&self, row: Var<'t>) -> Var<'t> {
        assert_eq!(row.rows(), 1);
        assert_eq!(row.cols(), self.cols(), "add_row width mismatch");
        self.binary(row, |a, b| a + b, Op::AddRow(self.id, row.id))
    }

    /// `self [R x C] * col [R x 1]` broadcast over columns.
    pub fn mul_col(&self, col: Var<'t>) -> Var<'t> {
        assert_eq!(col.cols(), 1);
        assert_eq!(col.rows(), self.rows(), "mul_col height mismatch");
        self.binary(col, |a, b| a * b, Op::MulCol(self.id, col.id))
    }

    /// `self [R x C] * row [1 x C]` broadcast over rows.
    pub fn mul_row(&self, row: Var<'t>) -> Var<'t> {
        assert_eq!(row.rows(), 1);
        assert_eq!(row.cols(), self.cols(), "mul_row width mismatch");
        self.binary(row, |a, b| a * b, Op::MulRow(self.id, row.id))
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        self.unary(|a| a * factor, Op::Scale(self.id, factor))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(|a| a + c, Op::AddScalar(self.id))
    }

    /// `1 - self`.
    pub fn one_minus(&self) -> Var<'t> {
        self.scale(-1.0).add_scalar(1.0)
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        assert_eq!(
            self.cols(),
            other.rows(),
            "matmul inner dimension mismatch: {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        self.binary(other, |a, b| a.dot(b), Op::MatMul(self.id, other.id))
    }

    pub fn t(&self) -> Var<'t> {
        self.unary(|a| a.t().to_owned(), Op::Transpose(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        self.unary(
            |a| a.mapv(|x| if x > 0.0 { x } else { slope * x }),
            Op::LeakyRelu(self.id, slope),
        )
    }

    pub fn elu(&self) -> Var<'t> {
        self.unary(
            |a| a.mapv(|x| if x > 0.0 { x } else { x.exp_m1() }),
            Op::Elu(self.id),
        )
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|a| a.mapv(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(|a| a.mapv(sigmoid), Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(|a| a.mapv(f64::tanh), Op::Tanh(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(|a| a.mapv(f64::exp), Op::Exp(self.id))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| tape.value_of(p.id)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch")
        };
        tape.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| tape.value_of(p.id)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch")
        };
        tape.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Var<'t> {
        assert!(start <= end && end <= self.cols());
        self.unary(
            |a| a.slice(s![.., start..end]).to_owned(),
            Op::SliceCols(self.id, start),
        )
    }

    /// Row `k` of the output is row `idx[k]` of `self`.
    pub fn gather_rows(&self, idx: &[usize]) -> Var<'t> {
        let idx = Rc::new(idx.to_vec());
        let value = {
            let a = self.tape.value_of(self.id);
            let mut out = Matrix::zeros((idx.len(), a.ncols()));
            for (r, &k) in idx.iter().enumerate() {
                out.row_mut(r).assign(&a.row(k));
            }
            out
        };
        self.tape.push(value, Op::GatherRows(self.id, idx))
    }

    /// Sums row `k` of `self` into output row `idx[k]`; output has `n` rows.
    pub fn scatter_add_rows(&self, idx: &[usize], n: usize) -> Var<'t> {
        assert_eq!(idx.len(), self.rows());
        let idx = Rc::new(idx.to_vec());
        let value = {
            let a = self.tape.value_of(self.id);
            let mut out = Matrix::zeros((n, a.ncols()));
            for (r, &k) in idx.iter().enumerate() {
                let mut target = out.row_mut(k);
                target += &a.row(r);
            }
            out
        };
        self.tape.push(value, Op::ScatterAddRows(self.id, idx))
    }

    /// Softmax of a column vector `[E x 1]` within groups given by `segment[e]`.
    pub fn segment_softmax(&self, segment: &[usize]) -> Var<'t> {
        assert_eq!(self.cols(), 1);
        assert_eq!(segment.len(), self.rows());
        let seg = Rc::new(segment.to_vec());
        let value = {
            let a = self.tape.value_of(self.id);
            let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
            let mut max = vec![f64::NEG_INFINITY; n_seg];
            for (e, &sg) in seg.iter().enumerate() {
                max[sg] = max[sg].max(a[[e, 0]]);
            }
            let mut out = Matrix::zeros(a.dim());
            let mut total = vec![0.0; n_seg];
            for (e, &sg) in seg.iter().enumerate() {
                let v = (a[[e, 0]] - max[sg]).exp();
                out[[e, 0]] = v;
                total[sg] += v;
            }
            for (e, &sg) in seg.iter().enumerate() {
                out[[e, 0]] /= total[sg];
            }
            out
        };
        self.tape.push(value, Op::SegmentSoftmax(self.id, seg))
    }

    /// Row-wise softmax. Entries where `allowed` is false get weight exactly
    /// zero; a row with nothing allowed is all zeros.
    pub fn softmax_rows(&self, allowed: Option<&ndarray::Array2<bool>>) -> Var<'t> {
        let value = {
            let a = self.tape.value_of(self.id);
            let mut out = Matrix::zeros(a.dim());
            for (r, (row, mut o)) in a.rows().into_iter().zip(out.rows_mut()).enumerate() {
                let ok = |c: usize| allowed.is_none_or(|m| m[[r, c]]);
                let max = row
                    .iter()
                    .enumerate()
                    .filter(|(c, _)| ok(*c))
                    .map(|(_, &x)| x)
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for (c, &x) in row.iter().enumerate() {
                    if ok(c) {
                        let v = (x - max).exp();
                        o[c] = v;
                        total += v;
                    }
                }
                o.mapv_inplace(|v| v / total);
            }
            out
        };
        self.tape.push(value, Op::SoftmaxRows(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(|a| Matrix::from_elem((1, 1), a.sum()), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = (self.rows() * self.cols()) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Column means, `[1 x C]`.
    pub fn mean_rows(&self) -> Var<'t> {
        self.unary(
            |a| a.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0)),
            Op::MeanRows(self.id),
        )
    }

    /// Row sums, `[R x 1]`.
    pub fn sum_cols(&self) -> Var<'t> {
        self.unary(
            |a| a.sum_axis(Axis(1)).insert_axis(Axis(1)),
            Op::SumCols(self.id),
        )
    }

    /// Per-row standardization (zero mean, unit variance), no affine part.
    pub fn layer_norm(&self, eps: f64) -> Var<'t> {
        let (value, inv_std) = {
            let a = self.tape.value_of(self.id);
            let cols = a.ncols() as f64;
            let mut out = a.clone();
            let mut inv = Matrix::zeros((a.nrows(), 1));
            for (r, mut row) in out.rows_mut().into_iter().enumerate() {
                let mean = row.sum() / cols;
                let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cols;
                let is = 1.0 / (var + eps).sqrt();
                inv[[r, 0]] = is;
                row.mapv_inplace(|x| (x - mean) * is);
            }
            (out, inv)
        };
        self.tape.push(value, Op::LayerNorm(self.id, inv_std))
    }

    /// Negative log-likelihood of `targets[r]` under softmax of row `r`,
    /// returned as an `[R x 1]` column.
    pub fn row_nll(&self, targets: &[usize]) -> Var<'t> {
        assert_eq!(targets.len(), self.rows());
        let targets = Rc::new(targets.to_vec());
        let (value, probs) = {
            let a = self.tape.value_of(self.id);
            let mut probs = Matrix::zeros(a.dim());
            let mut out = Matrix::zeros((a.nrows(), 1));
            for (r, row) in a.rows().into_iter().enumerate() {
                let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let total: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                let lse = max + total.ln();
                for (c, &x) in row.iter().enumerate() {
                    probs[[r, c]] = (x - lse).exp();
                }
                out[[r, 0]] = lse - row[targets[r]];
            }
            (out, probs)
        };
        self.tape.push(value, Op::RowNll(self.id, targets, probs))
    }

    /// Elementwise binary cross-entropy of logits against targets in [0, 1].
    pub fn bce_with_logits(&self, targets: &Matrix) -> Var<'t> {
        assert_eq!(targets.dim(), self.shape(), "bce target shape mismatch");
        let targets = Rc::new(targets.clone());
        let value = {
            let a = self.tape.value_of(self.id);
            let mut out = Matrix::zeros(a.dim());
            Zip::from(&mut out)
                .and(&*a)
                .and(&*targets)
                .for_each(|o, &x, &t| *o = x.max(0.0) - x * t + (-x.abs()).exp().ln_1p());
            out
        };
        self.tape.push(value, Op::BceWithLogits(self.id, targets))
    }

    /// Forward: `1[x > tau]`. Backward: identity (straight-through).
    pub fn step_ste(&self, tau: f64) -> Var<'t> {
        self.unary(
            |a| a.mapv(|x| if x > tau { 1.0 } else { 0.0 }),
            Op::StraightThroughStep(self.id),
        )
    }
}
