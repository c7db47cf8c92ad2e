//! Reverse-mode differentiation over row-batched dense matrices.
//!
//! Every value on the tape is an `Array2<f64>` whose rows are independent
//! samples. Operations are recorded in evaluation order; [`Tape::backward`]
//! walks them in reverse and accumulates vector-Jacobian products.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifier of a trainable parameter, assigned in registration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Probabilities are clipped into `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    /// `x · wᵀ`
    MatMulT(Var, Var),
    /// `x + b` with `b` a single row broadcast over the batch.
    AddRow(Var, Var),
    Tanh(Var),
    SoftmaxRows(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Column-wise `x * scale + shift`; only the scale matters backwards.
    AffineCols(Var, Vec<f64>),
    SliceCols(Var, usize, usize),
    ConcatCols(Var, Var),
    /// Per-row `n×n` matrix (flattened row-major) times per-row vector.
    BatchMatVec(Var, Var, usize),
    SumSquares(Var),
    Mean(Var),
    /// Mean binary cross-entropy of a probability column against labels.
    Bce(Var, Array2<f64>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Parameter gradients produced by a backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<ParamId, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Array2<f64>)> {
        self.map.iter()
    }
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Number of parameters registered so far.
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, value: Array2<f64>) -> (Var, ParamId) {
        let id = ParamId(self.params.len());
        let v = self.push(value, Op::Param);
        self.params.push(v);
        (v, id)
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let value = self.value(x).dot(&self.value(w).t());
        self.push(value, Op::MatMulT(x, w))
    }

    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(b).nrows(), 1);
        let value = self.value(x) + &self.value(b).row(0);
        self.push(value, Op::AddRow(x, b))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let p = super::net::softmax(&row.to_vec());
            row.assign(&ndarray::ArrayView1::from(&p[..]));
        }
        self.push(value, Op::SoftmaxRows(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x) * k;
        self.push(value, Op::Scale(x, k))
    }

    pub fn affine_cols(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Var {
        let mut value = self.value(x).clone();
        for (j, mut col) in value.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|u| u * scale[j] + shift[j]);
        }
        self.push(value, Op::AffineCols(x, scale.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(x, start, end))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("row counts agree");
        self.push(value, Op::ConcatCols(a, b))
    }

    pub fn batch_matvec(&mut self, m: Var, v: Var, n: usize) -> Var {
        let (mv, vv) = (self.value(m), self.value(v));
        debug_assert_eq!(mv.ncols(), n * n);
        debug_assert_eq!(vv.ncols(), n);
        let mut out = Array2::zeros((vv.nrows(), n));
        Zip::from(out.rows_mut())
            .and(mv.rows())
            .and(vv.rows())
            .for_each(|mut o, mrow, vrow| {
                for r in 0..n {
                    let mut acc = 0.0;
                    for c in 0..n {
                        acc += mrow[r * n + c] * vrow[c];
                    }
                    o[r] = acc;
                }
            });
        self.push(out, Op::BatchMatVec(m, v, n))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().map(|u| u * u).sum::<f64>();
        self.push(Array2::from_elem((1, 1), total), Op::SumSquares(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean().unwrap_or(0.0);
        self.push(Array2::from_elem((1, 1), m), Op::Mean(x))
    }

    /// Mean binary cross-entropy; `p` and `labels` are single columns.
    pub fn bce(&mut self, p: Var, labels: Array2<f64>) -> Var {
        let pv = self.value(p);
        let n = pv.len().max(1) as f64;
        let total: f64 = pv
            .iter()
            .zip(labels.iter())
            .map(|(&p, &y)| bce_term(p, y))
            .sum();
        self.push(Array2::from_elem((1, 1), total / n), Op::Bce(p, labels))
    }

    /// Reverse pass from `output`, seeded with `seed` (same shape as the
    /// output). Every registered parameter receives a gradient, zero when it
    /// does not influence the output. The tape cannot be replayed afterwards.
    pub fn backward(&mut self, output: Var, seed: &Array2<f64>) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let out_shape = self.value(output).dim();
        if seed.dim() != out_shape {
            return Err(Error::dim("backward seed", out_shape.0 * out_shape.1, seed.len()));
        }

        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(seed.clone());

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    grads[i] = Some(g);
                }
                Op::MatMulT(x, w) => {
                    let gx = g.dot(self.value(*w));
                    let gw = g.t().dot(self.value(*x));
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                }
                Op::AddRow(x, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *x, g);
                }
                Op::Tanh(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(&node.value)
                        .for_each(|gx, &y| *gx *= 1.0 - y * y);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(x) => {
                    let mut gx = g;
                    for (mut grow, yrow) in gx.rows_mut().into_iter().zip(node.value.rows()) {
                        let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|gv, &y| *gv = y * (*gv - dot));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(x, k) => accumulate(&mut grads, *x, g * *k),
                Op::AffineCols(x, scale) => {
                    let mut gx = g;
                    for (j, mut col) in gx.columns_mut().into_iter().enumerate() {
                        col *= scale[j];
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceCols(x, start, end) => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    gx.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(a, b) => {
                    let split = self.value(*a).ncols();
                    accumulate(&mut grads, *a, g.slice(s![.., ..split]).to_owned());
                    accumulate(&mut grads, *b, g.slice(s![.., split..]).to_owned());
                }
                Op::BatchMatVec(m, v, n) => {
                    let n = *n;
                    let (mv, vv) = (self.value(*m), self.value(*v));
                    let mut gm = Array2::zeros(mv.dim());
                    let mut gv = Array2::zeros(vv.dim());
                    for row in 0..g.nrows() {
                        for r in 0..n {
                            let gr = g[[row, r]];
                            for c in 0..n {
                                gm[[row, r * n + c]] = gr * vv[[row, c]];
                                gv[[row, c]] += gr * mv[[row, r * n + c]];
                            }
                        }
                    }
                    accumulate(&mut grads, *m, gm);
                    accumulate(&mut grads, *v, gv);
                }
                Op::SumSquares(x) => {
                    let k = 2.0 * g[[0, 0]];
                    accumulate(&mut grads, *x, self.value(*x) * k);
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let k = g[[0, 0]] / xv.len().max(1) as f64;
                    accumulate(&mut grads, *x, Array2::from_elem(xv.dim(), k));
                }
                Op::Bce(p, labels) => {
                    let pv = self.value(*p);
                    let k = g[[0, 0]] / pv.len().max(1) as f64;
                    let mut gp = Array2::zeros(pv.dim());
                    Zip::from(&mut gp)
                        .and(pv)
                        .and(labels)
                        .for_each(|gp, &p, &y| {
                            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                            *gp = k * ((1.0 - y) / (1.0 - p) - y / p);
                        });
                    accumulate(&mut grads, *p, gp);
                }
            }
        }

        let mut map = BTreeMap::new();
        for (k, var) in self.params.iter().enumerate() {
            let g = grads[var.0]
                .take()
                .unwrap_or_else(|| Array2::zeros(self.nodes[var.0].value.dim()));
            map.insert(ParamId(k), g);
        }
        // Intermediates are no longer needed.
        self.nodes.clear();
        Ok(Gradients { map })
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn linear_layer_weight_gradient_is_input() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[2.0, -3.0, 0.5]]);
        let (w, wid) = tape.param(Array2::eye(3));
        let y = tape.matmul_t(x, w);
        let loss = tape.mean(y);
        let loss = tape.scale(loss, 3.0); // sum of outputs
        let grads = tape.backward(loss, &array![[1.0]]).unwrap();
        let gw = grads.get(wid).unwrap();
        for r in 0..3 {
            assert_eq!(gw.row(r).to_vec(), vec![2.0, -3.0, 0.5]);
        }
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[0.3, -0.7]]);
        let (w, wid) = tape.param(array![[0.1, 0.2], [0.3, -0.4]]);
        let (b, bid) = tape.param(array![[0.5, -0.5]]);
        let h = tape.matmul_t(x, w);
        let h = tape.add_row(h, b);
        let y = tape.tanh(h);
        let grads = tape.backward(y, &Array2::zeros((1, 2))).unwrap();
        assert!(grads.get(wid).unwrap().iter().all(|&g| g == 0.0));
        assert!(grads.get(bid).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new();
        let (w, _) = tape.param(array![[1.0]]);
        let y = tape.sum_squares(w);
        tape.backward(y, &array![[1.0]]).unwrap();
        assert!(matches!(tape.backward(y, &array![[1.0]]), Err(Error::TapeConsumed)));
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let (a, _) = tape.param(array![[1.0, 2.0]]);
        let (_, unused) = tape.param(array![[5.0]]);
        let y = tape.sum_squares(a);
        let grads = tape.backward(y, &array![[1.0]]).unwrap();
        assert_eq!(grads.len(), 2);
        assert_eq!(grads.get(unused).unwrap(), &array![[0.0]]);
    }

    #[test]
    fn batch_matvec_matches_per_row_product() {
        let mut tape = Tape::new();
        let m = tape.constant(array![[1.0, 2.0, 3.0, 4.0], [0.0, 1.0, -1.0, 0.0]]);
        let v = tape.constant(array![[1.0, 1.0], [2.0, 3.0]]);
        let y = tape.batch_matvec(m, v, 2);
        assert_eq!(tape.value(y), &array![[3.0, 7.0], [3.0, -2.0]]);
    }

    #[test]
    fn bce_value_at_half_is_ln2() {
        let mut tape = Tape::new();
        let p = tape.constant(array![[0.5], [0.5]]);
        let l = tape.bce(p, array![[1.0], [0.0]]);
        assert!((tape.value(l)[[0, 0]] - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
