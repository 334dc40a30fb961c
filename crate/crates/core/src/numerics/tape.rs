//! Reverse-mode differentiation over dense matrices.
//!
//! Values are computed eagerly as nodes are recorded, so a tape doubles as
//! the inference path: building the graph *is* the forward pass. Shape
//! errors inside the tape are programming errors and panic; callers
//! validate external inputs before recording.

use super::matrix::{
    dot, layer_norm_row, matmul, matmul_at, matmul_bt, sigmoid_scalar, softmax_in_place, Matrix,
    Real,
};
use super::param::{Grads, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Normalization used by the anchor orthogonality penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OrthoMode {
    /// `‖PPᵀ / ‖P‖_F² − I‖_F`.
    #[default]
    Frobenius,
    /// Rows normalized to unit length first; only off-diagonal terms remain.
    Cosine,
}

impl OrthoMode {
    pub fn code(self) -> u8 {
        match self {
            OrthoMode::Frobenius => 0,
            OrthoMode::Cosine => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(OrthoMode::Frobenius),
            1 => Some(OrthoMode::Cosine),
            _ => None,
        }
    }
}

enum Op<T: Real> {
    Input,
    Param(ParamId),
    Gather { param: ParamId, rows: Vec<usize> },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix<T>, inv_std: Vec<T> },
    Rows { x: Var, start: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Vec<Var>),
    Ortho { x: Var, mode: OrthoMode },
    BcePair { x: Var, label: T, prob: T, clamped: bool },
}

struct Node<T: Real> {
    value: Option<Matrix<T>>,
    op: Op<T>,
}

pub const PROB_CLAMP: f64 = 1e-7;

pub struct Tape<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::with_capacity(256) }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        Var(self.nodes.len() - 1)
    }

    /// Rows of an embedding table, in the given order.
    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Var {
        let table = self.params.value(id);
        let mut out = Matrix::zeros(rows.len(), table.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(table.row(r));
        }
        self.push(out, Op::Gather { param: id, rows: rows.to_vec() })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a * bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = matmul_bt(self.value(a), self.value(b));
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut out = self.value(a).clone();
        let r = self.value(row);
        assert_eq!((1, out.cols()), r.shape(), "add_row shape");
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Matrix::from_vec(x.rows(), x.cols(), data).unwrap();
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid_scalar);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise layer norm with a shared `1 x cols` gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let eps = T::lit(super::matrix::LAYER_NORM_EPS);
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        assert_eq!((1, xv.cols()), g.shape(), "layer_norm gain shape");
        assert_eq!((1, xv.cols()), b.shape(), "layer_norm bias shape");
        let (rows, cols) = xv.shape();
        let mut out = Matrix::zeros(rows, cols);
        let mut xhat = Matrix::zeros(rows, cols);
        let ones = vec![T::one(); cols];
        let zeros = vec![T::zero(); cols];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            layer_norm_row(xv.row(r), g.data(), b.data(), eps, out.row_mut(r));
            inv_std.push(layer_norm_row(xv.row(r), &ones, &zeros, eps, xhat.row_mut(r)));
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Rows `start..start + len` of `x`.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.rows(), "row slice out of range");
        let data = xv.data()[start * xv.cols()..(start + len) * xv.cols()].to_vec();
        let out = Matrix::from_vec(len, xv.cols(), data).unwrap();
        self.push(out, Op::Rows { x, start })
    }

    /// Rows of `x` picked by index, in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(rows.len(), xv.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        self.push(out, Op::SelectRows { x, rows: rows.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Matrix::from_vec(rows, cols, data).unwrap();
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols height");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Column means, as a `1 x cols` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::from_usize(xv.rows()).unwrap();
        let mut out = Matrix::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.data_mut().iter_mut().for_each(|o| *o /= n);
        self.push(out, Op::MeanRows(x))
    }

    /// Sum of same-shaped terms.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            out.add_assign(self.value(p));
        }
        self.push(out, Op::Sum(parts.to_vec()))
    }

    /// Anchor orthogonality penalty of a `K x d` matrix.
    pub fn ortho(&mut self, x: Var, mode: OrthoMode) -> Result<Var> {
        let value = ortho_value(self.value(x), mode)?;
        Ok(self.push(Matrix::scalar(value), Op::Ortho { x, mode }))
    }

    /// Binary cross-entropy of a `1 x 2` logit pair whose positive-class
    /// probability is `softmax(logits)[1]`, clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_pair(&mut self, x: Var, label: T) -> Var {
        let l = self.value(x);
        assert_eq!(l.shape(), (1, 2), "bce_pair expects a logit pair");
        let prob = pair_probability(l.data()[0], l.data()[1]);
        let lo = T::lit(PROB_CLAMP);
        let hi = T::one() - lo;
        let clamped = prob < lo || prob > hi;
        let pc = prob.max(lo).min(hi);
        let loss = -(label * pc.ln() + (T::one() - label) * (T::one() - pc).ln());
        self.push(Matrix::scalar(loss), Op::BcePair { x, label, prob, clamped })
    }

    /// Gradients of the scalar `loss` with respect to every parameter it
    /// touches.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::scalar(T::one()));
        let mut out = Grads::new(self.params.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(id) => out.add(*id, &g),
                Op::Gather { param, rows } => {
                    let shape = self.params.value(*param).shape();
                    out.scatter_rows(*param, shape, rows, &g);
                }
                Op::MatMul(a, b) => {
                    let da = matmul_bt(&g, self.value(*b));
                    let db = matmul_at(self.value(*a), &g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulBt(a, b) => {
                    let da = matmul(&g, self.value(*b));
                    let db = matmul_at(&g, self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &v) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(&mut grads, *row, dr);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = hadamard(&g, self.value(*b));
                    let db = hadamard(&g, self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|x| x * s));
                }
                Op::Sigmoid(a) => {
                    let y = self.value(Var(i));
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                        .collect();
                    acc(&mut grads, *a, Matrix::from_vec(g.rows(), g.cols(), data).unwrap());
                }
                Op::Softmax(a) => {
                    let y = self.value(Var(i));
                    let mut dx = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let s = dot(g.row(r), y.row(r));
                        for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *d = yv * (gv - s);
                        }
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gain_v = self.value(*gain);
                    let (rows, cols) = g.shape();
                    let n = T::from_usize(cols).unwrap();
                    let mut dgain = Matrix::zeros(1, cols);
                    let mut dbias = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..cols {
                            dgain.data_mut()[c] += gr[c] * xr[c];
                            dbias.data_mut()[c] += gr[c];
                            let dxh = gr[c] * gain_v.data()[c];
                            mean_d += dxh;
                            mean_dx += dxh * xr[c];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for c in 0..cols {
                            let dxh = gr[c] * gain_v.data()[c];
                            dx.row_mut(r)[c] = inv_std[r] * (dxh - mean_d - xr[c] * mean_dx);
                        }
                    }
                    acc(&mut grads, *gain, dgain);
                    acc(&mut grads, *bias, dbias);
                    acc(&mut grads, *x, dx);
                }
                Op::Rows { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    let off = start * xv.cols();
                    dx.data_mut()[off..off + g.data().len()].copy_from_slice(g.data());
                    acc(&mut grads, *x, dx);
                }
                Op::SelectRows { x, rows } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, &v) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        let data = g.data()[row * c..(row + r) * c].to_vec();
                        acc(&mut grads, p, Matrix::from_vec(r, c, data).unwrap());
                        row += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        let mut d = Matrix::zeros(r, c);
                        for i in 0..r {
                            d.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        acc(&mut grads, p, d);
                        off += c;
                    }
                }
                Op::MeanRows(x) => {
                    let (r, c) = self.value(*x).shape();
                    let n = T::from_usize(r).unwrap();
                    let mut dx = Matrix::zeros(r, c);
                    for i in 0..r {
                        for (d, &v) in dx.row_mut(i).iter_mut().zip(g.data()) {
                            *d = v / n;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        acc(&mut grads, p, g.clone());
                    }
                }
                Op::Ortho { x, mode } => {
                    let dx = ortho_grad(self.value(*x), *mode).map(|v| v * g.item());
                    acc(&mut grads, *x, dx);
                }
                Op::BcePair { x, label, prob, clamped } => {
                    let mut d = Matrix::zeros(1, 2);
                    if !*clamped {
                        let dl1 = (*prob - *label) * g.item();
                        d.data_mut()[0] = -dl1;
                        d.data_mut()[1] = dl1;
                    }
                    acc(&mut grads, *x, d);
                }
            }
        }
        out
    }
}

fn acc<T: Real>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn hadamard<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).unwrap()
}

/// `softmax([l0, l1])[1]`, i.e. `σ(l1 − l0)`.
pub fn pair_probability<T: Real>(l0: T, l1: T) -> T {
    let z = l1 - l0;
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn normalized_gram<T: Real>(p: &Matrix<T>, mode: OrthoMode) -> Result<(Matrix<T>, Matrix<T>)> {
    match mode {
        OrthoMode::Frobenius => {
            let s: T = p.data().iter().map(|&x| x * x).sum();
            if s == T::zero() {
                return Err(Error::InvalidArgument("orthogonality loss of a zero matrix".into()));
            }
            let g = matmul_bt(p, p).map(|x| x / s);
            Ok((p.clone(), g))
        }
        OrthoMode::Cosine => {
            let mut unit = p.clone();
            for r in 0..unit.rows() {
                let n = dot(p.row(r), p.row(r)).sqrt();
                if n == T::zero() {
                    return Err(Error::InvalidArgument(format!("anchor row {r} is zero")));
                }
                unit.row_mut(r).iter_mut().for_each(|x| *x /= n);
            }
            let g = matmul_bt(&unit, &unit);
            Ok((unit, g))
        }
    }
}

/// Value of the orthogonality penalty; see [`OrthoMode`].
pub fn ortho_value<T: Real>(p: &Matrix<T>, mode: OrthoMode) -> Result<T> {
    if p.rows() == 0 {
        return Err(Error::Empty("anchor matrix"));
    }
    let (_, mut g) = normalized_gram(p, mode)?;
    for i in 0..g.rows() {
        let v = g.get(i, i) - T::one();
        g.set(i, i, v);
    }
    Ok(super::matrix::frobenius_norm(&g))
}

fn ortho_grad<T: Real>(p: &Matrix<T>, mode: OrthoMode) -> Matrix<T> {
    let (basis, mut m) = normalized_gram(p, mode).expect("validated in forward");
    for i in 0..m.rows() {
        let v = m.get(i, i) - T::one();
        m.set(i, i, v);
    }
    let loss = super::matrix::frobenius_norm(&m);
    if loss == T::zero() {
        return Matrix::zeros(p.rows(), p.cols());
    }
    let two = T::lit(2.0);
    match mode {
        OrthoMode::Frobenius => {
            // L = ‖G/s − I‖, G = PPᵀ, s = ‖P‖². With M = G/s − I:
            // dL/dP = 2 (M / (L s)) P − 2 ⟨M, G⟩ / (L s²) P.
            let s: T = p.data().iter().map(|&x| x * x).sum();
            let g = matmul_bt(p, p);
            let inner: T = m.data().iter().zip(g.data()).map(|(&a, &b)| a * b).sum();
            let a = m.map(|x| x / (loss * s));
            let mut out = matmul(&a, p).map(|x| x * two);
            let coef = two * inner / (loss * s * s);
            for (o, &x) in out.data_mut().iter_mut().zip(p.data()) {
                *o -= coef * x;
            }
            out
        }
        OrthoMode::Cosine => {
            // Through the unit rows: dL/dû = 2 (M / L) Û, then project out the
            // radial component and divide by the row norm.
            let du = matmul(&m, &basis).map(|x| x * two / loss);
            let mut out = Matrix::zeros(p.rows(), p.cols());
            for r in 0..p.rows() {
                let n = dot(p.row(r), p.row(r)).sqrt();
                let radial = dot(du.row(r), basis.row(r));
                for c in 0..p.cols() {
                    out.row_mut(r)[c] = (du.get(r, c) - radial * basis.get(r, c)) / n;
                }
            }
            out
        }
    }
}
