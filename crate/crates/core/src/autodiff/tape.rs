//! Reverse-mode tape over matrix-valued operations.
//!
//! Jets are ordinary stacked matrices here, so recording a jet forward pass and
//! calling [`Tape::backward`] yields exact parameter gradients of losses that
//! involve `u_x`, `u_t`, `u_xx` (reverse over forward).

use super::jet::{Activation, JetLayout};
use crate::error::{Error, Result};
use crate::linalg::{gemm_t, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy { x: Var, s: Var },
    AddRowBias { x: Var, b: Var, rows: usize },
    MulRowBroadcast { x: Var, s: Var },
    JetAct { z: Var, layout: JetLayout, act: Activation, n: usize },
    JetMul { a: Var, b: Var, layout: JetLayout, n: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols { a: Var, b: Var },
    BroadcastRows { p: Var, n: usize },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub name: String,
    pub var: Var,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    slots: Vec<Slot>,
    n_params: usize,
    output: Option<Var>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Const, false)
    }

    /// Registers a trainable leaf; its gradient occupies the next slot of the flat gradient.
    pub fn param(&mut self, name: impl Into<String>, value: Matrix) -> Var {
        let (rows, cols) = value.shape();
        let var = self.push(value, Op::Param, true);
        self.slots.push(Slot {
            name: name.into(),
            var,
            offset: self.n_params,
            rows,
            cols,
        });
        self.n_params += rows * cols;
        var
    }

    /// `op(a) · op(b)`.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value = gemm_t(self.value(a), ta, self.value(b), tb)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// Multiplies every entry of `x` by the `1×1` node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(Error::dim("scale_by", "scale factor must be 1x1"));
        }
        let sv = self.scalar(s);
        let value = self.value(x).scale(sv);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::ScaleBy { x, s }, rg))
    }

    /// Adds the `1×cols` row `b` to the first `rows` rows of `x` (the value block of a jet).
    pub fn add_row_bias(&mut self, x: Var, b: Var, rows: usize) -> Result<Var> {
        let (xr, xc) = self.value(x).shape();
        if self.value(b).shape() != (1, xc) || rows > xr {
            return Err(Error::dim(
                "add_row_bias",
                format!("bias {:?} onto {:?} (rows {rows})", self.value(b).shape(), (xr, xc)),
            ));
        }
        let mut value = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for r in 0..rows {
            for (v, bv) in value.data_mut()[r * xc..(r + 1) * xc].iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(value, Op::AddRowBias { x, b, rows }, rg))
    }

    /// Multiplies each column `j` of every row of `x` by `s[j]` (`s` is `1×cols`).
    pub fn mul_row_broadcast(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xr, xc) = self.value(x).shape();
        if self.value(s).shape() != (1, xc) {
            return Err(Error::dim("mul_row_broadcast", "scale row width"));
        }
        let scale = self.value(s).data().to_vec();
        let mut value = self.value(x).clone();
        for r in 0..xr {
            for (v, sv) in value.data_mut()[r * xc..(r + 1) * xc].iter_mut().zip(&scale) {
                *v *= sv;
            }
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::MulRowBroadcast { x, s }, rg))
    }

    /// Pushes a stacked jet (`layout.comps() · n` rows) through an activation.
    pub fn jet_activation(&mut self, z: Var, layout: &JetLayout, act: Activation) -> Result<Var> {
        let (rows, cols) = self.value(z).shape();
        let comps = layout.comps();
        if rows % comps != 0 {
            return Err(Error::dim(
                "jet_activation",
                format!("{rows} rows not divisible by {comps} jet components"),
            ));
        }
        let n = rows / comps;
        let zin = self.value(z).data();
        let block = n * cols;
        let mut out = vec![0.0; rows * cols];
        for e in 0..block {
            let (a, s1, s2, _) = act.derivs(zin[e]);
            out[e] = a;
            for d in 0..layout.dirs.len() {
                let b = layout.first_block(d) * block + e;
                out[b] = s1 * zin[b];
            }
            for (idx, &d) in layout.second.iter().enumerate() {
                let zd = zin[layout.first_block(d) * block + e];
                let b = layout.second_block(idx) * block + e;
                out[b] = s2 * zd * zd + s1 * zin[b];
            }
        }
        let rg = self.rg(z);
        Ok(self.push(
            Matrix::from_vec_unchecked(rows, cols, out),
            Op::JetAct {
                z,
                layout: layout.clone(),
                act,
                n,
            },
            rg,
        ))
    }

    /// Truncated-Taylor product of two stacked jets with identical layout.
    pub fn jet_mul(&mut self, a: Var, b: Var, layout: &JetLayout) -> Result<Var> {
        let (rows, cols) = self.value(a).shape();
        if self.value(b).shape() != (rows, cols) || rows % layout.comps() != 0 {
            return Err(Error::dim("jet_mul", "operands must share a jet layout"));
        }
        let n = rows / layout.comps();
        let block = n * cols;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; rows * cols];
        for e in 0..block {
            out[e] = av[e] * bv[e];
            for d in 0..layout.dirs.len() {
                let i = layout.first_block(d) * block + e;
                out[i] = av[i] * bv[e] + av[e] * bv[i];
            }
            for (idx, &d) in layout.second.iter().enumerate() {
                let i = layout.second_block(idx) * block + e;
                let f = layout.first_block(d) * block + e;
                out[i] = av[i] * bv[e] + 2.0 * av[f] * bv[f] + av[e] * bv[i];
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Matrix::from_vec_unchecked(rows, cols, out),
            Op::JetMul {
                a,
                b,
                layout: layout.clone(),
                n,
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (xr, xc) = self.value(x).shape();
        if start + len > xr {
            return Err(Error::dim("slice_rows", format!("{start}+{len} > {xr}")));
        }
        let value = Matrix::from_vec_unchecked(
            len,
            xc,
            self.value(x).data()[start * xc..(start + len) * xc].to_vec(),
        );
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ar != br {
            return Err(Error::dim("concat_cols", format!("{ar} vs {br} rows")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(ar * (ac + bc));
        for r in 0..ar {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Matrix::from_vec_unchecked(ar, ac + bc, data),
            Op::ConcatCols { a, b },
            rg,
        ))
    }

    /// Repeats the `1×d` row `p` over `n` value rows, zero over the remaining
    /// `total_rows − n` derivative rows (a coordinate-independent latent).
    pub fn broadcast_rows(&mut self, p: Var, n: usize, total_rows: usize) -> Result<Var> {
        let (pr, pc) = self.value(p).shape();
        if pr != 1 || n > total_rows {
            return Err(Error::dim("broadcast_rows", "expected a 1xd row"));
        }
        let mut value = Matrix::zeros(total_rows, pc);
        let row = self.value(p).data().to_vec();
        for r in 0..n {
            value.data_mut()[r * pc..(r + 1) * pc].copy_from_slice(&row);
        }
        let rg = self.rg(p);
        Ok(self.push(value, Op::BroadcastRows { p, n }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Matrix::from_vec_unchecked(1, 1, vec![s]), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).data().len().max(1) as f64;
        let s: f64 = self.value(x).data().iter().sum::<f64>() / n;
        let rg = self.rg(x);
        self.push(Matrix::from_vec_unchecked(1, 1, vec![s]), Op::Mean(x), rg)
    }

    /// Marks `v` (a `1×1` node) as the completed scalar output.
    pub fn set_output(&mut self, v: Var) -> Result<()> {
        if self.value(v).shape() != (1, 1) {
            return Err(Error::dim("set_output", "output must be a scalar"));
        }
        self.output = Some(v);
        Ok(())
    }

    pub fn output(&self) -> Option<Var> {
        self.output
    }

    /// Flat gradient of the recorded output, aligned with [`Tape::slots`].
    pub fn backward(&self, seed: f64) -> Result<Vec<f64>> {
        let out = self.output.ok_or(Error::NoForward)?;
        self.backward_from(out, seed)
    }

    pub fn backward_from(&self, root: Var, seed: f64) -> Result<Vec<f64>> {
        if root.0 >= self.nodes.len() || self.value(root).shape() != (1, 1) {
            return Err(Error::NoForward);
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::from_vec_unchecked(1, 1, vec![seed]));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Const => {}
                Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                    if self.rg(a) {
                        // C = op(A) op(B): dop(A) = G op(B)ᵀ
                        let ga = if ta {
                            gemm_t(self.value(b), tb, &g, true)?
                        } else {
                            gemm_t(&g, false, self.value(b), !tb)?
                        };
                        accumulate(&mut grads, a, ga);
                    }
                    if self.rg(b) {
                        let gb = if tb {
                            gemm_t(&g, true, self.value(a), ta)?
                        } else {
                            gemm_t(self.value(a), !ta, &g, false)?
                        };
                        accumulate(&mut grads, b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.rg(a) {
                        let ga = g.zip_map(self.value(b), |x, y| x * y)?;
                        accumulate(&mut grads, a, ga);
                    }
                    if self.rg(b) {
                        let gb = g.zip_map(self.value(a), |x, y| x * y)?;
                        accumulate(&mut grads, b, gb);
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::ScaleBy { x, s } => {
                    let (x, s) = (*x, *s);
                    if self.rg(s) {
                        let d: f64 = g
                            .data()
                            .iter()
                            .zip(self.value(x).data())
                            .map(|(a, b)| a * b)
                            .sum();
                        accumulate(&mut grads, s, Matrix::from_vec_unchecked(1, 1, vec![d]));
                    }
                    if self.rg(x) {
                        accumulate(&mut grads, x, g.scale(self.scalar(s)));
                    }
                }
                Op::AddRowBias { x, b, rows } => {
                    let (x, b, rows) = (*x, *b, *rows);
                    if self.rg(b) {
                        let cols = g.cols();
                        let mut gb = vec![0.0; cols];
                        for r in 0..rows {
                            for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, b, Matrix::from_vec_unchecked(1, cols, gb));
                    }
                    if self.rg(x) {
                        accumulate(&mut grads, x, g);
                    }
                }
                Op::MulRowBroadcast { x, s } => {
                    let (x, s) = (*x, *s);
                    let (rows, cols) = g.shape();
                    if self.rg(s) {
                        let xv = self.value(x);
                        let mut gs = vec![0.0; cols];
                        for r in 0..rows {
                            for ((acc, gv), xvv) in gs.iter_mut().zip(g.row(r)).zip(xv.row(r)) {
                                *acc += gv * xvv;
                            }
                        }
                        accumulate(&mut grads, s, Matrix::from_vec_unchecked(1, cols, gs));
                    }
                    if self.rg(x) {
                        let sv = self.value(s).data();
                        let mut gx = g;
                        for r in 0..rows {
                            for (v, sc) in gx.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(sv) {
                                *v *= sc;
                            }
                        }
                        accumulate(&mut grads, x, gx);
                    }
                }
                Op::JetAct { z, layout, act, n } => {
                    let gz = jet_act_backward(self.value(*z), &g, layout, *act, *n);
                    accumulate(&mut grads, *z, gz);
                }
                Op::JetMul { a, b, layout, n } => {
                    let (a, b) = (*a, *b);
                    if self.rg(a) {
                        let ga = jet_mul_backward(self.value(b), &g, layout, *n);
                        accumulate(&mut grads, a, ga);
                    }
                    if self.rg(b) {
                        let gb = jet_mul_backward(self.value(a), &g, layout, *n);
                        accumulate(&mut grads, b, gb);
                    }
                }
                Op::SliceRows { x, start } => {
                    let (xr, xc) = self.value(*x).shape();
                    let mut gx = Matrix::zeros(xr, xc);
                    let len = g.rows();
                    gx.data_mut()[start * xc..(start + len) * xc].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols { a, b } => {
                    let (a, b) = (*a, *b);
                    let ac = self.value(a).cols();
                    let bc = self.value(b).cols();
                    let rows = g.rows();
                    if self.rg(a) {
                        let ga = Matrix::from_fn(rows, ac, |i, j| g.get(i, j));
                        accumulate(&mut grads, a, ga);
                    }
                    if self.rg(b) {
                        let gb = Matrix::from_fn(rows, bc, |i, j| g.get(i, ac + j));
                        accumulate(&mut grads, b, gb);
                    }
                }
                Op::BroadcastRows { p, n } => {
                    let cols = g.cols();
                    let mut gp = vec![0.0; cols];
                    for r in 0..*n {
                        for (acc, v) in gp.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *p, Matrix::from_vec_unchecked(1, cols, gp));
                }
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    let gv = g.data()[0];
                    accumulate(&mut grads, *x, Matrix::from_vec_unchecked(r, c, vec![gv; r * c]));
                }
                Op::Mean(x) => {
                    let (r, c) = self.value(*x).shape();
                    let gv = g.data()[0] / ((r * c).max(1) as f64);
                    accumulate(&mut grads, *x, Matrix::from_vec_unchecked(r, c, vec![gv; r * c]));
                }
            }
        }

        let mut flat = vec![0.0; self.n_params];
        for slot in &self.slots {
            if let Some(g) = grads.get(slot.var.0).and_then(|g| g.as_ref()) {
                flat[slot.offset..slot.offset + slot.len()].copy_from_slice(g.data());
            }
        }
        Ok(flat)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn jet_act_backward(z: &Matrix, g: &Matrix, layout: &JetLayout, act: Activation, n: usize) -> Matrix {
    let cols = z.cols();
    let block = n * cols;
    let zin = z.data();
    let gin = g.data();
    let mut out = vec![0.0; zin.len()];
    let nd = layout.dirs.len();
    for e in 0..block {
        let (_, s1, s2, s3) = act.derivs(zin[e]);
        let mut g0 = gin[e] * s1;
        for d in 0..nd {
            let b = layout.first_block(d) * block + e;
            g0 += gin[b] * s2 * zin[b];
            out[b] = gin[b] * s1;
        }
        for (idx, &d) in layout.second.iter().enumerate() {
            let bd = layout.first_block(d) * block + e;
            let bs = layout.second_block(idx) * block + e;
            let zd = zin[bd];
            g0 += gin[bs] * (s3 * zd * zd + s2 * zin[bs]);
            out[bd] += gin[bs] * 2.0 * s2 * zd;
            out[bs] = gin[bs] * s1;
        }
        out[e] = g0;
    }
    Matrix::from_vec_unchecked(z.rows(), cols, out)
}

/// Adjoint of one factor of a jet product given the other factor `other`.
fn jet_mul_backward(other: &Matrix, g: &Matrix, layout: &JetLayout, n: usize) -> Matrix {
    let cols = other.cols();
    let block = n * cols;
    let (o, gin) = (other.data(), g.data());
    let mut out = vec![0.0; o.len()];
    for e in 0..block {
        let mut g0 = gin[e] * o[e];
        for d in 0..layout.dirs.len() {
            let i = layout.first_block(d) * block + e;
            g0 += gin[i] * o[i];
            out[i] += gin[i] * o[e];
        }
        for (idx, &d) in layout.second.iter().enumerate() {
            let i = layout.second_block(idx) * block + e;
            let f = layout.first_block(d) * block + e;
            g0 += gin[i] * o[i];
            out[f] += 2.0 * gin[i] * o[f];
            out[i] += gin[i] * o[e];
        }
        out[e] = g0;
    }
    Matrix::from_vec_unchecked(other.rows(), cols, out)
}
