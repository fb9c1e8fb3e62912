use std::sync::Arc;

use super::tensor::matmul_raw;
use super::{AutodiffError, Mask, Tensor};

/// Guard used by [`Tape::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Averages of diagonal runs of a matrix.
///
/// Output entry `e` is `mean_{m=lo..=hi} G[row + m, col + m]`. Entries are
/// listed in row-major order of an `out_rows x out_cols` result.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSpec {
    pub out_rows: usize,
    pub out_cols: usize,
    pub entries: Vec<WindowEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowEntry {
    pub row: usize,
    pub col: usize,
    pub lo: isize,
    pub hi: isize,
}

impl WindowEntry {
    fn at(&self, m: isize) -> (usize, usize) {
        ((self.row as isize + m) as usize, (self.col as isize + m) as usize)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MaskedMatMul(Var, Var, Arc<Mask>),
    Add(Var, Var),
    AddCol(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Inner(Var, Var),
    Softmax(Var),
    L2Normalize(Var),
    WindowMean(Var, Arc<WindowSpec>),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records primitive applications in creation order and replays them in
/// reverse to accumulate gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

fn dim_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Dimension { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Clears gradients so the tape can be differentiated again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.consumed = false;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var, AutodiffError> {
        self.push(value, requires_grad, Op::Leaf, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var, AutodiffError> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var, AutodiffError> {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op, name: &'static str) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, parents: &[Var], op: Op, name: &'static str) -> Result<Var, AutodiffError> {
        let rg = self.any_grad(parents);
        self.push(value, rg, op, name)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.record(out, &[a, b], Op::MatMul(a, b), "matmul")
    }

    /// `(w ⊙ mask) · x`; gradients outside the mask are exactly zero.
    pub fn masked_matmul(&mut self, w: Var, x: Var, mask: &Arc<Mask>) -> Result<Var, AutodiffError> {
        let (wv, xv) = (self.value(w), self.value(x));
        if mask.shape() != wv.shape() {
            return Err(dim_err("masked_matmul", format!("mask {:?} vs weight {:?}", mask.shape(), wv.shape())));
        }
        if wv.cols() != xv.rows() {
            return Err(dim_err("masked_matmul", format!("{:?} times {:?}", wv.shape(), xv.shape())));
        }
        let (m, k, n) = (wv.rows(), wv.cols(), xv.cols());
        let mut out = vec![0.0; m * n];
        let (wd, xd, bits) = (wv.data(), xv.data(), mask.bits());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                if !bits[i * k + p] {
                    continue;
                }
                let wvp = wd[i * k + p];
                for (o, xv) in row.iter_mut().zip(&xd[p * n..(p + 1) * n]) {
                    *o += wvp * xv;
                }
            }
        }
        let out = Tensor::from_vec(m, n, out)?;
        self.record(out, &[w, x], Op::MaskedMatMul(w, x, Arc::clone(mask)), "masked_matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.record(out, &[a, b], Op::Add(a, b), "add")
    }

    /// Adds column vector `b` to every column of `a`.
    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.cols() != 1 || bv.rows() != av.rows() {
            return Err(dim_err("add_col", format!("{:?} plus column {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        let cols = out.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i / cols];
        }
        self.record(out, &[a, b], Op::AddCol(a, b), "add_col")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data)?;
        self.record(out, &[a, b], Op::Sub(a, b), "sub")
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("hadamard", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data)?;
        self.record(out, &[a, b], Op::Hadamard(a, b), "hadamard")
    }

    /// Multiplies by a constant.
    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(|v| v * c);
        self.record(out, &[a], Op::Scale(a, c), "scalar_mul")
    }

    /// Multiplies every entry of `a` by the `1 x 1` variable `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, AutodiffError> {
        if self.shape(s) != (1, 1) {
            return Err(dim_err("mul_scalar", format!("scalar operand has shape {:?}", self.shape(s))));
        }
        let sv = self.value(s).item();
        let out = self.value(a).map(|v| v * sv);
        self.record(out, &[a, s], Op::MulScalar(a, s), "mul_scalar")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or_else(|| dim_err("concat_rows", "no operands".into()))?;
        let cols = self.shape(*first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(dim_err("concat_rows", format!("{} columns, expected {cols}", v.cols())));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        self.record(out, parts, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or_else(|| dim_err("concat_cols", "no operands".into()))?;
        let rows = self.shape(*first).0;
        let mut cols = 0;
        for p in parts {
            let (r, c) = self.shape(*p);
            if r != rows {
                return Err(dim_err("concat_cols", format!("{r} rows, expected {rows}")));
            }
            cols += c;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let v = self.value(*p);
            for r in 0..rows {
                for c in 0..v.cols() {
                    out.set(r, offset + c, v.get(r, c));
                }
            }
            offset += v.cols();
        }
        self.record(out, parts, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        if start > end || end > av.rows() {
            return Err(dim_err("slice_rows", format!("{start}..{end} of {} rows", av.rows())));
        }
        let c = av.cols();
        let out = Tensor::from_vec(end - start, c, av.data()[start * c..end * c].to_vec())?;
        self.record(out, &[a], Op::SliceRows(a, start), "slice_rows")
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        if start > end || end > av.cols() {
            return Err(dim_err("slice_cols", format!("{start}..{end} of {} columns", av.cols())));
        }
        let mut out = Tensor::zeros(av.rows(), end - start);
        for r in 0..av.rows() {
            for c in start..end {
                out.set(r, c - start, av.get(r, c));
            }
        }
        self.record(out, &[a], Op::SliceCols(a, start), "slice_cols")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).transpose();
        self.record(out, &[a], Op::Transpose(a), "transpose")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.record(out, &[a], Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(sigmoid);
        self.record(out, &[a], Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(f64::tanh);
        self.record(out, &[a], Op::Tanh(a), "tanh")
    }

    /// `ln(1 + e^x)`, strictly positive.
    pub fn softplus(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(softplus);
        self.record(out, &[a], Op::Softplus(a), "softplus")
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(f64::abs);
        self.record(out, &[a], Op::Abs(a), "abs")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.value(a).data().iter().sum();
        self.record(Tensor::scalar(s), &[a], Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(dim_err("mean", "empty tensor".into()));
        }
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        self.record(Tensor::scalar(s), &[a], Op::Mean(a), "mean")
    }

    pub fn inner_product(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("inner_product", a, b)?;
        let s = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).sum();
        self.record(Tensor::scalar(s), &[a, b], Op::Inner(a, b), "inner_product")
    }

    /// Softmax over each column (a column vector is normalized as a whole).
    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(dim_err("softmax", "empty vector".into()));
        }
        let mut out = av.clone();
        for c in 0..av.cols() {
            let max = (0..av.rows()).map(|r| av.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for r in 0..av.rows() {
                let e = (av.get(r, c) - max).exp();
                out.set(r, c, e);
                total += e;
            }
            for r in 0..av.rows() {
                out.set(r, c, out.get(r, c) / total);
            }
        }
        self.record(out, &[a], Op::Softmax(a), "softmax")
    }

    /// Divides each column by `max(‖column‖₂, NORM_EPS)`.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        let mut out = av.clone();
        for c in 0..av.cols() {
            let norm = column_norm(av, c).max(NORM_EPS);
            for r in 0..av.rows() {
                out.set(r, c, av.get(r, c) / norm);
            }
        }
        self.record(out, &[a], Op::L2Normalize(a), "l2_normalize")
    }

    pub fn window_mean(&mut self, g: Var, spec: &Arc<WindowSpec>) -> Result<Var, AutodiffError> {
        let gv = self.value(g);
        if spec.entries.len() != spec.out_rows * spec.out_cols {
            return Err(dim_err("window_mean", "entry count does not match output shape".into()));
        }
        let mut data = Vec::with_capacity(spec.entries.len());
        for e in &spec.entries {
            if e.hi < e.lo {
                return Err(dim_err("window_mean", format!("empty window {}..={}", e.lo, e.hi)));
            }
            let (r0, c0) = (e.row as isize + e.lo, e.col as isize + e.lo);
            let (r1, c1) = (e.row as isize + e.hi, e.col as isize + e.hi);
            if r0 < 0 || c0 < 0 || r1 >= gv.rows() as isize || c1 >= gv.cols() as isize {
                return Err(dim_err(
                    "window_mean",
                    format!("window ({},{}) {}..={} outside {:?}", e.row, e.col, e.lo, e.hi, gv.shape()),
                ));
            }
            let mut acc = 0.0;
            for m in e.lo..=e.hi {
                let (r, c) = e.at(m);
                acc += gv.get(r, c);
            }
            data.push(acc / (e.hi - e.lo + 1) as f64);
        }
        let out = Tensor::from_vec(spec.out_rows, spec.out_cols, data)?;
        self.record(out, &[g], Op::WindowMean(g, Arc::clone(spec)), "window_mean")
    }

    /// Reverse pass from a scalar root. Gradients add into every reachable
    /// node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::Contract("tape already differentiated; call reset_grads first".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(AutodiffError::Contract(format!("backward root must be scalar, got {:?}", self.shape(loss))));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g);
            }
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&Tensor) -> Tensor) {
        if self.nodes[v.0].requires_grad {
            let g = f(&self.nodes[v.0].value);
            self.accumulate(v, g);
        }
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a).clone(), self.value(b).clone());
                if self.requires_grad(a) {
                    self.accumulate(a, matmul_raw(g, &bv.transpose()));
                }
                if self.requires_grad(b) {
                    self.accumulate(b, matmul_raw(&av.transpose(), g));
                }
            }
            Op::MaskedMatMul(w, x, mask) => {
                if self.requires_grad(w) {
                    let gw = matmul_raw(g, &self.value(x).transpose());
                    self.accumulate(w, mask.apply(&gw));
                }
                if self.requires_grad(x) {
                    let wm = mask.apply(self.value(w));
                    self.accumulate(x, matmul_raw(&wm.transpose(), g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::AddCol(a, b) => {
                self.accumulate(a, g.clone());
                let sums = (0..g.rows()).map(|r| g.row_values(r).iter().sum()).collect();
                self.accumulate(b, Tensor::column(sums));
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.map(|v| -v));
            }
            Op::Hadamard(a, b) => {
                let bv = self.value(b).clone();
                self.accumulate_with(a, |_| zip_map(g, &bv, |x, y| x * y));
                let av = self.value(a).clone();
                self.accumulate_with(b, |_| zip_map(g, &av, |x, y| x * y));
            }
            Op::Scale(a, c) => self.accumulate(a, g.map(|v| v * c)),
            Op::MulScalar(a, s) => {
                let sv = self.value(s).item();
                self.accumulate(a, g.map(|v| v * sv));
                let dot: f64 = g.data().iter().zip(self.value(a).data()).map(|(x, y)| x * y).sum();
                self.accumulate(s, Tensor::scalar(dot));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.shape(p);
                    let piece = Tensor::from_vec(r, c, g.data()[offset * c..(offset + r) * c].to_vec())
                        .expect("concat_rows slice shape");
                    offset += r;
                    self.accumulate(p, piece);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.shape(p);
                    let mut piece = Tensor::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            piece.set(i, j, g.get(i, offset + j));
                        }
                    }
                    offset += c;
                    self.accumulate(p, piece);
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(a);
                self.accumulate_with(a, |_| {
                    let mut full = Tensor::zeros(r, c);
                    full.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    full
                });
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(a);
                self.accumulate_with(a, |_| {
                    let mut full = Tensor::zeros(r, c);
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            full.set(i, start + j, g.get(i, j));
                        }
                    }
                    full
                });
            }
            Op::Transpose(a) => self.accumulate(a, g.transpose()),
            Op::Relu(a) => self.accumulate_with(a, |x| zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })),
            Op::Sigmoid(a) => {
                let y = self.nodes[idx].value.clone();
                self.accumulate(a, zip_map(g, &y, |gv, yv| gv * yv * (1.0 - yv)));
            }
            Op::Tanh(a) => {
                let y = self.nodes[idx].value.clone();
                self.accumulate(a, zip_map(g, &y, |gv, yv| gv * (1.0 - yv * yv)));
            }
            Op::Softplus(a) => self.accumulate_with(a, |x| zip_map(g, x, |gv, xv| gv * sigmoid(xv))),
            Op::Abs(a) => self.accumulate_with(a, |x| zip_map(g, x, |gv, xv| gv * sign(xv))),
            Op::Sum(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(a, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(a, Tensor::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::Inner(a, b) => {
                let gv = g.item();
                let bv = self.value(b).clone();
                self.accumulate_with(a, |_| bv.map(|v| v * gv));
                let av = self.value(a).clone();
                self.accumulate_with(b, |_| av.map(|v| v * gv));
            }
            Op::Softmax(a) => {
                let y = &self.nodes[idx].value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for c in 0..y.cols() {
                    let dot: f64 = (0..y.rows()).map(|r| g.get(r, c) * y.get(r, c)).sum();
                    for r in 0..y.rows() {
                        gx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                self.accumulate(a, gx);
            }
            Op::L2Normalize(a) => {
                let x = self.value(a);
                let y = &self.nodes[idx].value;
                let mut gx = Tensor::zeros(x.rows(), x.cols());
                for c in 0..x.cols() {
                    let norm = column_norm(x, c);
                    if norm == 0.0 {
                        continue;
                    }
                    if norm <= NORM_EPS {
                        for r in 0..x.rows() {
                            gx.set(r, c, g.get(r, c) / NORM_EPS);
                        }
                        continue;
                    }
                    let dot: f64 = (0..x.rows()).map(|r| y.get(r, c) * g.get(r, c)).sum();
                    for r in 0..x.rows() {
                        gx.set(r, c, (g.get(r, c) - y.get(r, c) * dot) / norm);
                    }
                }
                self.accumulate(a, gx);
            }
            Op::WindowMean(src, spec) => {
                let (r, c) = self.shape(src);
                let mut gs = Tensor::zeros(r, c);
                for (e, gv) in spec.entries.iter().zip(g.data()) {
                    let share = gv / (e.hi - e.lo + 1) as f64;
                    for m in e.lo..=e.hi {
                        let (i, j) = e.at(m);
                        gs.set(i, j, gs.get(i, j) + share);
                    }
                }
                self.accumulate(src, gs);
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("zip_map shapes agree")
}

fn column_norm(t: &Tensor, c: usize) -> f64 {
    (0..t.rows()).map(|r| t.get(r, c).powi(2)).sum::<f64>().sqrt()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}
