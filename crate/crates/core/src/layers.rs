//! Parameter storage and the neural building blocks shared by every network.
//!
//! Parameters live in a [`ParamStore`]; a [`Session`] binds them onto a fresh
//! [`Tape`] on first use so a forward pass only records what it touches.

use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::{GradCheck, FD_STEP};
use crate::autodiff::{softplus_inverse, AutodiffError, Mask, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Entries outside the mask are held at zero.
    pub mask: Option<Arc<Mask>>,
    pub trainable: bool,
}

impl Param {
    /// Number of free scalars.
    pub fn free_count(&self) -> usize {
        match &self.mask {
            Some(m) => m.count_ones(),
            None => self.value.len(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, mask: Option<Arc<Mask>>) -> ParamId {
        let value = match &mask {
            Some(m) => m.apply(&value),
            None => value,
        };
        self.params.push(Param { name: name.into(), value, mask, trainable: true });
        ParamId(self.params.len() - 1)
    }

    pub fn add_fixed(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param { name: name.into(), value, mask: None, trainable: false });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Replaces a value, re-applying the mask.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<(), AutodiffError> {
        let p = &mut self.params[id.0];
        if value.shape() != p.value.shape() {
            return Err(AutodiffError::Dimension {
                op: "set_value",
                detail: format!("{} expects {:?}, got {:?}", p.name, p.value.shape(), value.shape()),
            });
        }
        p.value = match &p.mask {
            Some(m) => m.apply(&value),
            None => value,
        };
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Count of trainable scalars, masked-out entries excluded.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(Param::free_count).sum()
    }
}

/// A tape plus lazily bound parameter leaves.
pub struct Session<'a> {
    store: &'a ParamStore,
    tape: Tape,
    bound: Vec<Option<Var>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Session { store, tape: Tape::new(), bound: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Leaf for a parameter; fixed parameters are bound as constants.
    pub fn p(&mut self, id: ParamId) -> Result<Var, AutodiffError> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let param = self.store.get(id);
        let v = self.tape.leaf(param.value.clone(), param.trainable)?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter after `backward`.
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .enumerate()
            .map(|(i, b)| match b {
                Some(v) if self.store.params[i].trainable => self.tape.grad(*v).cloned(),
                _ => None,
            })
            .collect()
    }
}

impl Deref for Session<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Session<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

/// Uniform in `±1/sqrt(fan_in)` over the allowed entries.
pub fn init_uniform(rng: &mut impl Rng, rows: usize, cols: usize, mask: Option<&Mask>) -> Tensor {
    let bound = 1.0 / (cols.max(1) as f64).sqrt();
    let mut t = Tensor::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            if mask.is_none_or(|m| m.get(r, c)) {
                t.set(r, c, rng.random_range(-bound..=bound));
            }
        }
    }
    t
}

/// Affine map `W x + b`; sparse when it carries a mask.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub mask: Option<Arc<Mask>>,
    pub in_dim: usize,
    pub out_dim: usize,
}

pub type SparseLinear = Linear;
pub type DenseLinear = Linear;

impl Linear {
    pub fn sparse(store: &mut ParamStore, rng: &mut impl Rng, name: &str, mask: Arc<Mask>, bias: bool) -> Self {
        let (out_dim, in_dim) = mask.shape();
        let w = init_uniform(rng, out_dim, in_dim, Some(&mask));
        let weight = store.add(format!("{name}.weight"), w, Some(Arc::clone(&mask)));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(out_dim, 1), None));
        Linear { weight, bias, mask: Some(mask), in_dim, out_dim }
    }

    pub fn dense(store: &mut ParamStore, rng: &mut impl Rng, name: &str, out_dim: usize, in_dim: usize, bias: bool) -> Self {
        let w = init_uniform(rng, out_dim, in_dim, None);
        let weight = store.add(format!("{name}.weight"), w, None);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(out_dim, 1), None));
        Linear { weight, bias, mask: None, in_dim, out_dim }
    }

    pub fn is_sparse(&self) -> bool {
        self.mask.is_some()
    }

    /// Applies the layer to every column of `x`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, AutodiffError> {
        if s.shape(x).0 != self.in_dim {
            return Err(AutodiffError::Dimension {
                op: "linear",
                detail: format!("input has {} rows, layer expects {}", s.shape(x).0, self.in_dim),
            });
        }
        let w = s.p(self.weight)?;
        let y = match &self.mask {
            Some(m) => s.masked_matmul(w, x, m)?,
            None => s.matmul(w, x)?,
        };
        match self.bias {
            Some(b) => {
                let b = s.p(b)?;
                s.add_col(y, b)
            }
            None => Ok(y),
        }
    }

    /// Rows `start..end` of the layer applied to `x`, i.e. one head's projection.
    pub fn forward_rows(&self, s: &mut Session, x: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let y = self.forward(s, x)?;
        s.slice_rows(y, start, end)
    }
}

/// Two layers with a ReLU between them; used for every embedding network.
#[derive(Clone, Debug)]
pub struct TwoLayer {
    pub first: Linear,
    pub second: Linear,
}

impl TwoLayer {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, AutodiffError> {
        let h = self.first.forward(s, x)?;
        let h = s.relu(h)?;
        self.second.forward(s, h)
    }
}

/// `e + SL₂(relu(SL₁(e)))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: TwoLayer,
}

impl FeedForward {
    pub fn forward(&self, s: &mut Session, e: Var) -> Result<Var, AutodiffError> {
        let d = self.inner.forward(s, e)?;
        s.add(e, d)
    }
}

/// Gated recurrent unit with stacked reset, update and candidate gates.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub dim: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize) -> Self {
        let w_ih = store.add(format!("{name}.w_ih"), init_uniform(rng, 3 * dim, dim, None), None);
        let w_hh = store.add(format!("{name}.w_hh"), init_uniform(rng, 3 * dim, dim, None), None);
        let b_ih = store.add(format!("{name}.b_ih"), Tensor::zeros(3 * dim, 1), None);
        let b_hh = store.add(format!("{name}.b_hh"), Tensor::zeros(3 * dim, 1), None);
        GruCell { w_ih, w_hh, b_ih, b_hh, dim }
    }

    /// Runs the columns of `inputs` in order from a zero state and returns the final state.
    pub fn run(&self, s: &mut Session, inputs: Var) -> Result<Var, AutodiffError> {
        let (rows, n) = s.shape(inputs);
        if n == 0 {
            return Err(AutodiffError::Contract("GRU needs a nonempty input sequence".into()));
        }
        if rows != self.dim {
            return Err(AutodiffError::Dimension { op: "gru", detail: format!("input dim {rows}, cell dim {}", self.dim) });
        }
        let d = self.dim;
        let (w_ih, w_hh, b_ih, b_hh) = (s.p(self.w_ih)?, s.p(self.w_hh)?, s.p(self.b_ih)?, s.p(self.b_hh)?);
        let gi_all = s.matmul(w_ih, inputs)?;
        let gi_all = s.add_col(gi_all, b_ih)?;
        let mut h = s.constant(Tensor::zeros(d, 1))?;
        for step in 0..n {
            let gi = s.slice_cols(gi_all, step, step + 1)?;
            let gh = s.matmul(w_hh, h)?;
            let gh = s.add(gh, b_hh)?;
            let (i_r, i_z, i_n) = (s.slice_rows(gi, 0, d)?, s.slice_rows(gi, d, 2 * d)?, s.slice_rows(gi, 2 * d, 3 * d)?);
            let (h_r, h_z, h_n) = (s.slice_rows(gh, 0, d)?, s.slice_rows(gh, d, 2 * d)?, s.slice_rows(gh, 2 * d, 3 * d)?);
            let r = s.add(i_r, h_r)?;
            let r = s.sigmoid(r)?;
            let z = s.add(i_z, h_z)?;
            let z = s.sigmoid(z)?;
            let rn = s.hadamard(r, h_n)?;
            let n_pre = s.add(i_n, rn)?;
            let cand = s.tanh(n_pre)?;
            let diff = s.sub(h, cand)?;
            let keep = s.hadamard(z, diff)?;
            h = s.add(cand, keep)?;
        }
        Ok(h)
    }
}

/// Learnable encodings for the relative offsets `min_offset..=max_offset`, one per column.
#[derive(Clone, Debug)]
pub struct PositionalTable {
    pub table: ParamId,
    pub min_offset: isize,
    pub max_offset: isize,
    pub dim: usize,
}

impl PositionalTable {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, min_offset: isize, max_offset: isize) -> Self {
        let n = (max_offset - min_offset + 1) as usize;
        let mut t = Tensor::zeros(dim, n);
        for v in t.data_mut() {
            *v = rng.random_range(-1.0..=1.0);
        }
        let table = store.add(format!("{name}.table"), t, None);
        PositionalTable { table, min_offset, max_offset, dim }
    }

    fn column_of(&self, offset: isize) -> Result<usize, AutodiffError> {
        if offset < self.min_offset || offset > self.max_offset {
            return Err(AutodiffError::Contract(format!(
                "positional offset {offset} outside {}..={}",
                self.min_offset, self.max_offset
            )));
        }
        Ok((offset - self.min_offset) as usize)
    }

    pub fn lookup(&self, s: &mut Session, offset: isize) -> Result<Var, AutodiffError> {
        self.lookup_range(s, offset, offset)
    }

    /// Encodings for `lo..=hi` as consecutive columns.
    pub fn lookup_range(&self, s: &mut Session, lo: isize, hi: isize) -> Result<Var, AutodiffError> {
        let (a, b) = (self.column_of(lo)?, self.column_of(hi)?);
        if b < a {
            return Err(AutodiffError::Contract(format!("empty positional range {lo}..={hi}")));
        }
        let t = s.p(self.table)?;
        s.slice_cols(t, a, b + 1)
    }
}

/// Raw value for a softplus-parameterized positive scalar.
pub fn positive_scalar(store: &mut ParamStore, name: &str, value: f64) -> ParamId {
    store.add(name, Tensor::scalar(softplus_inverse(value)), None)
}

/// `softplus(raw)` as a `1 x 1` variable.
pub fn bind_positive(s: &mut Session, id: ParamId) -> Result<Var, AutodiffError> {
    let raw = s.p(id)?;
    s.softplus(raw)
}

/// Central finite-difference check of `f` against every free trainable entry
/// of `store`. Masked-out entries are skipped.
pub fn check_param_gradients<F>(store: &ParamStore, f: F) -> Result<GradCheck, AutodiffError>
where
    F: Fn(&mut Session) -> Result<Var, AutodiffError> + Sync,
{
    let mut s = Session::new(store);
    let out = f(&mut s)?;
    s.backward(out)?;
    let grads = s.param_grads();
    let eval = |st: &ParamStore| -> Result<f64, AutodiffError> {
        let mut s = Session::new(st);
        let out = f(&mut s)?;
        Ok(s.value(out).item())
    };
    let mut entries = Vec::new();
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        for idx in 0..p.value.len() {
            if p.mask.as_ref().is_none_or(|m| m.bits()[idx]) {
                entries.push((id, idx));
            }
        }
    }
    let results = entries
        .par_iter()
        .map(|&(id, idx)| {
            let mut st = store.clone();
            let base = st.value(id).data()[idx];
            st.value_mut(id).data_mut()[idx] = base + FD_STEP;
            let up = eval(&st)?;
            st.value_mut(id).data_mut()[idx] = base - FD_STEP;
            let down = eval(&st)?;
            let analytic = grads[id.0].as_ref().map_or(0.0, |g| g.data()[idx]);
            Ok((id, idx, analytic, (up - down) / (2.0 * FD_STEP)))
        })
        .collect::<Result<Vec<_>, AutodiffError>>()?;
    let mut report = GradCheck::default();
    for (id, idx, analytic, numeric) in results {
        report.record(|| format!("{}[{idx}]", store.get(id).name), analytic, numeric);
    }
    Ok(report)
}
