//! Dynamic reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and the op that
//! produced it. [`Graph::backward`] walks the nodes in reverse and
//! accumulates adjoints. Nodes that do not depend on a trainable parameter
//! are skipped during the backward sweep.

use std::collections::HashMap;
use std::rc::Rc;

use indexmap::IndexMap;

use super::array::{matmul_at_into, matmul_bt_into, matmul_into, DenseArray, Real};
use super::params::ParamStore;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Precomputed rotation table: one `(cos, sin)` per row per channel pair.
#[derive(Debug, Clone)]
pub struct RotaryTable<T> {
    pub rows: usize,
    pub pairs: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm(Var, T),
    Rotary(Var, Rc<RotaryTable<T>>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Rc<Vec<Option<usize>>>),
    ScatterRows(Var, Rc<Vec<usize>>),
    Reshape(Var),
    SumAll(Var),
    Element(Var, usize),
}

struct Node<T> {
    value: DenseArray<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients keyed by parameter name, plus notes about parameters that
/// were requested but never touched the tape.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub by_name: IndexMap<String, DenseArray<T>>,
    pub diagnostics: Vec<String>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&DenseArray<T>> {
        self.by_name.get(name)
    }

    pub fn global_norm(&self) -> f64 {
        self.by_name
            .values()
            .map(|g| g.sum_sq().as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_all(&mut self, c: T) {
        for g in self.by_name.values_mut() {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }

    /// Element-wise `self += c * other` over shared names.
    pub fn axpy(&mut self, c: T, other: &Gradients<T>) {
        for (k, g) in &other.by_name {
            match self.by_name.get_mut(k) {
                Some(mine) => {
                    for (a, &b) in mine.data_mut().iter_mut().zip(g.data()) {
                        *a += c * b;
                    }
                }
                None => {
                    self.by_name.insert(k.clone(), g.scale(c));
                }
            }
        }
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: DenseArray<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: DenseArray<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers (once) a named parameter from `store`. Frozen parameters
    /// become plain constants.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.require(name)?.clone();
        let frozen = store.is_frozen(name).unwrap_or(true);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: !frozen,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).matrix_dims("matmul_bt")?;
        let (n, k2) = self.value(b).matrix_dims("matmul_bt")?;
        if k != k2 {
            return Err(shape_err(
                "matmul_bt",
                format!("{:?} x {:?}ᵀ", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let out = DenseArray::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast_check(&self, a: Var, b: Var, op: &'static str) -> Result<usize> {
        let c = self.value(a).cols();
        if self.value(b).len() != c {
            return Err(shape_err(
                op,
                format!("row vector {:?} against {:?}", self.shape(b), self.shape(a)),
            ));
        }
        Ok(c)
    }

    /// Adds a row vector `b` (length = cols of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = self.row_broadcast_check(a, b, "add_row")?;
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (x, &y) in row.iter_mut().zip(&bv) {
                *x += y;
            }
        }
        Ok(self.push(out, Op::AddRow(a, b), &[a, b]))
    }

    /// Multiplies every row of `a` element-wise by row vector `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = self.row_broadcast_check(a, b, "mul_row")?;
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (x, &y) in row.iter_mut().zip(&bv) {
                *x *= y;
            }
        }
        Ok(self.push(out, Op::MulRow(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Multiplies `a` by the single value held in `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("mul_scalar", format!("scalar expected, got {:?}", self.shape(s))));
        }
        let c = self.value(s).data()[0];
        let out = self.value(a).scale(c);
        Ok(self.push(out, Op::MulScalar(a, s), &[a, s]))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        self.push(out, Op::Silu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let c = self.value(a).cols();
        if c == 0 {
            return Err(shape_err("layer_norm", "empty last axis"));
        }
        let mut out = self.value(a).clone();
        let n = T::from_f64(c as f64);
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        Ok(self.push(out, Op::LayerNorm(a, eps), &[a]))
    }

    /// Rotates channel pairs `(2i, 2i+1)` of each row by the table angles.
    pub fn rotary(&mut self, a: Var, table: Rc<RotaryTable<T>>) -> Result<Var> {
        let (r, c) = self.value(a).matrix_dims("rotary")?;
        if r != table.rows || c != 2 * table.pairs {
            return Err(shape_err(
                "rotary",
                format!("input {:?} vs table {}x{} pairs", self.shape(a), table.rows, table.pairs),
            ));
        }
        let mut out = self.value(a).clone();
        rotate(out.data_mut(), &table, false);
        Ok(self.push(out, Op::Rotary(a, table), &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).matrix_dims("slice_cols")?;
        if start + len > c {
            return Err(shape_err("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let out = DenseArray::new(vec![r, len], data)?;
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no inputs"));
        }
        let vals: Vec<&DenseArray<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = DenseArray::concat_rows(&vals)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs"));
        }
        let r = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).matrix_dims("concat_cols")?;
            if pr != r {
                return Err(shape_err("concat_cols", format!("rows {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = DenseArray::new(vec![r, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Row gather; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let (r, c) = self.value(a).matrix_dims("gather_rows")?;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(index.len() * c);
        for idx in &index {
            match idx {
                Some(i) if *i < r => data.extend_from_slice(&src[i * c..(i + 1) * c]),
                Some(i) => return Err(shape_err("gather_rows", format!("row {i} of {r}"))),
                None => data.extend(std::iter::repeat_n(T::zero(), c)),
            }
        }
        let out = DenseArray::new(vec![index.len(), c], data)?;
        Ok(self.push(out, Op::GatherRows(a, Rc::new(index)), &[a]))
    }

    /// Places row `i` of `a` at row `index[i]` of an `n_rows` zero matrix.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, a: Var, index: Vec<usize>, n_rows: usize) -> Result<Var> {
        let (r, c) = self.value(a).matrix_dims("scatter_rows")?;
        if index.len() != r || index.iter().any(|&i| i >= n_rows) {
            return Err(shape_err("scatter_rows", format!("{r} rows into {n_rows}")));
        }
        let mut seen = vec![false; n_rows];
        for &i in &index {
            if std::mem::replace(&mut seen[i], true) {
                return Err(shape_err("scatter_rows", format!("row {i} targeted twice")));
            }
        }
        let mut data = vec![T::zero(); n_rows * c];
        let src = self.value(a).data();
        for (i, &dst) in index.iter().enumerate() {
            data[dst * c..(dst + 1) * c].copy_from_slice(&src[i * c..(i + 1) * c]);
        }
        let out = DenseArray::new(vec![n_rows, c], data)?;
        Ok(self.push(out, Op::ScatterRows(a, Rc::new(index)), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = DenseArray::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// Extracts flat element `idx` as a scalar node.
    pub fn element(&mut self, a: Var, idx: usize) -> Result<Var> {
        let v = *self
            .value(a)
            .data()
            .get(idx)
            .ok_or_else(|| shape_err("element", format!("index {idx} of {:?}", self.shape(a))))?;
        Ok(self.push(DenseArray::scalar(v), Op::Element(a, idx), &[a]))
    }

    /// `x · w + b` for a row-major batch `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from scalar `loss`; returns adjoints of every trainable
    /// parameter that was registered on this graph.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut adj: Vec<Option<DenseArray<T>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(DenseArray::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        let mut by_name = IndexMap::new();
        let mut named: Vec<(&String, &Var)> = self.params.iter().collect();
        named.sort_by_key(|(_, v)| v.0);
        for (name, v) in named {
            if !self.nodes[v.0].needs_grad {
                continue;
            }
            let g = adj[v.0]
                .take()
                .unwrap_or_else(|| DenseArray::zeros(self.nodes[v.0].value.shape()));
            by_name.insert(name.clone(), g);
        }
        Ok(Gradients {
            by_name,
            diagnostics: Vec::new(),
        })
    }

    fn propagate(&self, i: usize, g: &DenseArray<T>, adj: &mut [Option<DenseArray<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).matrix_dims("matmul")?;
                let n = val(*b).cols();
                if wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    matmul_bt_into(g.data(), val(*b).data(), &mut ga, m, n, k);
                    accumulate(adj, *a, &[m, k], ga);
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    matmul_at_into(val(*a).data(), g.data(), &mut gb, m, k, n);
                    accumulate(adj, *b, &[k, n], gb);
                }
            }
            Op::MatMulBt(a, b) => {
                // out (m×n) = a (m×k) · bᵀ, b is n×k
                let (m, k) = val(*a).matrix_dims("matmul_bt")?;
                let n = val(*b).rows();
                if wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    matmul_into(g.data(), val(*b).data(), &mut ga, m, n, k);
                    accumulate(adj, *a, &[m, k], ga);
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); n * k];
                    matmul_at_into(g.data(), val(*a).data(), &mut gb, m, n, k);
                    accumulate(adj, *b, &[n, k], gb);
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose()?;
                accumulate_array(adj, *a, gt);
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate_array(adj, *a, g.clone());
                }
                if wants(*b) {
                    accumulate_array(adj, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate_array(adj, *a, g.clone());
                }
                if wants(*b) {
                    accumulate_array(adj, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate_array(adj, *a, g.mul(val(*b))?);
                }
                if wants(*b) {
                    accumulate_array(adj, *b, g.mul(val(*a))?);
                }
            }
            Op::AddRow(a, b) => {
                let c = g.cols();
                if wants(*a) {
                    accumulate_array(adj, *a, g.clone());
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        for (s, &x) in gb.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    accumulate(adj, *b, val(*b).shape(), gb);
                }
            }
            Op::MulRow(a, b) => {
                let c = g.cols();
                let bv = val(*b).data();
                if wants(*a) {
                    let mut ga = g.clone();
                    for row in ga.data_mut().chunks_mut(c) {
                        for (x, &y) in row.iter_mut().zip(bv) {
                            *x *= y;
                        }
                    }
                    accumulate_array(adj, *a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); c];
                    for (grow, arow) in g.data().chunks(c).zip(val(*a).data().chunks(c)) {
                        for ((s, &x), &y) in gb.iter_mut().zip(grow).zip(arow) {
                            *s += x * y;
                        }
                    }
                    accumulate(adj, *b, val(*b).shape(), gb);
                }
            }
            Op::Scale(a, c) => accumulate_array(adj, *a, g.scale(*c)),
            Op::MulScalar(a, s) => {
                let c = val(*s).data()[0];
                if wants(*a) {
                    accumulate_array(adj, *a, g.scale(c));
                }
                if wants(*s) {
                    let dot: T = g.data().iter().zip(val(*a).data()).map(|(&x, &y)| x * y).sum();
                    accumulate(adj, *s, val(*s).shape(), vec![dot]);
                }
            }
            Op::Silu(a) => {
                let x = val(*a);
                let ga = g.zip_map(x, "silu", |gy, x| {
                    let s = T::one() / (T::one() + (-x).exp());
                    gy * s * (T::one() + x * (T::one() - s))
                })?;
                accumulate_array(adj, *a, ga);
            }
            Op::Softmax(a) => {
                let c = g.cols();
                let y = &node.value;
                let mut ga = g.clone();
                for (grow, yrow) in ga.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&x, &y)| x * y).sum();
                    for (x, &y) in grow.iter_mut().zip(yrow) {
                        *x = y * (*x - dot);
                    }
                }
                accumulate_array(adj, *a, ga);
            }
            Op::LayerNorm(a, eps) => {
                let c = g.cols();
                let n = T::from_f64(c as f64);
                let x = val(*a);
                let y = &node.value;
                let mut ga = g.clone();
                for ((grow, yrow), xrow) in ga
                    .data_mut()
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(x.data().chunks(c))
                {
                    let mean = xrow.iter().copied().sum::<T>() / n;
                    let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                    let inv = T::one() / (var + *eps).sqrt();
                    let gmean = grow.iter().copied().sum::<T>() / n;
                    let gymean = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for (gx, &yv) in grow.iter_mut().zip(yrow) {
                        *gx = inv * (*gx - gmean - yv * gymean);
                    }
                }
                accumulate_array(adj, *a, ga);
            }
            Op::Rotary(a, table) => {
                let mut ga = g.clone();
                rotate(ga.data_mut(), table, true);
                accumulate_array(adj, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let full = val(*a);
                let c = full.cols();
                let mut ga = vec![T::zero(); full.len()];
                ga[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(adj, *a, full.shape(), ga);
            }
            Op::SliceCols(a, start) => {
                let full = val(*a);
                let (r, c) = full.matrix_dims("slice_cols")?;
                let w = g.cols();
                let mut ga = vec![T::zero(); r * c];
                for i in 0..r {
                    ga[i * c + start..i * c + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                accumulate(adj, *a, full.shape(), ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    if wants(p) {
                        let piece = g.data()[offset..offset + len].to_vec();
                        accumulate(adj, p, val(p).shape(), piece);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let total = g.cols();
                let mut col = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let mut piece = Vec::with_capacity(r * w);
                        for i in 0..r {
                            piece.extend_from_slice(&g.data()[i * total + col..i * total + col + w]);
                        }
                        accumulate(adj, p, val(p).shape(), piece);
                    }
                    col += w;
                }
            }
            Op::GatherRows(a, index) => {
                let full = val(*a);
                let c = full.cols();
                let mut ga = vec![T::zero(); full.len()];
                for (row, idx) in index.iter().enumerate() {
                    if let Some(src) = idx {
                        for j in 0..c {
                            ga[src * c + j] += g.data()[row * c + j];
                        }
                    }
                }
                accumulate(adj, *a, full.shape(), ga);
            }
            Op::ScatterRows(a, index) => {
                let c = g.cols();
                let mut ga = Vec::with_capacity(index.len() * c);
                for &dst in index.iter() {
                    ga.extend_from_slice(&g.data()[dst * c..(dst + 1) * c]);
                }
                accumulate(adj, *a, val(*a).shape(), ga);
            }
            Op::Reshape(a) => {
                accumulate(adj, *a, val(*a).shape(), g.data().to_vec());
            }
            Op::SumAll(a) => {
                let s = g.data()[0];
                accumulate_array(adj, *a, DenseArray::full(val(*a).shape(), s));
            }
            Op::Element(a, idx) => {
                let mut ga = vec![T::zero(); val(*a).len()];
                ga[*idx] = g.data()[0];
                accumulate(adj, *a, val(*a).shape(), ga);
            }
        }
        Ok(())
    }
}

fn rotate<T: Real>(data: &mut [T], table: &RotaryTable<T>, inverse: bool) {
    let c = 2 * table.pairs;
    for (r, row) in data.chunks_mut(c).enumerate() {
        for p in 0..table.pairs {
            let cos = table.cos[r * table.pairs + p];
            let sin = if inverse {
                -table.sin[r * table.pairs + p]
            } else {
                table.sin[r * table.pairs + p]
            };
            let x0 = row[2 * p];
            let x1 = row[2 * p + 1];
            row[2 * p] = x0 * cos - x1 * sin;
            row[2 * p + 1] = x0 * sin + x1 * cos;
        }
    }
}

fn accumulate<T: Real>(adj: &mut [Option<DenseArray<T>>], v: Var, shape: &[usize], data: Vec<T>) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(data) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(DenseArray::new(shape.to_vec(), data).expect("adjoint shape"));
        }
    }
}

fn accumulate_array<T: Real>(adj: &mut [Option<DenseArray<T>>], v: Var, g: DenseArray<T>) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Computes gradients of `loss` for every trainable entry of `params`.
/// Frozen entries are absent from the result; trainable entries that never
/// reached the tape get a zero gradient and a diagnostic line.
pub fn grad<T: Real>(graph: &Graph<T>, loss: Var, params: &ParamStore<T>) -> Result<Gradients<T>> {
    grad_many(graph, loss, &[params])
}

/// [`grad`] over several disjoint stores, in store order.
pub fn grad_many<T: Real>(
    graph: &Graph<T>,
    loss: Var,
    stores: &[&ParamStore<T>],
) -> Result<Gradients<T>> {
    let mut grads = graph.backward(loss)?;
    let mut ordered = IndexMap::new();
    for (name, p) in stores.iter().flat_map(|s| s.iter()) {
        if p.frozen {
            continue;
        }
        match grads.by_name.swap_remove(name) {
            Some(g) => {
                ordered.insert(name.to_string(), g);
            }
            None => {
                grads
                    .diagnostics
                    .push(format!("parameter `{name}` not on tape; gradient set to zero"));
                ordered.insert(name.to_string(), DenseArray::zeros(p.value.shape()));
            }
        }
    }
    if !grads.by_name.is_empty() {
        let extra: Vec<_> = grads.by_name.keys().cloned().collect();
        return Err(Error::InvalidArgument(format!(
            "tape holds parameters outside the store: {extra:?}"
        )));
    }
    grads.by_name = ordered;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, DenseArray<f64>, bool)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, v, f) in entries {
            s.insert(*n, v.clone(), *f).unwrap();
        }
        s
    }

    #[test]
    fn linear_map_gradient_is_input_broadcast() {
        // loss = sum(x · W) with x a fixed 1×2 row → dW[i][j] = x[i]
        let w = DenseArray::from_rows(&[&[0.5, -1.0, 2.0], &[3.0, 0.0, 1.0]]);
        let params = store(&[("w", w, false)]);
        let mut g = Graph::new();
        let x = g.constant(DenseArray::from_rows(&[&[2.0, -3.0]]));
        let wv = g.param(&params, "w").unwrap();
        let y = g.matmul(x, wv).unwrap();
        let loss = g.sum_all(y);
        let grads = grad(&g, loss, &params).unwrap();
        let want = DenseArray::from_rows(&[&[2.0, 2.0, 2.0], &[-3.0, -3.0, -3.0]]);
        assert_eq!(grads.get("w").unwrap(), &want);
    }

    #[test]
    fn squared_norm_gradient_matches_hand_chain_rule() {
        // Row-batch form of z = W x: z = x·W with W stored (in×out), so the
        // hand result 2 z xᵀ reads dW = 2 xᵀ z.
        let w = DenseArray::from_rows(&[&[1.0, 2.0], &[0.5, -1.0]]);
        let xv = DenseArray::from_rows(&[&[3.0, -2.0]]);
        let z = xv.matmul(&w).unwrap();
        let want = xv.transpose().unwrap().matmul(&z).unwrap().scale(2.0);
        let params = store(&[("w", w, false)]);
        let mut g = Graph::new();
        let x = g.constant(xv);
        let wv = g.param(&params, "w").unwrap();
        let zv = g.matmul(x, wv).unwrap();
        let sq = g.mul(zv, zv).unwrap();
        let loss = g.sum_all(sq);
        let grads = grad(&g, loss, &params).unwrap();
        assert!(grads.get("w").unwrap().max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn frozen_absent_and_untouched_flagged() {
        let params = store(&[
            ("a", DenseArray::from_rows(&[&[1.0]]), true),
            ("b", DenseArray::from_rows(&[&[2.0]]), false),
            ("unused", DenseArray::from_rows(&[&[4.0]]), false),
        ]);
        let mut g = Graph::new();
        let a = g.param(&params, "a").unwrap();
        let b = g.param(&params, "b").unwrap();
        let y = g.mul(a, b).unwrap();
        let loss = g.sum_all(y);
        let grads = grad(&g, loss, &params).unwrap();
        assert!(grads.get("a").is_none());
        assert_eq!(grads.get("b").unwrap().data(), &[1.0]);
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0]);
        assert_eq!(grads.diagnostics.len(), 1);
        assert!(grads.diagnostics[0].contains("unused"));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(DenseArray::zeros(&[2, 2]));
        assert!(g.backward(x).is_err());
    }
}
