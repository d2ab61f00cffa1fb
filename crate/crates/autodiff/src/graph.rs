//! Operation tape and reverse-mode sweep.
//!
//! A [`Graph`] records every forward op in creation order, so creation order
//! is already a topological order and `backward` is a single reverse scan.
//! Nodes that do not depend on any parameter or tracked input are flagged
//! untracked and skipped by the sweep.

use std::collections::HashMap;

use crate::error::{AutodiffError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Transpose(usize),
    Concat { parts: Vec<usize>, axis: Axis },
    Slice { src: usize, axis: Axis, start: usize },
    Softmax(usize),
    LayerNorm {
        src: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(usize),
    Sin(usize),
    MaskedMean { src: usize, weights: Vec<f64> },
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// A single-threaded differentiation tape bound to an optional parameter store.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph without parameters; only constants and inputs.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
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

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Whether gradients can flow from `v` back to a parameter or input.
    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFiniteResult { op: name });
        }
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, parts: &[usize]) -> bool {
        parts.iter().any(|&p| self.nodes[p].tracked)
    }

    /// Untracked leaf: no gradient is ever computed for it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, false, "constant")
    }

    /// Tracked leaf outside the parameter store; its gradient is reported
    /// through [`Gradients::input`].
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Input, true, "input")
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.param_vars.get(&id) {
            return Ok(*v);
        }
        let store = self
            .store
            .ok_or_else(|| AutodiffError::UnknownParameter(format!("#{}", id.0)))?;
        if id.0 >= store.len() {
            return Err(AutodiffError::UnknownParameter(format!("#{}", id.0)));
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true, "param")?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    fn mismatch(op: &'static str, a: [usize; 2], b: [usize; 2]) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            left: a,
            right: b,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ([m, k], [k2, n]) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Self::mismatch("matmul", [m, k], [k2, n]));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = self.tracked(&[a.0, b.0]);
        self.push(Tensor::new(m, n, out)?, Op::MatMul(a.0, b.0), t, "matmul")
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ([m, k], [n, k2]) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Self::mismatch("matmul_nt", [m, k], [n, k2]));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = self.tracked(&[a.0, b.0]);
        self.push(Tensor::new(m, n, out)?, Op::MatMulNt(a.0, b.0), t, "matmul_nt")
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Self::mismatch(name, sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = self.tracked(&[a.0, b.0]);
        self.push(Tensor::new(sa[0], sa[1], data)?, op, t, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let [r, c] = self.shape(a);
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let t = self.tracked(&[a.0]);
        self.push(Tensor::new(r, c, data)?, Op::Scale(a.0, s), t, "scale")
    }

    /// Adds a `1 x C` row to every row of an `R x C` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ([r, c], sr) = (self.shape(a), self.shape(row));
        if sr != [1, c] {
            return Err(Self::mismatch("add_row", [r, c], sr));
        }
        let rv = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(c.max(1)) {
            for (d, b) in chunk.iter_mut().zip(&rv) {
                *d += b;
            }
        }
        let t = self.tracked(&[a.0, row.0]);
        self.push(Tensor::new(r, c, data)?, Op::AddRow(a.0, row.0), t, "add_row")
    }

    /// Multiplies row `i` of an `R x C` tensor by entry `i` of an `R x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let ([r, c], sc) = (self.shape(a), self.shape(col));
        if sc != [r, 1] {
            return Err(Self::mismatch("mul_col", [r, c], sc));
        }
        let cv = self.value(col).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for (i, chunk) in data.chunks_mut(c.max(1)).enumerate() {
            for d in chunk.iter_mut() {
                *d *= cv[i];
            }
        }
        let t = self.tracked(&[a.0, col.0]);
        self.push(Tensor::new(r, c, data)?, Op::MulCol(a.0, col.0), t, "mul_col")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transposed();
        let t = self.tracked(&[a.0]);
        self.push(v, Op::Transpose(a.0), t, "transpose")
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::InvalidArgument("concat of zero tensors".into()))?;
        let [r0, c0] = self.shape(*first);
        let out = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let s = self.shape(*p);
                    if s[1] != c0 {
                        return Err(Self::mismatch("concat", [r0, c0], s));
                    }
                    rows += s[0];
                    data.extend_from_slice(self.value(*p).data());
                }
                Tensor::new(rows, c0, data)?
            }
            Axis::Cols => {
                let mut cols = 0;
                for p in parts {
                    let s = self.shape(*p);
                    if s[0] != r0 {
                        return Err(Self::mismatch("concat", [r0, c0], s));
                    }
                    cols += s[1];
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for r in 0..r0 {
                    for p in parts {
                        data.extend_from_slice(self.value(*p).row_slice(r));
                    }
                }
                Tensor::new(r0, cols, data)?
            }
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let t = self.tracked(&ids);
        self.push(out, Op::Concat { parts: ids, axis }, t, "concat")
    }

    /// `len` consecutive rows or columns starting at `start`.
    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        let limit = if axis == Axis::Rows { r } else { c };
        if start + len > limit || len == 0 {
            return Err(AutodiffError::InvalidArgument(format!(
                "slice {start}..{} out of range for extent {limit}",
                start + len
            )));
        }
        let src = self.value(a);
        let out = match axis {
            Axis::Rows => Tensor::new(len, c, src.data()[start * c..(start + len) * c].to_vec())?,
            Axis::Cols => {
                let mut data = Vec::with_capacity(r * len);
                for row in 0..r {
                    data.extend_from_slice(&src.row_slice(row)[start..start + len]);
                }
                Tensor::new(r, len, data)?
            }
        };
        let t = self.tracked(&[a.0]);
        self.push(
            out,
            Op::Slice {
                src: a.0,
                axis,
                start,
            },
            t,
            "slice",
        )
    }

    /// Softmax over each row. With `key_mask`, columns flagged `false` get
    /// probability exactly zero and are left out of the normalizer.
    pub fn softmax_rows(&mut self, a: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let [r, c] = self.shape(a);
        if let Some(mask) = key_mask {
            if mask.len() != c {
                return Err(Self::mismatch("softmax_rows", [r, c], [1, mask.len()]));
            }
            if !mask.iter().any(|&m| m) {
                return Err(AutodiffError::EmptyMask);
            }
        }
        let valid = |j: usize| key_mask.is_none_or(|m| m[j]);
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = src.row_slice(i);
            let max = (0..c)
                .filter(|&j| valid(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in (0..c).filter(|&j| valid(j)) {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                total += e;
            }
            for j in (0..c).filter(|&j| valid(j)) {
                out[i * c + j] /= total;
            }
        }
        let t = self.tracked(&[a.0]);
        self.push(Tensor::new(r, c, out)?, Op::Softmax(a.0), t, "softmax_rows")
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` (`1 x C`).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let [r, c] = self.shape(a);
        for p in [gamma, beta] {
            if self.shape(p) != [1, c] {
                return Err(Self::mismatch("layer_norm", [r, c], self.shape(p)));
            }
        }
        let src = self.value(a);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = src.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
        }
        let t = self.tracked(&[a.0, gamma.0, beta.0]);
        self.push(
            Tensor::new(r, c, out)?,
            Op::LayerNorm {
                src: a.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            t,
            "layer_norm",
        )
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        let [r, c] = self.shape(a);
        let data = self.value(a).data().iter().map(|x| f(*x)).collect();
        let t = self.tracked(&[a.0]);
        self.push(Tensor::new(r, c, data)?, op, t, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a.0), "relu")
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.map(a, f64::sin, Op::Sin(a.0), "sin")
    }

    /// Mean of the rows whose mask entry is non-zero: `sum_r m_r a[r] / sum_r m_r`.
    pub fn masked_mean_rows(&mut self, a: Var, mask: &[f64]) -> Result<Var> {
        let [r, c] = self.shape(a);
        if mask.len() != r {
            return Err(Self::mismatch("masked_mean_rows", [r, c], [mask.len(), 1]));
        }
        let total: f64 = mask.iter().sum();
        if total == 0.0 {
            return Err(AutodiffError::EmptyMask);
        }
        let weights: Vec<f64> = mask.iter().map(|m| m / total).collect();
        let src = self.value(a);
        let mut out = vec![0.0; c];
        for (i, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            for (o, x) in out.iter_mut().zip(src.row_slice(i)) {
                *o += w * x;
            }
        }
        let t = self.tracked(&[a.0]);
        self.push(
            Tensor::row(out),
            Op::MaskedMean { src: a.0, weights },
            t,
            "masked_mean_rows",
        )
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let t = self.tracked(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum(a.0), t, "sum")
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(AutodiffError::NotScalar(shape));
        }
        if !self.nodes[loss.0].tracked {
            return Err(AutodiffError::DisconnectedGraph);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let [r, c] = node.value.shape();
            match &node.op {
                Op::Constant => {}
                Op::Input => {
                    out.inputs.insert(i, Tensor::new(r, c, g)?);
                }
                Op::Param(id) => {
                    out.params.insert(*id, Tensor::new(r, c, g)?);
                }
                Op::MatMul(a, b) => {
                    let [m, k] = self.nodes[*a].value.shape();
                    let n = c;
                    if self.nodes[*a].tracked {
                        let bv = self.nodes[*b].value.data();
                        gemm_nt(&g, bv, self.slot(&mut grads, *a), m, n, k);
                    }
                    if self.nodes[*b].tracked {
                        let av = self.nodes[*a].value.data();
                        gemm_tn(av, &g, self.slot(&mut grads, *b), m, k, n);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let [m, k] = self.nodes[*a].value.shape();
                    let n = c;
                    if self.nodes[*a].tracked {
                        let bv = self.nodes[*b].value.data();
                        gemm_nn(&g, bv, self.slot(&mut grads, *a), m, n, k);
                    }
                    if self.nodes[*b].tracked {
                        let av = self.nodes[*a].value.data();
                        gemm_tn(&g, av, self.slot(&mut grads, *b), m, n, k);
                    }
                }
                Op::Add(a, b) => {
                    self.acc_scaled(&mut grads, *a, &g, 1.0);
                    self.acc_scaled(&mut grads, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    self.acc_scaled(&mut grads, *a, &g, 1.0);
                    self.acc_scaled(&mut grads, *b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    for (src, other) in [(*a, *b), (*b, *a)] {
                        if self.nodes[src].tracked {
                            let ov = self.nodes[other].value.data();
                            let dst = self.slot(&mut grads, src);
                            for ((d, gv), o) in dst.iter_mut().zip(&g).zip(ov) {
                                *d += gv * o;
                            }
                        }
                    }
                }
                Op::Scale(a, s) => self.acc_scaled(&mut grads, *a, &g, *s),
                Op::AddRow(a, row) => {
                    self.acc_scaled(&mut grads, *a, &g, 1.0);
                    if self.nodes[*row].tracked {
                        let dst = self.slot(&mut grads, *row);
                        for chunk in g.chunks(c.max(1)) {
                            for (d, gv) in dst.iter_mut().zip(chunk) {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::MulCol(a, col) => {
                    if self.nodes[*a].tracked {
                        let cv = self.nodes[*col].value.data();
                        let dst = self.slot(&mut grads, *a);
                        for (k, (d, gv)) in dst.iter_mut().zip(&g).enumerate() {
                            *d += gv * cv[k / c];
                        }
                    }
                    if self.nodes[*col].tracked {
                        let av = self.nodes[*a].value.data();
                        let dst = self.slot(&mut grads, *col);
                        for row in 0..r {
                            let mut acc = 0.0;
                            for j in 0..c {
                                acc += g[row * c + j] * av[row * c + j];
                            }
                            dst[row] += acc;
                        }
                    }
                }
                Op::Transpose(a) => {
                    if self.nodes[*a].tracked {
                        let gt = Tensor::new(r, c, g)?.transposed();
                        self.acc_scaled(&mut grads, *a, gt.data(), 1.0);
                    }
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0;
                    for p in parts {
                        let [pr, pc] = self.nodes[*p].value.shape();
                        if self.nodes[*p].tracked {
                            let dst = self.slot(&mut grads, *p);
                            match axis {
                                Axis::Rows => {
                                    for (d, gv) in dst.iter_mut().zip(&g[offset * c..]) {
                                        *d += gv;
                                    }
                                }
                                Axis::Cols => {
                                    for row in 0..pr {
                                        let src = &g[row * c + offset..row * c + offset + pc];
                                        for (d, gv) in dst[row * pc..(row + 1) * pc].iter_mut().zip(src) {
                                            *d += gv;
                                        }
                                    }
                                }
                            }
                        }
                        offset += if *axis == Axis::Rows { pr } else { pc };
                    }
                }
                Op::Slice { src, axis, start } => {
                    if self.nodes[*src].tracked {
                        let sc = self.nodes[*src].value.cols();
                        let dst = self.slot(&mut grads, *src);
                        match axis {
                            Axis::Rows => {
                                for (d, gv) in dst[start * sc..].iter_mut().zip(&g) {
                                    *d += gv;
                                }
                            }
                            Axis::Cols => {
                                for row in 0..r {
                                    for j in 0..c {
                                        dst[row * sc + start + j] += g[row * c + j];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    if self.nodes[*a].tracked {
                        let y = node.value.data();
                        let dst = self.slot(&mut grads, *a);
                        for row in 0..r {
                            let ys = &y[row * c..(row + 1) * c];
                            let gs = &g[row * c..(row + 1) * c];
                            let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                            for j in 0..c {
                                dst[row * c + j] += ys[j] * (gs[j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    src,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    if self.nodes[*gamma].tracked {
                        let dst = self.slot(&mut grads, *gamma);
                        for row in 0..r {
                            for j in 0..c {
                                dst[j] += g[row * c + j] * xhat[row * c + j];
                            }
                        }
                    }
                    if self.nodes[*beta].tracked {
                        let dst = self.slot(&mut grads, *beta);
                        for row in 0..r {
                            for j in 0..c {
                                dst[j] += g[row * c + j];
                            }
                        }
                    }
                    if self.nodes[*src].tracked {
                        let gm = self.nodes[*gamma].value.data();
                        let dst = self.slot(&mut grads, *src);
                        let inv_c = 1.0 / c as f64;
                        let mut dxhat = vec![0.0; c];
                        for row in 0..r {
                            let xh = &xhat[row * c..(row + 1) * c];
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..c {
                                dxhat[j] = g[row * c + j] * gm[j];
                                m1 += dxhat[j];
                                m2 += dxhat[j] * xh[j];
                            }
                            m1 *= inv_c;
                            m2 *= inv_c;
                            for j in 0..c {
                                dst[row * c + j] += rstd[row] * (dxhat[j] - m1 - xh[j] * m2);
                            }
                        }
                    }
                }
                Op::Relu(a) => {
                    if self.nodes[*a].tracked {
                        let x = self.nodes[*a].value.data();
                        let dst = self.slot(&mut grads, *a);
                        for ((d, gv), xv) in dst.iter_mut().zip(&g).zip(x) {
                            if *xv > 0.0 {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Sin(a) => {
                    if self.nodes[*a].tracked {
                        let x = self.nodes[*a].value.data();
                        let dst = self.slot(&mut grads, *a);
                        for ((d, gv), xv) in dst.iter_mut().zip(&g).zip(x) {
                            *d += gv * xv.cos();
                        }
                    }
                }
                Op::MaskedMean { src, weights } => {
                    if self.nodes[*src].tracked {
                        let sc = self.nodes[*src].value.cols();
                        let dst = self.slot(&mut grads, *src);
                        for (row, w) in weights.iter().enumerate() {
                            if *w == 0.0 {
                                continue;
                            }
                            for j in 0..sc {
                                dst[row * sc + j] += w * g[j];
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if self.nodes[*a].tracked {
                        let dst = self.slot(&mut grads, *a);
                        for d in dst.iter_mut() {
                            *d += g[0];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], idx: usize) -> &'g mut Vec<f64> {
        let len = self.nodes[idx].value.len();
        grads[idx].get_or_insert_with(|| vec![0.0; len])
    }

    fn acc_scaled(&self, grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64], s: f64) {
        if !self.nodes[idx].tracked {
            return;
        }
        let dst = self.slot(grads, idx);
        for (d, gv) in dst.iter_mut().zip(g) {
            *d += s * gv;
        }
    }
}
