//! Reverse-mode gradient tape over the small op set the models use.
//!
//! Every op records its inputs (and any forward cache) when the tape is recording.
//! An inference tape skips all bookkeeping and only computes values.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::real::Real;
use crate::tensor::{Param, ParamId, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<R> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Modulate { x: Var, shift: Var, scale: Var },
    Scale(Var, R),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<R>, rstd: Vec<R> },
    Attention { qkv: Var, heads: usize, probs: Vec<R> },
    Mask(Var, Vec<R>),
    Slice { x: Var, start: usize },
    GatherRow { table: Var, row: usize },
    Mse(Var, Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node<R> {
    shape: Vec<usize>,
    value: Vec<R>,
    op: Op<R>,
    needs_grad: bool,
}

/// Recorded computation graph; one tape per forward pass.
#[derive(Debug)]
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
    recording: bool,
    params: BTreeMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`] for every leaf that required them.
#[derive(Debug, Clone)]
pub struct Gradients<R> {
    by_var: BTreeMap<Var, Vec<R>>,
    by_param: BTreeMap<ParamId, Var>,
}

impl<R: Real> Gradients<R> {
    pub fn var(&self, v: Var) -> Option<&[R]> {
        self.by_var.get(&v).map(|g| g.as_slice())
    }

    pub fn param(&self, id: ParamId) -> Option<&[R]> {
        self.by_param.get(&id).and_then(|v| self.var(*v))
    }

    /// Gradients keyed by parameter identity only.
    pub fn into_param_map(mut self) -> BTreeMap<ParamId, Vec<R>> {
        let mut out = BTreeMap::new();
        for (id, v) in self.by_param {
            if let Some(g) = self.by_var.remove(&v) {
                out.insert(id, g);
            }
        }
        out
    }
}

fn row_split(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let n: usize = shape.iter().product();
    (n / cols.max(1), cols)
}

fn slot<R: Real>(grads: &mut [Option<Vec<R>>], v: Var, len: usize) -> &mut Vec<R> {
    grads[v.0].get_or_insert_with(|| vec![R::zero(); len])
}

fn gelu_parts<R: Real>(x: R) -> (R, R) {
    let k = R::lit(0.797_884_560_802_865_4);
    let c = R::lit(0.044_715);
    let half = R::lit(0.5);
    let u = k * (x + c * x * x * x);
    let th = u.fast_tanh();
    let y = half * x * (R::one() + th);
    let dy = half * (R::one() + th) + half * x * (R::one() - th * th) * k * (R::one() + R::lit(3.0) * c * x * x);
    (y, dy)
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    /// A tape that records operations for a later backward pass.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            params: BTreeMap::new(),
        }
    }

    /// A tape that only evaluates values.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<R>, op: Op<R>, inputs: &[Var]) -> Var {
        let needs_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, t: &Tensor<R>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: needs_grad && self.recording,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (or a differentiable input when `t.requires_grad`).
    pub fn input(&mut self, t: &Tensor<R>) -> Var {
        self.leaf(t, t.requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor<R>) -> Var {
        self.leaf(t, false)
    }

    /// Records a parameter; repeated calls return the same handle.
    pub fn param(&mut self, p: &Param<R>) -> Var {
        if let Some(v) = self.params.get(&p.id()) {
            return *v;
        }
        let v = self.leaf(&p.value, p.value.requires_grad);
        self.params.insert(p.id(), v);
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[R] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<R> {
        let n = &self.nodes[v.0];
        Tensor::from_vec(&n.shape, n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    pub fn scalar(&self, v: Var) -> R {
        self.nodes[v.0].value[0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        row_split(&self.nodes[v.0].shape)
    }

    /// `x[.., k] · w[k, m]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, k) = self.dims(x);
        let ws = self.shape(w);
        if ws.len() != 2 || ws[0] != k {
            return Err(dim_err("matmul", self.shape(x), ws));
        }
        let m = ws[1];
        let mut out = vec![R::zero(); n * m];
        R::gemm(
            n,
            k,
            m,
            (self.value(x), k as isize, 1),
            (self.value(w), m as isize, 1),
            R::zero(),
            (&mut out, m as isize, 1),
        );
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = m;
        Ok(self.push(shape, out, Op::MatMul(x, w), &[x, w]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    fn check_row(&self, op: &'static str, x: Var, r: Var) -> Result<usize> {
        let (_, cols) = self.dims(x);
        if self.value(r).len() != cols {
            return Err(dim_err(op, self.shape(x), self.shape(r)));
        }
        Ok(cols)
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let cols = self.check_row("add_row", x, b)?;
        let bv = self.value(b);
        let out = self.value(x).iter().enumerate().map(|(i, &v)| v + bv[i % cols]).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, b), &[x, b]))
    }

    /// Multiplies every row of `x` elementwise by a row vector.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let cols = self.check_row("mul_row", x, s)?;
        let sv = self.value(s);
        let out = self.value(x).iter().enumerate().map(|(i, &v)| v * sv[i % cols]).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulRow(x, s), &[x, s]))
    }

    /// `x * (1 + scale) + shift`, row-broadcast.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let cols = self.check_row("modulate", x, shift)?;
        self.check_row("modulate", x, scale)?;
        let (sh, sc) = (self.value(shift), self.value(scale));
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * (R::one() + sc[i % cols]) + sh[i % cols])
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Modulate { x, shift, scale }, &[x, shift, scale]))
    }

    pub fn scale(&mut self, x: Var, s: R) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(R::zero())).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu_parts(v).0).collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), &[x])
    }

    /// Per-row normalization to zero mean and unit variance, then `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: R) -> Result<Var> {
        let (rows, d) = self.dims(x);
        if d == 0 {
            return Err(Error::EmptyDimension("layer_norm"));
        }
        self.check_row("layer_norm", x, gain)?;
        self.check_row("layer_norm", x, bias)?;
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let dn = R::from_usize(d).unwrap();
        let mut out = vec![R::zero(); rows * d];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<R>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / dn;
            let rstd = R::one() / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            mean: means,
            rstd: rstds,
        };
        Ok(self.push(self.shape(x).to_vec(), out, op, &[x, gain, bias]))
    }

    /// Multi-head softmax self-attention over rows, given packed `[q | k | v]` columns.
    /// No mask is applied.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let (n, c3) = self.dims(qkv);
        if c3 % 3 != 0 {
            return Err(Error::Config(alloc::format!("packed qkv width {c3} is not a multiple of 3")));
        }
        let h = c3 / 3;
        if heads == 0 || h % heads != 0 {
            return Err(Error::Config(alloc::format!(
                "width {h} is not divisible by {heads} heads"
            )));
        }
        let d = h / heads;
        let scale = R::one() / R::from_usize(d).unwrap().sqrt();
        let src = self.value(qkv);
        let mut out = vec![R::zero(); n * h];
        let mut probs = vec![R::zero(); heads * n * n];
        for hd in 0..heads {
            let p = &mut probs[hd * n * n..(hd + 1) * n * n];
            R::gemm(
                n,
                d,
                n,
                (&src[hd * d..], c3 as isize, 1),
                (&src[h + hd * d..], 1, c3 as isize),
                R::zero(),
                (p, n as isize, 1),
            );
            for r in 0..n {
                let row = &mut p[r * n..(r + 1) * n];
                let mx = row.iter().fold(R::neg_infinity(), |a, &b| a.max(b * scale));
                let mut z = R::zero();
                for v in row.iter_mut() {
                    *v = (*v * scale - mx).fast_exp();
                    z = z + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / z;
                }
            }
            R::gemm(
                n,
                n,
                d,
                (p, n as isize, 1),
                (&src[2 * h + hd * d..], c3 as isize, 1),
                R::zero(),
                (&mut out[hd * d..], h as isize, 1),
            );
        }
        let mut shape = self.shape(qkv).to_vec();
        *shape.last_mut().unwrap() = h;
        Ok(self.push(shape, out, Op::Attention { qkv, heads, probs }, &[qkv]))
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<R>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(dim_err("mask", self.shape(x), &[mask.len()]));
        }
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Mask(x, mask), &[x]))
    }

    /// Columns `start..start + len` of the trailing axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if start + len > cols || len == 0 {
            return Err(dim_err("slice_cols", self.shape(x), &[start, len]));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(shape, out, Op::Slice { x, start }, &[x]))
    }

    /// Row `row` of a 2-D table, as a `[1, cols]` value.
    pub fn gather_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let (rows, cols) = self.dims(table);
        if row >= rows {
            return Err(Error::Index {
                what: "gather_row",
                index: row,
                len: rows,
            });
        }
        let out = self.value(table)[row * cols..(row + 1) * cols].to_vec();
        Ok(self.push(vec![1, cols], out, Op::GatherRow { table, row }, &[table]))
    }

    /// Mean squared difference, as a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(dim_err("mse", self.shape(pred), self.shape(target)));
        }
        let n = R::from_usize(self.value(pred).len()).unwrap();
        let s = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<R>()
            / n;
        Ok(self.push(vec![1], vec![s], Op::Mse(pred, target), &[pred, target]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.recording {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::one()]);
        let mut by_var = BTreeMap::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                by_var.insert(Var(i), g);
                continue;
            }
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients {
            by_var,
            by_param: self.params.iter().map(|(k, v)| (*k, *v)).collect(),
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, node: &Node<R>, g: &[R], grads: &mut [Option<Vec<R>>]) {
        macro_rules! gacc {
            ($v:expr) => {
                slot(grads, $v, self.nodes[$v.0].value.len())
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(x, w) => {
                let (n, k) = self.dims(*x);
                let m = self.shape(*w)[1];
                if self.needs(*x) {
                    let gx = gacc!(*x);
                    R::gemm(n, m, k, (g, m as isize, 1), (self.value(*w), 1, m as isize), R::one(), (gx, k as isize, 1));
                }
                if self.needs(*w) {
                    let gw = gacc!(*w);
                    R::gemm(k, n, m, (self.value(*x), 1, k as isize), (g, m as isize, 1), R::one(), (gw, m as isize, 1));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        let ga = gacc!(v);
                        for (o, &d) in ga.iter_mut().zip(g) {
                            *o = *o + d;
                        }
                    }
                }
            }
            Op::AddRow(x, b) => {
                if self.needs(*x) {
                    let gx = gacc!(*x);
                    for (o, &d) in gx.iter_mut().zip(g) {
                        *o = *o + d;
                    }
                }
                if self.needs(*b) {
                    let gb = gacc!(*b);
                    let cols = gb.len();
                    for (i, &d) in g.iter().enumerate() {
                        gb[i % cols] = gb[i % cols] + d;
                    }
                }
            }
            Op::MulRow(x, s) => {
                let cols = self.value(*s).len();
                if self.needs(*x) {
                    let sv = self.value(*s);
                    let gx = gacc!(*x);
                    for (i, o) in gx.iter_mut().enumerate() {
                        *o = *o + g[i] * sv[i % cols];
                    }
                }
                if self.needs(*s) {
                    let xv = self.value(*x);
                    let gs = gacc!(*s);
                    for (i, &d) in g.iter().enumerate() {
                        gs[i % cols] = gs[i % cols] + d * xv[i];
                    }
                }
            }
            Op::Modulate { x, shift, scale } => {
                let cols = self.value(*shift).len();
                if self.needs(*x) {
                    let sc = self.value(*scale);
                    let gx = gacc!(*x);
                    for (i, o) in gx.iter_mut().enumerate() {
                        *o = *o + g[i] * (R::one() + sc[i % cols]);
                    }
                }
                if self.needs(*shift) {
                    let gs = gacc!(*shift);
                    for (i, &d) in g.iter().enumerate() {
                        gs[i % cols] = gs[i % cols] + d;
                    }
                }
                if self.needs(*scale) {
                    let xv = self.value(*x);
                    let gs = gacc!(*scale);
                    for (i, &d) in g.iter().enumerate() {
                        gs[i % cols] = gs[i % cols] + d * xv[i];
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = gacc!(*x);
                for (o, &d) in gx.iter_mut().zip(g) {
                    *o = *o + d * *s;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx = gacc!(*x);
                for i in 0..gx.len() {
                    if xv[i] > R::zero() {
                        gx[i] = gx[i] + g[i];
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = gacc!(*x);
                for i in 0..gx.len() {
                    gx[i] = gx[i] + g[i] * gelu_parts(xv[i]).1;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let (rows, d) = self.dims(*x);
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let dn = R::from_usize(d).unwrap();
                let xhat = |r: usize, j: usize| (xv[r * d + j] - mean[r]) * rstd[r];
                if self.needs(*gain) {
                    let gg = gacc!(*gain);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + g[r * d + j] * xhat(r, j);
                        }
                    }
                }
                if self.needs(*bias) {
                    let gb = gacc!(*bias);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] = gb[j] + g[r * d + j];
                        }
                    }
                }
                if self.needs(*x) {
                    let gx = gacc!(*x);
                    for r in 0..rows {
                        let mut m1 = R::zero();
                        let mut m2 = R::zero();
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xhat(r, j);
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            gx[r * d + j] = gx[r * d + j] + rstd[r] * (dxh - m1 - xhat(r, j) * m2);
                        }
                    }
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let (n, c3) = self.dims(*qkv);
                let h = c3 / 3;
                let d = h / heads;
                let scale = R::one() / R::from_usize(d).unwrap().sqrt();
                let src = self.value(*qkv);
                let gq = gacc!(*qkv);
                let mut ds = vec![R::zero(); n * n];
                for hd in 0..*heads {
                    let p = &probs[hd * n * n..(hd + 1) * n * n];
                    // dP = dO · Vᵀ
                    R::gemm(
                        n,
                        d,
                        n,
                        (&g[hd * d..], h as isize, 1),
                        (&src[2 * h + hd * d..], 1, c3 as isize),
                        R::zero(),
                        (&mut ds, n as isize, 1),
                    );
                    for r in 0..n {
                        let pr = &p[r * n..(r + 1) * n];
                        let dr = &mut ds[r * n..(r + 1) * n];
                        let dot: R = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                        for (dv, &pv) in dr.iter_mut().zip(pr) {
                            *dv = pv * (*dv - dot) * scale;
                        }
                    }
                    // dQ += dS · K
                    R::gemm(
                        n,
                        n,
                        d,
                        (&ds, n as isize, 1),
                        (&src[h + hd * d..], c3 as isize, 1),
                        R::one(),
                        (&mut gq[hd * d..], c3 as isize, 1),
                    );
                    // dK += dSᵀ · Q
                    R::gemm(
                        n,
                        n,
                        d,
                        (&ds, 1, n as isize),
                        (&src[hd * d..], c3 as isize, 1),
                        R::one(),
                        (&mut gq[h + hd * d..], c3 as isize, 1),
                    );
                    // dV += Pᵀ · dO
                    R::gemm(
                        n,
                        n,
                        d,
                        (p, 1, n as isize),
                        (&g[hd * d..], h as isize, 1),
                        R::one(),
                        (&mut gq[2 * h + hd * d..], c3 as isize, 1),
                    );
                }
            }
            Op::Mask(x, mask) => {
                let gx = gacc!(*x);
                for i in 0..gx.len() {
                    gx[i] = gx[i] + g[i] * mask[i];
                }
            }
            Op::Slice { x, start } => {
                let (rows, cols) = self.dims(*x);
                let len = g.len() / rows;
                let gx = gacc!(*x);
                for r in 0..rows {
                    for j in 0..len {
                        gx[r * cols + start + j] = gx[r * cols + start + j] + g[r * len + j];
                    }
                }
            }
            Op::GatherRow { table, row } => {
                let cols = g.len();
                let gt = gacc!(*table);
                for j in 0..cols {
                    gt[row * cols + j] = gt[row * cols + j] + g[j];
                }
            }
            Op::Mse(p, t) => {
                let n = R::from_usize(self.value(*p).len()).unwrap();
                let k = R::lit(2.0) * g[0] / n;
                let (pv, tv) = (self.value(*p), self.value(*t));
                if self.needs(*p) {
                    let gp = gacc!(*p);
                    for i in 0..gp.len() {
                        gp[i] = gp[i] + k * (pv[i] - tv[i]);
                    }
                }
                if self.needs(*t) {
                    let gt = gacc!(*t);
                    for i in 0..gt.len() {
                        gt[i] = gt[i] - k * (pv[i] - tv[i]);
                    }
                }
            }
            Op::Sum(x) => {
                let gx = gacc!(*x);
                for o in gx.iter_mut() {
                    *o = *o + g[0];
                }
            }
        }
    }
}
