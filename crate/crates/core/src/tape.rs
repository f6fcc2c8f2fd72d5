//! Reverse-mode automatic differentiation over 2-D `f64` tensors.
//!
//! Every tensor on the tape is an `Array2<f64>`; row vectors are `[1 x n]`
//! and scalars are `[1 x 1]`. A `Tape` owns the nodes of one computation
//! graph, built forward by the op methods and differentiated by a single
//! reverse sweep in `backward`. Graphs are cheap and single-use: training
//! code builds one tape per sample.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// a[m,k] . b[k,n]
    MatMul(Var, Var),
    /// a[m,k] . b[n,k]^T
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        eps: f64,
    },
    SumAll(Var),
    MeanRows(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Var, Var),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    /// v[i, :] = table[ids[i], :]
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Pick {
        x: Var,
        row: usize,
        col: usize,
    },
    /// Mean over masked rows of (logsumexp(row) - row[target]).
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// One computation graph: values forward, gradients backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
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

    /// Differentiable input (parameters and anything trained through them).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input; backward never visits it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value with the gradient path severed.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `[1 x 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[[0, 0]]
    }

    /// Gradient accumulated by the last `backward` call (zeros if none).
    pub fn grad(&self, v: Var) -> Array2<f64> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Array2::zeros(self.nodes[v.0].value.dim()),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.value(a).dim();
        let (br, bc) = self.value(b).dim();
        assert_eq!(ac, br, "matmul: inner dims {ar}x{ac} . {br}x{bc}");
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a . b^T`, so weights can be stored `[out x in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.value(a).dim();
        let (br, bc) = self.value(b).dim();
        assert_eq!(ac, bc, "matmul_nt: inner dims {ar}x{ac} . ({br}x{bc})^T");
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulNT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub: shape");
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul: shape");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "div: shape");
        let value = self.value(a) / self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let rg = self.rg(a);
        self.push(value, Op::AddConst(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        let rg = self.rg(a);
        self.push(value, Op::Sqrt(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise RMS normalization with a learned per-column gain `[1 x n]`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let gv = self.value(gain);
        assert_eq!(gv.nrows(), 1, "rms_norm: gain must be a row vector");
        assert_eq!(gv.ncols(), xv.ncols(), "rms_norm: gain width");
        let n = xv.ncols() as f64;
        let mut value = xv.clone();
        for mut row in value.rows_mut() {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n;
            let r = (ms + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * gv[[0, j]] / r;
            }
        }
        let rg = self.rg(x) || self.rg(gain);
        self.push(value, Op::RmsNorm { x, gain, eps }, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    /// Column-wise mean over rows: `[m x n] -> [1 x n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a).nrows();
        assert!(m > 0, "mean_rows: empty input");
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let total = self.value(x).nrows();
        assert!(start + len <= total, "slice_rows: {start}+{len} > {total}");
        let value = self.value(x).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(x);
        self.push(value, Op::SliceRows { x, start }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let total = self.value(x).ncols();
        assert!(start + len <= total, "slice_cols: {start}+{len} > {total}");
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(x);
        self.push(value, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).ncols(), self.value(b).ncols(), "concat_rows");
        let value = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("checked widths");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatRows(a, b), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("same row counts");
        let rg = parts.iter().any(|v| self.rg(*v));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let (m, n) = self.value(x).dim();
        assert_eq!(m * n, rows * cols, "reshape: element count");
        let flat: Vec<f64> = self.value(x).iter().cloned().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("checked count");
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Row lookup: out[i, :] = table[ids[i], :].
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let rows = t.nrows();
        for &id in ids {
            assert!(id < rows, "gather: id {id} out of {rows}");
        }
        let mut value = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).assign(&t.row(id));
        }
        let rg = self.rg(table);
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn pick(&mut self, x: Var, row: usize, col: usize) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x)[[row, col]]);
        let rg = self.rg(x);
        self.push(value, Op::Pick { x, row, col }, rg)
    }

    /// Mean next-token cross-entropy over the rows where `mask` is true.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = lv.dim();
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::shape(format!(
                "cross_entropy_rows: {rows} logit rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::invalid("cross_entropy_rows: empty mask"));
        }
        let mut total = 0.0;
        for t in 0..rows {
            if !mask[t] {
                continue;
            }
            if targets[t] >= cols {
                return Err(Error::TokenOutOfRange {
                    id: targets[t],
                    vocab_size: cols,
                });
            }
            let row = lv.row(t);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[t]];
        }
        let value = Array2::from_elem((1, 1), total / count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node; gradients readable via `grad`.
    pub fn backward(&mut self, loss: Var) {
        let n = self.nodes.len();
        assert_eq!(self.nodes[loss.0].value.dim(), (1, 1), "backward: loss must be scalar");
        self.grads = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return;
        }
        self.grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let (lower, upper) = self.grads.split_at_mut(i);
            let g = upper[0].as_ref().expect("checked above");
            let node = &self.nodes[i];
            let acc = |store: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>| {
                match &mut store[v.0] {
                    Some(existing) => *existing += &delta,
                    slot => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let da = g.dot(&self.nodes[b.0].value.t());
                        acc(lower, *a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = self.nodes[a.0].value.t().dot(g);
                        acc(lower, *b, db);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let da = g.dot(&self.nodes[b.0].value);
                        acc(lower, *a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = g.t().dot(&self.nodes[a.0].value);
                        acc(lower, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        acc(lower, *a, g.clone());
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(lower, *b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        acc(lower, *a, g.clone());
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(lower, *b, -g.clone());
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        acc(lower, *a, g * &self.nodes[b.0].value);
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(lower, *b, g * &self.nodes[a.0].value);
                    }
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[b.0].value;
                    if self.nodes[a.0].requires_grad {
                        acc(lower, *a, g / bv);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = -(g * &node.value) / bv;
                        acc(lower, *b, db);
                    }
                }
                Op::Scale(a, k) => {
                    if self.nodes[a.0].requires_grad {
                        acc(lower, *a, g * *k);
                    }
                }
                Op::AddConst(a) => {
                    if self.nodes[a.0].requires_grad {
                        acc(lower, *a, g.clone());
                    }
                }
                Op::Relu(a) => {
                    if self.nodes[a.0].requires_grad {
                        let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                        acc(lower, *a, g * &mask);
                    }
                }
                Op::Sqrt(a) => {
                    if self.nodes[a.0].requires_grad {
                        let da = g * &node.value.mapv(|y| 0.5 / y);
                        acc(lower, *a, da);
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.nodes[a.0].requires_grad {
                        let s = &node.value;
                        let mut da = Array2::zeros(s.dim());
                        for r in 0..s.nrows() {
                            let srow = s.row(r);
                            let grow = g.row(r);
                            let dot: f64 = srow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
                            for c in 0..s.ncols() {
                                da[[r, c]] = srow[c] * (grow[c] - dot);
                            }
                        }
                        acc(lower, *a, da);
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    if self.nodes[a.0].requires_grad {
                        let mut da = Array2::zeros(node.value.dim());
                        for r in 0..node.value.nrows() {
                            let gsum: f64 = g.row(r).iter().sum();
                            for c in 0..node.value.ncols() {
                                let s = node.value[[r, c]].exp();
                                da[[r, c]] = g[[r, c]] - s * gsum;
                            }
                        }
                        acc(lower, *a, da);
                    }
                }
                Op::RmsNorm { x, gain, eps } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gain.0].value;
                    let n = xv.ncols() as f64;
                    if self.nodes[x.0].requires_grad {
                        let mut dx = Array2::zeros(xv.dim());
                        for r in 0..xv.nrows() {
                            let row = xv.row(r);
                            let ms = row.iter().map(|v| v * v).sum::<f64>() / n;
                            let rms = (ms + eps).sqrt();
                            let s: f64 = (0..xv.ncols())
                                .map(|c| g[[r, c]] * gv[[0, c]] * row[c])
                                .sum();
                            for c in 0..xv.ncols() {
                                dx[[r, c]] =
                                    g[[r, c]] * gv[[0, c]] / rms - row[c] * s / (n * rms.powi(3));
                            }
                        }
                        acc(lower, *x, dx);
                    }
                    if self.nodes[gain.0].requires_grad {
                        let mut dg = Array2::zeros(gv.dim());
                        for r in 0..xv.nrows() {
                            let row = xv.row(r);
                            let ms = row.iter().map(|v| v * v).sum::<f64>() / n;
                            let rms = (ms + eps).sqrt();
                            for c in 0..xv.ncols() {
                                dg[[0, c]] += g[[r, c]] * row[c] / rms;
                            }
                        }
                        acc(lower, *gain, dg);
                    }
                }
                Op::SumAll(a) => {
                    if self.nodes[a.0].requires_grad {
                        let da = Array2::from_elem(self.nodes[a.0].value.dim(), g[[0, 0]]);
                        acc(lower, *a, da);
                    }
                }
                Op::MeanRows(a) => {
                    if self.nodes[a.0].requires_grad {
                        let m = self.nodes[a.0].value.nrows();
                        let mut da = Array2::zeros(self.nodes[a.0].value.dim());
                        for r in 0..m {
                            for c in 0..da.ncols() {
                                da[[r, c]] = g[[0, c]] / m as f64;
                            }
                        }
                        acc(lower, *a, da);
                    }
                }
                Op::SliceRows { x, start } => {
                    if self.nodes[x.0].requires_grad {
                        let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                        dx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                        acc(lower, *x, dx);
                    }
                }
                Op::SliceCols { x, start } => {
                    if self.nodes[x.0].requires_grad {
                        let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                        dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                        acc(lower, *x, dx);
                    }
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.nodes[a.0].value.nrows();
                    if self.nodes[a.0].requires_grad {
                        acc(lower, *a, g.slice(s![..ra, ..]).to_owned());
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(lower, *b, g.slice(s![ra.., ..]).to_owned());
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        if self.nodes[p.0].requires_grad {
                            acc(lower, *p, g.slice(s![.., offset..offset + w]).to_owned());
                        }
                        offset += w;
                    }
                }
                Op::Reshape(x) => {
                    if self.nodes[x.0].requires_grad {
                        let dim = self.nodes[x.0].value.dim();
                        let flat: Vec<f64> = g.iter().cloned().collect();
                        let dx = Array2::from_shape_vec(dim, flat).expect("same count");
                        acc(lower, *x, dx);
                    }
                }
                Op::Gather { table, ids } => {
                    if self.nodes[table.0].requires_grad {
                        let mut dt = Array2::zeros(self.nodes[table.0].value.dim());
                        for (i, &id) in ids.iter().enumerate() {
                            let mut row = dt.row_mut(id);
                            row += &g.row(i);
                        }
                        acc(lower, *table, dt);
                    }
                }
                Op::Pick { x, row, col } => {
                    if self.nodes[x.0].requires_grad {
                        let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                        dx[[*row, *col]] = g[[0, 0]];
                        acc(lower, *x, dx);
                    }
                }
                Op::CrossEntropyRows {
                    logits,
                    targets,
                    mask,
                } => {
                    if self.nodes[logits.0].requires_grad {
                        let lv = &self.nodes[logits.0].value;
                        let count = mask.iter().filter(|m| **m).count() as f64;
                        let scale = g[[0, 0]] / count;
                        let mut dl = Array2::zeros(lv.dim());
                        for t in 0..lv.nrows() {
                            if !mask[t] {
                                continue;
                            }
                            let row = lv.row(t);
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                            for c in 0..lv.ncols() {
                                let p = (row[c] - max).exp() / denom;
                                dl[[t, c]] = scale * (p - if c == targets[t] { 1.0 } else { 0.0 });
                            }
                        }
                        acc(lower, *logits, dl);
                    }
                }
            }
        }
    }
}

/// Row-wise stable softmax of a plain array.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise stable log-softmax of a plain array.
pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central-difference check of `tape.backward` for a scalar-valued graph
    /// built by `build` over a single leaf matrix.
    fn check_grad<F>(input: Array2<f64>, build: F, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let loss = build(&mut tape, x);
        tape.backward(loss);
        let analytic = tape.grad(x);

        let h = 1e-6;
        for r in 0..input.nrows() {
            for c in 0..input.ncols() {
                let mut plus = input.clone();
                plus[[r, c]] += h;
                let mut tp = Tape::new();
                let xp = tp.leaf(plus);
                let lp_var = build(&mut tp, xp);
                let lp = tp.scalar(lp_var);

                let mut minus = input.clone();
                minus[[r, c]] -= h;
                let mut tm = Tape::new();
                let xm = tm.leaf(minus);
                let lm_var = build(&mut tm, xm);
                let lm = tm.scalar(lm_var);

                let fd = (lp - lm) / (2.0 * h);
                let an = analytic[[r, c]];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    rel <= tol,
                    "grad mismatch at ({r},{c}): fd={fd} analytic={an} rel={rel}"
                );
            }
        }
    }

    #[test]
    fn matmul_forward_matches_hand_value() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = tape.leaf(array![[5.0, 6.0], [7.0, 8.0]]);
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c), &array![[19.0, 22.0], [43.0, 50.0]]);
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_matrix(&mut rng, 3, 4);
        check_grad(random_matrix(&mut rng, 2, 3), |t, x| {
            let wv = t.constant(w.clone());
            let y = t.matmul(x, wv);
            t.sum_all(y)
        }, 1e-5);
    }

    #[test]
    fn matmul_nt_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_matrix(&mut rng, 4, 3);
        check_grad(random_matrix(&mut rng, 2, 3), |t, x| {
            let wv = t.constant(w.clone());
            let y = t.matmul_nt(x, wv);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }, 1e-5);
    }

    #[test]
    fn matmul_nt_weight_side_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 2, 3);
        check_grad(random_matrix(&mut rng, 4, 3), |t, w| {
            let xv = t.constant(x.clone());
            let y = t.matmul_nt(xv, w);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }, 1e-5);
    }

    #[test]
    fn elementwise_chain_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = random_matrix(&mut rng, 3, 3).mapv(|v| v + 2.5);
        check_grad(random_matrix(&mut rng, 3, 3), |t, x| {
            let bv = t.constant(b.clone());
            let p = t.mul(x, bv);
            let q = t.div(p, bv);
            let r = t.sub(q, bv);
            let s = t.add(r, bv);
            let sc = t.scale(s, 0.7);
            let off = t.add_const(sc, 1.3);
            t.sum_all(off)
        }, 1e-5);
    }

    #[test]
    fn relu_and_sqrt_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shifted = random_matrix(&mut rng, 2, 5).mapv(|v| v + 3.0);
        check_grad(shifted, |t, x| {
            let r = t.relu(x);
            let sq = t.sqrt(r);
            t.sum_all(sq)
        }, 1e-5);
    }

    #[test]
    fn softmax_rows_sums_to_one_and_grads_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_matrix(&mut rng, 3, 5);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let s = tape.softmax_rows(xv);
        for row in tape.value(s).rows() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let w = random_matrix(&mut rng, 3, 5);
        check_grad(x, |t, x| {
            let s = t.softmax_rows(x);
            let wv = t.constant(w.clone());
            let p = t.mul(s, wv);
            t.sum_all(p)
        }, 1e-5);
    }

    #[test]
    fn log_softmax_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random_matrix(&mut rng, 2, 6);
        check_grad(random_matrix(&mut rng, 2, 6), |t, x| {
            let l = t.log_softmax_rows(x);
            let wv = t.constant(w.clone());
            let p = t.mul(l, wv);
            t.sum_all(p)
        }, 1e-5);
    }

    #[test]
    fn rms_norm_matches_hand_value() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[3.0, 4.0]]);
        let g = tape.leaf(array![[1.0, 1.0]]);
        let y = tape.rms_norm(x, g, 0.0);
        let v = tape.value(y);
        assert!((v[[0, 0]] - 0.848528).abs() < 1e-6);
        assert!((v[[0, 1]] - 1.131371).abs() < 1e-6);
    }

    #[test]
    fn rms_norm_input_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gain = random_matrix(&mut rng, 1, 6).mapv(|v| v + 2.0);
        let w = random_matrix(&mut rng, 3, 6);
        check_grad(random_matrix(&mut rng, 3, 6), |t, x| {
            let gv = t.constant(gain.clone());
            let y = t.rms_norm(x, gv, 1e-6);
            let wv = t.constant(w.clone());
            let p = t.mul(y, wv);
            t.sum_all(p)
        }, 1e-4);
    }

    #[test]
    fn rms_norm_gain_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_matrix(&mut rng, 3, 6);
        let w = random_matrix(&mut rng, 3, 6);
        check_grad(random_matrix(&mut rng, 1, 6), |t, gain| {
            let xv = t.constant(x.clone());
            let y = t.rms_norm(xv, gain, 1e-6);
            let wv = t.constant(w.clone());
            let p = t.mul(y, wv);
            t.sum_all(p)
        }, 1e-5);
    }

    #[test]
    fn slice_concat_reshape_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = random_matrix(&mut rng, 6, 2);
        check_grad(random_matrix(&mut rng, 4, 6), |t, x| {
            let top = t.slice_rows(x, 0, 2);
            let bottom = t.slice_rows(x, 2, 2);
            let swapped = t.concat_rows(bottom, top);
            let left = t.slice_cols(swapped, 0, 3);
            let right = t.slice_cols(swapped, 3, 3);
            let joined = t.concat_cols(&[right, left]);
            let flat = t.reshape(joined, 2, 12);
            let back = t.reshape(flat, 4, 6);
            let wv = t.constant(w.clone());
            let y = t.matmul(back, wv);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        }, 1e-5);
    }

    #[test]
    fn gather_accumulates_repeated_ids() {
        let mut tape = Tape::new();
        let table = tape.leaf(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let picked = tape.gather(table, &[1, 1, 0]);
        let loss = tape.sum_all(picked);
        tape.backward(loss);
        let g = tape.grad(table);
        assert_eq!(g, array![[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]]);
    }

    #[test]
    fn mean_rows_and_pick_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        check_grad(random_matrix(&mut rng, 5, 3), |t, x| {
            let m = t.mean_rows(x);
            let sq = t.mul(m, m);
            let s = t.sum_all(sq);
            let p = t.pick(sq, 0, 1);
            t.add(s, p)
        }, 1e-5);
    }

    #[test]
    fn cross_entropy_uniform_logits_equals_log_vocab() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Array2::zeros((3, 7)));
        let ce = tape
            .cross_entropy_rows(logits, &[1, 2, 3], &[true, true, true])
            .unwrap();
        assert!((tape.scalar(ce) - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_hand_value_two_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(array![[2.0, 0.0]]);
        let ce = tape.cross_entropy_rows(logits, &[0], &[true]).unwrap();
        assert!((tape.scalar(ce) - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let targets = vec![2, 0, 4, 1];
        let mask = vec![true, false, true, true];
        check_grad(random_matrix(&mut rng, 4, 5), |t, x| {
            t.cross_entropy_rows(x, &targets, &mask).unwrap()
        }, 1e-5);
    }

    #[test]
    fn cross_entropy_rejects_empty_mask() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Array2::zeros((2, 3)));
        let err = tape.cross_entropy_rows(logits, &[0, 1], &[false, false]);
        assert!(err.is_err());
    }

    #[test]
    fn masked_rows_receive_no_gradient() {
        let mut tape = Tape::new();
        let logits = tape.leaf(array![[0.1, 0.2, 0.3], [0.5, 0.1, 0.2]]);
        let ce = tape
            .cross_entropy_rows(logits, &[0, 1], &[false, true])
            .unwrap();
        tape.backward(ce);
        let g = tape.grad(logits);
        assert!(g.row(0).iter().all(|v| *v == 0.0));
        assert!(g.row(1).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn constants_and_detach_block_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0]]);
        let c = tape.constant(array![[3.0, 4.0]]);
        let d = tape.detach(x);
        let p = tape.mul(x, c);
        let q = tape.mul(p, d);
        let loss = tape.sum_all(q);
        tape.backward(loss);
        assert_eq!(tape.grad(c), Array2::<f64>::zeros((1, 2)));
        assert_eq!(tape.grad(d), Array2::<f64>::zeros((1, 2)));
        assert!(tape.grad(x).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn reused_node_accumulates_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[2.0]]);
        let y = tape.add(x, x);
        let loss = tape.sum_all(y);
        tape.backward(loss);
        assert_eq!(tape.grad(x), array![[2.0]]);
    }
}
