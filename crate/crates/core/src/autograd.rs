//! Reverse-mode differentiation over 2-D row-major arrays.
//!
//! A [`Tape`] records every operation; [`Tape::backward`] walks it once in
//! reverse. Graph message passing is expressed with `gather_rows` and the
//! `segment_*` reductions so attention and convolution layers share kernels.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Array {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Array {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Array {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} array",
                data.len()
            )));
        }
        Ok(Array { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        Array {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Array {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn add_assign(&mut self, o: &Array) {
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }
}

/// Handle to a value on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Index = Rc<[usize]>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    /// Softmax within consecutive column groups of the given width.
    SoftmaxGroups(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    RepeatCols(Var, usize),
    SumColGroups(Var, usize),
    GatherRows(Var, Index),
    SegmentSum(Var, Index),
    SegmentMean(Var, Index, Vec<f64>),
    SegmentMax(Var, Vec<usize>),
    SegmentSoftmax(Var, Index),
    /// Edge-weighted message sum: values, per-edge weights, src, dst, group.
    EdgeAggregate(Var, Var, Index, Index, usize),
    SumAll(Var),
    MeanAll(Var),
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array> {
        self.grads[v.0].take()
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    // SAFETY: the strides describe arrays fully contained in the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check(cond: bool, what: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(what()))
    }
}

fn segment_count(seg: &[usize], n: usize) -> Result<()> {
    match seg.iter().find(|&&s| s >= n) {
        Some(s) => Err(Error::ShapeMismatch(format!("segment id {s} out of {n}"))),
        None => Ok(()),
    }
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

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Array, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check(x.cols == y.rows, || format!("matmul {:?} x {:?}", x.shape(), y.shape()))?;
        let (m, k, n) = (x.rows, x.cols, y.cols);
        let mut out = Array::zeros(m, n);
        gemm(m, k, n, &x.data, k as isize, 1, &y.data, n as isize, 1, &mut out.data, 0.0);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &str) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check(x.shape() == y.shape(), || format!("{name} {:?} vs {:?}", x.shape(), y.shape()))?;
        let data = x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect();
        let out = Array {
            rows: x.rows,
            cols: x.cols,
            data,
        };
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |p, q| p + q, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |p, q| p - q, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |p, q| p * q, Op::Mul(a, b), "mul")
    }

    fn row_op(&mut self, a: Var, r: Var, mul: bool) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(r));
        check(y.rows == 1 && y.cols == x.cols, || {
            format!("row broadcast {:?} onto {:?}", y.shape(), x.shape())
        })?;
        let mut out = x.clone();
        for row in out.data.chunks_mut(x.cols.max(1)) {
            for (o, v) in row.iter_mut().zip(&y.data) {
                if mul {
                    *o *= v;
                } else {
                    *o += v;
                }
            }
        }
        let op = if mul { Op::MulRow(a, r) } else { Op::AddRow(a, r) };
        Ok(self.push(out, op, &[a, r]))
    }

    /// `a + 1·r` with the 1×c row `r` broadcast over rows.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.row_op(a, r, false)
    }

    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.row_op(a, r, true)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(a);
        let out = Array {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|v| f(*v)).collect(),
        };
        self.push(out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |v| k * v, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    /// Max-shifted softmax within consecutive groups of `group` columns.
    pub fn softmax_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let x = self.value(a);
        check(group > 0 && x.cols % group == 0, || {
            format!("softmax group {group} does not divide {} columns", x.cols)
        })?;
        let mut out = x.clone();
        for g in out.data.chunks_mut(group) {
            let m = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in g.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in g.iter_mut() {
                *v /= s;
            }
        }
        Ok(self.push(out, Op::SoftmaxGroups(a, group), &[a]))
    }

    /// Softmax over each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let c = self.value(a).cols;
        self.softmax_groups(a, c)
    }

    /// Normalises each row, then applies `gain` and `bias` (both 1×c).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let (x, g, b) = (self.value(a), self.value(gain), self.value(bias));
        let c = x.cols;
        check(g.shape() == (1, c) && b.shape() == (1, c), || {
            format!("layer norm gain {:?} / bias {:?} for {c} columns", g.shape(), b.shape())
        })?;
        let mut xhat = vec![0.0; x.data.len()];
        let mut inv_std = vec![0.0; x.rows];
        let mut out = Array::zeros(x.rows, c);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out.data[r * c + j] = g.data[j] * h + b.data[j];
            }
        }
        let op = Op::LayerNorm {
            x: a,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(out, op, &[a, gain, bias]))
    }

    /// Inverted dropout: survivors are scaled by `1/keep`. The identity when
    /// `rng` is `None` (evaluation) or `keep == 1`.
    pub fn dropout(&mut self, a: Var, keep: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
        let Some(rng) = rng else { return a };
        if keep >= 1.0 {
            return a;
        }
        let n = self.value(a).data.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let x = self.value(a);
        let out = Array {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        self.push(out, Op::Dropout(a, mask), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        check(!parts.is_empty(), || "concat of nothing".into())?;
        let rows = self.value(parts[0]).rows;
        check(parts.iter().all(|p| self.value(*p).rows == rows), || {
            "concat with unequal row counts".into()
        })?;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Array::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let x = self.value(*p);
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + x.cols].copy_from_slice(x.row(r));
            }
            off += x.cols;
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        check(start + len <= x.cols, || format!("slice {start}+{len} of {} columns", x.cols))?;
        let mut out = Array::zeros(x.rows, len);
        for r in 0..x.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&x.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    /// Repeats every column `times` times in place: `[a b] → [a a b b]`.
    pub fn repeat_cols(&mut self, a: Var, times: usize) -> Var {
        let x = self.value(a);
        let mut out = Array::zeros(x.rows, x.cols * times);
        for (o, v) in out.data.chunks_mut(times).zip(&x.data) {
            o.fill(*v);
        }
        self.push(out, Op::RepeatCols(a, times), &[a])
    }

    /// Sums consecutive groups of `group` columns.
    pub fn sum_col_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let x = self.value(a);
        check(group > 0 && x.cols % group == 0, || {
            format!("group {group} does not divide {} columns", x.cols)
        })?;
        let out = Array {
            rows: x.rows,
            cols: x.cols / group,
            data: x.data.chunks(group).map(|g| g.iter().sum()).collect(),
        };
        Ok(self.push(out, Op::SumColGroups(a, group), &[a]))
    }

    /// Output row `k` is input row `idx[k]`.
    pub fn gather_rows(&mut self, a: Var, idx: &Rc<[usize]>) -> Result<Var> {
        let x = self.value(a);
        segment_count(idx, x.rows)?;
        let c = x.cols;
        let mut out = Array::zeros(idx.len(), c);
        for (k, &i) in idx.iter().enumerate() {
            out.data[k * c..(k + 1) * c].copy_from_slice(x.row(i));
        }
        Ok(self.push(out, Op::GatherRows(a, idx.clone()), &[a]))
    }

    fn check_segments(&self, a: Var, seg: &[usize], n: usize) -> Result<()> {
        let x = self.value(a);
        check(seg.len() == x.rows, || {
            format!("{} segment ids for {} rows", seg.len(), x.rows)
        })?;
        segment_count(seg, n)
    }

    /// Row `s` of the output sums input rows `k` with `seg[k] == s`.
    pub fn segment_sum(&mut self, a: Var, seg: &Rc<[usize]>, n: usize) -> Result<Var> {
        self.check_segments(a, seg, n)?;
        let x = self.value(a);
        let c = x.cols;
        let mut out = Array::zeros(n, c);
        for (k, &s) in seg.iter().enumerate() {
            for (o, v) in out.data[s * c..(s + 1) * c].iter_mut().zip(x.row(k)) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::SegmentSum(a, seg.clone()), &[a]))
    }

    /// Mean per segment; empty segments give zero rows.
    pub fn segment_mean(&mut self, a: Var, seg: &Rc<[usize]>, n: usize) -> Result<Var> {
        self.check_segments(a, seg, n)?;
        let x = self.value(a);
        let c = x.cols;
        let mut counts = vec![0.0; n];
        let mut out = Array::zeros(n, c);
        for (k, &s) in seg.iter().enumerate() {
            counts[s] += 1.0;
            for (o, v) in out.data[s * c..(s + 1) * c].iter_mut().zip(x.row(k)) {
                *o += v;
            }
        }
        let inv: Vec<f64> = counts.iter().map(|&k| if k > 0.0 { 1.0 / k } else { 0.0 }).collect();
        for s in 0..n {
            for o in &mut out.data[s * c..(s + 1) * c] {
                *o *= inv[s];
            }
        }
        Ok(self.push(out, Op::SegmentMean(a, seg.clone(), inv), &[a]))
    }

    /// Column-wise max per segment (first maximiser receives the gradient).
    pub fn segment_max(&mut self, a: Var, seg: &Rc<[usize]>, n: usize) -> Result<Var> {
        self.check_segments(a, seg, n)?;
        let x = self.value(a);
        let c = x.cols;
        let mut out = Array::filled(n, c, f64::NEG_INFINITY);
        let mut arg = vec![usize::MAX; n * c];
        for (k, &s) in seg.iter().enumerate() {
            for j in 0..c {
                let v = x.data[k * c + j];
                if v > out.data[s * c + j] {
                    out.data[s * c + j] = v;
                    arg[s * c + j] = k;
                }
            }
        }
        for (o, a) in out.data.iter_mut().zip(&arg) {
            if *a == usize::MAX {
                *o = 0.0;
            }
        }
        Ok(self.push(out, Op::SegmentMax(a, arg), &[a]))
    }

    /// Softmax of each column over the rows sharing a segment id.
    pub fn segment_softmax(&mut self, a: Var, seg: &Rc<[usize]>, n: usize) -> Result<Var> {
        self.check_segments(a, seg, n)?;
        let x = self.value(a);
        let c = x.cols;
        let mut mx = vec![f64::NEG_INFINITY; n * c];
        for (xk, &s) in x.data.chunks_exact(c).zip(seg.iter()) {
            for (m, v) in mx[s * c..(s + 1) * c].iter_mut().zip(xk) {
                *m = m.max(*v);
            }
        }
        let mut out = Array::zeros(x.rows, c);
        let mut den = vec![0.0; n * c];
        for ((ok, xk), &s) in out.data.chunks_exact_mut(c).zip(x.data.chunks_exact(c)).zip(seg.iter()) {
            let (m, d) = (&mx[s * c..(s + 1) * c], &mut den[s * c..(s + 1) * c]);
            for j in 0..c {
                ok[j] = (xk[j] - m[j]).exp();
                d[j] += ok[j];
            }
        }
        for (ok, &s) in out.data.chunks_exact_mut(c).zip(seg.iter()) {
            for (o, d) in ok.iter_mut().zip(&den[s * c..(s + 1) * c]) {
                *o /= d;
            }
        }
        Ok(self.push(out, Op::SegmentSoftmax(a, seg.clone()), &[a]))
    }

    /// `out[dst[e], j] += w[e, j / group] * x[src[e], j]`: gather, weight
    /// and segment-sum in one pass, without per-edge temporaries.
    pub fn edge_aggregate(&mut self, x: Var, w: Var, src: &Rc<[usize]>, dst: &Rc<[usize]>, n: usize, group: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let c = xv.cols;
        check(
            group > 0 && wv.cols * group == c && wv.rows == src.len() && src.len() == dst.len(),
            || format!("edge aggregate of {:?} with weights {:?}, group {group}", xv.shape(), wv.shape()),
        )?;
        segment_count(src, xv.rows)?;
        segment_count(dst, n)?;
        let mut out = Array::zeros(n, c);
        for (e, (&s, &d)) in src.iter().zip(dst.iter()).enumerate() {
            let we = &wv.data[e * wv.cols..(e + 1) * wv.cols];
            let xs = &xv.data[s * c..(s + 1) * c];
            let o = &mut out.data[d * c..(d + 1) * c];
            for ((oh, xh), &wh) in o.chunks_exact_mut(group).zip(xs.chunks_exact(group)).zip(we) {
                for (ov, xv) in oh.iter_mut().zip(xh) {
                    *ov += wh * xv;
                }
            }
        }
        Ok(self.push(out, Op::EdgeAggregate(x, w, src.clone(), dst.clone(), group), &[x, w]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Array::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data.iter().sum::<f64>() / x.data.len().max(1) as f64;
        self.push(Array::scalar(s), Op::MeanAll(a), &[a])
    }

    /// `x W + b` with `b` a 1×out row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Gradients of the scalar `loss` with respect to every value that
    /// depends on a trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NotScalar(shape.0, shape.1));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) {
        let mut acc = |v: Var, d: Array| {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot => *slot = Some(d),
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (m, k, n) = (x.rows, x.cols, y.cols);
                if self.wants(*a) {
                    let mut da = Array::zeros(m, k);
                    // dA = dC · Bᵀ
                    gemm(m, n, k, &g.data, n as isize, 1, &y.data, 1, n as isize, &mut da.data, 0.0);
                    acc(*a, da);
                }
                if self.wants(*b) {
                    let mut db = Array::zeros(k, n);
                    // dB = Aᵀ · dC
                    gemm(k, m, n, &x.data, 1, k as isize, &g.data, n as isize, 1, &mut db.data, 0.0);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    let mut d = g.clone();
                    d.data.iter_mut().for_each(|v| *v = -*v);
                    acc(*b, d);
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let data = g.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
                    acc(*a, Array { rows: g.rows, cols: g.cols, data });
                }
                if self.wants(*b) {
                    let data = g.data.iter().zip(&x.data).map(|(p, q)| p * q).collect();
                    acc(*b, Array { rows: g.rows, cols: g.cols, data });
                }
            }
            Op::AddRow(a, r) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*r) {
                    let mut d = Array::zeros(1, g.cols);
                    for row in g.data.chunks(g.cols.max(1)) {
                        for (o, v) in d.data.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*r, d);
                }
            }
            Op::MulRow(a, r) => {
                let (x, y) = (self.value(*a), self.value(*r));
                let c = g.cols.max(1);
                if self.wants(*a) {
                    let mut d = g.clone();
                    for row in d.data.chunks_mut(c) {
                        for (o, v) in row.iter_mut().zip(&y.data) {
                            *o *= v;
                        }
                    }
                    acc(*a, d);
                }
                if self.wants(*r) {
                    let mut d = Array::zeros(1, g.cols);
                    for (grow, xrow) in g.data.chunks(c).zip(x.data.chunks(c)) {
                        for j in 0..g.cols {
                            d.data[j] += grow[j] * xrow[j];
                        }
                    }
                    acc(*r, d);
                }
            }
            Op::Scale(a, k) => {
                let data = g.data.iter().map(|v| k * v).collect();
                acc(*a, Array { rows: g.rows, cols: g.cols, data });
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = g.data.iter().zip(&x.data).map(|(d, v)| if *v > 0.0 { *d } else { 0.0 }).collect();
                acc(*a, Array { rows: g.rows, cols: g.cols, data });
            }
            Op::LeakyRelu(a, s) => {
                let x = self.value(*a);
                let data = g.data.iter().zip(&x.data).map(|(d, v)| if *v > 0.0 { *d } else { s * d }).collect();
                acc(*a, Array { rows: g.rows, cols: g.cols, data });
            }
            Op::Exp(a) => {
                let data = g.data.iter().zip(&out.data).map(|(d, y)| d * y).collect();
                acc(*a, Array { rows: g.rows, cols: g.cols, data });
            }
            Op::SoftmaxGroups(a, group) => {
                let mut d = Array::zeros(g.rows, g.cols);
                for ((dg, yg), og) in d
                    .data
                    .chunks_mut(*group)
                    .zip(out.data.chunks(*group))
                    .zip(g.data.chunks(*group))
                {
                    let dot: f64 = yg.iter().zip(og).map(|(y, o)| y * o).sum();
                    for j in 0..*group {
                        dg[j] = yg[j] * (og[j] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = g.cols;
                let gv = &self.value(*gain).data;
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = Array::zeros(1, c);
                    let mut db = Array::zeros(1, c);
                    for r in 0..g.rows {
                        for j in 0..c {
                            let d = g.data[r * c + j];
                            dg.data[j] += d * xhat[r * c + j];
                            db.data[j] += d;
                        }
                    }
                    if self.wants(*gain) {
                        acc(*gain, dg);
                    }
                    if self.wants(*bias) {
                        acc(*bias, db);
                    }
                }
                if self.wants(*x) {
                    let mut dx = Array::zeros(g.rows, c);
                    for r in 0..g.rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = g.data[r * c + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[r * c + j];
                        }
                        let (m1, m2) = (s1 / c as f64, s2 / c as f64);
                        for j in 0..c {
                            let dh = g.data[r * c + j] * gv[j];
                            dx.data[r * c + j] = inv_std[r] * (dh - m1 - xhat[r * c + j] * m2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Dropout(a, mask) => {
                let data = g.data.iter().zip(mask).map(|(d, m)| d * m).collect();
                acc(*a, Array { rows: g.rows, cols: g.cols, data });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols;
                    if self.wants(*p) {
                        let mut d = Array::zeros(g.rows, w);
                        for r in 0..g.rows {
                            d.data[r * w..(r + 1) * w].copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        acc(*p, d);
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut d = Array::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    d.data[r * x.cols + start..r * x.cols + start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::RepeatCols(a, times) => {
                let x = self.value(*a);
                let data = g.data.chunks(*times).map(|c| c.iter().sum()).collect();
                acc(*a, Array { rows: x.rows, cols: x.cols, data });
            }
            Op::SumColGroups(a, group) => {
                let x = self.value(*a);
                let mut d = Array::zeros(x.rows, x.cols);
                for (o, v) in d.data.chunks_mut(*group).zip(&g.data) {
                    o.fill(*v);
                }
                acc(*a, d);
            }
            Op::GatherRows(a, idx) => {
                let x = self.value(*a);
                let c = x.cols;
                let mut d = Array::zeros(x.rows, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in d.data[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*a, d);
            }
            Op::SegmentSum(a, seg) => {
                let c = g.cols;
                let mut d = Array::zeros(seg.len(), c);
                for (k, &s) in seg.iter().enumerate() {
                    d.data[k * c..(k + 1) * c].copy_from_slice(g.row(s));
                }
                acc(*a, d);
            }
            Op::SegmentMean(a, seg, inv) => {
                let c = g.cols;
                let mut d = Array::zeros(seg.len(), c);
                for (k, &s) in seg.iter().enumerate() {
                    for (o, v) in d.data[k * c..(k + 1) * c].iter_mut().zip(g.row(s)) {
                        *o = v * inv[s];
                    }
                }
                acc(*a, d);
            }
            Op::SegmentMax(a, arg) => {
                let x = self.value(*a);
                let c = x.cols;
                let mut d = Array::zeros(x.rows, c);
                for (sj, &k) in arg.iter().enumerate() {
                    if k != usize::MAX {
                        d.data[k * c + sj % c] += g.data[sj];
                    }
                }
                acc(*a, d);
            }
            Op::SegmentSoftmax(a, seg) => {
                let c = g.cols;
                let n = seg.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n * c];
                for (k, &s) in seg.iter().enumerate() {
                    for j in 0..c {
                        dot[s * c + j] += out.data[k * c + j] * g.data[k * c + j];
                    }
                }
                let mut d = Array::zeros(seg.len(), c);
                for (k, &s) in seg.iter().enumerate() {
                    for j in 0..c {
                        d.data[k * c + j] = out.data[k * c + j] * (g.data[k * c + j] - dot[s * c + j]);
                    }
                }
                acc(*a, d);
            }
            Op::EdgeAggregate(x, w, src, dst, group) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let c = xv.cols;
                let k = wv.cols;
                if self.wants(*x) {
                    let mut d = Array::zeros(xv.rows, c);
                    for (e, (&s, &t)) in src.iter().zip(dst.iter()).enumerate() {
                        let gt = &g.data[t * c..(t + 1) * c];
                        let ds = &mut d.data[s * c..(s + 1) * c];
                        for h in 0..k {
                            let wh = wv.data[e * k + h];
                            for j in h * group..(h + 1) * group {
                                ds[j] += wh * gt[j];
                            }
                        }
                    }
                    acc(*x, d);
                }
                if self.wants(*w) {
                    let mut d = Array::zeros(wv.rows, k);
                    for (e, (&s, &t)) in src.iter().zip(dst.iter()).enumerate() {
                        let gt = &g.data[t * c..(t + 1) * c];
                        let xs = &xv.data[s * c..(s + 1) * c];
                        for h in 0..k {
                            d.data[e * k + h] = (h * group..(h + 1) * group).map(|j| gt[j] * xs[j]).sum();
                        }
                    }
                    acc(*w, d);
                }
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                acc(*a, Array::filled(x.rows, x.cols, g.data[0]));
            }
            Op::MeanAll(a) => {
                let x = self.value(*a);
                let n = x.data.len().max(1) as f64;
                acc(*a, Array::filled(x.rows, x.cols, g.data[0] / n));
            }
        }
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares `backward` against central differences (step `1e-5`) for the
/// listed `(input, flat index)` coordinates, or all coordinates when `coords`
/// is `None`. The relative error uses `max(|analytic|, |numeric|, floor)` as
/// denominator with `floor = 1e-3 · max|analytic|` so that near-zero entries
/// are judged on the scale of the whole gradient.
pub fn gradcheck<F>(f: F, inputs: &[Array], coords: Option<&[(usize, usize)]>) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Array]| -> Result<(f64, Vec<Array>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|a| tape.param(a.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let gr = tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(vals)
            .map(|(v, a)| gr.get(*v).cloned().unwrap_or_else(|| Array::zeros(a.rows, a.cols)))
            .collect();
        Ok((tape.value(loss).data[0], grads))
    };
    let value = |vals: &[Array]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|a| tape.constant(a.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data[0])
    };
    let (_, analytic) = eval(inputs)?;
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, a)| (0..a.data.len()).map(move |k| (i, k)))
                .collect();
            &all
        }
    };
    let scale = analytic
        .iter()
        .flat_map(|a| a.data.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut vals = inputs.to_vec();
    for &(i, k) in coords {
        let orig = vals[i].data[k];
        vals[i].data[k] = orig + h;
        let fp = value(&vals)?;
        vals[i].data[k] = orig - h;
        let fm = value(&vals)?;
        vals[i].data[k] = orig;
        let num = (fp - fm) / (2.0 * h);
        let an = analytic[i].data[k];
        let err = (num - an).abs() / an.abs().max(num.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(GradcheckReport {
        max_rel_error: worst,
        checked: coords.len(),
    })
}
