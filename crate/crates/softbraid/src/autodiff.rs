//! Tape-based reverse-mode automatic differentiation over dense 2-D
//! 64-bit-float tensors.
//!
//! A [`Tape`] records every operation in creation order together with its
//! forward value. [`Tape::backward`] walks the records once in reverse,
//! accumulating gradients additively at fan-out, and returns the gradient
//! of a scalar loss with respect to every `param` leaf. Constants are
//! tracked but skipped by the backward pass, so inference-only subgraphs
//! cost nothing extra.
//!
//! Shape rules are enforced with assertions: mismatched operands are a
//! programming error at the call site, not a runtime condition to recover
//! from. Debug builds additionally verify that every forward value is
//! finite, turning NaN/Inf leaks into immediate failures next to their
//! source.

use crate::error::{Error, Result};

/// Dense row-major matrix of f64. Row and column vectors are 1×n / n×1.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor { rows: r, cols: c, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_in_place(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// Handle to a tape node; carries the shape so graph construction never
/// needs to consult the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: u32,
    rows: u32,
    cols: u32,
}

impl Var {
    pub fn rows(self) -> usize {
        self.rows as usize
    }

    pub fn cols(self) -> usize {
        self.cols as usize
    }
}

/// Concatenation axis: stack rows or extend columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(u32, u32),
    Sub(u32, u32),
    /// Matrix plus a row vector broadcast over every row.
    AddRow(u32, u32),
    Scale(u32, f64),
    AddScalar(u32),
    Matmul {
        a: u32,
        b: u32,
        trans_b: bool,
    },
    Concat {
        parts: Box<[u32]>,
        axis: Axis,
    },
    SliceCols {
        a: u32,
        start: u32,
    },
    GatherRow {
        a: u32,
        row: u32,
    },
    Reshape(u32),
    Relu(u32),
    /// Row-wise softmax.
    Softmax(u32),
    /// Row-wise layer normalization with learnable gain/shift.
    LayerNorm {
        x: u32,
        gamma: u32,
        beta: u32,
    },
    /// Elementwise Huber value: quadratic within `delta`, linear outside.
    Huber {
        a: u32,
        delta: f64,
    },
    Mean(u32),
    /// Frobenius norm reduced to a 1×1 scalar.
    Norm(u32),
    /// Elementwise atan2(y, x).
    Atan2 {
        y: u32,
        x: u32,
    },
    /// Wraps each element into (−π, π]; unit derivative almost everywhere.
    WrapAngle(u32),
}

struct Node {
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Records a computation and replays it backwards for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
}

/// Gradients of a scalar loss with respect to tape leaves, indexable by
/// the `Var` handles the tape handed out.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.id as usize].as_ref()
    }

    /// Gradient for `v`, zeros if the loss never touched it.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.id as usize]
            .take()
            .unwrap_or_else(|| Tensor::zeros(v.rows(), v.cols()))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.id as usize]
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        #[cfg(debug_assertions)]
        {
            assert!(
                value.is_finite(),
                "non-finite value produced by {:?}",
                op
            );
        }
        let id = self.nodes.len() as u32;
        let var = Var {
            id,
            rows: value.rows as u32,
            cols: value.cols as u32,
        };
        self.nodes.push(Node { op, needs_grad });
        self.values.push(value);
        var
    }

    fn needs(&self, id: u32) -> bool {
        self.nodes[id as usize].needs_grad
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Trainable leaf; backward produces a gradient for it.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "add shape mismatch");
        let mut out = self.values[a.id as usize].clone();
        out.add_in_place(&self.values[b.id as usize]);
        let ng = self.needs(a.id) || self.needs(b.id);
        self.push(Op::Add(a.id, b.id), out, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "sub shape mismatch");
        let av = &self.values[a.id as usize];
        let bv = &self.values[b.id as usize];
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        let ng = self.needs(a.id) || self.needs(b.id);
        self.push(Op::Sub(a.id, b.id), out, ng)
    }

    /// `a` (n×d) plus row vector `row` (1×d) broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(row.rows, 1, "add_row needs a row vector");
        assert_eq!(a.cols, row.cols, "add_row width mismatch");
        let av = &self.values[a.id as usize];
        let rv = &self.values[row.id as usize];
        let mut out = av.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += rv.data[c];
            }
        }
        let ng = self.needs(a.id) || self.needs(row.id);
        self.push(Op::AddRow(a.id, row.id), out, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = &self.values[a.id as usize];
        let out = Tensor::from_vec(av.rows, av.cols, av.data.iter().map(|v| v * s).collect());
        let ng = self.needs(a.id);
        self.push(Op::Scale(a.id, s), out, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let av = &self.values[a.id as usize];
        let out = Tensor::from_vec(av.rows, av.cols, av.data.iter().map(|v| v + s).collect());
        let ng = self.needs(a.id);
        self.push(Op::AddScalar(a.id), out, ng)
    }

    /// `a · b`, or `a · bᵀ` with `trans_b` (b stored n×k, used as k×n).
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (m, k) = (a.rows(), a.cols());
        let n = if trans_b {
            assert_eq!(b.cols(), k, "matmul(transposed) inner dim mismatch");
            b.rows()
        } else {
            assert_eq!(b.rows(), k, "matmul inner dim mismatch");
            b.cols()
        };
        let mut out = Tensor::zeros(m, n);
        {
            let av = &self.values[a.id as usize];
            let bv = &self.values[b.id as usize];
            let (rsb, csb) = if trans_b {
                (1isize, k as isize)
            } else {
                (n as isize, 1isize)
            };
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    av.data.as_ptr(),
                    k as isize,
                    1,
                    bv.data.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    out.data.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        let ng = self.needs(a.id) || self.needs(b.id);
        self.push(Op::Matmul { a: a.id, b: b.id, trans_b }, out, ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        if parts.len() == 1 {
            // Passthrough keeps graphs small; gradient routing is identity.
            return parts[0];
        }
        let out = match axis {
            Axis::Rows => {
                let cols = parts[0].cols();
                let rows: usize = parts.iter().map(|p| p.rows()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for p in parts {
                    assert_eq!(p.cols(), cols, "concat(rows) width mismatch");
                    data.extend_from_slice(&self.values[p.id as usize].data);
                }
                Tensor::from_vec(rows, cols, data)
            }
            Axis::Cols => {
                let rows = parts[0].rows();
                let cols: usize = parts.iter().map(|p| p.cols()).sum();
                let mut out = Tensor::zeros(rows, cols);
                let mut at = 0usize;
                for p in parts {
                    assert_eq!(p.rows(), rows, "concat(cols) height mismatch");
                    let pv = &self.values[p.id as usize];
                    for r in 0..rows {
                        out.data[r * cols + at..r * cols + at + pv.cols]
                            .copy_from_slice(pv.row(r));
                    }
                    at += pv.cols;
                }
                out
            }
        };
        let ng = parts.iter().any(|p| self.needs(p.id));
        let ids: Box<[u32]> = parts.iter().map(|p| p.id).collect();
        self.push(Op::Concat { parts: ids, axis }, out, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= a.cols(), "slice_cols out of range");
        let av = &self.values[a.id as usize];
        let mut out = Tensor::zeros(av.rows, len);
        for r in 0..av.rows {
            out.data[r * len..(r + 1) * len]
                .copy_from_slice(&av.row(r)[start..start + len]);
        }
        let ng = self.needs(a.id);
        self.push(
            Op::SliceCols {
                a: a.id,
                start: start as u32,
            },
            out,
            ng,
        )
    }

    /// Extracts row `row` of `a` as a 1×cols tensor.
    pub fn gather_row(&mut self, a: Var, row: usize) -> Var {
        assert!(row < a.rows(), "gather_row out of range");
        let av = &self.values[a.id as usize];
        let out = Tensor::from_vec(1, av.cols, av.row(row).to_vec());
        let ng = self.needs(a.id);
        self.push(
            Op::GatherRow {
                a: a.id,
                row: row as u32,
            },
            out,
            ng,
        )
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(a.rows() * a.cols(), rows * cols, "reshape element count");
        let av = &self.values[a.id as usize];
        let out = Tensor::from_vec(rows, cols, av.data.clone());
        let ng = self.needs(a.id);
        self.push(Op::Reshape(a.id), out, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = &self.values[a.id as usize];
        let out = Tensor::from_vec(
            av.rows,
            av.cols,
            av.data.iter().map(|v| v.max(0.0)).collect(),
        );
        let ng = self.needs(a.id);
        self.push(Op::Relu(a.id), out, ng)
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = &self.values[a.id as usize];
        let mut out = Tensor::zeros(av.rows, av.cols);
        for r in 0..av.rows {
            let row = av.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out.data[r * av.cols + c] = e;
                sum += e;
            }
            for c in 0..av.cols {
                out.data[r * av.cols + c] /= sum;
            }
        }
        let ng = self.needs(a.id);
        self.push(Op::Softmax(a.id), out, ng)
    }

    /// Row-wise layer normalization: gamma ⊙ (x − μ)/√(σ² + ε) + beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        assert_eq!(gamma.rows, 1, "layer_norm gamma must be a row");
        assert_eq!(beta.rows, 1, "layer_norm beta must be a row");
        assert_eq!(gamma.cols, x.cols, "layer_norm gamma width");
        assert_eq!(beta.cols, x.cols, "layer_norm beta width");
        let xv = &self.values[x.id as usize];
        let gv = &self.values[gamma.id as usize];
        let bv = &self.values[beta.id as usize];
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        let d = xv.cols as f64;
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..xv.cols {
                out.data[r * xv.cols + c] = gv.data[c] * (row[c] - mean) * inv + bv.data[c];
            }
        }
        let ng = self.needs(x.id) || self.needs(gamma.id) || self.needs(beta.id);
        self.push(
            Op::LayerNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
            },
            out,
            ng,
        )
    }

    /// Elementwise Huber: x²/2 inside ±delta, delta·(|x| − delta/2) outside.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        assert!(delta > 0.0, "huber delta must be positive");
        let av = &self.values[a.id as usize];
        let out = Tensor::from_vec(
            av.rows,
            av.cols,
            av.data
                .iter()
                .map(|&v| {
                    if v.abs() <= delta {
                        0.5 * v * v
                    } else {
                        delta * (v.abs() - 0.5 * delta)
                    }
                })
                .collect(),
        );
        let ng = self.needs(a.id);
        self.push(Op::Huber { a: a.id, delta }, out, ng)
    }

    /// Mean over all elements, reduced to 1×1.
    pub fn mean(&mut self, a: Var) -> Var {
        let av = &self.values[a.id as usize];
        let m = av.data.iter().sum::<f64>() / av.data.len() as f64;
        let ng = self.needs(a.id);
        self.push(Op::Mean(a.id), Tensor::scalar(m), ng)
    }

    /// Frobenius norm over all elements, reduced to 1×1.
    pub fn norm(&mut self, a: Var) -> Var {
        let av = &self.values[a.id as usize];
        let n = av.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ng = self.needs(a.id);
        self.push(Op::Norm(a.id), Tensor::scalar(n), ng)
    }

    /// Elementwise atan2(y, x) over same-shape tensors.
    pub fn atan2(&mut self, y: Var, x: Var) -> Var {
        assert_eq!((y.rows, y.cols), (x.rows, x.cols), "atan2 shape mismatch");
        let yv = &self.values[y.id as usize];
        let xv = &self.values[x.id as usize];
        let data = yv
            .data
            .iter()
            .zip(&xv.data)
            .map(|(a, b)| a.atan2(*b))
            .collect();
        let out = Tensor::from_vec(yv.rows, yv.cols, data);
        let ng = self.needs(y.id) || self.needs(x.id);
        self.push(Op::Atan2 { y: y.id, x: x.id }, out, ng)
    }

    /// Wraps each element into (−π, π]. The jump points form a measure-zero
    /// set; the derivative is 1 elsewhere and the backward rule passes
    /// gradients through unchanged.
    pub fn wrap_angle(&mut self, a: Var) -> Var {
        let av = &self.values[a.id as usize];
        let out = Tensor::from_vec(
            av.rows,
            av.cols,
            av.data.iter().map(|&v| crate::geometry::wrap_angle(v)).collect(),
        );
        let ng = self.needs(a.id);
        self.push(Op::WrapAngle(a.id), out, ng)
    }

    /// Reverse pass from a scalar loss. Each node is visited exactly once;
    /// fan-out sums contributions. Returns gradients for every `param`
    /// leaf reachable from the loss.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            (loss.rows, loss.cols),
            (1, 1),
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id as usize] = Some(Tensor::scalar(1.0));

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            // A node's gradient is complete once every consumer (all later
            // nodes) has contributed, so it can be moved out here.
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g); // keep leaf gradients for the caller
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, || g.clone());
                    self.accum(&mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, || g.clone());
                    self.accum(&mut grads, *b, || {
                        let mut t = g.clone();
                        for v in &mut t.data {
                            *v = -*v;
                        }
                        t
                    });
                }
                Op::AddRow(a, row) => {
                    self.accum(&mut grads, *a, || g.clone());
                    self.accum(&mut grads, *row, || {
                        let mut t = Tensor::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for c in 0..g.cols {
                                t.data[c] += g.data[r * g.cols + c];
                            }
                        }
                        t
                    });
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    self.accum(&mut grads, *a, || {
                        let mut t = g.clone();
                        for v in &mut t.data {
                            *v *= s;
                        }
                        t
                    });
                }
                Op::AddScalar(a) => {
                    self.accum(&mut grads, *a, || g.clone());
                }
                Op::Matmul { a, b, trans_b } => {
                    let (a, b, trans_b) = (*a, *b, *trans_b);
                    let m = self.values[a as usize].rows;
                    let k = self.values[a as usize].cols;
                    let n = g.cols;
                    if self.needs(a) {
                        let da = grads[a as usize]
                            .get_or_insert_with(|| Tensor::zeros(m, k));
                        let bv = &self.values[b as usize];
                        let (rsb, csb) = if trans_b {
                            (k as isize, 1isize) // dA = G · B
                        } else {
                            (1isize, n as isize) // dA = G · Bᵀ
                        };
                        unsafe {
                            matrixmultiply::dgemm(
                                m, n, k, 1.0,
                                g.data.as_ptr(), n as isize, 1,
                                bv.data.as_ptr(), rsb, csb,
                                1.0,
                                da.data.as_mut_ptr(), k as isize, 1,
                            );
                        }
                    }
                    if self.needs(b) {
                        let bshape = (
                            self.values[b as usize].rows,
                            self.values[b as usize].cols,
                        );
                        let av_ptr = self.values[a as usize].data.as_ptr();
                        let db = grads[b as usize]
                            .get_or_insert_with(|| Tensor::zeros(bshape.0, bshape.1));
                        unsafe {
                            if trans_b {
                                // dB(n×k) = Gᵀ · A
                                matrixmultiply::dgemm(
                                    n, m, k, 1.0,
                                    g.data.as_ptr(), 1, n as isize,
                                    av_ptr, k as isize, 1,
                                    1.0,
                                    db.data.as_mut_ptr(), k as isize, 1,
                                );
                            } else {
                                // dB(k×n) = Aᵀ · G
                                matrixmultiply::dgemm(
                                    k, m, n, 1.0,
                                    av_ptr, 1, k as isize,
                                    g.data.as_ptr(), n as isize, 1,
                                    1.0,
                                    db.data.as_mut_ptr(), n as isize, 1,
                                );
                            }
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    let parts = parts.clone();
                    match axis {
                        Axis::Rows => {
                            let mut at = 0usize;
                            for p in parts.iter() {
                                let pv_rows = self.values[*p as usize].rows;
                                let cols = g.cols;
                                self.accum(&mut grads, *p, || {
                                    Tensor::from_vec(
                                        pv_rows,
                                        cols,
                                        g.data[at * cols..(at + pv_rows) * cols].to_vec(),
                                    )
                                });
                                at += pv_rows;
                            }
                        }
                        Axis::Cols => {
                            let mut at = 0usize;
                            for p in parts.iter() {
                                let pc = self.values[*p as usize].cols;
                                let pr = self.values[*p as usize].rows;
                                self.accum(&mut grads, *p, || {
                                    let mut t = Tensor::zeros(pr, pc);
                                    for r in 0..pr {
                                        t.data[r * pc..(r + 1) * pc].copy_from_slice(
                                            &g.data[r * g.cols + at..r * g.cols + at + pc],
                                        );
                                    }
                                    t
                                });
                                at += pc;
                            }
                        }
                    }
                }
                Op::SliceCols { a, start } => {
                    let (a, start) = (*a, *start as usize);
                    let (ar, ac) = (self.values[a as usize].rows, self.values[a as usize].cols);
                    self.accum(&mut grads, a, || {
                        let mut t = Tensor::zeros(ar, ac);
                        for r in 0..g.rows {
                            for c in 0..g.cols {
                                t.data[r * ac + start + c] += g.data[r * g.cols + c];
                            }
                        }
                        t
                    });
                }
                Op::GatherRow { a, row } => {
                    let (a, row) = (*a, *row as usize);
                    let (ar, ac) = (self.values[a as usize].rows, self.values[a as usize].cols);
                    self.accum(&mut grads, a, || {
                        let mut t = Tensor::zeros(ar, ac);
                        for c in 0..ac {
                            t.data[row * ac + c] += g.data[c];
                        }
                        t
                    });
                }
                Op::Reshape(a) => {
                    let a = *a;
                    let (ar, ac) = (self.values[a as usize].rows, self.values[a as usize].cols);
                    self.accum(&mut grads, a, || {
                        Tensor::from_vec(ar, ac, g.data.clone())
                    });
                }
                Op::Relu(a) => {
                    let a = *a;
                    let out = &self.values[id];
                    let data = g
                        .data
                        .iter()
                        .zip(&out.data)
                        .map(|(gv, ov)| if *ov > 0.0 { *gv } else { 0.0 })
                        .collect();
                    let t = Tensor::from_vec(g.rows, g.cols, data);
                    self.accum(&mut grads, a, || t.clone());
                }
                Op::Softmax(a) => {
                    let a = *a;
                    let y = &self.values[id];
                    let mut t = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let dot: f64 = (0..g.cols)
                            .map(|c| g.data[r * g.cols + c] * y.data[r * g.cols + c])
                            .sum();
                        for c in 0..g.cols {
                            t.data[r * g.cols + c] =
                                y.data[r * g.cols + c] * (g.data[r * g.cols + c] - dot);
                        }
                    }
                    self.accum(&mut grads, a, || t.clone());
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let xv = &self.values[x as usize];
                    let gv = &self.values[gamma as usize];
                    let d = xv.cols as f64;
                    let mut dx = Tensor::zeros(xv.rows, xv.cols);
                    let mut dgamma = Tensor::zeros(1, xv.cols);
                    let mut dbeta = Tensor::zeros(1, xv.cols);
                    for r in 0..xv.rows {
                        let row = xv.row(r);
                        let mean = row.iter().sum::<f64>() / d;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let grow = &g.data[r * g.cols..(r + 1) * g.cols];
                        let mut mean_h = 0.0;
                        let mut mean_hx = 0.0;
                        for c in 0..xv.cols {
                            let xhat = (row[c] - mean) * inv;
                            let h = grow[c] * gv.data[c];
                            mean_h += h;
                            mean_hx += h * xhat;
                            dgamma.data[c] += grow[c] * xhat;
                            dbeta.data[c] += grow[c];
                        }
                        mean_h /= d;
                        mean_hx /= d;
                        for c in 0..xv.cols {
                            let xhat = (row[c] - mean) * inv;
                            let h = grow[c] * gv.data[c];
                            dx.data[r * xv.cols + c] = inv * (h - mean_h - xhat * mean_hx);
                        }
                    }
                    self.accum(&mut grads, x, || dx.clone());
                    self.accum(&mut grads, gamma, || dgamma.clone());
                    self.accum(&mut grads, beta, || dbeta.clone());
                }
                Op::Huber { a, delta } => {
                    let (a, delta) = (*a, *delta);
                    let xv = &self.values[a as usize];
                    let data = g
                        .data
                        .iter()
                        .zip(&xv.data)
                        .map(|(gv, x)| gv * x.clamp(-delta, delta))
                        .collect();
                    let t = Tensor::from_vec(g.rows, g.cols, data);
                    self.accum(&mut grads, a, || t.clone());
                }
                Op::Mean(a) => {
                    let a = *a;
                    let (ar, ac) = (self.values[a as usize].rows, self.values[a as usize].cols);
                    let gv = g.data[0] / (ar * ac) as f64;
                    self.accum(&mut grads, a, || {
                        Tensor::from_vec(ar, ac, vec![gv; ar * ac])
                    });
                }
                Op::Norm(a) => {
                    let a = *a;
                    let xv = &self.values[a as usize];
                    let nval = self.values[id].data[0];
                    let scale = if nval > 0.0 { g.data[0] / nval } else { 0.0 };
                    let t = Tensor::from_vec(
                        xv.rows,
                        xv.cols,
                        xv.data.iter().map(|v| v * scale).collect(),
                    );
                    self.accum(&mut grads, a, || t.clone());
                }
                Op::Atan2 { y, x } => {
                    let (y, x) = (*y, *x);
                    let yv = &self.values[y as usize];
                    let xv = &self.values[x as usize];
                    let mut dy = Tensor::zeros(yv.rows, yv.cols);
                    let mut dx = Tensor::zeros(yv.rows, yv.cols);
                    for i in 0..yv.data.len() {
                        let denom = yv.data[i] * yv.data[i] + xv.data[i] * xv.data[i];
                        if denom > 0.0 {
                            dy.data[i] = g.data[i] * xv.data[i] / denom;
                            dx.data[i] = -g.data[i] * yv.data[i] / denom;
                        }
                    }
                    self.accum(&mut grads, y, || dy.clone());
                    self.accum(&mut grads, x, || dx.clone());
                }
                Op::WrapAngle(a) => {
                    self.accum(&mut grads, *a, || g.clone());
                }
            }
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], target: u32, make: impl FnOnce() -> Tensor) {
        if !self.needs(target) {
            return;
        }
        let slot = &mut grads[target as usize];
        match slot.take() {
            None => *slot = Some(make()),
            Some(mut existing) => {
                existing.add_in_place(&make());
                *slot = Some(existing);
            }
        }
    }
}

/// Validates that every element of `t` is finite, reporting `what` in the
/// error. Training uses this at loss boundaries where a hard panic would
/// be the wrong failure mode.
pub fn ensure_finite(t: &Tensor, what: &str, step: u64) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            step,
            msg: format!("{what} contains a non-finite value"),
        })
    }
}

/// Finite-difference gradient oracle. Exposed publicly so downstream
/// test suites can validate full pipelines against the same harness.
pub mod gradcheck {
    use super::*;

    pub const FD_STEP: f64 = 1e-5;

    /// Central-difference gradient oracle. `build` reconstructs the loss
    /// from leaf tensors so it can be replayed under perturbation.
    /// Relative error uses a unit-guarded denominator so near-zero
    /// gradient entries are compared absolutely.
    pub fn max_rel_err(
        build: &dyn Fn(&mut Tape, &[Var]) -> Var,
        leaves: &[Tensor],
    ) -> f64 {
        let eval = |tensors: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = tensors.iter().map(|t| tape.param(t.clone())).collect();
            let loss = build(&mut tape, &vars);
            tape.value(loss).item()
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let mut grads = tape.backward(loss);
        let analytic: Vec<Tensor> = vars.iter().map(|v| grads.take(*v)).collect();

        let mut worst = 0.0f64;
        for (li, leaf) in leaves.iter().enumerate() {
            for idx in 0..leaf.len() {
                let mut plus = leaves.to_vec();
                plus[li].data_mut()[idx] += FD_STEP;
                let mut minus = leaves.to_vec();
                minus[li].data_mut()[idx] -= FD_STEP;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
                let a = analytic[li].data()[idx];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
                if rel > worst {
                    worst = rel;
                }
            }
        }
        worst
    }
}
