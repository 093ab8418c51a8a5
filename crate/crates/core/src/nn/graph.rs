//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] records every primitive applied during the forward pass.
//! [`Graph::backward`] replays the tape in reverse and returns the gradient of
//! a scalar output with respect to every node that requires one. Nodes are
//! appended in evaluation order, so each input index is strictly smaller than
//! the index of the node consuming it.

use std::collections::HashMap;

use super::tensor::{gemm, gemm_strided};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is broadcast against the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `[1 x n]` against `[m x n]`.
    Row,
    /// `[m x 1]` against `[m x n]`.
    Col,
    /// `[1 x 1]`.
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Gelu,
    Sigmoid,
    Softplus,
    Exp,
    Tanh,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Transpose(Var),
    Add {
        a: Var,
        b: Var,
        bc: Bcast,
    },
    Sub {
        a: Var,
        b: Var,
        bc: Bcast,
    },
    Mul {
        a: Var,
        b: Var,
        bc: Bcast,
    },
    Scale(Var, f64),
    Unary(Var, Unary),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    FocalSum {
        logits: Var,
        targets: Tensor,
        alpha: f64,
        gamma: f64,
    },
    GiouLossSum {
        pred: Var,
        target: Tensor,
    },
    L1Sum {
        a: Var,
        target: Tensor,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segs: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter. Repeated lookups of one name share a node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let t = store.require(name)?.clone();
        let v = self.input(t);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names and nodes of every parameter pulled into this graph.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn bcast(&self, a: Var, b: Var) -> Bcast {
        let (m, n) = self.shape(a);
        let (p, q) = self.shape(b);
        match (p, q) {
            _ if (p, q) == (m, n) => Bcast::Same,
            (1, 1) => Bcast::Scalar,
            (1, q) if q == n => Bcast::Row,
            (p, 1) if p == m => Bcast::Col,
            _ => panic!("cannot broadcast [{p}x{q}] against [{m}x{n}]"),
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (Tensor, Bcast) {
        let bc = self.bcast(a, b);
        let av = self.value(a);
        let bv = self.value(b);
        let n = av.cols();
        let mut out = av.clone();
        let bd = bv.data();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            let y = match bc {
                Bcast::Same => bd[i],
                Bcast::Row => bd[i % n],
                Bcast::Col => bd[i / n],
                Bcast::Scalar => bd[0],
            };
            *x = f(*x, y);
        }
        (out, bc)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (out, bc) = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add { a, b, bc }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (out, bc) = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub { a, b, bc }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (out, bc) = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul { a, b, bc }, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `a @ b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (m, k) = self.shape(a);
        let (br, bcn) = self.shape(b);
        let (kb, n) = if trans_b { (bcn, br) } else { (br, bcn) };
        assert_eq!(k, kb, "matmul inner dimensions {k} vs {kb}");
        let mut out = vec![0.0; m * n];
        let (rsb, csb) = if trans_b {
            (1, bcn as isize)
        } else {
            (bcn as isize, 1)
        };
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            rsb,
            csb,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out), Op::MatMul { a, b, trans_b }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Gelu => gelu,
            Unary::Sigmoid => sigmoid,
            Unary::Softplus => softplus,
            Unary::Exp => f64::exp,
            Unary::Tanh => f64::tanh,
        };
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, Op::Unary(a, kind), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization with `[1 x D]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (m, d) = (xv.rows(), xv.cols());
        assert_eq!(self.shape(gain), (1, d), "layer norm gain shape");
        assert_eq!(self.shape(bias), (1, d), "layer norm bias shape");
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * d];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Tensor::matrix(m, d, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Rows rescaled to unit L2 norm. Errors on a zero-norm row.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let n = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::Numerical(format!(
                    "cannot normalize row {r} with norm {n}"
                )));
            }
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::NormalizeRows { x, norms }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        assert!(start + len <= n, "column slice {start}+{len} out of {n}");
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        self.push(Tensor::matrix(m, len, out), Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.shape(p);
                assert_eq!(r, m, "concat_cols row mismatch");
                c
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::matrix(m, n, out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(c, n, "concat_rows column mismatch");
            out.extend_from_slice(self.value(p).data());
            m += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::matrix(m, n, out),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    /// Row gather (embedding lookup, row selection). Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            assert!(i < xv.rows(), "gather index {i} out of {}", xv.rows());
            out.extend_from_slice(xv.row(i));
        }
        let rg = self.rg(x);
        self.push(
            Tensor::matrix(idx.len(), n, out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention core `softmax(QKᵀ/√dₕ)V`.
    ///
    /// Columns split into `heads` groups of width `dₕ`. Rows split into `segs`
    /// equal segments that attend independently: query segment `s` only sees
    /// key/value segment `s`, which batches several sequences in one node.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segs: usize) -> Var {
        let (nq, d) = self.shape(q);
        let (nk, dk) = self.shape(k);
        assert_eq!(self.shape(v), (nk, d), "attention value shape");
        assert_eq!(dk, d, "attention key width");
        assert!(
            heads > 0 && d % heads == 0,
            "width {d} not divisible by {heads} heads"
        );
        assert!(
            segs > 0 && nq % segs == 0 && nk % segs == 0,
            "uneven attention segments"
        );
        let (sq, sk, dh) = (nq / segs, nk / segs, d / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; nq * d];
        let mut probs = vec![0.0; segs * heads * sq * sk];
        let di = d as isize;
        for s in 0..segs {
            for h in 0..heads {
                let oq = s * sq * d + h * dh;
                let ok = s * sk * d + h * dh;
                let pb = &mut probs[(s * heads + h) * sq * sk..(s * heads + h + 1) * sq * sk];
                gemm(sq, dh, sk, &qd[oq..], di, 1, &kd[ok..], 1, di, pb, 0.0);
                for row in pb.chunks_mut(sk) {
                    row.iter_mut().for_each(|x| *x *= scale);
                    softmax_in_place(row);
                }
                gemm_strided(
                    sq,
                    sk,
                    dh,
                    pb,
                    sk as isize,
                    1,
                    &vd[ok..],
                    di,
                    1,
                    &mut out[oq..],
                    di,
                    1,
                    0.0,
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Tensor::matrix(nq, d, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                segs,
                probs,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean over rows of `-log softmax(logits)[row, target[row]]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let (m, n) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), m, "one target per row");
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for r in 0..m {
            let row = &mut probs[r * n..(r + 1) * n];
            let lse = log_sum_exp(row);
            assert!(targets[r] < n, "target out of range");
            loss += lse - row[targets[r]];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Sum of elementwise focal sigmoid cross-entropy; `targets` in `[0, 1]`
    /// mix the positive and negative branches linearly.
    pub fn focal_sum(&mut self, logits: Var, targets: Tensor, alpha: f64, gamma: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), targets.len(), "focal targets shape");
        let s: f64 = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| focal_value(x, y, alpha, gamma))
            .sum();
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(s),
            Op::FocalSum {
                logits,
                targets,
                alpha,
                gamma,
            },
            rg,
        )
    }

    /// `Σ_i (1 - gIoU(pred_i, target_i))` over `[n x 4]` cxcywh boxes.
    pub fn giou_loss_sum(&mut self, pred: Var, target: Tensor) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.cols(), 4);
        assert_eq!(pv.shape(), target.shape(), "giou target shape");
        let s: f64 = (0..pv.rows())
            .map(|r| 1.0 - giou_with_grad(pv.row(r), target.row(r)).0)
            .sum();
        let rg = self.rg(pred);
        self.push(Tensor::scalar(s), Op::GiouLossSum { pred, target }, rg)
    }

    /// `Σ |a - target|`.
    pub fn l1_sum(&mut self, a: Var, target: Tensor) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), target.shape(), "l1 target shape");
        let s: f64 = av
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::L1Sum { a, target }, rg)
    }

    /// Gradient of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        self.backward_with(&[(loss, Tensor::scalar(1.0))])
    }

    /// Backpropagates the given upstream gradients (vector-Jacobian product).
    pub fn backward_with(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed gradient shape");
            accumulate(&mut grads, *v, g.clone());
            start = start.max(v.0 + 1);
        }
        for i in (0..start).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let av = self.value(a);
                let bv = self.value(b);
                let (m, k) = (av.rows(), av.cols());
                let n = g.cols();
                if self.rg(a) {
                    // dA = G @ op(B)^T
                    let mut da = vec![0.0; m * k];
                    if trans_b {
                        // op(B) = B^T with B: n×k, so op(B)^T = B.
                        gemm(
                            m,
                            n,
                            k,
                            g.data(),
                            n as isize,
                            1,
                            bv.data(),
                            k as isize,
                            1,
                            &mut da,
                            0.0,
                        );
                    } else {
                        // B: k×n, B^T via strides.
                        gemm(
                            m,
                            n,
                            k,
                            g.data(),
                            n as isize,
                            1,
                            bv.data(),
                            1,
                            n as isize,
                            &mut da,
                            0.0,
                        );
                    }
                    accumulate(grads, a, Tensor::matrix(m, k, da));
                }
                if self.rg(b) {
                    if trans_b {
                        // B: n×k, dB = G^T @ A
                        let mut db = vec![0.0; n * k];
                        gemm(
                            n,
                            m,
                            k,
                            g.data(),
                            1,
                            n as isize,
                            av.data(),
                            k as isize,
                            1,
                            &mut db,
                            0.0,
                        );
                        accumulate(grads, b, Tensor::matrix(n, k, db));
                    } else {
                        // B: k×n, dB = A^T @ G
                        let mut db = vec![0.0; k * n];
                        gemm(
                            k,
                            m,
                            n,
                            av.data(),
                            1,
                            k as isize,
                            g.data(),
                            n as isize,
                            1,
                            &mut db,
                            0.0,
                        );
                        accumulate(grads, b, Tensor::matrix(k, n, db));
                    }
                }
            }
            &Op::Transpose(a) => accumulate(grads, a, g.transpose()),
            &Op::Add { a, b, bc } => {
                if self.rg(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.rg(b) {
                    accumulate(grads, b, reduce_bcast(g, bc));
                }
            }
            &Op::Sub { a, b, bc } => {
                if self.rg(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.rg(b) {
                    accumulate(grads, b, reduce_bcast(g, bc).scale(-1.0));
                }
            }
            &Op::Mul { a, b, bc } => {
                let av = self.value(a);
                let bv = self.value(b);
                let n = av.cols();
                let bd = bv.data();
                let bat = |i: usize| match bc {
                    Bcast::Same => bd[i],
                    Bcast::Row => bd[i % n],
                    Bcast::Col => bd[i / n],
                    Bcast::Scalar => bd[0],
                };
                if self.rg(a) {
                    let mut da = g.clone();
                    for (i, x) in da.data_mut().iter_mut().enumerate() {
                        *x *= bat(i);
                    }
                    accumulate(grads, a, da);
                }
                if self.rg(b) {
                    let mut gb = g.clone();
                    for (x, y) in gb.data_mut().iter_mut().zip(av.data()) {
                        *x *= y;
                    }
                    accumulate(grads, b, reduce_bcast(&gb, bc));
                }
            }
            &Op::Scale(a, s) => accumulate(grads, a, g.scale(s)),
            &Op::Unary(a, kind) => {
                let xv = self.value(a);
                let yv = &node.value;
                let mut da = g.clone();
                for ((d, &x), &y) in da.data_mut().iter_mut().zip(xv.data()).zip(yv.data()) {
                    let local = match kind {
                        Unary::Gelu => gelu_grad(x),
                        Unary::Sigmoid => y * (1.0 - y),
                        Unary::Softplus => sigmoid(x),
                        Unary::Exp => y,
                        Unary::Tanh => 1.0 - y * y,
                    };
                    *d *= local;
                }
                accumulate(grads, a, da);
            }
            &Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut da = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dot: f64 = yr.iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for (d, &yy) in da.row_mut(r).iter_mut().zip(yr) {
                        *d = yy * (*d - dot);
                    }
                }
                accumulate(grads, a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, d) = (g.rows(), g.cols());
                let gv = self.value(*gain).data();
                if self.rg(*gain) {
                    let mut dg = vec![0.0; d];
                    for r in 0..m {
                        for c in 0..d {
                            dg[c] += g.data()[r * d + c] * xhat[r * d + c];
                        }
                    }
                    accumulate(grads, *gain, Tensor::matrix(1, d, dg));
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; d];
                    for r in 0..m {
                        for c in 0..d {
                            db[c] += g.data()[r * d + c];
                        }
                    }
                    accumulate(grads, *bias, Tensor::matrix(1, d, db));
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; m * d];
                    for r in 0..m {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..d {
                            let gh = gr[c] * gv[c];
                            s1 += gh;
                            s2 += gh * hr[c];
                        }
                        let inv_d = 1.0 / d as f64;
                        for c in 0..d {
                            let gh = gr[c] * gv[c];
                            dx[r * d + c] = rstd[r] * (gh - inv_d * s1 - hr[c] * inv_d * s2);
                        }
                    }
                    accumulate(grads, *x, Tensor::matrix(m, d, dx));
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dot: f64 = yr.iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for (d, &yy) in dx.row_mut(r).iter_mut().zip(yr) {
                        *d = (*d - yy * dot) / norms[r];
                    }
                }
                accumulate(grads, *x, dx);
            }
            &Op::SliceCols { x, start } => {
                let (m, n) = self.shape(x);
                let len = g.cols();
                let mut dx = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    dx.row_mut(r)[start..start + len].copy_from_slice(g.row(r));
                }
                accumulate(grads, x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (m, c) = self.shape(p);
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(m * c);
                        for r in 0..m {
                            dp.extend_from_slice(&g.row(r)[off..off + c]);
                        }
                        accumulate(grads, p, Tensor::matrix(m, c, dp));
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut off = 0;
                for &p in parts {
                    let (r, _) = self.shape(p);
                    if self.rg(p) {
                        let dp = g.data()[off * n..(off + r) * n].to_vec();
                        accumulate(grads, p, Tensor::matrix(r, n, dp));
                    }
                    off += r;
                }
            }
            Op::GatherRows { x, idx } => {
                let (m, n) = self.shape(*x);
                let mut dx = Tensor::zeros(&[m, n]);
                for (k, &i) in idx.iter().enumerate() {
                    for (d, &gg) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += gg;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segs,
                probs,
            } => {
                let (q, k, v, heads, segs) = (*q, *k, *v, *heads, *segs);
                let (nq, d) = self.shape(q);
                let nk = self.shape(k).0;
                let (sq, sk, dh) = (nq / segs, nk / segs, d / heads);
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (
                    self.value(q).data(),
                    self.value(k).data(),
                    self.value(v).data(),
                );
                let gd = g.data();
                let mut dq = vec![0.0; nq * d];
                let mut dk = vec![0.0; nk * d];
                let mut dv = vec![0.0; nk * d];
                let mut ds = vec![0.0; sq * sk];
                let di = d as isize;
                for s in 0..segs {
                    for h in 0..heads {
                        let oq = s * sq * d + h * dh;
                        let ok = s * sk * d + h * dh;
                        let pb = &probs[(s * heads + h) * sq * sk..(s * heads + h + 1) * sq * sk];
                        // dV = Pᵀ dO
                        gemm_strided(
                            sk,
                            sq,
                            dh,
                            pb,
                            1,
                            sk as isize,
                            &gd[oq..],
                            di,
                            1,
                            &mut dv[ok..],
                            di,
                            1,
                            0.0,
                        );
                        // dP = dO Vᵀ, then the softmax Jacobian.
                        gemm(sq, dh, sk, &gd[oq..], di, 1, &vd[ok..], 1, di, &mut ds, 0.0);
                        for (dr, pr) in ds.chunks_mut(sk).zip(pb.chunks(sk)) {
                            let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for (x, &p) in dr.iter_mut().zip(pr) {
                                *x = scale * p * (*x - dot);
                            }
                        }
                        gemm_strided(
                            sq,
                            sk,
                            dh,
                            &ds,
                            sk as isize,
                            1,
                            &kd[ok..],
                            di,
                            1,
                            &mut dq[oq..],
                            di,
                            1,
                            0.0,
                        );
                        gemm_strided(
                            sk,
                            sq,
                            dh,
                            &ds,
                            1,
                            sk as isize,
                            &qd[oq..],
                            di,
                            1,
                            &mut dk[ok..],
                            di,
                            1,
                            0.0,
                        );
                    }
                }
                if self.rg(q) {
                    accumulate(grads, q, Tensor::matrix(nq, d, dq));
                }
                if self.rg(k) {
                    accumulate(grads, k, Tensor::matrix(nk, d, dk));
                }
                if self.rg(v) {
                    accumulate(grads, v, Tensor::matrix(nk, d, dv));
                }
            }
            &Op::Sum(x) => {
                let shape = self.value(x).shape().to_vec();
                accumulate(grads, x, Tensor::full(&shape, g.item()));
            }
            &Op::Mean(x) => {
                let v = self.value(x);
                let shape = v.shape().to_vec();
                accumulate(grads, x, Tensor::full(&shape, g.item() / v.len() as f64));
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
            } => {
                let (m, n) = self.shape(*logits);
                let s = g.item() / m as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * n + t] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= s);
                accumulate(grads, *logits, Tensor::matrix(m, n, d));
            }
            Op::FocalSum {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let lv = self.value(*logits);
                let s = g.item();
                let mut d = lv.clone();
                for (v, &y) in d.data_mut().iter_mut().zip(targets.data()) {
                    *v = s * focal_grad(*v, y, *alpha, *gamma);
                }
                accumulate(grads, *logits, d);
            }
            Op::GiouLossSum { pred, target } => {
                let pv = self.value(*pred);
                let s = g.item();
                let mut d = Tensor::zeros(pv.shape());
                for r in 0..pv.rows() {
                    let (_, grad) = giou_with_grad(pv.row(r), target.row(r));
                    for c in 0..4 {
                        d.row_mut(r)[c] = -s * grad[c];
                    }
                }
                accumulate(grads, *pred, d);
            }
            Op::L1Sum { a, target } => {
                let av = self.value(*a);
                let s = g.item();
                let mut d = av.clone();
                for (v, &t) in d.data_mut().iter_mut().zip(target.data()) {
                    *v = s * sign(*v - t);
                }
                accumulate(grads, *a, d);
            }
        }
    }

    /// Gradients of every parameter in `store`; parameters this graph never
    /// touched get zeros so all per-example results share one key set.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> ParamStore {
        let mut out = store.zeros_like();
        for (name, v) in &self.params {
            if let (Some(g), Some(slot)) = (grads.wrt(*v), out.get_mut(name)) {
                *slot = g.clone();
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn reduce_bcast(g: &Tensor, bc: Bcast) -> Tensor {
    let (m, n) = (g.rows(), g.cols());
    match bc {
        Bcast::Same => g.clone(),
        Bcast::Row => {
            let mut out = vec![0.0; n];
            for r in 0..m {
                for (o, v) in out.iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            Tensor::matrix(1, n, out)
        }
        Bcast::Col => Tensor::matrix(m, 1, (0..m).map(|r| g.row(r).iter().sum()).collect()),
        Bcast::Scalar => Tensor::scalar(g.sum()),
    }
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

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln σ(x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// Focal sigmoid cross-entropy of one logit; `y` weights the positive branch.
///
/// Positive: `-α (1-p)^γ ln p`; negative: `-(1-α) p^γ ln(1-p)`, `p = σ(x)`.
pub fn focal_value(x: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let log_p = log_sigmoid(x);
    let log_q = log_sigmoid(-x);
    let pos = -alpha * (gamma * log_q).exp() * log_p;
    let neg = -(1.0 - alpha) * (gamma * log_p).exp() * log_q;
    y * pos + (1.0 - y) * neg
}

/// d focal_value / dx.
pub fn focal_grad(x: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    let q = sigmoid(-x);
    let log_p = log_sigmoid(x);
    let log_q = log_sigmoid(-x);
    // α q^γ (γ p ln p − q)
    let pos = alpha * (gamma * log_q).exp() * (gamma * p * log_p - q);
    // (1−α) p^γ (p − γ q ln q)
    let neg = (1.0 - alpha) * (gamma * log_p).exp() * (p - gamma * q * log_q);
    y * pos + (1.0 - y) * neg
}

/// gIoU of two cxcywh boxes and its gradient w.r.t. the first box.
pub(crate) fn giou_with_grad(p: &[f64], t: &[f64]) -> (f64, [f64; 4]) {
    let (x1, x2) = (p[0] - 0.5 * p[2], p[0] + 0.5 * p[2]);
    let (y1, y2) = (p[1] - 0.5 * p[3], p[1] + 0.5 * p[3]);
    let (tx1, tx2) = (t[0] - 0.5 * t[2], t[0] + 0.5 * t[2]);
    let (ty1, ty2) = (t[1] - 0.5 * t[3], t[1] + 0.5 * t[3]);

    let ap = (x2 - x1).max(0.0) * (y2 - y1).max(0.0);
    let at = (tx2 - tx1).max(0.0) * (ty2 - ty1).max(0.0);
    let iw_raw = x2.min(tx2) - x1.max(tx1);
    let ih_raw = y2.min(ty2) - y1.max(ty1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = ap + at - inter;
    let cw = x2.max(tx2) - x1.min(tx1);
    let ch = y2.max(ty2) - y1.min(ty1);
    let hull = cw * ch;

    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let ratio = if hull > 0.0 { union / hull } else { 1.0 };
    let giou = iou - 1.0 + ratio;

    // Partials w.r.t. corner coordinates [x1, x2, y1, y2].
    let mut d_inter = [0.0; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        if x1 > tx1 {
            d_inter[0] = -ih;
        }
        if x2 < tx2 {
            d_inter[1] = ih;
        }
        if y1 > ty1 {
            d_inter[2] = -iw;
        }
        if y2 < ty2 {
            d_inter[3] = iw;
        }
    }
    let (pw, ph) = ((x2 - x1).max(0.0), (y2 - y1).max(0.0));
    let d_ap = [-ph, ph, -pw, pw];
    let mut d_hull = [0.0; 4];
    if x1 <= tx1 {
        d_hull[0] = -ch;
    }
    if x2 >= tx2 {
        d_hull[1] = ch;
    }
    if y1 <= ty1 {
        d_hull[2] = -cw;
    }
    if y2 >= ty2 {
        d_hull[3] = cw;
    }
    let mut d_corner = [0.0; 4];
    for k in 0..4 {
        let d_union = d_ap[k] - d_inter[k];
        let d_iou = if union > 0.0 {
            (d_inter[k] * union - inter * d_union) / (union * union)
        } else {
            0.0
        };
        let d_ratio = if hull > 0.0 {
            (d_union * hull - union * d_hull[k]) / (hull * hull)
        } else {
            0.0
        };
        d_corner[k] = d_iou + d_ratio;
    }
    // x1 = cx - w/2, x2 = cx + w/2.
    let grad = [
        d_corner[0] + d_corner[1],
        d_corner[2] + d_corner[3],
        0.5 * (d_corner[1] - d_corner[0]),
        0.5 * (d_corner[3] - d_corner[2]),
    ];
    (giou, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut g = Graph::new();
        let a = g.input(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]));
        let b = g.input(Tensor::matrix(2, 3, vec![1., 0., 1., 0., 1., 0.]));
        let c = g.matmul_nt(a, b);
        assert_eq!(g.value(c).data(), &[4., 2., 10., 5.]);
    }

    #[test]
    fn shared_leaf_accumulates_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let grads = g.backward(y);
        assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.mul(x, c);
        let grads = g.backward(y);
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap().item(), 5.0);
    }

    #[test]
    fn normalize_rows_rejects_zero_row() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3]));
        assert!(g.normalize_rows(x).is_err());
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
