//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation as it is evaluated; [`Tape::backward`]
//! then walks the record in reverse and accumulates gradients. Besides the
//! usual dense algebra the tape has fused operations for the pieces of the
//! model that would be slow or memory hungry when spelled out elementwise:
//! multi-head attention over packed or padded sequences, per-edge gate
//! logits, neighborhood softmax and gated propagation, and the losses.
//!
//! Neighborhood reductions in the forward pass sum their terms in sorted
//! order, so relabelling the nodes of a graph yields bit-identical results.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

use crate::graph::Csr;
use crate::par;

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row layout of a batch of sequences stacked into one matrix. Sequence `s`
/// occupies rows `starts[s]..starts[s] + lens[s]`; only its first `valid[s]`
/// rows may be attended to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    pub starts: Vec<usize>,
    pub lens: Vec<usize>,
    pub valid: Vec<usize>,
}

impl SeqLayout {
    /// Sequences stored back to back with no padding.
    pub fn packed(lens: &[usize]) -> Self {
        let mut starts = Vec::with_capacity(lens.len());
        let mut at = 0;
        for &l in lens {
            starts.push(at);
            at += l;
        }
        SeqLayout {
            starts,
            lens: lens.to_vec(),
            valid: lens.to_vec(),
        }
    }

    /// Every sequence padded to `len` rows.
    pub fn padded(len: usize, valid: &[usize]) -> Self {
        SeqLayout {
            starts: (0..valid.len()).map(|s| s * len).collect(),
            lens: vec![len; valid.len()],
            valid: valid.to_vec(),
        }
    }

    pub fn n_seqs(&self) -> usize {
        self.starts.len()
    }

    pub fn total_rows(&self) -> usize {
        self.starts
            .last()
            .map(|&s| s + self.lens[self.lens.len() - 1])
            .unwrap_or(0)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        qkv: Var,
        layout: Arc<SeqLayout>,
        heads: usize,
        probs: Vec<Vec<f64>>,
    },
    Gather {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SegmentMean {
        x: Var,
        groups: Arc<Vec<Vec<usize>>>,
    },
    RowDot(Var, Var),
    RowNormalize {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    Transpose(Var),
    GateLogits {
        x: Var,
        ri: Var,
        rt: Var,
        w: Var,
        b: Var,
        csr: Arc<Csr>,
    },
    SegmentSoftmax {
        logits: Var,
        csr: Arc<Csr>,
    },
    Propagate {
        h: Var,
        a: Var,
        csr: Arc<Csr>,
    },
    SoftmaxXent {
        logits: Var,
        targets: Arc<Vec<usize>>,
        eps: f64,
        probs: Mat,
    },
    BceLogits {
        z: Var,
        y: Arc<Vec<f64>>,
    },
    PairBce {
        logits: Var,
        y: Arc<Vec<f64>>,
    },
    Mse {
        pred: Var,
        target: Arc<Mat>,
    },
    WeightedSum(Vec<(Var, f64)>),
    SumAll(Var),
    MaskRows {
        x: Var,
        fill: Var,
        rows: Arc<Vec<usize>>,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Lower clamp applied to pair probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

const LN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]. Only leaves retain their gradient.
pub struct Grads {
    inner: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.inner.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.inner.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sorted_sum(buf: &mut [f64]) -> f64 {
    buf.sort_unstable_by(f64::total_cmp);
    buf.iter().sum()
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044_715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn scalar_of(g: &Mat) -> f64 {
    g[[0, 0]]
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`, the usual layout for `[out, in]` weight matrices.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulT(a, b))
    }

    /// Add a `[1, m]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    /// `x · wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul_t(x, w);
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| gelu_parts(x).0);
        self.push(out, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Row-wise layer normalization with `[1, m]` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.dim();
        let mut xhat = Mat::zeros((n, m));
        let stats = par::map_range(n, |i| {
            let row = xv.row(i);
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            (mean, 1.0 / (var + LN_EPS).sqrt())
        });
        let inv_std: Vec<f64> = stats.iter().map(|s| s.1).collect();
        for (i, mut r) in xhat.outer_iter_mut().enumerate() {
            let (mean, is) = stats[i];
            r.iter_mut()
                .zip(xv.row(i).iter())
                .for_each(|(o, &v)| *o = (v - mean) * is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head self-attention. `qkv` is `[rows, 3d]` holding query, key
    /// and value projections side by side; the output is `[rows, d]`. Keys
    /// past a sequence's valid length are masked out.
    pub fn attention(&mut self, qkv: Var, layout: Arc<SeqLayout>, heads: usize) -> Var {
        let qv = self.value(qkv);
        let (rows, w3) = qv.dim();
        assert_eq!(w3 % 3, 0, "qkv width must be 3d");
        let d = w3 / 3;
        assert_eq!(d % heads, 0, "d must be divisible by heads");
        assert_eq!(layout.total_rows(), rows, "layout does not cover qkv");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let per_seq = par::map_range(layout.n_seqs(), |s| {
            let (st, len, valid) = (layout.starts[s], layout.lens[s], layout.valid[s]);
            let mut out = vec![0.0; len * d];
            let mut probs = vec![0.0; heads * len * valid];
            let mut scores = vec![0.0; valid];
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                for i in 0..len {
                    let qi = qv.slice(s![st + i, qo..qo + dh]);
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..valid {
                        let kj = qv.slice(s![st + j, ko..ko + dh]);
                        scores[j] = qi.dot(&kj) * scale;
                        mx = mx.max(scores[j]);
                    }
                    let mut z = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - mx).exp();
                        z += *sc;
                    }
                    let p = &mut probs[(h * len + i) * valid..(h * len + i + 1) * valid];
                    for j in 0..valid {
                        p[j] = scores[j] / z;
                        let vj = qv.slice(s![st + j, vo..vo + dh]);
                        let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                        o.iter_mut().zip(vj.iter()).for_each(|(o, &v)| *o += p[j] * v);
                    }
                }
            }
            (out, probs)
        });
        let mut out = Mat::zeros((rows, d));
        let mut probs = Vec::with_capacity(per_seq.len());
        for (s, (o, p)) in per_seq.into_iter().enumerate() {
            let st = layout.starts[s];
            let len = layout.lens[s];
            out.slice_mut(s![st..st + len, ..])
                .assign(&ndarray::ArrayView2::from_shape((len, d), &o).expect("block shape"));
            probs.push(p);
        }
        self.push(
            out,
            Op::Attention {
                qkv,
                layout,
                heads,
                probs,
            },
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let out = xv.select(Axis(0), &idx);
        self.push(out, Op::Gather { x, idx })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Mean of the listed rows for each group; empty groups give zero rows.
    pub fn segment_mean(&mut self, x: Var, groups: Arc<Vec<Vec<usize>>>) -> Var {
        let xv = self.value(x);
        let m = xv.ncols();
        let mut out = Mat::zeros((groups.len(), m));
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let mut row = out.row_mut(g);
            for &r in members {
                row += &xv.row(r);
            }
            row /= members.len() as f64;
        }
        self.push(out, Op::SegmentMean { x, groups })
    }

    /// `[n, 1]` column of row-wise inner products.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = (av * bv).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::RowDot(a, b))
    }

    /// `x / (‖x‖ + eps)` per row.
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let norms: Vec<f64> = xv.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut out = xv.clone();
        for (mut r, &n) in out.outer_iter_mut().zip(norms.iter()) {
            r /= n + eps;
        }
        self.push(out, Op::RowNormalize { x, eps, norms })
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).t().as_standard_layout().into_owned();
        self.push(out, Op::Transpose(x))
    }

    /// One logit per directed edge u→v:
    /// `w · (x_u ‖ x_v ‖ ri_u ‖ rt_u ‖ ri_v ‖ rt_v) + b`.
    pub fn gate_logits(&mut self, x: Var, ri: Var, rt: Var, w: Var, b: Var, csr: Arc<Csr>) -> Var {
        let (xv, iv, tv, wv) = (self.value(x), self.value(ri), self.value(rt), self.value(w));
        let (dx, di, dt) = (xv.ncols(), iv.ncols(), tv.ncols());
        assert_eq!(wv.len(), 2 * dx + 2 * di + 2 * dt, "gate weight width");
        let wrow = wv.row(0);
        let bias = self.value(b)[[0, 0]];
        let blocks = gate_blocks(dx, di, dt);
        let vals = par::map_range(csr.n_directed(), |e| {
            let (u, v) = (csr.sources[e], csr.targets[e]);
            let parts = [
                xv.row(u),
                xv.row(v),
                iv.row(u),
                tv.row(u),
                iv.row(v),
                tv.row(v),
            ];
            let mut z = bias;
            for (p, &(off, len)) in parts.iter().zip(blocks.iter()) {
                z += p.dot(&wrow.slice(s![off..off + len]));
            }
            z
        });
        let out = Mat::from_shape_vec((vals.len(), 1), vals).expect("column");
        self.push(
            out,
            Op::GateLogits {
                x,
                ri,
                rt,
                w,
                b,
                csr,
            },
        )
    }

    /// Softmax of edge logits over each node's outgoing edges.
    pub fn segment_softmax(&mut self, logits: Var, csr: Arc<Csr>) -> Var {
        let lv = self.value(logits);
        let per_node = par::map_range(csr.n_nodes(), |u| {
            let r = csr.edge_range(u);
            let mx = r.clone().map(|e| lv[[e, 0]]).fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = r.clone().map(|e| (lv[[e, 0]] - mx).exp()).collect();
            let mut buf = ex.clone();
            let z = sorted_sum(&mut buf);
            ex.into_iter().map(|v| v / z).collect::<Vec<_>>()
        });
        let flat: Vec<f64> = per_node.into_iter().flatten().collect();
        let out = Mat::from_shape_vec((flat.len(), 1), flat).expect("column");
        self.push(out, Op::SegmentSoftmax { logits, csr })
    }

    /// `h'_u = h_u + Σ_{e=u→v} a_e · h_v`.
    pub fn propagate(&mut self, h: Var, a: Var, csr: Arc<Csr>) -> Var {
        let (hv, av) = (self.value(h), self.value(a));
        let (n, d) = hv.dim();
        assert_eq!(n, csr.n_nodes(), "node count");
        assert_eq!(av.nrows(), csr.n_directed(), "edge count");
        let mut out = hv.clone();
        let data = out.as_slice_mut().expect("standard layout");
        par::for_each_row(data, d, |u, row| {
            let r = csr.edge_range(u);
            if r.is_empty() {
                return;
            }
            let mut buf = Vec::with_capacity(r.len());
            for (j, o) in row.iter_mut().enumerate() {
                buf.clear();
                buf.extend(r.clone().map(|e| av[[e, 0]] * hv[[csr.targets[e], j]]));
                *o += sorted_sum(&mut buf);
            }
        });
        self.push(out, Op::Propagate { h, a, csr })
    }

    /// Mean cross-entropy of row softmaxes against label-smoothed targets:
    /// the true class gets `1 - eps + eps/V`, every other class `eps/V`.
    /// Zero rows give a loss of 0.
    pub fn softmax_xent(&mut self, logits: Var, targets: Arc<Vec<usize>>, eps: f64) -> Var {
        let lv = self.value(logits);
        let (n, v) = lv.dim();
        assert_eq!(n, targets.len(), "one target per row");
        let mut probs = Mat::zeros((n, v));
        let mut total = 0.0;
        for i in 0..n {
            let row = lv.row(i);
            let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            let mut l = 0.0;
            for (c, &x) in row.iter().enumerate() {
                let logp = x - lse;
                probs[[i, c]] = logp.exp();
                let q = if c == targets[i] { 1.0 - eps + eps / v as f64 } else { eps / v as f64 };
                l -= q * logp;
            }
            total += l;
        }
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::SoftmaxXent {
                logits,
                targets,
                eps,
                probs,
            },
        )
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against labels `y`.
    pub fn bce_logits(&mut self, z: Var, y: Arc<Vec<f64>>) -> Var {
        let zv = self.value(z);
        assert_eq!(zv.len(), y.len(), "one label per score");
        let n = y.len();
        let total: f64 = zv.iter().zip(y.iter()).map(|(&z, &y)| softplus(z) - y * z).sum();
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        self.push(Mat::from_elem((1, 1), loss), Op::BceLogits { z, y })
    }

    /// Mean binary cross-entropy where the predicted probability is the
    /// second entry of a two-way softmax over each row of `logits`. The
    /// probability is clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
    pub fn pair_bce(&mut self, logits: Var, y: Arc<Vec<f64>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.ncols(), 2, "two logits per pair");
        assert_eq!(lv.nrows(), y.len(), "one label per pair");
        let n = y.len();
        let total: f64 = (0..n)
            .map(|i| {
                let p = sigmoid(lv[[i, 1]] - lv[[i, 0]]).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                -(y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln())
            })
            .sum();
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        self.push(Mat::from_elem((1, 1), loss), Op::PairBce { logits, y })
    }

    /// Mean squared error over all entries against a constant target.
    pub fn mse(&mut self, pred: Var, target: Arc<Mat>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim(), "mse shapes");
        let n = pv.len();
        let total: f64 = pv.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        self.push(Mat::from_elem((1, 1), loss), Op::Mse { pred, target })
    }

    /// `Σ wᵢ · sᵢ` over `[1, 1]` scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total: f64 = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        self.push(Mat::from_elem((1, 1), total), Op::WeightedSum(terms.to_vec()))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Mat::from_elem((1, 1), total), Op::SumAll(x))
    }

    /// Copy of `x` with the listed rows replaced by the `[1, m]` row `fill`.
    pub fn mask_rows(&mut self, x: Var, fill: Var, rows: Arc<Vec<usize>>) -> Var {
        let mut out = self.value(x).clone();
        let f = self.value(fill).row(0).to_owned();
        for &r in rows.iter() {
            out.row_mut(r).assign(&f);
        }
        self.push(out, Op::MaskRows { x, fill, rows })
    }

    /// Backpropagate from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        self.backward_seeded(vec![(root, Mat::from_elem((1, 1), 1.0))])
    }

    /// Backpropagate arbitrary upstream gradients. Used to chain tapes: the
    /// gradient that one tape computes for its input leaves seeds another.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Mat)>) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (v, g) in seeds {
            assert_eq!(self.shape(v), g.dim(), "seed shape");
            start = start.max(v.0);
            acc(&mut grads, v, g);
        }
        for i in (0..=start.min(self.nodes.len().saturating_sub(1))).rev() {
            if self.nodes.is_empty() {
                break;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Grads { inner: grads }
    }

    fn backward_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.dot(&self.value(*b).t());
                let gb = self.value(*a).t().dot(g);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::MatMulT(a, b) => {
                let ga = g.dot(self.value(*b));
                let gb = g.t().dot(self.value(*a));
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::AddRow(a, row) => {
                acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(grads, *a, g.clone());
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g * self.value(*b));
                acc(grads, *b, g * self.value(*a));
            }
            Op::Scale(a, c) => acc(grads, *a, g * *c),
            Op::Gelu(a) => {
                let mut ga = self.value(*a).mapv(|x| gelu_parts(x).1);
                ga *= g;
                acc(grads, *a, ga);
            }
            Op::Relu(a) => {
                let mut ga = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                ga *= g;
                acc(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma);
                acc(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = g * gam;
                let m = xhat.ncols() as f64;
                let mut gx = Mat::zeros(xhat.dim());
                let data = gx.as_slice_mut().expect("standard layout");
                par::for_each_row(data, xhat.ncols(), |r, out| {
                    let dh = dxhat.row(r);
                    let xh = xhat.row(r);
                    let mean_dh = dh.sum() / m;
                    let mean_dh_xh = dh.dot(&xh) / m;
                    for (j, o) in out.iter_mut().enumerate() {
                        *o = inv_std[r] * (dh[j] - mean_dh - xh[j] * mean_dh_xh);
                    }
                });
                acc(grads, *x, gx);
            }
            Op::Attention {
                qkv,
                layout,
                heads,
                probs,
            } => {
                let qv = self.value(*qkv);
                let (rows, w3) = qv.dim();
                let d = w3 / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let blocks = par::map_range(layout.n_seqs(), |sq| {
                    let (st, len, valid) = (layout.starts[sq], layout.lens[sq], layout.valid[sq]);
                    let mut gq = vec![0.0; len * w3];
                    let p_all = &probs[sq];
                    let mut dp = vec![0.0; valid];
                    for h in 0..*heads {
                        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                        for i in 0..len {
                            let go = g.slice(s![st + i, h * dh..(h + 1) * dh]);
                            let p = &p_all[(h * len + i) * valid..(h * len + i + 1) * valid];
                            let mut dot = 0.0;
                            for j in 0..valid {
                                let vj = qv.slice(s![st + j, vo..vo + dh]);
                                dp[j] = go.dot(&vj);
                                dot += dp[j] * p[j];
                                // dV_j += p_ij * dO_i
                                let base = j * w3 + vo;
                                for (k, &gv) in go.iter().enumerate() {
                                    gq[base + k] += p[j] * gv;
                                }
                            }
                            for j in 0..valid {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                // dQ_i += ds * K_j ; dK_j += ds * Q_i
                                for k in 0..dh {
                                    gq[i * w3 + qo + k] += ds * qv[[st + j, ko + k]];
                                    gq[j * w3 + ko + k] += ds * qv[[st + i, qo + k]];
                                }
                            }
                        }
                    }
                    gq
                });
                let mut gqkv = Mat::zeros((rows, w3));
                for (sq, b) in blocks.into_iter().enumerate() {
                    let (st, len) = (layout.starts[sq], layout.lens[sq]);
                    gqkv.slice_mut(s![st..st + len, ..])
                        .assign(&ndarray::ArrayView2::from_shape((len, w3), &b).expect("block"));
                }
                acc(grads, *qkv, gqkv);
            }
            Op::Gather { x, idx } => {
                let mut gx = Mat::zeros(self.value(*x).dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = gx.row_mut(src);
                    row += &g.row(r);
                }
                acc(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    acc(grads, p, g.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    acc(grads, p, g.slice(s![off..off + h, ..]).to_owned());
                    off += h;
                }
            }
            Op::SegmentMean { x, groups } => {
                let mut gx = Mat::zeros(self.value(*x).dim());
                for (gi, members) in groups.iter().enumerate() {
                    if members.is_empty() {
                        continue;
                    }
                    let share = g.row(gi).to_owned() / members.len() as f64;
                    for &r in members {
                        let mut row = gx.row_mut(r);
                        row += &share;
                    }
                }
                acc(grads, *x, gx);
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let gcol = g.column(0).insert_axis(Axis(1));
                acc(grads, *a, bv * &gcol);
                acc(grads, *b, av * &gcol);
            }
            Op::RowNormalize { x, eps, norms } => {
                let xv = self.value(*x);
                let mut gx = Mat::zeros(xv.dim());
                for (r, mut out) in gx.outer_iter_mut().enumerate() {
                    let n = norms[r];
                    let denom = n + eps;
                    let gr = g.row(r);
                    let xr = xv.row(r);
                    out.assign(&(&gr / denom));
                    if n > 0.0 {
                        let c = xr.dot(&gr) / (n * denom * denom);
                        out.scaled_add(-c, &xr);
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Transpose(x) => acc(grads, *x, g.t().as_standard_layout().into_owned()),
            Op::GateLogits {
                x,
                ri,
                rt,
                w,
                b,
                csr,
            } => {
                let (xv, iv, tv, wv) = (self.value(*x), self.value(*ri), self.value(*rt), self.value(*w));
                let (dx, di, dt) = (xv.ncols(), iv.ncols(), tv.ncols());
                let blocks = gate_blocks(dx, di, dt);
                let wrow = wv.row(0);
                let mut gw = Mat::zeros(wv.dim());
                let mut gx = Mat::zeros(xv.dim());
                let mut gi = Mat::zeros(iv.dim());
                let mut gt = Mat::zeros(tv.dim());
                let mut gb = 0.0;
                for e in 0..csr.n_directed() {
                    let ge = g[[e, 0]];
                    if ge == 0.0 {
                        continue;
                    }
                    gb += ge;
                    let (u, v) = (csr.sources[e], csr.targets[e]);
                    let srcs = [
                        xv.row(u),
                        xv.row(v),
                        iv.row(u),
                        tv.row(u),
                        iv.row(v),
                        tv.row(v),
                    ];
                    for (p, &(off, len)) in srcs.iter().zip(blocks.iter()) {
                        gw.slice_mut(s![0, off..off + len]).scaled_add(ge, p);
                    }
                    let wpart = |k: usize| wrow.slice(s![blocks[k].0..blocks[k].0 + blocks[k].1]);
                    gx.row_mut(u).scaled_add(ge, &wpart(0));
                    gx.row_mut(v).scaled_add(ge, &wpart(1));
                    gi.row_mut(u).scaled_add(ge, &wpart(2));
                    gt.row_mut(u).scaled_add(ge, &wpart(3));
                    gi.row_mut(v).scaled_add(ge, &wpart(4));
                    gt.row_mut(v).scaled_add(ge, &wpart(5));
                }
                acc(grads, *w, gw);
                acc(grads, *b, Mat::from_elem((1, 1), gb));
                acc(grads, *x, gx);
                acc(grads, *ri, gi);
                acc(grads, *rt, gt);
            }
            Op::SegmentSoftmax { logits, csr } => {
                let p = &node.value;
                let mut gl = Mat::zeros(p.dim());
                for u in 0..csr.n_nodes() {
                    let r = csr.edge_range(u);
                    let dot: f64 = r.clone().map(|e| p[[e, 0]] * g[[e, 0]]).sum();
                    for e in r {
                        gl[[e, 0]] = p[[e, 0]] * (g[[e, 0]] - dot);
                    }
                }
                acc(grads, *logits, gl);
            }
            Op::Propagate { h, a, csr } => {
                let (hv, av) = (self.value(*h), self.value(*a));
                let d = hv.ncols();
                let mut gh = g.clone();
                let data = gh.as_slice_mut().expect("standard layout");
                // h_v feeds h'_u through edge u→v, the reverse of v→u.
                par::for_each_row(data, d, |v, row| {
                    for e in csr.edge_range(v) {
                        let r = csr.reverse[e];
                        let u = csr.targets[e];
                        let w = av[[r, 0]];
                        row.iter_mut()
                            .zip(g.row(u).iter())
                            .for_each(|(o, &gu)| *o += w * gu);
                    }
                });
                let ga: Vec<f64> = par::map_range(csr.n_directed(), |e| {
                    g.row(csr.sources[e]).dot(&hv.row(csr.targets[e]))
                });
                acc(grads, *h, gh);
                acc(grads, *a, Mat::from_shape_vec((ga.len(), 1), ga).expect("column"));
            }
            Op::SoftmaxXent {
                logits,
                targets,
                eps,
                probs,
            } => {
                let (n, v) = probs.dim();
                if n == 0 {
                    return;
                }
                let scale = scalar_of(g) / n as f64;
                let mut gl = probs.clone();
                for (i, mut row) in gl.outer_iter_mut().enumerate() {
                    for (c, x) in row.iter_mut().enumerate() {
                        let q = if c == targets[i] { 1.0 - eps + eps / v as f64 } else { eps / v as f64 };
                        *x = (*x - q) * scale;
                    }
                }
                acc(grads, *logits, gl);
            }
            Op::BceLogits { z, y } => {
                let n = y.len();
                if n == 0 {
                    return;
                }
                let scale = scalar_of(g) / n as f64;
                let zv = self.value(*z);
                let gz = Mat::from_shape_fn(zv.dim(), |(i, j)| {
                    let k = i * zv.ncols() + j;
                    (sigmoid(zv[[i, j]]) - y[k]) * scale
                });
                acc(grads, *z, gz);
            }
            Op::PairBce { logits, y } => {
                let n = y.len();
                if n == 0 {
                    return;
                }
                let scale = scalar_of(g) / n as f64;
                let lv = self.value(*logits);
                let mut gl = Mat::zeros(lv.dim());
                for i in 0..n {
                    let p = sigmoid(lv[[i, 1]] - lv[[i, 0]]);
                    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                        continue;
                    }
                    let d = (p - y[i]) * scale;
                    gl[[i, 1]] = d;
                    gl[[i, 0]] = -d;
                }
                acc(grads, *logits, gl);
            }
            Op::Mse { pred, target } => {
                let n = target.len();
                if n == 0 {
                    return;
                }
                let scale = 2.0 * scalar_of(g) / n as f64;
                let gp = (self.value(*pred) - &**target) * scale;
                acc(grads, *pred, gp);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(grads, v, Mat::from_elem((1, 1), w * scalar_of(g)));
                }
            }
            Op::SumAll(x) => {
                let gx = Mat::from_elem(self.value(*x).dim(), scalar_of(g));
                acc(grads, *x, gx);
            }
            Op::MaskRows { x, fill, rows } => {
                let mut gx = g.clone();
                let mut gf = Mat::zeros((1, gx.ncols()));
                for &r in rows.iter() {
                    let mut f = gf.row_mut(0);
                    f += &g.row(r);
                    gx.row_mut(r).fill(0.0);
                }
                acc(grads, *x, gx);
                acc(grads, *fill, gf);
            }
        }
    }
}

/// (offset, width) of the six blocks in a gate weight row, in the order
/// x_u, x_v, ri_u, rt_u, ri_v, rt_v.
pub fn gate_blocks(dx: usize, di: usize, dt: usize) -> [(usize, usize); 6] {
    let widths = [dx, dx, di, dt, di, dt];
    let mut out = [(0, 0); 6];
    let mut off = 0;
    for (o, &w) in out.iter_mut().zip(widths.iter()) {
        *o = (off, w);
        off += w;
    }
    out
}
