//! Pre-training losses and the pair-classification head.
//!
//! Each loss has a tape builder (`*_on`) used during training and a plain
//! function over matrices for evaluation and testing.

use std::sync::Arc;

use ndarray::{concatenate, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bound, ParamStore};
use crate::tape::{sigmoid, Mat, Tape, Var};

/// Norm offset used when normalizing embeddings for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// A loss value, flagged when it was computed over an empty selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub empty: bool,
}

// ---------------------------------------------------------------- builders

pub fn lm_loss_on(tape: &mut Tape, logits: Var, targets: &[usize], smoothing: f64) -> Var {
    tape.softmax_xent(logits, Arc::new(targets.to_vec()), smoothing)
}

/// Symmetric InfoNCE over cosine similarities: matched rows are positives,
/// every other row in the batch a negative.
pub fn ita_loss_on(tape: &mut Tape, image: Var, text: Var, temperature: f64) -> Var {
    let b = tape.value(image).nrows();
    let i = tape.row_normalize(image, COSINE_EPS);
    let t = tape.row_normalize(text, COSINE_EPS);
    let sim = tape.matmul_t(i, t);
    let sim = tape.scale(sim, 1.0 / temperature);
    let diag = Arc::new((0..b).collect::<Vec<_>>());
    let i2t = tape.softmax_xent(sim, diag.clone(), 0.0);
    let simt = tape.transpose(sim);
    let t2i = tape.softmax_xent(simt, diag, 0.0);
    tape.weighted_sum(&[(i2t, 0.5), (t2i, 0.5)])
}

/// Linear reconstruction of node features from graph embeddings, scored by
/// mean squared error on the masked rows.
pub fn nfm_loss_on(tape: &mut Tape, p: &Bound, graph_embed: Var, masked: &[usize], truth: &Mat) -> Var {
    let rows = tape.gather_rows(graph_embed, Arc::new(masked.to_vec()));
    let pred = tape.linear(rows, p["graph.nfm.w"], p["graph.nfm.b"]);
    let target = truth.select(Axis(0), masked);
    tape.mse(pred, Arc::new(target))
}

fn pair_index(pairs: &[(u32, u32)]) -> (Arc<Vec<usize>>, Arc<Vec<usize>>) {
    (
        Arc::new(pairs.iter().map(|p| p.0 as usize).collect()),
        Arc::new(pairs.iter().map(|p| p.1 as usize).collect()),
    )
}

/// Binary cross-entropy of `sigmoid(e_u · e_v)`: label 1 for `pos`, 0 for `neg`.
pub fn gsm_loss_on(tape: &mut Tape, graph_embed: Var, pos: &[(u32, u32)], neg: &[(u32, u32)]) -> Var {
    let all: Vec<(u32, u32)> = pos.iter().chain(neg).copied().collect();
    let (us, vs) = pair_index(&all);
    let eu = tape.gather_rows(graph_embed, us);
    let ev = tape.gather_rows(graph_embed, vs);
    let score = tape.row_dot(eu, ev);
    let y: Vec<f64> = pos.iter().map(|_| 1.0).chain(neg.iter().map(|_| 0.0)).collect();
    tape.bce_logits(score, Arc::new(y))
}

/// Two-way logits `ReLU(W2 · ReLU(W1 · (e_u ‖ e_v) + b1) + b2)` per pair,
/// with head parameters under `prefix` (`gc.image` or `gc.text`).
pub fn pair_logits_on(tape: &mut Tape, p: &Bound, prefix: &str, embed: Var, pairs: &[(u32, u32)]) -> Var {
    let (us, vs) = pair_index(pairs);
    let eu = tape.gather_rows(embed, us);
    let ev = tape.gather_rows(embed, vs);
    let cat = tape.concat_cols(&[eu, ev]);
    let h = tape.linear(cat, p[&format!("{prefix}.l1.w")], p[&format!("{prefix}.l1.b")]);
    let h = tape.relu(h);
    let o = tape.linear(h, p[&format!("{prefix}.l2.w")], p[&format!("{prefix}.l2.b")]);
    tape.relu(o)
}

/// Mean binary cross-entropy of the pair head's "connected" probability.
pub fn gc_loss_on(tape: &mut Tape, p: &Bound, prefix: &str, embed: Var, pos: &[(u32, u32)], neg: &[(u32, u32)]) -> Var {
    let all: Vec<(u32, u32)> = pos.iter().chain(neg).copied().collect();
    let logits = pair_logits_on(tape, p, prefix, embed, &all);
    let y: Vec<f64> = pos.iter().map(|_| 1.0).chain(neg.iter().map(|_| 0.0)).collect();
    tape.pair_bce(logits, Arc::new(y))
}

// ------------------------------------------------------------- plain forms

/// Label-smoothed cross-entropy averaged over rows. The true class gets
/// mass `1 - ε + ε/V`, the others `ε/V`.
pub fn lm_loss(logits: &Mat, targets: &[usize], smoothing: f64) -> Result<LossValue> {
    if logits.nrows() != targets.len() {
        return Err(Error::Shape(format!("{} logit rows for {} targets", logits.nrows(), targets.len())));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::InvalidArgument(format!("smoothing {smoothing} not in [0, 1)")));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite logits".into()));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= logits.ncols()) {
        return Err(Error::InvalidArgument(format!("target {t} out of range")));
    }
    if targets.is_empty() {
        return Ok(LossValue { value: 0.0, empty: true });
    }
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = lm_loss_on(&mut tape, l, targets, smoothing);
    Ok(LossValue {
        value: tape.scalar(loss),
        empty: false,
    })
}

pub fn ita_loss(image: &Mat, text: &Mat, temperature: f64) -> Result<f64> {
    if image.dim() != text.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", image.dim(), text.dim())));
    }
    if image.nrows() < 2 {
        return Err(Error::InvalidArgument("image-text batch needs at least 2 pairs".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let mut tape = Tape::new();
    let (i, t) = (tape.leaf(image.clone()), tape.leaf(text.clone()));
    let loss = ita_loss_on(&mut tape, i, t, temperature);
    Ok(tape.scalar(loss))
}

/// Mean squared error between predicted and true feature rows of the
/// masked nodes.
pub fn nfm_loss(predicted: &Mat, truth: &Mat, masked: &[usize]) -> Result<LossValue> {
    if predicted.dim() != truth.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", predicted.dim(), truth.dim())));
    }
    if masked.is_empty() {
        return Ok(LossValue { value: 0.0, empty: true });
    }
    if let Some(r) = masked.iter().find(|&&r| r >= truth.nrows()) {
        return Err(Error::InvalidArgument(format!("masked node {r} out of range")));
    }
    let mut tape = Tape::new();
    let p = tape.leaf(predicted.select(Axis(0), masked));
    let loss = tape.mse(p, Arc::new(truth.select(Axis(0), masked)));
    Ok(LossValue {
        value: tape.scalar(loss),
        empty: false,
    })
}

fn check_pairs(n: usize, pairs: &[(u32, u32)]) -> Result<()> {
    match pairs.iter().find(|p| p.0 as usize >= n || p.1 as usize >= n) {
        Some(p) => Err(Error::InvalidArgument(format!("pair ({},{}) out of range for {n} nodes", p.0, p.1))),
        None => Ok(()),
    }
}

pub fn gsm_loss(graph_embed: &Mat, pos: &[(u32, u32)], neg: &[(u32, u32)]) -> Result<f64> {
    check_pairs(graph_embed.nrows(), pos)?;
    check_pairs(graph_embed.nrows(), neg)?;
    let mut tape = Tape::new();
    let e = tape.leaf(graph_embed.clone());
    let loss = gsm_loss_on(&mut tape, e, pos, neg);
    Ok(tape.scalar(loss))
}

/// Weights of one graph-contrastive pair head.
#[derive(Debug, Clone, PartialEq)]
pub struct PairHeadParams {
    /// `[hidden, 2d]`
    pub w1: Mat,
    /// `[1, hidden]`
    pub b1: Mat,
    /// `[2, hidden]`
    pub w2: Mat,
    /// `[1, 2]`
    pub b2: Mat,
}

impl PairHeadParams {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        PairHeadParams {
            w1: Mat::zeros((hidden, 2 * d)),
            b1: Mat::zeros((1, hidden)),
            w2: Mat::zeros((2, hidden)),
            b2: Mat::zeros((1, 2)),
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Option<Self> {
        Some(PairHeadParams {
            w1: store.get(&format!("{prefix}.l1.w"))?.clone(),
            b1: store.get(&format!("{prefix}.l1.b"))?.clone(),
            w2: store.get(&format!("{prefix}.l2.w"))?.clone(),
            b2: store.get(&format!("{prefix}.l2.b"))?.clone(),
        })
    }

    fn bind(&self, tape: &mut Tape) -> Bound {
        let mut s = ParamStore::new();
        s.insert("head.l1.w", self.w1.clone());
        s.insert("head.l1.b", self.b1.clone());
        s.insert("head.l2.w", self.w2.clone());
        s.insert("head.l2.b", self.b2.clone());
        s.bind(tape)
    }
}

/// Probability that `u` and `v` are connected according to the pair head.
/// The concatenation order matters: `(e_u, e_v)` and `(e_v, e_u)` generally
/// give different values.
pub fn pair_probability(e_u: &[f64], e_v: &[f64], head: &PairHeadParams) -> Result<f64> {
    if e_u.len() != e_v.len() || head.w1.ncols() != 2 * e_u.len() {
        return Err(Error::Shape(format!(
            "embeddings of length {}/{} for a head expecting {}",
            e_u.len(),
            e_v.len(),
            head.w1.ncols()
        )));
    }
    let d = e_u.len();
    let emb = concatenate(
        Axis(0),
        &[
            Mat::from_shape_vec((1, d), e_u.to_vec()).expect("row").view(),
            Mat::from_shape_vec((1, d), e_v.to_vec()).expect("row").view(),
        ],
    )
    .expect("rows");
    let mut tape = Tape::new();
    let p = head.bind(&mut tape);
    let e = tape.leaf(emb);
    let logits = pair_logits_on(&mut tape, &p, "head", e, &[(0, 1)]);
    let l = tape.value(logits);
    Ok(sigmoid(l[[0, 1]] - l[[0, 0]]))
}

/// Mean binary cross-entropy of [`pair_probability`] over positive
/// (label 1) and negative (label 0) pairs.
pub fn graph_contrastive_loss(
    embed: &Mat,
    pos: &[(u32, u32)],
    neg: &[(u32, u32)],
    head: &PairHeadParams,
) -> Result<f64> {
    if pos.is_empty() && neg.is_empty() {
        return Err(Error::InvalidArgument("no pairs".into()));
    }
    check_pairs(embed.nrows(), pos)?;
    check_pairs(embed.nrows(), neg)?;
    if head.w1.ncols() != 2 * embed.ncols() {
        return Err(Error::Shape("head width does not match embeddings".into()));
    }
    let mut tape = Tape::new();
    let p = head.bind(&mut tape);
    let e = tape.leaf(embed.clone());
    let loss = gc_loss_on(&mut tape, &p, "head", e, pos, neg);
    Ok(tape.scalar(loss))
}

// ------------------------------------------------------------- combination

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lm: f64,
    pub ita: f64,
    pub nfm: f64,
    pub gsm: f64,
    pub gc_image: f64,
    pub gc_text: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lm: 1.0,
            ita: 1.0,
            nfm: 1.0,
            gsm: 1.0,
            gc_image: 1.0,
            gc_text: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [self.lm, self.ita, self.nfm, self.gsm, self.gc_image, self.gc_text]
    }
}

/// Component names in bundle order.
pub const COMPONENTS: [&str; 6] = ["lm", "ita", "nfm", "gsm", "gc_image", "gc_text"];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub lm: f64,
    pub ita: f64,
    pub nfm: f64,
    pub gsm: f64,
    pub gc_image: f64,
    pub gc_text: f64,
}

impl LossComponents {
    pub fn as_array(&self) -> [f64; 6] {
        [self.lm, self.ita, self.nfm, self.gsm, self.gc_image, self.gc_text]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub components: LossComponents,
    pub weights: LossWeights,
    pub total: f64,
}

/// Weighted sum of the components.
pub fn total_loss(components: LossComponents, weights: LossWeights) -> Result<LossBundle> {
    if weights.as_array().iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
    }
    let total = components
        .as_array()
        .iter()
        .zip(weights.as_array())
        .map(|(l, w)| if w == 0.0 { 0.0 } else { l * w })
        .sum();
    Ok(LossBundle {
        components,
        weights,
        total,
    })
}
