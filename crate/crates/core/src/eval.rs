//! User representations, downstream probes and evaluation metrics.

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::OptimizerKind;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::SocialGraph;
use crate::model::encoders::{aggregate_user_modality, PostEncoding};
use crate::model::graph_encoder::{encode_graph, encode_graph_on};
use crate::model::{ModelConfig, ParamStore};
use crate::rng::{rng_from, stream_seed};
use crate::tape::{Mat, Tape};
use crate::train::{node_features, Optimizer, ParamGrads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slice {
    Graph,
    Image,
    Text,
}

impl Slice {
    pub const ALL: [Slice; 3] = [Slice::Graph, Slice::Image, Slice::Text];

    pub fn name(self) -> &'static str {
        match self {
            Slice::Graph => "graph",
            Slice::Image => "image",
            Slice::Text => "text",
        }
    }
}

/// `[n_users, 3d]` rows laid out as graph, image, text.
#[derive(Debug, Clone, PartialEq)]
pub struct UserRepresentation {
    pub r: Mat,
    pub d: usize,
}

impl UserRepresentation {
    pub fn from_parts(rg: &Mat, ri: &Mat, rt: &Mat) -> Result<Self> {
        let d = rg.ncols();
        if ri.ncols() != d || rt.ncols() != d || ri.nrows() != rg.nrows() || rt.nrows() != rg.nrows() {
            return Err(Error::Shape("modality embeddings disagree in shape".into()));
        }
        let r = ndarray::concatenate(ndarray::Axis(1), &[rg.view(), ri.view(), rt.view()]).expect("same rows");
        Ok(UserRepresentation { r, d })
    }

    fn range(&self, s: Slice) -> std::ops::Range<usize> {
        let k = Slice::ALL.iter().position(|&x| x == s).expect("listed");
        k * self.d..(k + 1) * self.d
    }

    pub fn slice(&self, s: Slice) -> Mat {
        self.r.slice(ndarray::s![.., self.range(s)]).to_owned()
    }

    /// Copy with the columns of `s` set to zero.
    pub fn zeroed(&self, s: Slice) -> Self {
        let mut out = self.clone();
        out.r.slice_mut(ndarray::s![.., self.range(s)]).fill(0.0);
        out
    }
}

fn check_compat(model: &ModelConfig, ds: &Dataset, graph: &SocialGraph) -> Result<()> {
    let m = &ds.meta;
    if model.stat_dim != m.stat_dim
        || model.vocab_size != m.vocab_size
        || model.max_tokens != m.max_tokens
        || model.image_shape != m.image_shape
    {
        return Err(Error::Shape("model configuration does not match the dataset".into()));
    }
    if graph.n_nodes() != ds.users.len() {
        return Err(Error::Shape(format!("graph has {} nodes for {} users", graph.n_nodes(), ds.users.len())));
    }
    Ok(())
}

/// Mean image and text embeddings of every user's posts.
pub fn user_modalities(params: &ParamStore, model: &ModelConfig, ds: &Dataset) -> Result<(Mat, Mat)> {
    let all: Vec<usize> = (0..ds.posts.len()).collect();
    let enc = PostEncoding::run(params, model, ds, &all, false, None)?;
    let groups = ds.posts_by_user();
    Ok((
        aggregate_user_modality(&enc.image, &groups),
        aggregate_user_modality(&enc.text, &groups),
    ))
}

/// Frozen-parameter representation of every user over `graph`.
pub fn user_representation(
    params: &ParamStore,
    model: &ModelConfig,
    ds: &Dataset,
    graph: &SocialGraph,
) -> Result<UserRepresentation> {
    check_compat(model, ds, graph)?;
    let (ri, rt) = user_modalities(params, model, ds)?;
    let rg = encode_graph(params, model, &node_features(ds), graph, &ri, &rt)?;
    UserRepresentation::from_parts(&rg, &ri, &rt)
}

// ----------------------------------------------------------------- metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    /// Mean F1 over classes that occur in the truth or the predictions.
    pub macro_f1: f64,
    /// `confusion[truth][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

pub fn eval_classification(predicted: &[usize], truth: &[usize], n_classes: usize) -> Result<ClassificationMetrics> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", predicted.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation split".into()));
    }
    if let Some(c) = predicted.iter().chain(truth).find(|&&c| c >= n_classes) {
        return Err(Error::InvalidArgument(format!("class {c} out of range")));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let mut f1s = Vec::new();
    for c in 0..n_classes {
        let tp = confusion[c][c] as f64;
        let support: usize = confusion[c].iter().sum();
        let predicted_c: usize = confusion.iter().map(|row| row[c]).sum();
        if support == 0 && predicted_c == 0 {
            continue;
        }
        f1s.push(2.0 * tp / (support + predicted_c) as f64);
    }
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / truth.len() as f64,
        macro_f1: f1s.iter().sum::<f64>() / f1s.len() as f64,
        confusion,
    })
}

/// Probability that a positive scores above a negative, ties counting one
/// half.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument("AUC needs positive and negative scores".into()));
    }
    if pos.iter().chain(neg).any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let mut sorted = neg.to_vec();
    sorted.sort_by(f64::total_cmp);
    // twice the number of (pos > neg) pairs plus the number of ties
    let mut doubled: u128 = 0;
    for &p in pos {
        let below = sorted.partition_point(|&n| n < p);
        let not_above = sorted.partition_point(|&n| n <= p);
        doubled += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(doubled as f64 / (2 * pos.len() as u128 * neg.len() as u128) as f64)
}

fn pair_scores(emb: &Mat, pairs: &[(u32, u32)]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|&(u, v)| {
            let (u, v) = (u as usize, v as usize);
            if u >= emb.nrows() || v >= emb.nrows() {
                return Err(Error::InvalidArgument(format!("pair ({u},{v}) out of range")));
            }
            Ok(emb.row(u).dot(&emb.row(v)))
        })
        .collect()
}

/// Link-prediction AUC with inner-product scores.
pub fn eval_link_auc(rg: &Mat, pos: &[(u32, u32)], neg: &[(u32, u32)]) -> Result<f64> {
    auc(&pair_scores(rg, pos)?, &pair_scores(rg, neg)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub connected: f64,
    pub random: f64,
    pub gap: f64,
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt() + 1e-8)
}

/// Mean cosine similarity over all edges against the same number of
/// uniformly drawn distinct-node pairs.
pub fn alignment_gap(emb: &Mat, graph: &SocialGraph, seed: u64) -> Result<AlignmentStats> {
    if graph.n_edges() == 0 || graph.n_nodes() < 2 || emb.nrows() != graph.n_nodes() {
        return Err(Error::InvalidArgument("alignment needs a non-empty graph matching the embeddings".into()));
    }
    let mean = |pairs: &mut dyn Iterator<Item = (usize, usize)>| {
        let (mut s, mut k) = (0.0, 0usize);
        for (u, v) in pairs {
            s += cosine(emb.row(u), emb.row(v));
            k += 1;
        }
        s / k as f64
    };
    let connected = mean(&mut graph.edges().iter().map(|&(u, v)| (u as usize, v as usize)));
    let mut rng = rng_from(stream_seed(seed, "alignment"));
    let n = graph.n_nodes();
    let random_pairs: Vec<(usize, usize)> = (0..graph.n_edges())
        .map(|_| {
            let u = rng.random_range(0..n);
            let mut v = rng.random_range(0..n - 1);
            if v >= u {
                v += 1;
            }
            (u, v)
        })
        .collect();
    let random = mean(&mut random_pairs.into_iter());
    Ok(AlignmentStats {
        connected,
        random,
        gap: connected - random,
    })
}

// ------------------------------------------------------------------ probes

/// Per-class shuffle, with `round(test_frac · n_c)` items of each class
/// going to the test side. Both sides are returned sorted.
pub fn stratified_split(labels: &[usize], test_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(Error::InvalidArgument(format!("test fraction {test_frac} not in (0, 1)")));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = rng_from(stream_seed(seed, "stratify"));
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let k = (test_frac * members.len() as f64).round() as usize;
        test.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Degenerate(format!(
            "split of {} items leaves an empty side",
            labels.len()
        )));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 300,
            learning_rate: 0.05,
            l2: 1e-3,
            test_frac: 0.3,
            seed: 0,
        }
    }
}

/// Softmax regression on standardized inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `[C, d]`
    pub w: Mat,
    /// `[1, C]`
    pub b: Mat,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LinearProbe {
    fn standardize(&self, x: &Mat) -> Mat {
        let mut z = x.clone();
        for (j, mut col) in z.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.scale[j]);
        }
        z
    }

    /// Fit on the rows `train` of `x`.
    pub fn fit(x: &Mat, labels: &[usize], n_classes: usize, train: &[usize], cfg: &ProbeConfig) -> Result<Self> {
        if x.nrows() != labels.len() {
            return Err(Error::Shape(format!("{} rows for {} labels", x.nrows(), labels.len())));
        }
        if train.is_empty() {
            return Err(Error::InvalidArgument("empty training split".into()));
        }
        let d = x.ncols();
        let xt = x.select(ndarray::Axis(0), train);
        let mut mean = vec![0.0; d];
        let mut scale = vec![1.0; d];
        for (j, col) in xt.columns().into_iter().enumerate() {
            let m = col.sum() / col.len() as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64;
            mean[j] = m;
            scale[j] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
        let mut probe = LinearProbe {
            w: Mat::zeros((n_classes, d)),
            b: Mat::zeros((1, n_classes)),
            mean,
            scale,
        };
        let z = Arc::new(probe.standardize(&xt));
        let y: Arc<Vec<usize>> = Arc::new(train.iter().map(|&i| labels[i]).collect());
        let mut store = ParamStore::new();
        store.insert("w", probe.w.clone());
        store.insert("b", probe.b.clone());
        let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.learning_rate);
        for _ in 0..cfg.steps {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let zx = tape.leaf((*z).clone());
            let logits = tape.linear(zx, p["w"], p["b"]);
            let loss = tape.softmax_xent(logits, y.clone(), 0.0);
            let g = tape.backward(loss);
            let mut grads = ParamGrads::new();
            let mut gw = g.get(p["w"]).cloned().expect("used");
            gw.scaled_add(cfg.l2, store.get("w").expect("present"));
            grads.insert("w".into(), gw);
            grads.insert("b".into(), g.get(p["b"]).cloned().expect("used"));
            opt.step(&mut store, &grads)?;
        }
        probe.w = store.get("w").expect("present").clone();
        probe.b = store.get("b").expect("present").clone();
        Ok(probe)
    }

    pub fn predict_proba(&self, x: &Mat) -> Mat {
        let mut logits = self.standardize(x).dot(&self.w.t()) + &self.b;
        for mut row in logits.rows_mut() {
            let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - mx).exp());
            let s = row.sum();
            row /= s;
        }
        logits
    }

    /// Most probable class per row; ties go to the lower class.
    pub fn predict(&self, x: &Mat) -> Vec<usize> {
        self.predict_proba(x)
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &p)| if p > best.1 { (c, p) } else { best })
                    .0
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Content,
    Fans,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Content => "content",
            Task::Fans => "fans",
        }
    }

    pub fn labels(self, ds: &Dataset) -> (Vec<usize>, usize) {
        match self {
            Task::Content => (ds.topic_labels(), ds.meta.k_topics),
            Task::Fans => (ds.fans_labels(), 2),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "content" => Ok(Task::Content),
            "fans" => Ok(Task::Fans),
            _ => Err(Error::InvalidArgument(format!("unknown task {s}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub metrics: ClassificationMetrics,
    /// Test AUC of the class-1 probability; binary tasks only.
    pub auc: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
}

/// Fit a probe on the train split of `x` and score it on the test split.
pub fn probe_eval(
    x: &Mat,
    labels: &[usize],
    n_classes: usize,
    train: &[usize],
    test: &[usize],
    cfg: &ProbeConfig,
) -> Result<(LinearProbe, ProbeResult)> {
    let probe = LinearProbe::fit(x, labels, n_classes, train, cfg)?;
    let xt = x.select(ndarray::Axis(0), test);
    let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let metrics = eval_classification(&probe.predict(&xt), &truth, n_classes)?;
    let auc = if n_classes == 2 {
        let p = probe.predict_proba(&xt);
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (k, &t) in truth.iter().enumerate() {
            if t == 1 {
                pos.push(p[[k, 1]]);
            } else {
                neg.push(p[[k, 1]]);
            }
        }
        if pos.is_empty() || neg.is_empty() {
            None
        } else {
            Some(auc(&pos, &neg)?)
        }
    } else {
        None
    };
    Ok((
        probe,
        ProbeResult {
            metrics,
            auc,
            n_train: train.len(),
            n_test: test.len(),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub task: Task,
    pub unfrozen: bool,
    pub full: ProbeResult,
    /// Probes on each single modality slice.
    pub ablation: Vec<(Slice, ProbeResult)>,
}

/// Frozen-encoder probing of `rep` on `task`, plus one probe per slice.
pub fn finetune(rep: &UserRepresentation, ds: &Dataset, task: Task, cfg: &ProbeConfig) -> Result<FinetuneReport> {
    let (labels, n_classes) = task.labels(ds);
    let (train, test) = stratified_split(&labels, cfg.test_frac, cfg.seed)?;
    let (_, full) = probe_eval(&rep.r, &labels, n_classes, &train, &test, cfg)?;
    let ablation = Slice::ALL
        .iter()
        .map(|&s| Ok((s, probe_eval(&rep.slice(s), &labels, n_classes, &train, &test, cfg)?.1)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FinetuneReport {
        task,
        unfrozen: false,
        full,
        ablation,
    })
}

/// Full fine-tuning: a linear head on the raw representation trained
/// jointly with every encoder parameter. The head starts from a frozen
/// probe. Returns the updated parameters and the head.
pub fn finetune_unfrozen(
    params: &ParamStore,
    model: &ModelConfig,
    ds: &Dataset,
    graph: &SocialGraph,
    task: Task,
    cfg: &ProbeConfig,
    steps: usize,
    learning_rate: f64,
) -> Result<(ParamStore, LinearProbe, FinetuneReport)> {
    let (labels, n_classes) = task.labels(ds);
    let (train, test) = stratified_split(&labels, cfg.test_frac, cfg.seed)?;
    let rep = user_representation(params, model, ds, graph)?;
    let start = LinearProbe::fit(&rep.r, &labels, n_classes, &train, cfg)?;
    // fold the standardization into the head
    let mut w = start.w.clone();
    for (j, mut col) in w.columns_mut().into_iter().enumerate() {
        col /= start.scale[j];
    }
    let shift = w.dot(&ndarray::Array1::from(start.mean.clone()));
    let b = &start.b - &shift.insert_axis(ndarray::Axis(0));

    let mut store = params.clone();
    store.insert("head.w", w);
    store.insert("head.b", b);
    let mut opt = Optimizer::new(OptimizerKind::Adam, learning_rate);
    let all: Vec<usize> = (0..ds.posts.len()).collect();
    let groups = Arc::new(ds.posts_by_user());
    let features = node_features(ds);
    let y = Arc::new(train.iter().map(|&i| labels[i]).collect::<Vec<_>>());
    let train_rows = Arc::new(train.clone());
    for _ in 0..steps {
        let enc = PostEncoding::run(&store, model, ds, &all, true, None)?;
        let mut tape = Tape::new();
        let p = store.bind_filtered(&mut tape, |n| n.starts_with("graph.") || n.starts_with("head."));
        let pi = tape.leaf(enc.image.clone());
        let pt = tape.leaf(enc.text.clone());
        let ri = tape.segment_mean(pi, groups.clone());
        let rt = tape.segment_mean(pt, groups.clone());
        let x = tape.leaf(features.clone());
        let out = encode_graph_on(&mut tape, &p, model, x, graph.csr(), ri, rt)?;
        let r = tape.concat_cols(&[out.embeddings, ri, rt]);
        let rows = tape.gather_rows(r, train_rows.clone());
        let logits = tape.linear(rows, p["head.w"], p["head.b"]);
        let loss = tape.softmax_xent(logits, y.clone(), 0.0);
        let g = tape.backward(loss);
        let mut grads: ParamGrads = p
            .iter()
            .filter_map(|(n, &v)| g.get(v).map(|m| (n.clone(), m.clone())))
            .collect();
        let zeros = || Mat::zeros(enc.image.dim());
        let gi = g.get(pi).cloned().unwrap_or_else(zeros);
        let gt = g.get(pt).cloned().unwrap_or_else(zeros);
        for (n, m) in enc.backward(&gi, &gt) {
            grads.insert(n, m);
        }
        opt.step(&mut store, &grads)?;
    }
    let head = LinearProbe {
        w: store.get("head.w").expect("present").clone(),
        b: store.get("head.b").expect("present").clone(),
        mean: vec![0.0; 3 * model.embed_dim],
        scale: vec![1.0; 3 * model.embed_dim],
    };
    let mut tuned = ParamStore::new();
    for (n, v) in store.iter().filter(|(n, _)| !n.starts_with("head.")) {
        tuned.insert(n.clone(), v.clone());
    }
    let rep = user_representation(&tuned, model, ds, graph)?;
    let xt = rep.r.select(ndarray::Axis(0), &test);
    let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let metrics = eval_classification(&head.predict(&xt), &truth, n_classes)?;
    let auc_value = if n_classes == 2 {
        let p = head.predict_proba(&xt);
        let pos: Vec<f64> = (0..truth.len()).filter(|&k| truth[k] == 1).map(|k| p[[k, 1]]).collect();
        let neg: Vec<f64> = (0..truth.len()).filter(|&k| truth[k] == 0).map(|k| p[[k, 1]]).collect();
        auc(&pos, &neg).ok()
    } else {
        None
    };
    let report = FinetuneReport {
        task,
        unfrozen: true,
        full: ProbeResult {
            metrics,
            auc: auc_value,
            n_train: train.len(),
            n_test: test.len(),
        },
        ablation: Vec::new(),
    };
    Ok((tuned, head, report))
}

/// Distinct pairs of `pairs` as a set, for exclusion lists.
pub fn pair_set(pairs: &[(u32, u32)]) -> HashSet<(u32, u32)> {
    pairs.iter().copied().collect()
}
