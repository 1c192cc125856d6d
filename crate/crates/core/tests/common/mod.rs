#![allow(dead_code)]

use mmga_core::config::{DatasetConfig, TrainConfig};
use mmga_core::graph::SocialGraph;
use mmga_core::model::{ModelConfig, ParamStore};
use mmga_core::objectives::PairHeadParams;
use mmga_core::tape::Mat;
use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small model over `stat_dim` node features.
pub fn model(stat_dim: usize, embed_dim: usize, gnn_layers: usize) -> ModelConfig {
    ModelConfig {
        embed_dim,
        n_layers: 1,
        n_heads: 2,
        patch_size: 4,
        mlp_ratio: 2,
        dropout: 0.0,
        gnn_layers,
        head_hidden: 8,
        gnn_norm: true,
        stat_dim,
        vocab_size: 10,
        max_tokens: 8,
        image_shape: [1, 8, 8],
    }
}

/// A small generator config without degree correction.
pub fn small_dataset(n_users: usize, k_topics: usize, seed: u64) -> DatasetConfig {
    DatasetConfig {
        n_users,
        k_topics,
        p_in: 0.3,
        p_out: 0.05,
        posts_per_user: 2,
        vocab_size: 16,
        max_tokens: 8,
        min_tokens: 3,
        image_height: 8,
        image_width: 8,
        stat_dim: 4,
        vocab_concentration: 0.6,
        glyph_noise: 0.5,
        popularity_spread: 0.0,
        seed,
        ..DatasetConfig::default()
    }
}

/// Training config sized for `small_dataset`.
pub fn small_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 8,
        gc_pairs: 8,
        seed,
        embed_dim: 8,
        n_layers: 1,
        n_heads: 2,
        patch_size: 4,
        head_hidden: 8,
        ..TrainConfig::default()
    }
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

pub fn head_oracle(e_u: &[f64], e_v: &[f64], h: &PairHeadParams) -> f64 {
    let cat: Vec<f64> = e_u.iter().chain(e_v).copied().collect();
    let hidden: Vec<f64> = (0..h.w1.nrows())
        .map(|j| {
            let z: f64 = (0..cat.len()).map(|k| h.w1[[j, k]] * cat[k]).sum::<f64>() + h.b1[[0, j]];
            z.max(0.0)
        })
        .collect();
    let logits: Vec<f64> = (0..2)
        .map(|c| {
            let z: f64 = hidden.iter().enumerate().map(|(j, x)| h.w2[[c, j]] * x).sum::<f64>() + h.b2[[0, c]];
            z.max(0.0)
        })
        .collect();
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    e1 / (e0 + e1)
}

/// Fraction of (pos, neg) pairs ordered correctly, ties counting half.
pub fn auc_oracle(pos: &[f64], neg: &[f64]) -> f64 {
    let mut twice = 0u64;
    for p in pos {
        for n in neg {
            twice += if p > n { 2 } else if p == n { 1 } else { 0 };
        }
    }
    twice as f64 / (2 * pos.len() * neg.len()) as f64
}

/// Mean label-smoothed cross-entropy written out per class.
pub fn lm_oracle(logits: &Mat, targets: &[usize], eps: f64) -> f64 {
    let v = logits.ncols() as f64;
    let mut total = 0.0;
    for (row, &t) in logits.rows().into_iter().zip(targets) {
        let z: Vec<f64> = row.to_vec();
        let lse = log_sum_exp(&z);
        for (c, &zc) in z.iter().enumerate() {
            let q = if c == t { 1.0 - eps + eps / v } else { eps / v };
            total -= q * (zc - lse);
        }
    }
    total / targets.len() as f64
}

/// Symmetric InfoNCE over cosine similarities, one loop per direction.
pub fn ita_oracle(img: &Mat, txt: &Mat, tau: f64) -> f64 {
    let b = img.nrows();
    let unit = |m: &Mat, k: usize| {
        let n = m.row(k).dot(&m.row(k)).sqrt() + 1e-8;
        m.row(k).mapv(|x| x / n)
    };
    let sim: Vec<Vec<f64>> = (0..b)
        .map(|a| (0..b).map(|c| unit(img, a).dot(&unit(txt, c)) / tau).collect())
        .collect();
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    for k in 0..b {
        i2t += log_sum_exp(&sim[k]) - sim[k][k];
        let col: Vec<f64> = (0..b).map(|a| sim[a][k]).collect();
        t2i += log_sum_exp(&col) - sim[k][k];
    }
    0.5 * (i2t + t2i) / b as f64
}

/// Mean squared error over the masked rows.
pub fn nfm_oracle(pred: &Mat, truth: &Mat, masked: &[usize]) -> f64 {
    let d = pred.ncols();
    let mut sum = 0.0;
    for &u in masked {
        for j in 0..d {
            sum += (pred[[u, j]] - truth[[u, j]]).powi(2);
        }
    }
    sum / (masked.len() * d) as f64
}

/// Binary cross-entropy of sigmoid inner products.
pub fn gsm_oracle(emb: &Mat, pos: &[(u32, u32)], neg: &[(u32, u32)]) -> f64 {
    let score = |&(u, v): &(u32, u32)| sigmoid(emb.row(u as usize).dot(&emb.row(v as usize)));
    let sum: f64 = pos.iter().map(|p| -score(p).ln()).sum::<f64>() + neg.iter().map(|p| -(1.0 - score(p)).ln()).sum::<f64>();
    sum / (pos.len() + neg.len()) as f64
}

/// Binary cross-entropy of the pair head over labelled pairs.
pub fn gc_oracle(emb: &Mat, pos: &[(u32, u32)], neg: &[(u32, u32)], head: &PairHeadParams) -> f64 {
    let prob = |&(u, v): &(u32, u32)| {
        head_oracle(
            emb.row(u as usize).as_slice().unwrap(),
            emb.row(v as usize).as_slice().unwrap(),
            head,
        )
    };
    let sum: f64 = pos.iter().map(|p| bce(prob(p), 1.0)).sum::<f64>() + neg.iter().map(|p| bce(prob(p), 0.0)).sum::<f64>();
    sum / (pos.len() + neg.len()) as f64
}

pub fn random_pairs(r: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<(u32, u32)> {
    (0..count)
        .map(|_| {
            let u = r.random_range(0..n);
            let v = (u + r.random_range(1..n)) % n;
            (u as u32, v as u32)
        })
        .collect()
}

pub fn random_head(r: &mut ChaCha8Rng, d: usize, hidden: usize) -> PairHeadParams {
    PairHeadParams {
        w1: random_mat(r, hidden, 2 * d),
        b1: random_mat(r, 1, hidden),
        w2: random_mat(r, 2, hidden),
        b2: random_mat(r, 1, 2),
    }
}

pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> SocialGraph {
    let mut edges = Vec::new();
    for u in 0..n as u32 {
        for v in u + 1..n as u32 {
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    SocialGraph::from_edges(n, edges).unwrap()
}

pub fn path_graph(n: usize) -> SocialGraph {
    SocialGraph::from_edges(n, (0..n as u32 - 1).map(|i| (i, i + 1))).unwrap()
}

/// Inputs of the graph encoder on a random graph.
pub struct GraphInputs {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub x: Mat,
    pub ri: Mat,
    pub rt: Mat,
    pub graph: SocialGraph,
}

pub fn graph_inputs(seed: u64, n: usize, p: f64, layers: usize) -> GraphInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = model(3, 8, layers);
    let mut params = ParamStore::init(&cfg, seed);
    // larger gate weights so that gates are far from uniform
    for k in 0..layers {
        *params.get_mut(&format!("graph.gate.{k}.w")).unwrap() = random_mat(&mut rng, 1, cfg.gate_width());
    }
    GraphInputs {
        x: random_mat(&mut rng, n, 3),
        ri: random_mat(&mut rng, n, 8),
        rt: random_mat(&mut rng, n, 8),
        graph: random_graph(&mut rng, n, p),
        cfg,
        params,
    }
}

/// Row `i` of the result is row `inv[i]` of `m`, where `perm[inv[i]] = i`.
pub fn permute_rows(m: &Mat, perm: &[usize]) -> Mat {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    m.select(Axis(0), &inv)
}
