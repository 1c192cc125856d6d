//! Joint pre-training over the five objectives.

pub mod checkpoint;
pub mod gradcheck;
pub mod masking;
pub mod optim;

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::dataset::{sample_negative_pairs, Dataset};
use crate::error::{Error, Result};
use crate::graph::SocialGraph;
use crate::model::encoders::{lm_logits_batch, Noise, PostEncoding, TextBatch};
use crate::model::graph_encoder::encode_graph_on;
use crate::model::{ModelConfig, ParamStore};
use crate::objectives::{
    gc_loss_on, gsm_loss_on, ita_loss_on, lm_loss_on, nfm_loss_on, total_loss, LossBundle, LossComponents, LossWeights,
    COMPONENTS,
};
use crate::rng::{rng_from, stream_seed, subseed};
use crate::tape::{Mat, Tape};

pub use masking::{mask_edges, mask_node_features, mask_tokens, sample_rows};
pub use optim::{Optimizer, ParamGrads};

/// Per-column z-scores of the users' statistical features. Constant columns
/// become zero.
pub fn node_features(ds: &Dataset) -> Mat {
    let n = ds.users.len();
    let d = ds.meta.stat_dim;
    let mut x = Mat::from_shape_fn((n, d), |(i, j)| ds.users[i].stat_features[j]);
    for mut col in x.columns_mut() {
        let mean = col.sum() / n.max(1) as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n.max(1) as f64;
        let sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
        col.mapv_inplace(|v| (v - mean) / sd);
    }
    x
}

/// Everything a training step reads besides the parameters.
pub struct TrainData<'a> {
    pub ds: &'a Dataset,
    /// Graph visible during training.
    pub graph: SocialGraph,
    pub features: Mat,
    /// Pairs never drawn as negatives (held-out edges).
    pub exclude: HashSet<(u32, u32)>,
    user_posts: Vec<Vec<usize>>,
}

impl<'a> TrainData<'a> {
    pub fn new(ds: &'a Dataset, graph: SocialGraph, exclude: HashSet<(u32, u32)>) -> Result<Self> {
        if graph.n_nodes() != ds.users.len() {
            return Err(Error::Inconsistent(format!(
                "graph has {} nodes for {} users",
                graph.n_nodes(),
                ds.users.len()
            )));
        }
        Ok(TrainData {
            ds,
            graph,
            features: node_features(ds),
            exclude,
            user_posts: ds.posts_by_user(),
        })
    }
}

pub struct TrainState {
    pub model: ModelConfig,
    pub params: ParamStore,
    pub optimizer: Optimizer,
    pub step: usize,
}

impl TrainState {
    pub fn new(model: ModelConfig, cfg: &TrainConfig) -> Self {
        let params = ParamStore::init(&model, cfg.seed);
        TrainState {
            model,
            params,
            optimizer: Optimizer::new(cfg.optimizer, cfg.learning_rate),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub epoch: usize,
    pub lm: f64,
    pub ita: f64,
    pub nfm: f64,
    pub gsm: f64,
    pub gc_image: f64,
    pub gc_text: f64,
    pub total: f64,
}

impl HistoryRecord {
    pub fn new(step: usize, epoch: usize, b: &LossBundle) -> Self {
        let c = b.components;
        HistoryRecord {
            step,
            epoch,
            lm: c.lm,
            ita: c.ita,
            nfm: c.nfm,
            gsm: c.gsm,
            gc_image: c.gc_image,
            gc_text: c.gc_text,
            total: b.total,
        }
    }

    /// Value of a component by name, or the total.
    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "lm" => self.lm,
            "ita" => self.ita,
            "nfm" => self.nfm,
            "gsm" => self.gsm,
            "gc_image" => self.gc_image,
            "gc_text" => self.gc_text,
            "total" => self.total,
            _ => return None,
        })
    }
}

pub fn config_weights(cfg: &TrainConfig) -> LossWeights {
    LossWeights {
        lm: cfg.weight_lm,
        ita: cfg.weight_ita,
        nfm: cfg.weight_nfm,
        gsm: cfg.weight_gsm,
        gc_image: cfg.weight_gc_image,
        gc_text: cfg.weight_gc_text,
    }
}

/// Loss weights in effect during `epoch`; warmup epochs keep only the
/// text and image-text objectives.
pub fn epoch_weights(cfg: &TrainConfig, epoch: usize) -> LossWeights {
    let w = config_weights(cfg);
    if epoch < cfg.warmup_epochs {
        LossWeights {
            nfm: 0.0,
            gsm: 0.0,
            gc_image: 0.0,
            gc_text: 0.0,
            ..w
        }
    } else {
        w
    }
}

/// Seed of global step `step`.
pub fn step_seed(master: u64, step: usize) -> u64 {
    subseed(stream_seed(master, "step"), step as u64)
}

pub fn steps_per_epoch(n_posts: usize, batch_size: usize) -> usize {
    (n_posts / batch_size).max(1)
}

/// Post batches of one epoch: a seeded permutation cut into
/// `steps_per_epoch` consecutive slices.
pub fn epoch_batches(n_posts: usize, batch_size: usize, master: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n_posts).collect();
    perm.shuffle(&mut rng_from(subseed(stream_seed(master, "epoch"), epoch as u64)));
    (0..steps_per_epoch(n_posts, batch_size))
        .map(|s| perm[s * batch_size..((s + 1) * batch_size).min(n_posts)].to_vec())
        .collect()
}

/// Random choices of one step, fixed before any loss is evaluated.
pub struct StepPlan {
    /// Posts encoded this step, ascending.
    pub posts: Vec<usize>,
    /// Rows of `posts` owned by each user.
    pub groups: Arc<Vec<Vec<usize>>>,
    /// Rows of `posts` forming the image-text batch.
    pub batch_rows: Vec<usize>,
    pub lm_seqs: Vec<Vec<usize>>,
    pub lm_positions: Vec<(usize, usize)>,
    pub lm_targets: Vec<usize>,
    pub feature_rows: Vec<usize>,
    pub masked_graph: SocialGraph,
    pub gsm_pos: Vec<(u32, u32)>,
    pub gsm_neg: Vec<(u32, u32)>,
    pub gc_pos: Vec<(u32, u32)>,
    pub gc_neg: Vec<(u32, u32)>,
    pub dropout_seed: Option<u64>,
}

impl StepPlan {
    pub fn new(data: &TrainData, model: &ModelConfig, cfg: &TrainConfig, batch: &[usize], seed: u64) -> Result<Self> {
        let ds = data.ds;
        if batch.len() < 2 {
            return Err(Error::InvalidArgument("a step needs at least 2 posts".into()));
        }
        if let Some(&p) = batch.iter().find(|&&p| p >= ds.posts.len()) {
            return Err(Error::InvalidArgument(format!("post {p} out of range")));
        }
        let mut posts: Vec<usize> = if cfg.posts_per_user_step == 0 {
            (0..ds.posts.len()).collect()
        } else {
            let mut rng = rng_from(stream_seed(seed, "user-posts"));
            let mut chosen = batch.to_vec();
            for owned in &data.user_posts {
                let k = cfg.posts_per_user_step.min(owned.len());
                chosen.extend(index::sample(&mut rng, owned.len(), k).into_iter().map(|i| owned[i]));
            }
            chosen
        };
        posts.sort_unstable();
        posts.dedup();
        let row_of: HashMap<usize, usize> = posts.iter().enumerate().map(|(r, &p)| (p, r)).collect();
        let mut groups = vec![Vec::new(); ds.users.len()];
        for (r, &p) in posts.iter().enumerate() {
            groups[ds.posts[p].user_id as usize].push(r);
        }
        let batch_rows = batch.iter().map(|p| row_of[p]).collect();

        let tok_seed = stream_seed(seed, "tokens");
        let mut lm_seqs = Vec::new();
        let mut lm_positions = Vec::new();
        let mut lm_targets = Vec::new();
        for (i, &p) in batch.iter().enumerate() {
            let tokens: Vec<usize> = ds.posts[p].tokens.iter().map(|&t| t as usize).collect();
            let (masked, pos) = mask_tokens(&tokens, cfg.token_mask_rate, subseed(tok_seed, i as u64), model.mask_id())?;
            if pos.is_empty() {
                continue;
            }
            let s = lm_seqs.len();
            lm_positions.extend(pos.iter().map(|&j| (s, j)));
            lm_targets.extend(pos.iter().map(|&j| tokens[j]));
            lm_seqs.push(masked);
        }

        let feature_rows = sample_rows(ds.users.len(), cfg.feature_mask_rate, stream_seed(seed, "features"))?;
        let (masked_graph, gsm_pos) = mask_edges(&data.graph, cfg.edge_mask_rate, stream_seed(seed, "edges"))?;
        let gsm_neg = if gsm_pos.is_empty() {
            Vec::new()
        } else {
            sample_negative_pairs(&data.graph, gsm_pos.len(), stream_seed(seed, "gsm-neg"), &data.exclude)?
        };
        let m = data.graph.n_edges();
        let n_gc = cfg.gc_pairs.min(m);
        let (gc_pos, gc_neg) = if n_gc == 0 {
            (Vec::new(), Vec::new())
        } else {
            let mut picked = index::sample(&mut rng_from(stream_seed(seed, "gc-pos")), m, n_gc).into_vec();
            picked.sort_unstable();
            let pos: Vec<(u32, u32)> = picked.iter().map(|&i| data.graph.edges()[i]).collect();
            let neg = sample_negative_pairs(&data.graph, n_gc, stream_seed(seed, "gc-neg"), &data.exclude)?;
            (pos, neg)
        };
        Ok(StepPlan {
            posts,
            groups: Arc::new(groups),
            batch_rows,
            lm_seqs,
            lm_positions,
            lm_targets,
            feature_rows,
            masked_graph,
            gsm_pos,
            gsm_neg,
            gc_pos,
            gc_neg,
            dropout_seed: (model.dropout > 0.0).then(|| stream_seed(seed, "dropout")),
        })
    }
}

/// Loss components of `plan` under `params`, and the gradient of the
/// weighted total when `with_grads` is set. `step` only labels errors.
pub fn evaluate_step(
    params: &ParamStore,
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData,
    plan: &StepPlan,
    weights: LossWeights,
    with_grads: bool,
    step: usize,
) -> Result<(LossComponents, Option<ParamGrads>)> {
    let enc = PostEncoding::run(params, model, data.ds, &plan.posts, with_grads, plan.dropout_seed)?;
    let mut tape = Tape::new();
    let p = params.bind_filtered(&mut tape, |n| !n.starts_with("image."));
    let pi = tape.leaf(enc.image.clone());
    let pt = tape.leaf(enc.text.clone());
    let mut comps = LossComponents::default();
    let mut terms = Vec::new();

    if !plan.lm_targets.is_empty() {
        let refs: Vec<&[usize]> = plan.lm_seqs.iter().map(|s| s.as_slice()).collect();
        let batch = TextBatch::packed(model, &refs)?;
        let mut noise = Noise {
            rate: model.dropout,
            rng: plan.dropout_seed.map(|s| rng_from(stream_seed(s, "lm"))),
        };
        let logits = lm_logits_batch(&mut tape, &p, model, &batch, &plan.lm_positions, &mut noise)?;
        let l = lm_loss_on(&mut tape, logits, &plan.lm_targets, cfg.label_smoothing);
        comps.lm = tape.scalar(l);
        terms.push((l, weights.lm));
    }

    let rows = Arc::new(plan.batch_rows.clone());
    let bi = tape.gather_rows(pi, rows.clone());
    let bt = tape.gather_rows(pt, rows);
    let l = ita_loss_on(&mut tape, bi, bt, cfg.temperature);
    comps.ita = tape.scalar(l);
    terms.push((l, weights.ita));

    let ri = tape.segment_mean(pi, plan.groups.clone());
    let rt = tape.segment_mean(pt, plan.groups.clone());
    let (gi, gt) = if cfg.stop_gradient {
        let (a, b) = (tape.value(ri).clone(), tape.value(rt).clone());
        (tape.leaf(a), tape.leaf(b))
    } else {
        (ri, rt)
    };
    let x = tape.leaf(data.features.clone());
    let xm = tape.mask_rows(x, p["graph.feat_mask"], Arc::new(plan.feature_rows.clone()));
    let out = encode_graph_on(&mut tape, &p, model, xm, plan.masked_graph.csr(), gi, gt)?;
    if !plan.feature_rows.is_empty() {
        let l = nfm_loss_on(&mut tape, &p, out.embeddings, &plan.feature_rows, &data.features);
        comps.nfm = tape.scalar(l);
        terms.push((l, weights.nfm));
    }
    if !plan.gsm_pos.is_empty() {
        let l = gsm_loss_on(&mut tape, out.embeddings, &plan.gsm_pos, &plan.gsm_neg);
        comps.gsm = tape.scalar(l);
        terms.push((l, weights.gsm));
    }
    if !plan.gc_pos.is_empty() {
        let l = gc_loss_on(&mut tape, &p, "gc.image", ri, &plan.gc_pos, &plan.gc_neg);
        comps.gc_image = tape.scalar(l);
        terms.push((l, weights.gc_image));
        let l = gc_loss_on(&mut tape, &p, "gc.text", rt, &plan.gc_pos, &plan.gc_neg);
        comps.gc_text = tape.scalar(l);
        terms.push((l, weights.gc_text));
    }
    for (name, v) in COMPONENTS.iter().zip(comps.as_array()) {
        if !v.is_finite() {
            return Err(Error::NonFinite { component: name, step });
        }
    }
    if !with_grads {
        return Ok((comps, None));
    }
    let total = tape.weighted_sum(&terms);
    let g = tape.backward(total);
    let mut grads: ParamGrads = p
        .iter()
        .filter_map(|(name, &v)| g.get(v).map(|m| (name.clone(), m.clone())))
        .collect();
    let zeros = || Mat::zeros(enc.image.dim());
    let gpi = g.get(pi).cloned().unwrap_or_else(zeros);
    let gpt = g.get(pt).cloned().unwrap_or_else(zeros);
    for (name, m) in enc.backward(&gpi, &gpt) {
        match grads.get_mut(&name) {
            Some(acc) => *acc += &m,
            None => {
                grads.insert(name, m);
            }
        }
    }
    Ok((comps, Some(grads)))
}

/// One joint update. Returns the losses measured before the update.
pub fn pretrain_step(
    state: &mut TrainState,
    data: &TrainData,
    batch: &[usize],
    cfg: &TrainConfig,
    weights: LossWeights,
    seed: u64,
) -> Result<LossBundle> {
    let plan = StepPlan::new(data, &state.model, cfg, batch, seed)?;
    let (comps, grads) = evaluate_step(&state.params, &state.model, cfg, data, &plan, weights, true, state.step)?;
    let bundle = total_loss(comps, weights)?;
    if !bundle.total.is_finite() {
        return Err(Error::NonFinite {
            component: "total",
            step: state.step,
        });
    }
    state.optimizer.step(&mut state.params, &grads.expect("requested"))?;
    state.step += 1;
    Ok(bundle)
}

/// Run `cfg.epochs` epochs from `state`. `on_epoch` is called after every
/// epoch with the epoch index and the history so far.
pub fn pretrain(
    state: &mut TrainState,
    data: &TrainData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &TrainState, &[HistoryRecord]) -> Result<()>,
) -> Result<Vec<HistoryRecord>> {
    cfg.validate()?;
    let n_posts = data.ds.posts.len();
    if n_posts < 2 {
        return Err(Error::InvalidArgument("need at least 2 posts".into()));
    }
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let weights = epoch_weights(cfg, epoch);
        for batch in epoch_batches(n_posts, cfg.batch_size, cfg.seed, epoch) {
            let step = state.step;
            let bundle = pretrain_step(state, data, &batch, cfg, weights, step_seed(cfg.seed, step))?;
            history.push(HistoryRecord::new(step, epoch, &bundle));
        }
        on_epoch(epoch, state, &history)?;
    }
    Ok(history)
}
