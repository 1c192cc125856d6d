//! Finite-difference gradient checking.

use std::collections::HashSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{evaluate_step, ParamGrads, StepPlan, TrainData};
use crate::config::{DatasetConfig, TrainConfig};
use crate::dataset::{generate_dataset, Dataset};
use crate::error::{Error, Result};
use crate::graph::SocialGraph;
use crate::model::{ModelConfig, ParamStore};
use crate::objectives::{LossWeights, COMPONENTS};
use crate::rng::{rng_from, stream_seed};

/// `|a - n| / max(|a|, |n|, 1e-6)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compare `analytic` against central differences of `probe` for every
/// parameter whose name starts with `group`. At most `per_array`
/// coordinates of each array are checked (all when `None`), chosen by
/// `seed`. Missing analytic gradients count as zero.
pub fn grad_check(
    probe: impl Fn(&ParamStore) -> Result<f64>,
    analytic: &ParamGrads,
    params: &ParamStore,
    group: &str,
    h: f64,
    per_array: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let a = probe(params)?;
    let b = probe(params)?;
    if a.to_bits() != b.to_bits() {
        return Err(Error::NonDeterministicProbe(a, b));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work = params.clone();
    for (name, value) in params.iter().filter(|(n, _)| n.starts_with(group)) {
        let n = value.len();
        let coords: Vec<usize> = match per_array {
            Some(k) if k < n => {
                let mut c = index::sample(&mut rng_from(stream_seed(seed, name)), n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let (r, c) = (i / value.ncols(), i % value.ncols());
            let x = value[[r, c]];
            work.get_mut(name).expect("cloned")[[r, c]] = x + h;
            let up = probe(&work)?;
            work.get_mut(name).expect("cloned")[[r, c]] = x - h;
            let down = probe(&work)?;
            work.get_mut(name).expect("cloned")[[r, c]] = x;
            let numeric = (up - down) / (2.0 * h);
            let exact = analytic.get(name).map_or(0.0, |g| g[[r, c]]);
            let err = relative_error(exact, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// A 12-user, 2-topic instance with 16-dimensional embeddings.
pub struct TinyInstance {
    pub ds: Dataset,
    pub graph: SocialGraph,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore,
}

pub fn tiny_instance(seed: u64) -> Result<TinyInstance> {
    let gen = DatasetConfig {
        n_users: 12,
        k_topics: 2,
        p_in: 0.6,
        p_out: 0.1,
        posts_per_user: 2,
        vocab_size: 10,
        max_tokens: 6,
        min_tokens: 3,
        image_channels: 1,
        image_height: 8,
        image_width: 8,
        stat_dim: 4,
        vocab_concentration: 0.5,
        glyph_noise: 0.5,
        popularity_spread: 0.0,
        fans_quantile: 0.25,
        seed,
    };
    let (ds, graph) = generate_dataset(&gen, seed)?;
    let train = TrainConfig {
        batch_size: 6,
        token_mask_rate: 0.3,
        feature_mask_rate: 0.3,
        edge_mask_rate: 0.3,
        gc_pairs: 6,
        seed,
        embed_dim: 16,
        n_layers: 1,
        n_heads: 2,
        patch_size: 4,
        head_hidden: 8,
        posts_per_user_step: 0,
        ..TrainConfig::default()
    };
    let model = ModelConfig::new(&train, &ds.meta)?;
    let params = ParamStore::init(&model, seed);
    Ok(TinyInstance {
        ds,
        graph,
        model,
        train,
        params,
    })
}

pub const PARAM_GROUPS: [&str; 5] = ["image.", "text.", "graph.", "gc.image.", "gc.text."];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub component: String,
    pub group: String,
    pub report: GradCheckReport,
}

fn one_hot(component: usize) -> LossWeights {
    let mut w = [0.0; 6];
    w[component] = 1.0;
    LossWeights {
        lm: w[0],
        ita: w[1],
        nfm: w[2],
        gsm: w[3],
        gc_image: w[4],
        gc_text: w[5],
    }
}

/// Check every loss component against every parameter group on `inst`
/// with step `h`, sampling up to `per_array` coordinates per array.
pub fn check_all(inst: &TinyInstance, h: f64, per_array: Option<usize>) -> Result<Vec<GroupCheck>> {
    let data = TrainData::new(&inst.ds, inst.graph.clone(), HashSet::new())?;
    let batch: Vec<usize> = (0..inst.train.batch_size.min(inst.ds.posts.len())).collect();
    let plan = StepPlan::new(&data, &inst.model, &inst.train, &batch, stream_seed(inst.train.seed, "gradcheck"))?;
    let mut out = Vec::new();
    for (c, name) in COMPONENTS.iter().enumerate() {
        let w = one_hot(c);
        let probe = |p: &ParamStore| -> Result<f64> {
            let (comps, _) = evaluate_step(p, &inst.model, &inst.train, &data, &plan, w, false, 0)?;
            Ok(comps.as_array()[c])
        };
        let (_, grads) = evaluate_step(&inst.params, &inst.model, &inst.train, &data, &plan, w, true, 0)?;
        let grads = grads.expect("requested");
        for group in PARAM_GROUPS {
            let report = grad_check(&probe, &grads, &inst.params, group, h, per_array, inst.train.seed)?;
            out.push(GroupCheck {
                component: name.to_string(),
                group: group.trim_end_matches('.').to_string(),
                report,
            });
        }
    }
    Ok(out)
}
