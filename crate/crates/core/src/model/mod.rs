//! Model hyperparameters and the named parameter store shared by the image,
//! text and graph encoders and the pre-training heads.

pub mod encoders;
pub mod graph_encoder;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::dataset::DatasetMeta;
use crate::error::{Error, Result};
use crate::rng::{rng_from, stream_seed};
use crate::tape::{Mat, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub patch_size: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub gnn_layers: usize,
    pub head_hidden: usize,
    pub gnn_norm: bool,
    pub stat_dim: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub image_shape: [usize; 3],
}

impl ModelConfig {
    pub fn new(train: &TrainConfig, meta: &DatasetMeta) -> Result<Self> {
        let cfg = ModelConfig {
            embed_dim: train.embed_dim,
            n_layers: train.n_layers,
            n_heads: train.n_heads,
            patch_size: train.patch_size,
            mlp_ratio: train.mlp_ratio,
            dropout: train.dropout,
            gnn_layers: train.gnn_layers,
            head_hidden: train.head_hidden,
            gnn_norm: train.gnn_norm,
            stat_dim: meta.stat_dim,
            vocab_size: meta.vocab_size,
            max_tokens: meta.max_tokens,
            image_shape: meta.image_shape,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let [_, h, w] = self.image_shape;
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config("embed_dim must be a positive multiple of n_heads".into()));
        }
        if self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} is not divisible into {p}x{p} patches",
                p = self.patch_size
            )));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let [_, h, w] = self.image_shape;
        (h / self.patch_size) * (w / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.image_shape[0] * self.patch_size * self.patch_size
    }

    /// Token id used for masked positions; one past the vocabulary.
    pub fn mask_id(&self) -> usize {
        self.vocab_size
    }

    /// Width of a gate weight row.
    pub fn gate_width(&self) -> usize {
        2 * self.stat_dim + 4 * self.embed_dim
    }
}

/// Named parameter arrays, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Mat>,
}

/// Parameters bound as leaves of one tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl std::ops::Index<&str> for Bound {
    type Output = Var;
    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }
}

/// Round every entry to the nearest `f32`, so checkpoints store parameters
/// exactly.
pub fn round_to_f32(m: &mut Mat) {
    m.mapv_inplace(|x| x as f32 as f64);
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.params.values().map(|m| m.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_filtered(tape, |_| true)
    }

    /// Bind only the parameters whose name passes `keep`.
    pub fn bind_filtered(&self, tape: &mut Tape, keep: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Set every array whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, v) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                v.fill(0.0);
            }
        }
    }

    /// Fresh parameters for `cfg`, deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = rng_from(stream_seed(seed, "init"));
        let mut s = ParamStore::new();
        let d = cfg.embed_dim;
        let mut normal = |rows: usize, cols: usize, std: f64| -> Mat {
            let dist = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_fn((rows, cols), |_| dist.sample(&mut rng))
        };
        let linear = |s: &mut ParamStore, name: &str, out: usize, inp: usize, normal: &mut dyn FnMut(usize, usize, f64) -> Mat| {
            s.insert(format!("{name}.w"), normal(out, inp, 1.0 / (inp as f64).sqrt()));
            s.insert(format!("{name}.b"), Mat::zeros((1, out)));
        };
        let ln = |s: &mut ParamStore, name: &str| {
            s.insert(format!("{name}.g"), Mat::ones((1, d)));
            s.insert(format!("{name}.b"), Mat::zeros((1, d)));
        };
        let hidden = cfg.mlp_ratio * d;

        for enc in ["image", "text"] {
            for l in 0..cfg.n_layers {
                let p = format!("{enc}.blocks.{l}");
                ln(&mut s, &format!("{p}.ln1"));
                linear(&mut s, &format!("{p}.attn.qkv"), 3 * d, d, &mut normal);
                linear(&mut s, &format!("{p}.attn.out"), d, d, &mut normal);
                ln(&mut s, &format!("{p}.ln2"));
                linear(&mut s, &format!("{p}.mlp.fc1"), hidden, d, &mut normal);
                linear(&mut s, &format!("{p}.mlp.fc2"), d, hidden, &mut normal);
            }
            ln(&mut s, &format!("{enc}.ln_f"));
            s.insert(format!("{enc}.cls"), normal(1, d, 0.02));
        }
        linear(&mut s, "image.patch", d, cfg.patch_dim(), &mut normal);
        s.insert("image.pos", normal(cfg.n_patches() + 1, d, 0.1));
        s.insert("text.tok", normal(cfg.vocab_size + 1, d, 0.5));
        s.insert("text.pos", normal(cfg.max_tokens + 1, d, 0.1));
        linear(&mut s, "text.lm", cfg.vocab_size, d, &mut normal);

        linear(&mut s, "graph.in", d, cfg.stat_dim, &mut normal);
        s.insert("graph.feat_mask", normal(1, cfg.stat_dim, 1.0));
        for k in 0..cfg.gnn_layers {
            s.insert(format!("graph.gate.{k}.w"), normal(1, cfg.gate_width(), 0.01));
            s.insert(format!("graph.gate.{k}.b"), Mat::zeros((1, 1)));
            if cfg.gnn_norm {
                // keeps inner products of R_G rows O(1) at init
                s.insert(format!("graph.ln.{k}.g"), Mat::from_elem((1, d), (d as f64).powf(-0.25)));
                s.insert(format!("graph.ln.{k}.b"), Mat::zeros((1, d)));
            }
        }
        linear(&mut s, "graph.nfm", cfg.stat_dim, d, &mut normal);

        for modality in ["image", "text"] {
            let p = format!("gc.{modality}");
            linear(&mut s, &format!("{p}.l1"), cfg.head_hidden, 2 * d, &mut normal);
            s.insert(format!("{p}.l1.b"), Mat::from_elem((1, cfg.head_hidden), 0.1));
            linear(&mut s, &format!("{p}.l2"), 2, cfg.head_hidden, &mut normal);
            s.insert(format!("{p}.l2.b"), Mat::from_elem((1, 2), 0.5));
        }
        for (_, v) in s.iter_mut() {
            round_to_f32(v);
        }
        s
    }
}

/// Apply inverted dropout with a fresh mask, or return `x` untouched.
pub(crate) fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut Option<rand_chacha::ChaCha8Rng>) -> Var {
    match rng {
        Some(r) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let dim = tape.value(x).dim();
            let mask = Array2::from_shape_fn(dim, |_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
            let m = tape.leaf(mask);
            tape.mul(x, m)
        }
        _ => x,
    }
}
