//! Users, posts and the social graph, plus the synthetic generator, on-disk
//! persistence and edge splitting.

mod generate;
mod io;
mod split;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::DatasetConfig;
use crate::graph::SocialGraph;

pub use generate::{generate_dataset, glyph_templates};
pub use io::{file_digest, load_dataset, save_dataset, FileDigest, Manifest};
pub use split::{sample_negative_pairs, split_edges, EdgeSplit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub post_id: u32,
    pub user_id: u32,
    pub tokens: Vec<u32>,
    /// `[C × H × W]` row-major, values in `[0, 1]`.
    #[serde(skip)]
    pub image: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: u32,
    pub stat_features: Vec<f64>,
    pub topic_label: u32,
    pub fans_label: u8,
    pub post_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_users: usize,
    pub n_posts: usize,
    pub k_topics: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    /// `[C, H, W]`
    pub image_shape: [usize; 3],
    pub stat_dim: usize,
    pub seed: u64,
    pub generator: DatasetConfig,
}

impl DatasetMeta {
    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub users: Vec<UserRecord>,
    pub posts: Vec<Post>,
}

impl Dataset {
    /// Post ids grouped by owning user.
    pub fn posts_by_user(&self) -> Vec<Vec<usize>> {
        self.users
            .iter()
            .map(|u| u.post_ids.iter().map(|&p| p as usize).collect())
            .collect()
    }

    pub fn topic_labels(&self) -> Vec<usize> {
        self.users.iter().map(|u| u.topic_label as usize).collect()
    }

    pub fn fans_labels(&self) -> Vec<usize> {
        self.users.iter().map(|u| u.fans_label as usize).collect()
    }
}

/// One invariant violation found by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub subject: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.message)
    }
}

/// Check every record and graph invariant. An empty list means valid.
pub fn validate_dataset(ds: &Dataset, graph: &SocialGraph) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push = |subject: String, message: String| out.push(Diagnostic { subject, message });
    let meta = &ds.meta;

    if meta.n_users != ds.users.len() {
        push("meta".into(), format!("n_users {} but {} user records", meta.n_users, ds.users.len()));
    }
    if meta.n_posts != ds.posts.len() {
        push("meta".into(), format!("n_posts {} but {} post records", meta.n_posts, ds.posts.len()));
    }
    if graph.n_nodes() != ds.users.len() {
        push("graph".into(), format!("{} nodes for {} users", graph.n_nodes(), ds.users.len()));
    }

    for (i, u) in ds.users.iter().enumerate() {
        let subject = format!("user {}", u.user_id);
        if u.user_id as usize != i {
            push(subject.clone(), format!("stored at index {i}"));
        }
        if u.stat_features.len() != meta.stat_dim {
            push(subject.clone(), format!("{} stat features, expected {}", u.stat_features.len(), meta.stat_dim));
        }
        if u.stat_features.iter().any(|x| !x.is_finite()) {
            push(subject.clone(), "non-finite stat feature".into());
        }
        if u.topic_label as usize >= meta.k_topics {
            push(subject.clone(), format!("topic {} out of range", u.topic_label));
        }
        if u.fans_label > 1 {
            push(subject.clone(), format!("fans label {} is not binary", u.fans_label));
        }
        for &p in &u.post_ids {
            match ds.posts.get(p as usize) {
                None => push(subject.clone(), format!("post {p} does not exist")),
                Some(post) if post.user_id != u.user_id => {
                    push(subject.clone(), format!("post {p} belongs to user {}", post.user_id))
                }
                _ => {}
            }
        }
    }

    for (i, p) in ds.posts.iter().enumerate() {
        let subject = format!("post {}", p.post_id);
        if p.post_id as usize != i {
            push(subject.clone(), format!("stored at index {i}"));
        }
        if p.user_id as usize >= ds.users.len() {
            push(subject.clone(), format!("owner {} does not exist", p.user_id));
        } else if !ds.users[p.user_id as usize].post_ids.contains(&p.post_id) {
            push(subject.clone(), format!("not listed by owner {}", p.user_id));
        }
        if p.tokens.is_empty() {
            push(subject.clone(), "empty token sequence".into());
        }
        if p.tokens.len() > meta.max_tokens {
            push(subject.clone(), format!("{} tokens exceeds max {}", p.tokens.len(), meta.max_tokens));
        }
        if let Some(&t) = p.tokens.iter().find(|&&t| t as usize >= meta.vocab_size) {
            push(subject.clone(), format!("token id {t} >= vocab size {}", meta.vocab_size));
        }
        if p.image.len() != meta.image_len() {
            push(subject.clone(), format!("image has {} values, expected {}", p.image.len(), meta.image_len()));
        }
        if p.image.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            push(subject.clone(), "image value outside [0, 1]".into());
        }
    }

    let n = graph.n_nodes();
    let mut prev: Option<(u32, u32)> = None;
    for &(u, v) in graph.edges() {
        let subject = format!("edge ({u},{v})");
        if u == v {
            push(subject.clone(), "self-loop".into());
        } else if u > v {
            push(subject.clone(), "not stored as u < v".into());
        }
        if u as usize >= n || v as usize >= n {
            push(subject.clone(), "endpoint out of range".into());
        }
        if prev == Some((u, v)) {
            push(subject.clone(), "duplicate edge".into());
        }
        prev = Some((u, v));
        if (u as usize) < n && (v as usize) < n && (!graph.has_edge(u as usize, v as usize) || !graph.has_edge(v as usize, u as usize)) {
            push(subject, "missing from adjacency".into());
        }
    }
    let mut directed = 0;
    for u in 0..n {
        for &v in graph.neighbors(u) {
            directed += 1;
            if v >= n {
                push(format!("adjacency ({u},{v})"), "neighbor out of range".into());
            } else if !graph.neighbors(v).contains(&u) {
                push(format!("adjacency ({u},{v})"), format!("asymmetric: {u} lists {v} but {v} does not list {u}"));
            }
        }
    }
    if directed != 2 * graph.n_edges() {
        push("graph".into(), format!("{directed} adjacency entries for {} edges", graph.n_edges()));
    }
    out
}
