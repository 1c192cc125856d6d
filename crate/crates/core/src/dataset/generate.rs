//! Synthetic multimodal social network.
//!
//! Users are split into equally sized topic communities. Edges follow a
//! degree-corrected block model: the pair (u, v) is linked with probability
//! `min(1, p · θ_u · θ_v)` where `p` is `p_in` inside a community and `p_out`
//! across, and the popularity weights θ have mean one within every
//! community. Each user's posts carry tokens drawn from a topic-specific
//! unigram mixture and a topic glyph image blended with uniform noise.
//!
//! Every user draws from its own stream `mix64(seed ^ user_id)` and every
//! adjacency row from `mix64(graph_seed ^ u)`, so a parallel run matches the
//! sequential one exactly.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, DatasetMeta, Post, UserRecord};
use crate::config::DatasetConfig;
use crate::error::Result;
use crate::graph::SocialGraph;
use crate::par;
use crate::rng::{rng_from, stream_seed, subseed};

/// Side length, in pixels, of one glyph cell.
const GLYPH_CELL_PX: usize = 2;

/// One binary `[H × W]` template per topic: a random on/off pattern over
/// 2×2-pixel cells. Templates are pairwise distinct.
pub fn glyph_templates(cfg: &DatasetConfig, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = rng_from(stream_seed(seed, "glyphs"));
    let (h, w) = (cfg.image_height, cfg.image_width);
    let (gh, gw) = (h.div_ceil(GLYPH_CELL_PX), w.div_ceil(GLYPH_CELL_PX));
    let cells = gh * gw;
    let mut grids: Vec<Vec<bool>> = Vec::with_capacity(cfg.k_topics);
    while grids.len() < cfg.k_topics {
        let grid: Vec<bool> = (0..cells).map(|_| rng.random_bool(0.5)).collect();
        let on = grid.iter().filter(|&&b| b).count();
        if on == 0 || on == cells || grids.contains(&grid) {
            continue;
        }
        grids.push(grid);
    }
    grids
        .iter()
        .map(|grid| {
            let mut img = vec![0.0f32; h * w];
            for y in 0..h {
                for x in 0..w {
                    let cell = (y / GLYPH_CELL_PX) * gw + x / GLYPH_CELL_PX;
                    img[y * w + x] = if grid[cell] { 1.0 } else { 0.0 };
                }
            }
            img
        })
        .collect()
}

struct UserDraw {
    popularity: f64,
    log_likes: f64,
    nuisance: Vec<f64>,
    posts: Vec<(Vec<u32>, Vec<f32>)>,
}

fn draw_user(cfg: &DatasetConfig, seed: u64, user: usize, topic: usize, glyphs: &[Vec<f32>]) -> UserDraw {
    let mut rng = rng_from(subseed(stream_seed(seed, "users"), user as u64));
    let z: f64 = StandardNormal.sample(&mut rng);
    let popularity = (cfg.popularity_spread * z).exp();
    let likes_mean = 3.0 + 2.0 * topic as f64 / (cfg.k_topics - 1) as f64;
    let lz: f64 = StandardNormal.sample(&mut rng);
    let log_likes = (likes_mean + 0.5 * lz).exp().ln_1p();
    let nuisance = (0..cfg.stat_dim - 3)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();

    let block = cfg.vocab_size / cfg.k_topics;
    let plane = cfg.image_height * cfg.image_width;
    let noise = cfg.glyph_noise as f32;
    let posts = (0..cfg.posts_per_user)
        .map(|_| {
            let len = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
            let tokens = (0..len)
                .map(|_| {
                    if rng.random_bool(cfg.vocab_concentration) {
                        (topic * block + rng.random_range(0..block)) as u32
                    } else {
                        rng.random_range(0..cfg.vocab_size) as u32
                    }
                })
                .collect();
            let glyph = &glyphs[topic];
            let mut image = Vec::with_capacity(cfg.image_channels * plane);
            for _ in 0..cfg.image_channels {
                for &g in glyph {
                    let u: f32 = rng.random();
                    image.push(((1.0 - noise) * g + noise * u).clamp(0.0, 1.0));
                }
            }
            (tokens, image)
        })
        .collect();
    UserDraw {
        popularity,
        log_likes,
        nuisance,
        posts,
    }
}

fn zscores(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    x.iter().map(|v| (v - mean) / sd).collect()
}

/// Generate users, posts and the social graph. Fully determined by
/// `(cfg, seed)`; `cfg.seed` is ignored in favour of the explicit seed.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<(Dataset, SocialGraph)> {
    cfg.validate()?;
    let n = cfg.n_users;
    let community = n / cfg.k_topics;
    let topic_of = |u: usize| u / community;
    let glyphs = glyph_templates(cfg, seed);

    let draws = par::map_range(n, |u| draw_user(cfg, seed, u, topic_of(u), &glyphs));

    // popularity weights normalized to mean one inside each community
    let mut theta: Vec<f64> = draws.iter().map(|d| d.popularity).collect();
    for k in 0..cfg.k_topics {
        let block = &mut theta[k * community..(k + 1) * community];
        let mean = block.iter().sum::<f64>() / community as f64;
        block.iter_mut().for_each(|t| *t /= mean);
    }

    let graph_seed = stream_seed(seed, "graph");
    let rows = par::map_range(n, |u| {
        let mut rng = rng_from(subseed(graph_seed, u as u64));
        let mut out = Vec::new();
        for v in u + 1..n {
            let base = if topic_of(u) == topic_of(v) { cfg.p_in } else { cfg.p_out };
            let p = (base * theta[u] * theta[v]).min(1.0);
            // always consume one draw per pair so streams stay aligned
            let r: f64 = rng.random();
            if r < p {
                out.push((u as u32, v as u32));
            }
        }
        out
    });
    let graph = SocialGraph::from_edges(n, rows.into_iter().flatten())?;

    let degrees: Vec<f64> = (0..n).map(|u| graph.degree(u) as f64).collect();
    let log_likes: Vec<f64> = draws.iter().map(|d| d.log_likes).collect();
    let score: Vec<f64> = zscores(&degrees)
        .iter()
        .zip(zscores(&log_likes))
        .map(|(a, b)| a + b)
        .collect();
    let n_fans = (cfg.fans_quantile * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let mut fans = vec![0u8; n];
    for &u in &order[..n_fans] {
        fans[u] = 1;
    }

    let mut users = Vec::with_capacity(n);
    let mut posts = Vec::with_capacity(n * cfg.posts_per_user);
    for (u, draw) in draws.into_iter().enumerate() {
        let mut post_ids = Vec::with_capacity(draw.posts.len());
        for (tokens, image) in draw.posts {
            let post_id = posts.len() as u32;
            post_ids.push(post_id);
            posts.push(Post {
                post_id,
                user_id: u as u32,
                tokens,
                image,
            });
        }
        let mut stat_features = vec![(degrees[u]).ln_1p(), post_ids.len() as f64, draw.log_likes];
        stat_features.extend(draw.nuisance);
        users.push(UserRecord {
            user_id: u as u32,
            stat_features,
            topic_label: topic_of(u) as u32,
            fans_label: fans[u],
            post_ids,
        });
    }

    let meta = DatasetMeta {
        n_users: n,
        n_posts: posts.len(),
        k_topics: cfg.k_topics,
        vocab_size: cfg.vocab_size,
        max_tokens: cfg.max_tokens,
        image_shape: [cfg.image_channels, cfg.image_height, cfg.image_width],
        stat_dim: cfg.stat_dim,
        seed,
        generator: DatasetConfig { seed, ..cfg.clone() },
    };
    Ok((Dataset { meta, users, posts }, graph))
}
