//! Image and text transformer encoders, the masked-LM head, and user-level
//! aggregation of post embeddings.
//!
//! Both encoders prepend a learned classification token, add learned
//! positions, run pre-norm transformer blocks and return the final hidden
//! state of the classification token. Batches are stacked row-wise; text
//! sequences are packed without padding unless the caller supplies a padded
//! layout.

use std::sync::Arc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::{dropout, Bound, ModelConfig, ParamStore};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::par;
use crate::tape::{Grads, Mat, SeqLayout, Tape, Var};

/// Posts per tape when encoding a whole dataset.
pub const CHUNK_POSTS: usize = 64;

/// Optional dropout randomness threaded through a forward pass.
pub struct Noise {
    pub rate: f64,
    pub rng: Option<ChaCha8Rng>,
}

impl Noise {
    pub fn off() -> Self {
        Noise { rate: 0.0, rng: None }
    }
}

fn block(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, layout: &Arc<SeqLayout>, heads: usize, noise: &mut Noise) -> Var {
    let h = tape.layer_norm(x, p[&format!("{prefix}.ln1.g")], p[&format!("{prefix}.ln1.b")]);
    let qkv = tape.linear(h, p[&format!("{prefix}.attn.qkv.w")], p[&format!("{prefix}.attn.qkv.b")]);
    let a = tape.attention(qkv, layout.clone(), heads);
    let o = tape.linear(a, p[&format!("{prefix}.attn.out.w")], p[&format!("{prefix}.attn.out.b")]);
    let o = dropout(tape, o, noise.rate, &mut noise.rng);
    let x = tape.add(x, o);
    let h = tape.layer_norm(x, p[&format!("{prefix}.ln2.g")], p[&format!("{prefix}.ln2.b")]);
    let f = tape.linear(h, p[&format!("{prefix}.mlp.fc1.w")], p[&format!("{prefix}.mlp.fc1.b")]);
    let f = tape.gelu(f);
    let f = tape.linear(f, p[&format!("{prefix}.mlp.fc2.w")], p[&format!("{prefix}.mlp.fc2.b")]);
    let f = dropout(tape, f, noise.rate, &mut noise.rng);
    tape.add(x, f)
}

fn trunk(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, enc: &str, x: Var, layout: &Arc<SeqLayout>, noise: &mut Noise) -> Var {
    let mut x = dropout(tape, x, noise.rate, &mut noise.rng);
    for l in 0..cfg.n_layers {
        x = block(tape, p, &format!("{enc}.blocks.{l}"), x, layout, cfg.n_heads, noise);
    }
    tape.layer_norm(x, p[&format!("{enc}.ln_f.g")], p[&format!("{enc}.ln_f.b")])
}

fn cls_rows(tape: &mut Tape, hidden: Var, layout: &SeqLayout) -> Var {
    tape.gather_rows(hidden, Arc::new(layout.starts.clone()))
}

/// Split `[C × H × W]` images into row-major patches, each flattened as
/// (channel, dy, dx). Pixels are rescaled from `[0, 1]` to `[-1, 1]`.
pub fn patchify(cfg: &ModelConfig, images: &[&[f32]]) -> Result<Mat> {
    let [c, h, w] = cfg.image_shape;
    let ps = cfg.patch_size;
    let (gh, gw) = (h / ps, w / ps);
    let mut out = Mat::zeros((images.len() * gh * gw, cfg.patch_dim()));
    for (b, img) in images.iter().enumerate() {
        if img.len() != c * h * w {
            return Err(Error::Shape(format!("image has {} values, expected {}", img.len(), c * h * w)));
        }
        for py in 0..gh {
            for px in 0..gw {
                let row = b * gh * gw + py * gw + px;
                let mut col = 0;
                for ch in 0..c {
                    for dy in 0..ps {
                        for dx in 0..ps {
                            out[[row, col]] = 2.0 * img[ch * h * w + (py * ps + dy) * w + px * ps + dx] as f64 - 1.0;
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Image embeddings `[B, d]` from the classification position.
pub fn encode_images(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, images: &[&[f32]], noise: &mut Noise) -> Result<Var> {
    let patches = patchify(cfg, images)?;
    let np = cfg.n_patches();
    let b = images.len();
    let x = tape.leaf(patches);
    let emb = tape.linear(x, p["image.patch.w"], p["image.patch.b"]);
    let table = tape.concat_rows(&[emb, p["image.cls"]]);
    let cls = b * np;
    let mut ids = Vec::with_capacity(b * (np + 1));
    let mut pos = Vec::with_capacity(b * (np + 1));
    for i in 0..b {
        ids.push(cls);
        ids.extend(i * np..(i + 1) * np);
        pos.extend(0..=np);
    }
    let tok = tape.gather_rows(table, Arc::new(ids));
    let pe = tape.gather_rows(p["image.pos"], Arc::new(pos));
    let x = tape.add(tok, pe);
    let layout = Arc::new(SeqLayout::packed(&vec![np + 1; b]));
    let hidden = trunk(tape, p, cfg, "image", x, &layout, noise);
    Ok(cls_rows(tape, hidden, &layout))
}

/// A batch of token sequences laid out for the text encoder. Row 0 of each
/// sequence is the classification token; token `i` sits at row `1 + i`.
#[derive(Debug, Clone)]
pub struct TextBatch {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub layout: Arc<SeqLayout>,
}

impl TextBatch {
    fn check(cfg: &ModelConfig, tokens: &[usize], allow_mask: bool) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if tokens.len() > cfg.max_tokens {
            return Err(Error::InvalidArgument(format!("{} tokens exceeds max {}", tokens.len(), cfg.max_tokens)));
        }
        let limit = if allow_mask { cfg.vocab_size + 1 } else { cfg.vocab_size };
        if let Some(t) = tokens.iter().find(|&&t| t >= limit) {
            return Err(Error::InvalidArgument(format!("token id {t} out of vocabulary {}", cfg.vocab_size)));
        }
        Ok(())
    }

    /// Sequences packed back to back. Ids may include the mask id.
    pub fn packed(cfg: &ModelConfig, seqs: &[&[usize]]) -> Result<Self> {
        let cls = cfg.vocab_size + 1;
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            Self::check(cfg, s, true)?;
            ids.push(cls);
            ids.extend_from_slice(s);
            positions.extend(0..=s.len());
            lens.push(s.len() + 1);
        }
        Ok(TextBatch {
            ids,
            positions,
            layout: Arc::new(SeqLayout::packed(&lens)),
        })
    }

    /// Sequences padded to `max_tokens`; entries of `padded[i]` beyond
    /// `lens[i]` are arbitrary ids and must not affect the outputs.
    pub fn padded(cfg: &ModelConfig, padded: &[&[usize]], lens: &[usize]) -> Result<Self> {
        let cls = cfg.vocab_size + 1;
        let width = cfg.max_tokens + 1;
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        for (s, &len) in padded.iter().zip(lens) {
            if s.len() != cfg.max_tokens || len > s.len() {
                return Err(Error::Shape(format!("padded sequence must have {} ids", cfg.max_tokens)));
            }
            Self::check(cfg, &s[..len], true)?;
            if s.iter().any(|&t| t > cfg.vocab_size) {
                return Err(Error::InvalidArgument("padding id out of vocabulary".into()));
            }
            ids.push(cls);
            ids.extend_from_slice(s);
            positions.extend(0..width);
        }
        let valid: Vec<usize> = lens.iter().map(|l| l + 1).collect();
        Ok(TextBatch {
            ids,
            positions,
            layout: Arc::new(SeqLayout::padded(width, &valid)),
        })
    }
}

/// Final hidden states `[rows, d]` of the text encoder.
pub fn text_hidden(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, batch: &TextBatch, noise: &mut Noise) -> Var {
    let table = tape.concat_rows(&[p["text.tok"], p["text.cls"]]);
    let tok = tape.gather_rows(table, Arc::new(batch.ids.clone()));
    let pe = tape.gather_rows(p["text.pos"], Arc::new(batch.positions.clone()));
    let x = tape.add(tok, pe);
    trunk(tape, p, cfg, "text", x, &batch.layout, noise)
}

/// Text embeddings `[B, d]` from the classification position.
pub fn encode_texts(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, batch: &TextBatch, noise: &mut Noise) -> Var {
    let hidden = text_hidden(tape, p, cfg, batch, noise);
    cls_rows(tape, hidden, &batch.layout)
}

/// Vocabulary logits `[|masked|, V]` at the listed `(sequence, token index)`
/// positions. The caller has already replaced those tokens by the mask id.
pub fn lm_logits_batch(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    batch: &TextBatch,
    masked: &[(usize, usize)],
    noise: &mut Noise,
) -> Result<Var> {
    for &(s, i) in masked {
        if s >= batch.layout.n_seqs() || i + 1 >= batch.layout.valid[s] {
            return Err(Error::InvalidArgument(format!("mask position ({s},{i}) out of range")));
        }
    }
    let hidden = text_hidden(tape, p, cfg, batch, noise);
    let rows: Vec<usize> = masked.iter().map(|&(s, i)| batch.layout.starts[s] + 1 + i).collect();
    let h = tape.gather_rows(hidden, Arc::new(rows));
    Ok(tape.linear(h, p["text.lm.w"], p["text.lm.b"]))
}

fn encoder_only(name: &str) -> bool {
    name.starts_with("image.") || name.starts_with("text.")
}

/// Embedding of a single image.
pub fn encode_image(params: &ParamStore, cfg: &ModelConfig, image: &[f32]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = params.bind_filtered(&mut tape, |n| n.starts_with("image."));
    let v = encode_images(&mut tape, &p, cfg, &[image], &mut Noise::off())?;
    Ok(tape.value(v).row(0).to_vec())
}

/// Embedding of a single token sequence.
pub fn encode_text(params: &ParamStore, cfg: &ModelConfig, tokens: &[usize]) -> Result<Vec<f64>> {
    TextBatch::check(cfg, tokens, false)?;
    let mut tape = Tape::new();
    let p = params.bind_filtered(&mut tape, |n| n.starts_with("text."));
    let batch = TextBatch::packed(cfg, &[tokens])?;
    let v = encode_texts(&mut tape, &p, cfg, &batch, &mut Noise::off());
    Ok(tape.value(v).row(0).to_vec())
}

/// Embedding of a sequence given in padded form: `padded` has `max_tokens`
/// ids of which only the first `len` are real.
pub fn encode_text_padded(params: &ParamStore, cfg: &ModelConfig, padded: &[usize], len: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = params.bind_filtered(&mut tape, |n| n.starts_with("text."));
    let batch = TextBatch::padded(cfg, &[padded], &[len])?;
    let v = encode_texts(&mut tape, &p, cfg, &batch, &mut Noise::off());
    Ok(tape.value(v).row(0).to_vec())
}

/// Masked-LM logits for one sequence; the tokens at `mask_positions` are
/// replaced by the mask embedding before encoding.
pub fn lm_logits(params: &ParamStore, cfg: &ModelConfig, tokens: &[usize], mask_positions: &[usize]) -> Result<Mat> {
    TextBatch::check(cfg, tokens, false)?;
    if let Some(&m) = mask_positions.iter().find(|&&m| m >= tokens.len()) {
        return Err(Error::InvalidArgument(format!("mask position {m} out of range")));
    }
    if mask_positions.is_empty() {
        return Ok(Mat::zeros((0, cfg.vocab_size)));
    }
    let mut masked = tokens.to_vec();
    for &m in mask_positions {
        masked[m] = cfg.mask_id();
    }
    let mut tape = Tape::new();
    let p = params.bind_filtered(&mut tape, |n| n.starts_with("text."));
    let batch = TextBatch::packed(cfg, &[&masked])?;
    let pos: Vec<(usize, usize)> = mask_positions.iter().map(|&m| (0, m)).collect();
    let v = lm_logits_batch(&mut tape, &p, cfg, &batch, &pos, &mut Noise::off())?;
    Ok(tape.value(v).clone())
}

/// Row `u` is the mean of the rows listed in `groups[u]`; zero if empty.
pub fn aggregate_user_modality(post_embeds: &Mat, groups: &[Vec<usize>]) -> Mat {
    let d = post_embeds.ncols();
    let mut out = Array2::zeros((groups.len(), d));
    for (u, g) in groups.iter().enumerate() {
        if g.is_empty() {
            continue;
        }
        let mut row = out.row_mut(u);
        for &i in g {
            row += &post_embeds.row(i);
        }
        row /= g.len() as f64;
    }
    out
}

/// One chunk of posts encoded on its own tape, kept for the backward pass.
pub struct ChunkTape {
    tape: Tape,
    bound: Bound,
    image: Var,
    text: Var,
    rows: std::ops::Range<usize>,
}

/// Image and text embeddings for a list of posts, computed chunk by chunk.
pub struct PostEncoding {
    pub image: Mat,
    pub text: Mat,
    chunks: Vec<ChunkTape>,
}

impl PostEncoding {
    /// Encode `post_ids` (in order). Set `keep` to retain the chunk tapes for
    /// [`PostEncoding::backward`].
    pub fn run(
        params: &ParamStore,
        cfg: &ModelConfig,
        ds: &Dataset,
        post_ids: &[usize],
        keep: bool,
        dropout_seed: Option<u64>,
    ) -> Result<Self> {
        let n_chunks = post_ids.len().div_ceil(CHUNK_POSTS);
        let results = par::map_range(n_chunks, |c| -> Result<ChunkTape> {
            let rows = c * CHUNK_POSTS..((c + 1) * CHUNK_POSTS).min(post_ids.len());
            let ids = &post_ids[rows.clone()];
            let mut tape = Tape::new();
            let bound = params.bind_filtered(&mut tape, encoder_only);
            let mut noise = Noise {
                rate: cfg.dropout,
                rng: dropout_seed.map(|s| crate::rng::rng_from(crate::rng::subseed(s, c as u64))),
            };
            let images: Vec<&[f32]> = ids.iter().map(|&i| ds.posts[i].image.as_slice()).collect();
            let image = encode_images(&mut tape, &bound, cfg, &images, &mut noise)?;
            let toks: Vec<Vec<usize>> = ids
                .iter()
                .map(|&i| ds.posts[i].tokens.iter().map(|&t| t as usize).collect())
                .collect();
            let refs: Vec<&[usize]> = toks.iter().map(|t| t.as_slice()).collect();
            let batch = TextBatch::packed(cfg, &refs)?;
            let text = encode_texts(&mut tape, &bound, cfg, &batch, &mut noise);
            Ok(ChunkTape {
                tape,
                bound,
                image,
                text,
                rows,
            })
        });
        let d = cfg.embed_dim;
        let mut image = Mat::zeros((post_ids.len(), d));
        let mut text = Mat::zeros((post_ids.len(), d));
        let mut chunks = Vec::new();
        for r in results {
            let ch = r?;
            image
                .slice_mut(ndarray::s![ch.rows.clone(), ..])
                .assign(ch.tape.value(ch.image));
            text.slice_mut(ndarray::s![ch.rows.clone(), ..])
                .assign(ch.tape.value(ch.text));
            if keep {
                chunks.push(ch);
            }
        }
        Ok(PostEncoding { image, text, chunks })
    }

    /// Given gradients with respect to the image and text embedding
    /// matrices, return gradients for every encoder parameter.
    pub fn backward(&self, grad_image: &Mat, grad_text: &Mat) -> Vec<(String, Mat)> {
        assert!(!self.chunks.is_empty() || self.image.nrows() == 0, "tapes were not kept");
        let per_chunk: Vec<Vec<(String, Mat)>> = par::map_range(self.chunks.len(), |c| {
            let ch = &self.chunks[c];
            let gi = grad_image.slice(ndarray::s![ch.rows.clone(), ..]).to_owned();
            let gt = grad_text.slice(ndarray::s![ch.rows.clone(), ..]).to_owned();
            let grads: Grads = ch.tape.backward_seeded(vec![(ch.image, gi), (ch.text, gt)]);
            ch.bound
                .iter()
                .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
                .collect()
        });
        let mut total: std::collections::BTreeMap<String, Mat> = Default::default();
        for chunk in per_chunk {
            for (name, g) in chunk {
                match total.get_mut(&name) {
                    Some(t) => *t += &g,
                    None => {
                        total.insert(name, g);
                    }
                }
            }
        }
        total.into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_cfg;

    fn params() -> ParamStore {
        ParamStore::init(&tiny_cfg(), 11)
    }

    #[test]
    fn image_embedding_shape_and_determinism() {
        let cfg = tiny_cfg();
        let img: Vec<f32> = (0..64).map(|i| (i % 7) as f32 / 7.0).collect();
        let a = encode_image(&params(), &cfg, &img).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, encode_image(&params(), &cfg, &img).unwrap());
        assert!(encode_image(&params(), &cfg, &img[..60]).is_err());
    }

    #[test]
    fn patch_order_is_row_major() {
        let cfg = tiny_cfg();
        let img: Vec<f32> = (0..64).map(|i| i as f32 / 64.0).collect();
        let p = patchify(&cfg, &[&img]).unwrap();
        let px = |i: f64| 2.0 * i / 64.0 - 1.0;
        assert_eq!(p.dim(), (4, 16));
        assert_eq!(p[[1, 0]], px(4.0));
        assert_eq!(p[[2, 0]], px(32.0));
        assert_eq!(p[[0, 4]], px(8.0));
    }

    #[test]
    fn text_padding_is_ignored() {
        let cfg = tiny_cfg();
        let a = encode_text_padded(&params(), &cfg, &[5, 7, 0, 0, 0, 0], 2).unwrap();
        let b = encode_text_padded(&params(), &cfg, &[5, 7, 9, 3, 1, 10], 2).unwrap();
        let c = encode_text(&params(), &cfg, &[5, 7]).unwrap();
        let max_diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert_eq!(max_diff, 0.0);
        let packed_diff = a.iter().zip(&c).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(packed_diff < 1e-12);
    }

    #[test]
    fn text_errors() {
        let cfg = tiny_cfg();
        assert!(encode_text(&params(), &cfg, &[]).is_err());
        assert!(encode_text(&params(), &cfg, &[10]).is_err());
        assert!(encode_text(&params(), &cfg, &[1; 7]).is_err());
        assert_eq!(encode_text(&params(), &cfg, &[3]).unwrap().len(), 8);
    }

    #[test]
    fn token_order_matters() {
        let cfg = tiny_cfg();
        let a = encode_text(&params(), &cfg, &[1, 2, 3, 4]).unwrap();
        let b = encode_text(&params(), &cfg, &[4, 3, 2, 1]).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn lm_logits_shapes() {
        let cfg = tiny_cfg();
        let p = params();
        assert_eq!(lm_logits(&p, &cfg, &[1, 2, 3], &[]).unwrap().dim(), (0, 10));
        assert_eq!(lm_logits(&p, &cfg, &[1, 2, 3], &[0, 2]).unwrap().dim(), (2, 10));
        assert!(lm_logits(&p, &cfg, &[1, 2, 3], &[3]).is_err());
    }

    #[test]
    fn zero_lm_head_gives_uniform_logits() {
        let cfg = tiny_cfg();
        let mut p = params();
        p.zero_prefix("text.lm.");
        let logits = lm_logits(&p, &cfg, &[1, 2, 3], &[1]).unwrap();
        let z: f64 = logits.iter().map(|x| x.exp()).sum();
        let entropy: f64 = logits.iter().map(|x| -(x.exp() / z) * (x.exp() / z).ln()).sum();
        assert!((entropy - (10f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn aggregation_cases() {
        let e = ndarray::array![[1.0, 0.0], [0.0, 1.0], [4.0, 2.0]];
        let agg = aggregate_user_modality(&e, &[vec![0, 1], vec![2], vec![]]);
        assert_eq!(agg, ndarray::array![[0.5, 0.5], [4.0, 2.0], [0.0, 0.0]]);
    }
}
