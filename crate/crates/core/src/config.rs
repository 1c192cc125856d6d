//! Flat key-value configuration files (TOML without tables). Field names are
//! the config keys; unknown keys are rejected.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the synthetic social-media generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_users: usize,
    pub k_topics: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub posts_per_user: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub min_tokens: usize,
    pub image_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub stat_dim: usize,
    /// Probability that a token is drawn from its topic's vocabulary block
    /// instead of the whole vocabulary.
    pub vocab_concentration: f64,
    /// Weight of uniform noise mixed into each glyph image, in `[0, 1]`.
    pub glyph_noise: f64,
    /// Log-scale spread of per-user popularity weights (degree correction).
    /// Zero gives a plain block model.
    pub popularity_spread: f64,
    pub fans_quantile: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_users: 400,
            k_topics: 4,
            p_in: 0.1,
            p_out: 0.01,
            posts_per_user: 5,
            vocab_size: 64,
            max_tokens: 32,
            min_tokens: 8,
            image_channels: 1,
            image_height: 32,
            image_width: 32,
            stat_dim: 8,
            vocab_concentration: 0.2,
            glyph_noise: 0.9,
            popularity_spread: 0.8,
            fans_quantile: 0.2,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.k_topics < 2 {
            return fail("k_topics must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.p_in) || !(0.0..=1.0).contains(&self.p_out) {
            return fail("edge probabilities must lie in [0, 1]");
        }
        if self.p_out > self.p_in || (self.p_out == self.p_in && self.p_in > 0.0) {
            return fail("p_out must be smaller than p_in");
        }
        if self.n_users == 0 || self.n_users % self.k_topics != 0 {
            return fail("n_users must be a positive multiple of k_topics");
        }
        if self.posts_per_user == 0 {
            return fail("posts_per_user must be positive");
        }
        if self.vocab_size < self.k_topics {
            return fail("vocab_size must be at least k_topics");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return fail("need 1 <= min_tokens <= max_tokens");
        }
        if self.image_channels == 0 || self.image_height == 0 || self.image_width == 0 {
            return fail("image dimensions must be positive");
        }
        if self.stat_dim < 3 {
            return fail("stat_dim must be at least 3");
        }
        if !(0.0..=1.0).contains(&self.vocab_concentration) || !(0.0..=1.0).contains(&self.glyph_noise) {
            return fail("vocab_concentration and glyph_noise must lie in [0, 1]");
        }
        if !(self.popularity_spread >= 0.0 && self.popularity_spread.is_finite()) {
            return fail("popularity_spread must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.fans_quantile) {
            return fail("fans_quantile must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Pre-training configuration, including the model hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Posts per step for the language-model and image-text objectives.
    pub batch_size: usize,
    pub token_mask_rate: f64,
    pub feature_mask_rate: f64,
    pub edge_mask_rate: f64,
    /// Positive pairs per step for each graph-contrastive head (negatives 1:1).
    pub gc_pairs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub weight_lm: f64,
    pub weight_ita: f64,
    pub weight_nfm: f64,
    pub weight_gsm: f64,
    pub weight_gc_image: f64,
    pub weight_gc_text: f64,
    /// Block gradients from the gate path into the image/text encoders.
    pub stop_gradient: bool,
    /// Epochs at the start of training that only optimize LM and ITA.
    pub warmup_epochs: usize,
    /// Fraction of edges held out for link-prediction evaluation.
    pub holdout_frac: f64,
    pub temperature: f64,
    pub label_smoothing: f64,
    /// Posts sampled per user when building user-level embeddings during
    /// training; 0 uses every post.
    pub posts_per_user_step: usize,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub patch_size: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub gnn_layers: usize,
    pub head_hidden: usize,
    /// Nonlinearity and layer normalization after each propagation step.
    pub gnn_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            token_mask_rate: 0.15,
            feature_mask_rate: 0.15,
            edge_mask_rate: 0.1,
            gc_pairs: 256,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            weight_lm: 1.0,
            weight_ita: 1.0,
            weight_nfm: 1.0,
            weight_gsm: 1.0,
            weight_gc_image: 1.0,
            weight_gc_text: 1.0,
            stop_gradient: false,
            warmup_epochs: 0,
            holdout_frac: 0.1,
            temperature: 0.07,
            label_smoothing: 0.1,
            posts_per_user_step: 1,
            checkpoint_every: 0,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            patch_size: 8,
            mlp_ratio: 2,
            dropout: 0.0,
            gnn_layers: 2,
            head_hidden: 64,
            gnn_norm: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        for (name, r) in [
            ("token_mask_rate", self.token_mask_rate),
            ("feature_mask_rate", self.feature_mask_rate),
            ("dropout", self.dropout),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.edge_mask_rate) {
            return fail("edge_mask_rate must lie in [0, 1)");
        }
        if !(self.holdout_frac > 0.0 && self.holdout_frac < 1.0) {
            return fail("holdout_frac must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2");
        }
        if !(self.temperature > 0.0) {
            return fail("temperature must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("label_smoothing must lie in [0, 1)");
        }
        let weights = [
            self.weight_lm,
            self.weight_ita,
            self.weight_nfm,
            self.weight_gsm,
            self.weight_gc_image,
            self.weight_gc_text,
        ];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return fail("loss weights must be non-negative");
        }
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return fail("embed_dim must be a positive multiple of n_heads");
        }
        if self.patch_size == 0 || self.mlp_ratio == 0 || self.head_hidden == 0 {
            return fail("patch_size, mlp_ratio and head_hidden must be positive");
        }
        Ok(())
    }
}

/// Parse a flat key-value config; unknown keys are errors.
pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

pub fn render<T: Serialize>(cfg: &T) -> String {
    toml::to_string(cfg).expect("flat configs always serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_partial_config_with_defaults() {
        let cfg: TrainConfig = parse("epochs = 3\noptimizer = \"sgd\"\nlearning_rate = 0.5\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.optimizer, OptimizerKind::Sgd);
        assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse::<DatasetConfig>("n_users = 40\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn render_round_trips() {
        let cfg = TrainConfig {
            seed: 17,
            ..Default::default()
        };
        assert_eq!(parse::<TrainConfig>(&render(&cfg)).unwrap(), cfg);
        let d = DatasetConfig::default();
        assert_eq!(parse::<DatasetConfig>(&render(&d)).unwrap(), d);
    }

    #[test]
    fn dataset_preconditions() {
        let ok = DatasetConfig::default();
        assert!(ok.validate().is_ok());
        let bad = |f: fn(&mut DatasetConfig)| {
            let mut c = DatasetConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.k_topics = 1));
        assert!(bad(|c| c.p_out = 0.2));
        assert!(bad(|c| c.p_in = 1.5));
        assert!(bad(|c| c.n_users = 401));
        assert!(bad(|c| c.posts_per_user = 0));
        let mut zero = DatasetConfig::default();
        zero.p_in = 0.0;
        zero.p_out = 0.0;
        assert!(zero.validate().is_ok());
    }
}
