mod common;

use std::collections::HashSet;

use common::{graph_inputs, model, path_graph, permute_rows, random_mat, small_dataset, small_train};
use mmga_core::dataset::generate_dataset;
use mmga_core::eval::{user_representation, Slice};
use mmga_core::graph::SocialGraph;
use mmga_core::model::encoders::{encode_image, encode_text, encode_text_padded};
use mmga_core::model::graph_encoder::{encode_graph, gate_field};
use mmga_core::model::{ModelConfig, ParamStore};
use mmga_core::objectives::LossWeights;
use mmga_core::tape::Mat;
use mmga_core::train::checkpoint::{load_checkpoint, save_checkpoint};
use mmga_core::train::gradcheck::tiny_instance;
use mmga_core::train::{evaluate_step, StepPlan, TrainData};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn graph_encoder_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..20, p in 0.0f64..0.7) {
        let g = graph_inputs(seed, n, p, 2);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let base = encode_graph(&g.params, &g.cfg, &g.x, &g.graph, &g.ri, &g.rt).unwrap();
        let moved = encode_graph(
            &g.params,
            &g.cfg,
            &permute_rows(&g.x, &perm),
            &g.graph.permuted(&perm),
            &permute_rows(&g.ri, &perm),
            &permute_rows(&g.rt, &perm),
        )
        .unwrap();
        prop_assert_eq!(moved, permute_rows(&base, &perm));
    }

    #[test]
    fn gates_are_normalized_on_every_layer(seed in any::<u64>(), n in 2usize..25, p in 0.05f64..0.8) {
        let g = graph_inputs(seed, n, p, 3);
        let field = gate_field(&g.params, &g.cfg, &g.x, &g.graph, &g.ri, &g.rt).unwrap();
        prop_assert_eq!(field.weights.len(), 3);
        for layer in &field.weights {
            for u in 0..n {
                let range = g.graph.csr().edge_range(u);
                if range.is_empty() {
                    continue;
                }
                let w = &layer[range];
                prop_assert!(w.iter().all(|&a| a >= 0.0));
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn graph_encoder_is_k_hop_local(seed in any::<u64>(), layers in 1usize..4, target in 0usize..12) {
        let n = 12;
        let mut g = graph_inputs(seed, n, 0.0, layers);
        g.graph = path_graph(n);
        let base = encode_graph(&g.params, &g.cfg, &g.x, &g.graph, &g.ri, &g.rt).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        for far in 0..n {
            let mut x = g.x.clone();
            let mut ri = g.ri.clone();
            x.row_mut(far).assign(&random_mat(&mut rng, 1, 3).row(0));
            ri.row_mut(far).assign(&random_mat(&mut rng, 1, 8).row(0));
            let out = encode_graph(&g.params, &g.cfg, &x, &g.graph, &ri, &g.rt).unwrap();
            if far.abs_diff(target) > layers {
                prop_assert_eq!(out.row(target), base.row(target));
            }
        }
    }

    #[test]
    fn padding_does_not_change_text_embedding(seed in any::<u64>(), len in 1usize..8) {
        let cfg = model(3, 8, 1);
        let params = ParamStore::init(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
        let packed = encode_text(&params, &cfg, &tokens).unwrap();
        let mut padded = tokens.clone();
        padded.extend((len..cfg.max_tokens).map(|_| rng.random_range(0..cfg.vocab_size)));
        let out = encode_text_padded(&params, &cfg, &padded, len).unwrap();
        for (a, b) in packed.iter().zip(&out) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        prop_assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoders_are_finite_on_valid_inputs(seed in any::<u64>()) {
        let cfg = model(3, 8, 1);
        let params = ParamStore::init(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image: Vec<f32> = (0..64).map(|_| rng.random::<f32>()).collect();
        let e = encode_image(&params, &cfg, &image).unwrap();
        prop_assert_eq!(e.len(), 8);
        prop_assert!(e.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn token_order_changes_text_embedding() {
    let cfg = model(3, 8, 1);
    let params = ParamStore::init(&cfg, 21);
    let a = encode_text(&params, &cfg, &[1, 2, 3, 4]).unwrap();
    let b = encode_text(&params, &cfg, &[4, 3, 2, 1]).unwrap();
    assert_ne!(a, b);
}

#[test]
fn no_edges_means_no_mixing() {
    let g = graph_inputs(4, 6, 0.0, 2);
    let mut x = g.x.clone();
    let row = x.row(0).to_owned();
    x.row_mut(3).assign(&row);
    let out = encode_graph(&g.params, &g.cfg, &x, &SocialGraph::empty(6), &g.ri, &g.rt).unwrap();
    assert_eq!(out.row(0), out.row(3));
    assert_eq!(out.dim(), (6, 8));
}

fn image_grad_norm(stop_gradient: bool) -> f64 {
    let inst = tiny_instance(3).unwrap();
    let train = mmga_core::config::TrainConfig {
        stop_gradient,
        ..inst.train.clone()
    };
    let data = TrainData::new(&inst.ds, inst.graph.clone(), HashSet::new()).unwrap();
    let batch: Vec<usize> = (0..6).collect();
    let plan = StepPlan::new(&data, &inst.model, &train, &batch, 9).unwrap();
    let weights = LossWeights {
        lm: 0.0,
        ita: 0.0,
        nfm: 1.0,
        gsm: 1.0,
        gc_image: 0.0,
        gc_text: 0.0,
    };
    let (_, grads) = evaluate_step(&inst.params, &inst.model, &train, &data, &plan, weights, true, 0).unwrap();
    grads
        .unwrap()
        .iter()
        .filter(|(name, _)| name.starts_with("image."))
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

#[test]
fn graph_losses_reach_the_image_encoder() {
    assert!(image_grad_norm(false) > 1e-8);
    assert_eq!(image_grad_norm(true), 0.0);
}

#[test]
fn zeroing_the_text_encoder_only_touches_text_and_gates() {
    let cfg = small_dataset(24, 2, 6);
    let (ds, graph) = generate_dataset(&cfg, 6).unwrap();
    let m = ModelConfig::new(&small_train(6), &ds.meta).unwrap();
    let mut params = ParamStore::init(&m, 6);
    let full = user_representation(&params, &m, &ds, &graph).unwrap();

    params.zero_prefix("text.");
    let ablated = user_representation(&params, &m, &ds, &graph).unwrap();
    assert_eq!(ablated.slice(Slice::Text), Mat::zeros((24, m.embed_dim)));
    assert_eq!(ablated.slice(Slice::Image), full.slice(Slice::Image));

    // without the text blocks of the gates, R_G no longer sees R_T
    let (dx, d) = (m.stat_dim, m.embed_dim);
    let blocks = [(2 * dx + d, d), (2 * dx + 3 * d, d)];
    let mut gated = ParamStore::init(&m, 6);
    for k in 0..m.gnn_layers {
        let w = gated.get_mut(&format!("graph.gate.{k}.w")).unwrap();
        for (off, len) in blocks {
            w.slice_mut(ndarray::s![.., off..off + len]).fill(0.0);
        }
    }
    let before = user_representation(&gated, &m, &ds, &graph).unwrap();
    gated.zero_prefix("text.");
    let after = user_representation(&gated, &m, &ds, &graph).unwrap();
    assert_eq!(after, before.zeroed(Slice::Text));
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let cfg = small_dataset(24, 2, 7);
    let (ds, graph) = generate_dataset(&cfg, 7).unwrap();
    let m = ModelConfig::new(&small_train(7), &ds.meta).unwrap();
    let params = ParamStore::init(&m, 7);
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_checkpoint(dir.path(), &m, &params, 0, None, None).unwrap();
    let groups: HashSet<&str> = manifest.params.iter().map(|e| e.name.split('.').next().unwrap()).collect();
    assert_eq!(groups, HashSet::from(["image", "text", "graph", "gc"]));
    let (_, loaded) = load_checkpoint(dir.path(), Some(&m)).unwrap();
    assert_eq!(
        user_representation(&params, &m, &ds, &graph).unwrap(),
        user_representation(&loaded, &m, &ds, &graph).unwrap()
    );

    let blob = dir.path().join(&manifest.params[0].file);
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&blob, bytes).unwrap();
    let err = load_checkpoint(dir.path(), Some(&m)).unwrap_err();
    assert_eq!(err.kind(), "digest");
}
