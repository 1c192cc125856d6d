mod common;

use std::collections::HashSet;

use common::{random_mat, small_dataset, small_train};
use mmga_core::config::{DatasetConfig, OptimizerKind, TrainConfig};
use mmga_core::dataset::generate_dataset;
use mmga_core::model::ModelConfig;
use mmga_core::objectives::LossWeights;
use mmga_core::train::gradcheck::tiny_instance;
use mmga_core::train::masking::{mask_edges, mask_node_features, mask_tokens};
use mmga_core::train::optim::Optimizer;
use mmga_core::train::{evaluate_step, pretrain, steps_per_epoch, HistoryRecord, StepPlan, TrainData, TrainState};
use mmga_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ZERO: LossWeights = LossWeights {
    lm: 0.0,
    ita: 0.0,
    nfm: 0.0,
    gsm: 0.0,
    gc_image: 0.0,
    gc_text: 0.0,
};

fn within_four_sigma(count: usize, n: usize, p: f64) -> bool {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - mean).abs() <= 4.0 * sd
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn token_masking_only_touches_masked_positions(
        tokens in prop::collection::vec(0usize..50, 1..40),
        rate in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let (out, pos) = mask_tokens(&tokens, rate, seed, 50).unwrap();
        let set: HashSet<usize> = pos.iter().copied().collect();
        for (i, (&a, &b)) in tokens.iter().zip(&out).enumerate() {
            if set.contains(&i) {
                prop_assert_eq!(b, 50);
            } else {
                prop_assert_eq!(a, b);
            }
        }
        prop_assert_eq!(pos.is_empty(), rate == 0.0);
        prop_assert_eq!(mask_tokens(&tokens, rate, seed, 50).unwrap(), (out, pos));
    }

    #[test]
    fn feature_masking_only_touches_chosen_rows(seed in any::<u64>(), rate in 0.0f64..=1.0, n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_mat(&mut rng, n, 4);
        let fill = [9.0, 9.0, 9.0, 9.0];
        let (out, rows) = mask_node_features(&x, rate, seed, &fill).unwrap();
        let set: HashSet<usize> = rows.iter().copied().collect();
        for r in 0..n {
            if set.contains(&r) {
                prop_assert!(out.row(r).iter().all(|&v| v == 9.0));
            } else {
                prop_assert_eq!(out.row(r), x.row(r));
            }
        }
    }

    #[test]
    fn edge_masking_partitions_edges(seed in any::<u64>(), rate in 0.0f64..0.99) {
        let (_, g) = generate_dataset(&small_dataset(30, 2, seed), seed).unwrap();
        let (rest, removed) = mask_edges(&g, rate, seed).unwrap();
        prop_assert_eq!(removed.len(), (rate * g.n_edges() as f64).round() as usize);
        prop_assert_eq!(rest.n_nodes(), g.n_nodes());
        let a: HashSet<_> = rest.edges().iter().copied().collect();
        let b: HashSet<_> = removed.iter().copied().collect();
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(&a | &b, g.edges().iter().copied().collect::<HashSet<_>>());
    }
}

#[test]
fn masking_rates_are_binomial() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..60)).collect();
    let (_, pos) = mask_tokens(&tokens, 0.15, 4, 64).unwrap();
    assert!(within_four_sigma(pos.len(), 10_000, 0.15), "{}", pos.len());

    let x = random_mat(&mut rng, 10_000, 2);
    let (_, rows) = mask_node_features(&x, 0.15, 5, &[0.0, 0.0]).unwrap();
    assert!(within_four_sigma(rows.len(), 10_000, 0.15), "{}", rows.len());

    assert!(mask_tokens(&tokens, 1.5, 0, 64).is_err());
    assert!(mask_node_features(&x, -0.1, 0, &[0.0, 0.0]).is_err());
}

fn run(ds_cfg: &DatasetConfig, cfg: &TrainConfig) -> (TrainState, Vec<HistoryRecord>) {
    let (ds, graph) = generate_dataset(ds_cfg, ds_cfg.seed).unwrap();
    let model = ModelConfig::new(cfg, &ds.meta).unwrap();
    let data = TrainData::new(&ds, graph, HashSet::new()).unwrap();
    let mut state = TrainState::new(model, cfg);
    let history = pretrain(&mut state, &data, cfg, |_, _, _| Ok(())).unwrap();
    (state, history)
}

#[test]
fn pretraining_is_deterministic() {
    let ds = small_dataset(24, 2, 3);
    let cfg = TrainConfig {
        epochs: 2,
        ..small_train(3)
    };
    let (a, ha) = run(&ds, &cfg);
    let (b, hb) = run(&ds, &cfg);
    assert_eq!(ha, hb);
    assert_eq!(a.params, b.params);
    assert_eq!(ha.len(), 2 * steps_per_epoch(48, cfg.batch_size));
    for r in &ha {
        for name in ["lm", "ita", "nfm", "gsm", "gc_image", "gc_text", "total"] {
            let v = r.get(name).unwrap();
            assert!(v.is_finite() && v >= 0.0, "{name} = {v}");
        }
    }
}

#[test]
fn zero_epochs_return_the_initial_state() {
    let ds = small_dataset(24, 2, 3);
    let cfg = TrainConfig {
        epochs: 0,
        ..small_train(3)
    };
    let (state, history) = run(&ds, &cfg);
    assert!(history.is_empty());
    assert_eq!(state.step, 0);
    assert_eq!(state.params, mmga_core::model::ParamStore::init(&state.model, cfg.seed));
}

#[test]
fn zero_weights_leave_parameters_unchanged() {
    let ds = small_dataset(24, 2, 3);
    for optimizer in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let cfg = TrainConfig {
            optimizer,
            weight_lm: 0.0,
            weight_ita: 0.0,
            weight_nfm: 0.0,
            weight_gsm: 0.0,
            weight_gc_image: 0.0,
            weight_gc_text: 0.0,
            ..small_train(3)
        };
        let (state, history) = run(&ds, &cfg);
        assert!(!history.is_empty());
        assert!(history.iter().all(|r| r.total == 0.0));
        assert_eq!(state.params, mmga_core::model::ParamStore::init(&state.model, cfg.seed));
    }
}

#[test]
fn same_plan_gives_same_losses() {
    let inst = tiny_instance(5).unwrap();
    let data = TrainData::new(&inst.ds, inst.graph.clone(), HashSet::new()).unwrap();
    let batch: Vec<usize> = (0..6).collect();
    let eval = || {
        let plan = StepPlan::new(&data, &inst.model, &inst.train, &batch, 77).unwrap();
        evaluate_step(&inst.params, &inst.model, &inst.train, &data, &plan, LossWeights::default(), false, 0)
            .unwrap()
            .0
    };
    assert_eq!(eval(), eval());
}

#[test]
fn non_finite_loss_names_the_component() {
    let inst = tiny_instance(5).unwrap();
    let data = TrainData::new(&inst.ds, inst.graph.clone(), HashSet::new()).unwrap();
    let plan = StepPlan::new(&data, &inst.model, &inst.train, &[0, 1, 2], 1).unwrap();
    let mut params = inst.params.clone();
    params.get_mut("text.lm.b").unwrap().fill(f64::NAN);
    let err = evaluate_step(&params, &inst.model, &inst.train, &data, &plan, LossWeights::default(), false, 4)
        .unwrap_err();
    assert!(matches!(err, Error::NonFinite { component: "lm", step: 4 }), "{err}");
}

#[test]
fn graph_contrastive_losses_decrease_on_a_fixed_instance() {
    let inst = tiny_instance(8).unwrap();
    let data = TrainData::new(&inst.ds, inst.graph.clone(), HashSet::new()).unwrap();
    let plan = StepPlan::new(&data, &inst.model, &inst.train, &[0, 1, 2, 3, 4, 5], 3).unwrap();
    let weights = LossWeights {
        gc_image: 1.0,
        gc_text: 1.0,
        ..ZERO
    };
    let mut params = inst.params.clone();
    let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2);
    let mut series = Vec::new();
    for step in 0..51 {
        let (c, g) = evaluate_step(&params, &inst.model, &inst.train, &data, &plan, weights, true, step).unwrap();
        series.push((c.gc_image, c.gc_text));
        opt.step(&mut params, &g.unwrap()).unwrap();
    }
    for pick in [|p: &(f64, f64)| p.0, |p: &(f64, f64)| p.1] {
        let v: Vec<f64> = series.iter().map(pick).collect();
        let ups = v.windows(2).filter(|w| w[1] >= w[0]).count();
        assert!(ups <= 5, "{ups} non-decreasing steps: {v:?}");
        assert!(v[50] < v[0]);
    }
}

#[test]
fn loss_falls_between_first_and_third_epoch() {
    let ds = DatasetConfig::default();
    let cfg = TrainConfig {
        epochs: 3,
        posts_per_user_step: 1,
        embed_dim: 16,
        n_layers: 1,
        n_heads: 2,
        head_hidden: 16,
        ..TrainConfig::default()
    };
    let (_, history) = run(&ds, &cfg);
    let mean = |e: usize| {
        let v: Vec<f64> = history.iter().filter(|r| r.epoch == e).map(|r| r.total).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(2) < mean(0), "epoch 3 {} vs epoch 1 {}", mean(2), mean(0));
}
