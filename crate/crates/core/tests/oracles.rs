//! Fast implementations against straight-line reference computations on
//! random instances.

mod common;

use common::{
    auc_oracle, gc_oracle, gsm_oracle, head_oracle, ita_oracle, lm_oracle, log_sum_exp, model, nfm_oracle, random_head,
    random_mat, random_pairs,
};
use mmga_core::eval::{auc, eval_classification, eval_link_auc};
use mmga_core::graph::SocialGraph;
use mmga_core::model::graph_encoder::gate_weights;
use mmga_core::model::ParamStore;
use mmga_core::objectives::{
    graph_contrastive_loss, gsm_loss, ita_loss, lm_loss, nfm_loss, pair_probability,
};
use mmga_core::tape::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 100;
const TOL: f64 = 1e-6;

fn rng(i: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xC0FFEE ^ i)
}

#[test]
fn auc_equals_pair_counting() {
    for i in 0..INSTANCES {
        let mut r = rng(i);
        let np = r.random_range(1..100);
        let nn = r.random_range(1..100);
        // coarse scores so that ties occur
        let pos: Vec<f64> = (0..np).map(|_| r.random_range(0..20) as f64 / 4.0).collect();
        let neg: Vec<f64> = (0..nn).map(|_| r.random_range(0..20) as f64 / 4.0).collect();
        assert_eq!(auc(&pos, &neg).unwrap(), auc_oracle(&pos, &neg), "instance {i}");
    }
}

#[test]
fn auc_on_100_by_100_random_scores() {
    let mut r = rng(7);
    let pos: Vec<f64> = (0..100).map(|_| r.random()).collect();
    let neg: Vec<f64> = (0..100).map(|_| r.random()).collect();
    let wins = pos
        .iter()
        .flat_map(|p| neg.iter().map(move |n| (p, n)))
        .filter(|(p, n)| p > n)
        .count();
    assert_eq!(auc(&pos, &neg).unwrap(), wins as f64 / 10_000.0);
}

#[test]
fn link_auc_uses_inner_products() {
    for i in 0..INSTANCES {
        let mut r = rng(i);
        let n = 12;
        let emb = random_mat(&mut r, n, 5);
        let pairs = |r: &mut ChaCha8Rng| -> Vec<(u32, u32)> {
            (0..10)
                .map(|_| {
                    let u = r.random_range(0..n as u32);
                    let v = (u + r.random_range(1..n as u32)) % n as u32;
                    (u, v)
                })
                .collect()
        };
        let (pos, neg) = (pairs(&mut r), pairs(&mut r));
        let score = |&(u, v): &(u32, u32)| emb.row(u as usize).dot(&emb.row(v as usize));
        let ps: Vec<f64> = pos.iter().map(score).collect();
        let ns: Vec<f64> = neg.iter().map(score).collect();
        assert_eq!(eval_link_auc(&emb, &pos, &neg).unwrap(), auc(&ps, &ns).unwrap());
    }
}

#[test]
fn lm_loss_matches_smoothed_cross_entropy() {
    for i in 0..INSTANCES {
        let mut r = rng(i);
        let v = r.random_range(2..12);
        let rows = r.random_range(1..6);
        let eps = if i % 4 == 0 { 0.0 } else { r.random_range(0.0..0.5) };
        let logits = random_mat(&mut r, rows, v) * 3.0;
        let targets: Vec<usize> = (0..rows).map(|_| r.random_range(0..v)).collect();
        let expected = lm_oracle(&logits, &targets, eps);
        let got = lm_loss(&logits, &targets, eps).unwrap().value;
        assert!((got - expected).abs() < TOL, "instance {i}: {got} vs {expected}");
    }
}

#[test]
fn lm_loss_hand_case() {
    let logits = Mat::from_shape_vec((1, 4), vec![2.0, 0.0, 0.0, 0.0]).unwrap();
    let got = lm_loss(&logits, &[0], 0.1).unwrap().value;
    assert!((got - 0.4908).abs() < 1e-3, "{got}");
}

#[test]
fn ita_loss_matches_brute_force() {
    for i in 0..INSTANCES {
        let mut r = rng(i);
        let b = 4;
        let d = r.random_range(2..8);
        let tau = r.random_range(0.05..1.0);
        let img = random_mat(&mut r, b, d);
        let txt = random_mat(&mut r, b, d);
        let expected = ita_oracle(&img, &txt, tau);
        let got = ita_loss(&img, &txt, tau).unwrap();
        assert!((got - expected).abs() < TOL, "instance {i}: {got} vs {expected}");
    }
}

#[test]
fn nfm_loss_matches_mse() {
    for i in 0..INSTANCES {
        let mut r = rng(i);
        let (n, d) = (r.random_range(2..10), r.random_range(1..9));
        let pred = random_mat(&mut r, n, d);
        let truth = random_mat(&mut r, n, d);
        let masked: Vec<usize> = (0..n).filter(|_| r.random_bool(0.5)).collect();
        if masked.is_empty() {
            assert!(nfm_loss(&pred, &truth, &masked).unwrap().empty);
            continue;
        }
        let expected = nfm_oracle(&pred, &truth, &masked);
        let got = nfm_loss(&pred, &truth, &masked).unwrap().value;
        assert!((got - expected).abs() < TOL, "instance {i}");
    }
}

#[test]
fn gsm_loss_matches_bce() {
    for i in 0..INSTANCES {
        let mut r = rng(i);
        let n = 10;
        let emb = random_mat(&mut r, n, 6) * 2.0;
        let k = r.random_range(1..8);
        let pos = random_pairs(&mut r, n, k);
        let neg = random_pairs(&mut r, n, k);
        let expected = gsm_oracle(&emb, &pos, &neg);
        let got = gsm_loss(&emb, &pos, &neg).unwrap();
        assert!((got - expected).abs() < TOL, "instance {i}: {got} vs {expected}");
    }
}

#[test]
fn pair_probability_matches_composed_oracle() {
    for i in 0..INSTANCES {
        let mut r = rng(i);
        let d = r.random_range(1..6);
        let head = random_head(&mut r, d, 7);
        let e_u: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let e_v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let got = pair_probability(&e_u, &e_v, &head).unwrap();
        let expected = head_oracle(&e_u, &e_v, &head);
        assert!((got - expected).abs() < TOL, "instance {i}");
        assert!(got > 0.0 && got < 1.0);
    }
}

#[test]
fn graph_contrastive_loss_matches_bce() {
    for i in 0..INSTANCES {
        let mut r = rng(i);
        let (n, d) = (9, 4);
        let emb = random_mat(&mut r, n, d);
        let head = random_head(&mut r, d, 6);
        let (np, nn) = (r.random_range(1..6), r.random_range(1..6));
        let pos = random_pairs(&mut r, n, np);
        let neg = random_pairs(&mut r, n, nn);
        let expected = gc_oracle(&emb, &pos, &neg, &head);
        let got = graph_contrastive_loss(&emb, &pos, &neg, &head).unwrap();
        assert!((got - expected).abs() < TOL, "instance {i}: {got} vs {expected}");
    }
}

#[test]
fn gate_weights_match_direct_softmax() {
    let cfg = model(3, 4, 1);
    for i in 0..INSTANCES {
        let mut r = rng(i);
        let params = ParamStore::init(&cfg, i);
        let mut params = params;
        let w = random_mat(&mut r, 1, cfg.gate_width());
        *params.get_mut("graph.gate.0.w").unwrap() = w.clone();
        let b = params.get("graph.gate.0.b").unwrap()[[0, 0]];
        // node 0 with 5 neighbors
        let g = SocialGraph::from_edges(6, (1..6).map(|v| (0, v))).unwrap();
        let x = random_mat(&mut r, 6, 3);
        let ri = random_mat(&mut r, 6, 4);
        let rt = random_mat(&mut r, 6, 4);
        let logits: Vec<f64> = g
            .neighbors(0)
            .iter()
            .map(|&v| {
                let cat: Vec<f64> = [x.row(0), x.row(v), ri.row(0), rt.row(0), ri.row(v), rt.row(v)]
                    .iter()
                    .flat_map(|row| row.iter().copied())
                    .collect();
                b + cat.iter().zip(w.iter()).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect();
        let lse = log_sum_exp(&logits);
        let got = gate_weights(&params, &cfg, 0, 0, &x, &g, &ri, &rt).unwrap();
        for (a, l) in got.iter().zip(&logits) {
            assert!((a - (l - lse).exp()).abs() < TOL, "instance {i}");
        }
    }
}

#[test]
fn classification_metrics_match_counting() {
    for i in 0..INSTANCES {
        let mut r = rng(i);
        let n = r.random_range(5..40);
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let m = eval_classification(&pred, &truth, 3).unwrap();
        let correct = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
        assert!((m.accuracy - correct as f64 / n as f64).abs() < 1e-12);
        let mut f1s = Vec::new();
        for c in 0..3 {
            let tp = truth.iter().zip(&pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
            let fp = truth.iter().zip(&pred).filter(|&(&t, &p)| t != c && p == c).count() as f64;
            let fn_ = truth.iter().zip(&pred).filter(|&(&t, &p)| t == c && p != c).count() as f64;
            if tp + fp + fn_ == 0.0 {
                continue;
            }
            f1s.push(2.0 * tp / (2.0 * tp + fp + fn_));
        }
        let macro_f1 = f1s.iter().sum::<f64>() / f1s.len() as f64;
        assert!((m.macro_f1 - macro_f1).abs() < 1e-12, "instance {i}");
        for (t, p) in truth.iter().zip(&pred) {
            assert!(m.confusion[*t][*p] > 0);
        }
    }
}
