//! Multimodal-mixture graph encoder.
//!
//! Every layer scores each directed edge u→v with a linear map of
//! `x_u ‖ x_v ‖ ri_u ‖ rt_u ‖ ri_v ‖ rt_v` (node statistics plus the image and
//! text embeddings of both users), normalizes the scores with a softmax over
//! the neighborhood of u, and adds the weighted neighbor states to `h_u`.
//! Gates are recomputed per layer from the static inputs, with one weight
//! row per layer.

use std::sync::Arc;

use super::{Bound, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::graph::{Csr, SocialGraph};
use crate::tape::{Mat, Tape, Var};

/// Per-layer raw logits and normalized weights, one entry per directed
/// edge in CSR order.
#[derive(Debug, Clone, PartialEq)]
pub struct GateField {
    pub logits: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

pub struct GraphOutput {
    pub embeddings: Var,
    /// Normalized gate weights of each layer.
    pub gates: Vec<Var>,
}

/// Build `R_G` on `tape`. `ri`/`rt` may be detached copies when gradients
/// should not reach the image and text encoders.
pub fn encode_graph_on(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    x: Var,
    csr: &Arc<Csr>,
    ri: Var,
    rt: Var,
) -> Result<GraphOutput> {
    let n = csr.n_nodes();
    for (what, v, width) in [("X", x, cfg.stat_dim), ("R_I", ri, cfg.embed_dim), ("R_T", rt, cfg.embed_dim)] {
        if tape.value(v).dim() != (n, width) {
            return Err(Error::Shape(format!(
                "{what} is {:?}, expected ({n}, {width})",
                tape.value(v).dim()
            )));
        }
    }
    let mut h = tape.linear(x, p["graph.in.w"], p["graph.in.b"]);
    let mut gates = Vec::with_capacity(cfg.gnn_layers);
    for k in 0..cfg.gnn_layers {
        let logits = tape.gate_logits(
            x,
            ri,
            rt,
            p[&format!("graph.gate.{k}.w")],
            p[&format!("graph.gate.{k}.b")],
            csr.clone(),
        );
        let a = tape.segment_softmax(logits, csr.clone());
        gates.push(a);
        h = tape.propagate(h, a, csr.clone());
        if cfg.gnn_norm {
            let act = tape.gelu(h);
            h = tape.layer_norm(act, p[&format!("graph.ln.{k}.g")], p[&format!("graph.ln.{k}.b")]);
        }
    }
    Ok(GraphOutput { embeddings: h, gates })
}

fn graph_params(params: &ParamStore, tape: &mut Tape) -> Bound {
    params.bind_filtered(tape, |n| n.starts_with("graph."))
}

/// `R_G` for the given node features and modality embeddings.
pub fn encode_graph(params: &ParamStore, cfg: &ModelConfig, x: &Mat, graph: &SocialGraph, ri: &Mat, rt: &Mat) -> Result<Mat> {
    let mut tape = Tape::new();
    let p = graph_params(params, &mut tape);
    let (xv, iv, tv) = (tape.leaf(x.clone()), tape.leaf(ri.clone()), tape.leaf(rt.clone()));
    let out = encode_graph_on(&mut tape, &p, cfg, xv, graph.csr(), iv, tv)?;
    Ok(tape.value(out.embeddings).clone())
}

/// Gate logits and weights of every layer.
pub fn gate_field(params: &ParamStore, cfg: &ModelConfig, x: &Mat, graph: &SocialGraph, ri: &Mat, rt: &Mat) -> Result<GateField> {
    let mut tape = Tape::new();
    let p = graph_params(params, &mut tape);
    let (xv, iv, tv) = (tape.leaf(x.clone()), tape.leaf(ri.clone()), tape.leaf(rt.clone()));
    let expect = 2 * x.ncols() + 2 * ri.ncols() + 2 * rt.ncols();
    if cfg.gate_width() != expect || x.nrows() != graph.n_nodes() || ri.nrows() != graph.n_nodes() || rt.nrows() != graph.n_nodes() {
        return Err(Error::Shape("gate inputs do not match the graph or gate width".into()));
    }
    let csr = graph.csr().clone();
    let mut field = GateField {
        logits: Vec::new(),
        weights: Vec::new(),
    };
    for k in 0..cfg.gnn_layers {
        let l = tape.gate_logits(xv, iv, tv, p[&format!("graph.gate.{k}.w")], p[&format!("graph.gate.{k}.b")], csr.clone());
        let a = tape.segment_softmax(l, csr.clone());
        field.logits.push(tape.value(l).iter().copied().collect());
        field.weights.push(tape.value(a).iter().copied().collect());
    }
    Ok(field)
}

/// Normalized influence weights of node `u`'s neighbors in layer `layer`,
/// ordered like `graph.neighbors(u)`.
pub fn gate_weights(
    params: &ParamStore,
    cfg: &ModelConfig,
    layer: usize,
    u: usize,
    x: &Mat,
    graph: &SocialGraph,
    ri: &Mat,
    rt: &Mat,
) -> Result<Vec<f64>> {
    if layer >= cfg.gnn_layers {
        return Err(Error::InvalidArgument(format!("layer {layer} >= {}", cfg.gnn_layers)));
    }
    if u >= graph.n_nodes() || graph.degree(u) == 0 {
        return Err(Error::InvalidArgument(format!("node {u} is isolated or missing")));
    }
    let field = gate_field(params, cfg, x, graph, ri, rt)?;
    Ok(field.weights[layer][graph.csr().edge_range(u)].to_vec())
}

/// One propagation step `h'_u = h_u + Σ a_{u,v} h_v`, optionally followed by
/// GELU and layer normalization with the given `(gamma, beta)` rows.
pub fn propagate_layer(h: &Mat, graph: &SocialGraph, weights: &[f64], norm: Option<(&Mat, &Mat)>) -> Result<Mat> {
    let csr = graph.csr();
    if weights.len() != csr.n_directed() || h.nrows() != graph.n_nodes() {
        return Err(Error::Shape(format!(
            "{} weights / {} rows for {} directed edges / {} nodes",
            weights.len(),
            h.nrows(),
            csr.n_directed(),
            graph.n_nodes()
        )));
    }
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let av = tape.leaf(Mat::from_shape_vec((weights.len(), 1), weights.to_vec()).expect("column"));
    let mut out = tape.propagate(hv, av, csr.clone());
    if let Some((g, b)) = norm {
        let (g, b) = (tape.leaf(g.clone()), tape.leaf(b.clone()));
        let act = tape.gelu(out);
        out = tape.layer_norm(act, g, b);
    }
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_cfg;
    use ndarray::array;

    #[test]
    fn hand_evaluated_propagation() {
        let g = SocialGraph::from_edges(2, [(0, 1)]).unwrap();
        let h = array![[1.0, 0.0], [0.0, 1.0]];
        let out = propagate_layer(&h, &g, &[1.0, 1.0], None).unwrap();
        assert_eq!(out, array![[1.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn isolated_node_keeps_state() {
        let g = SocialGraph::from_edges(3, [(0, 1)]).unwrap();
        let h = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let out = propagate_layer(&h, &g, &[0.5, 0.5], None).unwrap();
        assert_eq!(out.row(2), h.row(2));
        assert!(propagate_layer(&h, &g, &[0.5], None).is_err());
    }

    #[test]
    fn zero_gate_weights_are_uniform() {
        let cfg = tiny_cfg();
        let mut p = ParamStore::init(&cfg, 1);
        p.zero_prefix("graph.gate.");
        let g = SocialGraph::from_edges(4, [(0, 1), (0, 2), (0, 3)]).unwrap();
        let x = Mat::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        let r = Mat::from_shape_fn((4, 8), |(i, j)| ((i + j) % 3) as f64);
        let w = gate_weights(&p, &cfg, 0, 0, &x, &g, &r, &r).unwrap();
        assert!(w.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(gate_weights(&p, &cfg, 0, 0, &x, &SocialGraph::empty(4), &r, &r).is_err());
        assert!(gate_weights(&p, &cfg, 5, 0, &x, &g, &r, &r).is_err());
    }

    #[test]
    fn shape_errors() {
        let cfg = tiny_cfg();
        let p = ParamStore::init(&cfg, 1);
        let g = SocialGraph::from_edges(3, [(0, 1)]).unwrap();
        let x = Mat::zeros((3, 4));
        let r = Mat::zeros((3, 8));
        assert!(encode_graph(&p, &cfg, &x, &g, &r, &r).is_ok());
        assert!(encode_graph(&p, &cfg, &Mat::zeros((2, 4)), &g, &r, &r).is_err());
        assert!(encode_graph(&p, &cfg, &x, &g, &Mat::zeros((3, 7)), &r).is_err());
    }
}
