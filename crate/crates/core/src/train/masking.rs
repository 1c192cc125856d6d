//! Masking procedures for the self-supervised objectives. Each one touches
//! only its own target: tokens, feature rows or edges.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::SocialGraph;
use crate::rng::rng_from;
use crate::tape::Mat;

fn check_rate(rate: f64, upper_inclusive: bool) -> Result<()> {
    let ok = if upper_inclusive {
        (0.0..=1.0).contains(&rate)
    } else {
        (0.0..1.0).contains(&rate)
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("mask rate {rate} out of range")))
    }
}

/// Replace each position by `mask_id` with probability `rate`. When
/// `rate > 0` at least one position is masked. Returns the masked sequence
/// and the sorted masked positions.
pub fn mask_tokens(tokens: &[usize], rate: f64, seed: u64, mask_id: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    check_rate(rate, true)?;
    let mut out = tokens.to_vec();
    if rate == 0.0 || tokens.is_empty() {
        return Ok((out, Vec::new()));
    }
    let mut rng = rng_from(seed);
    let mut positions: Vec<usize> = (0..tokens.len()).filter(|_| rng.random::<f64>() < rate).collect();
    if positions.is_empty() {
        positions.push(rng.random_range(0..tokens.len()));
    }
    for &i in &positions {
        out[i] = mask_id;
    }
    Ok((out, positions))
}

/// Rows chosen independently with probability `rate`, in ascending order.
pub fn sample_rows(n: usize, rate: f64, seed: u64) -> Result<Vec<usize>> {
    check_rate(rate, true)?;
    let mut rng = rng_from(seed);
    Ok((0..n).filter(|_| rate > 0.0 && rng.random::<f64>() < rate).collect())
}

/// Replace the rows of `x` chosen by [`sample_rows`] with `mask_vector`.
pub fn mask_node_features(x: &Mat, rate: f64, seed: u64, mask_vector: &[f64]) -> Result<(Mat, Vec<usize>)> {
    if mask_vector.len() != x.ncols() {
        return Err(Error::Shape(format!("mask vector of length {} for {} columns", mask_vector.len(), x.ncols())));
    }
    let rows = sample_rows(x.nrows(), rate, seed)?;
    let mut out = x.clone();
    let fill = ndarray::ArrayView1::from(mask_vector);
    for &r in &rows {
        out.row_mut(r).assign(&fill);
    }
    Ok((out, rows))
}

/// Remove `round(rate · |E|)` uniformly chosen edges. Returns the remaining
/// graph and the removed edges in edge-list order.
pub fn mask_edges(graph: &SocialGraph, rate: f64, seed: u64) -> Result<(SocialGraph, Vec<(u32, u32)>)> {
    check_rate(rate, false)?;
    let m = graph.n_edges();
    let count = (rate * m as f64).round() as usize;
    if count == 0 {
        return Ok((graph.clone(), Vec::new()));
    }
    let mut rng = rng_from(seed);
    let mut picked = index::sample(&mut rng, m, count).into_vec();
    picked.sort_unstable();
    let removed: Vec<(u32, u32)> = picked.iter().map(|&i| graph.edges()[i]).collect();
    Ok((graph.without_edges(&removed), removed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_rate_extremes() {
        let t = vec![3, 1, 4, 1, 5];
        let (same, pos) = mask_tokens(&t, 0.0, 1, 9).unwrap();
        assert_eq!(same, t);
        assert!(pos.is_empty());
        let (all, pos) = mask_tokens(&t, 1.0, 1, 9).unwrap();
        assert_eq!(all, vec![9; 5]);
        assert_eq!(pos, vec![0, 1, 2, 3, 4]);
        assert!(mask_tokens(&t, 1.5, 1, 9).is_err());
        // a tiny rate still masks one position
        assert_eq!(mask_tokens(&t, 1e-9, 1, 9).unwrap().1.len(), 1);
    }

    #[test]
    fn feature_rate_extremes() {
        let x = Mat::from_shape_fn((6, 3), |(i, j)| (i + j) as f64);
        let (same, rows) = mask_node_features(&x, 0.0, 2, &[0.0; 3]).unwrap();
        assert_eq!(same, x);
        assert!(rows.is_empty());
        let (all, rows) = mask_node_features(&x, 1.0, 2, &[7.0; 3]).unwrap();
        assert!(all.iter().all(|&v| v == 7.0));
        assert_eq!(rows.len(), 6);
        assert!(mask_node_features(&x, 0.5, 2, &[0.0; 2]).is_err());
    }

    #[test]
    fn edge_masking_partitions() {
        let g = SocialGraph::from_edges(6, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)]).unwrap();
        let (same, none) = mask_edges(&g, 0.0, 0).unwrap();
        assert_eq!(same, g);
        assert!(none.is_empty());
        let (rest, removed) = mask_edges(&g, 0.3, 5).unwrap();
        assert_eq!(removed.len(), 2);
        assert_eq!(rest.n_edges() + removed.len(), g.n_edges());
        for &(u, v) in &removed {
            assert!(!rest.has_edge(u as usize, v as usize) && !rest.has_edge(v as usize, u as usize));
        }
        assert!(mask_edges(&g, 1.0, 0).is_err());
    }
}
