//! Data-parallel helpers. With the `parallel` feature these fan out over
//! rayon; without it they run the same closures sequentially. Results are
//! always collected in index order so both builds are bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Evaluate `f(i)` for `i in 0..n`, results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Apply `f(row_index, row)` to every `width`-sized row of `data`.
pub fn for_each_row<F>(data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(width).enumerate().for_each(|(i, r)| f(i, r));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(width).enumerate().for_each(|(i, r)| f(i, r));
    }
}

/// Whether this build fans out over threads.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_keeps_order() {
        let v = map_range(1000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
    }

    #[test]
    fn rows_are_visited_once() {
        let mut d = vec![0.0; 30];
        for_each_row(&mut d, 3, |i, r| r.iter_mut().for_each(|x| *x += i as f64));
        assert_eq!(d[29], 9.0);
        assert_eq!(d[0], 0.0);
    }
}
