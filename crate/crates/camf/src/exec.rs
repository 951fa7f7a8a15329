//! Execution mode for the data-parallel kernels.
//!
//! Every hot loop in the crate (convolutions, per-channel Score-CAM passes,
//! per-fold training) is written against [`ExecMode`]. `Parallel` fans work
//! out over rayon; `Sequential` runs the identical per-chunk code in order.
//! Results are bit-identical in both modes because parallelism is only ever
//! applied across disjoint output slices and every floating-point reduction
//! happens in a fixed order inside a single chunk.
//!
//! With the `parallel` feature disabled rayon is not compiled in at all and
//! `ExecMode::default()` is `Sequential`.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            ExecMode::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            ExecMode::Sequential
        }
    }
}

impl ExecMode {
    /// Split `buf` into chunks of `chunk_len` and run `f(chunk_index, chunk)`
    /// on each. Chunks are disjoint, so both modes produce identical output.
    pub fn for_each_chunk_mut<F>(self, buf: &mut [f64], chunk_len: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        assert!(chunk_len > 0 && buf.len() % chunk_len == 0);
        match self {
            ExecMode::Sequential => {
                for (i, chunk) in buf.chunks_mut(chunk_len).enumerate() {
                    f(i, chunk);
                }
            }
            #[cfg(feature = "parallel")]
            ExecMode::Parallel => {
                buf.par_chunks_mut(chunk_len)
                    .enumerate()
                    .for_each(|(i, chunk)| f(i, chunk));
            }
        }
    }

    /// `(0..len).map(f).collect()`, parallelized when possible. Output order
    /// is index order in both modes.
    pub fn map_collect<T, F>(self, len: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            ExecMode::Sequential => (0..len).map(f).collect(),
            #[cfg(feature = "parallel")]
            ExecMode::Parallel => (0..len).into_par_iter().map(f).collect(),
        }
    }

    /// Fallible variant of [`map_collect`]; the first error (by index order in
    /// sequential mode, any in parallel mode) is returned.
    pub fn try_map_collect<T, E, F>(self, len: usize, f: F) -> std::result::Result<Vec<T>, E>
    where
        T: Send,
        E: Send,
        F: Fn(usize) -> std::result::Result<T, E> + Sync + Send,
    {
        match self {
            ExecMode::Sequential => (0..len).map(f).collect(),
            #[cfg(feature = "parallel")]
            ExecMode::Parallel => (0..len).into_par_iter().map(f).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_writes_cover_buffer() {
        let mut buf = vec![0.0; 12];
        ExecMode::default().for_each_chunk_mut(&mut buf, 3, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 3 + j) as f64;
            }
        });
        let want: Vec<f64> = (0..12).map(|i| i as f64).collect();
        assert_eq!(buf, want);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential() {
        let f = |i: usize| (i as f64).sin() * 3.0;
        let a = ExecMode::Sequential.map_collect(100, f);
        let b = ExecMode::Parallel.map_collect(100, f);
        assert_eq!(a, b);
    }
}
