//! Execution-mode switch for the data-parallel surfaces: independent
//! (seed, method) cells, ascent restarts, and Monte Carlo batches.
//!
//! Every work item owns its seed-derived RNG, so results are identical in
//! both modes; Parallel only changes wall-clock time. Without the `parallel`
//! feature the Parallel arm degrades to the sequential loop.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

impl ExecMode {
    /// Honors `MIRE_WORKERS=1` as a request for sequential execution without
    /// rebuilding the thread pool.
    pub fn from_env() -> Self {
        match std::env::var("MIRE_WORKERS") {
            Ok(v) if v.trim() == "1" => ExecMode::Sequential,
            _ => ExecMode::default(),
        }
    }
}

/// Maps `f` over `0..n`, in input order, on one thread or many.
pub fn map_indexed<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..n).map(f).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_preserve_order() {
        let seq = map_indexed(ExecMode::Sequential, 100, |i| i * i);
        let par = map_indexed(ExecMode::Parallel, 100, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[99], 9801);
    }
}
