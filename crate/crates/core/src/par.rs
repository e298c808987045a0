//! Data-parallel map with a sequential fallback.
//!
//! Results are always returned in input order, so both modes produce
//! identical outputs for pure closures.

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

/// `f(0), ..., f(n-1)` in order.
pub fn map_range<T, F>(n: usize, mode: ExecMode, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Like [`map_range`] but stops at the first error in index order.
pub fn try_map_range<T, E, F>(n: usize, mode: ExecMode, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_range(n, mode, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let a = map_range(100, ExecMode::Sequential, |i| i * i);
        let b = map_range(100, ExecMode::Parallel, |i| i * i);
        assert_eq!(a, b);
        let e: Result<Vec<usize>, usize> = try_map_range(10, ExecMode::Parallel, |i| if i >= 3 { Err(i) } else { Ok(i) });
        assert_eq!(e, Err(3));
    }
}
