//! Data-parallel map over independent replications, with a sequential path
//! that is always available and is the only path when the `parallel`
//! feature is off.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

macro_rules! if_rayon {
    ($rayon_value: expr, $else_value: expr) => {{
        #[cfg(feature = "parallel")]
        {
            ($rayon_value)
        }
        #[cfg(not(feature = "parallel"))]
        {
            ($else_value)
        }
    }};
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Uses the rayon pool when compiled with `parallel`, otherwise sequential.
    #[default]
    Parallel,
}

/// `(0..n).map(f)` with results in index order regardless of scheduling.
pub fn map_indexed<T, F>(n: usize, exec: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Execution::Sequential => (0..n).map(f).collect(),
        Execution::Parallel => if_rayon!((0..n).into_par_iter().map(f).collect(), (0..n).map(f).collect()),
    }
}

/// Configure the global worker count; 0 means one per core. Returns false when
/// the pool was already initialised or the crate was built without `parallel`.
pub fn set_threads(threads: usize) -> bool {
    if_rayon!(
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_ok(),
        {
            let _ = threads;
            false
        }
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let seq = map_indexed(100, Execution::Sequential, |i| i * i);
        let par = map_indexed(100, Execution::Parallel, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }
}
