//! Ordered map over independent work items.
//!
//! With the `parallel` feature and more than one worker the items run on a
//! dedicated rayon pool; otherwise they run one after another on the calling
//! thread. Results come back in index order either way.

/// Number of workers to use. `0` means one per available core.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Workers(pub usize);

impl Workers {
    pub const SEQUENTIAL: Workers = Workers(1);

    pub fn resolved(self) -> usize {
        match self.0 {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }

    /// True when work actually fans out to several threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self.resolved() > 1
    }
}

/// `(0..n).map(f)`, possibly spread over `workers` threads.
pub fn map_indexed<T, F>(n: usize, workers: Workers, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if workers.is_parallel() && n > 1 {
        use rayon::prelude::*;
        match rayon::ThreadPoolBuilder::new()
            .num_threads(workers.resolved())
            .build()
        {
            Ok(pool) => return pool.install(|| (0..n).into_par_iter().map(&f).collect()),
            Err(e) => log::warn!("thread pool unavailable ({e}); running sequentially"),
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = workers;
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let seq = map_indexed(50, Workers::SEQUENTIAL, |i| i * i);
        let par = map_indexed(50, Workers(4), |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }

    #[test]
    fn zero_means_available_cores() {
        assert!(Workers(0).resolved() >= 1);
        assert!(!Workers(1).is_parallel());
    }
}
