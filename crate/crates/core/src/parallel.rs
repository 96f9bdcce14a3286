//! Order-preserving map over independent jobs.
//!
//! With the `parallel` feature the jobs run on a dedicated rayon pool;
//! without it every mode degrades to a plain loop. Results are always in
//! input order, so output does not depend on the thread count.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel { threads: usize },
}

impl ExecMode {
    /// `threads <= 1` is sequential.
    pub fn from_threads(threads: usize) -> Self {
        if threads <= 1 {
            ExecMode::Sequential
        } else {
            ExecMode::Parallel { threads }
        }
    }

    pub fn threads(self) -> usize {
        match self {
            ExecMode::Sequential => 1,
            ExecMode::Parallel { threads } => threads,
        }
    }
}

pub fn map_indexed<T, R, F>(items: &[T], mode: ExecMode, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    match mode {
        ExecMode::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        ExecMode::Parallel { threads } => parallel_map(items, threads, f),
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()),
        Err(_) => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, R, F>(items: &[T], _threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let xs: Vec<u64> = (0..100).collect();
        let f = |i: usize, x: &u64| x * x + i as u64;
        let seq = map_indexed(&xs, ExecMode::Sequential, f);
        let par = map_indexed(&xs, ExecMode::Parallel { threads: 4 }, f);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 56);
    }

    #[test]
    fn thread_count_mapping() {
        assert_eq!(ExecMode::from_threads(0), ExecMode::Sequential);
        assert_eq!(ExecMode::from_threads(1), ExecMode::Sequential);
        assert_eq!(ExecMode::from_threads(3).threads(), 3);
    }
}
