//! Data-parallel dispatch.
//!
//! Hot loops (convolution bands, batch items, loss rows, pyramid rows) go
//! through the helpers here. With the `parallel` feature they fan out over
//! the rayon pool; without it, or after [`set_mode`] selects
//! [`Mode::Sequential`], they run as plain iterators. Both paths visit items
//! in the same logical order and every reduction is performed sequentially
//! over per-item partials, so results are bitwise identical across modes.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

const SEQ: u8 = 0;
const PAR: u8 = 1;

static MODE: AtomicU8 = AtomicU8::new(if cfg!(feature = "parallel") { PAR } else { SEQ });

/// Whether this build can run data-parallel at all.
pub const fn available() -> bool {
    cfg!(feature = "parallel")
}

pub fn mode() -> Mode {
    match MODE.load(Ordering::Relaxed) {
        PAR => Mode::Parallel,
        _ => Mode::Sequential,
    }
}

/// Select the process-wide execution mode. Requesting [`Mode::Parallel`] in a
/// build without the `parallel` feature leaves the mode sequential. Returns
/// the mode actually in effect.
pub fn set_mode(mode: Mode) -> Mode {
    let v = match mode {
        Mode::Parallel if available() => PAR,
        _ => SEQ,
    };
    MODE.store(v, Ordering::Relaxed);
    self::mode()
}

/// Number of worker threads the parallel path would use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        if mode() == Mode::Parallel {
            return rayon::current_num_threads();
        }
    }
    1
}

/// `(0..n).map(f).collect()`, possibly in parallel. Output order is index order.
pub fn map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if mode() == Mode::Parallel && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Calls `f(chunk_index, chunk)` for each `chunk_len`-sized chunk of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0, "chunk length must be positive");
    #[cfg(feature = "parallel")]
    {
        if mode() == Mode::Parallel && data.len() > chunk_len {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map(100, |i| i * i);
        assert_eq!(v[7], 49);
        assert_eq!(v.len(), 100);
    }

    #[test]
    fn chunks_cover_everything() {
        let mut v = vec![0usize; 103];
        for_each_chunk_mut(&mut v, 10, |ci, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = ci * 10 + j;
            }
        });
        assert!(v.iter().enumerate().all(|(i, &x)| i == x));
    }
}
