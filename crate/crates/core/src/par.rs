//! Data-parallel map with a sequential fallback.
//!
//! All heavy loops (per-destination follower solves, sweep grid points,
//! robustness replicates) funnel through [`map_indexed`]. With the `parallel`
//! feature (default) the map runs on rayon; without it, a plain loop. Results
//! are written into a pre-sized vector by index and later reduced in canonical
//! order, so both paths produce bit-identical output regardless of scheduling.

#[cfg(feature = "parallel")]
pub fn map_indexed<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync,
{
    use rayon::prelude::*;
    items
        .par_iter()
        .enumerate()
        .map(|(i, item)| f(i, item))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(usize, &T) -> U,
{
    items
        .iter()
        .enumerate()
        .map(|(i, item)| f(i, item))
        .collect()
}

/// Sequential variant, always available; the benchmark compares the two.
pub fn map_indexed_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(usize, &T) -> U,
{
    items
        .iter()
        .enumerate()
        .map(|(i, item)| f(i, item))
        .collect()
}

/// Like [`map_indexed`] but with exclusive access to each item, for workers
/// that carry per-item scratch state (factorization patterns, warm starts).
#[cfg(feature = "parallel")]
pub fn map_mut_indexed<T, U, F>(items: &mut [T], f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(usize, &mut T) -> U + Sync,
{
    use rayon::prelude::*;
    items
        .par_iter_mut()
        .enumerate()
        .map(|(i, item)| f(i, item))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_mut_indexed<T, U, F>(items: &mut [T], f: F) -> Vec<U>
where
    F: Fn(usize, &mut T) -> U,
{
    items
        .iter_mut()
        .enumerate()
        .map(|(i, item)| f(i, item))
        .collect()
}

/// Sequential twin of [`map_mut_indexed`].
pub fn map_mut_indexed_seq<T, U, F>(items: &mut [T], f: F) -> Vec<U>
where
    F: Fn(usize, &mut T) -> U,
{
    items
        .iter_mut()
        .enumerate()
        .map(|(i, item)| f(i, item))
        .collect()
}

/// Installs a global rayon pool of the requested size. Call before any
/// parallel work; later calls are ignored (rayon pools are set once).
#[cfg(feature = "parallel")]
pub fn configure_threads(threads: usize) {
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_threads: usize) {}
