//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it
//! they run in order on the calling thread. Results are returned in input
//! order either way, and every closure receives only its own item, so outputs
//! are identical across both builds.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving order.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Map `f` over consecutive chunks of `items` and concatenate the results.
pub fn map_chunks<T, U, F>(items: &[T], chunk: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&[T]) -> Vec<U> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_chunks(chunk.max(1)).flat_map_iter(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.chunks(chunk.max(1)).flat_map(f).collect()
    }
}

/// Sequential reference for [`map_chunks`], always available.
pub fn map_chunks_sequential<T, U, F>(items: &[T], chunk: usize, f: F) -> Vec<U>
where
    F: Fn(&[T]) -> Vec<U>,
{
    items.chunks(chunk.max(1)).flat_map(f).collect()
}
