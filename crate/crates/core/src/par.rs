//! Thin switch between rayon and sequential iteration.
//!
//! With the default `parallel` feature the mapping helpers fan out over
//! rayon's global pool; without it they run sequentially. Both paths preserve
//! input order, so callers observe identical results either way (the
//! acceptance suite asserts this equivalence property).

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving order.
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
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

/// Map `f` over index range `0..n`, preserving order.
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
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

/// Always-sequential twins used by the bench suite as the comparison baseline.
pub mod seq {
    pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
    where
        F: Fn(&T) -> U,
    {
        items.iter().map(f).collect()
    }

    pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
    where
        F: Fn(usize) -> U,
    {
        (0..n).map(f).collect()
    }
}
