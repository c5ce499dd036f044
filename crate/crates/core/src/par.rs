//! Data-parallel map over independent evaluation points.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool;
//! without it the same closures run sequentially. Results keep input order
//! either way, so outputs are bit-identical between the two builds.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Whether this build evaluates grids in parallel.
pub const PARALLEL: bool = cfg!(feature = "parallel");

#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Sequential reference of [`map`], always available (benchmarks compare
/// the two).
pub fn map_seq<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Maximum of `f` over `items`, NaN-propagating.
pub fn max_of<T, F>(items: &[T], f: F) -> f64
where
    T: Sync,
    F: Fn(&T) -> f64 + Sync + Send,
{
    map(items, f).into_iter().fold(0.0, |m, v| if v.is_nan() || m.is_nan() { f64::NAN } else { m.max(v) })
}
