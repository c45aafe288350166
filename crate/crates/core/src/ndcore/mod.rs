//! Dense numeric core: tensors, norms and seeded counter-based random streams.

mod rng;
mod tensor;

pub use rng::{fill_gaussian, gaussian, Purpose, RngStream};
pub use tensor::{dot, l2_norm, sum_sq, Tensor};

/// Maps `f` over `0..n`, in parallel when the `parallel` feature is on.
/// Results are always returned in index order.
#[cfg(feature = "parallel")]
pub(crate) fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Applies `f` to every element of `items`, in parallel when the `parallel`
/// feature is on, and returns the first error in index order.
#[cfg(feature = "parallel")]
pub(crate) fn par_try_for_each_mut<T, E, F>(items: &mut [T], f: F) -> std::result::Result<(), E>
where
    T: Send,
    E: Send,
    F: Fn(&mut T) -> std::result::Result<(), E> + Sync + Send,
{
    use rayon::prelude::*;
    let results: Vec<_> = items.par_iter_mut().map(f).collect();
    results.into_iter().collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_try_for_each_mut<T, E, F>(items: &mut [T], f: F) -> std::result::Result<(), E>
where
    F: Fn(&mut T) -> std::result::Result<(), E>,
{
    items.iter_mut().try_for_each(f)
}
