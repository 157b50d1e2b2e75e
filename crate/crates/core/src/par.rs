//! Data-parallel map helpers.
//!
//! With the `parallel` feature (default) the crate-level functions fan out
//! over rayon's pool; without it they run sequentially. Both paths return
//! results in input order, so any reduction done afterwards in index order is
//! bit-identical regardless of thread count.

use crate::error::Result;

pub mod sequential {
    use crate::error::Result;

    pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
    where
        F: Fn(&T) -> U,
    {
        items.iter().map(f).collect()
    }

    pub fn try_map<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
    where
        F: Fn(&T) -> Result<U>,
    {
        items.iter().map(f).collect()
    }

    pub fn try_map_owned<T, U, F>(items: Vec<T>, f: F) -> Result<Vec<U>>
    where
        F: Fn(T) -> Result<U>,
    {
        items.into_iter().map(f).collect()
    }
}

#[cfg(feature = "parallel")]
pub mod parallel {
    use crate::error::Result;
    use rayon::prelude::*;

    pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        items.par_iter().map(f).collect()
    }

    pub fn try_map<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> Result<U> + Sync + Send,
    {
        items.par_iter().map(f).collect()
    }

    pub fn try_map_owned<T, U, F>(items: Vec<T>, f: F) -> Result<Vec<U>>
    where
        T: Send,
        U: Send,
        F: Fn(T) -> Result<U> + Sync + Send,
    {
        items.into_par_iter().map(f).collect()
    }
}

#[cfg(feature = "parallel")]
pub use parallel::{map, try_map, try_map_owned};

#[cfg(not(feature = "parallel"))]
pub fn try_map_owned<T, U, F>(items: Vec<T>, f: F) -> Result<Vec<U>>
where
    T: Send,
    U: Send,
    F: Fn(T) -> Result<U> + Sync + Send,
{
    sequential::try_map_owned(items, f)
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    sequential::map(items, f)
}

#[cfg(not(feature = "parallel"))]
pub fn try_map<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    sequential::try_map(items, f)
}

/// `map` over `0..n`.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    map(&idx, |&i| f(i))
}

pub fn try_map_range<U, F>(n: usize, f: F) -> Result<Vec<U>>
where
    U: Send,
    F: Fn(usize) -> Result<U> + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    try_map(&idx, |&i| f(i))
}

/// Number of worker threads the parallel path would use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let v: Vec<u64> = (0..1000).collect();
        let out = map(&v, |x| x * 3);
        assert_eq!(out, sequential::map(&v, |x| x * 3));
    }

    #[test]
    fn first_error_is_returned() {
        let r = try_map_range(10, |i| {
            if i == 7 {
                Err(crate::Error::Data("boom".into()))
            } else {
                Ok(i)
            }
        });
        assert!(r.is_err());
    }
}
