//! Deterministic-order data parallelism.
//!
//! `map_indexed` is the single seam through which the crate parallelizes:
//! independent work items (Monte-Carlo samples, batch elements, graph
//! embeddings) are mapped by index and collected in index order, so any
//! reduction over the result is bit-identical with and without the
//! `parallel` feature.

#[cfg(feature = "parallel")]
pub fn map_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Always-sequential variant, kept callable so benchmarks can compare the
/// two paths within one build.
pub fn map_indexed_seq<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).map(f).collect()
}
