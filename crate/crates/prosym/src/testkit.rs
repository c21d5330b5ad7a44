//! Independent brute-force oracles used by tests and acceptance runs.
//!
//! Everything here is deliberately written against plain slices and loops,
//! sharing no numeric kernels with the main path, so agreement between the
//! two is evidence rather than tautology. Size caps keep every oracle call
//! under a second.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::groups::Graph;
use crate::tensor::Tensor;

/// Default enumeration cap for `exact_group_average` (n! evaluations).
pub const GROUP_AVERAGE_N_MAX: usize = 5;
/// Default cap for brute-force isomorphism and automorphism search.
pub const ISOMORPHISM_N_MAX: usize = 8;

/// All permutations of `{0..n-1}` via Heap's algorithm.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut a: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    out.push(a.clone());
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            out.push(a.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// Central finite differences of a scalar function, coordinate by coordinate.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// `max_i |a_i - b_i| / max(max_i |b_i|, floor)` with `b` as reference.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let num = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs()));
    let den = b.iter().fold(floor, |m, &y| m.max(y.abs()));
    num / den
}

/// How the group acts on the black-box function's output.
#[derive(Clone, Copy, Debug)]
pub enum OutputAction {
    /// Invariant task: the output is left untouched.
    Invariant,
    /// Node-equivariant task: output rows are permuted along with the nodes.
    PermuteRows,
}

fn permute_graph_plain(perm: &[usize], g: &Graph) -> Graph {
    // Own permutation kernel: out[t] = in[perm[t]] on rows, conjugation on
    // adjacency, written against raw buffers.
    let n = g.n;
    let c = g.node_features.cols();
    let mut adj = vec![0.0; n * n];
    let mut feat = vec![0.0; n * c];
    for t in 0..n {
        for u in 0..n {
            adj[t * n + u] = g.adjacency.data()[perm[t] * n + perm[u]];
        }
        for k in 0..c {
            feat[t * c + k] = g.node_features.data()[perm[t] * c + k];
        }
    }
    Graph {
        n,
        adjacency: Tensor::new([n, n], adj),
        node_features: Tensor::new([n, c], feat),
    }
}

fn invert_plain(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (t, &s) in perm.iter().enumerate() {
        inv[s] = t;
    }
    inv
}

/// Exact group averaging over the full symmetric group:
/// `(1/n!) Σ_g g·f(g⁻¹·x)`. Refuses graphs larger than `n_max`.
pub fn exact_group_average(
    f: &dyn Fn(&Graph) -> Tensor,
    x: &Graph,
    action: OutputAction,
    n_max: usize,
) -> Result<Tensor> {
    if x.n > n_max {
        return Err(Error::Refused(format!(
            "exact_group_average: n={} exceeds cap {n_max} (n! enumeration)",
            x.n
        )));
    }
    let perms = permutations(x.n);
    let count = perms.len() as f64;
    let mut acc: Option<Vec<f64>> = None;
    let mut shape: Vec<usize> = Vec::new();
    for perm in &perms {
        let inv = invert_plain(perm);
        let transformed = permute_graph_plain(&inv, x);
        let y = f(&transformed);
        let y = match action {
            OutputAction::Invariant => y,
            OutputAction::PermuteRows => {
                let c = y.cols();
                let mut out = vec![0.0; y.numel()];
                for t in 0..x.n {
                    for k in 0..c {
                        out[t * c + k] = y.data()[perm[t] * c + k];
                    }
                }
                Tensor::new(y.shape().to_vec(), out)
            }
        };
        match &mut acc {
            Some(a) => {
                for (av, &yv) in a.iter_mut().zip(y.data()) {
                    *av += yv;
                }
            }
            None => {
                shape = y.shape().to_vec();
                acc = Some(y.data().to_vec());
            }
        }
    }
    let mut a = acc.expect("at least the identity permutation");
    for v in &mut a {
        *v /= count;
    }
    Ok(Tensor::new(shape, a))
}

/// Stable coloring from iterated neighbor-multiset refinement.
#[derive(Clone, Debug)]
pub struct WlColoring {
    pub colors: Vec<usize>,
    pub rounds: usize,
}

impl WlColoring {
    /// Color class sizes, sorted; comparable across graphs refined jointly.
    pub fn histogram(&self) -> Vec<usize> {
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for &c in &self.colors {
            *counts.entry(c).or_insert(0) += 1;
        }
        let mut h: Vec<usize> = counts.into_values().collect();
        h.sort_unstable();
        h
    }
}

fn wl_refine(adjacency: &[Vec<usize>], init: &[usize]) -> (Vec<usize>, usize) {
    let n = adjacency.len();
    let mut colors = init.to_vec();
    let mut distinct = {
        let mut c = colors.clone();
        c.sort_unstable();
        c.dedup();
        c.len()
    };
    let mut rounds = 0;
    loop {
        let mut signatures: Vec<(usize, Vec<usize>)> = Vec::with_capacity(n);
        for i in 0..n {
            let mut neigh: Vec<usize> = adjacency[i].iter().map(|&j| colors[j]).collect();
            neigh.sort_unstable();
            signatures.push((colors[i], neigh));
        }
        let mut uniq: Vec<(usize, Vec<usize>)> = signatures.clone();
        uniq.sort();
        uniq.dedup();
        let index: HashMap<&(usize, Vec<usize>), usize> =
            uniq.iter().enumerate().map(|(k, s)| (s, k)).collect();
        let new_colors: Vec<usize> = signatures.iter().map(|s| index[s]).collect();
        let new_distinct = uniq.len();
        rounds += 1;
        colors = new_colors;
        if new_distinct == distinct {
            break;
        }
        distinct = new_distinct;
    }
    (colors, rounds)
}

fn adjacency_lists(g: &Graph) -> Vec<Vec<usize>> {
    (0..g.n)
        .map(|i| {
            (0..g.n)
                .filter(|&j| g.adjacency.at(i, j) != 0.0)
                .collect()
        })
        .collect()
}

/// 1-WL color refinement from a uniform initial coloring, run to
/// stabilization.
pub fn wl1_colors(g: &Graph) -> WlColoring {
    let adj = adjacency_lists(g);
    let (colors, rounds) = wl_refine(&adj, &vec![0; g.n]);
    WlColoring { colors, rounds }
}

/// 1-WL equivalence, decided by refining the disjoint union of both graphs
/// and comparing per-graph color histograms.
pub fn wl1_equivalent(g1: &Graph, g2: &Graph) -> bool {
    let (n1, n2) = (g1.n, g2.n);
    if n1 != n2 {
        return false;
    }
    let mut adj: Vec<Vec<usize>> = adjacency_lists(g1);
    for row in adjacency_lists(g2) {
        adj.push(row.iter().map(|&j| j + n1).collect());
    }
    let (colors, _) = wl_refine(&adj, &vec![0; n1 + n2]);
    let hist = |slice: &[usize]| {
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for &c in slice {
            *counts.entry(c).or_insert(0) += 1;
        }
        let mut pairs: Vec<(usize, usize)> = counts.into_iter().collect();
        pairs.sort_unstable();
        pairs
    };
    hist(&colors[..n1]) == hist(&colors[n1..])
}

fn degree_sequence(g: &Graph) -> Vec<usize> {
    let mut d: Vec<usize> = (0..g.n).map(|i| g.degree(i)).collect();
    d.sort_unstable();
    d
}

/// Backtracking isomorphism search over degree-compatible assignments.
/// If `collect_all` is set, every isomorphism found is pushed as a mapping
/// `node of g1 -> node of g2`.
fn isomorphism_search(
    g1: &Graph,
    g2: &Graph,
    collect_all: bool,
    found: &mut Vec<Vec<usize>>,
) -> bool {
    let n = g1.n;
    let mut mapping = vec![usize::MAX; n];
    let mut used = vec![false; n];
    fn backtrack(
        g1: &Graph,
        g2: &Graph,
        i: usize,
        mapping: &mut Vec<usize>,
        used: &mut Vec<bool>,
        collect_all: bool,
        found: &mut Vec<Vec<usize>>,
    ) -> bool {
        let n = g1.n;
        if i == n {
            found.push(mapping.clone());
            return !collect_all;
        }
        for cand in 0..n {
            if used[cand] || g1.degree(i) != g2.degree(cand) {
                continue;
            }
            let consistent = (0..i).all(|j| {
                (g1.adjacency.at(i, j) != 0.0) == (g2.adjacency.at(cand, mapping[j]) != 0.0)
            });
            if !consistent {
                continue;
            }
            mapping[i] = cand;
            used[cand] = true;
            if backtrack(g1, g2, i + 1, mapping, used, collect_all, found) {
                return true;
            }
            used[cand] = false;
            mapping[i] = usize::MAX;
        }
        false
    }
    backtrack(g1, g2, 0, &mut mapping, &mut used, collect_all, found);
    !found.is_empty()
}

/// Brute-force graph isomorphism; refuses inputs above `n_max` nodes.
pub fn isomorphic_bruteforce(g1: &Graph, g2: &Graph, n_max: usize) -> Result<bool> {
    if g1.n != g2.n {
        return Err(Error::contract(format!(
            "isomorphic_bruteforce: node counts differ ({} vs {})",
            g1.n, g2.n
        )));
    }
    if g1.n > n_max {
        return Err(Error::Refused(format!(
            "isomorphic_bruteforce: n={} exceeds cap {n_max}",
            g1.n
        )));
    }
    if degree_sequence(g1) != degree_sequence(g2) {
        return Ok(false);
    }
    let mut found = Vec::new();
    Ok(isomorphism_search(g1, g2, false, &mut found))
}

/// All automorphisms of `g` as permutations (node -> image); capped at
/// `n_max` nodes.
pub fn automorphisms(g: &Graph, n_max: usize) -> Result<Vec<Vec<usize>>> {
    if g.n > n_max {
        return Err(Error::Refused(format!(
            "automorphisms: n={} exceeds cap {n_max}",
            g.n
        )));
    }
    let mut found = Vec::new();
    isomorphism_search(g, g, true, &mut found);
    Ok(found)
}

/// Orbit partition of nodes under the automorphism group.
pub fn automorphism_orbits(g: &Graph, n_max: usize) -> Result<Vec<Vec<usize>>> {
    let autos = automorphisms(g, n_max)?;
    let n = g.n;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        if parent[x] != x {
            let r = find(parent, parent[x]);
            parent[x] = r;
        }
        parent[x]
    }
    for a in &autos {
        for (i, &img) in a.iter().enumerate() {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, img));
            if ri != rj {
                parent[ri] = rj;
            }
        }
    }
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut orbits: Vec<Vec<usize>> = groups.into_values().collect();
    orbits.sort();
    Ok(orbits)
}

/// Worst absolute gap between per-node outputs of automorphic node pairs.
///
/// `node_embed` is the (already sample-averaged) model under test, returning
/// one output row per node. Returns `None` when the automorphism group is
/// trivial (no applicable pairs).
pub fn automorphism_consistency(
    node_embed: &dyn Fn(&Graph) -> Tensor,
    g: &Graph,
) -> Result<Option<f64>> {
    let orbits = automorphism_orbits(g, ISOMORPHISM_N_MAX)?;
    if orbits.iter().all(|o| o.len() == 1) {
        return Ok(None);
    }
    let out = node_embed(g);
    assert_eq!(out.rows(), g.n, "node_embed must return one row per node");
    let mut worst = 0.0f64;
    for orbit in &orbits {
        for (ai, &i) in orbit.iter().enumerate() {
            for &j in &orbit[ai + 1..] {
                let gap = out
                    .row(i)
                    .iter()
                    .zip(out.row(j))
                    .fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs()));
                worst = worst.max(gap);
            }
        }
    }
    Ok(Some(worst))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_count() {
        assert_eq!(permutations(1).len(), 1);
        assert_eq!(permutations(4).len(), 24);
        let mut p5 = permutations(5);
        p5.sort();
        p5.dedup();
        assert_eq!(p5.len(), 120);
    }

    #[test]
    fn finite_diff_on_sum_of_squares() {
        let mut f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let g = finite_diff_grad(&mut f, &[1.0, 2.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-6);
        assert!((g[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_on_linear_is_exact() {
        let w = [3.0, -1.5, 0.25];
        let mut f = |x: &[f64]| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let g = finite_diff_grad(&mut f, &[0.3, 0.7, -0.2], 1e-5);
        for (gi, wi) in g.iter().zip(&w) {
            assert!((gi - wi).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_average_of_constant_is_constant() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let f = |_: &Graph| Tensor::from_vec(vec![7.0, 8.0]);
        let avg = exact_group_average(&f, &g, OutputAction::Invariant, 5).unwrap();
        assert_eq!(avg.data(), &[7.0, 8.0]);
    }

    #[test]
    fn exact_average_is_invariant() {
        // A deliberately non-symmetric readout of the adjacency.
        let f = |g: &Graph| {
            let mut acc = 0.0;
            for (k, v) in g.adjacency.data().iter().enumerate() {
                acc += v * (k as f64 + 1.0).ln();
            }
            Tensor::from_vec(vec![acc])
        };
        let g = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 0), (2, 3)]).unwrap();
        let base = exact_group_average(&f, &g, OutputAction::Invariant, 5).unwrap();
        for perm in permutations(4) {
            let pg = permute_graph_plain(&perm, &g);
            let avg = exact_group_average(&f, &pg, OutputAction::Invariant, 5).unwrap();
            assert!((avg.item() - base.item()).abs() < 1e-10);
        }
    }

    #[test]
    fn exact_average_refuses_large_graphs() {
        let g = Graph::from_edges(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]).unwrap();
        assert!(matches!(
            exact_group_average(&|_| Tensor::scalar(0.0), &g, OutputAction::Invariant, 5),
            Err(Error::Refused(_))
        ));
    }

    #[test]
    fn wl_complete_graph_is_monochrome() {
        let g = Graph::from_edges(4, &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]).unwrap();
        let w = wl1_colors(&g);
        assert!(w.colors.iter().all(|&c| c == w.colors[0]));
    }

    #[test]
    fn wl_path_separates_ends_from_middle() {
        let g = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let w = wl1_colors(&g);
        assert_eq!(w.colors[0], w.colors[3]);
        assert_eq!(w.colors[1], w.colors[2]);
        assert_ne!(w.colors[0], w.colors[1]);
    }

    #[test]
    fn wl_colors_are_permutation_equivariant() {
        let g = Graph::from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2)]).unwrap();
        let base = wl1_colors(&g);
        for perm in permutations(5) {
            let pg = permute_graph_plain(&perm, &g);
            let w = wl1_colors(&pg);
            for t in 0..5 {
                // Colors are canonical ids, so they transport exactly.
                assert_eq!(w.colors[t], base.colors[perm[t]]);
            }
        }
    }

    #[test]
    fn isomorphic_relabeling_detected() {
        let g1 = Graph::from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (2, 0)]).unwrap();
        let perm = vec![3, 1, 4, 0, 2];
        let g2 = permute_graph_plain(&perm, &g1);
        assert!(isomorphic_bruteforce(&g1, &g2, 8).unwrap());
    }

    #[test]
    fn triangle_vs_path_not_isomorphic() {
        let tri = Graph::from_edges(3, &[(0, 1), (1, 2), (2, 0)]).unwrap();
        let path = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        assert!(!isomorphic_bruteforce(&tri, &path, 8).unwrap());
    }

    #[test]
    fn isomorphism_cap_refuses() {
        let g = Graph::from_edges(9, &[(0, 1)]).unwrap();
        assert!(matches!(
            isomorphic_bruteforce(&g, &g, 8),
            Err(Error::Refused(_))
        ));
    }

    #[test]
    fn star_graph_orbits() {
        // Star on 5 nodes: center is its own orbit, leaves form one orbit.
        let g = Graph::from_edges(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]).unwrap();
        let orbits = automorphism_orbits(&g, 8).unwrap();
        assert_eq!(orbits.len(), 2);
        assert!(orbits.iter().any(|o| o == &vec![0]));
        assert!(orbits.iter().any(|o| o.len() == 4));
    }

    #[test]
    fn automorphism_consistency_trivial_group_not_applicable() {
        // Smallest asymmetric graphs have 6 nodes; this is one of them.
        let g = Graph::from_edges(6, &[(0, 2), (1, 2), (1, 3), (1, 4), (2, 4), (3, 5)]).unwrap();
        let orbits = automorphism_orbits(&g, 8).unwrap();
        assert!(
            orbits.iter().all(|o| o.len() == 1),
            "fixture graph unexpectedly has symmetries: {orbits:?}"
        );
        let res = automorphism_consistency(&|g| Tensor::zeros([g.n, 2]), &g).unwrap();
        assert!(res.is_none());
    }

    #[test]
    fn automorphism_consistency_flags_asymmetric_embeddings() {
        let star = Graph::from_edges(4, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        // An embedding that ignores symmetry entirely: identity by node index.
        let f = |g: &Graph| {
            Tensor::new([g.n, 1], (0..g.n).map(|i| i as f64).collect())
        };
        let gap = automorphism_consistency(&f, &star).unwrap().unwrap();
        assert!(gap >= 2.0 - 1e-12);
    }
}
