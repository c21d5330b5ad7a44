//! Group element representations, their actions on data, and the
//! postprocessors that turn network features into valid representations.
//!
//! Permutations act on row-indexed data (`P·X` permutes rows, adjacency is
//! conjugated `P·A·Pᵀ`), orthogonal matrices act on coordinate columns of
//! point clouds stored points-by-coordinates (`X·Qᵀ`), and the product group
//! acts jointly (`P·X·Qᵀ`). The differentiable postprocessors (Sinkhorn,
//! relaxed argsort, Gram-Schmidt, determinant scaling) are built from tape
//! ops so gradients flow through them; value-level wrappers run them on a
//! scratch tape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{ParamSet, Tape, Var};
use crate::tensor::{normal_sample, Tensor};

/// Default Sinkhorn iteration count; robust across every use in this crate.
pub const SINKHORN_ITERS: usize = 20;

// ── Representations ─────────────────────────────────────────────────────

/// A permutation of `{0..n-1}`, stored as target position → source index:
/// applying it to rows gives `out[t] = in[perm[t]]`, i.e. the matrix with
/// `P[t][perm[t]] = 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationRep {
    perm: Vec<usize>,
}

impl PermutationRep {
    /// Panics unless `perm` is a bijection on `{0..n-1}`.
    pub fn new(perm: Vec<usize>) -> Self {
        let n = perm.len();
        let mut seen = vec![false; n];
        for &p in &perm {
            assert!(p < n && !seen[p], "not a bijection: {perm:?}");
            seen[p] = true;
        }
        PermutationRep { perm }
    }

    pub fn identity(n: usize) -> Self {
        PermutationRep { perm: (0..n).collect() }
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.perm.len()];
        for (t, &s) in self.perm.iter().enumerate() {
            inv[s] = t;
        }
        PermutationRep { perm: inv }
    }

    /// Matrix product `self · other` as permutations.
    pub fn compose(&self, other: &Self) -> Self {
        assert_eq!(self.n(), other.n());
        PermutationRep {
            perm: self.perm.iter().map(|&k| other.perm[k]).collect(),
        }
    }

    /// Dense 0/1 matrix `P`.
    pub fn matrix(&self) -> Tensor {
        let n = self.n();
        let mut m = Tensor::zeros([n, n]);
        for (t, &s) in self.perm.iter().enumerate() {
            m.data_mut()[t * n + s] = 1.0;
        }
        m
    }

    /// `P·X`: permute rows of a matrix.
    pub fn apply_rows(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.rows(), self.n(), "apply_rows: row count mismatch");
        let c = x.cols();
        let mut out = Tensor::zeros([self.n(), c]);
        for (t, &s) in self.perm.iter().enumerate() {
            out.data_mut()[t * c..(t + 1) * c].copy_from_slice(x.row(s));
        }
        out
    }

    /// `P·v` for a flat vector.
    pub fn apply_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n());
        self.perm.iter().map(|&s| v[s]).collect()
    }

    /// `P·A·Pᵀ`: conjugate a square matrix.
    pub fn conjugate(&self, a: &Tensor) -> Tensor {
        let n = self.n();
        assert!(a.rows() == n && a.cols() == n, "conjugate: need {n}x{n}");
        let mut out = Tensor::zeros([n, n]);
        for i in 0..n {
            for j in 0..n {
                out.data_mut()[i * n + j] = a.at(self.perm[i], self.perm[j]);
            }
        }
        out
    }
}

/// Doubly-stochastic relaxation of a permutation matrix.
#[derive(Clone, Debug)]
pub struct RelaxedPermutation {
    pub matrix: Tensor,
}

impl RelaxedPermutation {
    /// Row/column sums within `tol` of 1 and entries in `[0, 1]`.
    pub fn is_doubly_stochastic(&self, tol: f64) -> bool {
        let n = self.matrix.rows();
        if self.matrix.cols() != n {
            return false;
        }
        if self.matrix.data().iter().any(|&v| !(0.0..=1.0 + tol).contains(&v)) {
            return false;
        }
        for i in 0..n {
            let rs: f64 = self.matrix.row(i).iter().sum();
            let cs: f64 = (0..n).map(|k| self.matrix.at(k, i)).sum();
            if (rs - 1.0).abs() > tol || (cs - 1.0).abs() > tol {
                return false;
            }
        }
        true
    }
}

/// A (special) orthogonal matrix.
#[derive(Clone, Debug)]
pub struct OrthogonalRep {
    pub matrix: Tensor,
    pub special: bool,
}

impl OrthogonalRep {
    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// ‖QᵀQ − I‖∞ plus the determinant constraint, both within `tol`.
    pub fn orthogonality_residual(&self) -> f64 {
        let qt = self.matrix.transposed();
        let prod = Tensor::new(
            [self.dim(), self.dim()],
            crate::tensor::matmul_raw(qt.data(), self.matrix.data(), self.dim(), self.dim(), self.dim()),
        );
        prod.linf_distance(&Tensor::eye(self.dim()))
    }

    pub fn satisfies_invariants(&self, tol: f64) -> bool {
        if self.orthogonality_residual() > tol {
            return false;
        }
        let d = determinant(&self.matrix);
        if self.special {
            (d - 1.0).abs() <= tol
        } else {
            (d.abs() - 1.0).abs() <= tol
        }
    }
}

/// Rotation plus translation; translation handled outside sampling.
#[derive(Clone, Debug)]
pub struct EuclideanRep {
    pub rotation: OrthogonalRep,
    pub translation: Vec<f64>,
}

/// Joint permutation and rotation, acting by `X ↦ P·X·Qᵀ`.
#[derive(Clone, Debug)]
pub struct ProductRep {
    pub perm: PermutationRep,
    pub rot: OrthogonalRep,
}

// ── Data types the groups act on ────────────────────────────────────────

/// Undirected graph with dense adjacency and node features.
#[derive(Clone, Debug)]
pub struct Graph {
    pub n: usize,
    pub adjacency: Tensor,
    pub node_features: Tensor,
}

impl Graph {
    pub fn new(adjacency: Tensor, node_features: Tensor) -> Result<Self> {
        let n = adjacency.rows();
        if adjacency.cols() != n || n == 0 {
            return Err(Error::contract(format!(
                "adjacency must be square and nonempty, got {:?}",
                adjacency.shape()
            )));
        }
        if node_features.rows() != n {
            return Err(Error::contract(format!(
                "features have {} rows for {n} nodes",
                node_features.rows()
            )));
        }
        for i in 0..n {
            if adjacency.at(i, i) != 0.0 {
                return Err(Error::contract("adjacency has nonzero diagonal"));
            }
            for j in 0..n {
                if adjacency.at(i, j) != adjacency.at(j, i) {
                    return Err(Error::contract("adjacency not symmetric"));
                }
            }
        }
        Ok(Graph { n, adjacency, node_features })
    }

    /// Graph from an undirected edge list with constant unit features.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = Tensor::zeros([n, n]);
        for &(a, b) in edges {
            if a >= n || b >= n || a == b {
                return Err(Error::contract(format!("bad edge ({a},{b}) for n={n}")));
            }
            adj.data_mut()[a * n + b] = 1.0;
            adj.data_mut()[b * n + a] = 1.0;
        }
        Graph::new(adj, Tensor::ones([n, 1]))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency.row(i).iter().filter(|&&v| v != 0.0).count()
    }

    pub fn edge_count(&self) -> usize {
        (0..self.n).map(|i| self.degree(i)).sum::<usize>() / 2
    }
}

/// Positions, velocities and charges of a particle system (rows = points).
#[derive(Clone, Debug)]
pub struct PointCloudState {
    pub positions: Tensor,
    pub velocities: Tensor,
    pub charges: Tensor,
}

impl PointCloudState {
    pub fn n_points(&self) -> usize {
        self.positions.rows()
    }

    pub fn dim(&self) -> usize {
        self.positions.cols()
    }
}

// ── Actions ─────────────────────────────────────────────────────────────

/// Permute a graph: features `P·X`, adjacency `P·A·Pᵀ`.
pub fn act_graph(p: &PermutationRep, g: &Graph) -> Result<Graph> {
    if p.n() != g.n {
        return Err(Error::contract(format!(
            "permutation size {} vs graph size {}",
            p.n(),
            g.n
        )));
    }
    Ok(Graph {
        n: g.n,
        adjacency: p.conjugate(&g.adjacency),
        node_features: p.apply_rows(&g.node_features),
    })
}

/// Joint action on a particle state: `P·X·Qᵀ` on positions and velocities,
/// `P` on charges.
pub fn product_act(r: &ProductRep, s: &PointCloudState) -> Result<PointCloudState> {
    if r.perm.n() != s.n_points() || r.rot.dim() != s.dim() {
        return Err(Error::contract(format!(
            "product rep sizes ({}, {}) vs state ({}, {})",
            r.perm.n(),
            r.rot.dim(),
            s.n_points(),
            s.dim()
        )));
    }
    let qt = r.rot.matrix.transposed();
    let rot_rows = |x: &Tensor| {
        let px = r.perm.apply_rows(x);
        Tensor::new(
            [s.n_points(), s.dim()],
            crate::tensor::matmul_raw(px.data(), qt.data(), s.n_points(), s.dim(), s.dim()),
        )
    };
    Ok(PointCloudState {
        positions: rot_rows(&s.positions),
        velocities: rot_rows(&s.velocities),
        charges: Tensor::from_vec(r.perm.apply_vec(s.charges.data())),
    })
}

/// Subtract the centroid (mean over rows); returns the centered matrix and
/// the centroid.
pub fn center(x: &Tensor) -> (Tensor, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    assert!(n >= 1, "center: empty input");
    let mut centroid = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            centroid[j] += x.at(i, j);
        }
    }
    for c in &mut centroid {
        *c /= n as f64;
    }
    let mut out = x.clone();
    for i in 0..n {
        for j in 0..d {
            out.data_mut()[i * d + j] -= centroid[j];
        }
    }
    (out, centroid)
}

// ── Hard argsort ────────────────────────────────────────────────────────

/// The permutation placing entries of `z` in ascending order: the returned
/// `P` satisfies `Pᵀ·z = sort(z)`, equivalently `P[i][rank(z_i)] = 1`.
///
/// Exact ties are broken by stable source index and counted in the second
/// return value.
pub fn hard_argsort(z: &[f64]) -> (PermutationRep, usize) {
    let n = z.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| z[a].partial_cmp(&z[b]).expect("non-finite sort key"));
    let ties = order.windows(2).filter(|w| z[w[0]] == z[w[1]]).count();
    // order[j] = source index of j-th smallest; perm is its inverse.
    let mut perm = vec![0; n];
    for (j, &s) in order.iter().enumerate() {
        perm[s] = j;
    }
    (PermutationRep::new(perm), ties)
}

// ── Differentiable postprocessors ───────────────────────────────────────

/// Sinkhorn operator: elementwise exponential followed by `iters` alternating
/// row and column normalizations. Rows are max-shifted before the exponential
/// (a mathematical no-op after normalization) to prevent overflow at low
/// temperature.
pub fn sinkhorn(tape: &mut Tape, m: Var, iters: usize) -> Var {
    assert!(iters >= 1, "sinkhorn: iters must be >= 1");
    let t = tape.value(m);
    assert!(t.rank() == 2, "sinkhorn: input must be a matrix");
    assert!(t.all_finite(), "sinkhorn: non-finite input");
    let (r, c) = (t.rows(), t.cols());
    let row_max = Tensor::new(
        [r, 1],
        (0..r)
            .map(|i| t.row(i).iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
            .collect(),
    );
    let shift = tape.input(row_max);
    let shifted = tape.sub(m, shift);
    let mut x = tape.exp(shifted);
    let ones_col = tape.input(Tensor::ones([c, 1]));
    let ones_row = tape.input(Tensor::ones([1, r]));
    for _ in 0..iters {
        let rs = tape.matmul(x, ones_col);
        let rs = tape.clamp_min(rs, 1e-300);
        x = tape.div(x, rs);
        let cs = tape.matmul(ones_row, x);
        let cs = tape.clamp_min(cs, 1e-300);
        x = tape.div(x, cs);
    }
    x
}

/// Value-level Sinkhorn on a scratch tape.
pub fn sinkhorn_tensor(m: &Tensor, iters: usize) -> Tensor {
    let params = ParamSet::new();
    let mut tape = Tape::no_grad(&params);
    let v = tape.input(m.clone());
    let out = sinkhorn(&mut tape, v, iters);
    tape.value(out).clone()
}

/// Differentiable relaxation of argsort: L2-normalize `z`, build the negative
/// absolute-difference cost against its sorted values, divide by `tau`, and
/// apply the Sinkhorn operator. Returns the relaxed doubly-stochastic matrix.
///
/// The matching hard permutation is `hard_argsort` of the same `z` (the L2
/// normalization preserves order).
pub fn relaxed_argsort(tape: &mut Tape, z: Var, tau: f64, iters: usize) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::contract(format!("relaxed_argsort: tau must be > 0, got {tau}")));
    }
    let zt = tape.value(z);
    assert!(zt.rank() == 1 || zt.cols() == 1, "relaxed_argsort: z must be a vector");
    let n = zt.numel();
    let z_col = tape.reshape(z, [n, 1]);
    let z_norm = tape.l2_normalize(z_col);
    // sort(z̄) built on-tape through the (piecewise-constant) hard permutation,
    // so the a.e. derivative of sort is the permutation scatter.
    let (hard, _ties) = hard_argsort(tape.value(z_norm).data());
    let pt = tape.input(hard.inverse().matrix());
    let sorted = tape.matmul(pt, z_norm);
    let sorted_row = tape.transpose(sorted);
    let diff = tape.sub(z_norm, sorted_row); // [n,1] - [1,n] -> [n,n]
    let absdiff = tape.abs(diff);
    let cost = tape.scale(absdiff, -1.0 / tau);
    Ok(sinkhorn(tape, cost, iters))
}

/// Couple a hard permutation with its relaxed matrix: the forward value is
/// exactly `hard.matrix()`, the backward gradient flows through `relaxed`.
pub fn straight_through_perm(tape: &mut Tape, relaxed: Var, hard: &PermutationRep) -> Var {
    tape.straight_through(relaxed, hard.matrix())
}

/// Column-wise Gram-Schmidt orthogonalization of a square matrix.
///
/// Errors with a degenerate-input report when a pivot norm falls below 1e-10.
pub fn gram_schmidt(tape: &mut Tape, z: Var) -> Result<Var> {
    let t = tape.value(z);
    assert!(t.rank() == 2 && t.rows() == t.cols(), "gram_schmidt: need square matrix");
    let d = t.rows();
    let zt = tape.transpose(z);
    let mut qs: Vec<Var> = Vec::with_capacity(d);
    for j in 0..d {
        let row = tape.gather_rows(zt, &[j]);
        let mut u = tape.transpose(row); // [d,1]
        for &q in &qs {
            let qt = tape.transpose(q);
            let proj = tape.matmul(qt, u); // [1,1]
            let scaled = tape.mul(q, proj);
            u = tape.sub(u, scaled);
        }
        let ut = tape.transpose(u);
        let sq = tape.matmul(ut, u); // [1,1]
        let pivot = tape.value(sq).item().sqrt();
        if pivot < 1e-10 {
            return Err(Error::Degenerate(format!(
                "gram_schmidt: pivot norm {pivot:.3e} below 1e-10 at column {j}"
            )));
        }
        let norm = tape.sqrt(sq);
        let q = tape.div(u, norm);
        qs.push(q);
    }
    Ok(tape.concat(1, &qs))
}

/// Value-level Gram-Schmidt on a scratch tape.
pub fn gram_schmidt_tensor(z: &Tensor) -> Result<Tensor> {
    let params = ParamSet::new();
    let mut tape = Tape::no_grad(&params);
    let v = tape.input(z.clone());
    let q = gram_schmidt(&mut tape, v)?;
    Ok(tape.value(q).clone())
}

/// Scale the first column by `det(Q)`, forcing determinant +1. For orthogonal
/// input the determinant is ±1 and locally constant, so it is applied as a
/// detached factor.
pub fn scale_det(tape: &mut Tape, q: Var) -> Var {
    let t = tape.value(q);
    let d = t.rows();
    let det = determinant(t);
    let mut diag = Tensor::eye(d);
    diag.data_mut()[0] = det;
    let s = tape.input(diag);
    tape.matmul(q, s)
}

/// Value-level determinant scaling.
pub fn scale_det_rep(q: &OrthogonalRep) -> OrthogonalRep {
    let params = ParamSet::new();
    let mut tape = Tape::no_grad(&params);
    let v = tape.input(q.matrix.clone());
    let out = scale_det(&mut tape, v);
    OrthogonalRep { matrix: tape.value(out).clone(), special: true }
}

/// Determinant by LU with partial pivoting.
pub fn determinant(t: &Tensor) -> f64 {
    assert!(t.rank() == 2 && t.rows() == t.cols(), "determinant: need square matrix");
    let n = t.rows();
    let mut a = t.data().to_vec();
    let mut det = 1.0;
    for k in 0..n {
        let mut piv = k;
        for i in k + 1..n {
            if a[i * n + k].abs() > a[piv * n + k].abs() {
                piv = i;
            }
        }
        if a[piv * n + k] == 0.0 {
            return 0.0;
        }
        if piv != k {
            for j in 0..n {
                a.swap(k * n + j, piv * n + j);
            }
            det = -det;
        }
        det *= a[k * n + k];
        for i in k + 1..n {
            let f = a[i * n + k] / a[k * n + k];
            for j in k..n {
                a[i * n + j] -= f * a[k * n + j];
            }
        }
    }
    det
}

// ── Uniform sampling ────────────────────────────────────────────────────

/// Haar-uniform (special) orthogonal matrix: orthonormalize a Gaussian
/// matrix and fix column signs by the sign of the corresponding R diagonal.
pub fn haar_orthogonal(d: usize, rng: &mut impl Rng, special: bool) -> OrthogonalRep {
    assert!(d >= 1, "haar_orthogonal: d must be >= 1");
    loop {
        let g = Tensor::randn([d, d], 1.0, rng);
        let Ok(mut q) = gram_schmidt_tensor(&g) else {
            continue; // measure-zero rank deficiency; redraw
        };
        for j in 0..d {
            let r_jj: f64 = (0..d).map(|i| q.at(i, j) * g.at(i, j)).sum();
            if r_jj < 0.0 {
                for i in 0..d {
                    q.data_mut()[i * d + j] = -q.at(i, j);
                }
            }
        }
        let rep = OrthogonalRep { matrix: q, special: false };
        return if special { scale_det_rep(&rep) } else { rep };
    }
}

/// All permutations of `{0..n-1}` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<PermutationRep> {
    let mut out = Vec::new();
    let mut a: Vec<usize> = (0..n).collect();
    loop {
        out.push(PermutationRep::new(a.clone()));
        // Next lexicographic permutation.
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| a[i] < a[i + 1]) else {
            break;
        };
        let j = (i + 1..n).rev().find(|&j| a[j] > a[i]).expect("successor exists");
        a.swap(i, j);
        a[i + 1..].reverse();
    }
    out
}

/// Fisher-Yates uniform permutation.
pub fn uniform_permutation(n: usize, rng: &mut impl Rng) -> PermutationRep {
    assert!(n >= 1, "uniform_permutation: n must be >= 1");
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    PermutationRep::new(perm)
}

/// Gaussian matrix, used for noise and Gram-Schmidt jitter.
pub fn gaussian_matrix(shape: [usize; 2], std: f64, rng: &mut impl Rng) -> Tensor {
    let numel = shape[0] * shape[1];
    Tensor::new(
        shape.to_vec(),
        (0..numel).map(|_| std * normal_sample(rng)).collect(),
    )
}
