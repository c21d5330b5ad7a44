//! Small equivariant networks producing the features consumed by the
//! postprocessors: a GIN with virtual node for permutation tasks, and a
//! vector-channel network for rotation and product-group tasks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::groups::{Graph, PointCloudState};
use crate::tape::{ParamId, ParamSet, Tape, Var};
use crate::tensor::Tensor;

// ── GIN ─────────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct GinConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for GinConfig {
    fn default() -> Self {
        GinConfig { in_dim: 1, hidden: 64, layers: 3 }
    }
}

struct GinConv {
    w1: ParamId,
    b1: ParamId,
    gamma: ParamId,
    beta: ParamId,
    w2: ParamId,
    b2: ParamId,
    eps: ParamId,
}

/// Message-passing network computing `MLP((A + (1+e)I)·H)` per layer, with a
/// per-feature affine normalization over the node axis inside each MLP. The
/// node-axis statistics keep every layer exactly permutation-equivariant.
pub struct Gin {
    pub cfg: GinConfig,
    convs: Vec<GinConv>,
    out_dim: usize,
}

impl Gin {
    /// Allocate parameters under `prefix` in `store`. The final layer maps to
    /// `out_dim` features per node.
    pub fn init(
        cfg: GinConfig,
        out_dim: usize,
        prefix: &str,
        store: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(cfg.layers >= 1 && cfg.hidden >= 1);
        let mut convs = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let d_in = if l == 0 { cfg.in_dim } else { cfg.hidden };
            let d_out = if l + 1 == cfg.layers { out_dim } else { cfg.hidden };
            let p = |s: &str| format!("{prefix}.conv{l}.{s}");
            convs.push(GinConv {
                w1: store.add(p("w1"), he_init([d_in, cfg.hidden], rng)),
                b1: store.add(p("b1"), Tensor::zeros([cfg.hidden])),
                gamma: store.add(p("gamma"), Tensor::ones([cfg.hidden])),
                beta: store.add(p("beta"), Tensor::zeros([cfg.hidden])),
                w2: store.add(p("w2"), he_init([cfg.hidden, d_out], rng)),
                b2: store.add(p("b2"), Tensor::zeros([d_out])),
                // e starts off zero: (A + (1+e)I) with non-integer 1+e is
                // nonsingular for every 0/1 adjacency (rational eigenvalues
                // of integer matrices are integers), so node-distinguishing
                // noise survives the first aggregation.
                eps: store.add(p("eps"), Tensor::scalar(0.1)),
            });
        }
        Gin { cfg, convs, out_dim }
    }

    /// Forward over a constant adjacency and node features on the tape;
    /// returns per-node features of the final layer.
    pub fn forward(&self, _store: &ParamSet, tape: &mut Tape, adjacency: &Tensor, h: Var) -> Var {
        assert_eq!(
            tape.value(h).rows(),
            adjacency.rows(),
            "gin: feature rows {} vs adjacency {}",
            tape.value(h).rows(),
            adjacency.rows()
        );
        let adj = tape.input(adjacency.clone());
        let one = tape.input(Tensor::scalar(1.0));
        let mut h = h;
        for conv in &self.convs {
            let eps = tape.param(conv.eps);
            let one_plus_e = tape.add(one, eps);
            let neighbor = tape.matmul(adj, h);
            let self_term = tape.mul(h, one_plus_e);
            let agg = tape.add(neighbor, self_term);
            let w1 = tape.param(conv.w1);
            let b1 = tape.param(conv.b1);
            let lin1 = tape.matmul(agg, w1);
            let lin1 = tape.add(lin1, b1);
            let norm = tape.normalize_axis(lin1, 0, 1e-5);
            let gamma = tape.param(conv.gamma);
            let beta = tape.param(conv.beta);
            let scaled = tape.mul(norm, gamma);
            let affine = tape.add(scaled, beta);
            let act = tape.relu(affine);
            let w2 = tape.param(conv.w2);
            let b2 = tape.param(conv.b2);
            let lin2 = tape.matmul(act, w2);
            h = tape.add(lin2, b2);
        }
        h
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }
}

/// Append a virtual node connected to every existing node; its feature row
/// is the supplied (typically trainable) vector.
pub fn add_virtual_node(g: &Graph, v_feature: &[f64]) -> Graph {
    let n = g.n;
    let c = g.node_features.cols();
    assert_eq!(v_feature.len(), c, "virtual feature width");
    let mut adj = Tensor::zeros([n + 1, n + 1]);
    for i in 0..n {
        for j in 0..n {
            adj.data_mut()[i * (n + 1) + j] = g.adjacency.at(i, j);
        }
        adj.data_mut()[i * (n + 1) + n] = 1.0;
        adj.data_mut()[n * (n + 1) + i] = 1.0;
    }
    let mut feat = Tensor::zeros([n + 1, c]);
    for i in 0..n {
        feat.data_mut()[i * c..(i + 1) * c].copy_from_slice(g.node_features.row(i));
    }
    feat.data_mut()[n * c..(n + 1) * c].copy_from_slice(v_feature);
    Graph { n: n + 1, adjacency: adj, node_features: feat }
}

/// GIN applied to a virtual-node-augmented graph, returning the per-node
/// feature matrix with the virtual row discarded.
///
/// `h0` must hold one row per augmented node (real nodes plus virtual last).
pub fn gin_forward(
    gin: &Gin,
    store: &ParamSet,
    tape: &mut Tape,
    augmented_adjacency: &Tensor,
    h0: Var,
) -> Var {
    let n_aug = augmented_adjacency.rows();
    assert!(n_aug >= 2, "augmented graph needs at least 2 nodes");
    let out = gin.forward(store, tape, augmented_adjacency, h0);
    let real: Vec<usize> = (0..n_aug - 1).collect();
    tape.gather_rows(out, &real)
}

// ── Vector-channel network ──────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct VnConfig {
    pub vector_channels: usize,
    pub layers: usize,
}

impl Default for VnConfig {
    fn default() -> Self {
        VnConfig { vector_channels: 8, layers: 2 }
    }
}

struct VnLayer {
    weight: ParamId,
    direction: ParamId,
}

/// Rotation-equivariant network on point clouds.
///
/// Channels are stored as a `[channels, 3n]` matrix whose rows hold one
/// 3-vector per point. Each layer mixes channels (together with their
/// point-means, which gives global interaction on the fully connected point
/// set) through learned scalar weights, then applies a project-and-rectify
/// nonlinearity along a learned direction channel. Both steps commute with
/// rotations acting on every 3-vector and with permutations of the points.
///
/// Heads: `z_perm` pools rotation-invariant norms and inner products per
/// point; `z_rot` mixes the per-channel point means into three columns that
/// rotate with the input.
pub struct VnNet {
    pub cfg: VnConfig,
    layers: Vec<VnLayer>,
    w_perm_norm: ParamId,
    w_perm_cross: ParamId,
    b_perm: ParamId,
    w_rot: ParamId,
}

impl VnNet {
    pub fn init(cfg: VnConfig, prefix: &str, store: &mut ParamSet, rng: &mut impl Rng) -> Self {
        assert!(cfg.vector_channels >= 3, "need at least 3 vector channels");
        assert!(cfg.layers >= 1);
        let c = cfg.vector_channels;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let c_in = if l == 0 { 2 } else { c };
            let total_in = 2 * c_in; // channels plus their point means
            let std = (1.0 / total_in as f64).sqrt();
            layers.push(VnLayer {
                weight: store.add(
                    format!("{prefix}.layer{l}.weight"),
                    Tensor::randn([c, total_in], std, rng),
                ),
                direction: store.add(
                    format!("{prefix}.layer{l}.direction"),
                    Tensor::randn([c, total_in], std, rng),
                ),
            });
        }
        let head_std = (1.0 / c as f64).sqrt();
        VnNet {
            cfg,
            layers,
            w_perm_norm: store
                .add(format!("{prefix}.head.perm_norm"), Tensor::randn([1, c], head_std, rng)),
            w_perm_cross: store
                .add(format!("{prefix}.head.perm_cross"), Tensor::randn([1, c], head_std, rng)),
            b_perm: store.add(format!("{prefix}.head.perm_bias"), Tensor::zeros([1])),
            w_rot: store.add(format!("{prefix}.head.rot"), Tensor::randn([3, c], head_std, rng)),
        }
    }

    /// Forward on a centered state with explicit position/velocity noise.
    /// Returns `(z_perm: [n,1], z_rot: [3,3])` where `z_perm` is
    /// rotation-invariant and permutation-equivariant while `z_rot` is
    /// permutation-invariant with rotation-equivariant columns.
    pub fn forward(
        &self,
        _store: &ParamSet,
        tape: &mut Tape,
        state: &PointCloudState,
        eps_pos: &Tensor,
        eps_vel: &Tensor,
    ) -> Result<(Var, Var)> {
        let n = state.n_points();
        if n < 1 {
            return Err(Error::contract("vn_forward: empty point cloud"));
        }
        if state.dim() != 3 {
            return Err(Error::contract(format!(
                "vn_forward: expects 3-D points, got {}",
                state.dim()
            )));
        }
        assert_eq!(eps_pos.shape(), state.positions.shape(), "eps_pos shape");
        assert_eq!(eps_vel.shape(), state.velocities.shape(), "eps_vel shape");

        let block_mean = tape.input(block_mean_matrix(n));
        let block_sum = tape.input(block_sum_matrix(n));
        let block_expand = tape.input(block_expand_matrix(n));
        let mean_single = tape.input(mean_single_matrix(n));

        let pos = tape.input(state.positions.clone());
        let vel = tape.input(state.velocities.clone());
        let e1 = tape.input(eps_pos.clone());
        let e2 = tape.input(eps_vel.clone());
        let ch_pos = tape.add(pos, e1);
        let ch_vel = tape.add(vel, e2);
        let row_pos = tape.reshape(ch_pos, [1, 3 * n]);
        let row_vel = tape.reshape(ch_vel, [1, 3 * n]);
        let mut h = tape.concat(0, &[row_pos, row_vel]); // [2, 3n]

        for layer in &self.layers {
            let h_mean = tape.matmul(h, block_mean);
            let h_full = tape.concat(0, &[h, h_mean]);
            let w = tape.param(layer.weight);
            let d = tape.param(layer.direction);
            let q = tape.matmul(w, h_full); // [C, 3n]
            let k = tape.matmul(d, h_full); // [C, 3n]
            // Project-and-rectify: q' = q - min(<q,k>/|k|^2, 0) * k per point.
            let qk = tape.mul(q, k);
            let dots = tape.matmul(qk, block_sum); // [C, n]
            let kk = tape.mul(k, k);
            let ksq = tape.matmul(kk, block_sum);
            let ksq = tape.clamp_min(ksq, 1e-12);
            let coef = tape.div(dots, ksq);
            let neg_coef = tape.neg(coef);
            let pos_part = tape.relu(neg_coef);
            let min_part = tape.neg(pos_part); // min(coef, 0)
            let min_exp = tape.matmul(min_part, block_expand); // [C, 3n]
            let correction = tape.mul(min_exp, k);
            h = tape.sub(q, correction);
        }

        // z_perm: per-point rotation invariants pooled over channels.
        let hh = tape.mul(h, h);
        let norms = tape.matmul(hh, block_sum); // [C, n]
        let h_mean = tape.matmul(h, block_mean);
        let h_cross = tape.mul(h, h_mean);
        let cross = tape.matmul(h_cross, block_sum); // [C, n]
        let wn = tape.param(self.w_perm_norm);
        let wc = tape.param(self.w_perm_cross);
        let zn = tape.matmul(wn, norms); // [1, n]
        let zc = tape.matmul(wc, cross);
        let z = tape.add(zn, zc);
        let b = tape.param(self.b_perm);
        let z = tape.add(z, b);
        let z_perm = tape.transpose(z); // [n, 1]

        // z_rot: columns are learned mixtures of per-channel point means.
        let means = tape.matmul(h, mean_single); // [C, 3] rows are row-vectors
        let wr = tape.param(self.w_rot);
        let mixed = tape.matmul(wr, means); // [3, 3]
        let z_rot = tape.transpose(mixed); // columns rotate with the input

        Ok((z_perm, z_rot))
    }
}

/// `[3n, 3n]` constant: right-multiplication replaces every point block with
/// the mean over points.
fn block_mean_matrix(n: usize) -> Tensor {
    let mut m = Tensor::zeros([3 * n, 3 * n]);
    let w = 1.0 / n as f64;
    for i in 0..n {
        for j in 0..n {
            for a in 0..3 {
                m.data_mut()[(3 * i + a) * 3 * n + 3 * j + a] = w;
            }
        }
    }
    m
}

/// `[3n, n]` constant: right-multiplication sums the 3 coordinates per point.
fn block_sum_matrix(n: usize) -> Tensor {
    let mut m = Tensor::zeros([3 * n, n]);
    for i in 0..n {
        for a in 0..3 {
            m.data_mut()[(3 * i + a) * n + i] = 1.0;
        }
    }
    m
}

/// `[n, 3n]` constant: right-multiplication replicates a per-point scalar
/// over its 3 coordinates.
fn block_expand_matrix(n: usize) -> Tensor {
    let mut m = Tensor::zeros([n, 3 * n]);
    for i in 0..n {
        for a in 0..3 {
            m.data_mut()[i * 3 * n + 3 * i + a] = 1.0;
        }
    }
    m
}

/// `[3n, 3]` constant: right-multiplication yields the mean 3-vector.
fn mean_single_matrix(n: usize) -> Tensor {
    let mut m = Tensor::zeros([3 * n, 3]);
    let w = 1.0 / n as f64;
    for i in 0..n {
        for a in 0..3 {
            m.data_mut()[(3 * i + a) * 3 + a] = w;
        }
    }
    m
}

pub(crate) fn he_init(shape: [usize; 2], rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / shape[0] as f64).sqrt();
    Tensor::randn(shape.to_vec(), std, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::{act_graph, haar_orthogonal, uniform_permutation, PermutationRep};
    use crate::rng::{substream, Lane};
    use crate::tensor::matmul_raw;
    use crate::testkit::permutations;

    fn circulant(n: usize, skip: usize) -> Graph {
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for i in 0..n {
            edges.push((i, (i + 1) % n));
            edges.push((i, (i + skip) % n));
        }
        let mut dedup: Vec<(usize, usize)> = edges
            .into_iter()
            .filter(|&(a, b)| a != b)
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        dedup.sort();
        dedup.dedup();
        Graph::from_edges(n, &dedup).unwrap()
    }

    #[test]
    fn virtual_node_construction() {
        let g = Graph::from_edges(1, &[]).unwrap();
        let aug = add_virtual_node(&g, &[0.0]);
        assert_eq!(aug.n, 2);
        assert_eq!(aug.edge_count(), 1);

        let g = Graph::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        let aug = add_virtual_node(&g, &[0.0]);
        assert_eq!(aug.edge_count(), g.edge_count() + 4);
        // Still symmetric with zero diagonal.
        for i in 0..5 {
            assert_eq!(aug.adjacency.at(i, i), 0.0);
            for j in 0..5 {
                assert_eq!(aug.adjacency.at(i, j), aug.adjacency.at(j, i));
            }
        }
    }

    fn gin_fixture(in_dim: usize, seed: u64) -> (ParamSet, Gin) {
        let mut store = ParamSet::new();
        let mut rng = substream(seed, Lane::Init, 0);
        let gin = Gin::init(
            GinConfig { in_dim, hidden: 16, layers: 3 },
            1,
            "gin",
            &mut store,
            &mut rng,
        );
        (store, gin)
    }

    #[test]
    fn gin_single_node_graph_is_finite() {
        let (store, gin) = gin_fixture(1, 3);
        let g = Graph::from_edges(1, &[]).unwrap();
        let aug = add_virtual_node(&g, &[0.25]);
        let mut tape = Tape::no_grad(&store);
        let h0 = tape.input(aug.node_features.clone());
        let z = gin_forward(&gin, &store, &mut tape, &aug.adjacency, h0);
        assert_eq!(tape.value(z).shape(), &[1, 1]);
        assert!(tape.value(z).all_finite());
    }

    #[test]
    fn gin_is_permutation_equivariant() {
        let (store, gin) = gin_fixture(2, 4);
        let mut rng = substream(9, Lane::Diagnostics, 0);
        let base = Graph::new(
            Graph::from_edges(4, &[(0, 1), (1, 2), (2, 0), (2, 3)])
                .unwrap()
                .adjacency,
            Tensor::randn([4, 2], 1.0, &mut rng),
        )
        .unwrap();
        let v = vec![0.1, -0.2];
        let aug = add_virtual_node(&base, &v);
        let z_base = {
            let mut tape = Tape::no_grad(&store);
            let h0 = tape.input(aug.node_features.clone());
            let z = gin_forward(&gin, &store, &mut tape, &aug.adjacency, h0);
            tape.value(z).clone()
        };
        for perm in permutations(4) {
            let p = PermutationRep::new(perm.clone());
            let pg = act_graph(&p, &base).unwrap();
            let paug = add_virtual_node(&pg, &v);
            let mut tape = Tape::no_grad(&store);
            let h0 = tape.input(paug.node_features.clone());
            let z = gin_forward(&gin, &store, &mut tape, &paug.adjacency, h0);
            let expect = p.apply_rows(&z_base);
            let dist = tape.value(z).linf_distance(&expect);
            assert!(dist <= 1e-8, "residual {dist} for perm {perm:?}");
        }
    }

    #[test]
    fn gin_equivariance_random_larger_graphs() {
        let (store, gin) = gin_fixture(1, 5);
        let mut rng = substream(10, Lane::Diagnostics, 0);
        let n = 24;
        let mut edges = Vec::new();
        for i in 0..n {
            edges.push((i, (i + 1) % n));
            if rng.gen_bool(0.2) {
                let j = rng.gen_range(0..n);
                if j != i {
                    edges.push((i.min(j), i.max(j)));
                }
            }
        }
        edges.sort();
        edges.dedup();
        let g = Graph::from_edges(n, &edges).unwrap();
        let v = vec![0.0];
        let aug = add_virtual_node(&g, &v);
        let z_base = {
            let mut tape = Tape::no_grad(&store);
            let h0 = tape.input(aug.node_features.clone());
            let z = gin_forward(&gin, &store, &mut tape, &aug.adjacency, h0);
            tape.value(z).clone()
        };
        for _ in 0..100 {
            let p = uniform_permutation(n, &mut rng);
            let pg = act_graph(&p, &g).unwrap();
            let paug = add_virtual_node(&pg, &v);
            let mut tape = Tape::no_grad(&store);
            let h0 = tape.input(paug.node_features.clone());
            let z = gin_forward(&gin, &store, &mut tape, &paug.adjacency, h0);
            let expect = p.apply_rows(&z_base);
            assert!(tape.value(z).linf_distance(&expect) <= 1e-8);
        }
    }

    #[test]
    fn gin_cannot_separate_wl_equivalent_circulants() {
        // Two non-isomorphic 4-regular circulants; with constant features and
        // zero noise a 1-WL-bounded network sees them identically.
        let (store, gin) = gin_fixture(1, 6);
        let g1 = circulant(11, 2);
        let g2 = circulant(11, 3);
        assert!(crate::testkit::wl1_equivalent(&g1, &g2));
        let run = |g: &Graph| {
            let aug = add_virtual_node(g, &[0.0]);
            let mut tape = Tape::no_grad(&store);
            let h0 = tape.input(aug.node_features.clone());
            let z = gin_forward(&gin, &store, &mut tape, &aug.adjacency, h0);
            let mut vals = tape.value(z).data().to_vec();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals
        };
        let (z1, z2) = (run(&g1), run(&g2));
        for (a, b) in z1.iter().zip(&z2) {
            assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
        }
    }

    fn vn_fixture(seed: u64) -> (ParamSet, VnNet) {
        let mut store = ParamSet::new();
        let mut rng = substream(seed, Lane::Init, 1);
        let vn = VnNet::init(VnConfig::default(), "vn", &mut store, &mut rng);
        (store, vn)
    }

    fn centered_state(rng: &mut impl Rng, n: usize) -> PointCloudState {
        let pos = Tensor::randn([n, 3], 1.0, rng);
        let (centered, _) = crate::groups::center(&pos);
        PointCloudState {
            positions: centered,
            velocities: Tensor::randn([n, 3], 1.0, rng),
            charges: Tensor::ones([n]),
        }
    }

    fn rotate_rows(x: &Tensor, q: &Tensor) -> Tensor {
        let qt = q.transposed();
        Tensor::new(
            x.shape().to_vec(),
            matmul_raw(x.data(), qt.data(), x.rows(), 3, 3),
        )
    }

    #[test]
    fn vn_rotation_behavior() {
        let (store, vn) = vn_fixture(7);
        let mut rng = substream(12, Lane::Diagnostics, 0);
        for _ in 0..20 {
            let s = centered_state(&mut rng, 5);
            let e1 = Tensor::randn([5, 3], 1.0, &mut rng);
            let e2 = Tensor::randn([5, 3], 1.0, &mut rng);
            let r = haar_orthogonal(3, &mut rng, true);

            let mut tape = Tape::no_grad(&store);
            let (zp, zr) = vn.forward(&store, &mut tape, &s, &e1, &e2).unwrap();
            let (zp, zr) = (tape.value(zp).clone(), tape.value(zr).clone());

            let rs = PointCloudState {
                positions: rotate_rows(&s.positions, &r.matrix),
                velocities: rotate_rows(&s.velocities, &r.matrix),
                charges: s.charges.clone(),
            };
            let re1 = rotate_rows(&e1, &r.matrix);
            let re2 = rotate_rows(&e2, &r.matrix);
            let mut tape2 = Tape::no_grad(&store);
            let (zp2, zr2) = vn.forward(&store, &mut tape2, &rs, &re1, &re2).unwrap();

            assert!(
                tape2.value(zp2).linf_distance(&zp) <= 1e-6,
                "z_perm not invariant"
            );
            let r_zr = Tensor::new([3, 3], matmul_raw(r.matrix.data(), zr.data(), 3, 3, 3));
            assert!(
                tape2.value(zr2).linf_distance(&r_zr) <= 1e-6,
                "z_rot not equivariant"
            );
        }
    }

    #[test]
    fn vn_permutation_behavior() {
        let (store, vn) = vn_fixture(8);
        let mut rng = substream(13, Lane::Diagnostics, 0);
        let s = centered_state(&mut rng, 3);
        let e1 = Tensor::randn([3, 3], 1.0, &mut rng);
        let e2 = Tensor::randn([3, 3], 1.0, &mut rng);
        let mut tape = Tape::no_grad(&store);
        let (zp, zr) = vn.forward(&store, &mut tape, &s, &e1, &e2).unwrap();
        let (zp, zr) = (tape.value(zp).clone(), tape.value(zr).clone());
        for perm in permutations(3) {
            let p = PermutationRep::new(perm);
            let ps = PointCloudState {
                positions: p.apply_rows(&s.positions),
                velocities: p.apply_rows(&s.velocities),
                charges: Tensor::from_vec(p.apply_vec(s.charges.data())),
            };
            let pe1 = p.apply_rows(&e1);
            let pe2 = p.apply_rows(&e2);
            let mut tape2 = Tape::no_grad(&store);
            let (zp2, zr2) = vn.forward(&store, &mut tape2, &ps, &pe1, &pe2).unwrap();
            assert!(tape2.value(zp2).linf_distance(&p.apply_rows(&zp)) <= 1e-8);
            assert!(tape2.value(zr2).linf_distance(&zr) <= 1e-8);
        }
    }

    #[test]
    fn vn_zero_input_gives_equal_scores() {
        let (store, vn) = vn_fixture(9);
        let s = PointCloudState {
            positions: Tensor::zeros([4, 3]),
            velocities: Tensor::zeros([4, 3]),
            charges: Tensor::ones([4]),
        };
        let zero = Tensor::zeros([4, 3]);
        let mut tape = Tape::no_grad(&store);
        let (zp, _) = vn.forward(&store, &mut tape, &s, &zero, &zero).unwrap();
        let vals = tape.value(zp).data();
        for &v in vals {
            assert_eq!(v, vals[0]);
        }
    }

    #[test]
    fn vn_rejects_non_3d() {
        let (store, vn) = vn_fixture(10);
        let s = PointCloudState {
            positions: Tensor::zeros([4, 2]),
            velocities: Tensor::zeros([4, 2]),
            charges: Tensor::ones([4]),
        };
        let zero = Tensor::zeros([4, 2]);
        let mut tape = Tape::no_grad(&store);
        assert!(vn.forward(&store, &mut tape, &s, &zero, &zero).is_err());
    }
}
