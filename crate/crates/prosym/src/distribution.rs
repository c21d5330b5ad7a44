//! The learned distribution over group elements, one sampler per group.
//!
//! Each sampler realizes the noise-outsourced construction: draw invariant
//! noise, run the equivariant backbone on (input, noise), postprocess the
//! features into a valid group representation. The permutation path couples
//! the hard argsort output with its Sinkhorn relaxation through the
//! straight-through estimator so the sampler trains end-to-end; the rotation
//! path is differentiable outright through Gram-Schmidt.
//!
//! Three modes share the machinery: `LearnedPs` draws noise and uses the
//! backbone, `Canonical` runs the same path with zero noise (a deterministic
//! canonicalizer), and `UniformGa` ignores the backbone and samples uniformly
//! from the group, in which case nothing is differentiable.

use rand::Rng;

use crate::backbones::{add_virtual_node, gin_forward, Gin, GinConfig, VnConfig, VnNet};
use crate::error::{Error, Result};
use crate::groups::{
    gaussian_matrix, gram_schmidt, hard_argsort, haar_orthogonal, relaxed_argsort, scale_det,
    straight_through_perm, uniform_permutation, Graph, OrthogonalRep, PermutationRep,
    PointCloudState, ProductRep, SINKHORN_ITERS,
};
use crate::tape::{ParamId, ParamSet, Tape, Var};
use crate::tensor::Tensor;

// ── Noise ───────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    /// I.i.d. uniform on `[0, eta]`.
    Uniform0Eta,
    /// I.i.d. normal with standard deviation `eta`.
    Gaussian0Eta2,
    /// No noise; realizes the canonicalization mode.
    Zero,
}

#[derive(Clone, Copy, Debug)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub eta: f64,
}

impl NoiseSpec {
    pub fn uniform(eta: f64) -> Self {
        assert!(eta.is_finite() && eta > 0.0, "noise scale must be positive");
        NoiseSpec { kind: NoiseKind::Uniform0Eta, eta }
    }

    pub fn gaussian(eta: f64) -> Self {
        assert!(eta.is_finite() && eta > 0.0, "noise scale must be positive");
        NoiseSpec { kind: NoiseKind::Gaussian0Eta2, eta }
    }

    pub fn zero() -> Self {
        NoiseSpec { kind: NoiseKind::Zero, eta: 0.0 }
    }

    pub fn draw(&self, shape: [usize; 2], rng: &mut impl Rng) -> Tensor {
        match self.kind {
            NoiseKind::Uniform0Eta => Tensor::rand_uniform(shape.to_vec(), 0.0, self.eta, rng),
            NoiseKind::Gaussian0Eta2 => gaussian_matrix(shape, self.eta, rng),
            NoiseKind::Zero => Tensor::zeros(shape.to_vec()),
        }
    }
}

/// How the sampler produces group elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistributionMode {
    /// Learned input-conditional distribution (noise + backbone).
    LearnedPs,
    /// Uniform over the group; backbone ignored, nothing differentiable.
    UniformGa,
    /// Backbone path with zero noise: a deterministic canonicalizer.
    Canonical,
}

// ── Sampled elements ────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub enum GroupRep {
    Perm(PermutationRep),
    Ortho(OrthogonalRep),
    Product(ProductRep),
}

/// One sampled group element with its tape handles.
///
/// `perm_var` (when present) is the straight-through-coupled permutation
/// matrix: its forward value equals the hard permutation exactly, its
/// gradient flows through the relaxation. `relaxed` is present only when a
/// permutation component exists and the sampler ran the learned path.
pub struct SampledElement {
    pub rep: GroupRep,
    pub perm_var: Option<Var>,
    pub rot_var: Option<Var>,
    pub relaxed: Option<Var>,
    pub tie_warnings: usize,
}

impl SampledElement {
    pub fn perm(&self) -> Option<&PermutationRep> {
        match &self.rep {
            GroupRep::Perm(p) => Some(p),
            GroupRep::Product(pr) => Some(&pr.perm),
            GroupRep::Ortho(_) => None,
        }
    }

    pub fn rotation(&self) -> Option<&OrthogonalRep> {
        match &self.rep {
            GroupRep::Ortho(q) => Some(q),
            GroupRep::Product(pr) => Some(&pr.rot),
            GroupRep::Perm(_) => None,
        }
    }
}

// ── Permutation group sampler ───────────────────────────────────────────

/// Sampler for the permutation group on graphs: GIN over the virtual-node
/// augmented graph, argsort postprocessing.
pub struct SnSampler {
    pub gin: Gin,
    pub virtual_feature: ParamId,
    pub noise: NoiseSpec,
    pub tau: f64,
    pub sinkhorn_iters: usize,
}

impl SnSampler {
    pub fn init(
        in_dim: usize,
        gin_hidden: usize,
        noise: NoiseSpec,
        tau: f64,
        prefix: &str,
        store: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Self {
        let gin = Gin::init(
            GinConfig { in_dim, hidden: gin_hidden, layers: 3 },
            1,
            &format!("{prefix}.gin"),
            store,
            rng,
        );
        let virtual_feature =
            store.add(format!("{prefix}.virtual_feature"), Tensor::zeros([in_dim]));
        SnSampler { gin, virtual_feature, noise, tau, sinkhorn_iters: SINKHORN_ITERS }
    }

    /// Draw one permutation for `g` under `mode`.
    pub fn sample(
        &self,
        store: &ParamSet,
        tape: &mut Tape,
        g: &Graph,
        mode: DistributionMode,
        rng: &mut impl Rng,
    ) -> Result<SampledElement> {
        match mode {
            DistributionMode::UniformGa => {
                let p = uniform_permutation(g.n, rng);
                let pv = tape.input(p.matrix());
                Ok(SampledElement {
                    rep: GroupRep::Perm(p),
                    perm_var: Some(pv),
                    rot_var: None,
                    relaxed: None,
                    tie_warnings: 0,
                })
            }
            DistributionMode::LearnedPs => {
                let c = g.node_features.cols();
                let eps = self.noise.draw([g.n + 1, c], rng);
                self.sample_with_noise(store, tape, g, &eps)
            }
            DistributionMode::Canonical => {
                let c = g.node_features.cols();
                let eps = Tensor::zeros([g.n + 1, c]);
                self.sample_with_noise(store, tape, g, &eps)
            }
        }
    }

    /// Learned path with an explicit noise realization; `eps` covers the
    /// virtual row too (`(n+1) x c`).
    pub fn sample_with_noise(
        &self,
        store: &ParamSet,
        tape: &mut Tape,
        g: &Graph,
        eps: &Tensor,
    ) -> Result<SampledElement> {
        let c = g.node_features.cols();
        if eps.shape() != [g.n + 1, c] {
            return Err(Error::contract(format!(
                "sn noise must be [{}, {c}], got {:?}",
                g.n + 1,
                eps.shape()
            )));
        }
        let augmented = add_virtual_node(g, store.value(self.virtual_feature).data());
        let feat = tape.input(g.node_features.clone());
        let v = tape.param(self.virtual_feature);
        let v_row = tape.reshape(v, [1, c]);
        let stacked = tape.concat(0, &[feat, v_row]);
        let eps_v = tape.input(eps.clone());
        let h0 = tape.add(stacked, eps_v);
        let z = gin_forward(&self.gin, store, tape, &augmented.adjacency, h0); // [n,1]
        let (hard, tie_warnings) = hard_argsort(tape.value(z).data());
        let relaxed = relaxed_argsort(tape, z, self.tau, self.sinkhorn_iters)?;
        let coupled = straight_through_perm(tape, relaxed, &hard);
        Ok(SampledElement {
            rep: GroupRep::Perm(hard),
            perm_var: Some(coupled),
            rot_var: None,
            relaxed: Some(relaxed),
            tie_warnings,
        })
    }
}

// ── Orthogonal / special orthogonal group sampler ───────────────────────

/// Sampler for O(3)/SO(3) on centered point clouds: vector-channel backbone,
/// Gram-Schmidt postprocessing, determinant scaling when `special`.
pub struct O3Sampler {
    pub vn: VnNet,
    pub noise: NoiseSpec,
    pub special: bool,
}

/// Relative magnitude of the Gaussian jitter guarding Gram-Schmidt against
/// rank collapse.
pub const GS_JITTER_REL: f64 = 1e-8;

impl O3Sampler {
    pub fn init(
        vn_cfg: VnConfig,
        noise: NoiseSpec,
        special: bool,
        prefix: &str,
        store: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Self {
        let vn = VnNet::init(vn_cfg, &format!("{prefix}.vn"), store, rng);
        O3Sampler { vn, noise, special }
    }

    pub fn sample(
        &self,
        store: &ParamSet,
        tape: &mut Tape,
        s: &PointCloudState,
        mode: DistributionMode,
        rng: &mut impl Rng,
    ) -> Result<SampledElement> {
        let n = s.n_points();
        match mode {
            DistributionMode::UniformGa => {
                let q = haar_orthogonal(s.dim(), rng, self.special);
                let qv = tape.input(q.matrix.clone());
                Ok(SampledElement {
                    rep: GroupRep::Ortho(q),
                    perm_var: None,
                    rot_var: Some(qv),
                    relaxed: None,
                    tie_warnings: 0,
                })
            }
            DistributionMode::LearnedPs => {
                let e1 = self.noise.draw([n, 3], rng);
                let e2 = self.noise.draw([n, 3], rng);
                let jitter = gaussian_matrix([3, 3], 1.0, rng);
                self.sample_with_noise(store, tape, s, &e1, &e2, Some(&jitter))
            }
            DistributionMode::Canonical => {
                let zero = Tensor::zeros([n, 3]);
                self.sample_with_noise(store, tape, s, &zero, &zero, None)
            }
        }
    }

    /// Learned path with explicit noise; `jitter`, when given, is a raw
    /// standard-Gaussian matrix scaled to `GS_JITTER_REL * ||Z||_F` and added
    /// to the features before orthogonalization.
    pub fn sample_with_noise(
        &self,
        store: &ParamSet,
        tape: &mut Tape,
        s: &PointCloudState,
        eps_pos: &Tensor,
        eps_vel: &Tensor,
        jitter: Option<&Tensor>,
    ) -> Result<SampledElement> {
        let (_z_perm, z_rot) = self.vn.forward(store, tape, s, eps_pos, eps_vel)?;
        let q = orthogonalize(tape, z_rot, jitter, self.special)?;
        Ok(SampledElement {
            rep: GroupRep::Ortho(OrthogonalRep {
                matrix: tape.value(q).clone(),
                special: self.special,
            }),
            perm_var: None,
            rot_var: Some(q),
            relaxed: None,
            tie_warnings: 0,
        })
    }
}

fn orthogonalize(
    tape: &mut Tape,
    z_rot: Var,
    jitter: Option<&Tensor>,
    special: bool,
) -> Result<Var> {
    let z = match jitter {
        Some(j) => {
            let scale = GS_JITTER_REL * tape.value(z_rot).frobenius_norm();
            let mut jt = j.clone();
            for v in jt.data_mut() {
                *v *= scale;
            }
            let jv = tape.input(jt);
            tape.add(z_rot, jv)
        }
        None => z_rot,
    };
    let q = gram_schmidt(tape, z)?;
    Ok(if special { scale_det(tape, q) } else { q })
}

// ── Product group sampler ───────────────────────────────────────────────

/// Sampler for the joint permutation-rotation group on point clouds. One
/// backbone call yields both heads: the rotation-invariant per-point scores
/// feed the argsort pipeline, the permutation-invariant frame feeds
/// Gram-Schmidt.
pub struct ProductSampler {
    pub vn: VnNet,
    pub noise: NoiseSpec,
    pub special: bool,
    pub tau: f64,
    pub sinkhorn_iters: usize,
}

impl ProductSampler {
    pub fn init(
        vn_cfg: VnConfig,
        noise: NoiseSpec,
        special: bool,
        tau: f64,
        prefix: &str,
        store: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Self {
        let vn = VnNet::init(vn_cfg, &format!("{prefix}.vn"), store, rng);
        ProductSampler { vn, noise, special, tau, sinkhorn_iters: SINKHORN_ITERS }
    }

    pub fn sample(
        &self,
        store: &ParamSet,
        tape: &mut Tape,
        s: &PointCloudState,
        mode: DistributionMode,
        rng: &mut impl Rng,
    ) -> Result<SampledElement> {
        let n = s.n_points();
        match mode {
            DistributionMode::UniformGa => {
                let p = uniform_permutation(n, rng);
                let q = haar_orthogonal(s.dim(), rng, self.special);
                let pv = tape.input(p.matrix());
                let qv = tape.input(q.matrix.clone());
                Ok(SampledElement {
                    rep: GroupRep::Product(ProductRep { perm: p, rot: q }),
                    perm_var: Some(pv),
                    rot_var: Some(qv),
                    relaxed: None,
                    tie_warnings: 0,
                })
            }
            DistributionMode::LearnedPs => {
                let e1 = self.noise.draw([n, 3], rng);
                let e2 = self.noise.draw([n, 3], rng);
                let jitter = gaussian_matrix([3, 3], 1.0, rng);
                self.sample_with_noise(store, tape, s, &e1, &e2, Some(&jitter))
            }
            DistributionMode::Canonical => {
                let zero = Tensor::zeros([n, 3]);
                self.sample_with_noise(store, tape, s, &zero, &zero, None)
            }
        }
    }

    pub fn sample_with_noise(
        &self,
        store: &ParamSet,
        tape: &mut Tape,
        s: &PointCloudState,
        eps_pos: &Tensor,
        eps_vel: &Tensor,
        jitter: Option<&Tensor>,
    ) -> Result<SampledElement> {
        let (z_perm, z_rot) = self.vn.forward(store, tape, s, eps_pos, eps_vel)?;
        let (hard, tie_warnings) = hard_argsort(tape.value(z_perm).data());
        let relaxed = relaxed_argsort(tape, z_perm, self.tau, self.sinkhorn_iters)?;
        let coupled = straight_through_perm(tape, relaxed, &hard);
        let q = orthogonalize(tape, z_rot, jitter, self.special)?;
        Ok(SampledElement {
            rep: GroupRep::Product(ProductRep {
                perm: hard,
                rot: OrthogonalRep { matrix: tape.value(q).clone(), special: self.special },
            }),
            perm_var: Some(coupled),
            rot_var: Some(q),
            relaxed: Some(relaxed),
            tie_warnings,
        })
    }
}

// ── Entropy diagnostics ─────────────────────────────────────────────────

/// Differentiable mean row/column Shannon entropy of a relaxed permutation.
/// Row and column means coincide for this quantity, so a single normalized
/// sum `-(1/n) Σ p log p` implements both. Entries are clamped at 1e-12
/// before the logarithm.
pub fn entropy_regularizer(tape: &mut Tape, relaxed: Var) -> Var {
    let n = tape.value(relaxed).rows();
    let clamped = tape.clamp_min(relaxed, 1e-12);
    let logs = tape.log(clamped);
    let plogp = tape.mul(relaxed, logs);
    let total = tape.sum(plogp);
    tape.scale(total, -1.0 / n as f64)
}

/// Mean row-wise entropy of the average of hard permutation matrices;
/// a non-differentiable diagnostic of sample consistency.
pub fn aggregated_entropy(samples: &[PermutationRep]) -> f64 {
    assert!(!samples.is_empty(), "aggregated_entropy: no samples");
    let n = samples[0].n();
    let mut counts = vec![0usize; n * n];
    for p in samples {
        assert_eq!(p.n(), n, "aggregated_entropy: size mismatch");
        for (t, &s) in p.perm().iter().enumerate() {
            counts[t * n + s] += 1;
        }
    }
    let total_draws = samples.len() as f64;
    let mut total = 0.0;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / total_draws;
            total -= p * p.ln();
        }
    }
    total / n as f64
}
