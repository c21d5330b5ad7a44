//! Monte-Carlo symmetrization: wrap a base function and a group-element
//! sampler into a function that is invariant or equivariant in expectation.
//!
//! Each sample evaluates `rho2(g) · f(rho1(g)^{-1} · x)` on its own tape with
//! an RNG substream keyed by `(seed, batch index, sample index)`; sample
//! outputs and gradients are reduced in index order, so runs are
//! bit-reproducible regardless of the parallelism.
//!
//! Training minimizes the sampled surrogate — the task loss averaged over
//! per-sample outputs, which upper-bounds the loss of the averaged output for
//! convex losses — plus the entropy regularizer on relaxed permutations.

use rand::Rng;

use crate::distribution::{
    entropy_regularizer, DistributionMode, NoiseSpec, ProductSampler, SampledElement, SnSampler,
};
use crate::error::{Error, Result};
use crate::groups::{center, Graph, PointCloudState, SINKHORN_ITERS};
use crate::models::{slice_cols, Mlp, MlpConfig, Transformer, TransformerConfig};
use crate::parallel::map_indexed;
use crate::rng::{sample_stream, Lane, StreamRng};
use crate::tape::{Gradients, ParamId, ParamSet, Tape, Var};
use crate::tensor::Tensor;

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct SymmetrizationConfig {
    pub mode: DistributionMode,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub tau: f64,
    pub sinkhorn_iters: usize,
    pub entropy_strength: f64,
    pub noise: NoiseSpec,
}

impl SymmetrizationConfig {
    /// Canonical mode is deterministic, so sample counts collapse to 1.
    pub fn normalized(mut self) -> Self {
        assert!(self.train_samples >= 1 && self.eval_samples >= 1, "sample counts must be >= 1");
        if self.mode == DistributionMode::Canonical {
            self.train_samples = 1;
            self.eval_samples = 1;
        }
        self
    }

    pub fn learned(tau: f64, noise: NoiseSpec, train_samples: usize, eval_samples: usize) -> Self {
        SymmetrizationConfig {
            mode: DistributionMode::LearnedPs,
            train_samples,
            eval_samples,
            tau,
            sinkhorn_iters: SINKHORN_ITERS,
            entropy_strength: 0.1,
            noise,
        }
        .normalized()
    }

    pub fn with_mode(mut self, mode: DistributionMode) -> Self {
        self.mode = mode;
        self.normalized()
    }
}

/// Deterministic per-sample RNG derivation for one input within a batch.
#[derive(Clone, Copy, Debug)]
pub struct SampleKey {
    pub seed: u64,
    pub lane: Lane,
    pub batch_index: u64,
}

impl SampleKey {
    pub fn new(seed: u64, lane: Lane, batch_index: u64) -> Self {
        SampleKey { seed, lane, batch_index }
    }

    pub fn stream(&self, sample_index: u64) -> StreamRng {
        sample_stream(self.seed, self.lane, self.batch_index, sample_index)
    }
}

/// Convex task losses supported by the surrogate objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskLoss {
    /// Binary cross-entropy on a single logit against a 0/1 label.
    BinaryCrossEntropy,
    Mse,
    L1,
}

impl TaskLoss {
    /// Differentiable loss of a prediction against a constant target.
    pub fn on_tape(&self, tape: &mut Tape, prediction: Var, target: &Tensor) -> Var {
        match self {
            TaskLoss::BinaryCrossEntropy => {
                assert_eq!(tape.value(prediction).numel(), 1, "bce expects a scalar logit");
                let label = target.item();
                assert!(label == 0.0 || label == 1.0, "bce label must be 0 or 1");
                let logit = tape.reshape(prediction, [1, 1]);
                let zero = tape.input(Tensor::zeros([1, 1]));
                let logits = tape.concat(1, &[logit, zero]); // p(class1) = sigmoid(logit)
                let probs = tape.softmax_rows(logits);
                let logp = tape.log(probs);
                let mask = if label == 1.0 {
                    Tensor::new([1, 2], vec![1.0, 0.0])
                } else {
                    Tensor::new([1, 2], vec![0.0, 1.0])
                };
                let mv = tape.input(mask);
                let picked = tape.mul(logp, mv);
                let s = tape.sum(picked);
                tape.neg(s)
            }
            TaskLoss::Mse => {
                let t = tape.input(target.clone());
                let d = tape.sub(prediction, t);
                let sq = tape.mul(d, d);
                tape.mean(sq)
            }
            TaskLoss::L1 => {
                let t = tape.input(target.clone());
                let d = tape.sub(prediction, t);
                let a = tape.abs(d);
                tape.mean(a)
            }
        }
    }

    /// Value-level evaluation (used for the loss-of-mean side of the
    /// surrogate inequality).
    pub fn value(&self, prediction: &Tensor, target: &Tensor) -> f64 {
        let params = ParamSet::new();
        let mut tape = Tape::no_grad(&params);
        let p = tape.input(prediction.clone());
        let l = self.on_tape(&mut tape, p, target);
        tape.value(l).item()
    }
}

// ── Graph-task model ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphTask {
    /// Output untouched by the group: `rho2 = I`.
    Invariant,
    /// Output rows permuted along with nodes.
    NodeEquivariant { out_channels: usize },
}

/// An MLP on flattened graphs wrapped with a permutation sampler.
pub struct GraphSymmetrized {
    pub store: ParamSet,
    pub mlp: Mlp,
    pub sampler: SnSampler,
    pub cfg: SymmetrizationConfig,
    pub task: GraphTask,
    pub n_nodes: usize,
    pub feature_dim: usize,
}

/// Result of one Monte-Carlo evaluation batch.
pub struct Estimate {
    pub mean: Tensor,
    pub per_sample: Vec<Tensor>,
    pub tie_warnings: usize,
}

impl GraphSymmetrized {
    /// Build for fixed-size graphs (`n_nodes`, `feature_dim`) with the given
    /// MLP hidden widths.
    pub fn new(
        n_nodes: usize,
        feature_dim: usize,
        hidden_dims: &[usize],
        out_dim: usize,
        task: GraphTask,
        cfg: SymmetrizationConfig,
        gin_hidden: usize,
        seed: u64,
    ) -> Self {
        let cfg = cfg.normalized();
        let mut store = ParamSet::new();
        let mut rng = crate::rng::substream(seed, Lane::Init, 0);
        let in_dim = n_nodes * n_nodes + n_nodes * feature_dim;
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden_dims);
        dims.push(match task {
            GraphTask::Invariant => out_dim,
            GraphTask::NodeEquivariant { out_channels } => n_nodes * out_channels,
        });
        let mlp = Mlp::init(MlpConfig::new(dims), "base", &mut store, &mut rng);
        let sampler = SnSampler::init(
            feature_dim,
            gin_hidden,
            cfg.noise,
            cfg.tau,
            "dist",
            &mut store,
            &mut rng,
        );
        GraphSymmetrized { store, mlp, sampler, cfg, task, n_nodes, feature_dim }
    }

    fn check_input(&self, g: &Graph) -> Result<()> {
        if g.n != self.n_nodes || g.node_features.cols() != self.feature_dim {
            return Err(Error::contract(format!(
                "graph ({}, {}) does not match model ({}, {})",
                g.n,
                g.node_features.cols(),
                self.n_nodes,
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// One sample: transform the input by the inverse group element, run the
    /// base MLP, transform the output back.
    pub fn sample_output(
        &self,
        tape: &mut Tape,
        g: &Graph,
        mode: DistributionMode,
        rng: &mut impl Rng,
    ) -> Result<(Var, SampledElement)> {
        self.check_input(g)?;
        let elem = self.sampler.sample(&self.store, tape, g, mode, rng)?;
        let out = self.transform_and_forward(tape, g, &elem);
        Ok((out, elem))
    }

    /// Same path with an explicit noise realization (coupled-noise tests).
    pub fn sample_output_with_noise(
        &self,
        tape: &mut Tape,
        g: &Graph,
        eps: &Tensor,
    ) -> Result<(Var, SampledElement)> {
        self.check_input(g)?;
        let elem = self.sampler.sample_with_noise(&self.store, tape, g, eps)?;
        let out = self.transform_and_forward(tape, g, &elem);
        Ok((out, elem))
    }

    fn transform_and_forward(&self, tape: &mut Tape, g: &Graph, elem: &SampledElement) -> Var {
        let n = g.n;
        let pv = elem.perm_var.expect("permutation sampler provides a matrix");
        let pt = tape.transpose(pv);
        let a = tape.input(g.adjacency.clone());
        let x = tape.input(g.node_features.clone());
        let pta = tape.matmul(pt, a);
        let ptap = tape.matmul(pta, pv);
        let ptx = tape.matmul(pt, x);
        let flat_a = tape.reshape(ptap, [1, n * n]);
        let flat_x = tape.reshape(ptx, [1, n * self.feature_dim]);
        let input = tape.concat(1, &[flat_a, flat_x]);
        let out = self.mlp.forward(&self.store, tape, input);
        match self.task {
            GraphTask::Invariant => out,
            GraphTask::NodeEquivariant { out_channels } => {
                let grid = tape.reshape(out, [n, out_channels]);
                tape.matmul(pv, grid)
            }
        }
    }

    /// Monte-Carlo estimate of the symmetrized output: the mean over
    /// `n_samples` per-sample outputs, reduced in sample order.
    pub fn estimate(&self, g: &Graph, n_samples: usize, key: SampleKey) -> Result<Estimate> {
        self.estimate_with_mode(g, n_samples, key, self.cfg.mode)
    }

    /// `estimate` under an explicit sampling mode (the configured mode is
    /// ignored); lets diagnostics compare the learned and uniform
    /// distributions around identical weights.
    pub fn estimate_with_mode(
        &self,
        g: &Graph,
        n_samples: usize,
        key: SampleKey,
        mode: DistributionMode,
    ) -> Result<Estimate> {
        self.check_input(g)?;
        let n_samples = if mode == DistributionMode::Canonical { 1 } else { n_samples };
        assert!(n_samples >= 1);
        let results: Vec<Result<(Tensor, usize)>> = map_indexed(n_samples, |i| {
            let mut rng = key.stream(i as u64);
            let mut tape = Tape::no_grad(&self.store);
            let (out, elem) = self.sample_output(&mut tape, g, mode, &mut rng)?;
            Ok((tape.value(out).clone(), elem.tie_warnings))
        });
        collect_estimate(results)
    }

    /// Exact symmetrization by enumerating the whole permutation group
    /// through the same transform path (reference for the estimator).
    pub fn estimate_enumerated(&self, g: &Graph, n_max: usize) -> Result<Estimate> {
        self.check_input(g)?;
        if g.n > n_max {
            return Err(Error::Refused(format!(
                "estimate_enumerated: n={} exceeds cap {n_max}",
                g.n
            )));
        }
        let perms = crate::groups::all_permutations(g.n);
        let results: Vec<Result<(Tensor, usize)>> = map_indexed(perms.len(), |i| {
            let mut tape = Tape::no_grad(&self.store);
            let pv = tape.input(perms[i].matrix());
            let elem = SampledElement {
                rep: crate::distribution::GroupRep::Perm(perms[i].clone()),
                perm_var: Some(pv),
                rot_var: None,
                relaxed: None,
                tie_warnings: 0,
            };
            let out = self.transform_and_forward(&mut tape, g, &elem);
            Ok((tape.value(out).clone(), 0))
        });
        collect_estimate(results)
    }

    /// Surrogate training loss on one tape: mean per-sample task loss plus
    /// the entropy regularizer averaged over samples carrying a relaxation.
    pub fn training_loss(
        &self,
        tape: &mut Tape,
        g: &Graph,
        target: &Tensor,
        loss: TaskLoss,
        n_samples: usize,
        key: SampleKey,
    ) -> Result<Var> {
        let n_samples = if self.cfg.mode == DistributionMode::Canonical { 1 } else { n_samples };
        let mut loss_terms = Vec::with_capacity(n_samples);
        let mut entropy_terms = Vec::new();
        for i in 0..n_samples {
            let mut rng = key.stream(i as u64);
            let (out, elem) = self.sample_output(tape, g, self.cfg.mode, &mut rng)?;
            loss_terms.push(loss.on_tape(tape, out, target));
            if let Some(relaxed) = elem.relaxed {
                entropy_terms.push(entropy_regularizer(tape, relaxed));
            }
        }
        let mut total = loss_terms[0];
        for &t in &loss_terms[1..] {
            total = tape.add(total, t);
        }
        let mut total = tape.scale(total, 1.0 / n_samples as f64);
        if !entropy_terms.is_empty() {
            let mut h = entropy_terms[0];
            for &t in &entropy_terms[1..] {
                h = tape.add(h, t);
            }
            let h = tape.scale(h, self.cfg.entropy_strength / entropy_terms.len() as f64);
            total = tape.add(total, h);
        }
        Ok(total)
    }
}

fn collect_estimate(results: Vec<Result<(Tensor, usize)>>) -> Result<Estimate> {
    let mut per_sample = Vec::with_capacity(results.len());
    let mut ties = 0;
    for r in results {
        let (t, w) = r?;
        ties += w;
        per_sample.push(t);
    }
    let mean = mean_tensors(&per_sample);
    Ok(Estimate { mean, per_sample, tie_warnings: ties })
}

/// Mean over tensors in index order.
pub fn mean_tensors(samples: &[Tensor]) -> Tensor {
    assert!(!samples.is_empty());
    let mut acc = Tensor::zeros(samples[0].shape().to_vec());
    for s in samples {
        for (a, v) in acc.data_mut().iter_mut().zip(s.data()) {
            *a += v;
        }
    }
    let n = samples.len() as f64;
    for a in acc.data_mut() {
        *a /= n;
    }
    acc
}

/// Mean over output coordinates of the unbiased sample variance.
///
/// Errors with fewer than 2 samples.
pub fn output_variance(per_sample: &[Tensor]) -> Result<f64> {
    if per_sample.len() < 2 {
        return Err(Error::contract("output_variance needs at least 2 samples"));
    }
    let mean = mean_tensors(per_sample);
    let n = per_sample.len() as f64;
    let dims = mean.numel() as f64;
    let mut acc = 0.0;
    for s in per_sample {
        for (v, m) in s.data().iter().zip(mean.data()) {
            acc += (v - m) * (v - m);
        }
    }
    Ok(acc / (n - 1.0) / dims)
}

// ── Point-cloud task model ──────────────────────────────────────────────

/// The token-transformer base for particle states: pairwise charge products
/// and squared distances fill two `n x n` channels, positions and velocities
/// sit on the diagonals of six more, and the flattened grid becomes `n^2`
/// tokens.
pub struct PointBase {
    pub tf: Transformer,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_h1: ParamId,
    pub b_h1: ParamId,
    pub w_h2: ParamId,
    pub b_h2: ParamId,
    pub n_points: usize,
}

impl PointBase {
    pub fn init(
        n_points: usize,
        hidden: usize,
        layers: usize,
        heads: usize,
        ff_mult: usize,
        prefix: &str,
        store: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Self {
        let tf = Transformer::init(
            TransformerConfig {
                layers,
                hidden,
                heads,
                ff_mult,
                token_count: n_points * n_points,
                token_dim: 8,
            },
            &format!("{prefix}.tf"),
            store,
            rng,
        );
        PointBase {
            tf,
            w_in: store.add(
                format!("{prefix}.w_in"),
                Tensor::randn([8, hidden], (1.0 / 8.0f64).sqrt(), rng),
            ),
            b_in: store.add(format!("{prefix}.b_in"), Tensor::zeros([hidden])),
            w_h1: store.add(
                format!("{prefix}.head.w1"),
                Tensor::randn([hidden, hidden], (1.0 / hidden as f64).sqrt(), rng),
            ),
            b_h1: store.add(format!("{prefix}.head.b1"), Tensor::zeros([hidden])),
            w_h2: store.add(
                format!("{prefix}.head.w2"),
                Tensor::randn([hidden, 3], (1.0 / hidden as f64).sqrt(), rng),
            ),
            b_h2: store.add(format!("{prefix}.head.b2"), Tensor::zeros([3])),
            n_points,
        }
    }

    /// Raw 8-channel tokens from a (transformed) state on the tape.
    fn build_tokens(&self, tape: &mut Tape, x: Var, v: Var, c: Var) -> Var {
        let n = self.n_points;
        let ct = tape.transpose(c);
        let charge_products = tape.matmul(c, ct); // [n,n]
        let xt = tape.transpose(x);
        let gram = tape.matmul(x, xt);
        let eye = tape.input(Tensor::eye(n));
        let gram_diag = tape.mul(gram, eye);
        let ones = tape.input(Tensor::ones([n, 1]));
        let diag_col = tape.matmul(gram_diag, ones); // [n,1]
        let diag_row = tape.transpose(diag_col);
        let sums = tape.add(diag_col, diag_row); // [n,n] via outer broadcast
        let twice = tape.scale(gram, 2.0);
        let sq_dist = tape.sub(sums, twice);

        let mut channels = Vec::with_capacity(8);
        channels.push(tape.reshape(charge_products, [n * n, 1]));
        channels.push(tape.reshape(sq_dist, [n * n, 1]));
        for k in 0..3 {
            let col = slice_cols(tape, x, &[k]);
            let diag = tape.mul(eye, col);
            channels.push(tape.reshape(diag, [n * n, 1]));
        }
        for k in 0..3 {
            let col = slice_cols(tape, v, &[k]);
            let diag = tape.mul(eye, col);
            channels.push(tape.reshape(diag, [n * n, 1]));
        }
        tape.concat(1, &channels) // [n^2, 8]
    }

    /// Full base pass: tokens, encoder, head, diagonal readout `[n, 3]`.
    pub fn forward(&self, store: &ParamSet, tape: &mut Tape, x: Var, v: Var, c: Var) -> Var {
        let n = self.n_points;
        let raw = self.build_tokens(tape, x, v, c);
        let w_in = tape.param(self.w_in);
        let b_in = tape.param(self.b_in);
        let proj = tape.matmul(raw, w_in);
        let tokens = tape.add(proj, b_in);
        let enc = self.tf.forward(store, tape, tokens);
        let w1 = tape.param(self.w_h1);
        let b1 = tape.param(self.b_h1);
        let h = tape.matmul(enc, w1);
        let h = tape.add(h, b1);
        let h = tape.gelu(h);
        let w2 = tape.param(self.w_h2);
        let b2 = tape.param(self.b_h2);
        let out = tape.matmul(h, w2);
        let out = tape.add(out, b2); // [n^2, 3]
        let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
        tape.gather_rows(out, &diag) // [n, 3]
    }
}

/// Transformer base wrapped with the joint permutation-rotation sampler;
/// translations are handled by centering outside the sampled group.
pub struct PointSymmetrized {
    pub store: ParamSet,
    pub base: PointBase,
    pub sampler: ProductSampler,
    pub cfg: SymmetrizationConfig,
    pub n_points: usize,
}

impl PointSymmetrized {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_points: usize,
        hidden: usize,
        layers: usize,
        heads: usize,
        ff_mult: usize,
        special: bool,
        cfg: SymmetrizationConfig,
        seed: u64,
    ) -> Self {
        let cfg = cfg.normalized();
        let mut store = ParamSet::new();
        let mut rng = crate::rng::substream(seed, Lane::Init, 1);
        let base = PointBase::init(n_points, hidden, layers, heads, ff_mult, "base", &mut store, &mut rng);
        let sampler = ProductSampler::init(
            crate::backbones::VnConfig::default(),
            cfg.noise,
            special,
            cfg.tau,
            "dist",
            &mut store,
            &mut rng,
        );
        PointSymmetrized { store, base, sampler, cfg, n_points }
    }

    fn check_input(&self, s: &PointCloudState) -> Result<()> {
        if s.n_points() != self.n_points || s.dim() != 3 {
            return Err(Error::contract(format!(
                "state ({}, {}) does not match model ({}, 3)",
                s.n_points(),
                s.dim(),
                self.n_points
            )));
        }
        Ok(())
    }

    /// One sample on a centered state: inverse-transform, base forward,
    /// forward-transform. Output stays in centered coordinates.
    pub fn sample_output(
        &self,
        tape: &mut Tape,
        centered: &PointCloudState,
        mode: DistributionMode,
        rng: &mut impl Rng,
    ) -> Result<(Var, SampledElement)> {
        let elem = self.sampler.sample(&self.store, tape, centered, mode, rng)?;
        let out = self.transform_and_forward(tape, centered, &elem);
        Ok((out, elem))
    }

    pub fn sample_output_with_noise(
        &self,
        tape: &mut Tape,
        centered: &PointCloudState,
        eps_pos: &Tensor,
        eps_vel: &Tensor,
    ) -> Result<(Var, SampledElement)> {
        let elem = self
            .sampler
            .sample_with_noise(&self.store, tape, centered, eps_pos, eps_vel, None)?;
        let out = self.transform_and_forward(tape, centered, &elem);
        Ok((out, elem))
    }

    fn transform_and_forward(
        &self,
        tape: &mut Tape,
        centered: &PointCloudState,
        elem: &SampledElement,
    ) -> Var {
        let n = self.n_points;
        let pv = elem.perm_var.expect("product sampler provides a permutation");
        let qv = elem.rot_var.expect("product sampler provides a rotation");
        let pt = tape.transpose(pv);
        let x = tape.input(centered.positions.clone());
        let v = tape.input(centered.velocities.clone());
        let c = tape.input(centered.charges.clone().reshaped([n, 1]));
        // Inverse action of (P, Q) on row-point data: Pᵀ · X · Q.
        let px = tape.matmul(pt, x);
        let x_t = tape.matmul(px, qv);
        let pvel = tape.matmul(pt, v);
        let v_t = tape.matmul(pvel, qv);
        let c_t = tape.matmul(pt, c);
        let out = self.base.forward(&self.store, tape, x_t, v_t, c_t);
        // Forward action on the output rows: P · Y · Qᵀ.
        let qt = tape.transpose(qv);
        let oq = tape.matmul(out, qt);
        tape.matmul(pv, oq)
    }

    /// Monte-Carlo estimate of the symmetrized prediction in original
    /// coordinates: center, symmetrize, add the centroid back. Returns the
    /// predicted positions and the per-sample centered outputs.
    pub fn estimate_euclidean(
        &self,
        s: &PointCloudState,
        n_samples: usize,
        key: SampleKey,
    ) -> Result<Estimate> {
        self.check_input(s)?;
        let n_samples = if self.cfg.mode == DistributionMode::Canonical { 1 } else { n_samples };
        let (centered_pos, centroid) = center(&s.positions);
        let centered = PointCloudState {
            positions: centered_pos,
            velocities: s.velocities.clone(),
            charges: s.charges.clone(),
        };
        let results: Vec<Result<(Tensor, usize)>> = map_indexed(n_samples, |i| {
            let mut rng = key.stream(i as u64);
            let mut tape = Tape::no_grad(&self.store);
            let (out, elem) = self.sample_output(&mut tape, &centered, self.cfg.mode, &mut rng)?;
            Ok((tape.value(out).clone(), elem.tie_warnings))
        });
        let mut est = collect_estimate(results)?;
        for i in 0..self.n_points {
            for k in 0..3 {
                est.mean.data_mut()[i * 3 + k] += centroid[k];
            }
        }
        Ok(est)
    }

    /// Surrogate training loss against centered targets on one tape.
    pub fn training_loss(
        &self,
        tape: &mut Tape,
        s: &PointCloudState,
        target_positions: &Tensor,
        loss: TaskLoss,
        n_samples: usize,
        key: SampleKey,
    ) -> Result<Var> {
        self.check_input(s)?;
        let n_samples = if self.cfg.mode == DistributionMode::Canonical { 1 } else { n_samples };
        let (centered_pos, centroid) = center(&s.positions);
        let centered = PointCloudState {
            positions: centered_pos,
            velocities: s.velocities.clone(),
            charges: s.charges.clone(),
        };
        let mut target_centered = target_positions.clone();
        for i in 0..self.n_points {
            for k in 0..3 {
                target_centered.data_mut()[i * 3 + k] -= centroid[k];
            }
        }
        let mut loss_terms = Vec::with_capacity(n_samples);
        let mut entropy_terms = Vec::new();
        for i in 0..n_samples {
            let mut rng = key.stream(i as u64);
            let (out, elem) = self.sample_output(tape, &centered, self.cfg.mode, &mut rng)?;
            loss_terms.push(loss.on_tape(tape, out, &target_centered));
            if let Some(relaxed) = elem.relaxed {
                entropy_terms.push(entropy_regularizer(tape, relaxed));
            }
        }
        let mut total = loss_terms[0];
        for &t in &loss_terms[1..] {
            total = tape.add(total, t);
        }
        let mut total = tape.scale(total, 1.0 / n_samples as f64);
        if !entropy_terms.is_empty() {
            let mut h = entropy_terms[0];
            for &t in &entropy_terms[1..] {
                h = tape.add(h, t);
            }
            let h = tape.scale(h, self.cfg.entropy_strength / entropy_terms.len() as f64);
            total = tape.add(total, h);
        }
        Ok(total)
    }
}

// ── Parallel training step ──────────────────────────────────────────────

/// Per-batch training diagnostics for the surrogate objective.
#[derive(Clone, Debug)]
pub struct BatchStats {
    /// Mean per-sample task loss (the surrogate, without the entropy term).
    pub surrogate_loss: f64,
    /// Task loss evaluated on the sample-averaged output.
    pub loss_of_mean: f64,
    /// Mean entropy regularizer value (zero when no relaxation exists).
    pub entropy: f64,
    /// Total tie warnings across samples.
    pub tie_warnings: usize,
}

/// One (input, sample) work item result.
struct WorkResult {
    loss: f64,
    entropy: f64,
    output: Tensor,
    ties: usize,
    grads: Option<Gradients>,
}

/// Shared driver: evaluate every (batch element, sample) pair on its own
/// tape in parallel, reduce gradients and diagnostics in index order, and
/// accumulate into the store. Returns per-element batch stats.
pub fn graph_training_step(
    model: &mut GraphSymmetrized,
    batch: &[(&Graph, Tensor)],
    loss: TaskLoss,
    key_of: impl Fn(usize) -> SampleKey + Sync + Send,
) -> Result<Vec<BatchStats>> {
    let n_samples = if model.cfg.mode == DistributionMode::Canonical {
        1
    } else {
        model.cfg.train_samples
    };
    let total = batch.len() * n_samples;
    let cfg = model.cfg;
    let store = &model.store;
    let results: Vec<Result<WorkResult>> = map_indexed(total, |w| {
        let (b, i) = (w / n_samples, w % n_samples);
        let (g, target) = &batch[b];
        let mut rng = key_of(b).stream(i as u64);
        let mut tape = Tape::new(store);
        let (out, elem) = model.sample_output(&mut tape, g, cfg.mode, &mut rng)?;
        let task_loss = loss.on_tape(&mut tape, out, target);
        let (entropy_val, full_loss) = match elem.relaxed {
            Some(relaxed) => {
                let h = entropy_regularizer(&mut tape, relaxed);
                let hv = tape.value(h).item();
                let scaled = tape.scale(h, cfg.entropy_strength);
                (hv, tape.add(task_loss, scaled))
            }
            None => (0.0, task_loss),
        };
        let loss_val = tape.value(task_loss).item();
        if !loss_val.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss in batch element {b}")));
        }
        let grads = Some(tape.backward(full_loss));
        Ok(WorkResult {
            loss: loss_val,
            entropy: entropy_val,
            output: tape.value(out).clone(),
            ties: elem.tie_warnings,
            grads,
        })
    });

    reduce_training_results(&mut model.store, results, batch.len(), n_samples, |b| {
        let (_, target) = &batch[b];
        (loss, target.clone())
    })
}

/// Point-cloud counterpart of [`graph_training_step`]; targets are final
/// positions in original coordinates.
pub fn point_training_step(
    model: &mut PointSymmetrized,
    batch: &[(&PointCloudState, Tensor)],
    loss: TaskLoss,
    key_of: impl Fn(usize) -> SampleKey + Sync + Send,
) -> Result<Vec<BatchStats>> {
    let n_samples = if model.cfg.mode == DistributionMode::Canonical {
        1
    } else {
        model.cfg.train_samples
    };
    let n_points = model.n_points;
    // Pre-center each element once.
    let prepared: Vec<(PointCloudState, Tensor)> = batch
        .iter()
        .map(|(s, target)| {
            let (cp, centroid) = center(&s.positions);
            let centered = PointCloudState {
                positions: cp,
                velocities: s.velocities.clone(),
                charges: s.charges.clone(),
            };
            let mut tc = target.clone();
            for i in 0..n_points {
                for k in 0..3 {
                    tc.data_mut()[i * 3 + k] -= centroid[k];
                }
            }
            (centered, tc)
        })
        .collect();

    let total = batch.len() * n_samples;
    let cfg = model.cfg;
    let store = &model.store;
    let results: Vec<Result<WorkResult>> = map_indexed(total, |w| {
        let (b, i) = (w / n_samples, w % n_samples);
        let (centered, target_centered) = &prepared[b];
        let mut rng = key_of(b).stream(i as u64);
        let mut tape = Tape::new(store);
        let (out, elem) = model.sample_output(&mut tape, centered, cfg.mode, &mut rng)?;
        let task_loss = loss.on_tape(&mut tape, out, target_centered);
        let (entropy_val, full_loss) = match elem.relaxed {
            Some(relaxed) => {
                let h = entropy_regularizer(&mut tape, relaxed);
                let hv = tape.value(h).item();
                let scaled = tape.scale(h, cfg.entropy_strength);
                (hv, tape.add(task_loss, scaled))
            }
            None => (0.0, task_loss),
        };
        let loss_val = tape.value(task_loss).item();
        if !loss_val.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss in batch element {b}")));
        }
        let grads = Some(tape.backward(full_loss));
        Ok(WorkResult {
            loss: loss_val,
            entropy: entropy_val,
            output: tape.value(out).clone(),
            ties: elem.tie_warnings,
            grads,
        })
    });

    let prepared_targets: Vec<Tensor> = prepared.iter().map(|(_, t)| t.clone()).collect();
    reduce_training_results(
        &mut model.store,
        results,
        batch.len(),
        n_samples,
        move |b| (loss, prepared_targets[b].clone()),
    )
}

fn reduce_training_results(
    store: &mut ParamSet,
    results: Vec<Result<WorkResult>>,
    batch_len: usize,
    n_samples: usize,
    loss_spec: impl Fn(usize) -> (TaskLoss, Tensor),
) -> Result<Vec<BatchStats>> {
    let scale = 1.0 / (batch_len * n_samples) as f64;
    let mut stats = Vec::with_capacity(batch_len);
    let mut work = Vec::with_capacity(results.len());
    for r in results {
        work.push(r?);
    }
    for (w_idx, item) in work.iter_mut().enumerate() {
        let _ = w_idx;
        if let Some(g) = item.grads.as_mut() {
            g.scale(scale);
            store.accumulate(g);
        }
    }
    for b in 0..batch_len {
        let chunk = &work[b * n_samples..(b + 1) * n_samples];
        let surrogate: f64 = chunk.iter().map(|w| w.loss).sum::<f64>() / n_samples as f64;
        let entropy: f64 = chunk.iter().map(|w| w.entropy).sum::<f64>() / n_samples as f64;
        let ties: usize = chunk.iter().map(|w| w.ties).sum();
        let outputs: Vec<Tensor> = chunk.iter().map(|w| w.output.clone()).collect();
        let mean_out = mean_tensors(&outputs);
        let (loss_kind, target) = loss_spec(b);
        let loss_of_mean = loss_kind.value(&mean_out, &target);
        stats.push(BatchStats { surrogate_loss: surrogate, loss_of_mean, entropy, tie_warnings: ties });
    }
    Ok(stats)
}
