//! Experiment runners: dataset assembly, training loops, and metric
//! emission. Every run is a deterministic function of its configuration and
//! seed; metrics stream through a sink as JSONL-ready records.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backbones::{Gin, GinConfig};
use crate::data;
use crate::distribution::{aggregated_entropy, DistributionMode, NoiseSpec};
use crate::error::{Error, Result};
use crate::groups::{Graph, PointCloudState, SINKHORN_ITERS};
use crate::optim::AdamState;
use crate::parallel::map_indexed;
use crate::rng::{substream, Lane};
use crate::symmetrize::{
    graph_training_step, output_variance, point_training_step, GraphSymmetrized, GraphTask,
    PointSymmetrized, SampleKey, SymmetrizationConfig, TaskLoss,
};
use crate::tape::{ParamSet, Tape};
use crate::tensor::Tensor;

// ── Configuration and records ───────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskName {
    Separate,
    ClassifyCsl,
    Nbody,
    Diagnose,
}

/// One JSONL metrics row.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExperimentRecord {
    pub step: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

pub type Sink<'a> = &'a mut dyn FnMut(&ExperimentRecord) -> Result<()>;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskName,
    pub mode: DistributionMode,
    pub epochs: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub tau: f64,
    pub eta: f64,
    pub out: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub graphs_file: Option<PathBuf>,
    /// Evaluate / log every this many epochs or steps.
    pub eval_every: usize,
    // Dataset knobs.
    pub csl_nodes: usize,
    pub csl_skips: Vec<usize>,
    pub csl_per_class: usize,
    pub separation_nodes: usize,
    pub nbody_count: usize,
    pub nbody_dt: f64,
    pub nbody_integration_steps: usize,
    // Model knobs.
    pub mlp_hidden: Vec<usize>,
    pub paper_scale: bool,
    pub gin_hidden: usize,
    pub tf_hidden: usize,
    pub tf_layers: usize,
    pub tf_heads: usize,
    pub tf_ff_mult: usize,
    /// Train the plain GIN baseline during classification runs.
    pub with_gin_baseline: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("train_samples", self.train_samples),
            ("eval_samples", self.eval_samples),
            ("eval_every", self.eval_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        if self.lr <= 0.0 || self.tau <= 0.0 || self.eta <= 0.0 {
            return Err(Error::contract("lr, tau, eta must be positive".to_string()));
        }
        Ok(())
    }

    /// Task defaults; hyperparameters mirror the training recipes the spec
    /// inherits (learning rate 1e-3, noise scale 1, temperature 0.01 for
    /// pure permutation tasks and 0.1 for the product-group task).
    pub fn for_task(task: TaskName, seed: u64) -> Self {
        let base = RunConfig {
            seed,
            task,
            mode: DistributionMode::LearnedPs,
            epochs: 150,
            steps: 600,
            batch_size: 100,
            lr: 1e-3,
            train_samples: 1,
            eval_samples: 10,
            tau: 0.01,
            eta: 1.0,
            out: None,
            cache: None,
            graphs_file: None,
            eval_every: 10,
            csl_nodes: 11,
            csl_skips: vec![2, 3],
            csl_per_class: 150,
            separation_nodes: 6,
            nbody_count: 500,
            nbody_dt: 1e-3,
            nbody_integration_steps: 500,
            mlp_hidden: vec![1024, 512, 1024],
            paper_scale: false,
            gin_hidden: 64,
            tf_hidden: 32,
            tf_layers: 4,
            tf_heads: 4,
            tf_ff_mult: 4,
            with_gin_baseline: true,
        };
        match task {
            TaskName::Separate => RunConfig { eval_samples: 10, ..base },
            TaskName::ClassifyCsl | TaskName::Diagnose => base,
            TaskName::Nbody => RunConfig {
                tau: 0.1,
                train_samples: 20,
                eval_samples: 200,
                batch_size: 8,
                eval_every: 50,
                ..base
            },
        }
    }

    fn sym_config(&self) -> SymmetrizationConfig {
        let noise = match self.task {
            TaskName::Nbody => NoiseSpec::gaussian(self.eta),
            _ => NoiseSpec::uniform(self.eta),
        };
        SymmetrizationConfig {
            mode: self.mode,
            train_samples: self.train_samples,
            eval_samples: self.eval_samples,
            tau: self.tau,
            sinkhorn_iters: SINKHORN_ITERS,
            entropy_strength: 0.1,
            noise,
        }
        .normalized()
    }

    fn mlp_hidden_dims(&self) -> Vec<usize> {
        if self.paper_scale {
            vec![2048, 4096, 2048]
        } else {
            self.mlp_hidden.clone()
        }
    }
}

pub fn mode_tag(mode: DistributionMode) -> &'static str {
    match mode {
        DistributionMode::LearnedPs => "ps",
        DistributionMode::UniformGa => "ga",
        DistributionMode::Canonical => "canon",
    }
}

fn record(sink: Sink, seed: u64, step: u64, split: &str, metric: &str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Divergence(format!("non-finite metric {metric} at step {step}")));
    }
    sink(&ExperimentRecord {
        step,
        split: split.to_string(),
        metric: metric.to_string(),
        value,
        seed,
    })
}

// ── Graph separation ────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct SeparationOutcome {
    pub n_graphs: usize,
    /// Unseparated pair counts keyed by mode tag.
    pub unseparated: BTreeMap<String, usize>,
}

/// Separation threshold on embedding L-infinity distance.
pub const SEPARATION_TOLERANCE: f64 = 1e-3;

/// Embed every graph with an untrained symmetrized MLP (10-dim output) and
/// count pairs whose embeddings collide, for each sampling mode.
pub fn run_separation(cfg: &RunConfig, sink: Sink) -> Result<SeparationOutcome> {
    cfg.validate()?;
    let graphs = match &cfg.graphs_file {
        Some(path) => data::read_graph6_file(path)?,
        None => data::gen_all_graphs(cfg.separation_nodes)?,
    };
    if graphs.is_empty() {
        return Err(Error::contract("separation: empty graph corpus".to_string()));
    }
    let n = graphs[0].n;
    if graphs.iter().any(|g| g.n != n) {
        return Err(Error::contract("separation: graphs must share a node count".to_string()));
    }
    let mut outcome = SeparationOutcome { n_graphs: graphs.len(), unseparated: BTreeMap::new() };
    for mode in [
        DistributionMode::LearnedPs,
        DistributionMode::UniformGa,
        DistributionMode::Canonical,
    ] {
        let sym = cfg.sym_config().with_mode(mode);
        let model = GraphSymmetrized::new(
            n,
            1,
            &[128, 64],
            10,
            GraphTask::Invariant,
            sym,
            cfg.gin_hidden,
            cfg.seed,
        );
        let embeddings: Vec<Result<Tensor>> = map_indexed(graphs.len(), |i| {
            let key = SampleKey::new(cfg.seed, Lane::EvalNoise, i as u64);
            Ok(model.estimate(&graphs[i], cfg.eval_samples, key)?.mean)
        });
        let embeddings: Vec<Tensor> = embeddings.into_iter().collect::<Result<_>>()?;
        let mut collisions = 0usize;
        for a in 0..embeddings.len() {
            for b in a + 1..embeddings.len() {
                if embeddings[a].linf_distance(&embeddings[b]) < SEPARATION_TOLERANCE {
                    collisions += 1;
                }
            }
        }
        record(
            sink,
            cfg.seed,
            0,
            "test",
            &format!("unseparated_pairs_{}", mode_tag(mode)),
            collisions as f64,
        )?;
        outcome.unseparated.insert(mode_tag(mode).to_string(), collisions);
    }
    Ok(outcome)
}

// ── CSL classification ──────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ClassificationOutcome {
    pub final_test_accuracy: f64,
    pub epoch0_val_accuracy: f64,
    pub final_val_accuracy: f64,
    pub initial_entropy: f64,
    pub final_entropy: f64,
    /// Minimum of (surrogate - loss of mean) over all logged batches.
    pub min_jensen_gap: f64,
    pub variance_ps: f64,
    pub variance_ga: f64,
    pub gin_baseline_test_accuracy: Option<f64>,
}

fn accuracy(
    model: &GraphSymmetrized,
    split: &[(Graph, usize)],
    n_samples: usize,
    seed: u64,
    lane_offset: u64,
    mode: DistributionMode,
) -> Result<f64> {
    let hits: Vec<Result<bool>> = map_indexed(split.len(), |i| {
        let key = SampleKey::new(seed, Lane::EvalNoise, lane_offset + i as u64);
        let est = model.estimate_with_mode(&split[i].0, n_samples, key, mode)?;
        let logit = est.mean.data()[0];
        Ok((logit > 0.0) == (split[i].1 == 1))
    });
    let mut correct = 0usize;
    for h in hits {
        if h? {
            correct += 1;
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Mean aggregated permutation entropy over a probe set of inputs, sampling
/// `draws` permutations per input in the model's own mode.
fn entropy_probe(
    model: &GraphSymmetrized,
    probe: &[(Graph, usize)],
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let per_graph: Vec<Result<f64>> = map_indexed(probe.len(), |i| {
        let mut perms = Vec::with_capacity(draws);
        for d in 0..draws {
            let mut rng =
                SampleKey::new(seed, Lane::Diagnostics, i as u64).stream(d as u64);
            let mut tape = Tape::no_grad(&model.store);
            let elem =
                model
                    .sampler
                    .sample(&model.store, &mut tape, &probe[i].0, model.cfg.mode, &mut rng)?;
            perms.push(elem.perm().expect("permutation sampler").clone());
        }
        Ok(aggregated_entropy(&perms))
    });
    let mut total = 0.0;
    for v in per_graph {
        total += v?;
    }
    Ok(total / probe.len() as f64)
}

/// Mean output variance at a fixed sample budget over a split, under a
/// chosen sampling mode (the model's weights are untouched).
fn variance_probe(
    model: &GraphSymmetrized,
    split: &[(Graph, usize)],
    n_samples: usize,
    seed: u64,
    mode: DistributionMode,
) -> Result<f64> {
    let vars: Vec<Result<f64>> = map_indexed(split.len(), |i| {
        let key = SampleKey::new(seed, Lane::Diagnostics, 4096 + i as u64);
        let est = model.estimate_with_mode(&split[i].0, n_samples, key, mode)?;
        output_variance(&est.per_sample)
    });
    let mut total = 0.0;
    for v in vars {
        total += v?;
    }
    Ok(total / split.len() as f64)
}

/// Plain message-passing classifier used as the 1-WL control: GIN, mean
/// pooling, linear head. No symmetrization, no noise.
pub struct GinClassifier {
    pub store: ParamSet,
    gin: Gin,
    w_out: crate::tape::ParamId,
    b_out: crate::tape::ParamId,
}

impl GinClassifier {
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut store = ParamSet::new();
        let mut rng = substream(seed, Lane::Init, 9);
        let gin = Gin::init(
            GinConfig { in_dim: 1, hidden, layers: 3 },
            hidden,
            "gin",
            &mut store,
            &mut rng,
        );
        let w_out = store.add(
            "head.weight",
            Tensor::randn([hidden, 1], (1.0 / hidden as f64).sqrt(), &mut rng),
        );
        let b_out = store.add("head.bias", Tensor::zeros([1]));
        GinClassifier { store, gin, w_out, b_out }
    }

    fn logit(&self, tape: &mut Tape, g: &Graph) -> crate::tape::Var {
        let h0 = tape.input(g.node_features.clone());
        let h = self.gin.forward(&self.store, tape, &g.adjacency, h0);
        let pool = tape.input(Tensor::full([1, g.n], 1.0 / g.n as f64));
        let pooled = tape.matmul(pool, h);
        let w = tape.param(self.w_out);
        let b = tape.param(self.b_out);
        let lin = tape.matmul(pooled, w);
        tape.add(lin, b)
    }

    pub fn accuracy(&self, split: &[(Graph, usize)]) -> f64 {
        let correct = split
            .iter()
            .filter(|(g, label)| {
                let mut tape = Tape::no_grad(&self.store);
                let l = self.logit(&mut tape, g);
                (tape.value(l).item() > 0.0) == (*label == 1)
            })
            .count();
        correct as f64 / split.len() as f64
    }

    pub fn train_epoch(&mut self, batchset: &[(Graph, usize)], adam: &mut AdamState) -> Result<f64> {
        let mut total = 0.0;
        for chunk in batchset.chunks(100) {
            let store = &self.store;
            let grads_and_losses: Vec<(f64, crate::tape::Gradients)> =
                map_indexed(chunk.len(), |i| {
                    let (g, label) = &chunk[i];
                    let mut tape = Tape::new(store);
                    let logit = self.logit(&mut tape, g);
                    let loss = TaskLoss::BinaryCrossEntropy.on_tape(
                        &mut tape,
                        logit,
                        &Tensor::scalar(*label as f64),
                    );
                    (tape.value(loss).item(), tape.backward(loss))
                });
            let scale = 1.0 / chunk.len() as f64;
            for (l, mut g) in grads_and_losses {
                total += l;
                g.scale(scale);
                self.store.accumulate(&g);
            }
            adam.step(&mut self.store)?;
            self.store.zero_grads();
        }
        Ok(total / batchset.len() as f64)
    }
}

/// Train a symmetrized MLP on the circulant classification task. Also
/// trains the plain GIN control when configured, and logs the diagnostics
/// the downstream checks consume (aggregated entropy, variance at the
/// 10-sample budget under both the learned and uniform distributions, and
/// the surrogate/loss-of-mean gap).
pub fn run_classification(cfg: &RunConfig, sink: Sink) -> Result<ClassificationOutcome> {
    cfg.validate()?;
    let ds = data::gen_csl_dataset(cfg.csl_nodes, &cfg.csl_skips, cfg.csl_per_class, cfg.seed)?;
    let sym = cfg.sym_config();
    let mut model = GraphSymmetrized::new(
        ds.n_nodes,
        1,
        &cfg.mlp_hidden_dims(),
        1,
        GraphTask::Invariant,
        sym,
        cfg.gin_hidden,
        cfg.seed,
    );
    let mut adam = AdamState::new(&model.store, cfg.lr);
    let warmup_epochs = (cfg.epochs / 10).max(1);

    let entropy_probe_set: Vec<(Graph, usize)> =
        ds.val.iter().take(8).cloned().collect();
    let epoch0_val_accuracy =
        accuracy(&model, &ds.val, cfg.eval_samples, cfg.seed, 1 << 20, cfg.mode)?;
    let initial_entropy = if cfg.mode == DistributionMode::LearnedPs {
        entropy_probe(&model, &entropy_probe_set, 50, cfg.seed)?
    } else {
        f64::NAN
    };
    record(sink, cfg.seed, 0, "val", "val_accuracy", epoch0_val_accuracy)?;
    if initial_entropy.is_finite() {
        record(sink, cfg.seed, 0, "val", "aggregated_entropy", initial_entropy)?;
    }

    let mut min_jensen_gap = f64::INFINITY;
    let mut final_entropy = initial_entropy;
    let mut final_val_accuracy = epoch0_val_accuracy;
    let mut shuffle_rng = substream(cfg.seed, Lane::Shuffle, 1);
    let mut order: Vec<usize> = (0..ds.train.len()).collect();

    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr * ((epoch + 1) as f64 / warmup_epochs as f64).min(1.0);
        use rand::Rng;
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&Graph, Tensor)> = chunk
                .iter()
                .map(|&i| (&ds.train[i].0, Tensor::scalar(ds.train[i].1 as f64)))
                .collect();
            let base_key = ((epoch as u64) << 20) | ((batch_no as u64) << 10);
            let stats = graph_training_step(
                &mut model,
                &batch,
                TaskLoss::BinaryCrossEntropy,
                |b| SampleKey::new(cfg.seed, Lane::TrainNoise, base_key + b as u64),
            )?;
            for s in &stats {
                epoch_loss += s.surrogate_loss;
                min_jensen_gap = min_jensen_gap.min(s.surrogate_loss - s.loss_of_mean);
            }
            seen += stats.len();
            model.store.clip_grad_norm(0.1);
            adam.step(&mut model.store)?;
            model.store.zero_grads();
        }
        let epoch_loss = epoch_loss / seen as f64;
        if !epoch_loss.is_finite() {
            record(sink, cfg.seed, epoch as u64 + 1, "train", "divergence", 1.0).ok();
            return Err(Error::Divergence(format!("classification loss diverged at epoch {epoch}")));
        }

        let last = epoch + 1 == cfg.epochs;
        if (epoch + 1) % cfg.eval_every == 0 || last {
            let step = epoch as u64 + 1;
            record(sink, cfg.seed, step, "train", "train_surrogate_loss", epoch_loss)?;
            record(sink, cfg.seed, step, "train", "jensen_gap_min", min_jensen_gap)?;
            final_val_accuracy =
                accuracy(&model, &ds.val, cfg.eval_samples, cfg.seed, 1 << 20, cfg.mode)?;
            record(sink, cfg.seed, step, "val", "val_accuracy", final_val_accuracy)?;
            if cfg.mode == DistributionMode::LearnedPs {
                final_entropy = entropy_probe(&model, &entropy_probe_set, 50, cfg.seed)?;
                record(sink, cfg.seed, step, "val", "aggregated_entropy", final_entropy)?;
            }
        }
    }

    let final_test_accuracy =
        accuracy(&model, &ds.test, cfg.eval_samples, cfg.seed, 1 << 21, cfg.mode)?;
    record(sink, cfg.seed, cfg.epochs as u64, "test", "test_accuracy", final_test_accuracy)?;

    // Variance ordering probes on the trained weights.
    let variance_ps = variance_probe(&model, &ds.val, 10, cfg.seed, DistributionMode::LearnedPs)?;
    let variance_ga = variance_probe(&model, &ds.val, 10, cfg.seed, DistributionMode::UniformGa)?;
    record(sink, cfg.seed, cfg.epochs as u64, "val", "output_variance_ps", variance_ps)?;
    record(sink, cfg.seed, cfg.epochs as u64, "val", "output_variance_ga", variance_ga)?;

    let gin_baseline_test_accuracy = if cfg.with_gin_baseline {
        let mut baseline = GinClassifier::new(cfg.gin_hidden, cfg.seed);
        let mut badam = AdamState::new(&baseline.store, cfg.lr);
        for _ in 0..cfg.epochs.min(50) {
            baseline.train_epoch(&ds.train, &mut badam)?;
        }
        let acc = baseline.accuracy(&ds.test);
        record(sink, cfg.seed, cfg.epochs as u64, "test", "gin_baseline_test_accuracy", acc)?;
        Some(acc)
    } else {
        None
    };

    Ok(ClassificationOutcome {
        final_test_accuracy,
        epoch0_val_accuracy,
        final_val_accuracy,
        initial_entropy,
        final_entropy,
        min_jensen_gap,
        variance_ps,
        variance_ga,
        gin_baseline_test_accuracy,
    })
}

// ── n-body regression ───────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct NbodyOutcome {
    pub initial_train_mse: f64,
    pub final_train_mse: f64,
    pub final_val_mse: f64,
    pub min_jensen_gap: f64,
    pub steps_run: usize,
}

fn nbody_dataset(cfg: &RunConfig) -> Result<Vec<data::NbodySample>> {
    if let Some(cache) = &cfg.cache {
        let bin = cache.with_extension("bin");
        let man = cache.with_extension("json");
        if bin.exists() && man.exists() {
            return nbody_from_cache(&bin, &man);
        }
        let samples = data::gen_nbody(
            5,
            cfg.nbody_dt,
            cfg.nbody_integration_steps,
            cfg.nbody_count,
            cfg.seed,
        );
        nbody_to_cache(&samples, &bin, &man)?;
        return Ok(samples);
    }
    Ok(data::gen_nbody(5, cfg.nbody_dt, cfg.nbody_integration_steps, cfg.nbody_count, cfg.seed))
}

fn nbody_to_cache(
    samples: &[data::NbodySample],
    bin: &std::path::Path,
    man: &std::path::Path,
) -> Result<()> {
    let mut records = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let pack = |name: &str, t: &Tensor| data::CacheRecord {
            name: format!("{i}.{name}"),
            payload: data::CachePayload::F64s {
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            },
        };
        records.push(pack("positions", &s.initial.positions));
        records.push(pack("velocities", &s.initial.velocities));
        records.push(pack("charges", &s.initial.charges));
        records.push(pack("delta", &s.delta_positions));
    }
    data::write_container(bin, man, &records)
}

fn nbody_from_cache(bin: &std::path::Path, man: &std::path::Path) -> Result<Vec<data::NbodySample>> {
    let records = data::read_container(bin, man)?;
    if records.len() % 4 != 0 {
        return Err(Error::Malformed("nbody cache: record count not a multiple of 4".to_string()));
    }
    let tensor_of = |r: &data::CacheRecord| -> Result<Tensor> {
        match &r.payload {
            data::CachePayload::F64s { shape, data } => {
                Ok(Tensor::new(shape.clone(), data.clone()))
            }
            _ => Err(Error::Malformed(format!("nbody cache: {} is not f64", r.name))),
        }
    };
    let mut out = Vec::with_capacity(records.len() / 4);
    for chunk in records.chunks(4) {
        out.push(data::NbodySample {
            initial: PointCloudState {
                positions: tensor_of(&chunk[0])?,
                velocities: tensor_of(&chunk[1])?,
                charges: tensor_of(&chunk[2])?,
            },
            delta_positions: tensor_of(&chunk[3])?,
        });
    }
    Ok(out)
}

fn nbody_mse(
    model: &PointSymmetrized,
    subset: &[data::NbodySample],
    n_samples: usize,
    seed: u64,
    lane_offset: u64,
) -> Result<f64> {
    let losses: Vec<Result<f64>> = map_indexed(subset.len(), |i| {
        let key = SampleKey::new(seed, Lane::EvalNoise, lane_offset + i as u64);
        let est = model.estimate_euclidean(&subset[i].initial, n_samples, key)?;
        let target = subset[i].target_positions();
        Ok(TaskLoss::Mse.value(&est.mean, &target))
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / subset.len() as f64)
}

/// Train the product-group symmetrized transformer to predict particle
/// positions after the integration horizon.
pub fn run_nbody(cfg: &RunConfig, sink: Sink) -> Result<NbodyOutcome> {
    cfg.validate()?;
    let samples = nbody_dataset(cfg)?;
    let n_train = samples.len() * 8 / 10;
    let n_val = samples.len() / 10;
    let train = &samples[..n_train];
    let val = &samples[n_train..n_train + n_val];
    let sym = cfg.sym_config();
    let mut model = PointSymmetrized::new(
        5,
        cfg.tf_hidden,
        cfg.tf_layers,
        cfg.tf_heads,
        cfg.tf_ff_mult,
        false,
        sym,
        cfg.seed,
    );
    let mut adam = AdamState::new(&model.store, cfg.lr);

    let probe: Vec<data::NbodySample> = train.iter().take(32).cloned().collect();
    let probe_samples = cfg.train_samples.max(4);
    let initial_train_mse = nbody_mse(&model, &probe, probe_samples, cfg.seed, 1 << 20)?;
    record(sink, cfg.seed, 0, "train", "train_mse", initial_train_mse)?;

    let mut min_jensen_gap = f64::INFINITY;
    let mut final_train_mse = initial_train_mse;
    let mut shuffle_rng = substream(cfg.seed, Lane::Shuffle, 2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();

    for step in 0..cfg.steps {
        use rand::Rng;
        let mut batch_idx = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                for i in (1..order.len()).rev() {
                    let j = shuffle_rng.gen_range(0..=i);
                    order.swap(i, j);
                }
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let batch: Vec<(&PointCloudState, Tensor)> = batch_idx
            .iter()
            .map(|&i| (&train[i].initial, train[i].target_positions()))
            .collect();
        let base_key = (step as u64) << 16;
        let stats = point_training_step(&mut model, &batch, TaskLoss::Mse, |b| {
            SampleKey::new(cfg.seed, Lane::TrainNoise, base_key + b as u64)
        })?;
        let mut step_loss = 0.0;
        for s in &stats {
            step_loss += s.surrogate_loss;
            min_jensen_gap = min_jensen_gap.min(s.surrogate_loss - s.loss_of_mean);
        }
        step_loss /= stats.len() as f64;
        if !step_loss.is_finite() {
            record(sink, cfg.seed, step as u64, "train", "divergence", 1.0).ok();
            return Err(Error::Divergence(format!("nbody loss diverged at step {step}")));
        }
        adam.step(&mut model.store)?;
        model.store.zero_grads();

        let last = step + 1 == cfg.steps;
        if (step + 1) % cfg.eval_every == 0 || last {
            let s = step as u64 + 1;
            record(sink, cfg.seed, s, "train", "train_surrogate_mse", step_loss)?;
            record(sink, cfg.seed, s, "train", "jensen_gap_min", min_jensen_gap)?;
            final_train_mse = nbody_mse(&model, &probe, probe_samples, cfg.seed, 1 << 20)?;
            record(sink, cfg.seed, s, "train", "train_mse", final_train_mse)?;
        }
    }

    let final_val_mse = nbody_mse(&model, val, cfg.eval_samples, cfg.seed, 1 << 22)?;
    record(sink, cfg.seed, cfg.steps as u64, "val", "val_mse", final_val_mse)?;

    Ok(NbodyOutcome {
        initial_train_mse,
        final_train_mse,
        final_val_mse,
        min_jensen_gap,
        steps_run: cfg.steps,
    })
}

// ── Diagnostics run ─────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct DiagnoseOutcome {
    pub classification: ClassificationOutcome,
    /// Output variance at each probed sample budget, learned mode.
    pub variance_by_budget: Vec<(usize, f64)>,
}

/// Classification training plus the sample-budget variance sweep.
pub fn run_diagnose(cfg: &RunConfig, sink: Sink) -> Result<DiagnoseOutcome> {
    let classification = run_classification(cfg, sink)?;
    // Rebuild the dataset and an untrained model for the variance sweep; the
    // sweep illustrates the estimator, not the trained weights.
    let ds = data::gen_csl_dataset(cfg.csl_nodes, &cfg.csl_skips, cfg.csl_per_class, cfg.seed)?;
    let model = GraphSymmetrized::new(
        ds.n_nodes,
        1,
        &cfg.mlp_hidden_dims(),
        1,
        GraphTask::Invariant,
        cfg.sym_config(),
        cfg.gin_hidden,
        cfg.seed,
    );
    let mut variance_by_budget = Vec::new();
    for budget in [2usize, 5, 10, 20, 50] {
        let v = variance_probe(&model, &ds.val, budget, cfg.seed, cfg.mode)?;
        record(sink, cfg.seed, budget as u64, "val", "output_variance_by_budget", v)?;
        variance_by_budget.push((budget, v));
    }
    Ok(DiagnoseOutcome { classification, variance_by_budget })
}
