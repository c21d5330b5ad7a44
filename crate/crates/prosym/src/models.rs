//! Group-agnostic base functions: a flat-vector MLP and a token-sequence
//! transformer with tokenize/detokenize adapters, plus checkpoint I/O.
//!
//! These models are deliberately *not* equivariant; the positional encoding
//! and flattened inputs are what symmetrization wraps. The tokenizers follow
//! the patch-projection scheme: pack everything into a dense array, chunk it,
//! and linearly project each chunk to a token.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::he_init;
use crate::error::{Error, Result};
use crate::tape::{ParamId, ParamSet, Tape, Var};
use crate::tensor::Tensor;

// ── MLP ─────────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct MlpConfig {
    /// Input dim, hidden dims, output dim.
    pub layer_dims: Vec<usize>,
}

impl MlpConfig {
    pub fn new(layer_dims: Vec<usize>) -> Self {
        assert!(layer_dims.len() >= 2, "mlp needs at least input and output dims");
        assert!(layer_dims.iter().all(|&d| d > 0), "mlp dims must be positive");
        MlpConfig { layer_dims }
    }
}

/// Alternating affine + ReLU stack with a final affine layer.
pub struct Mlp {
    pub cfg: MlpConfig,
    pub layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    pub fn init(cfg: MlpConfig, prefix: &str, store: &mut ParamSet, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        for l in 0..cfg.layer_dims.len() - 1 {
            let (d_in, d_out) = (cfg.layer_dims[l], cfg.layer_dims[l + 1]);
            layers.push((
                store.add(format!("{prefix}.fc{l}.weight"), he_init([d_in, d_out], rng)),
                store.add(format!("{prefix}.fc{l}.bias"), Tensor::zeros([d_out])),
            ));
        }
        Mlp { cfg, layers }
    }

    /// `x` is a `[1, d_in]` row vector on the tape.
    pub fn forward(&self, _store: &ParamSet, tape: &mut Tape, x: Var) -> Var {
        assert_eq!(
            tape.value(x).shape(),
            &[1, self.cfg.layer_dims[0]],
            "mlp: input must be [1, {}]",
            self.cfg.layer_dims[0]
        );
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(w);
            let bv = tape.param(b);
            let lin = tape.matmul(h, wv);
            h = tape.add(lin, bv);
            if l != last {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn in_dim(&self) -> usize {
        self.cfg.layer_dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.cfg.layer_dims.last().unwrap()
    }
}

// ── Transformer ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TransformerConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub token_count: usize,
    pub token_dim: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 {
            return Err(Error::contract(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

struct Block {
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Pre-LN encoder stack with learned positional embedding added at entry.
/// Operates on `[token_count, hidden]` sequences; the positional encoding
/// makes it deliberately not permutation-equivariant.
pub struct Transformer {
    pub cfg: TransformerConfig,
    pub positional: ParamId,
    blocks: Vec<Block>,
}

impl Transformer {
    pub fn init(
        cfg: TransformerConfig,
        prefix: &str,
        store: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Self {
        cfg.validate().expect("invalid transformer config");
        let d = cfg.hidden;
        let ff = cfg.ff_mult * d;
        fn xavier(shape: [usize; 2], rng: &mut impl Rng) -> Tensor {
            Tensor::randn(shape.to_vec(), (1.0 / shape[0] as f64).sqrt(), rng)
        }
        let positional = store.add(
            format!("{prefix}.positional"),
            Tensor::randn([cfg.token_count, d], 0.02, rng),
        );
        let mut blocks = Vec::new();
        for l in 0..cfg.layers {
            let p = |s: &str| format!("{prefix}.block{l}.{s}");
            blocks.push(Block {
                ln1_gamma: store.add(p("ln1.gamma"), Tensor::ones([d])),
                ln1_beta: store.add(p("ln1.beta"), Tensor::zeros([d])),
                wq: store.add(p("attn.wq"), xavier([d, d], rng)),
                bq: store.add(p("attn.bq"), Tensor::zeros([d])),
                wk: store.add(p("attn.wk"), xavier([d, d], rng)),
                bk: store.add(p("attn.bk"), Tensor::zeros([d])),
                wv: store.add(p("attn.wv"), xavier([d, d], rng)),
                bv: store.add(p("attn.bv"), Tensor::zeros([d])),
                wo: store.add(p("attn.wo"), xavier([d, d], rng)),
                bo: store.add(p("attn.bo"), Tensor::zeros([d])),
                ln2_gamma: store.add(p("ln2.gamma"), Tensor::ones([d])),
                ln2_beta: store.add(p("ln2.beta"), Tensor::zeros([d])),
                w1: store.add(p("ff.w1"), xavier([d, ff], rng)),
                b1: store.add(p("ff.b1"), Tensor::zeros([ff])),
                w2: store.add(p("ff.w2"), xavier([ff, d], rng)),
                b2: store.add(p("ff.b2"), Tensor::zeros([d])),
            });
        }
        Transformer { cfg, positional, blocks }
    }

    /// Encoder pass on `[token_count, hidden]` tokens.
    pub fn forward(&self, _store: &ParamSet, tape: &mut Tape, tokens: Var) -> Var {
        let (m, d) = (self.cfg.token_count, self.cfg.hidden);
        assert_eq!(
            tape.value(tokens).shape(),
            &[m, d],
            "transformer: tokens must be [{m}, {d}]"
        );
        let pos = tape.param(self.positional);
        let mut h = tape.add(tokens, pos);
        let heads = self.cfg.heads;
        let dh = d / heads;
        for blk in &self.blocks {
            // Attention sub-block.
            let a_in = layer_norm(tape, h, blk.ln1_gamma, blk.ln1_beta);
            let q = affine(tape, a_in, blk.wq, blk.bq);
            let k = affine(tape, a_in, blk.wk, blk.bk);
            let v = affine(tape, a_in, blk.wv, blk.bv);
            let mut head_outs = Vec::with_capacity(heads);
            for hix in 0..heads {
                let cols: Vec<usize> = (hix * dh..(hix + 1) * dh).collect();
                let qh = slice_cols(tape, q, &cols);
                let kh = slice_cols(tape, k, &cols);
                let vh = slice_cols(tape, v, &cols);
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt);
                let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let att = tape.softmax_rows(scaled);
                head_outs.push(tape.matmul(att, vh));
            }
            let concat = tape.concat(1, &head_outs);
            let attn_out = affine(tape, concat, blk.wo, blk.bo);
            h = tape.add(h, attn_out);
            // Feedforward sub-block.
            let f_in = layer_norm(tape, h, blk.ln2_gamma, blk.ln2_beta);
            let f1 = affine(tape, f_in, blk.w1, blk.b1);
            let f1 = tape.gelu(f1);
            let f2 = affine(tape, f1, blk.w2, blk.b2);
            h = tape.add(h, f2);
        }
        h
    }
}

fn affine(tape: &mut Tape, x: Var, w: ParamId, b: ParamId) -> Var {
    let wv = tape.param(w);
    let bv = tape.param(b);
    let lin = tape.matmul(x, wv);
    tape.add(lin, bv)
}

fn layer_norm(tape: &mut Tape, x: Var, gamma: ParamId, beta: ParamId) -> Var {
    let n = tape.normalize_axis(x, 1, 1e-5);
    let g = tape.param(gamma);
    let b = tape.param(beta);
    let s = tape.mul(n, g);
    tape.add(s, b)
}

/// Column slice through the transpose-gather-transpose route so gradients
/// flow.
pub fn slice_cols(tape: &mut Tape, x: Var, cols: &[usize]) -> Var {
    let xt = tape.transpose(x);
    let g = tape.gather_rows(xt, cols);
    tape.transpose(g)
}

// ── Tokenizers ──────────────────────────────────────────────────────────

/// Patch tokenizer over square multi-channel arrays: pad to a multiple of
/// `patch`, split into `patch x patch` chunks, and linearly project each
/// flattened chunk. Detokenization applies a second linear map per token and
/// scatters chunks back onto the grid.
pub struct PatchTokenizer {
    pub patch: usize,
    pub channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl PatchTokenizer {
    pub fn init(
        patch: usize,
        channels: usize,
        hidden: usize,
        out_channels: usize,
        prefix: &str,
        store: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Self {
        let chunk = patch * patch * channels;
        let chunk_out = patch * patch * out_channels;
        PatchTokenizer {
            patch,
            channels,
            hidden,
            out_channels,
            w_in: store.add(
                format!("{prefix}.w_in"),
                Tensor::randn([chunk, hidden], (1.0 / chunk as f64).sqrt(), rng),
            ),
            b_in: store.add(format!("{prefix}.b_in"), Tensor::zeros([hidden])),
            w_out: store.add(
                format!("{prefix}.w_out"),
                Tensor::randn([hidden, chunk_out], (1.0 / hidden as f64).sqrt(), rng),
            ),
            b_out: store.add(format!("{prefix}.b_out"), Tensor::zeros([chunk_out])),
        }
    }

    pub fn token_count(&self, n: usize) -> usize {
        let padded = n.div_ceil(self.patch) * self.patch;
        (padded / self.patch) * (padded / self.patch)
    }

    /// Tokenize a stack of `channels` square `[n, n]` planes on the tape.
    ///
    /// Errors if the planes disagree in size.
    pub fn tokenize(&self, tape: &mut Tape, planes: &[Var]) -> Result<Var> {
        if planes.len() != self.channels {
            return Err(Error::contract(format!(
                "tokenize: {} planes for {} channels",
                planes.len(),
                self.channels
            )));
        }
        let n = tape.value(planes[0]).rows();
        for &p in planes {
            if tape.value(p).shape() != [n, n] {
                return Err(Error::contract("tokenize: planes must be square and equal"));
            }
        }
        let padded = n.div_ceil(self.patch) * self.patch;
        let grid = padded / self.patch;
        let chunk = self.patch * self.patch * self.channels;
        // Gather chunk entries: rows of the token matrix are built by a
        // constant selection matrix acting on the concatenated flat planes.
        let mut flat_planes = Vec::with_capacity(planes.len());
        for &p in planes {
            flat_planes.push(tape.reshape(p, [n * n, 1]));
        }
        let flat = tape.concat(0, &flat_planes); // [channels*n*n, 1]
        let mut select = Tensor::zeros([grid * grid * chunk, self.channels * n * n]);
        for ti in 0..grid {
            for tj in 0..grid {
                let token = ti * grid + tj;
                let mut slot = 0;
                for c in 0..self.channels {
                    for pi in 0..self.patch {
                        for pj in 0..self.patch {
                            let (i, j) = (ti * self.patch + pi, tj * self.patch + pj);
                            if i < n && j < n {
                                let src = c * n * n + i * n + j;
                                select.data_mut()
                                    [(token * chunk + slot) * self.channels * n * n + src] = 1.0;
                            }
                            slot += 1;
                        }
                    }
                }
            }
        }
        let sel = tape.input(select);
        let gathered = tape.matmul(sel, flat); // [tokens*chunk, 1]
        let chunks = tape.reshape(gathered, [grid * grid, chunk]);
        let w = tape.param(self.w_in);
        let b = tape.param(self.b_in);
        let proj = tape.matmul(chunks, w);
        Ok(tape.add(proj, b))
    }

    /// Invert the chunking: tokens back to `out_channels` planes of `[n, n]`,
    /// returned as diagonal node rows `[n, out_channels]`.
    pub fn detokenize_nodes(&self, tape: &mut Tape, tokens: Var, n: usize) -> Var {
        let planes = self.detokenize_planes(tape, tokens, n);
        // Diagonal extraction per channel.
        let mut cols = Vec::with_capacity(self.out_channels);
        for p in planes {
            let eye = tape.input(Tensor::eye(n));
            let masked = tape.mul(p, eye);
            let ones = tape.input(Tensor::ones([n, 1]));
            cols.push(tape.matmul(masked, ones)); // [n,1] diagonal
        }
        tape.concat(1, &cols)
    }

    /// Tokens back to full `[n, n]` planes (one per output channel).
    pub fn detokenize_planes(&self, tape: &mut Tape, tokens: Var, n: usize) -> Vec<Var> {
        let padded = n.div_ceil(self.patch) * self.patch;
        let grid = padded / self.patch;
        assert_eq!(
            tape.value(tokens).rows(),
            grid * grid,
            "detokenize: token count mismatch"
        );
        let chunk_out = self.patch * self.patch * self.out_channels;
        let w = tape.param(self.w_out);
        let b = tape.param(self.b_out);
        let proj = tape.matmul(tokens, w);
        let chunks = tape.add(proj, b); // [tokens, chunk_out]
        let flat = tape.reshape(chunks, [grid * grid * chunk_out, 1]);
        // Scatter back: transpose of a selection matrix.
        let mut scatter = Tensor::zeros([self.out_channels * n * n, grid * grid * chunk_out]);
        for ti in 0..grid {
            for tj in 0..grid {
                let token = ti * grid + tj;
                let mut slot = 0;
                for c in 0..self.out_channels {
                    for pi in 0..self.patch {
                        for pj in 0..self.patch {
                            let (i, j) = (ti * self.patch + pi, tj * self.patch + pj);
                            if i < n && j < n {
                                let dst = c * n * n + i * n + j;
                                scatter.data_mut()
                                    [dst * grid * grid * chunk_out + token * chunk_out + slot] = 1.0;
                            }
                            slot += 1;
                        }
                    }
                }
            }
        }
        let sc = tape.input(scatter);
        let planes_flat = tape.matmul(sc, flat); // [out_channels*n*n, 1]
        let all = tape.reshape(planes_flat, [self.out_channels, n * n]);
        (0..self.out_channels)
            .map(|c| {
                let row = tape.gather_rows(all, &[c]);
                tape.reshape(row, [n, n])
            })
            .collect()
    }
}

// ── Checkpoints ─────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Write all parameters as little-endian f64 with a JSON manifest of
/// `(name, shape, byte offset)` triples.
pub fn save_checkpoint(params: &ParamSet, bin_path: &Path, manifest_path: &Path) -> Result<()> {
    let mut bin = std::io::BufWriter::new(std::fs::File::create(bin_path)?);
    let mut manifest = Vec::new();
    let mut offset = 0u64;
    for (_, p) in params.iter() {
        manifest.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        for v in p.value.data() {
            bin.write_all(&v.to_le_bytes())?;
        }
        offset += 8 * p.value.numel() as u64;
    }
    bin.flush()?;
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(manifest_path, json)?;
    Ok(())
}

/// Load a checkpoint saved by [`save_checkpoint`] into a parameter set with
/// matching names and shapes.
pub fn load_checkpoint(params: &mut ParamSet, bin_path: &Path, manifest_path: &Path) -> Result<()> {
    let manifest: Vec<ManifestEntry> = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let mut bin = Vec::new();
    std::fs::File::open(bin_path)?.read_to_end(&mut bin)?;
    for entry in &manifest {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 8 * numel;
        if end > bin.len() {
            return Err(Error::Malformed(format!(
                "checkpoint: {} overruns binary ({} > {})",
                entry.name,
                end,
                bin.len()
            )));
        }
        let data: Vec<f64> = bin[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let found = params.iter().find(|(_, p)| p.name == entry.name).map(|(id, _)| id);
        let Some(id) = found else {
            return Err(Error::Malformed(format!("checkpoint: unknown parameter {}", entry.name)));
        };
        let p = params.get_mut(id);
        if p.value.shape() != entry.shape.as_slice() {
            return Err(Error::Malformed(format!(
                "checkpoint: {} shape {:?} vs stored {:?}",
                entry.name,
                p.value.shape(),
                entry.shape
            )));
        }
        p.value = Tensor::new(entry.shape.clone(), data);
    }
    Ok(())
}
