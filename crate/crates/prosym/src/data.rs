//! Dataset generation and on-disk formats: exhaustive small-graph
//! enumeration, circulant skip-link classification data, charged-particle
//! trajectories, the graph6 codec, and a length-prefixed binary cache.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::{uniform_permutation, Graph, PointCloudState};
use crate::rng::{substream, Lane};
use crate::tensor::Tensor;
use crate::testkit;

// ── Exhaustive non-isomorphic connected graphs ──────────────────────────

fn pair_index(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((i, j));
        }
    }
    pairs
}

fn mask_to_graph(n: usize, pairs: &[(usize, usize)], mask: u32) -> Graph {
    let edges: Vec<(usize, usize)> = pairs
        .iter()
        .enumerate()
        .filter(|(k, _)| mask >> k & 1 == 1)
        .map(|(_, &p)| p)
        .collect();
    Graph::from_edges(n, &edges).expect("valid edge list")
}

fn is_connected_mask(n: usize, pairs: &[(usize, usize)], mask: u32) -> bool {
    let mut adj = vec![Vec::new(); n];
    for (k, &(i, j)) in pairs.iter().enumerate() {
        if mask >> k & 1 == 1 {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(v) = stack.pop() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                count += 1;
                stack.push(w);
            }
        }
    }
    count == n
}

fn relabel_mask(n: usize, pairs: &[(usize, usize)], mask: u32, perm: &[usize]) -> u32 {
    let mut index = vec![vec![0usize; n]; n];
    for (k, &(i, j)) in pairs.iter().enumerate() {
        index[i][j] = k;
        index[j][i] = k;
    }
    let mut out = 0u32;
    for (k, &(i, j)) in pairs.iter().enumerate() {
        if mask >> k & 1 == 1 {
            let (pi, pj) = (perm[i], perm[j]);
            out |= 1 << index[pi][pj];
        }
    }
    out
}

/// Every connected graph on `n` nodes up to isomorphism, deduplicated by the
/// minimum adjacency bit-string over all relabelings. Refuses `n > 6`.
pub fn gen_all_graphs(n: usize) -> Result<Vec<Graph>> {
    if n > 6 {
        return Err(Error::Refused(format!(
            "gen_all_graphs: n={n} exceeds cap 6 (enumeration blow-up)"
        )));
    }
    if n == 0 {
        return Err(Error::contract("gen_all_graphs: n must be >= 1"));
    }
    let pairs = pair_index(n);
    let perms: Vec<Vec<usize>> = testkit::permutations(n);
    let total = 1u64 << pairs.len();
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for mask in 0..total {
        let mask = mask as u32;
        if seen.contains(&mask) || !is_connected_mask(n, &pairs, mask) {
            continue;
        }
        // New isomorphism class: blanket all relabelings.
        let mut canonical = mask;
        for perm in &perms {
            let m = relabel_mask(n, &pairs, mask, perm);
            canonical = canonical.min(m);
            seen.insert(m);
        }
        out.push(mask_to_graph(n, &pairs, canonical));
    }
    Ok(out)
}

// ── Circulant skip-link classification data ─────────────────────────────

/// Circulant graph on `n` nodes with ring links and one skip link family.
pub fn circulant_graph(n: usize, skip: usize) -> Result<Graph> {
    if n < 5 || skip < 2 || skip > (n - 1) / 2 {
        return Err(Error::contract(format!(
            "circulant: need n >= 5 and 2 <= skip <= (n-1)/2, got n={n} skip={skip}"
        )));
    }
    let mut edges = Vec::new();
    for i in 0..n {
        edges.push((i.min((i + 1) % n), i.max((i + 1) % n)));
        let j = (i + skip) % n;
        edges.push((i.min(j), i.max(j)));
    }
    edges.sort();
    edges.dedup();
    Graph::from_edges(n, &edges)
}

#[derive(Clone)]
pub struct CslDataset {
    pub train: Vec<(Graph, usize)>,
    pub val: Vec<(Graph, usize)>,
    pub test: Vec<(Graph, usize)>,
    pub n_nodes: usize,
    pub num_classes: usize,
}

/// Labeled dataset of 1-WL-equivalent, non-isomorphic circulant graphs:
/// class `k` holds uniformly random relabelings of the skip-`skips[k]`
/// circulant. Splits are 80/10/10, class-balanced by construction.
///
/// The generator asserts what makes the dataset meaningful: every class is
/// 4-regular, all classes are pairwise 1-WL-equivalent, and pairwise
/// non-isomorphic (checked by brute force directly when `n <= 8`, otherwise
/// on the largest valid instance with the same skips below that cap).
pub fn gen_csl_dataset(
    n: usize,
    skips: &[usize],
    per_class: usize,
    seed: u64,
) -> Result<CslDataset> {
    if n < 8 {
        return Err(Error::contract("gen_csl_dataset: n must be >= 8".to_string()));
    }
    if skips.len() < 2 {
        return Err(Error::contract("gen_csl_dataset: need at least two classes".to_string()));
    }
    let bases: Vec<Graph> = skips
        .iter()
        .map(|&s| circulant_graph(n, s))
        .collect::<Result<_>>()?;
    for (g, &s) in bases.iter().zip(skips) {
        for i in 0..n {
            if g.degree(i) != 4 {
                return Err(Error::contract(format!(
                    "skip {s} does not give a 4-regular circulant on n={n}"
                )));
            }
        }
    }
    for a in 0..bases.len() {
        for b in a + 1..bases.len() {
            if !testkit::wl1_equivalent(&bases[a], &bases[b]) {
                return Err(Error::contract(format!(
                    "classes {a} and {b} are not 1-WL equivalent"
                )));
            }
        }
    }
    assert_classes_distinct(n, skips)?;

    let mut per_class_graphs: Vec<Vec<(Graph, usize)>> = Vec::new();
    for (label, base) in bases.iter().enumerate() {
        let mut rng = substream(seed, Lane::DatasetGen, label as u64);
        let mut items = Vec::with_capacity(per_class);
        for _ in 0..per_class {
            let p = uniform_permutation(n, &mut rng);
            let g = crate::groups::act_graph(&p, base)?;
            items.push((g, label));
        }
        per_class_graphs.push(items);
    }
    let n_train = (per_class * 8) / 10;
    let n_val = per_class / 10;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for items in per_class_graphs {
        for (i, item) in items.into_iter().enumerate() {
            if i < n_train {
                train.push(item);
            } else if i < n_train + n_val {
                val.push(item);
            } else {
                test.push(item);
            }
        }
    }
    // Deterministic interleaving of classes within each split.
    let mut rng = substream(seed, Lane::Shuffle, 0);
    for split in [&mut train, &mut val, &mut test] {
        for i in (1..split.len()).rev() {
            let j = rng.gen_range(0..=i);
            split.swap(i, j);
        }
    }
    Ok(CslDataset { train, val, test, n_nodes: n, num_classes: skips.len() })
}

fn assert_classes_distinct(n: usize, skips: &[usize]) -> Result<()> {
    let check_at = if n <= testkit::ISOMORPHISM_N_MAX {
        Some(n)
    } else {
        // Largest instance under the brute-force cap where the skips stay
        // valid circulant parameters.
        (8..=testkit::ISOMORPHISM_N_MAX)
            .rev()
            .find(|&m| skips.iter().all(|&s| s >= 2 && s <= (m - 1) / 2))
    };
    let Some(m) = check_at else {
        return Ok(()); // No checkable instance below the cap.
    };
    for a in 0..skips.len() {
        for b in a + 1..skips.len() {
            let ga = circulant_graph(m, skips[a])?;
            let gb = circulant_graph(m, skips[b])?;
            if testkit::isomorphic_bruteforce(&ga, &gb, testkit::ISOMORPHISM_N_MAX)? {
                return Err(Error::contract(format!(
                    "skips {} and {} give isomorphic circulants at n={m}",
                    skips[a], skips[b]
                )));
            }
        }
    }
    Ok(())
}

// ── Charged-particle trajectories ───────────────────────────────────────

#[derive(Clone)]
pub struct NbodySample {
    pub initial: PointCloudState,
    /// Position change over the integration horizon, `[n, 3]`.
    pub delta_positions: Tensor,
}

impl NbodySample {
    pub fn target_positions(&self) -> Tensor {
        let mut t = self.initial.positions.clone();
        for (a, d) in t.data_mut().iter_mut().zip(self.delta_positions.data()) {
            *a += d;
        }
        t
    }
}

/// Softening length of the pairwise force.
pub const NBODY_SOFTENING: f64 = 0.1;

/// Pairwise softened Coulomb accelerations (unit masses).
fn accelerations(positions: &Tensor, charges: &[f64]) -> Tensor {
    let n = positions.rows();
    let mut acc = Tensor::zeros([n, 3]);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut d = [0.0; 3];
            let mut r2 = NBODY_SOFTENING * NBODY_SOFTENING;
            for k in 0..3 {
                d[k] = positions.at(i, k) - positions.at(j, k);
                r2 += d[k] * d[k];
            }
            let f = charges[i] * charges[j] / r2.powf(1.5);
            for k in 0..3 {
                acc.data_mut()[i * 3 + k] += f * d[k];
            }
        }
    }
    acc
}

/// Integrate one state forward with the leapfrog (kick-drift-kick) scheme.
pub fn integrate_leapfrog(state: &PointCloudState, dt: f64, steps: usize) -> PointCloudState {
    let n = state.n_points();
    let charges: Vec<f64> = state.charges.data().to_vec();
    let mut pos = state.positions.clone();
    let mut vel = state.velocities.clone();
    let mut acc = accelerations(&pos, &charges);
    for _ in 0..steps {
        for i in 0..n * 3 {
            vel.data_mut()[i] += 0.5 * dt * acc.data()[i];
            pos.data_mut()[i] += dt * vel.data()[i];
        }
        acc = accelerations(&pos, &charges);
        for i in 0..n * 3 {
            vel.data_mut()[i] += 0.5 * dt * acc.data()[i];
        }
    }
    PointCloudState { positions: pos, velocities: vel, charges: state.charges.clone() }
}

/// Random charged-particle systems with their integrated position changes.
pub fn gen_nbody(
    n_particles: usize,
    dt: f64,
    steps: usize,
    count: usize,
    seed: u64,
) -> Vec<NbodySample> {
    assert!(n_particles >= 1 && steps >= 1 && count >= 1 && dt > 0.0);
    crate::parallel::map_indexed(count, |i| {
        let mut rng = substream(seed, Lane::DatasetGen, 1000 + i as u64);
        let initial = PointCloudState {
            positions: Tensor::randn([n_particles, 3], 1.0, &mut rng),
            velocities: Tensor::randn([n_particles, 3], 0.5, &mut rng),
            charges: Tensor::from_vec(
                (0..n_particles)
                    .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                    .collect(),
            ),
        };
        let evolved = integrate_leapfrog(&initial, dt, steps);
        let mut delta = evolved.positions.clone();
        for (d, p) in delta.data_mut().iter_mut().zip(initial.positions.data()) {
            *d -= p;
        }
        NbodySample { initial, delta_positions: delta }
    })
}

// ── graph6 codec ────────────────────────────────────────────────────────

/// Encode a graph in the standard graph6 format (n < 63).
pub fn graph_to_graph6(g: &Graph) -> Result<String> {
    if g.n >= 63 {
        return Err(Error::Refused("graph6 writer supports n < 63".to_string()));
    }
    let mut bytes = vec![(g.n as u8) + 63];
    let mut bits: Vec<bool> = Vec::new();
    for j in 1..g.n {
        for i in 0..j {
            bits.push(g.adjacency.at(i, j) != 0.0);
        }
    }
    while bits.len() % 6 != 0 {
        bits.push(false);
    }
    for chunk in bits.chunks(6) {
        let mut v = 0u8;
        for (k, &b) in chunk.iter().enumerate() {
            if b {
                v |= 1 << (5 - k);
            }
        }
        bytes.push(v + 63);
    }
    Ok(String::from_utf8(bytes).expect("printable graph6 bytes"))
}

/// Decode one graph6 line (n < 63, no headers).
pub fn graph_from_graph6(line: &str) -> Result<Graph> {
    let bytes = line.trim().as_bytes();
    if bytes.is_empty() {
        return Err(Error::Malformed("empty graph6 line".to_string()));
    }
    if bytes[0] < 63 || bytes[0] == 126 {
        return Err(Error::Malformed("unsupported graph6 size prefix".to_string()));
    }
    let n = (bytes[0] - 63) as usize;
    let n_bits = n * (n - 1) / 2;
    let n_bytes = n_bits.div_ceil(6);
    if bytes.len() != 1 + n_bytes {
        return Err(Error::Malformed(format!(
            "graph6 line length {} does not match n={n}",
            bytes.len()
        )));
    }
    let mut bits = Vec::with_capacity(n_bytes * 6);
    for &b in &bytes[1..] {
        if !(63..127).contains(&b) {
            return Err(Error::Malformed("graph6 byte out of range".to_string()));
        }
        let v = b - 63;
        for k in 0..6 {
            bits.push(v >> (5 - k) & 1 == 1);
        }
    }
    let mut edges = Vec::new();
    let mut idx = 0;
    for j in 1..n {
        for i in 0..j {
            if bits[idx] {
                edges.push((i, j));
            }
            idx += 1;
        }
    }
    Graph::from_edges(n, &edges)
}

/// Read a graph6 corpus, one graph per line; blank lines are skipped.
pub fn read_graph6_file(path: &Path) -> Result<Vec<Graph>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(graph_from_graph6(&line)?);
    }
    Ok(out)
}

// ── Cache container ─────────────────────────────────────────────────────

/// One record in the dataset cache: a graph adjacency bitset or an f64 array.
#[derive(Clone, Debug, PartialEq)]
pub enum CachePayload {
    /// Upper-triangle adjacency bits of an `n`-node graph.
    AdjacencyBits { n: usize, bits: Vec<u8> },
    F64s { shape: Vec<usize>, data: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheRecord {
    pub name: String,
    pub payload: CachePayload,
}

#[derive(Serialize, Deserialize)]
struct CacheManifestEntry {
    name: String,
    kind: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

/// Write records as length-prefixed binary blocks plus a JSON manifest.
pub fn write_container(bin_path: &Path, manifest_path: &Path, records: &[CacheRecord]) -> Result<()> {
    let mut bin = std::io::BufWriter::new(std::fs::File::create(bin_path)?);
    let mut manifest = Vec::new();
    let mut offset = 0u64;
    for rec in records {
        let (kind, shape, payload): (&str, Vec<usize>, Vec<u8>) = match &rec.payload {
            CachePayload::AdjacencyBits { n, bits } => ("bitset", vec![*n], bits.clone()),
            CachePayload::F64s { shape, data } => {
                let mut bytes = Vec::with_capacity(data.len() * 8);
                for v in data {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                ("f64", shape.clone(), bytes)
            }
        };
        bin.write_all(&(payload.len() as u64).to_le_bytes())?;
        bin.write_all(&payload)?;
        manifest.push(CacheManifestEntry {
            name: rec.name.clone(),
            kind: kind.to_string(),
            shape,
            offset,
            length: payload.len() as u64,
        });
        offset += 8 + payload.len() as u64;
    }
    bin.flush()?;
    std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Read a container written by [`write_container`].
pub fn read_container(bin_path: &Path, manifest_path: &Path) -> Result<Vec<CacheRecord>> {
    let manifest: Vec<CacheManifestEntry> =
        serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let bin = std::fs::read(bin_path)?;
    let mut out = Vec::with_capacity(manifest.len());
    for entry in manifest {
        let start = entry.offset as usize;
        if start + 8 > bin.len() {
            return Err(Error::Malformed(format!("record {} overruns container", entry.name)));
        }
        let len = u64::from_le_bytes(bin[start..start + 8].try_into().unwrap()) as usize;
        if len as u64 != entry.length || start + 8 + len > bin.len() {
            return Err(Error::Malformed(format!("record {} length mismatch", entry.name)));
        }
        let payload_bytes = &bin[start + 8..start + 8 + len];
        let payload = match entry.kind.as_str() {
            "bitset" => CachePayload::AdjacencyBits {
                n: entry.shape[0],
                bits: payload_bytes.to_vec(),
            },
            "f64" => {
                let data: Vec<f64> = payload_bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let numel: usize = entry.shape.iter().product();
                if data.len() != numel {
                    return Err(Error::Malformed(format!(
                        "record {}: {} values for shape {:?}",
                        entry.name,
                        data.len(),
                        entry.shape
                    )));
                }
                CachePayload::F64s { shape: entry.shape.clone(), data }
            }
            other => return Err(Error::Malformed(format!("unknown record kind {other:?}"))),
        };
        out.push(CacheRecord { name: entry.name, payload });
    }
    Ok(out)
}

/// Pack a graph's upper triangle into bytes for the cache.
pub fn graph_to_bits(g: &Graph) -> CachePayload {
    let mut bits = vec![0u8; (g.n * (g.n - 1) / 2).div_ceil(8)];
    let mut idx = 0;
    for i in 0..g.n {
        for j in i + 1..g.n {
            if g.adjacency.at(i, j) != 0.0 {
                bits[idx / 8] |= 1 << (idx % 8);
            }
            idx += 1;
        }
    }
    CachePayload::AdjacencyBits { n: g.n, bits }
}

/// Rebuild a graph (constant unit features) from cached bits.
pub fn graph_from_bits(payload: &CachePayload) -> Result<Graph> {
    let CachePayload::AdjacencyBits { n, bits } = payload else {
        return Err(Error::Malformed("expected adjacency bitset".to_string()));
    };
    let mut edges = Vec::new();
    let mut idx = 0;
    for i in 0..*n {
        for j in i + 1..*n {
            if bits[idx / 8] >> (idx % 8) & 1 == 1 {
                edges.push((i, j));
            }
            idx += 1;
        }
    }
    Graph::from_edges(*n, &edges)
}
