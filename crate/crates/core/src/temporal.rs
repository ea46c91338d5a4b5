//! Sparse long/short-stream temporal fusion over per-stage FIFO memory
//! banks with ego alignment.
//!
//! Seeds are the top-k occupied (long stream) or bottom-k empty (short
//! stream) voxels. Their positions are carried into each historical frame
//! via the relative ego pose, features are gathered trilinearly from the
//! banked grid snapshots, and a linear layer fuses the concatenated
//! (current, history..., weight-embedding) channels back into C.

use crate::geometry::{align_position, Pose};
use crate::geometry::GridSpec;
use crate::grid::{OccupancyWeights, VoxelGrid};
use nalgebra::Vector3;
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("k = {k} exceeds the {voxels} voxels available")]
    KTooLarge { k: usize, voxels: usize },
    #[error("fusion input width {got}, expected {expected}")]
    WidthMismatch { expected: usize, got: usize },
}

/// Which end of the occupancy ordering a stream samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    NonEmpty,
    Empty,
}

/// Linear embedding of the scalar occupied weight into C_s channels.
#[derive(Debug, Clone)]
pub struct WeightEmbed {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl WeightEmbed {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: vec![0.0; dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn seeded(dim: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            weight: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            bias: (0..dim).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.len()
    }

    pub fn embed(&self, w: f64) -> Vec<f64> {
        self.weight
            .iter()
            .zip(&self.bias)
            .map(|(wi, bi)| wi * w + bi)
            .collect()
    }
}

/// Sampled seed voxels: features, positions (ego-frame cell centers),
/// occupied weights, and their embedding.
#[derive(Debug, Clone)]
pub struct SeedSet {
    pub channels: usize,
    pub embed_dim: usize,
    /// Linear voxel indices into the stage grid.
    pub indices: Vec<usize>,
    /// n×C, seed-major.
    pub features: Vec<f64>,
    pub positions: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
    /// n×C_s, seed-major.
    pub weight_embed: Vec<f64>,
}

impl SeedSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.weight_embed[i * self.embed_dim..(i + 1) * self.embed_dim]
    }
}

/// Select the k most (non-empty region) or least (empty region) occupied
/// voxels; ties break toward the lower linear index.
pub fn topk_sample(
    v: &VoxelGrid,
    w: &OccupancyWeights,
    spec: &GridSpec,
    k: usize,
    region: Region,
    embed: &WeightEmbed,
) -> Result<SeedSet, FusionError> {
    let n = v.voxel_count();
    assert_eq!(w.dims(), v.dims());
    if k > n {
        return Err(FusionError::KTooLarge { k, voxels: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let wdata = w.data();
    order.sort_by(|&a, &b| {
        let cmp = match region {
            Region::NonEmpty => wdata[b].partial_cmp(&wdata[a]).unwrap(),
            Region::Empty => wdata[a].partial_cmp(&wdata[b]).unwrap(),
        };
        cmp.then(a.cmp(&b))
    });
    order.truncate(k);
    let c = v.channels();
    let mut features = Vec::with_capacity(k * c);
    let mut positions = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    let mut weight_embed = Vec::with_capacity(k * embed.dim());
    for &idx in &order {
        features.extend_from_slice(v.voxel_linear(idx));
        positions.push(spec.voxel_to_world(spec.unravel(idx)));
        weights.push(wdata[idx]);
        weight_embed.extend(embed.embed(wdata[idx]));
    }
    Ok(SeedSet {
        channels: c,
        embed_dim: embed.dim(),
        indices: order,
        features,
        positions,
        weights,
        weight_embed,
    })
}

/// One banked frame: the fused stage grid, the ego pose it was captured
/// under, and its timestamp.
#[derive(Debug, Clone)]
pub struct MemoryEntry {
    pub grid: VoxelGrid,
    pub pose: Pose,
    pub timestamp: u64,
}

/// Fixed-capacity FIFO of per-stage snapshots.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<MemoryEntry>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries newest first (t-1, t-2, ...).
    pub fn newest_first(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter().rev()
    }

    /// Append an entry, evicting the oldest when over capacity. Timestamps
    /// must be strictly increasing.
    pub fn push(&mut self, entry: MemoryEntry) {
        if let Some(last) = self.entries.back() {
            assert!(
                entry.timestamp > last.timestamp,
                "bank timestamps must strictly increase"
            );
        }
        self.entries.push_back(entry);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    pub fn timestamps(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.timestamp).collect()
    }
}

/// Append an entry and return the updated bank.
pub fn bank_update(mut bank: MemoryBank, entry: MemoryEntry) -> MemoryBank {
    bank.push(entry);
    bank
}

/// Gather each seed's feature from up to `frames` historical snapshots.
/// Seed positions (ego frame t) are aligned into frame t-j before the
/// trilinear lookup; positions leaving the grid give zeros, and missing
/// frames are zero-padded. Returns `frames` blocks of n×C features.
pub fn retrieve_history(
    seeds: &SeedSet,
    bank: &MemoryBank,
    pose_t: &Pose,
    spec: &GridSpec,
    frames: usize,
) -> Vec<Vec<f64>> {
    let c = seeds.channels;
    let n = seeds.len();
    let mut out = Vec::with_capacity(frames);
    let mut buf = vec![0.0; c];
    for entry in bank.newest_first().take(frames) {
        let relative = entry.pose.inverse().compose(pose_t);
        let mut block = vec![0.0; n * c];
        for (i, pos) in seeds.positions.iter().enumerate() {
            let aligned = align_position(&relative, pos);
            let cc = spec.continuous_cell(&aligned);
            entry.grid.sample_trilinear(cc.x, cc.y, cc.z, &mut buf);
            block[i * c..(i + 1) * c].copy_from_slice(&buf);
        }
        out.push(block);
    }
    while out.len() < frames {
        out.push(vec![0.0; n * c]);
    }
    out
}

/// Linear fusion of concatenated (current, t-1, ..., t-k, weight embed)
/// channels back into C.
#[derive(Debug, Clone)]
pub struct FusionMlp {
    pub out_dim: usize,
    pub in_dim: usize,
    /// Row-major out×in.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FusionMlp {
    pub fn zeros(channels: usize, frames: usize, embed_dim: usize) -> Self {
        let in_dim = channels * (frames + 1) + embed_dim;
        Self {
            out_dim: channels,
            in_dim,
            weight: vec![0.0; channels * in_dim],
            bias: vec![0.0; channels],
        }
    }

    /// Identity on the current block, zero elsewhere.
    pub fn identity_on_current(channels: usize, frames: usize, embed_dim: usize) -> Self {
        let mut m = Self::zeros(channels, frames, embed_dim);
        for i in 0..channels {
            m.weight[i * m.in_dim + i] = 1.0;
        }
        m
    }

    pub fn seeded(
        channels: usize,
        frames: usize,
        embed_dim: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let mut m = Self::zeros(channels, frames, embed_dim);
        let scale = (1.0 / m.in_dim as f64).sqrt();
        for w in m.weight.iter_mut() {
            *w = rng.gen_range(-scale..scale);
        }
        m
    }

    pub fn apply(&self, input: &[f64], out: &mut [f64]) {
        debug_assert_eq!(input.len(), self.in_dim);
        for (o, dst) in out.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            *dst = acc;
        }
    }
}

/// Concatenate current seeds with their history blocks and the weight
/// embedding, then apply the fusion layer. Returns n×C fused features.
pub fn fuse_seeds(
    current: &SeedSet,
    history: &[Vec<f64>],
    mlp: &FusionMlp,
) -> Result<Vec<f64>, FusionError> {
    let c = current.channels;
    let n = current.len();
    let expected = c * (history.len() + 1) + current.embed_dim;
    if expected != mlp.in_dim {
        return Err(FusionError::WidthMismatch {
            expected: mlp.in_dim,
            got: expected,
        });
    }
    let mut fused = vec![0.0; n * c];
    let mut input = vec![0.0; mlp.in_dim];
    for i in 0..n {
        input[..c].copy_from_slice(current.feature(i));
        for (j, block) in history.iter().enumerate() {
            input[(j + 1) * c..(j + 2) * c].copy_from_slice(&block[i * c..(i + 1) * c]);
        }
        input[(history.len() + 1) * c..].copy_from_slice(current.embedding(i));
        mlp.apply(&input, &mut fused[i * c..(i + 1) * c]);
    }
    Ok(fused)
}

/// Add fused features back at their seed voxels; duplicates accumulate.
pub fn scatter_add(v: &mut VoxelGrid, indices: &[usize], fused: &[f64]) {
    let c = v.channels();
    assert_eq!(fused.len(), indices.len() * c);
    for (i, &idx) in indices.iter().enumerate() {
        let dst = v.voxel_linear_mut(idx);
        for (d, f) in dst.iter_mut().zip(&fused[i * c..(i + 1) * c]) {
            *d += f;
        }
    }
}

/// Seed counts and frame budgets for the two streams.
#[derive(Debug, Clone, Copy)]
pub struct StreamConfig {
    /// T_i: frames modeled by the long (non-empty) stream.
    pub long_frames: usize,
    pub long_seeds: usize,
    pub short_seeds: usize,
}

impl StreamConfig {
    /// The short (empty-region) stream uses half the frame budget.
    pub fn short_frames(&self) -> usize {
        self.long_frames / 2
    }
}

/// Parameters of one stage's fusion step.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub long_mlp: FusionMlp,
    pub short_mlp: FusionMlp,
    pub embed: WeightEmbed,
}

impl FusionParams {
    pub fn seeded(
        channels: usize,
        cfg: &StreamConfig,
        embed_dim: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let embed = WeightEmbed::seeded(embed_dim, rng);
        Self {
            long_mlp: FusionMlp::seeded(channels, cfg.long_frames, embed_dim, rng),
            short_mlp: FusionMlp::seeded(channels, cfg.short_frames(), embed_dim, rng),
            embed,
        }
    }
}

/// Run both streams against the bank and scatter their fused outputs into
/// the grid. The caller remains responsible for appending the result to the
/// bank and storing the BEV snapshot for the next frame.
pub fn sparse_temporal_fusion(
    v: &VoxelGrid,
    w: &OccupancyWeights,
    spec: &GridSpec,
    bank: &MemoryBank,
    pose_t: &Pose,
    cfg: &StreamConfig,
    params: &FusionParams,
) -> Result<VoxelGrid, FusionError> {
    let mut out = v.clone();
    let streams = [
        (Region::NonEmpty, cfg.long_seeds, cfg.long_frames, &params.long_mlp),
        (
            Region::Empty,
            cfg.short_seeds,
            cfg.short_frames(),
            &params.short_mlp,
        ),
    ];
    for (region, k, frames, mlp) in streams {
        if k == 0 {
            continue;
        }
        let seeds = topk_sample(v, w, spec, k, region, &params.embed)?;
        let history = retrieve_history(&seeds, bank, pose_t, spec, frames);
        let fused = fuse_seeds(&seeds, &history, mlp)?;
        scatter_add(&mut out, &seeds.indices, &fused);
    }
    Ok(out)
}
