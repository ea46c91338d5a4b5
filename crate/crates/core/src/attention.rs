//! Deformable attention and its occupancy-aware variants.
//!
//! A deformable kernel samples a value map at predicted offsets around an
//! anchor and blends the samples with softmaxed predicted weights. The
//! temporal variant reweights each query by the z-averaged occupancy; the
//! spatial cross-attention variant gates 3D reference points on their
//! occupied weight and reweights contributions by depth agreement.

use crate::geometry::{project_to_image, Camera, GridSpec};
use crate::grid::{BevFeature, BevMap, GridError, OccupancyWeights};
use crate::lift_splat::{DepthDistribution, ImageFeature};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("pixel outside the image")]
    OutOfImage,
}

/// 2D value source for the deformable kernel. Coordinates are continuous
/// index coordinates: integers land on sample centers, borders clamp.
pub trait SampleMap {
    fn channels(&self) -> usize;
    fn sample(&self, x: f64, y: f64, out: &mut [f64]);
}

impl SampleMap for BevFeature {
    fn channels(&self) -> usize {
        self.channels()
    }

    fn sample(&self, x: f64, y: f64, out: &mut [f64]) {
        self.sample_bilinear(x, y, out);
    }
}

impl SampleMap for ImageFeature {
    fn channels(&self) -> usize {
        self.channels()
    }

    fn sample(&self, x: f64, y: f64, out: &mut [f64]) {
        self.sample_bilinear(x, y, out);
    }
}

/// Offset and weight predictors of one deformable kernel.
#[derive(Debug, Clone)]
pub struct DeformableParams {
    pub num_points: usize,
    pub cond_dim: usize,
    /// Row-major 2P×cond: predicted (dx, dy) per point, in cells.
    pub offset_weight: Vec<f64>,
    pub offset_bias: Vec<f64>,
    /// Row-major P×cond: attention logits, softmaxed per query.
    pub weight_weight: Vec<f64>,
    pub weight_bias: Vec<f64>,
}

impl DeformableParams {
    /// Zero offsets and uniform attention weights.
    pub fn frozen(num_points: usize, cond_dim: usize) -> Self {
        Self {
            num_points,
            cond_dim,
            offset_weight: vec![0.0; 2 * num_points * cond_dim],
            offset_bias: vec![0.0; 2 * num_points],
            weight_weight: vec![0.0; num_points * cond_dim],
            weight_bias: vec![0.0; num_points],
        }
    }

    pub fn seeded(
        num_points: usize,
        cond_dim: usize,
        offset_scale: f64,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let mut p = Self::frozen(num_points, cond_dim);
        let w_scale = 1.0 / (cond_dim as f64).sqrt();
        for w in p.offset_weight.iter_mut() {
            *w = rng.gen_range(-offset_scale..offset_scale) * w_scale;
        }
        for b in p.offset_bias.iter_mut() {
            *b = rng.gen_range(-offset_scale..offset_scale);
        }
        for w in p.weight_weight.iter_mut() {
            *w = rng.gen_range(-w_scale..w_scale);
        }
        p
    }

    fn offsets(&self, cond: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(cond.len(), self.cond_dim);
        out.clear();
        for o in 0..2 * self.num_points {
            let row = &self.offset_weight[o * self.cond_dim..(o + 1) * self.cond_dim];
            let mut acc = self.offset_bias[o];
            for (w, x) in row.iter().zip(cond) {
                acc += w * x;
            }
            out.push(acc);
        }
    }

    fn softmax_weights(&self, cond: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.num_points {
            let row = &self.weight_weight[o * self.cond_dim..(o + 1) * self.cond_dim];
            let mut acc = self.weight_bias[o];
            for (w, x) in row.iter().zip(cond) {
                acc += w * x;
            }
            out.push(acc);
        }
        let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in out.iter_mut() {
            *v /= sum;
        }
    }
}

/// Σ_p softmax_weight_p · bilinear(value, anchor + offset_p), with offsets
/// and weights predicted from the conditioning vector.
pub fn deformable_attend(
    value: &impl SampleMap,
    anchor: (f64, f64),
    conditioning: &[f64],
    params: &DeformableParams,
) -> Vec<f64> {
    let mut out = vec![0.0; value.channels()];
    let mut offsets = Vec::new();
    let mut weights = Vec::new();
    let mut buf = vec![0.0; value.channels()];
    params.offsets(conditioning, &mut offsets);
    params.softmax_weights(conditioning, &mut weights);
    for p in 0..params.num_points {
        let x = anchor.0 + offsets[2 * p];
        let y = anchor.1 + offsets[2 * p + 1];
        value.sample(x, y, &mut buf);
        let w = weights[p];
        for (o, s) in out.iter_mut().zip(&buf) {
            *o += w * s;
        }
    }
    out
}

/// Kernels for the two temporal attention sources.
#[derive(Debug, Clone)]
pub struct OaTsaParams {
    pub current: DeformableParams,
    pub history: DeformableParams,
}

impl OaTsaParams {
    pub fn seeded(channels: usize, num_points: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            current: DeformableParams::seeded(num_points, channels + 1, 0.5, rng),
            history: DeformableParams::seeded(num_points, channels + 1, 0.5, rng),
        }
    }
}

/// Occlusion-aware temporal self-attention over {current, aligned history}.
/// Each query is scaled by its z-averaged occupancy; the conditioning vector
/// is the query feature with that occupancy appended.
pub fn oa_tsa(
    b_curr: &BevFeature,
    b_hist: &BevFeature,
    w_bar: &BevMap,
    params: &OaTsaParams,
) -> Result<BevFeature, GridError> {
    let dims = b_curr.dims();
    if b_hist.dims() != dims || w_bar.dims() != dims || b_hist.channels() != b_curr.channels() {
        return Err(GridError::DimMismatch(format!(
            "current {:?} history {:?} weights {:?}",
            dims,
            b_hist.dims(),
            w_bar.dims()
        )));
    }
    let c = b_curr.channels();
    let mut out = BevFeature::zeros(c, dims);
    let mut cond = vec![0.0; c + 1];
    for ix in 0..dims.0 {
        for iy in 0..dims.1 {
            let wb = w_bar.get(ix, iy);
            if wb == 0.0 {
                continue;
            }
            let q = b_curr.cell(ix, iy);
            cond[..c].copy_from_slice(q);
            cond[c] = wb;
            let anchor = (ix as f64, iy as f64);
            let a = deformable_attend(b_curr, anchor, &cond, &params.current);
            let h = deformable_attend(b_hist, anchor, &cond, &params.history);
            let dst = out.cell_mut(ix, iy);
            for (d, (x, y)) in dst.iter_mut().zip(a.iter().zip(&h)) {
                *d = wb * (x + y);
            }
        }
    }
    Ok(out)
}

/// Depth-agreement reweighting: exp(-min(|d_r-(d_r'-Δd)|, |d_r-(d_r'+Δd)|)² / 2σ²).
/// Equals 1 exactly when the point depth coincides with either bin edge.
pub fn compute_beta(d_r: f64, d_r_prime: f64, delta_d: f64, sigma: f64) -> f64 {
    debug_assert!(delta_d > 0.0 && sigma > 0.0);
    let lo = (d_r - (d_r_prime - delta_d)).abs();
    let hi = (d_r - (d_r_prime + delta_d)).abs();
    let m = lo.min(hi);
    (-(m * m) / (2.0 * sigma * sigma)).exp()
}

/// Counter-based randomness: every draw is keyed by (seed, tags), so
/// evaluation order and parallel scheduling never change the stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RngStream {
    base: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            base: splitmix64(seed),
        }
    }

    pub fn derive(&self, tag: u64) -> RngStream {
        Self {
            base: splitmix64(self.base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        }
    }

    /// Threshold draw for one reference point: a normal(0.5, 1) truncated to
    /// [0.5, 1], sampled by rejection.
    pub fn truncated_normal_threshold(&self, point_tag: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.derive(point_tag).base);
        let normal = Normal::new(0.5, 1.0).expect("valid normal");
        loop {
            let u = normal.sample(&mut rng);
            if (0.5..=1.0).contains(&u) {
                return u;
            }
        }
    }
}

/// Threshold policy for reference-point selection.
#[derive(Debug, Clone, Copy)]
pub enum SamplingGate {
    /// Per-point random thresholds (training).
    Train(RngStream),
    /// Fixed threshold; inference uses 0.5.
    Eval { threshold: f64 },
    /// Select every point.
    Disabled,
}

impl SamplingGate {
    pub fn eval() -> Self {
        SamplingGate::Eval { threshold: 0.5 }
    }
}

/// 3D reference points stacked over one BEV query: heights at cell centers,
/// strictly increasing, each carrying its occupied weight.
#[derive(Debug, Clone)]
pub struct ReferenceColumn {
    pub query: (usize, usize),
    pub heights: Vec<f64>,
    pub z_indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Build the column for query (x, y); n_ref points are spread evenly over
/// the stage's z cell centers so weight lookups stay exact.
pub fn reference_column(
    spec: &GridSpec,
    w: &OccupancyWeights,
    x: usize,
    y: usize,
    n_ref: usize,
) -> ReferenceColumn {
    let nz = spec.dims.2;
    let n = n_ref.min(nz).max(1);
    let mut heights = Vec::with_capacity(n);
    let mut z_indices = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for j in 0..n {
        let zi = ((2 * j + 1) * nz) / (2 * n);
        z_indices.push(zi);
        heights.push(spec.origin[2] + (zi as f64 + 0.5) * spec.voxel_size);
        weights.push(w.get(x, y, zi));
    }
    ReferenceColumn {
        query: (x, y),
        heights,
        z_indices,
        weights,
    }
}

/// Indices of the points whose occupied weight strictly exceeds their
/// threshold u: train draws u per point, eval compares against 0.5.
pub fn sample_reference_points(column: &ReferenceColumn, gate: &SamplingGate) -> Vec<usize> {
    let (qx, qy) = column.query;
    column
        .weights
        .iter()
        .enumerate()
        .filter(|(i, w)| match gate {
            SamplingGate::Disabled => true,
            SamplingGate::Eval { threshold } => **w > *threshold,
            SamplingGate::Train(stream) => {
                let tag = ((qx as u64) << 40) ^ ((qy as u64) << 20) ^ *i as u64;
                **w > stream.truncated_normal_threshold(tag)
            }
        })
        .map(|(i, _)| i)
        .collect()
}

/// Per-camera inputs to spatial cross-attention.
pub struct ScaContext<'a> {
    pub image_feats: &'a [ImageFeature],
    pub depths: &'a [DepthDistribution],
    pub cameras: &'a [Camera],
    pub spec: &'a GridSpec,
}

#[derive(Debug, Clone)]
pub struct OaScaOptions {
    pub sigma: f64,
    pub n_ref: usize,
    pub gate: SamplingGate,
    /// Include the occupied weight in Ω.
    pub use_weight: bool,
    /// Include the depth-agreement factor β in Ω.
    pub use_beta: bool,
}

/// Occupancy-aware spatial cross-attention. Selected reference points are
/// projected into every camera; contributions are scaled by Ω = w·β and
/// averaged over the cameras that see the point. Queries with no visible
/// camera or an empty selection contribute zero.
pub fn oa_sca(
    b: &BevFeature,
    w: &OccupancyWeights,
    ctx: &ScaContext,
    opts: &OaScaOptions,
    params: &DeformableParams,
) -> BevFeature {
    let (nx, ny) = b.dims();
    let c = b.channels();
    let mut out = BevFeature::zeros(c, (nx, ny));
    let mut point_acc = vec![0.0; c];
    for ix in 0..nx {
        for iy in 0..ny {
            let column = reference_column(ctx.spec, w, ix, iy, opts.n_ref);
            let selected = sample_reference_points(&column, &opts.gate);
            if selected.is_empty() {
                continue;
            }
            let q = b.cell(ix, iy);
            let center2d = ctx.spec.voxel_to_world((ix, iy, 0));
            let dst = out.cell_mut(ix, iy);
            for pi in selected {
                let point = nalgebra::Vector3::new(center2d.x, center2d.y, column.heights[pi]);
                point_acc.fill(0.0);
                let mut visible = 0usize;
                for (cam_idx, cam) in ctx.cameras.iter().enumerate() {
                    let proj = match project_to_image(cam, &point) {
                        Ok(p) if p.in_image => p,
                        _ => continue,
                    };
                    let depth = &ctx.depths[cam_idx];
                    let d_r = proj.depth;
                    let d_r_prime = match decode_object_depth(depth, (proj.u, proj.v)) {
                        Ok(d) => d,
                        Err(_) => continue,
                    };
                    let beta = if opts.use_beta {
                        compute_beta(d_r, d_r_prime, depth.bins().step, opts.sigma)
                    } else {
                        1.0
                    };
                    let weight = if opts.use_weight {
                        column.weights[pi]
                    } else {
                        1.0
                    };
                    let omega = weight * beta;
                    let feat = deformable_attend(
                        &ctx.image_feats[cam_idx],
                        (proj.u - 0.5, proj.v - 0.5),
                        q,
                        params,
                    );
                    for (a, f) in point_acc.iter_mut().zip(&feat) {
                        *a += omega * f;
                    }
                    visible += 1;
                }
                if visible > 0 {
                    let inv = 1.0 / visible as f64;
                    for (d, a) in dst.iter_mut().zip(&point_acc) {
                        *d += inv * a;
                    }
                }
            }
        }
    }
    out
}

/// Plain spatial cross-attention: every reference point, unit weights.
/// Kept as an independent implementation so it can serve as the oracle for
/// the occupancy-aware path and as an ablation route.
pub fn vanilla_sca(
    b: &BevFeature,
    image_feats: &[ImageFeature],
    cameras: &[Camera],
    spec: &GridSpec,
    n_ref: usize,
    params: &DeformableParams,
) -> BevFeature {
    let (nx, ny) = b.dims();
    let c = b.channels();
    let nz = spec.dims.2;
    let n = n_ref.min(nz).max(1);
    let mut out = BevFeature::zeros(c, (nx, ny));
    for ix in 0..nx {
        for iy in 0..ny {
            let q = b.cell(ix, iy);
            for j in 0..n {
                let zi = ((2 * j + 1) * nz) / (2 * n);
                let point = spec.voxel_to_world((ix, iy, zi));
                let mut acc = vec![0.0; c];
                let mut visible = 0usize;
                for (cam_idx, cam) in cameras.iter().enumerate() {
                    let proj = match project_to_image(cam, &point) {
                        Ok(p) if p.in_image => p,
                        _ => continue,
                    };
                    let feat = deformable_attend(
                        &image_feats[cam_idx],
                        (proj.u - 0.5, proj.v - 0.5),
                        q,
                        params,
                    );
                    for (a, f) in acc.iter_mut().zip(&feat) {
                        *a += f;
                    }
                    visible += 1;
                }
                if visible > 0 {
                    let inv = 1.0 / visible as f64;
                    let dst = out.cell_mut(ix, iy);
                    for (d, a) in dst.iter_mut().zip(&acc) {
                        *d += inv * a;
                    }
                }
            }
        }
    }
    out
}

/// Metric depth of the scene object behind a pixel: the modal bin of the
/// distribution at the containing pixel, mapped to its center depth. Ties
/// break toward the lowest bin index.
pub fn decode_object_depth(
    depth: &DepthDistribution,
    pixel: (f64, f64),
) -> Result<f64, AttentionError> {
    let (h, w) = depth.size();
    let (u, v) = pixel;
    if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
        return Err(AttentionError::OutOfImage);
    }
    let (ui, vi) = (u.floor() as usize, v.floor() as usize);
    let probs = depth.pixel(ui, vi);
    let mut best = 0;
    let mut best_p = probs[0];
    for (i, p) in probs.iter().enumerate().skip(1) {
        if *p > best_p {
            best = i;
            best_p = *p;
        }
    }
    Ok(depth.bins().center(best))
}
