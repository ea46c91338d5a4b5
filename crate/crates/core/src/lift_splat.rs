//! View transformation: back-project image features along depth bins (lift),
//! sum-pool them into voxels (splat), and build the multi-resolution pyramid.

use crate::geometry::{back_project, Camera, GridSpec};
use crate::grid::VoxelGrid;
use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LiftSplatError {
    #[error("image feature and depth distribution sizes differ")]
    SizeMismatch,
    #[error("per-pixel depth probabilities must be nonnegative and sum to 1")]
    BadDistribution,
    #[error("grid dims not divisible by 2^(stages-1)")]
    IndivisibleDims,
}

/// Uniform metric depth discretization shared by distributions and decoding.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DepthBins {
    pub start: f64,
    pub step: f64,
    pub count: usize,
}

impl DepthBins {
    pub fn center(&self, bin: usize) -> f64 {
        self.start + (bin as f64 + 0.5) * self.step
    }

    /// Bin containing a metric depth, clamped to the valid range.
    pub fn bin_of(&self, depth: f64) -> usize {
        let b = ((depth - self.start) / self.step).floor();
        (b.max(0.0) as usize).min(self.count - 1)
    }
}

/// Per-pixel categorical distribution over depth bins, D×H×W.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthDistribution {
    bins: DepthBins,
    height: usize,
    width: usize,
    /// (v·W + u)·D + b
    probs: Vec<f64>,
}

impl DepthDistribution {
    pub fn from_probs(
        bins: DepthBins,
        height: usize,
        width: usize,
        probs: Vec<f64>,
    ) -> Result<Self, LiftSplatError> {
        if probs.len() != bins.count * height * width {
            return Err(LiftSplatError::SizeMismatch);
        }
        for px in probs.chunks_exact(bins.count) {
            let sum: f64 = px.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || px.iter().any(|p| *p < 0.0) {
                return Err(LiftSplatError::BadDistribution);
            }
        }
        Ok(Self {
            bins,
            height,
            width,
            probs,
        })
    }

    pub fn bins(&self) -> DepthBins {
        self.bins
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let o = (v * self.width + u) * self.bins.count;
        &self.probs[o..o + self.bins.count]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// C×H×W image feature plane, stored pixel-major: (v·W + u)·C + c.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeature {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageFeature {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_data(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self, LiftSplatError> {
        if data.len() != channels * height * width {
            return Err(LiftSplatError::SizeMismatch);
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let o = (v * self.width + u) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, u: usize, v: usize) -> &mut [f64] {
        let o = (v * self.width + u) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Bilinear sample at continuous pixel coordinates where integer
    /// coordinates land on pixel centers; clamped at the border.
    pub fn sample_bilinear(&self, x: f64, y: f64, out: &mut [f64]) {
        let (nw, nh) = (self.width, self.height);
        let x = x.clamp(0.0, (nw - 1) as f64);
        let y = y.clamp(0.0, (nh - 1) as f64);
        let x0 = (x.floor() as usize).min(nw - 1);
        let y0 = (y.floor() as usize).min(nh - 1);
        let x1 = (x0 + 1).min(nw - 1);
        let y1 = (y0 + 1).min(nh - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        out.fill(0.0);
        for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
            if wx == 0.0 {
                continue;
            }
            for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                if wy == 0.0 {
                    continue;
                }
                let w = wx * wy;
                let src = self.pixel(xi, yi);
                for (o, s) in out.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
    }
}

/// Weighted point cloud produced by lifting one camera's features.
#[derive(Debug, Clone)]
pub struct LiftedPoints {
    pub channels: usize,
    pub positions: Vec<Vector3<f64>>,
    /// n×C payloads, point-major.
    pub payloads: Vec<f64>,
}

impl LiftedPoints {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn payload(&self, i: usize) -> &[f64] {
        &self.payloads[i * self.channels..(i + 1) * self.channels]
    }
}

/// Back-project every (pixel, bin) pair to its ego-frame position at the bin
/// center depth, carrying the pixel feature scaled by the bin probability.
pub fn lift(
    feat: &ImageFeature,
    depth: &DepthDistribution,
    camera: &Camera,
) -> Result<LiftedPoints, LiftSplatError> {
    if feat.size() != depth.size() {
        return Err(LiftSplatError::SizeMismatch);
    }
    let (h, w) = feat.size();
    let c = feat.channels();
    let bins = depth.bins();
    let n = h * w * bins.count;
    let mut positions = Vec::with_capacity(n);
    let mut payloads = Vec::with_capacity(n * c);
    for v in 0..h {
        for u in 0..w {
            let f = feat.pixel(u, v);
            let p = depth.pixel(u, v);
            // Pixel centers back-project at (u + 0.5, v + 0.5).
            let (uc, vc) = (u as f64 + 0.5, v as f64 + 0.5);
            for (b, prob) in p.iter().enumerate() {
                let d = bins.center(b);
                positions.push(back_project(camera, uc, vc, d));
                payloads.extend(f.iter().map(|x| x * prob));
            }
        }
    }
    Ok(LiftedPoints {
        channels: c,
        positions,
        payloads,
    })
}

/// Sum-pool point payloads into their containing voxels; out-of-grid points
/// are dropped. Accumulation follows point order, so results are
/// deterministic for a fixed input ordering.
pub fn splat(points: &LiftedPoints, spec: &GridSpec) -> VoxelGrid {
    let mut out = VoxelGrid::zeros(points.channels, spec.dims);
    splat_into(points, spec, &mut out);
    out
}

/// Accumulating variant used when several cameras share one grid.
pub fn splat_into(points: &LiftedPoints, spec: &GridSpec, out: &mut VoxelGrid) {
    assert_eq!(out.channels(), points.channels);
    assert_eq!(out.dims(), spec.dims);
    for (i, pos) in points.positions.iter().enumerate() {
        if let Some((ix, iy, iz)) = spec.world_to_voxel(pos) {
            let dst = out.voxel_mut(ix, iy, iz);
            for (d, s) in dst.iter_mut().zip(points.payload(i)) {
                *d += s;
            }
        }
    }
}

/// 2×2×2 average pooling, the encoder stand-in for one resolution step.
pub fn avg_pool2x(v: &VoxelGrid) -> VoxelGrid {
    let (nx, ny, nz) = v.dims();
    assert!(nx % 2 == 0 && ny % 2 == 0 && nz % 2 == 0);
    let c = v.channels();
    let mut out = VoxelGrid::zeros(c, (nx / 2, ny / 2, nz / 2));
    for ox in 0..nx / 2 {
        for oy in 0..ny / 2 {
            for oz in 0..nz / 2 {
                let dst_off = ((ox * (ny / 2) + oy) * (nz / 2) + oz) * c;
                for dx in 0..2 {
                    for dy in 0..2 {
                        for dz in 0..2 {
                            let src = v.voxel(2 * ox + dx, 2 * oy + dy, 2 * oz + dz);
                            for (ci, s) in src.iter().enumerate() {
                                out.data_mut()[dst_off + ci] += 0.125 * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Multi-resolution pyramid: stage i (1-based) has dims X/2^(N-i). Element 0
/// is the coarsest stage; the last element is the input itself.
pub fn coarse_pyramid(v: &VoxelGrid, stages: usize) -> Result<Vec<VoxelGrid>, LiftSplatError> {
    assert!(stages >= 1);
    let factor = 1usize << (stages - 1);
    let (nx, ny, nz) = v.dims();
    if nx % factor != 0 || ny % factor != 0 || nz % factor != 0 {
        return Err(LiftSplatError::IndivisibleDims);
    }
    let mut levels = vec![v.clone()];
    for _ in 1..stages {
        let next = avg_pool2x(levels.last().unwrap());
        levels.push(next);
    }
    levels.reverse();
    Ok(levels)
}
