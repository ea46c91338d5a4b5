//! Self-recursive occupancy prediction: per-layer residual refinement of
//! the occupied state, W_l = clamp(f(B_l) + α_l · W_{l-1}).
//!
//! The predictor f maps each BEV column (C values) to Z sigmoid outputs and
//! shares its weights across all layers of a stage.

use crate::grid::{upsample2x_weights, BevFeature, OccupancyWeights};
use crate::mlp::{Activation, Mlp, MlpCache, MlpError, MlpGrads};
use rand::Rng;

/// Per-stage state: one shared predictor plus one α per layer.
#[derive(Debug, Clone)]
pub struct SropState {
    /// α_l, initialized to 0.5 and free to move during training.
    pub alpha: Vec<f64>,
    /// Shared column predictor: C -> 2C (relu) -> Z (sigmoid).
    pub predictor: Mlp,
}

impl SropState {
    pub fn new(channels: usize, z: usize, layers: usize) -> Self {
        Self {
            alpha: vec![0.5; layers],
            predictor: Mlp::new(
                &[channels, 2 * channels, z],
                &[Activation::Relu, Activation::Sigmoid],
            ),
        }
    }

    pub fn seeded(channels: usize, z: usize, layers: usize, rng: &mut impl Rng) -> Self {
        Self {
            alpha: vec![0.5; layers],
            predictor: Mlp::seeded(
                &[channels, 2 * channels, z],
                &[Activation::Relu, Activation::Sigmoid],
                rng,
            ),
        }
    }

    pub fn z(&self) -> usize {
        self.predictor.out_dim()
    }
}

/// Initial weights for a stage: zeros in the first stage, otherwise the
/// previous stage's final weights replicated to double resolution.
pub fn srop_init(
    stage_dims: (usize, usize, usize),
    prev_stage: Option<&OccupancyWeights>,
) -> OccupancyWeights {
    match prev_stage {
        None => OccupancyWeights::zeros(stage_dims),
        Some(prev) => {
            let up = upsample2x_weights(prev);
            assert_eq!(up.dims(), stage_dims, "previous stage dims must be half");
            up
        }
    }
}

/// One refinement layer. The residual sum is clamped to [0, 1] so the
/// weights stay usable as probabilities by the attention gates.
pub fn srop_step(
    b: &BevFeature,
    w_prev: &OccupancyWeights,
    alpha: f64,
    state: &SropState,
) -> Result<OccupancyWeights, MlpError> {
    let (out, _) = srop_step_cached(b, w_prev, alpha, state)?;
    Ok(out)
}

/// Cache for the backward pass: per-column MLP caches plus pre-clamp sums.
pub struct SropStepCache {
    columns: Vec<MlpCache>,
    pre_clamp: Vec<f64>,
}

pub fn srop_step_cached(
    b: &BevFeature,
    w_prev: &OccupancyWeights,
    alpha: f64,
    state: &SropState,
) -> Result<(OccupancyWeights, SropStepCache), MlpError> {
    let (nx, ny) = b.dims();
    let nz = state.z();
    assert_eq!(
        w_prev.dims(),
        (nx, ny, nz),
        "weights must match BEV footprint and predictor Z"
    );
    let mut out = OccupancyWeights::zeros((nx, ny, nz));
    let mut columns = Vec::with_capacity(nx * ny);
    let mut pre_clamp = vec![0.0; nx * ny * nz];
    for ix in 0..nx {
        for iy in 0..ny {
            let (cache, f) = state.predictor.forward_cached(b.cell(ix, iy))?;
            for (iz, fz) in f.iter().enumerate() {
                let pre = fz + alpha * w_prev.get(ix, iy, iz);
                pre_clamp[(ix * ny + iy) * nz + iz] = pre;
                out.set(ix, iy, iz, pre.clamp(0.0, 1.0));
            }
            columns.push(cache);
        }
    }
    Ok((out, SropStepCache { columns, pre_clamp }))
}

/// Gradients of one srop step.
pub struct SropStepGrads {
    pub d_alpha: f64,
    pub d_w_prev: Vec<f64>,
}

/// Backpropagate d loss / d W_l through the clamp, the sigmoid predictor,
/// and the residual term. Predictor gradients accumulate into `grads`.
pub fn srop_step_backward(
    w_prev: &OccupancyWeights,
    alpha: f64,
    state: &SropState,
    cache: &SropStepCache,
    upstream: &[f64],
    grads: &mut MlpGrads,
) -> SropStepGrads {
    let (nx, ny, nz) = w_prev.dims();
    assert_eq!(upstream.len(), nx * ny * nz);
    let mut d_alpha = 0.0;
    let mut d_w_prev = vec![0.0; nx * ny * nz];
    let mut column_upstream = vec![0.0; nz];
    for ix in 0..nx {
        for iy in 0..ny {
            let col = ix * ny + iy;
            for iz in 0..nz {
                let flat = col * nz + iz;
                let pre = cache.pre_clamp[flat];
                // Clamp subgradient: pass-through strictly inside (0, 1).
                let gate = if pre > 0.0 && pre < 1.0 { 1.0 } else { 0.0 };
                let g = upstream[flat] * gate;
                column_upstream[iz] = g;
                d_alpha += g * w_prev.get(ix, iy, iz);
                d_w_prev[flat] = g * alpha;
            }
            state
                .predictor
                .backward(&cache.columns[col], &column_upstream, grads);
        }
    }
    SropStepGrads { d_alpha, d_w_prev }
}
