//! The N-stage spatial-temporal cascade: fuse coarse and previous-stage
//! features, collapse to BEV, run L refinement layers (occupancy predictor,
//! temporal self-attention, spatial cross-attention), re-expand with the
//! final occupied weights, fuse sparse history, and feed the last stage to
//! the prediction heads.

use crate::attention::{
    oa_sca, oa_tsa, vanilla_sca, DeformableParams, OaScaOptions, OaTsaParams, RngStream,
    SamplingGate, ScaContext,
};
use crate::geometry::{Camera, GridSpec, Pose};
use crate::grid::{
    bev_to_voxel, upsample2x_grid, voxel_to_bev, voxel_to_bev_weighted, z_average, BevFeature,
    GridError, OccupancyWeights, SemanticGrid, VoxelGrid,
};
use crate::lift_splat::{DepthDistribution, ImageFeature};
use crate::mlp::{Activation, Mlp, MlpError};
use crate::occupancy::{srop_init, srop_step, SropState};
use crate::temporal::{
    bank_update, sparse_temporal_fusion, FusionError, FusionParams, MemoryBank, MemoryEntry,
    StreamConfig,
};
use crate::grid::FlowGrid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("decoder config invalid: {0}")]
    Config(String),
}

/// Component switches mirroring the ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AblationConfig {
    pub oa_sca: bool,
    pub oa_tsa: bool,
    pub fusion: bool,
    /// false = one-off: the occupancy predictor runs independently per
    /// layer and stage with no residual inheritance.
    pub srop_recursive: bool,
    /// Replace the occupancy-aware cross-attention with the plain variant.
    pub vanilla_sca: bool,
    /// Ω = β alone: keep the depth reweighting, drop the occupied weight
    /// and the selection gate.
    pub depth_only_reweight: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            oa_sca: true,
            oa_tsa: true,
            fusion: true,
            srop_recursive: true,
            vanilla_sca: false,
            depth_only_reweight: false,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    pub stages: usize,
    /// Transformer layers per stage.
    pub layers: usize,
    pub channels: usize,
    /// Long-stream frame budget per stage, coarsest first.
    pub history: Vec<usize>,
    /// Depth-agreement tolerance σ.
    pub sigma: f64,
    /// Reference heights per query (capped at the stage's Z).
    pub n_ref: usize,
    pub deform_points: usize,
    /// Seed fractions of the stage voxel count.
    pub long_frac: f64,
    pub short_frac: f64,
    pub weight_embed_dim: usize,
    pub eval_threshold: f64,
    /// Draw random per-point selection thresholds instead of the fixed one.
    pub train_gate: bool,
    /// K: semantic classes beyond empty.
    pub num_classes: usize,
    /// Collapse BEV with the occupancy-weighted mean instead of the
    /// learned linear fold.
    pub collapse_weighted: bool,
    pub seed: u64,
    pub ablation: AblationConfig,
}

impl DecoderConfig {
    /// Reference configuration: 3 stages, 2 layers, history (16, 8, 4),
    /// σ = 2, eval threshold 0.5.
    pub fn reference(channels: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            stages: 3,
            layers: 2,
            channels,
            history: vec![16, 8, 4],
            sigma: 2.0,
            n_ref: 8,
            deform_points: 4,
            long_frac: 0.10,
            short_frac: 0.05,
            weight_embed_dim: 8,
            eval_threshold: 0.5,
            train_gate: false,
            num_classes,
            collapse_weighted: false,
            seed,
            ablation: AblationConfig::default(),
        }
    }

    pub fn validate(&self, full_dims: (usize, usize, usize)) -> Result<(), DecoderError> {
        if self.history.len() != self.stages {
            return Err(DecoderError::Config(format!(
                "history has {} entries for {} stages",
                self.history.len(),
                self.stages
            )));
        }
        let factor = 1usize << (self.stages - 1);
        if full_dims.0 % factor != 0 || full_dims.1 % factor != 0 || full_dims.2 % factor != 0 {
            return Err(DecoderError::Config(format!(
                "grid dims {full_dims:?} not divisible by {factor}"
            )));
        }
        Ok(())
    }

    fn stream_config(&self, stage: usize, voxels: usize) -> StreamConfig {
        let long = ((voxels as f64 * self.long_frac).round() as usize).clamp(1, voxels);
        let short = ((voxels as f64 * self.short_frac).round() as usize).clamp(1, voxels);
        StreamConfig {
            long_frames: self.history[stage],
            long_seeds: long,
            short_seeds: short,
        }
    }
}

/// One transformer layer's attention parameters.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub tsa: OaTsaParams,
    pub sca: DeformableParams,
}

/// Everything one stage owns.
#[derive(Debug, Clone)]
pub struct StageParams {
    pub collapse: crate::grid::ZCollapse,
    pub srop: SropState,
    pub layers: Vec<LayerParams>,
    pub fusion: FusionParams,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub stages: Vec<StageParams>,
    /// Per-voxel class logits head: C -> 2C -> K+1.
    pub sem_head: Mlp,
    /// Per-voxel planar velocity head: C -> 2C -> 2.
    pub flow_head: Mlp,
}

impl DecoderParams {
    pub fn seeded(cfg: &DecoderConfig, full_dims: (usize, usize, usize)) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.channels;
        let stages = (0..cfg.stages)
            .map(|i| {
                let factor = 1usize << (cfg.stages - 1 - i);
                let dims = (
                    full_dims.0 / factor,
                    full_dims.1 / factor,
                    full_dims.2 / factor,
                );
                let voxels = dims.0 * dims.1 * dims.2;
                let stream = cfg.stream_config(i, voxels);
                StageParams {
                    collapse: crate::grid::ZCollapse::seeded(c, dims.2, &mut rng),
                    srop: SropState::seeded(c, dims.2, cfg.layers, &mut rng),
                    layers: (0..cfg.layers)
                        .map(|_| LayerParams {
                            tsa: OaTsaParams::seeded(c, cfg.deform_points, &mut rng),
                            sca: DeformableParams::seeded(cfg.deform_points, c, 1.0, &mut rng),
                        })
                        .collect(),
                    fusion: FusionParams::seeded(c, &stream, cfg.weight_embed_dim, &mut rng),
                }
            })
            .collect();
        let sem_head = Mlp::seeded(
            &[c, 2 * c, cfg.num_classes + 1],
            &[Activation::Relu, Activation::Identity],
            &mut rng,
        );
        let flow_head = Mlp::seeded(
            &[c, 2 * c, 2],
            &[Activation::Relu, Activation::Identity],
            &mut rng,
        );
        Self {
            stages,
            sem_head,
            flow_head,
        }
    }
}

/// Mutable cross-frame state: per-stage FIFO banks and the stored BEV
/// snapshot (with its capture pose) for temporal self-attention.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub banks: Vec<MemoryBank>,
    pub bev_hist: Vec<Option<(BevFeature, Pose)>>,
    pub frame_index: u64,
}

impl DecoderState {
    pub fn new(cfg: &DecoderConfig) -> Self {
        Self {
            banks: cfg.history.iter().map(|&t| MemoryBank::new(t)).collect(),
            bev_hist: vec![None; cfg.stages],
            frame_index: 0,
        }
    }
}

/// Per-frame sensor inputs.
pub struct FrameInputs<'a> {
    pub image_feats: &'a [ImageFeature],
    pub depths: &'a [DepthDistribution],
    pub cameras: &'a [Camera],
    pub pose: Pose,
}

/// Forward intermediates kept for loss supervision and head training.
#[derive(Debug, Clone)]
pub struct StageTrace {
    /// BEV feature entering the occupancy predictor at each layer.
    pub bev_layers: Vec<BevFeature>,
    /// Refined BEV after the last layer.
    pub final_bev: BevFeature,
    /// What temporal fusion added on top of the re-expanded volume.
    pub fusion_delta: VoxelGrid,
    pub output: VoxelGrid,
    pub w_final: OccupancyWeights,
}

pub struct FramePrediction {
    /// (K+1)-channel class logits at full resolution.
    pub logits: VoxelGrid,
    pub flow: FlowGrid,
    /// Final occupied weights per stage, coarsest first.
    pub stage_weights: Vec<OccupancyWeights>,
}

/// Per-cell layer normalization over channels (no learned affine).
pub fn layer_norm(b: &BevFeature) -> BevFeature {
    let mut out = b.clone();
    let c = b.channels();
    let (nx, ny) = b.dims();
    for ix in 0..nx {
        for iy in 0..ny {
            let cell = out.cell_mut(ix, iy);
            let mean = cell.iter().sum::<f64>() / c as f64;
            let var = cell.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for x in cell.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
    }
    out
}

/// Resample a stored BEV feature into the current ego frame. Cells that
/// leave the stored footprint become zero.
pub fn align_bev(
    stored: &BevFeature,
    stored_pose: &Pose,
    current_pose: &Pose,
    spec: &GridSpec,
) -> BevFeature {
    let (nx, ny) = stored.dims();
    let mut out = BevFeature::zeros(stored.channels(), (nx, ny));
    let relative = stored_pose.inverse().compose(current_pose);
    let z_ref = spec.origin[2] + 0.5 * spec.dims.2 as f64 * spec.voxel_size;
    let mut buf = vec![0.0; stored.channels()];
    for ix in 0..nx {
        for iy in 0..ny {
            let center = spec.voxel_to_world((ix, iy, 0));
            let p = relative.apply(&nalgebra::Vector3::new(center.x, center.y, z_ref));
            let cc = spec.continuous_cell(&p);
            if cc.x < 0.0 || cc.y < 0.0 || cc.x > (nx - 1) as f64 || cc.y > (ny - 1) as f64 {
                continue;
            }
            stored.sample_bilinear(cc.x, cc.y, &mut buf);
            out.cell_mut(ix, iy).copy_from_slice(&buf);
        }
    }
    out
}

pub struct StageContext<'a> {
    pub inputs: &'a FrameInputs<'a>,
    /// Stage-resolution grid spec.
    pub spec: GridSpec,
    pub cfg: &'a DecoderConfig,
    /// 0-based stage index (0 = coarsest).
    pub stage_index: usize,
    pub frame_index: u64,
}

/// One cascade stage: returns the fused stage output, its final occupied
/// weights, and the trace. Updates the stage bank and BEV history in place.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    ctx: &StageContext,
    coarse: &VoxelGrid,
    prev: Option<&VoxelGrid>,
    prev_w: Option<&OccupancyWeights>,
    bank: &mut MemoryBank,
    bev_hist: &mut Option<(BevFeature, Pose)>,
    params: &StageParams,
) -> Result<StageTrace, DecoderError> {
    let cfg = ctx.cfg;
    let ab = &cfg.ablation;
    let dims = ctx.spec.dims;
    let mut v_in = coarse.clone();
    if let Some(p) = prev {
        v_in.add_assign(p)?;
    }
    let mut w = if ab.srop_recursive {
        srop_init(dims, prev_w)
    } else {
        srop_init(dims, None)
    };
    let mut b = if cfg.collapse_weighted {
        voxel_to_bev_weighted(&v_in, &w)?
    } else {
        voxel_to_bev(&v_in, &params.collapse)?
    };
    // Aligned history BEV (zeros when absent) shared by every layer.
    let hist = match (ab.oa_tsa, bev_hist.as_ref()) {
        (true, Some((stored, pose))) => align_bev(stored, pose, &ctx.inputs.pose, &ctx.spec),
        _ => BevFeature::zeros(cfg.channels, (dims.0, dims.1)),
    };
    let mut bev_layers = Vec::with_capacity(cfg.layers);
    for layer in 0..cfg.layers {
        bev_layers.push(b.clone());
        let lp = &params.layers[layer];
        // Occupancy refinement first: the attentions read this layer's W.
        w = if ab.srop_recursive {
            srop_step(&b, &w, params.srop.alpha[layer], &params.srop)?
        } else {
            let zeros = OccupancyWeights::zeros(dims);
            srop_step(&b, &zeros, 0.0, &params.srop)?
        };
        if ab.oa_tsa {
            let w_bar = z_average(&w);
            let delta = oa_tsa(&b, &hist, &w_bar, &lp.tsa)?;
            let mut summed = b.clone();
            for (d, x) in summed.data_mut().iter_mut().zip(delta.data()) {
                *d += x;
            }
            b = layer_norm(&summed);
        }
        if ab.vanilla_sca || ab.oa_sca {
            let delta = if ab.vanilla_sca {
                vanilla_sca(
                    &b,
                    ctx.inputs.image_feats,
                    ctx.inputs.cameras,
                    &ctx.spec,
                    cfg.n_ref,
                    &lp.sca,
                )
            } else {
                let gate = if ab.depth_only_reweight {
                    SamplingGate::Disabled
                } else if cfg.train_gate {
                    SamplingGate::Train(
                        RngStream::new(cfg.seed)
                            .derive(ctx.frame_index)
                            .derive(ctx.stage_index as u64)
                            .derive(layer as u64),
                    )
                } else {
                    SamplingGate::Eval {
                        threshold: cfg.eval_threshold,
                    }
                };
                let opts = OaScaOptions {
                    sigma: cfg.sigma,
                    n_ref: cfg.n_ref,
                    gate,
                    use_weight: !ab.depth_only_reweight,
                    use_beta: true,
                };
                let sca_ctx = ScaContext {
                    image_feats: ctx.inputs.image_feats,
                    depths: ctx.inputs.depths,
                    cameras: ctx.inputs.cameras,
                    spec: &ctx.spec,
                };
                oa_sca(&b, &w, &sca_ctx, &opts, &lp.sca)
            };
            let mut summed = b.clone();
            for (d, x) in summed.data_mut().iter_mut().zip(delta.data()) {
                *d += x;
            }
            b = layer_norm(&summed);
        }
    }
    let v_tilde = bev_to_voxel(&b, &w)?;
    let (output, fusion_delta) = if ab.fusion {
        let stream = cfg.stream_config(ctx.stage_index, ctx.spec.voxel_count());
        let fused = sparse_temporal_fusion(
            &v_tilde,
            &w,
            &ctx.spec,
            bank,
            &ctx.inputs.pose,
            &stream,
            &params.fusion,
        )?;
        let mut delta = fused.clone();
        for (d, x) in delta.data_mut().iter_mut().zip(v_tilde.data()) {
            *d -= x;
        }
        (fused, delta)
    } else {
        let delta = VoxelGrid::zeros(cfg.channels, dims);
        (v_tilde.clone(), delta)
    };
    if ab.fusion {
        *bank = bank_update(
            bank.clone(),
            MemoryEntry {
                grid: output.clone(),
                pose: ctx.inputs.pose.clone(),
                timestamp: ctx.frame_index,
            },
        );
    }
    if ab.oa_tsa {
        *bev_hist = Some((b.clone(), ctx.inputs.pose.clone()));
    }
    Ok(StageTrace {
        bev_layers,
        final_bev: b,
        fusion_delta,
        output,
        w_final: w,
    })
}

/// Apply the prediction heads voxel by voxel.
pub fn heads(
    v: &VoxelGrid,
    sem_head: &Mlp,
    flow_head: &Mlp,
) -> Result<(VoxelGrid, FlowGrid), MlpError> {
    let dims = v.dims();
    let classes = sem_head.out_dim();
    let mut logits = VoxelGrid::zeros(classes, dims);
    let mut flow = FlowGrid::zeros(dims);
    for idx in 0..v.voxel_count() {
        let feat = v.voxel_linear(idx);
        let l = sem_head.forward(feat)?;
        logits.voxel_linear_mut(idx).copy_from_slice(&l);
        let f = flow_head.forward(feat)?;
        flow.data_mut()[2 * idx] = f[0];
        flow.data_mut()[2 * idx + 1] = f[1];
    }
    Ok((logits, flow))
}

/// Argmax class per voxel.
pub fn argmax_semantic(logits: &VoxelGrid) -> SemanticGrid {
    let mut out = SemanticGrid::empty(logits.dims());
    for idx in 0..logits.voxel_count() {
        let row = logits.voxel_linear(idx);
        let mut best = 0usize;
        for (i, v) in row.iter().enumerate().skip(1) {
            if *v > row[best] {
                best = i;
            }
        }
        out.labels_mut()[idx] = best as u8;
    }
    out
}

/// Run the full cascade over one frame's pyramid, chaining stage outputs
/// through 2x upsampling, and produce the head predictions plus per-stage
/// traces for loss supervision.
pub fn run_decoder(
    pyramid: &[VoxelGrid],
    inputs: &FrameInputs,
    full_spec: &GridSpec,
    params: &DecoderParams,
    cfg: &DecoderConfig,
    state: &mut DecoderState,
) -> Result<(FramePrediction, Vec<StageTrace>), DecoderError> {
    cfg.validate(full_spec.dims)?;
    if pyramid.len() != cfg.stages {
        return Err(DecoderError::Config(format!(
            "pyramid has {} levels for {} stages",
            pyramid.len(),
            cfg.stages
        )));
    }
    let mut traces: Vec<StageTrace> = Vec::with_capacity(cfg.stages);
    let mut prev: Option<VoxelGrid> = None;
    for i in 0..cfg.stages {
        let factor = 1usize << (cfg.stages - 1 - i);
        let ctx = StageContext {
            inputs,
            spec: full_spec.downscaled(factor),
            cfg,
            stage_index: i,
            frame_index: state.frame_index,
        };
        let prev_w = traces.last().map(|t| t.w_final.clone());
        let trace = run_stage(
            &ctx,
            &pyramid[i],
            prev.as_ref(),
            prev_w.as_ref(),
            &mut state.banks[i],
            &mut state.bev_hist[i],
            &params.stages[i],
        )?;
        prev = if i + 1 < cfg.stages {
            Some(upsample2x_grid(&trace.output))
        } else {
            None
        };
        traces.push(trace);
    }
    let last = traces.last().expect("at least one stage");
    let (logits, flow) = heads(&last.output, &params.sem_head, &params.flow_head)?;
    let prediction = FramePrediction {
        logits,
        flow,
        stage_weights: traces.iter().map(|t| t.w_final.clone()).collect(),
    };
    state.frame_index += 1;
    Ok((prediction, traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lift_splat::{coarse_pyramid, lift, splat_into};
    use crate::scenegen::{build_frame, SceneConfig};
    use approx::assert_relative_eq;

    fn tiny_scene(seed: u64) -> SceneConfig {
        let mut cfg = SceneConfig::default_desk(seed);
        cfg.grid = GridSpec::new((16, 16, 8), 0.5, [-4.0, -4.0, 0.0]).unwrap();
        cfg.cameras.count = 2;
        cfg.cameras.image_width = 16;
        cfg.cameras.image_height = 12;
        cfg.feature_channels = 8;
        cfg.frames = 3;
        cfg.boxes.truncate(1);
        cfg.boxes[0] = crate::scenegen::BoxSpec {
            class: 2,
            size: [1.0, 1.0, 1.0],
            center: [2.0, 0.0, 1.0],
            velocity: [0.2, 0.0],
        };
        cfg.validate().unwrap();
        cfg
    }

    fn decoder_cfg(scene: &SceneConfig, seed: u64) -> DecoderConfig {
        let mut cfg = DecoderConfig::reference(scene.feature_channels, scene.classes, seed);
        cfg.history = vec![4, 2, 2];
        cfg
    }

    fn build_pyramid(scene: &SceneConfig, truth: &crate::scenegen::FrameTruth, stages: usize) -> Vec<VoxelGrid> {
        let cams = scene.camera_rig();
        let mut grid = VoxelGrid::zeros(scene.feature_channels, scene.grid.dims);
        for (i, cam) in cams.iter().enumerate() {
            let pts = lift(&truth.features[i], &truth.depths[i], cam).unwrap();
            splat_into(&pts, &scene.grid, &mut grid);
        }
        coarse_pyramid(&grid, stages).unwrap()
    }

    fn run_frames(scene: &SceneConfig, dcfg: &DecoderConfig, frames: usize) -> Vec<FramePrediction> {
        let params = DecoderParams::seeded(dcfg, scene.grid.dims);
        let mut state = DecoderState::new(dcfg);
        let cams = scene.camera_rig();
        (0..frames)
            .map(|t| {
                let truth = build_frame(scene, t);
                let pyramid = build_pyramid(scene, &truth, dcfg.stages);
                let inputs = FrameInputs {
                    image_feats: &truth.features,
                    depths: &truth.depths,
                    cameras: &cams,
                    pose: truth.ego_pose.clone(),
                };
                run_decoder(&pyramid, &inputs, &scene.grid, &params, dcfg, &mut state)
                    .unwrap()
                    .0
            })
            .collect()
    }

    #[test]
    fn stage_dims_double_between_stages() {
        let scene = tiny_scene(1);
        let dcfg = decoder_cfg(&scene, 11);
        let preds = run_frames(&scene, &dcfg, 1);
        let w = &preds[0].stage_weights;
        assert_eq!(w.len(), 3);
        assert_eq!(w[0].dims(), (4, 4, 2));
        assert_eq!(w[1].dims(), (8, 8, 4));
        assert_eq!(w[2].dims(), (16, 16, 8));
    }

    #[test]
    fn per_stage_weights_are_probabilities() {
        let scene = tiny_scene(2);
        let dcfg = decoder_cfg(&scene, 12);
        let preds = run_frames(&scene, &dcfg, 2);
        for p in &preds {
            for w in &p.stage_weights {
                assert!(w.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn decoder_is_deterministic() {
        let scene = tiny_scene(3);
        let dcfg = decoder_cfg(&scene, 13);
        let a = run_frames(&scene, &dcfg, 2);
        let b = run_frames(&scene, &dcfg, 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.logits.data(), y.logits.data());
            assert_eq!(x.flow.data(), y.flow.data());
        }
    }

    #[test]
    fn train_gate_is_deterministic_too() {
        let scene = tiny_scene(3);
        let mut dcfg = decoder_cfg(&scene, 14);
        dcfg.train_gate = true;
        let a = run_frames(&scene, &dcfg, 1);
        let b = run_frames(&scene, &dcfg, 1);
        assert_eq!(a[0].logits.data(), b[0].logits.data());
    }

    #[test]
    fn zero_input_stage_gives_zero_features_and_bias_weights() {
        // Zero coarse features with zero collapse output: the occupancy
        // weights come from the predictor bias path alone, features stay 0.
        let scene = tiny_scene(4);
        let mut dcfg = decoder_cfg(&scene, 15);
        dcfg.stages = 1;
        dcfg.history = vec![2];
        dcfg.ablation = AblationConfig {
            oa_sca: false,
            oa_tsa: false,
            fusion: false,
            srop_recursive: true,
            vanilla_sca: false,
            depth_only_reweight: false,
        };
        let mut params = DecoderParams::seeded(&dcfg, scene.grid.dims);
        // Zero every stage parameter so f(B) = sigmoid(0) everywhere.
        let stage = &mut params.stages[0];
        stage.collapse = crate::grid::ZCollapse::uniform(dcfg.channels, scene.grid.dims.2);
        for l in stage.srop.predictor.layers.iter_mut() {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let truth = build_frame(&scene, 0);
        let cams = scene.camera_rig();
        let inputs = FrameInputs {
            image_feats: &truth.features,
            depths: &truth.depths,
            cameras: &cams,
            pose: truth.ego_pose.clone(),
        };
        let zero_pyramid = vec![VoxelGrid::zeros(dcfg.channels, scene.grid.dims)];
        let mut state = DecoderState::new(&dcfg);
        let (pred, traces) =
            run_decoder(&zero_pyramid, &inputs, &scene.grid, &params, &dcfg, &mut state).unwrap();
        // W = clamp(sigmoid(0) + 0.5·sigmoid(0)·... layered); layer 1 gives
        // 0.5, layer 2 gives 0.5 + 0.5·0.5 = 0.75.
        for v in pred.stage_weights[0].data() {
            assert_relative_eq!(*v, 0.75, epsilon = 1e-12);
        }
        // Features: B = 0 → bev_to_voxel(0, w) = 0 everywhere.
        assert!(traces[0].output.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ablation_ladder_runs_and_differs() {
        let scene = tiny_scene(5);
        let base = decoder_cfg(&scene, 16);
        let ladder = [
            AblationConfig {
                oa_sca: false,
                oa_tsa: false,
                fusion: false,
                srop_recursive: false,
                vanilla_sca: false,
                depth_only_reweight: false,
            },
            AblationConfig {
                oa_sca: true,
                oa_tsa: false,
                fusion: false,
                srop_recursive: false,
                vanilla_sca: false,
                depth_only_reweight: false,
            },
            AblationConfig {
                oa_sca: true,
                oa_tsa: false,
                fusion: false,
                srop_recursive: true,
                vanilla_sca: false,
                depth_only_reweight: false,
            },
            AblationConfig {
                oa_sca: true,
                oa_tsa: false,
                fusion: true,
                srop_recursive: true,
                vanilla_sca: false,
                depth_only_reweight: false,
            },
            AblationConfig::default(),
        ];
        let mut outputs = Vec::new();
        for ab in ladder {
            let mut cfg = base.clone();
            cfg.ablation = ab;
            let preds = run_frames(&scene, &cfg, 2);
            let sum: f64 = preds[1].logits.data().iter().map(|x| x.abs()).sum();
            outputs.push(sum);
        }
        for i in 0..outputs.len() {
            for j in i + 1..outputs.len() {
                assert!(
                    (outputs[i] - outputs[j]).abs() > 1e-9,
                    "ladder rows {i} and {j} produced identical outputs"
                );
            }
        }
    }

    #[test]
    fn heads_zero_features_echo_bias() {
        let mut sem = Mlp::new(&[4, 8, 3], &[Activation::Relu, Activation::Identity]);
        sem.layers[1].bias.copy_from_slice(&[0.5, -1.0, 2.0]);
        let flow = Mlp::new(&[4, 8, 2], &[Activation::Relu, Activation::Identity]);
        let v = VoxelGrid::zeros(4, (2, 2, 1));
        let (logits, f) = heads(&v, &sem, &flow).unwrap();
        for idx in 0..4 {
            assert_eq!(logits.voxel_linear(idx), &[0.5, -1.0, 2.0]);
        }
        assert!(f.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dominant_empty_bias_argmax_is_all_empty() {
        let mut sem = Mlp::new(&[2, 4, 3], &[Activation::Relu, Activation::Identity]);
        sem.layers[1].bias[0] = 10.0;
        let flow = Mlp::new(&[2, 4, 2], &[Activation::Relu, Activation::Identity]);
        let mut v = VoxelGrid::zeros(2, (2, 1, 1));
        v.data_mut().iter_mut().for_each(|x| *x = 0.3);
        let (logits, _) = heads(&v, &sem, &flow).unwrap();
        let sem_grid = argmax_semantic(&logits);
        assert!(sem_grid.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn align_bev_identity_pose_is_identity_map() {
        let spec = GridSpec::new((4, 4, 2), 0.5, [0.0, 0.0, 0.0]).unwrap();
        let mut b = BevFeature::zeros(2, (4, 4));
        for (i, x) in b.data_mut().iter_mut().enumerate() {
            *x = i as f64;
        }
        let aligned = align_bev(&b, &Pose::identity(), &Pose::identity(), &spec);
        for (a, e) in aligned.data().iter().zip(b.data()) {
            assert_relative_eq!(*a, *e, epsilon = 1e-12);
        }
    }

    #[test]
    fn align_bev_one_cell_translation_shifts() {
        let spec = GridSpec::new((4, 1, 2), 0.5, [0.0, 0.0, 0.0]).unwrap();
        let mut b = BevFeature::zeros(1, (4, 1));
        for ix in 0..4 {
            b.cell_mut(ix, 0)[0] = ix as f64;
        }
        // Current ego one cell (+0.5 m) ahead of the stored frame.
        let stored_pose = Pose::identity();
        let current = Pose::from_translation(nalgebra::Vector3::new(0.5, 0.0, 0.0));
        let aligned = align_bev(&b, &stored_pose, &current, &spec);
        for ix in 0..3 {
            assert_relative_eq!(aligned.cell(ix, 0)[0], (ix + 1) as f64, epsilon = 1e-9);
        }
        // The last cell fell off the stored footprint.
        assert_eq!(aligned.cell(3, 0)[0], 0.0);
    }

    #[test]
    fn layer_norm_normalizes_cells() {
        let mut b = BevFeature::zeros(4, (1, 1));
        b.cell_mut(0, 0).copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let n = layer_norm(&b);
        let cell = n.cell(0, 0);
        let mean: f64 = cell.iter().sum::<f64>() / 4.0;
        let var: f64 = cell.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
        assert_relative_eq!(mean, 0.0, epsilon = 1e-12);
        assert_relative_eq!(var, 1.0, epsilon = 1e-4);
    }

    #[test]
    fn single_stage_decoder_degenerates() {
        let scene = tiny_scene(6);
        let mut dcfg = decoder_cfg(&scene, 17);
        dcfg.stages = 1;
        dcfg.history = vec![2];
        let preds = run_frames(&scene, &dcfg, 1);
        assert_eq!(preds[0].stage_weights.len(), 1);
        assert_eq!(preds[0].stage_weights[0].dims(), scene.grid.dims);
        assert_eq!(preds[0].logits.dims(), scene.grid.dims);
        assert_eq!(preds[0].logits.channels(), scene.classes + 1);
    }
}
