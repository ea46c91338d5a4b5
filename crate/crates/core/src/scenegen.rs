//! Deterministic synthetic dynamic scenes: box primitives over a ground
//! plane, rasterized into ego-frame semantic/flow grids, with per-camera
//! near-one-hot depth distributions and procedural class-coded image
//! features. Everything derives from the scene seed.

use crate::geometry::{back_project, Camera, GridSpec, Pose};
use crate::grid::{FlowGrid, SemanticGrid};
use crate::lift_splat::{DepthBins, DepthDistribution, ImageFeature};
use crate::metrics::{dda_raycast, QueryRay};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("scene config invalid: {0}")]
    Invalid(String),
}

/// Axis-aligned box primitive on a linear planar trajectory.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BoxSpec {
    pub class: u8,
    /// Full extents (meters).
    pub size: [f64; 3],
    /// World-frame center at t = 0.
    pub center: [f64; 3],
    /// Planar world velocity (m/s).
    pub velocity: [f64; 2],
}

impl BoxSpec {
    pub fn center_at(&self, time: f64) -> Vector3<f64> {
        Vector3::new(
            self.center[0] + self.velocity[0] * time,
            self.center[1] + self.velocity[1] * time,
            self.center[2],
        )
    }

    pub fn contains(&self, p: &Vector3<f64>, time: f64) -> bool {
        let c = self.center_at(time);
        (p.x - c.x).abs() <= self.size[0] * 0.5
            && (p.y - c.y).abs() <= self.size[1] * 0.5
            && (p.z - c.z).abs() <= self.size[2] * 0.5
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EgoConfig {
    /// Planar world position at t = 0.
    pub start: [f64; 2],
    /// Planar world velocity (m/s).
    pub velocity: [f64; 2],
    pub yaw: f64,
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CameraRigConfig {
    /// Cameras spread uniformly in yaw.
    pub count: usize,
    /// Mounting height above the ego origin (meters).
    pub height: f64,
    pub fov_deg: f64,
    pub image_width: usize,
    pub image_height: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    pub frames: usize,
    /// Seconds between frames.
    pub frame_interval: f64,
    /// K: semantic classes beyond empty (labels 1..=K).
    pub classes: usize,
    pub feature_channels: usize,
    pub grid: GridSpec,
    pub ego: EgoConfig,
    pub cameras: CameraRigConfig,
    pub depth_bins: DepthBins,
    /// Probability mass bled onto the two neighboring depth bins.
    pub depth_smoothing: f64,
    pub ground_class: u8,
    pub boxes: Vec<BoxSpec>,
    pub max_ray_range: f64,
}

impl SceneConfig {
    /// The desk-scale default: 64×64×16 grid at 0.25 m, six cameras at 60°
    /// spacing, three moving boxes over a ground plane.
    pub fn default_desk(seed: u64) -> Self {
        Self {
            seed,
            frames: 8,
            frame_interval: 0.5,
            classes: 6,
            feature_channels: 32,
            grid: GridSpec::new((64, 64, 16), 0.25, [-8.0, -8.0, 0.0]).unwrap(),
            ego: EgoConfig {
                start: [0.0, 0.0],
                velocity: [0.0, 0.0],
                yaw: 0.0,
                yaw_rate: 0.0,
            },
            cameras: CameraRigConfig {
                count: 6,
                height: 1.5,
                fov_deg: 70.0,
                image_width: 48,
                image_height: 32,
            },
            depth_bins: DepthBins {
                start: 1.0,
                step: 0.5,
                count: 88,
            },
            depth_smoothing: 0.05,
            ground_class: 1,
            boxes: vec![
                BoxSpec {
                    class: 2,
                    size: [1.5, 1.5, 1.25],
                    center: [4.0, 0.5, 0.875],
                    velocity: [0.5, 0.0],
                },
                BoxSpec {
                    class: 3,
                    size: [1.25, 1.25, 1.0],
                    center: [-3.5, 2.5, 0.75],
                    velocity: [0.0, -0.5],
                },
                BoxSpec {
                    class: 4,
                    size: [1.5, 1.0, 1.5],
                    center: [0.5, -4.0, 1.0],
                    velocity: [0.0, 0.0],
                },
            ],
            max_ray_range: 40.0,
        }
    }

    /// Sorted distinct box classes; these carry supervised flow.
    pub fn foreground_classes(&self) -> Vec<u8> {
        let mut fg: Vec<u8> = self.boxes.iter().map(|b| b.class).collect();
        fg.sort_unstable();
        fg.dedup();
        fg
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.frames == 0 {
            return Err(SceneError::Invalid("frames must be positive".into()));
        }
        if self.frame_interval <= 0.0 {
            return Err(SceneError::Invalid("frame_interval must be positive".into()));
        }
        if self.classes == 0 || self.classes > 250 {
            return Err(SceneError::Invalid("classes out of range".into()));
        }
        if self.ground_class == 0 || self.ground_class as usize > self.classes {
            return Err(SceneError::Invalid("ground_class out of range".into()));
        }
        if !(0.0..1.0).contains(&self.depth_smoothing) {
            return Err(SceneError::Invalid("depth_smoothing must be in [0, 1)".into()));
        }
        if self.cameras.count == 0 {
            return Err(SceneError::Invalid("camera count must be positive".into()));
        }
        if !(1.0..180.0).contains(&self.cameras.fov_deg) {
            return Err(SceneError::Invalid("fov_deg out of range".into()));
        }
        // Envelope: the world-frame grid extent at the identity ego pose.
        let lo = self.grid.origin_vec();
        let hi = lo
            + Vector3::new(
                self.grid.dims.0 as f64 * self.grid.voxel_size,
                self.grid.dims.1 as f64 * self.grid.voxel_size,
                self.grid.dims.2 as f64 * self.grid.voxel_size,
            );
        for (i, b) in self.boxes.iter().enumerate() {
            if b.class == 0 || b.class as usize > self.classes {
                return Err(SceneError::Invalid(format!("box {i} class out of range")));
            }
            for t in 0..self.frames {
                let time = t as f64 * self.frame_interval;
                let c = b.center_at(time);
                for a in 0..3 {
                    if c[a] - b.size[a] * 0.5 < lo[a] || c[a] + b.size[a] * 0.5 > hi[a] {
                        return Err(SceneError::Invalid(format!(
                            "box {i} leaves the scene envelope at frame {t}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn ego_pose(&self, frame: usize) -> Pose {
        let time = frame as f64 * self.frame_interval;
        Pose::from_yaw_translation(
            self.ego.yaw + self.ego.yaw_rate * time,
            Vector3::new(
                self.ego.start[0] + self.ego.velocity[0] * time,
                self.ego.start[1] + self.ego.velocity[1] * time,
                0.0,
            ),
        )
    }

    /// The fixed camera rig, as camera-from-ego extrinsics.
    pub fn camera_rig(&self) -> Vec<Camera> {
        let rig = &self.cameras;
        let (w, h) = (rig.image_width, rig.image_height);
        let f = w as f64 * 0.5 / (rig.fov_deg.to_radians() * 0.5).tan();
        (0..rig.count)
            .map(|i| {
                let yaw = 2.0 * std::f64::consts::PI * i as f64 / rig.count as f64;
                let extr = camera_from_ego(yaw, Vector3::new(0.0, 0.0, rig.height));
                Camera::pinhole(f, f, w as f64 * 0.5, h as f64 * 0.5, extr, (h, w)).unwrap()
            })
            .collect()
    }

    /// Seeded class-embedding table with one extra row for sky pixels.
    pub fn class_embeddings(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5CE1E_E3BED);
        (0..=self.classes + 1)
            .map(|_| {
                (0..self.feature_channels)
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect()
            })
            .collect()
    }
}

const SKY_EMBED_OFFSET: usize = 1;

/// Camera-from-ego extrinsics for a camera at `position` whose optical axis
/// points along ego yaw: camera x right, y down, z forward.
pub fn camera_from_ego(yaw: f64, position: Vector3<f64>) -> Pose {
    let (s, c) = yaw.sin_cos();
    // Rows are the camera axes expressed in the ego frame.
    let rotation = Matrix3::new(
        s, -c, 0.0, // right
        0.0, 0.0, -1.0, // down
        c, s, 0.0, // forward
    );
    let translation = -(rotation * position);
    Pose::new(rotation, translation).expect("orthonormal by construction")
}

/// Ground truth for one frame.
#[derive(Debug, Clone)]
pub struct FrameTruth {
    pub semantic: SemanticGrid,
    pub flow: FlowGrid,
    pub depths: Vec<DepthDistribution>,
    pub features: Vec<ImageFeature>,
    /// Ground-truth depth bin per pixel per camera; None on sky pixels.
    pub depth_gt_bins: Vec<Vec<Option<usize>>>,
    pub ego_pose: Pose,
}

/// Rasterize the scene at frame t into a full `FrameTruth`.
pub fn build_frame(cfg: &SceneConfig, frame: usize) -> FrameTruth {
    assert!(frame < cfg.frames, "frame index out of range");
    let time = frame as f64 * cfg.frame_interval;
    let ego_pose = cfg.ego_pose(frame);
    let spec = &cfg.grid;
    let (nx, ny, nz) = spec.dims;
    let mut semantic = SemanticGrid::empty(spec.dims);
    let mut flow = FlowGrid::zeros(spec.dims);
    let ego_rot_t = ego_pose.rotation().transpose();
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                let center_ego = spec.voxel_to_world((ix, iy, iz));
                let world = ego_pose.apply(&center_ego);
                let mut label = 0u8;
                let mut velocity = [0.0, 0.0];
                for b in &cfg.boxes {
                    if b.contains(&world, time) {
                        label = b.class;
                        // World velocity expressed in ego axes.
                        let v_ego =
                            ego_rot_t * Vector3::new(b.velocity[0], b.velocity[1], 0.0);
                        velocity = [v_ego.x, v_ego.y];
                        break;
                    }
                }
                if label == 0 && iz == 0 {
                    label = cfg.ground_class;
                }
                semantic.set(ix, iy, iz, label);
                if label != 0 {
                    flow.set(ix, iy, iz, velocity);
                }
            }
        }
    }
    let cameras = cfg.camera_rig();
    let embeddings = cfg.class_embeddings();
    let mut depths = Vec::with_capacity(cameras.len());
    let mut features = Vec::with_capacity(cameras.len());
    let mut depth_gt_bins = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let hits = pixel_hits(&semantic, spec, cam, cfg.max_ray_range);
        depths.push(render_depth_distribution_from_hits(
            &hits,
            cam,
            cfg.depth_bins,
            cfg.depth_smoothing,
        ));
        features.push(synth_image_features_from_hits(
            &hits,
            cam,
            cfg.feature_channels,
            cfg.classes,
            &embeddings,
        ));
        depth_gt_bins.push(
            hits.iter()
                .map(|h| h.map(|(_, d)| cfg.depth_bins.bin_of(d)))
                .collect(),
        );
    }
    FrameTruth {
        semantic,
        flow,
        depths,
        features,
        depth_gt_bins,
        ego_pose,
    }
}

/// First-hit class and camera-frame z-depth per pixel, row-major.
pub fn pixel_hits(
    semantic: &SemanticGrid,
    spec: &GridSpec,
    camera: &Camera,
    max_range: f64,
) -> Vec<Option<(u8, f64)>> {
    let (h, w) = camera.image_size();
    let cam_center = camera.extrinsics().inverse().apply(&Vector3::zeros());
    let mut out = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            // Unit ray through the pixel center; the same point at camera
            // depth 1 fixes the direction and the z-depth scale.
            let at_unit_depth = back_project(camera, u as f64 + 0.5, v as f64 + 0.5, 1.0);
            let dir = at_unit_depth - cam_center;
            let ray_len_per_z = dir.norm();
            let ray = QueryRay {
                origin: cam_center,
                direction: dir / ray_len_per_z,
            };
            let hit = dda_raycast(semantic, spec, &ray, max_range)
                .map(|hit| (hit.class, hit.depth / ray_len_per_z));
            out.push(hit);
        }
    }
    out
}

/// Near-one-hot depth distribution: mass 1-ε on the hit bin, ε split onto
/// its neighbors (edge bins return the missing share to the modal bin);
/// sky pixels are uniform.
pub fn render_depth_distribution(
    semantic: &SemanticGrid,
    spec: &GridSpec,
    camera: &Camera,
    bins: DepthBins,
    smoothing: f64,
    max_range: f64,
) -> DepthDistribution {
    let hits = pixel_hits(semantic, spec, camera, max_range);
    render_depth_distribution_from_hits(&hits, camera, bins, smoothing)
}

fn render_depth_distribution_from_hits(
    hits: &[Option<(u8, f64)>],
    camera: &Camera,
    bins: DepthBins,
    smoothing: f64,
) -> DepthDistribution {
    let (h, w) = camera.image_size();
    let d = bins.count;
    let mut probs = vec![0.0; d * h * w];
    for (px, hit) in hits.iter().enumerate() {
        let row = &mut probs[px * d..(px + 1) * d];
        match hit {
            None => row.fill(1.0 / d as f64),
            Some((_, depth)) => {
                let modal = bins.bin_of(*depth);
                let mut modal_mass = 1.0 - smoothing;
                for nb in [modal.wrapping_sub(1), modal + 1] {
                    if nb < d && nb != modal {
                        row[nb] = smoothing * 0.5;
                    } else {
                        modal_mass += smoothing * 0.5;
                    }
                }
                row[modal] = modal_mass;
            }
        }
    }
    DepthDistribution::from_probs(bins, h, w, probs).expect("rows normalized by construction")
}

/// Class-coded image features: the first-hit class embedding (sky pixels
/// use the reserved extra row) plus a deterministic sinusoidal position
/// code.
pub fn synth_image_features(
    semantic: &SemanticGrid,
    spec: &GridSpec,
    camera: &Camera,
    channels: usize,
    classes: usize,
    embeddings: &[Vec<f64>],
    max_range: f64,
) -> ImageFeature {
    let hits = pixel_hits(semantic, spec, camera, max_range);
    synth_image_features_from_hits(&hits, camera, channels, classes, embeddings)
}

fn synth_image_features_from_hits(
    hits: &[Option<(u8, f64)>],
    camera: &Camera,
    channels: usize,
    classes: usize,
    embeddings: &[Vec<f64>],
) -> ImageFeature {
    let (h, w) = camera.image_size();
    let mut out = ImageFeature::zeros(channels, h, w);
    for v in 0..h {
        for u in 0..w {
            let class_row = match hits[v * w + u] {
                Some((c, _)) => c as usize,
                None => classes + SKY_EMBED_OFFSET,
            };
            let embed = &embeddings[class_row];
            let dst = out.pixel_mut(u, v);
            for (ci, d) in dst.iter_mut().enumerate() {
                *d = embed[ci] + positional_code(ci, u, v, w, h);
            }
        }
    }
    out
}

fn positional_code(channel: usize, u: usize, v: usize, w: usize, h: usize) -> f64 {
    let fu = (u as f64 + 0.5) / w as f64;
    let fv = (v as f64 + 0.5) / h as f64;
    let freq = (1 + channel % 4) as f64 * std::f64::consts::PI;
    let phase = if channel % 2 == 0 {
        freq * fu
    } else {
        freq * fv
    };
    0.3 * if (channel / 2) % 2 == 0 {
        phase.sin()
    } else {
        phase.cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_scene(seed: u64) -> SceneConfig {
        let mut cfg = SceneConfig::default_desk(seed);
        cfg.grid = GridSpec::new((16, 16, 8), 0.5, [-4.0, -4.0, 0.0]).unwrap();
        cfg.cameras.count = 2;
        cfg.cameras.image_width = 16;
        cfg.cameras.image_height = 12;
        cfg.feature_channels = 8;
        cfg.frames = 4;
        cfg.boxes = vec![BoxSpec {
            class: 2,
            size: [1.0, 1.0, 1.0],
            center: [2.0, 0.0, 1.0],
            velocity: [0.0, 0.0],
        }];
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn determinism_same_config_same_truth() {
        let cfg = small_scene(7);
        let a = build_frame(&cfg, 1);
        let b = build_frame(&cfg, 1);
        assert_eq!(a.semantic, b.semantic);
        assert_eq!(a.flow, b.flow);
        assert_eq!(a.depths, b.depths);
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn static_box_identical_frames_zero_flow() {
        let cfg = small_scene(3);
        let a = build_frame(&cfg, 0);
        let b = build_frame(&cfg, 2);
        assert_eq!(a.semantic, b.semantic);
        assert!(a.flow.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ground_plane_fills_exactly_z0() {
        let cfg = small_scene(1);
        let truth = build_frame(&cfg, 0);
        let (nx, ny, nz) = cfg.grid.dims;
        for ix in 0..nx {
            for iy in 0..ny {
                for iz in 0..nz {
                    let l = truth.semantic.get(ix, iy, iz);
                    if iz == 0 {
                        assert!(l == cfg.ground_class || l == 2);
                    } else {
                        assert!(l != cfg.ground_class);
                    }
                }
            }
        }
    }

    #[test]
    fn moving_box_shifts_two_cells_per_frame() {
        // +1 m/s in x at 0.5 s per frame and 0.25 m voxels → 2 cells/frame.
        let mut cfg = SceneConfig::default_desk(5);
        cfg.frames = 3;
        cfg.boxes = vec![BoxSpec {
            class: 2,
            size: [1.0, 1.0, 1.0],
            center: [0.0, 0.0, 0.75],
            velocity: [1.0, 0.0],
        }];
        cfg.validate().unwrap();
        let f0 = build_frame(&cfg, 0);
        let f1 = build_frame(&cfg, 1);
        let (nx, ny, nz) = cfg.grid.dims;
        for ix in 0..nx - 2 {
            for iy in 0..ny {
                for iz in 1..nz {
                    assert_eq!(
                        f0.semantic.get(ix, iy, iz),
                        f1.semantic.get(ix + 2, iy, iz),
                        "box voxels must shift by exactly 2 cells"
                    );
                }
            }
        }
        // Flow on box voxels equals the configured velocity.
        let mut saw_box = false;
        for v in 0..f0.semantic.labels().len() {
            if f0.semantic.labels()[v] == 2 {
                saw_box = true;
                assert_eq!(f0.flow.get_linear(v), [1.0, 0.0]);
            }
        }
        assert!(saw_box);
    }

    #[test]
    fn depth_rows_normalized_and_modal_bin_correct() {
        let cfg = small_scene(11);
        let truth = build_frame(&cfg, 0);
        let spec = &cfg.grid;
        let cams = cfg.camera_rig();
        for (cam, depth) in cams.iter().zip(&truth.depths) {
            let hits = pixel_hits(&truth.semantic, spec, cam, cfg.max_ray_range);
            let (h, w) = cam.image_size();
            for v in 0..h {
                for u in 0..w {
                    let row = depth.pixel(u, v);
                    let sum: f64 = row.iter().sum();
                    assert_relative_eq!(sum, 1.0, epsilon = 1e-9);
                    if let Some((_, d)) = hits[v * w + u] {
                        // Modal bin center within Δd/2 of the true depth.
                        let modal = row
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                            .unwrap()
                            .0;
                        let center = cfg.depth_bins.center(modal);
                        assert!(
                            (center - d).abs() <= cfg.depth_bins.step * 0.5 + 1e-9,
                            "modal center {center} vs depth {d}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn wall_five_meters_gives_bin_eight() {
        // Wall whose near face crosses the optical axis exactly 5 m out.
        let mut cfg = SceneConfig::default_desk(2);
        cfg.grid = GridSpec::new((48, 32, 16), 0.25, [-4.0, -4.0, 0.0]).unwrap();
        cfg.cameras.count = 1;
        cfg.cameras.image_width = 9;
        cfg.cameras.image_height = 9;
        cfg.boxes = vec![BoxSpec {
            class: 2,
            size: [0.5, 7.5, 3.5],
            center: [5.25, 0.0, 1.75],
            velocity: [0.0, 0.0],
        }];
        cfg.frames = 1;
        cfg.validate().unwrap();
        let truth = build_frame(&cfg, 0);
        let cam = &cfg.camera_rig()[0];
        let hits = pixel_hits(&truth.semantic, &cfg.grid, cam, cfg.max_ray_range);
        let (h, w) = cam.image_size();
        // The central pixel looks straight down the optical axis.
        let center_hit = hits[(h / 2) * w + w / 2].expect("central pixel hits the wall");
        assert_relative_eq!(center_hit.1, 5.0, epsilon = 1e-9);
        let row = truth.depths[0].pixel(w / 2, h / 2);
        let modal = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(modal, 8);
    }

    #[test]
    fn empty_scene_uniform_depth_rows() {
        let mut cfg = small_scene(4);
        cfg.boxes.clear();
        cfg.ground_class = 1;
        let truth = build_frame(&cfg, 0);
        // Sky pixels (up-looking rays) are uniform.
        let depth = &truth.depths[0];
        let (h, w) = (12, 16);
        let mut saw_sky = false;
        for v in 0..h {
            for u in 0..w {
                let row = depth.pixel(u, v);
                if row.iter().all(|p| (p - row[0]).abs() < 1e-12) {
                    saw_sky = true;
                    assert_relative_eq!(row[0], 1.0 / 88.0, epsilon = 1e-12);
                }
            }
        }
        assert!(saw_sky);
    }

    #[test]
    fn features_deterministic_by_class_and_position() {
        let cfg = small_scene(9);
        let truth = build_frame(&cfg, 0);
        let cam = &cfg.camera_rig()[0];
        let hits = pixel_hits(&truth.semantic, &cfg.grid, cam, cfg.max_ray_range);
        let feat = &truth.features[0];
        let (h, w) = cam.image_size();
        // Same class + same position code → identical features; verify via
        // the defining construction on a second evaluation.
        let embeddings = cfg.class_embeddings();
        for v in 0..h {
            for u in 0..w {
                let class_row = match hits[v * w + u] {
                    Some((c, _)) => c as usize,
                    None => cfg.classes + 1,
                };
                for ci in 0..cfg.feature_channels {
                    let expect = embeddings[class_row][ci] + positional_code(ci, u, v, w, h);
                    assert_relative_eq!(feat.pixel(u, v)[ci], expect, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn kinematics_integrates_to_trajectory() {
        let mut cfg = SceneConfig::default_desk(6);
        cfg.frames = 8;
        cfg.boxes = vec![BoxSpec {
            class: 2,
            size: [1.0, 1.0, 1.0],
            center: [-2.0, -1.0, 0.75],
            velocity: [0.8, 0.4],
        }];
        cfg.validate().unwrap();
        // Integrate the flow velocity at a box voxel across frames.
        let mut integrated = Vector3::new(cfg.boxes[0].center[0], cfg.boxes[0].center[1], 0.0);
        for t in 0..cfg.frames - 1 {
            let truth = build_frame(&cfg, t);
            let v = truth
                .semantic
                .labels()
                .iter()
                .position(|&l| l == 2)
                .expect("box visible");
            let flow = truth.flow.get_linear(v);
            integrated.x += flow[0] * cfg.frame_interval;
            integrated.y += flow[1] * cfg.frame_interval;
        }
        let final_center = cfg.boxes[0].center_at((cfg.frames - 1) as f64 * cfg.frame_interval);
        assert!((integrated.x - final_center.x).abs() <= cfg.grid.voxel_size);
        assert!((integrated.y - final_center.y).abs() <= cfg.grid.voxel_size);
    }

    #[test]
    fn envelope_violation_rejected() {
        let mut cfg = small_scene(8);
        cfg.boxes[0].velocity = [5.0, 0.0];
        assert!(matches!(cfg.validate(), Err(SceneError::Invalid(_))));
    }

    #[test]
    fn camera_rig_covers_full_circle() {
        let cfg = SceneConfig::default_desk(1);
        let cams = cfg.camera_rig();
        assert_eq!(cams.len(), 6);
        // A point forward of the ego is seen by the forward camera.
        let p = Vector3::new(5.0, 0.0, 1.0);
        let proj = crate::geometry::project_to_image(&cams[0], &p).unwrap();
        assert!(proj.in_image);
        assert!(proj.depth > 0.0);
    }
}
