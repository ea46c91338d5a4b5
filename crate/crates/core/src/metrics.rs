//! Ray-based evaluation: DDA voxel traversal, RayIoU at depth thresholds,
//! voxelwise mIoU, and mean absolute velocity error over matched rays.
//!
//! Accumulators pool TP/FP/FN counts so multi-frame evaluation computes
//! metrics over the pooled counts rather than averaging per-frame scores.

use crate::geometry::GridSpec;
use crate::grid::{FlowGrid, SemanticGrid};
use nalgebra::Vector3;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("grids have different dimensions")]
    DimMismatch,
}

/// A query ray in the ego frame; the direction is unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRay {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

/// First non-empty voxel along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub class: u8,
    /// Distance from the ray origin to the entered voxel boundary (meters);
    /// zero when the origin already sits inside an occupied voxel.
    pub depth: f64,
    pub voxel: (usize, usize, usize),
}

/// Amanatides-Woo style traversal: clip the ray to the grid box, then walk
/// cell by cell, returning the first voxel whose class is not empty.
pub fn dda_raycast(
    grid: &SemanticGrid,
    spec: &GridSpec,
    ray: &QueryRay,
    max_range: f64,
) -> Option<RayHit> {
    let (nx, ny, nz) = spec.dims;
    let lo = spec.origin_vec();
    let hi = lo
        + Vector3::new(
            nx as f64 * spec.voxel_size,
            ny as f64 * spec.voxel_size,
            nz as f64 * spec.voxel_size,
        );
    // Slab clip.
    let mut t_enter = 0.0f64;
    let mut t_exit = max_range;
    for a in 0..3 {
        let o = ray.origin[a];
        let d = ray.direction[a];
        if d.abs() < 1e-15 {
            if o < lo[a] || o >= hi[a] {
                return None;
            }
            continue;
        }
        let t1 = (lo[a] - o) / d;
        let t2 = (hi[a] - o) / d;
        let (tmin, tmax) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        t_enter = t_enter.max(tmin);
        t_exit = t_exit.min(tmax);
    }
    if t_enter > t_exit {
        return None;
    }
    let start = ray.origin + ray.direction * t_enter;
    let cell_of = |p: &Vector3<f64>| -> Vector3<f64> {
        (p - lo) / spec.voxel_size
    };
    let c = cell_of(&start);
    let clamp_cell = |v: f64, n: usize| -> i64 { (v.floor() as i64).clamp(0, n as i64 - 1) };
    let mut ix = clamp_cell(c.x, nx);
    let mut iy = clamp_cell(c.y, ny);
    let mut iz = clamp_cell(c.z, nz);
    // Per-axis step and boundary-crossing parameters, from absolute
    // coordinates so t values stay exact on axis-aligned input.
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    let idx = [ix, iy, iz];
    let dims = [nx as i64, ny as i64, nz as i64];
    for a in 0..3 {
        let d = ray.direction[a];
        if d > 1e-15 {
            step[a] = 1;
            let boundary = lo[a] + (idx[a] + 1) as f64 * spec.voxel_size;
            t_max[a] = (boundary - ray.origin[a]) / d;
            t_delta[a] = spec.voxel_size / d;
        } else if d < -1e-15 {
            step[a] = -1;
            let boundary = lo[a] + idx[a] as f64 * spec.voxel_size;
            t_max[a] = (boundary - ray.origin[a]) / d;
            t_delta[a] = spec.voxel_size / (-d);
        }
    }
    let mut entry_t = t_enter;
    loop {
        if entry_t > max_range {
            return None;
        }
        let class = grid.get(ix as usize, iy as usize, iz as usize);
        if class != 0 {
            return Some(RayHit {
                class,
                depth: entry_t,
                voxel: (ix as usize, iy as usize, iz as usize),
            });
        }
        // Advance to the nearest boundary crossing.
        let a = if t_max[0] < t_max[1] {
            if t_max[0] < t_max[2] {
                0
            } else {
                2
            }
        } else if t_max[1] < t_max[2] {
            1
        } else {
            2
        };
        entry_t = t_max[a];
        t_max[a] += t_delta[a];
        match a {
            0 => ix += step[0],
            1 => iy += step[1],
            _ => iz += step[2],
        }
        if ix < 0 || iy < 0 || iz < 0 || ix >= dims[0] || iy >= dims[1] || iz >= dims[2] {
            return None;
        }
    }
}

/// Deterministic lidar-like fan of query rays.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RayFanConfig {
    pub azimuth_count: usize,
    pub elevation_rings: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    /// Sensor origin in the ego frame.
    pub origin: [f64; 3],
}

impl Default for RayFanConfig {
    fn default() -> Self {
        Self {
            azimuth_count: 360,
            elevation_rings: 32,
            elevation_min_deg: -30.0,
            elevation_max_deg: 10.0,
            origin: [0.0, 0.0, 1.8],
        }
    }
}

/// Azimuths spread uniformly over the circle; elevations at ring midpoints.
pub fn generate_query_rays(cfg: &RayFanConfig) -> Vec<QueryRay> {
    let origin = Vector3::new(cfg.origin[0], cfg.origin[1], cfg.origin[2]);
    let mut rays = Vec::with_capacity(cfg.azimuth_count * cfg.elevation_rings);
    for ring in 0..cfg.elevation_rings {
        let frac = (ring as f64 + 0.5) / cfg.elevation_rings as f64;
        let elev_deg =
            cfg.elevation_min_deg + (cfg.elevation_max_deg - cfg.elevation_min_deg) * frac;
        let elev = elev_deg.to_radians();
        let (se, ce) = elev.sin_cos();
        for az in 0..cfg.azimuth_count {
            let angle = 2.0 * std::f64::consts::PI * az as f64 / cfg.azimuth_count as f64;
            let (sa, ca) = angle.sin_cos();
            rays.push(QueryRay {
                origin,
                direction: Vector3::new(ce * ca, ce * sa, se),
            });
        }
    }
    rays
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ClassCounts {
    pub fn iou(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            self.tp as f64 / denom as f64
        }
    }
}

/// Pooled ray-matching counts per threshold and class.
#[derive(Debug, Clone)]
pub struct RayIouAccumulator {
    pub thresholds: Vec<f64>,
    pub counts: Vec<BTreeMap<u8, ClassCounts>>,
    pub max_range: f64,
}

impl RayIouAccumulator {
    pub fn new(thresholds: &[f64], max_range: f64) -> Self {
        Self {
            thresholds: thresholds.to_vec(),
            counts: vec![BTreeMap::new(); thresholds.len()],
            max_range,
        }
    }

    /// Cast every ray in both grids and pool the match outcomes. A true
    /// positive needs the same class and first-hit depths within τ; an
    /// unmatched gt hit counts FN, an unmatched prediction hit counts FP.
    pub fn accumulate(
        &mut self,
        pred: &SemanticGrid,
        gt: &SemanticGrid,
        spec: &GridSpec,
        rays: &[QueryRay],
    ) -> Result<(), MetricsError> {
        if pred.dims() != gt.dims() {
            return Err(MetricsError::DimMismatch);
        }
        for ray in rays {
            let hp = dda_raycast(pred, spec, ray, self.max_range);
            let hg = dda_raycast(gt, spec, ray, self.max_range);
            for (ti, tau) in self.thresholds.iter().enumerate() {
                let counts = &mut self.counts[ti];
                match (&hp, &hg) {
                    (None, None) => {}
                    (Some(p), None) => counts.entry(p.class).or_default().fp += 1,
                    (None, Some(g)) => counts.entry(g.class).or_default().fn_ += 1,
                    (Some(p), Some(g)) => {
                        if p.class == g.class && (p.depth - g.depth).abs() <= *tau {
                            counts.entry(p.class).or_default().tp += 1;
                        } else {
                            counts.entry(g.class).or_default().fn_ += 1;
                            counts.entry(p.class).or_default().fp += 1;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Mean IoU over observed classes, one score per threshold.
    pub fn scores(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|per_class| {
                if per_class.is_empty() {
                    return 1.0; // nothing to distinguish: both grids empty
                }
                let sum: f64 = per_class.values().map(ClassCounts::iou).sum();
                sum / per_class.len() as f64
            })
            .collect()
    }
}

/// One-shot RayIoU over a single frame.
pub fn rayiou(
    pred: &SemanticGrid,
    gt: &SemanticGrid,
    spec: &GridSpec,
    rays: &[QueryRay],
    thresholds: &[f64],
    max_range: f64,
) -> Result<Vec<f64>, MetricsError> {
    let mut acc = RayIouAccumulator::new(thresholds, max_range);
    acc.accumulate(pred, gt, spec, rays)?;
    Ok(acc.scores())
}

/// Pooled velocity errors over true-positive rays at the 2 m threshold.
#[derive(Debug, Clone)]
pub struct MaveAccumulator {
    pub threshold: f64,
    pub max_range: f64,
    pub categories: Vec<u8>,
    pub sums: BTreeMap<u8, (f64, u64)>,
}

impl MaveAccumulator {
    pub fn new(categories: &[u8], threshold: f64, max_range: f64) -> Self {
        Self {
            threshold,
            max_range,
            categories: categories.to_vec(),
            sums: BTreeMap::new(),
        }
    }

    pub fn accumulate(
        &mut self,
        pred_sem: &SemanticGrid,
        pred_flow: &FlowGrid,
        gt_sem: &SemanticGrid,
        gt_flow: &FlowGrid,
        spec: &GridSpec,
        rays: &[QueryRay],
    ) -> Result<(), MetricsError> {
        if pred_sem.dims() != gt_sem.dims() {
            return Err(MetricsError::DimMismatch);
        }
        for ray in rays {
            let (Some(p), Some(g)) = (
                dda_raycast(pred_sem, spec, ray, self.max_range),
                dda_raycast(gt_sem, spec, ray, self.max_range),
            ) else {
                continue;
            };
            if p.class != g.class || (p.depth - g.depth).abs() > self.threshold {
                continue;
            }
            if !self.categories.contains(&g.class) {
                continue;
            }
            let vp = pred_flow.get(p.voxel.0, p.voxel.1, p.voxel.2);
            let vg = gt_flow.get(g.voxel.0, g.voxel.1, g.voxel.2);
            let err = ((vp[0] - vg[0]).powi(2) + (vp[1] - vg[1]).powi(2)).sqrt();
            let entry = self.sums.entry(g.class).or_insert((0.0, 0));
            entry.0 += err;
            entry.1 += 1;
        }
        Ok(())
    }

    /// Per-category means; None where a category had no true positives.
    pub fn per_category(&self) -> BTreeMap<u8, Option<f64>> {
        self.categories
            .iter()
            .map(|c| {
                let v = self
                    .sums
                    .get(c)
                    .filter(|(_, n)| *n > 0)
                    .map(|(s, n)| s / *n as f64);
                (*c, v)
            })
            .collect()
    }

    /// Mean over categories with data; None when no category matched.
    pub fn mave(&self) -> Option<f64> {
        let values: Vec<f64> = self.per_category().values().flatten().copied().collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }
}

/// Pooled voxelwise IoU counts, empty class excluded.
#[derive(Debug, Clone, Default)]
pub struct MiouAccumulator {
    pub counts: BTreeMap<u8, ClassCounts>,
}

impl MiouAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(
        &mut self,
        pred: &SemanticGrid,
        gt: &SemanticGrid,
        mask: Option<&[bool]>,
    ) -> Result<(), MetricsError> {
        if pred.dims() != gt.dims() {
            return Err(MetricsError::DimMismatch);
        }
        if let Some(m) = mask {
            if m.len() != gt.labels().len() {
                return Err(MetricsError::DimMismatch);
            }
        }
        for (v, (&p, &g)) in pred.labels().iter().zip(gt.labels()).enumerate() {
            if mask.map(|m| !m[v]).unwrap_or(false) {
                continue;
            }
            if p == g {
                if p != 0 {
                    self.counts.entry(p).or_default().tp += 1;
                }
            } else {
                if p != 0 {
                    self.counts.entry(p).or_default().fp += 1;
                }
                if g != 0 {
                    self.counts.entry(g).or_default().fn_ += 1;
                }
            }
        }
        Ok(())
    }

    pub fn per_class(&self) -> BTreeMap<u8, f64> {
        self.counts
            .iter()
            .map(|(c, counts)| (*c, counts.iou()))
            .collect()
    }

    pub fn mean(&self) -> f64 {
        if self.counts.is_empty() {
            return 1.0;
        }
        let sum: f64 = self.counts.values().map(ClassCounts::iou).sum();
        sum / self.counts.len() as f64
    }
}

/// Voxelwise IoU per class plus the mean over classes present.
pub fn miou(
    pred: &SemanticGrid,
    gt: &SemanticGrid,
    mask: Option<&[bool]>,
) -> Result<(BTreeMap<u8, f64>, f64), MetricsError> {
    let mut acc = MiouAccumulator::new();
    acc.accumulate(pred, gt, mask)?;
    Ok((acc.per_class(), acc.mean()))
}

/// Full evaluation result with a fixed-key text rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rayiou_1m: f64,
    pub rayiou_2m: f64,
    pub rayiou_4m: f64,
    pub rayiou_mean: f64,
    pub miou: f64,
    pub per_class_iou: BTreeMap<u8, f64>,
    pub mave: Option<f64>,
    pub mave_per_category: BTreeMap<u8, Option<f64>>,
    /// Ray-matching counts per threshold (1, 2, 4 m) per class.
    pub counts: Vec<(f64, BTreeMap<u8, ClassCounts>)>,
}

impl MetricsReport {
    pub fn assemble(
        rayiou: &RayIouAccumulator,
        miou: &MiouAccumulator,
        mave: &MaveAccumulator,
    ) -> Self {
        let scores = rayiou.scores();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        Self {
            rayiou_1m: scores[0],
            rayiou_2m: scores[1],
            rayiou_4m: scores[2],
            rayiou_mean: mean,
            miou: miou.mean(),
            per_class_iou: miou.per_class(),
            mave: mave.mave(),
            mave_per_category: mave.per_category(),
            counts: rayiou
                .thresholds
                .iter()
                .cloned()
                .zip(rayiou.counts.iter().cloned())
                .collect(),
        }
    }

    /// Deterministic fixed-key serialization; identical inputs produce
    /// identical bytes.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let f = |v: f64| format!("{v:.12}");
        let _ = writeln!(s, "rayiou_1m = {}", f(self.rayiou_1m));
        let _ = writeln!(s, "rayiou_2m = {}", f(self.rayiou_2m));
        let _ = writeln!(s, "rayiou_4m = {}", f(self.rayiou_4m));
        let _ = writeln!(s, "rayiou_mean = {}", f(self.rayiou_mean));
        let _ = writeln!(s, "miou = {}", f(self.miou));
        let classes: Vec<String> = self
            .per_class_iou
            .iter()
            .map(|(c, v)| format!("{c}:{}", f(*v)))
            .collect();
        let _ = writeln!(s, "per_class_iou = {}", classes.join(","));
        match self.mave {
            Some(v) => {
                let _ = writeln!(s, "mave = {}", f(v));
            }
            None => {
                let _ = writeln!(s, "mave = absent");
            }
        }
        let cats: Vec<String> = self
            .mave_per_category
            .iter()
            .map(|(c, v)| match v {
                Some(v) => format!("{c}:{}", f(*v)),
                None => format!("{c}:absent"),
            })
            .collect();
        let _ = writeln!(s, "mave_per_category = {}", cats.join(","));
        for (tau, per_class) in &self.counts {
            let parts: Vec<String> = per_class
                .iter()
                .map(|(c, k)| format!("{c}:tp={},fp={},fn={}", k.tp, k.fp, k.fn_))
                .collect();
            let _ = writeln!(s, "counts_{}m = {}", *tau as i64, parts.join(";"));
        }
        s
    }
}
