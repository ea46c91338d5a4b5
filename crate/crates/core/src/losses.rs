//! The occupancy and flow loss stack: scene-class affinity terms, weighted
//! focal, Lovász-softmax, masked flow L1, and depth cross-entropy, combined
//! with per-stage weights 1/2^(N-i).
//!
//! Focal, flow L1, and depth CE carry analytic gradients; the affinity and
//! Lovász terms are evaluated forward-only.

use crate::grid::{FlowGrid, SemanticGrid, VoxelGrid};
use crate::lift_splat::DepthDistribution;

/// Probability floor inside logs so degenerate predictions stay finite.
const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LossConfig {
    /// K: semantic classes beyond empty; labels run 0..=K.
    pub num_classes: usize,
    /// Focal focusing parameter.
    pub gamma: f64,
    /// Flow term weight λ_f.
    pub lambda_flow: f64,
    /// Per-label weights (length K+1), mean 1 over present classes.
    pub class_weights: Vec<f64>,
    /// Labels whose voxels carry supervised flow.
    pub foreground_classes: Vec<u8>,
}

impl LossConfig {
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            num_classes,
            gamma: 2.0,
            lambda_flow: 1.0,
            class_weights: vec![1.0; num_classes + 1],
            foreground_classes: (2..=num_classes as u8).collect(),
        }
    }
}

/// Per-stage combination weights w_i = 1/2^(N-i) for i = 1..N.
pub fn stage_weights(stages: usize) -> Vec<f64> {
    (1..=stages)
        .map(|i| 1.0 / (1u64 << (stages - i)) as f64)
        .collect()
}

/// Inverse-frequency class weights over one scene, clipped to [0.1, 10] and
/// renormalized to mean 1 over the classes present. Absent classes get 1.
pub fn inverse_frequency_weights(gt: &SemanticGrid, num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes + 1];
    for &l in gt.labels() {
        counts[l as usize] += 1;
    }
    let total: usize = counts.iter().sum();
    let present: Vec<usize> = (0..=num_classes).filter(|&c| counts[c] > 0).collect();
    let mut weights = vec![1.0; num_classes + 1];
    if present.is_empty() {
        return weights;
    }
    let raw: Vec<f64> = present
        .iter()
        .map(|&c| total as f64 / counts[c] as f64)
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let clipped: Vec<f64> = raw.iter().map(|r| (r / mean).clamp(0.1, 10.0)).collect();
    let clipped_mean = clipped.iter().sum::<f64>() / clipped.len() as f64;
    for (&c, w) in present.iter().zip(&clipped) {
        weights[c] = w / clipped_mean;
    }
    weights
}

/// Per-voxel softmax over the class channel.
pub fn softmax_grid(logits: &VoxelGrid) -> VoxelGrid {
    let mut out = logits.clone();
    let c = out.channels();
    for v in 0..out.voxel_count() {
        let row = out.voxel_linear_mut(v);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    debug_assert_eq!(c, logits.channels());
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalMode {
    /// Binary occupied/empty split.
    Geo,
    /// Per semantic class.
    Sem,
}

/// Scene-class affinity loss: -log of precision, recall, and specificity
/// per class, averaged over classes present in the prediction mass or the
/// ground truth. Terms whose denominator is empty are dropped.
pub fn scal_loss(probs: &VoxelGrid, gt: &SemanticGrid, mode: ScalMode) -> f64 {
    assert_eq!(probs.dims(), gt.dims());
    let n = probs.voxel_count();
    let k = probs.channels() - 1;
    let class_mass = |c: usize, v: usize| -> f64 {
        match mode {
            ScalMode::Sem => probs.voxel_linear(v)[c],
            ScalMode::Geo => 1.0 - probs.voxel_linear(v)[0],
        }
    };
    let class_truth = |c: usize, v: usize| -> bool {
        match mode {
            ScalMode::Sem => gt.labels()[v] as usize == c,
            ScalMode::Geo => gt.labels()[v] != 0,
        }
    };
    let classes: Vec<usize> = match mode {
        ScalMode::Sem => (0..=k).collect(),
        ScalMode::Geo => vec![1],
    };
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in classes {
        let mut pred_mass = 0.0;
        let mut nominator = 0.0;
        let mut gt_count = 0usize;
        let mut spec_num = 0.0;
        for v in 0..n {
            let p = class_mass(c, v);
            let t = class_truth(c, v);
            pred_mass += p;
            if t {
                nominator += p;
                gt_count += 1;
            } else {
                spec_num += 1.0 - p;
            }
        }
        if pred_mass <= LOG_EPS && gt_count == 0 {
            continue;
        }
        counted += 1;
        let mut loss_c = 0.0;
        if pred_mass > 0.0 {
            loss_c -= (nominator / pred_mass).max(LOG_EPS).ln();
        }
        if gt_count > 0 {
            loss_c -= (nominator / gt_count as f64).max(LOG_EPS).ln();
        }
        if gt_count < n {
            loss_c -= (spec_num / (n - gt_count) as f64).max(LOG_EPS).ln();
        }
        total += loss_c;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

/// Weighted focal loss, mean over voxels of -w_t (1-p_t)^γ log p_t, with
/// the analytic gradient w.r.t. the logits.
pub fn weighted_focal(
    logits: &VoxelGrid,
    gt: &SemanticGrid,
    cfg: &LossConfig,
) -> (f64, VoxelGrid) {
    assert_eq!(logits.dims(), gt.dims());
    assert_eq!(logits.channels(), cfg.num_classes + 1);
    let probs = softmax_grid(logits);
    let n = probs.voxel_count();
    let c = probs.channels();
    let mut grad = VoxelGrid::zeros(c, logits.dims());
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for v in 0..n {
        let t = gt.labels()[v] as usize;
        let p = probs.voxel_linear(v);
        let w = cfg.class_weights[t];
        let pt = p[t].clamp(LOG_EPS, 1.0 - LOG_EPS);
        let om = 1.0 - pt;
        let ln_pt = pt.ln();
        total += -w * om.powf(cfg.gamma) * ln_pt;
        // d loss_v / d p_t, then through the softmax.
        let dpt = w * (cfg.gamma * om.powf(cfg.gamma - 1.0) * ln_pt - om.powf(cfg.gamma) / pt);
        let g = grad.voxel_linear_mut(v);
        for j in 0..c {
            let indicator = if j == t { 1.0 } else { 0.0 };
            g[j] = dpt * pt * (indicator - p[j]) * inv_n;
        }
    }
    (total * inv_n, grad)
}

fn lovasz_grad(sorted_fg: &[f64]) -> Vec<f64> {
    let n = sorted_fg.len();
    let gts: f64 = sorted_fg.iter().sum();
    let mut intersection = gts;
    let mut union = gts;
    let mut jaccard = Vec::with_capacity(n);
    for &t in sorted_fg {
        intersection -= t;
        union += 1.0 - t;
        jaccard.push(1.0 - intersection / union);
    }
    for i in (1..n).rev() {
        jaccard[i] -= jaccard[i - 1];
    }
    jaccard
}

/// Lovász-softmax: the Lovász extension of the per-class IoU error on
/// sorted margins, averaged over classes present in the ground truth.
pub fn lovasz_softmax(probs: &VoxelGrid, gt: &SemanticGrid) -> f64 {
    assert_eq!(probs.dims(), gt.dims());
    let n = probs.voxel_count();
    let k = probs.channels() - 1;
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 0..=k {
        let mut fg = Vec::with_capacity(n);
        let mut errors = Vec::with_capacity(n);
        let mut any = false;
        for v in 0..n {
            let t = gt.labels()[v] as usize == c;
            any |= t;
            let p = probs.voxel_linear(v)[c];
            fg.push(if t { 1.0 } else { 0.0 });
            errors.push(if t { 1.0 - p } else { p });
        }
        if !any {
            continue;
        }
        counted += 1;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap().then(a.cmp(&b)));
        let sorted_fg: Vec<f64> = order.iter().map(|&i| fg[i]).collect();
        let grad = lovasz_grad(&sorted_fg);
        total += order
            .iter()
            .zip(&grad)
            .map(|(&i, g)| errors[i] * g)
            .sum::<f64>();
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

/// Masked flow loss: mean over foreground voxels of |Δvx| + |Δvy|, with the
/// sign subgradient. Returns (loss, gradient, foreground count).
pub fn flow_l1(
    flow_pred: &FlowGrid,
    flow_gt: &FlowGrid,
    gt: &SemanticGrid,
    foreground: &[u8],
) -> (f64, Vec<f64>, usize) {
    assert_eq!(flow_pred.dims(), flow_gt.dims());
    assert_eq!(flow_pred.dims(), gt.dims());
    let n = gt.labels().len();
    let mut grad = vec![0.0; 2 * n];
    let count = gt
        .labels()
        .iter()
        .filter(|l| foreground.contains(l))
        .count();
    if count == 0 {
        return (0.0, grad, 0);
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for v in 0..n {
        if !foreground.contains(&gt.labels()[v]) {
            continue;
        }
        let p = flow_pred.get_linear(v);
        let g = flow_gt.get_linear(v);
        for d in 0..2 {
            let delta = p[d] - g[d];
            total += delta.abs();
            grad[2 * v + d] = delta.signum() * inv;
        }
    }
    (total * inv, grad, count)
}

/// Depth supervision on raw per-pixel bin probabilities: mean negative log
/// probability of the ground-truth bin over supervised pixels. Returns
/// (loss, gradient w.r.t. the probabilities, supervised count).
pub fn depth_ce_raw(
    probs: &[f64],
    bin_count: usize,
    gt_bins: &[Option<usize>],
) -> (f64, Vec<f64>, usize) {
    assert_eq!(probs.len(), bin_count * gt_bins.len());
    let mut grad = vec![0.0; probs.len()];
    let count = gt_bins.iter().flatten().count();
    if count == 0 {
        return (0.0, grad, 0);
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for (px, gt) in gt_bins.iter().enumerate() {
        let Some(bin) = gt else { continue };
        let p = probs[px * bin_count + bin].max(LOG_EPS);
        total -= p.ln();
        grad[px * bin_count + bin] = -inv / p;
    }
    (total * inv, grad, count)
}

/// `depth_ce_raw` applied to a normalized distribution.
pub fn depth_ce(
    depth_pred: &DepthDistribution,
    gt_bins: &[Option<usize>],
) -> (f64, Vec<f64>, usize) {
    depth_ce_raw(depth_pred.probs(), depth_pred.bins().count, gt_bins)
}

/// Majority-vote downsampling of semantic labels by an integer factor per
/// axis. Empty loses ties to any foreground class; foreground ties break
/// toward the lower class id.
pub fn majority_downsample(gt: &SemanticGrid, factor: usize) -> SemanticGrid {
    if factor == 1 {
        return gt.clone();
    }
    let (nx, ny, nz) = gt.dims();
    assert!(nx % factor == 0 && ny % factor == 0 && nz % factor == 0);
    let dims = (nx / factor, ny / factor, nz / factor);
    let mut out = SemanticGrid::empty(dims);
    let k = gt.max_label() as usize;
    let mut counts = vec![0usize; k + 1];
    for ox in 0..dims.0 {
        for oy in 0..dims.1 {
            for oz in 0..dims.2 {
                counts.iter_mut().for_each(|c| *c = 0);
                for dx in 0..factor {
                    for dy in 0..factor {
                        for dz in 0..factor {
                            let l = gt.get(ox * factor + dx, oy * factor + dy, oz * factor + dz);
                            counts[l as usize] += 1;
                        }
                    }
                }
                let mut best = 0usize;
                for c in 1..=k {
                    let wins = counts[c] > counts[best]
                        || (counts[c] == counts[best] && best == 0 && counts[c] > 0);
                    if wins {
                        best = c;
                    }
                }
                out.set(ox, oy, oz, best as u8);
            }
        }
    }
    out
}

/// Everything `total_loss` needs for one frame.
pub struct LossInputs<'a> {
    /// Per-stage semantic logits, coarsest first; stage i dims are the full
    /// dims divided by 2^(N-i).
    pub stage_logits: &'a [VoxelGrid],
    /// Full-resolution ground truth labels.
    pub gt: &'a SemanticGrid,
    /// Full-resolution predicted and ground-truth flow.
    pub flow_pred: &'a FlowGrid,
    pub flow_gt: &'a FlowGrid,
    /// Per-camera depth predictions with their ground-truth bins.
    pub depth: &'a [(&'a DepthDistribution, &'a [Option<usize>])],
}

/// Component values of Eq.-style total = λ_f·L1 + depth + Σ w_i·L_occ^i.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// Stage-weighted sums of each occupancy component.
    pub scal_geo: f64,
    pub scal_sem: f64,
    pub focal: f64,
    pub lovasz: f64,
    pub flow_l1: f64,
    pub depth_ce: f64,
    pub total: f64,
    /// Unweighted L_occ per stage, coarsest first.
    pub per_stage_occ: Vec<f64>,
}

/// Combine the full stack: per-stage occupancy losses on majority-coarsened
/// ground truth, flow L1 on foreground voxels, and depth cross-entropy.
pub fn total_loss(inputs: &LossInputs, cfg: &LossConfig) -> LossReport {
    let n = inputs.stage_logits.len();
    let weights = stage_weights(n);
    let full_dims = inputs.gt.dims();
    let mut report = LossReport {
        scal_geo: 0.0,
        scal_sem: 0.0,
        focal: 0.0,
        lovasz: 0.0,
        flow_l1: 0.0,
        depth_ce: 0.0,
        total: 0.0,
        per_stage_occ: Vec::with_capacity(n),
    };
    for (i, logits) in inputs.stage_logits.iter().enumerate() {
        let factor = 1usize << (n - 1 - i);
        assert_eq!(
            logits.dims(),
            (
                full_dims.0 / factor,
                full_dims.1 / factor,
                full_dims.2 / factor
            ),
            "stage {} dims", i
        );
        let gt_i = majority_downsample(inputs.gt, factor);
        let probs = softmax_grid(logits);
        let geo = scal_loss(&probs, &gt_i, ScalMode::Geo);
        let sem = scal_loss(&probs, &gt_i, ScalMode::Sem);
        let (focal, _) = weighted_focal(logits, &gt_i, cfg);
        let lov = lovasz_softmax(&probs, &gt_i);
        let occ = geo + sem + focal + lov;
        let w = weights[i];
        report.scal_geo += w * geo;
        report.scal_sem += w * sem;
        report.focal += w * focal;
        report.lovasz += w * lov;
        report.per_stage_occ.push(occ);
    }
    let (l1, _, _) = flow_l1(
        inputs.flow_pred,
        inputs.flow_gt,
        inputs.gt,
        &cfg.foreground_classes,
    );
    report.flow_l1 = l1;
    let mut depth_total = 0.0;
    let mut depth_count = 0usize;
    for (pred, gt_bins) in inputs.depth {
        let (d, _, c) = depth_ce(pred, gt_bins);
        depth_total += d * c as f64;
        depth_count += c;
    }
    report.depth_ce = if depth_count == 0 {
        0.0
    } else {
        depth_total / depth_count as f64
    };
    report.total = cfg.lambda_flow * report.flow_l1
        + report.depth_ce
        + report.scal_geo
        + report.scal_sem
        + report.focal
        + report.lovasz;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lift_splat::DepthBins;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn one_hot_logits(gt: &SemanticGrid, classes: usize, scale: f64) -> VoxelGrid {
        let mut logits = VoxelGrid::zeros(classes + 1, gt.dims());
        for v in 0..logits.voxel_count() {
            logits.voxel_linear_mut(v)[gt.labels()[v] as usize] = scale;
        }
        logits
    }

    fn random_logits(dims: (usize, usize, usize), classes: usize, rng: &mut StdRng) -> VoxelGrid {
        VoxelGrid::from_data(
            classes + 1,
            dims,
            (0..(classes + 1) * dims.0 * dims.1 * dims.2)
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect(),
        )
        .unwrap()
    }

    fn random_gt(dims: (usize, usize, usize), classes: usize, rng: &mut StdRng) -> SemanticGrid {
        SemanticGrid::from_labels(
            dims,
            (0..dims.0 * dims.1 * dims.2)
                .map(|_| rng.gen_range(0..=classes as u8))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn scal_perfect_prediction_is_zero() {
        let mut rng = StdRng::seed_from_u64(1);
        let gt = random_gt((3, 3, 2), 3, &mut rng);
        let probs = softmax_grid(&one_hot_logits(&gt, 3, 200.0));
        assert!(scal_loss(&probs, &gt, ScalMode::Sem).abs() < 1e-9);
        assert!(scal_loss(&probs, &gt, ScalMode::Geo).abs() < 1e-9);
    }

    #[test]
    fn scal_skips_vacuous_classes() {
        // Class 3 appears in neither prediction mass nor gt: the loss equals
        // the same computation restricted to classes 0..=2.
        let dims = (2, 2, 1);
        let gt = SemanticGrid::from_labels(dims, vec![0, 1, 2, 1]).unwrap();
        let mut probs = VoxelGrid::zeros(4, dims);
        for v in 0..4 {
            let row = probs.voxel_linear_mut(v);
            row[0] = 0.5;
            row[1] = 0.3;
            row[2] = 0.2;
            row[3] = 0.0;
        }
        let with_extra = scal_loss(&probs, &gt, ScalMode::Sem);
        let mut probs3 = VoxelGrid::zeros(3, dims);
        for v in 0..4 {
            let row = probs3.voxel_linear_mut(v);
            row[0] = 0.5;
            row[1] = 0.3;
            row[2] = 0.2;
        }
        let without = scal_loss(&probs3, &gt, ScalMode::Sem);
        assert_relative_eq!(with_extra, without, epsilon = 1e-12);
    }

    #[test]
    fn scal_two_voxel_toy_matches_direct_formula() {
        // gt = (c1, empty); smoothed probabilities.
        let dims = (2, 1, 1);
        let gt = SemanticGrid::from_labels(dims, vec![1, 0]).unwrap();
        let mut probs = VoxelGrid::zeros(2, dims);
        probs.voxel_linear_mut(0).copy_from_slice(&[0.4, 0.6]);
        probs.voxel_linear_mut(1).copy_from_slice(&[0.7, 0.3]);
        let got = scal_loss(&probs, &gt, ScalMode::Sem);
        // Independent direct-formula evaluation.
        // class 0: pred mass 1.1, nom (gt=0 at voxel 1) 0.7, gt_count 1,
        //          spec: voxel 0 → (1-0.4)/1
        let c0 = -(0.7f64 / 1.1).ln() - (0.7f64 / 1.0).ln() - (0.6f64 / 1.0).ln();
        // class 1: pred mass 0.9, nom 0.6, gt_count 1, spec voxel 1 → 0.7
        let c1 = -(0.6f64 / 0.9).ln() - (0.6f64 / 1.0).ln() - (0.7f64 / 1.0).ln();
        assert_relative_eq!(got, (c0 + c1) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn focal_gamma_zero_unit_weights_is_cross_entropy() {
        let mut rng = StdRng::seed_from_u64(2);
        let dims = (3, 2, 2);
        let gt = random_gt(dims, 3, &mut rng);
        let logits = random_logits(dims, 3, &mut rng);
        let mut cfg = LossConfig::uniform(3);
        cfg.gamma = 0.0;
        let (focal, _) = weighted_focal(&logits, &gt, &cfg);
        // Independent cross-entropy implementation.
        let probs = softmax_grid(&logits);
        let mut ce = 0.0;
        for v in 0..probs.voxel_count() {
            ce -= probs.voxel_linear(v)[gt.labels()[v] as usize].ln();
        }
        ce /= probs.voxel_count() as f64;
        assert_relative_eq!(focal, ce, epsilon = 1e-9);
    }

    #[test]
    fn focal_perfect_prediction_vanishes() {
        let mut rng = StdRng::seed_from_u64(3);
        let gt = random_gt((2, 2, 2), 2, &mut rng);
        let logits = one_hot_logits(&gt, 2, 60.0);
        let cfg = LossConfig::uniform(2);
        let (focal, _) = weighted_focal(&logits, &gt, &cfg);
        assert!(focal < 1e-9);
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(4);
        let dims = (2, 2, 1);
        let gt = random_gt(dims, 2, &mut rng);
        let logits = random_logits(dims, 2, &mut rng);
        let mut cfg = LossConfig::uniform(2);
        cfg.class_weights = vec![0.5, 1.5, 1.0];
        let (_, grad) = weighted_focal(&logits, &gt, &cfg);
        for idx in 0..logits.data().len() {
            let mut plus = logits.clone();
            plus.data_mut()[idx] += 1e-6;
            let mut minus = logits.clone();
            minus.data_mut()[idx] -= 1e-6;
            let fd = (weighted_focal(&plus, &gt, &cfg).0 - weighted_focal(&minus, &gt, &cfg).0)
                / 2e-6;
            let an = grad.data()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                ((an - fd) / denom).abs() < 1e-4,
                "logit {idx}: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn lovasz_perfect_prediction_is_zero() {
        let mut rng = StdRng::seed_from_u64(5);
        let gt = random_gt((2, 2, 2), 2, &mut rng);
        let probs = softmax_grid(&one_hot_logits(&gt, 2, 200.0));
        assert!(lovasz_softmax(&probs, &gt).abs() < 1e-9);
    }

    #[test]
    fn lovasz_completely_wrong_single_class_is_one() {
        let dims = (2, 2, 1);
        let gt = SemanticGrid::from_labels(dims, vec![1; 4]).unwrap();
        let mut probs = VoxelGrid::zeros(3, dims);
        for v in 0..4 {
            probs.voxel_linear_mut(v)[2] = 1.0;
        }
        assert_relative_eq!(lovasz_softmax(&probs, &gt), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn lovasz_four_voxel_instance_matches_brute_force() {
        let dims = (4, 1, 1);
        let gt = SemanticGrid::from_labels(dims, vec![1, 0, 1, 0]).unwrap();
        let rows = [
            [0.3, 0.7],
            [0.6, 0.4],
            [0.2, 0.8],
            [0.9, 0.1],
        ];
        let mut probs = VoxelGrid::zeros(2, dims);
        for (v, r) in rows.iter().enumerate() {
            probs.voxel_linear_mut(v).copy_from_slice(r);
        }
        let got = lovasz_softmax(&probs, &gt);
        // Direct sorted-margin oracle, spelled out per class.
        let oracle_class = |c: usize| -> f64 {
            let fg: Vec<f64> = gt
                .labels()
                .iter()
                .map(|&l| if l as usize == c { 1.0 } else { 0.0 })
                .collect();
            let errors: Vec<f64> = (0..4)
                .map(|v| {
                    if fg[v] == 1.0 {
                        1.0 - rows[v][c]
                    } else {
                        rows[v][c]
                    }
                })
                .collect();
            let mut order: Vec<usize> = (0..4).collect();
            order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap());
            let gts: f64 = fg.iter().sum();
            let mut inter = gts;
            let mut union = gts;
            let mut jac = Vec::new();
            for &i in &order {
                inter -= fg[i];
                union += 1.0 - fg[i];
                jac.push(1.0 - inter / union);
            }
            let mut acc = jac[0] * errors[order[0]];
            for j in 1..4 {
                acc += (jac[j] - jac[j - 1]) * errors[order[j]];
            }
            acc
        };
        let expect = (oracle_class(0) + oracle_class(1)) / 2.0;
        assert_relative_eq!(got, expect, epsilon = 1e-12);
    }

    #[test]
    fn flow_l1_examples() {
        let dims = (2, 1, 1);
        let gt = SemanticGrid::from_labels(dims, vec![2, 0]).unwrap();
        let mut pred = FlowGrid::zeros(dims);
        let mut truth = FlowGrid::zeros(dims);
        // Perfect prediction.
        let (l, _, c) = flow_l1(&pred, &truth, &gt, &[2]);
        assert_eq!((l, c), (0.0, 1));
        // Background-only error is masked out.
        pred.set(1, 0, 0, [9.0, -9.0]);
        let (l, _, _) = flow_l1(&pred, &truth, &gt, &[2]);
        assert_eq!(l, 0.0);
        // One foreground voxel, Δ = (0.3, -0.4) → 0.7.
        truth.set(0, 0, 0, [1.0, 1.0]);
        pred.set(0, 0, 0, [1.3, 0.6]);
        let (l, _, _) = flow_l1(&pred, &truth, &gt, &[2]);
        assert_relative_eq!(l, 0.7, epsilon = 1e-12);
    }

    #[test]
    fn flow_l1_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(6);
        let dims = (2, 2, 1);
        let gt = SemanticGrid::from_labels(dims, vec![2, 0, 3, 2]).unwrap();
        let truth = FlowGrid::from_data(dims, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let pred = FlowGrid::from_data(dims, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let fg = [2u8, 3];
        let (_, grad, _) = flow_l1(&pred, &truth, &gt, &fg);
        for idx in 0..8 {
            let mut plus = pred.clone();
            plus.data_mut()[idx] += 1e-6;
            let mut minus = pred.clone();
            minus.data_mut()[idx] -= 1e-6;
            let fd = (flow_l1(&plus, &truth, &gt, &fg).0 - flow_l1(&minus, &truth, &gt, &fg).0)
                / 2e-6;
            assert!(
                (grad[idx] - fd).abs() < 1e-6,
                "flow grad {idx}: {} vs {fd}",
                grad[idx]
            );
        }
    }

    #[test]
    fn depth_ce_one_hot_and_uniform() {
        let bins = DepthBins {
            start: 1.0,
            step: 0.5,
            count: 4,
        };
        let one_hot =
            DepthDistribution::from_probs(bins, 1, 1, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let (l, _, c) = depth_ce(&one_hot, &[Some(1)]);
        assert!(l.abs() < 1e-12);
        assert_eq!(c, 1);
        let uniform =
            DepthDistribution::from_probs(bins, 1, 1, vec![0.25; 4]).unwrap();
        let (l, _, _) = depth_ce(&uniform, &[Some(2)]);
        assert_relative_eq!(l, 4.0f64.ln(), epsilon = 1e-12);
        // All pixels ignored → zero loss, zero count.
        let (l, _, c) = depth_ce(&uniform, &[None]);
        assert_eq!((l, c), (0.0, 0));
    }

    #[test]
    fn depth_ce_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(7);
        let bin_count = 5;
        let pixels = 4;
        let probs: Vec<f64> = (0..bin_count * pixels)
            .map(|_| rng.gen_range(0.05..1.0))
            .collect();
        let gt: Vec<Option<usize>> = vec![Some(0), Some(3), None, Some(2)];
        let (_, grad, _) = depth_ce_raw(&probs, bin_count, &gt);
        for idx in 0..probs.len() {
            let mut plus = probs.clone();
            plus[idx] += 1e-7;
            let mut minus = probs.clone();
            minus[idx] -= 1e-7;
            let fd = (depth_ce_raw(&plus, bin_count, &gt).0
                - depth_ce_raw(&minus, bin_count, &gt).0)
                / 2e-7;
            let an = grad[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(((an - fd) / denom).abs() < 1e-4, "{an} vs {fd}");
        }
    }

    #[test]
    fn stage_weight_ladder() {
        assert_eq!(stage_weights(3), vec![0.25, 0.5, 1.0]);
        assert_eq!(stage_weights(1), vec![1.0]);
    }

    #[test]
    fn majority_downsample_prefers_foreground_on_ties() {
        let dims = (2, 2, 2);
        // Block of 8: four empty, four class 2 → tie, foreground wins.
        let labels = vec![0, 0, 0, 0, 2, 2, 2, 2];
        let gt = SemanticGrid::from_labels(dims, labels).unwrap();
        let down = majority_downsample(&gt, 2);
        assert_eq!(down.get(0, 0, 0), 2);
        // Foreground tie breaks toward the lower class id.
        let labels = vec![1, 1, 1, 1, 3, 3, 3, 3];
        let gt = SemanticGrid::from_labels(dims, labels).unwrap();
        assert_eq!(majority_downsample(&gt, 2).get(0, 0, 0), 1);
    }

    #[test]
    fn inverse_frequency_weights_normalized_and_clipped() {
        let dims = (4, 4, 4);
        let mut labels = vec![0u8; 64];
        labels[0] = 1; // very rare class
        let gt = SemanticGrid::from_labels(dims, labels).unwrap();
        let w = inverse_frequency_weights(&gt, 2);
        assert!(w[1] > w[0]);
        let present_mean = (w[0] + w[1]) / 2.0;
        assert_relative_eq!(present_mean, 1.0, epsilon = 1e-9);
        assert_eq!(w[2], 1.0); // absent class untouched
    }

    #[test]
    fn total_loss_zero_at_perfect_everything() {
        let mut rng = StdRng::seed_from_u64(8);
        let dims = (4, 4, 2);
        let gt = random_gt(dims, 2, &mut rng);
        let gt_coarse = majority_downsample(&gt, 2);
        let stage_logits = vec![
            one_hot_logits(&gt_coarse, 2, 200.0),
            one_hot_logits(&gt, 2, 200.0),
        ];
        let flow = FlowGrid::zeros(dims);
        let bins = DepthBins {
            start: 1.0,
            step: 0.5,
            count: 3,
        };
        let depth =
            DepthDistribution::from_probs(bins, 1, 1, vec![1.0, 0.0, 0.0]).unwrap();
        let gt_bins = [Some(0)];
        let cfg = LossConfig::uniform(2);
        let inputs = LossInputs {
            stage_logits: &stage_logits,
            gt: &gt,
            flow_pred: &flow,
            flow_gt: &flow,
            depth: &[(&depth, &gt_bins)],
        };
        let report = total_loss(&inputs, &cfg);
        assert!(report.total < 1e-6, "total = {}", report.total);
    }

    #[test]
    fn total_loss_two_stage_hand_sum() {
        let mut rng = StdRng::seed_from_u64(9);
        let dims = (2, 2, 2);
        let gt = random_gt(dims, 2, &mut rng);
        let stage_logits = vec![
            random_logits((1, 1, 1), 2, &mut rng),
            random_logits(dims, 2, &mut rng),
        ];
        let flow_gt = FlowGrid::from_data(dims, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let flow_pred = FlowGrid::from_data(dims, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let bins = DepthBins {
            start: 1.0,
            step: 0.5,
            count: 3,
        };
        let depth = DepthDistribution::from_probs(bins, 1, 2, vec![0.2, 0.5, 0.3, 0.6, 0.2, 0.2])
            .unwrap();
        let gt_bins = [Some(1), Some(0)];
        let mut cfg = LossConfig::uniform(2);
        cfg.lambda_flow = 0.7;
        let inputs = LossInputs {
            stage_logits: &stage_logits,
            gt: &gt,
            flow_pred: &flow_pred,
            flow_gt: &flow_gt,
            depth: &[(&depth, &gt_bins)],
        };
        let report = total_loss(&inputs, &cfg);
        // Spreadsheet-style hand sum from the component functions.
        let gt1 = majority_downsample(&gt, 2);
        let occ = |logits: &VoxelGrid, gt: &SemanticGrid| -> f64 {
            let probs = softmax_grid(logits);
            scal_loss(&probs, gt, ScalMode::Geo)
                + scal_loss(&probs, gt, ScalMode::Sem)
                + weighted_focal(logits, gt, &cfg).0
                + lovasz_softmax(&probs, gt)
        };
        let occ1 = occ(&stage_logits[0], &gt1);
        let occ2 = occ(&stage_logits[1], &gt);
        let l1 = flow_l1(&flow_pred, &flow_gt, &gt, &cfg.foreground_classes).0;
        let dce = depth_ce(&depth, &gt_bins).0;
        let expect = 0.7 * l1 + dce + 0.5 * occ1 + 1.0 * occ2;
        assert_relative_eq!(report.total, expect, epsilon = 1e-9);
        assert_relative_eq!(report.per_stage_occ[0], occ1, epsilon = 1e-12);
        assert_relative_eq!(report.per_stage_occ[1], occ2, epsilon = 1e-12);
    }

    #[test]
    fn total_loss_linear_in_lambda() {
        let mut rng = StdRng::seed_from_u64(10);
        let dims = (2, 2, 2);
        let gt = random_gt(dims, 2, &mut rng);
        let stage_logits = vec![random_logits(dims, 2, &mut rng)];
        let flow_gt =
            FlowGrid::from_data(dims, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let flow_pred =
            FlowGrid::from_data(dims, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let run = |lambda: f64| -> f64 {
            let mut cfg = LossConfig::uniform(2);
            cfg.lambda_flow = lambda;
            let inputs = LossInputs {
                stage_logits: &stage_logits,
                gt: &gt,
                flow_pred: &flow_pred,
                flow_gt: &flow_gt,
                depth: &[],
            };
            total_loss(&inputs, &cfg).total
        };
        let at0 = run(0.0);
        let at1 = run(1.0);
        let at2 = run(2.0);
        assert_relative_eq!(at2 - at1, at1 - at0, epsilon = 1e-9);
    }

    #[test]
    fn components_are_nonnegative() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..10 {
            let dims = (2, 2, 2);
            let gt = random_gt(dims, 2, &mut rng);
            let logits = random_logits(dims, 2, &mut rng);
            let probs = softmax_grid(&logits);
            let cfg = LossConfig::uniform(2);
            assert!(scal_loss(&probs, &gt, ScalMode::Geo) >= 0.0);
            assert!(scal_loss(&probs, &gt, ScalMode::Sem) >= 0.0);
            assert!(weighted_focal(&logits, &gt, &cfg).0 >= 0.0);
            assert!(lovasz_softmax(&probs, &gt) >= 0.0);
        }
    }
}
