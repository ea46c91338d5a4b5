//! Dense voxel and BEV containers plus the conversions between them.
//!
//! Memory layouts match the on-disk format: voxel data is indexed
//! ((x·Y + y)·Z + z)·C + c, BEV data (x·Y + y)·C + c.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("data length {got} does not match expected {expected}")]
    BadLength { expected: usize, got: usize },
    #[error("non-finite value in grid data")]
    NonFinite,
    #[error("value outside [0, 1] in occupancy weights")]
    WeightRange,
}

/// Dense C×X×Y×Z feature volume.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    channels: usize,
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl VoxelGrid {
    pub fn zeros(channels: usize, dims: (usize, usize, usize)) -> Self {
        Self {
            channels,
            dims,
            data: vec![0.0; channels * dims.0 * dims.1 * dims.2],
        }
    }

    pub fn from_data(
        channels: usize,
        dims: (usize, usize, usize),
        data: Vec<f64>,
    ) -> Result<Self, GridError> {
        let expected = channels * dims.0 * dims.1 * dims.2;
        if data.len() != expected {
            return Err(GridError::BadLength {
                expected,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GridError::NonFinite);
        }
        Ok(Self {
            channels,
            dims,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn voxel_offset(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ((ix * self.dims.1 + iy) * self.dims.2 + iz) * self.channels
    }

    /// The C feature values stored at one voxel.
    pub fn voxel(&self, ix: usize, iy: usize, iz: usize) -> &[f64] {
        let o = self.voxel_offset(ix, iy, iz);
        &self.data[o..o + self.channels]
    }

    pub fn voxel_mut(&mut self, ix: usize, iy: usize, iz: usize) -> &mut [f64] {
        let o = self.voxel_offset(ix, iy, iz);
        &mut self.data[o..o + self.channels]
    }

    pub fn voxel_linear(&self, linear: usize) -> &[f64] {
        &self.data[linear * self.channels..(linear + 1) * self.channels]
    }

    pub fn voxel_linear_mut(&mut self, linear: usize) -> &mut [f64] {
        &mut self.data[linear * self.channels..(linear + 1) * self.channels]
    }

    pub fn add_assign(&mut self, other: &VoxelGrid) -> Result<(), GridError> {
        if self.channels != other.channels || self.dims != other.dims {
            return Err(GridError::DimMismatch(format!(
                "{:?}x{} vs {:?}x{}",
                self.dims, self.channels, other.dims, other.channels
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    /// Trilinear sample at continuous cell coordinates (integers on centers).
    /// Returns zeros when the position leaves [0, dim-1] on any axis.
    pub fn sample_trilinear(&self, x: f64, y: f64, z: f64, out: &mut [f64]) {
        out.fill(0.0);
        let (nx, ny, nz) = self.dims;
        if x < 0.0
            || y < 0.0
            || z < 0.0
            || x > (nx - 1) as f64
            || y > (ny - 1) as f64
            || z > (nz - 1) as f64
        {
            return;
        }
        let x0 = (x.floor() as usize).min(nx - 1);
        let y0 = (y.floor() as usize).min(ny - 1);
        let z0 = (z.floor() as usize).min(nz - 1);
        let x1 = (x0 + 1).min(nx - 1);
        let y1 = (y0 + 1).min(ny - 1);
        let z1 = (z0 + 1).min(nz - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let fz = z - z0 as f64;
        for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
            if wx == 0.0 {
                continue;
            }
            for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                if wy == 0.0 {
                    continue;
                }
                for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                    if wz == 0.0 {
                        continue;
                    }
                    let w = wx * wy * wz;
                    let src = self.voxel(xi, yi, zi);
                    for (o, s) in out.iter_mut().zip(src) {
                        *o += w * s;
                    }
                }
            }
        }
    }
}

/// Planar C×X×Y feature map used inside the BEV transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeature {
    channels: usize,
    dims: (usize, usize),
    data: Vec<f64>,
}

impl BevFeature {
    pub fn zeros(channels: usize, dims: (usize, usize)) -> Self {
        Self {
            channels,
            dims,
            data: vec![0.0; channels * dims.0 * dims.1],
        }
    }

    pub fn from_data(
        channels: usize,
        dims: (usize, usize),
        data: Vec<f64>,
    ) -> Result<Self, GridError> {
        let expected = channels * dims.0 * dims.1;
        if data.len() != expected {
            return Err(GridError::BadLength {
                expected,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GridError::NonFinite);
        }
        Ok(Self {
            channels,
            dims,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn cell(&self, ix: usize, iy: usize) -> &[f64] {
        let o = (ix * self.dims.1 + iy) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn cell_mut(&mut self, ix: usize, iy: usize) -> &mut [f64] {
        let o = (ix * self.dims.1 + iy) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Bilinear sample at continuous cell coordinates, clamped to the border.
    pub fn sample_bilinear(&self, x: f64, y: f64, out: &mut [f64]) {
        let (nx, ny) = self.dims;
        let x = x.clamp(0.0, (nx - 1) as f64);
        let y = y.clamp(0.0, (ny - 1) as f64);
        let x0 = (x.floor() as usize).min(nx - 1);
        let y0 = (y.floor() as usize).min(ny - 1);
        let x1 = (x0 + 1).min(nx - 1);
        let y1 = (y0 + 1).min(ny - 1);
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
                let src = self.cell(xi, yi);
                for (o, s) in out.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
    }
}

/// Single-channel X×Y map (z-averaged occupancy, masks, heatmaps).
#[derive(Debug, Clone, PartialEq)]
pub struct BevMap {
    dims: (usize, usize),
    data: Vec<f64>,
}

impl BevMap {
    pub fn zeros(dims: (usize, usize)) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.0 * dims.1],
        }
    }

    pub fn from_data(dims: (usize, usize), data: Vec<f64>) -> Result<Self, GridError> {
        if data.len() != dims.0 * dims.1 {
            return Err(GridError::BadLength {
                expected: dims.0 * dims.1,
                got: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.data[ix * self.dims.1 + iy]
    }

    pub fn set(&mut self, ix: usize, iy: usize, v: f64) {
        self.data[ix * self.dims.1 + iy] = v;
    }
}

/// Per-voxel occupancy probabilities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyWeights {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl OccupancyWeights {
    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn constant(dims: (usize, usize, usize), value: f64) -> Result<Self, GridError> {
        Self::from_data(dims, vec![value; dims.0 * dims.1 * dims.2])
    }

    pub fn from_data(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self, GridError> {
        let expected = dims.0 * dims.1 * dims.2;
        if data.len() != expected {
            return Err(GridError::BadLength {
                expected,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(GridError::WeightRange);
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.data[(ix * self.dims.1 + iy) * self.dims.2 + iz]
    }

    pub fn set(&mut self, ix: usize, iy: usize, iz: usize, v: f64) {
        self.data[(ix * self.dims.1 + iy) * self.dims.2 + iz] = v;
    }
}

/// Class label per voxel; 0 is the empty class.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGrid {
    dims: (usize, usize, usize),
    labels: Vec<u8>,
}

impl SemanticGrid {
    pub fn empty(dims: (usize, usize, usize)) -> Self {
        Self {
            dims,
            labels: vec![0; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn from_labels(dims: (usize, usize, usize), labels: Vec<u8>) -> Result<Self, GridError> {
        let expected = dims.0 * dims.1 * dims.2;
        if labels.len() != expected {
            return Err(GridError::BadLength {
                expected,
                got: labels.len(),
            });
        }
        Ok(Self { dims, labels })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> u8 {
        self.labels[(ix * self.dims.1 + iy) * self.dims.2 + iz]
    }

    pub fn set(&mut self, ix: usize, iy: usize, iz: usize, label: u8) {
        self.labels[(ix * self.dims.1 + iy) * self.dims.2 + iz] = label;
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

/// Planar (vx, vy) velocity per voxel in m/s.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGrid {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl FlowGrid {
    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Self {
            dims,
            data: vec![0.0; 2 * dims.0 * dims.1 * dims.2],
        }
    }

    pub fn from_data(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self, GridError> {
        let expected = 2 * dims.0 * dims.1 * dims.2;
        if data.len() != expected {
            return Err(GridError::BadLength {
                expected,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GridError::NonFinite);
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> [f64; 2] {
        let o = 2 * ((ix * self.dims.1 + iy) * self.dims.2 + iz);
        [self.data[o], self.data[o + 1]]
    }

    pub fn set(&mut self, ix: usize, iy: usize, iz: usize, v: [f64; 2]) {
        let o = 2 * ((ix * self.dims.1 + iy) * self.dims.2 + iz);
        self.data[o] = v[0];
        self.data[o + 1] = v[1];
    }

    pub fn get_linear(&self, linear: usize) -> [f64; 2] {
        [self.data[2 * linear], self.data[2 * linear + 1]]
    }
}

/// Mean of the occupancy weights along z.
pub fn z_average(w: &OccupancyWeights) -> BevMap {
    let (nx, ny, nz) = w.dims();
    let mut out = BevMap::zeros((nx, ny));
    let inv = 1.0 / nz as f64;
    for ix in 0..nx {
        for iy in 0..ny {
            let mut acc = 0.0;
            for iz in 0..nz {
                acc += w.get(ix, iy, iz);
            }
            out.set(ix, iy, acc * inv);
        }
    }
    out
}

/// Expand a BEV feature back to a volume: out[c,x,y,z] = b[c,x,y] · w[x,y,z].
pub fn bev_to_voxel(b: &BevFeature, w: &OccupancyWeights) -> Result<VoxelGrid, GridError> {
    let (nx, ny) = b.dims();
    let (wx, wy, nz) = w.dims();
    if (nx, ny) != (wx, wy) {
        return Err(GridError::DimMismatch(format!(
            "bev {:?} vs weights {:?}",
            (nx, ny),
            (wx, wy)
        )));
    }
    let c = b.channels();
    let mut out = VoxelGrid::zeros(c, (nx, ny, nz));
    for ix in 0..nx {
        for iy in 0..ny {
            let feat = b.cell(ix, iy);
            for iz in 0..nz {
                let weight = w.get(ix, iy, iz);
                let dst = out.voxel_mut(ix, iy, iz);
                for (d, f) in dst.iter_mut().zip(feat) {
                    *d = f * weight;
                }
            }
        }
    }
    Ok(out)
}

/// Learned height collapse: the z axis is folded into channels and mapped
/// back to C channels by a C×(C·Z) linear layer. Uniform initialization
/// degenerates to the mean over z slices.
#[derive(Debug, Clone)]
pub struct ZCollapse {
    channels: usize,
    z: usize,
    /// Row-major C×(C·Z); column index is c_in·Z + z.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl ZCollapse {
    pub fn uniform(channels: usize, z: usize) -> Self {
        let mut weight = vec![0.0; channels * channels * z];
        let inv = 1.0 / z as f64;
        for c in 0..channels {
            for iz in 0..z {
                weight[c * channels * z + c * z + iz] = inv;
            }
        }
        Self {
            channels,
            z,
            weight,
            bias: vec![0.0; channels],
        }
    }

    pub fn from_parts(
        channels: usize,
        z: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self, GridError> {
        if weight.len() != channels * channels * z || bias.len() != channels {
            return Err(GridError::BadLength {
                expected: channels * channels * z,
                got: weight.len(),
            });
        }
        Ok(Self {
            channels,
            z,
            weight,
            bias,
        })
    }

    pub fn seeded(channels: usize, z: usize, rng: &mut impl rand::Rng) -> Self {
        let mut base = Self::uniform(channels, z);
        let scale = 0.1 / (channels as f64 * z as f64).sqrt();
        for w in base.weight.iter_mut() {
            *w += rng.gen_range(-scale..scale);
        }
        base
    }

    pub fn z(&self) -> usize {
        self.z
    }
}

/// Collapse a voxel volume to BEV through the learned z fold.
pub fn voxel_to_bev(v: &VoxelGrid, params: &ZCollapse) -> Result<BevFeature, GridError> {
    let (nx, ny, nz) = v.dims();
    let c = v.channels();
    if c != params.channels || nz != params.z {
        return Err(GridError::DimMismatch(format!(
            "grid C={c} Z={nz} vs collapse C={} Z={}",
            params.channels, params.z
        )));
    }
    let mut out = BevFeature::zeros(c, (nx, ny));
    let mut column = vec![0.0; c * nz];
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                let src = v.voxel(ix, iy, iz);
                for (ci, s) in src.iter().enumerate() {
                    column[ci * nz + iz] = *s;
                }
            }
            let dst = out.cell_mut(ix, iy);
            for (co, d) in dst.iter_mut().enumerate() {
                let row = &params.weight[co * c * nz..(co + 1) * c * nz];
                let mut acc = params.bias[co];
                for (wv, cv) in row.iter().zip(column.iter()) {
                    acc += wv * cv;
                }
                *d = acc;
            }
        }
    }
    Ok(out)
}

/// Occupancy-weighted mean collapse, the alternative to the linear fold:
/// B[c,x,y] = Σ_z V[c,x,y,z]·w[x,y,z] / (Σ_z w[x,y,z] + ε). Columns whose
/// weights sum to ~zero fall back to the plain mean over z.
pub fn voxel_to_bev_weighted(v: &VoxelGrid, w: &OccupancyWeights) -> Result<BevFeature, GridError> {
    let (nx, ny, nz) = v.dims();
    if w.dims() != (nx, ny, nz) {
        return Err(GridError::DimMismatch(format!(
            "grid {:?} vs weights {:?}",
            v.dims(),
            w.dims()
        )));
    }
    let c = v.channels();
    let mut out = BevFeature::zeros(c, (nx, ny));
    for ix in 0..nx {
        for iy in 0..ny {
            let mut norm = 0.0;
            for iz in 0..nz {
                norm += w.get(ix, iy, iz);
            }
            let uniform = norm < 1e-9;
            let inv = if uniform {
                1.0 / nz as f64
            } else {
                1.0 / (norm + 1e-9)
            };
            let dst_start = (ix * ny + iy) * c;
            for iz in 0..nz {
                let weight = if uniform { inv } else { w.get(ix, iy, iz) * inv };
                if weight == 0.0 {
                    continue;
                }
                let src = v.voxel(ix, iy, iz);
                for (ci, s) in src.iter().enumerate() {
                    out.data_mut()[dst_start + ci] += weight * s;
                }
            }
        }
    }
    Ok(out)
}

/// Double the resolution of a feature volume by trilinear interpolation.
/// Output cell j samples the input at (j + 0.5)/2 - 0.5, clamped, so a
/// constant volume stays constant and no value overshoots the input range.
pub fn upsample2x_grid(v: &VoxelGrid) -> VoxelGrid {
    let (nx, ny, nz) = v.dims();
    let c = v.channels();
    let mut out = VoxelGrid::zeros(c, (2 * nx, 2 * ny, 2 * nz));
    let src_coord = |j: usize, n: usize| -> f64 {
        ((j as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64)
    };
    let mut buf = vec![0.0; c];
    for ox in 0..2 * nx {
        let sx = src_coord(ox, nx);
        for oy in 0..2 * ny {
            let sy = src_coord(oy, ny);
            for oz in 0..2 * nz {
                let sz = src_coord(oz, nz);
                v.sample_trilinear(sx, sy, sz, &mut buf);
                out.voxel_mut(ox, oy, oz).copy_from_slice(&buf);
            }
        }
    }
    out
}

/// Double the resolution of occupancy weights by nearest-neighbor
/// replication, preserving the occupied state exactly.
pub fn upsample2x_weights(w: &OccupancyWeights) -> OccupancyWeights {
    let (nx, ny, nz) = w.dims();
    let mut out = OccupancyWeights::zeros((2 * nx, 2 * ny, 2 * nz));
    for ox in 0..2 * nx {
        for oy in 0..2 * ny {
            for oz in 0..2 * nz {
                out.set(ox, oy, oz, w.get(ox / 2, oy / 2, oz / 2));
            }
        }
    }
    out
}

/// Adjoint of `upsample2x_weights`: sums each output cell's gradient back
/// into its source cell.
pub fn upsample2x_weights_backward(
    grad_out: &[f64],
    coarse_dims: (usize, usize, usize),
) -> Vec<f64> {
    let (nx, ny, nz) = coarse_dims;
    let (ox, oy, oz) = (2 * nx, 2 * ny, 2 * nz);
    assert_eq!(grad_out.len(), ox * oy * oz);
    let mut grad_in = vec![0.0; nx * ny * nz];
    for x in 0..ox {
        for y in 0..oy {
            for z in 0..oz {
                let g = grad_out[(x * oy + y) * oz + z];
                grad_in[((x / 2) * ny + y / 2) * nz + z / 2] += g;
            }
        }
    }
    grad_in
}
