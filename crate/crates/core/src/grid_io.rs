//! The "STCG" binary grid file format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic    4 bytes  "STCG"
//! version  u16      1
//! kind     u8       0 = feature (f32), 1 = semantic (u8),
//!                   2 = flow (f32 pairs), 3 = weights (f32)
//! reserved u8       written as 0, ignored on read
//! X Y Z C  u32 ×4   C is 1 for semantic/weights, 2 for flow
//! payload           index order ((x·Y + y)·Z + z)·C + c
//! ```
//!
//! Feature values are stored as f32; reading widens to f64, so a file
//! roundtrips byte-identically while in-memory grids roundtrip exactly
//! when their values are f32-representable.

use crate::grid::{FlowGrid, GridError, OccupancyWeights, SemanticGrid, VoxelGrid};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"STCG";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum GridIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected \"STCG\"")]
    BadMagic,
    #[error("unsupported format version {0}")]
    VersionMismatch(u16),
    #[error("file truncated mid-payload")]
    TruncatedFile,
    #[error("unknown grid kind {0}")]
    BadKind(u8),
    #[error("invalid channel count {got} for kind {kind}")]
    BadChannels { kind: u8, got: u32 },
    #[error("grid data invalid: {0}")]
    Grid(#[from] GridError),
}

/// A typed grid as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum GridFile {
    Feature(VoxelGrid),
    Semantic(SemanticGrid),
    Flow(FlowGrid),
    Weights(OccupancyWeights),
}

impl GridFile {
    pub fn kind(&self) -> u8 {
        match self {
            GridFile::Feature(_) => 0,
            GridFile::Semantic(_) => 1,
            GridFile::Flow(_) => 2,
            GridFile::Weights(_) => 3,
        }
    }

    pub fn into_feature(self) -> Option<VoxelGrid> {
        match self {
            GridFile::Feature(g) => Some(g),
            _ => None,
        }
    }

    pub fn into_semantic(self) -> Option<SemanticGrid> {
        match self {
            GridFile::Semantic(g) => Some(g),
            _ => None,
        }
    }

    pub fn into_flow(self) -> Option<FlowGrid> {
        match self {
            GridFile::Flow(g) => Some(g),
            _ => None,
        }
    }

    pub fn into_weights(self) -> Option<OccupancyWeights> {
        match self {
            GridFile::Weights(g) => Some(g),
            _ => None,
        }
    }
}

pub fn write_grid(path: &Path, grid: &GridFile) -> Result<(), GridIoError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_grid_to(&mut w, grid)?;
    w.flush()?;
    Ok(())
}

pub fn write_grid_to(w: &mut impl Write, grid: &GridFile) -> Result<(), GridIoError> {
    let (dims, channels) = match grid {
        GridFile::Feature(g) => (g.dims(), g.channels() as u32),
        GridFile::Semantic(g) => (g.dims(), 1),
        GridFile::Flow(g) => (g.dims(), 2),
        GridFile::Weights(g) => (g.dims(), 1),
    };
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[grid.kind(), 0])?;
    for d in [dims.0 as u32, dims.1 as u32, dims.2 as u32, channels] {
        w.write_all(&d.to_le_bytes())?;
    }
    match grid {
        GridFile::Feature(g) => write_f32s(w, g.data())?,
        GridFile::Semantic(g) => w.write_all(g.labels())?,
        GridFile::Flow(g) => write_f32s(w, g.data())?,
        GridFile::Weights(g) => write_f32s(w, g.data())?,
    }
    Ok(())
}

fn write_f32s(w: &mut impl Write, data: &[f64]) -> Result<(), GridIoError> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<GridFile, GridIoError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    read_grid_from(&mut r)
}

pub fn read_grid_from(r: &mut impl Read) -> Result<GridFile, GridIoError> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic)?;
    if magic != MAGIC {
        return Err(GridIoError::BadMagic);
    }
    let mut hdr = [0u8; 2 + 2 + 16];
    read_exact_or_truncated(r, &mut hdr)?;
    let version = u16::from_le_bytes([hdr[0], hdr[1]]);
    if version != VERSION {
        return Err(GridIoError::VersionMismatch(version));
    }
    let kind = hdr[2];
    let dims_u32: Vec<u32> = (0..4)
        .map(|i| u32::from_le_bytes(hdr[4 + 4 * i..8 + 4 * i].try_into().unwrap()))
        .collect();
    let dims = (
        dims_u32[0] as usize,
        dims_u32[1] as usize,
        dims_u32[2] as usize,
    );
    let channels = dims_u32[3];
    let voxels = dims.0 * dims.1 * dims.2;
    match kind {
        0 => {
            let data = read_f32s(r, voxels * channels as usize)?;
            Ok(GridFile::Feature(VoxelGrid::from_data(
                channels as usize,
                dims,
                data,
            )?))
        }
        1 => {
            if channels != 1 {
                return Err(GridIoError::BadChannels { kind, got: channels });
            }
            let mut labels = vec![0u8; voxels];
            read_exact_or_truncated(r, &mut labels)?;
            Ok(GridFile::Semantic(SemanticGrid::from_labels(dims, labels)?))
        }
        2 => {
            if channels != 2 {
                return Err(GridIoError::BadChannels { kind, got: channels });
            }
            let data = read_f32s(r, 2 * voxels)?;
            Ok(GridFile::Flow(FlowGrid::from_data(dims, data)?))
        }
        3 => {
            if channels != 1 {
                return Err(GridIoError::BadChannels { kind, got: channels });
            }
            let data = read_f32s(r, voxels)?;
            Ok(GridFile::Weights(OccupancyWeights::from_data(dims, data)?))
        }
        k => Err(GridIoError::BadKind(k)),
    }
}

fn read_f32s(r: &mut impl Read, count: usize) -> Result<Vec<f64>, GridIoError> {
    let mut bytes = vec![0u8; count * 4];
    read_exact_or_truncated(r, &mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8]) -> Result<(), GridIoError> {
    match r.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            Err(GridIoError::TruncatedFile)
        }
        Err(e) => Err(GridIoError::Io(e)),
    }
}
