//! The `.vxg` binary voxel-grid file format.
//!
//! Layout (little-endian, no compression, no padding):
//!
//! | bytes   | content                                     |
//! |---------|---------------------------------------------|
//! | 0..4    | magic ASCII `VXG1`                          |
//! | 4..16   | three `u32`: depth, height, width           |
//! | 16..    | `depth*height*width` bytes, each 0x00/0x01  |
//!
//! Payload order is depth-major, then height, then width.

use crate::error::{CoreError, Result};
use crate::voxel::VoxelGrid;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"VXG1";
const HEADER_LEN: usize = 16;

/// Serializes a grid into the on-disk byte layout.
pub fn encode_vxg(g: &VoxelGrid) -> Vec<u8> {
    let [d, h, w] = g.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + g.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(g.bytes());
    out
}

/// Parses the byte layout, reporting the offset of the first malformed byte.
pub fn decode_vxg(bytes: &[u8]) -> Result<VoxelGrid> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CoreError::Format {
            offset: 0,
            reason: format!(
                "bad magic {:02x?}, expected {:02x?}",
                &bytes[..bytes.len().min(4)],
                MAGIC
            ),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(CoreError::Format {
            offset: bytes.len(),
            reason: format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        });
    }
    let dim = |i: usize| -> usize {
        u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize
    };
    let dims = [dim(0), dim(1), dim(2)];
    if dims.iter().any(|&d| d == 0) {
        return Err(CoreError::Format {
            offset: 4,
            reason: format!("zero dimension in header {dims:?}"),
        });
    }
    let voxels = dims[0]
        .checked_mul(dims[1])
        .and_then(|p| p.checked_mul(dims[2]))
        .ok_or(CoreError::Format {
            offset: 4,
            reason: format!("dimension product overflow for {dims:?}"),
        })?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != voxels {
        return Err(CoreError::Format {
            offset: bytes.len().min(HEADER_LEN + voxels),
            reason: format!(
                "payload is {} bytes, header {dims:?} requires {voxels}",
                payload.len()
            ),
        });
    }
    if let Some(pos) = payload.iter().position(|&b| b > 1) {
        return Err(CoreError::Format {
            offset: HEADER_LEN + pos,
            reason: format!("payload byte 0x{:02x} outside {{0x00, 0x01}}", payload[pos]),
        });
    }
    VoxelGrid::from_raw(dims, payload.to_vec())
}

pub fn read_vxg(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    let bytes = std::fs::read(path)?;
    decode_vxg(&bytes)
}

pub fn write_vxg(g: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_vxg(g))?;
    Ok(())
}
