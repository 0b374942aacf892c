//! KITTI-style `.bin` point clouds and `.label` files, little-endian throughout.

use std::path::Path;

use crate::error::{Result, ScanError};
use crate::voxel::{PointCloud, PointLabels};

pub const POINT_BYTES: usize = 16;
pub const LABEL_BYTES: usize = 4;

/// Low 16 bits semantic class, high 16 bits instance id.
pub fn decode_label(word: u32) -> (u16, u16) {
    ((word & 0xFFFF) as u16, (word >> 16) as u16)
}

pub fn encode_label(semantic: u16, instance: u16) -> u32 {
    (instance as u32) << 16 | semantic as u32
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> ScanError {
    ScanError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

pub fn parse_points(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let whole = bytes.len() / POINT_BYTES * POINT_BYTES;
    if whole != bytes.len() {
        return Err(format_err(
            path,
            whole,
            format!("{} trailing bytes after {} points", bytes.len() - whole, whole / POINT_BYTES),
        ));
    }
    let mut points = Vec::with_capacity(whole / POINT_BYTES);
    for (i, rec) in bytes.chunks_exact(POINT_BYTES).enumerate() {
        let mut p = [0f32; 4];
        for (k, v) in p.iter_mut().enumerate() {
            *v = f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4-byte field"));
            if !v.is_finite() {
                return Err(format_err(path, i * POINT_BYTES + 4 * k, "non-finite value"));
            }
        }
        points.push(p);
    }
    PointCloud::new(points)
}

pub fn points_to_bytes(p: &PointCloud) -> Vec<u8> {
    p.points().iter().flatten().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn read_point_bin(path: &Path) -> Result<PointCloud> {
    parse_points(&std::fs::read(path)?, path)
}

pub fn write_point_bin(path: &Path, p: &PointCloud) -> Result<()> {
    std::fs::write(path, points_to_bytes(p))?;
    Ok(())
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<PointLabels> {
    let whole = bytes.len() / LABEL_BYTES * LABEL_BYTES;
    if whole != bytes.len() {
        return Err(format_err(path, whole, format!("{} bytes is not a whole number of labels", bytes.len())));
    }
    let (semantic, instance) = bytes
        .chunks_exact(LABEL_BYTES)
        .map(|c| decode_label(u32::from_le_bytes(c.try_into().expect("4-byte label"))))
        .unzip();
    PointLabels::new(semantic, instance)
}

pub fn labels_to_bytes(l: &PointLabels) -> Vec<u8> {
    l.semantic
        .iter()
        .zip(&l.instance)
        .flat_map(|(&s, &i)| encode_label(s, i).to_le_bytes())
        .collect()
}

pub fn read_labels(path: &Path) -> Result<PointLabels> {
    parse_labels(&std::fs::read(path)?, path)
}

/// Reads labels and checks them against the companion cloud's point count.
pub fn read_labels_for(path: &Path, n_points: usize) -> Result<PointLabels> {
    let l = read_labels(path)?;
    if l.len() != n_points {
        return Err(format_err(
            path,
            l.len().min(n_points) * LABEL_BYTES,
            format!("{} labels for {} points", l.len(), n_points),
        ));
    }
    Ok(l)
}

pub fn write_labels(path: &Path, l: &PointLabels) -> Result<()> {
    std::fs::write(path, labels_to_bytes(l))?;
    Ok(())
}
