//! Binary grid and scene files.
//!
//! Grid file: `DMI1`, `u32` width, `u32` height (little endian), then
//! `width * height` little-endian `f32` values in row-major order.
//! Scene file: the same header, `width * height` `u8` building flags, then
//! two `u32` (transmitter row, col).

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scene_sim::{Scene, SimParams};

pub const GRID_MAGIC: &[u8; 4] = b"DMI1";

fn header(width: usize, height: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + width * height * 4);
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(usize, usize)> {
    if bytes.len() < 12 || &bytes[..4] != GRID_MAGIC {
        return Err(Error::Format {
            path: path.into(),
            reason: "missing DMI1 header".into(),
        });
    }
    Ok((read_u32(bytes, 4) as usize, read_u32(bytes, 8) as usize))
}

pub fn encode_grid(grid: &Grid) -> Vec<u8> {
    let mut out = header(grid.width, grid.height);
    for &v in &grid.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_grid(path: &Path, bytes: &[u8]) -> Result<Grid> {
    let (w, h) = parse_header(path, bytes)?;
    let body = &bytes[12..];
    if body.len() != w * h * 4 {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("expected {} value bytes, found {}", w * h * 4, body.len()),
        });
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Grid::from_vec(w, h, values)
}

pub fn write_grid(path: &Path, grid: &Grid) -> Result<()> {
    write_bytes(path, &encode_grid(grid))
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(path, &bytes)
}

pub fn encode_scene(scene: &Scene) -> Vec<u8> {
    let mut out = header(scene.width, scene.height);
    out.extend_from_slice(&scene.buildings);
    out.extend_from_slice(&(scene.tx.0 as u32).to_le_bytes());
    out.extend_from_slice(&(scene.tx.1 as u32).to_le_bytes());
    out
}

/// Scene files do not carry simulator parameters; `params` is attached as given.
pub fn decode_scene(path: &Path, bytes: &[u8], params: SimParams) -> Result<Scene> {
    let (w, h) = parse_header(path, bytes)?;
    if bytes.len() != 12 + w * h + 8 {
        return Err(Error::Format {
            path: path.into(),
            reason: "scene file has wrong length".into(),
        });
    }
    let buildings = bytes[12..12 + w * h].to_vec();
    let tx = (
        read_u32(bytes, 12 + w * h) as usize,
        read_u32(bytes, 16 + w * h) as usize,
    );
    let scene = Scene {
        width: w,
        height: h,
        buildings,
        tx,
        params,
    };
    scene.validate().map_err(|e| Error::Format {
        path: path.into(),
        reason: e.to_string(),
    })?;
    Ok(scene)
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    write_bytes(path, &encode_scene(scene))
}

pub fn read_scene(path: &Path, params: SimParams) -> Result<Scene> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scene(path, &bytes, params)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.into(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_header_layout() {
        let g = Grid::from_vec(2, 1, vec![0.5, 1.0]).unwrap();
        let bytes = encode_grid(&g);
        assert_eq!(&bytes[..4], b"DMI1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &0.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 20);
        let back = decode_grid(Path::new("mem"), &bytes).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn rejects_bad_magic() {
        let err = decode_grid(Path::new("x.dmi"), b"NOPE\0\0\0\0\0\0\0\0").unwrap_err();
        assert!(err.to_string().contains("x.dmi"));
    }

    #[test]
    fn scene_roundtrip() {
        let mut scene = Scene::empty(16, 16, (3, 4), SimParams::default());
        scene.buildings[5 * 16 + 5] = 1;
        let bytes = encode_scene(&scene);
        assert_eq!(bytes.len(), 12 + 256 + 8);
        let back = decode_scene(Path::new("mem"), &bytes, SimParams::default()).unwrap();
        assert_eq!(back, scene);
    }
}
