//! 8-bit PGM and PPM export of grids.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colormap {
    #[default]
    Gray,
    Viridis,
}

/// Viridis anchor colors at `k / 8`, `k = 0..=8`.
const VIRIDIS: [[u8; 3]; 9] = [
    [68, 1, 84],
    [70, 50, 126],
    [59, 82, 139],
    [44, 114, 142],
    [33, 145, 140],
    [40, 174, 128],
    [94, 201, 98],
    [173, 220, 48],
    [253, 231, 37],
];

/// `round(255 v)` with `v` clamped to `[0, 1]`; NaN maps to 0.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGB for byte level `q` by linear interpolation between the anchors.
pub fn viridis(q: u8) -> [u8; 3] {
    let x = q as f64 / 255.0 * 8.0;
    let k = (x.floor() as usize).min(7);
    let f = x - k as f64;
    let (a, b) = (VIRIDIS[k], VIRIDIS[k + 1]);
    [0, 1, 2].map(|i| (a[i] as f64 + f * (b[i] as f64 - a[i] as f64)).round() as u8)
}

pub fn encode_pgm(grid: &Grid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    out.extend(grid.values.iter().map(|&v| quantize(v)));
    out
}

pub fn encode_ppm(grid: &Grid) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    for &v in &grid.values {
        out.extend_from_slice(&viridis(quantize(v)));
    }
    out
}

pub fn encode_image(grid: &Grid, colormap: Colormap) -> Vec<u8> {
    match colormap {
        Colormap::Gray => encode_pgm(grid),
        Colormap::Viridis => encode_ppm(grid),
    }
}

pub fn export_image(grid: &Grid, path: &Path, colormap: Colormap) -> Result<()> {
    crate::io::write_bytes(path, &encode_image(grid, colormap))
}

/// Reads a binary 8-bit PGM back into a grid with values `byte / 255`.
pub fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<Grid> {
    let bad = |reason: &str| Error::Format {
        path: path.into(),
        reason: reason.into(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let body = &bytes[pos + 1..];
    if body.len() != w * h {
        return Err(bad("pixel count does not match header"));
    }
    Grid::from_vec(w, h, body.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn read_pgm(path: &Path) -> Result<Grid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn black_and_white() {
        let pgm = encode_pgm(&Grid::zeros(3, 2));
        assert_eq!(&pgm[..11], b"P5\n3 2\n255\n");
        assert!(pgm[11..].iter().all(|&b| b == 0));
        assert_eq!(encode_pgm(&Grid::filled(1, 1, 1.0))[11..], [255]);
        assert_eq!(viridis(0), VIRIDIS[0]);
        assert_eq!(viridis(255), VIRIDIS[8]);
        let ppm = encode_ppm(&Grid::filled(2, 2, 0.5));
        assert_eq!(&ppm[..11], b"P6\n2 2\n255\n");
        assert_eq!(ppm.len(), 11 + 12);
    }

    #[test]
    fn rejects_non_pgm() {
        let p = Path::new("x.pgm");
        assert!(decode_pgm(p, b"P6\n1 1\n255\n\0\0\0").is_err());
        assert!(decode_pgm(p, b"P5\n2 2\n255\n\0").is_err());
        assert!(decode_pgm(p, b"P5\n# note\n1 1\n255\n\x80").is_ok());
    }

    proptest! {
        #[test]
        fn pgm_roundtrip_within_half_level(values in prop::collection::vec(0.0f64..=1.0, 12)) {
            let g = Grid::from_vec(4, 3, values).unwrap();
            let back = decode_pgm(Path::new("m.pgm"), &encode_pgm(&g)).unwrap();
            for (a, b) in g.values.iter().zip(&back.values) {
                prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
            }
            prop_assert_eq!(encode_pgm(&g), encode_pgm(&g));
        }
    }
}
