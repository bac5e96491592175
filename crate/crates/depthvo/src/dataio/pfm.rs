//! Portable float maps (`Pf` single channel, `PF` three channel).
//!
//! Rows are stored bottom to top. A negative scale field marks little-endian
//! samples; files are always written little-endian with scale `-1`.

use std::path::Path;

use depthvo_core::grid::ImageGrid;

use crate::error::{self, Error, Result};

pub fn decode_pfm(bytes: &[u8], origin: &Path) -> Result<ImageGrid> {
    let mut pos = 0;
    let mut line = |n: usize| -> Result<&str> {
        let rest = &bytes[pos.min(bytes.len())..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(origin, n, "truncated header"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end])
            .map(str::trim)
            .map_err(|_| Error::parse(origin, n, "header is not ASCII"))
    };
    let channels = match line(1)? {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(Error::parse(origin, 1, "expected PF or Pf magic")),
    };
    let dims: Vec<usize> = line(2)?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::parse(origin, 2, "invalid dimensions")))
        .collect::<Result<_>>()?;
    let [width, height] = dims[..] else {
        return Err(Error::parse(origin, 2, "expected width and height"));
    };
    if width == 0 || height == 0 {
        return Err(Error::parse(origin, 2, "zero image dimension"));
    }
    let scale: f64 = line(3)?
        .parse()
        .map_err(|_| Error::parse(origin, 3, "invalid scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::parse(origin, 3, "scale must be finite and nonzero"));
    }
    let little = scale < 0.0;
    let n = width * height * channels;
    let raster = bytes
        .get(pos..pos + 4 * n)
        .ok_or_else(|| Error::parse(origin, 4, format!("raster truncated: need {} bytes", 4 * n)))?;
    let mut data = vec![0.0; n];
    let row_len = width * channels;
    for (i, chunk) in raster.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        if !v.is_finite() {
            return Err(Error::parse(origin, 4, format!("non-finite sample at index {i}")));
        }
        let (file_row, k) = (i / row_len, i % row_len);
        data[(height - 1 - file_row) * row_len + k] = v as f64;
    }
    Ok(ImageGrid::new(height, width, channels, data)?)
}

/// Encodes as little-endian `f32`; exact for values representable in `f32`.
pub fn encode_pfm(grid: &ImageGrid) -> Result<Vec<u8>> {
    let magic = match grid.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Data(format!("cannot store {c} channels as PFM"))),
    };
    let mut out = format!("{magic}\n{} {}\n-1\n", grid.width(), grid.height()).into_bytes();
    let row_len = grid.width() * grid.channels();
    for row in grid.data().chunks_exact(row_len).rev() {
        for &v in row {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::Data(format!("value {v} does not fit in f32")));
            }
            out.extend(f.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn load_pfm(path: &Path) -> Result<ImageGrid> {
    decode_pfm(&error::read(path)?, path)
}

pub fn save_pfm(path: &Path, grid: &ImageGrid) -> Result<()> {
    error::write(path, encode_pfm(grid)?)
}
