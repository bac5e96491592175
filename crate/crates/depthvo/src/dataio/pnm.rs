//! Binary 8-bit PGM (`P5`) and PPM (`P6`) images.

use std::path::Path;

use depthvo_core::grid::{ImageGrid, ValueRange};

use crate::error::{self, Error, Result};

/// Decodes a binary PGM or PPM, normalizing samples by the header's maxval.
pub fn decode_pnm(bytes: &[u8], origin: &Path) -> Result<ImageGrid> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos).ok_or_else(|| Error::parse(origin, 1, "missing magic"))?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(Error::parse(origin, 1, "expected P5 or P6 magic")),
    };
    let mut field = |name: &str| -> Result<usize> {
        let tok = header_token(bytes, &mut pos).ok_or_else(|| Error::parse(origin, 1, format!("missing {name}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|t| t.parse::<usize>().ok())
            .ok_or_else(|| Error::parse(origin, 1, format!("invalid {name}")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::parse(origin, 1, "zero image dimension"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::parse(origin, 1, format!("maxval {maxval} is not 8-bit")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height * channels;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::parse(origin, 1, format!("raster truncated: need {n} bytes")))?;
    let scale = maxval as f64;
    let data = raster.iter().map(|&b| (b as f64 / scale).min(1.0)).collect();
    Ok(ImageGrid::new(height, width, channels, data)?.with_range(ValueRange::Unit))
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        match bytes.get(*pos)? {
            b'#' => {
                while *bytes.get(*pos)? != b'\n' {
                    *pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|c| !c.is_ascii_whitespace()) {
        *pos += 1;
    }
    Some(&bytes[start..*pos])
}

/// Encodes a 1- or 3-channel grid, clamping to `[0, 1]` and rounding to 8 bits.
pub fn encode_pnm(grid: &ImageGrid) -> Result<Vec<u8>> {
    let magic = match grid.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Data(format!("cannot store {c} channels as PGM/PPM"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(grid.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<ImageGrid> {
    decode_pnm(&error::read(path)?, path)
}

pub fn save_image(path: &Path, grid: &ImageGrid) -> Result<()> {
    error::write(path, encode_pnm(grid)?)
}
