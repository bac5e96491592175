//! Per-sequence calibration: intrinsics plus stereo baseline in meters.
//!
//! The native format is flat `key=value` text with keys `fx fy cx cy baseline`.
//! KITTI `calib.txt` files (lines `P0:`..`P3:` holding 3x4 projection
//! matrices) are also accepted; the colour pair `P2`/`P3` is preferred over the
//! grey pair `P0`/`P1`.

use std::collections::BTreeMap;
use std::path::Path;

use depthvo_core::camera::Intrinsics;

use crate::error::{self, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub intrinsics: Intrinsics,
    pub baseline: f64,
}

impl Calibration {
    pub fn new(intrinsics: Intrinsics, baseline: f64) -> Result<Self> {
        if !baseline.is_finite() || baseline <= 0.0 {
            return Err(Error::Data(format!("baseline must be positive, got {baseline}")));
        }
        Ok(Self { intrinsics, baseline })
    }

    pub fn to_text(&self) -> String {
        let k = &self.intrinsics;
        format!(
            "fx={:e}\nfy={:e}\ncx={:e}\ncy={:e}\nbaseline={:e}\n",
            k.fx, k.fy, k.cx, k.cy, self.baseline
        )
    }
}

/// Parses either calibration flavour, detected from the first meaningful line.
pub fn parse_calibration(text: &str, origin: &Path) -> Result<Calibration> {
    let kitti = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .is_some_and(|l| l.starts_with('P') && l.contains(':'));
    if kitti {
        parse_kitti_calibration(text, origin)
    } else {
        parse_key_value_calibration(text, origin)
    }
}

fn parse_key_value_calibration(text: &str, origin: &Path) -> Result<Calibration> {
    let map = parse_key_values(text, origin)?;
    let get = |key: &str| -> Result<f64> {
        let (line, raw) = map
            .get(key)
            .ok_or_else(|| Error::parse(origin, 0, format!("missing key {key}")))?;
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::parse(origin, *line, format!("invalid value for {key}")))
    };
    let intrinsics = Intrinsics::new(get("fx")?, get("fy")?, get("cx")?, get("cy")?)?;
    Calibration::new(intrinsics, get("baseline")?)
}

/// `key=value` lines with `#` comments; values keep their line numbers.
pub fn parse_key_values(text: &str, origin: &Path) -> Result<BTreeMap<String, (usize, String)>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(origin, i + 1, "expected key=value"))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::parse(origin, i + 1, "empty key"));
        }
        if map.insert(key.to_string(), (i + 1, v.trim().to_string())).is_some() {
            return Err(Error::parse(origin, i + 1, format!("duplicate key {key}")));
        }
    }
    Ok(map)
}

fn parse_kitti_calibration(text: &str, origin: &Path) -> Result<Calibration> {
    let mut rows: BTreeMap<String, (usize, [f64; 12])> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let Some((name, rest)) = raw.split_once(':') else { continue };
        let values: Vec<f64> = rest
            .split_whitespace()
            .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::parse(origin, i + 1, format!("invalid number in {}", name.trim())))?;
        if let Ok(m) = <[f64; 12]>::try_from(values) {
            rows.insert(name.trim().to_string(), (i + 1, m));
        }
    }
    let (left, right) = [("P2", "P3"), ("P0", "P1")]
        .iter()
        .find_map(|(l, r)| Some((rows.get(*l)?, rows.get(*r)?)))
        .ok_or_else(|| Error::parse(origin, 0, "need P2/P3 or P0/P1 projection matrices"))?;
    let (line, p) = *left;
    let intrinsics = Intrinsics::new(p[0], p[5], p[2], p[6]).map_err(|e| Error::parse(origin, line, e.to_string()))?;
    let baseline = (p[3] - right.1[3]) / p[0];
    Calibration::new(intrinsics, baseline)
}

pub fn load_calibration(path: &Path) -> Result<Calibration> {
    parse_calibration(&error::read_text(path)?, path)
}

pub fn save_calibration(path: &Path, calib: &Calibration) -> Result<()> {
    error::write(path, calib.to_text())
}
