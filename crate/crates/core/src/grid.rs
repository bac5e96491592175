//! Dense multi-channel grids and the stencil operations built on them.
//!
//! Every image, feature map and depth map in the crate is an [`ImageGrid`]:
//! row-major and channel-interleaved, so element `(row, col, ch)` lives at
//! `data[(row * width + col) * channels + ch]`. Values are `f64` throughout.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Metadata describing the nominal value range of a grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ValueRange {
    /// Raw values with no normalization contract (depth, features, gradients).
    #[default]
    Unbounded,
    /// Intensities normalized to `[0, 1]`.
    Unit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    range: ValueRange,
}

impl ImageGrid {
    /// Wraps `data`, checking its length and that every value is finite.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(alloc::format!(
                "{} values for a {height}x{width}x{channels} grid",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid data"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            range: ValueRange::Unbounded,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
            range: ValueRange::Unbounded,
        }
    }

    /// Builds a grid by evaluating `f(row, col, channel)` everywhere.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn with_range(mut self, range: ValueRange) -> Self {
        self.range = range;
        self
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    /// `(height, width, channels)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    /// Writes one value. Panics on a non-finite value.
    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        assert!(value.is_finite(), "grid values must be finite");
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    /// All channels of one pixel.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Elementwise map. Fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::new(self.height, self.width, self.channels, data)
    }

    /// Extracts a single channel.
    pub fn channel(&self, ch: usize) -> Self {
        assert!(ch < self.channels);
        let data = self.data.iter().skip(ch).step_by(self.channels).copied().collect();
        Self {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
            range: self.range,
        }
    }

    /// Concatenates grids of equal spatial size along the channel axis.
    pub fn stack_channels(grids: &[ImageGrid]) -> Result<Self> {
        let first = grids.first().ok_or(Error::Degenerate("no grids to stack"))?;
        let (h, w) = (first.height, first.width);
        for g in grids {
            ensure_same_hw(first, g)?;
        }
        let channels: usize = grids.iter().map(|g| g.channels).sum();
        let mut data = Vec::with_capacity(h * w * channels);
        for p in 0..h * w {
            for g in grids {
                data.extend_from_slice(&g.data[p * g.channels..(p + 1) * g.channels]);
            }
        }
        Ok(Self {
            height: h,
            width: w,
            channels,
            data,
            range: ValueRange::Unbounded,
        })
    }

    /// Returns an error unless `other` has identical dimensions.
    pub fn ensure_same_dims(&self, other: &ImageGrid) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: other.dims(),
            });
        }
        Ok(())
    }
}

pub(crate) fn ensure_same_hw(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::DimensionMismatch {
            expected: (a.height, a.width, b.channels),
            found: b.dims(),
        });
    }
    Ok(())
}

/// Per-pixel validity flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    height: usize,
    width: usize,
    flags: Vec<bool>,
}

impl ValidityMask {
    pub fn new(height: usize, width: usize, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != height * width {
            return Err(Error::Shape(alloc::format!(
                "{} flags for a {height}x{width} mask",
                flags.len()
            )));
        }
        Ok(Self { height, width, flags })
    }

    pub fn all_valid(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            flags: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.flags[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, valid: bool) {
        self.flags[row * self.width + col] = valid;
    }

    pub fn count_valid(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn and(&self, other: &ValidityMask) -> Result<Self> {
        self.ensure_matches(other.height, other.width)?;
        let flags = self.flags.iter().zip(&other.flags).map(|(&a, &b)| a && b).collect();
        Ok(Self {
            height: self.height,
            width: self.width,
            flags,
        })
    }

    pub fn ensure_matches(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::DimensionMismatch {
                expected: (height, width, 1),
                found: (self.height, self.width, 1),
            });
        }
        Ok(())
    }
}

/// Horizontal forward difference `g[m, n] = grid[m, n + 1] - grid[m, n]`.
///
/// The output is one column narrower than the input; no boundary values are
/// invented.
pub fn gradient_x(grid: &ImageGrid) -> Result<ImageGrid> {
    if grid.width < 2 {
        return Err(Error::Degenerate("gradient_x needs width >= 2"));
    }
    let (h, w, c) = grid.dims();
    let mut data = Vec::with_capacity(h * (w - 1) * c);
    for r in 0..h {
        for col in 0..w - 1 {
            let a = grid.pixel(r, col);
            let b = grid.pixel(r, col + 1);
            data.extend(a.iter().zip(b).map(|(a, b)| b - a));
        }
    }
    ImageGrid::new(h, w - 1, c, data)
}

/// Vertical forward difference; the output is one row shorter than the input.
pub fn gradient_y(grid: &ImageGrid) -> Result<ImageGrid> {
    if grid.height < 2 {
        return Err(Error::Degenerate("gradient_y needs height >= 2"));
    }
    let (h, w, c) = grid.dims();
    let mut data = Vec::with_capacity((h - 1) * w * c);
    for r in 0..h - 1 {
        for col in 0..w {
            let a = grid.pixel(r, col);
            let b = grid.pixel(r + 1, col);
            data.extend(a.iter().zip(b).map(|(a, b)| b - a));
        }
    }
    ImageGrid::new(h - 1, w, c, data)
}

/// Single-channel grid holding the mean absolute value across channels.
pub fn channel_mean_abs(grid: &ImageGrid) -> Result<ImageGrid> {
    if grid.channels == 0 {
        return Err(Error::Degenerate("channel_mean_abs needs at least one channel"));
    }
    let c = grid.channels as f64;
    let data = grid
        .data
        .chunks_exact(grid.channels)
        .map(|px| px.iter().map(|v| v.abs()).sum::<f64>() / c)
        .collect();
    ImageGrid::new(grid.height, grid.width, 1, data)
}

/// Central-difference estimate of `df/dgrid` for every element.
pub fn finite_difference_probe(
    mut f: impl FnMut(&ImageGrid) -> f64,
    grid: &ImageGrid,
    epsilon: f64,
) -> Result<ImageGrid> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(alloc::format!("epsilon {epsilon} must be > 0")));
    }
    let mut probe = grid.clone();
    let mut out = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let original = probe.data[i];
        probe.data[i] = original + epsilon;
        let plus = f(&probe);
        probe.data[i] = original - epsilon;
        let minus = f(&probe);
        probe.data[i] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation"));
        }
        out.push((plus - minus) / (2.0 * epsilon));
    }
    ImageGrid::new(grid.height, grid.width, grid.channels, out)
}
