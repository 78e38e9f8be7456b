//! Per-group symmetric quantization grid: scale fitting with MSE clip
//! search and round-to-nearest quantize/dequantize of weight columns.
//!
//! The grid is strictly symmetric: `qmax = 2^(bits-1) - 1` and the level
//! `-2^(bits-1)` is never produced. Rounding is round-half-away-from-zero
//! (which is what `f64::round` does).

use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("invalid grid config: {0}")]
    Config(String),
    #[error("scales not fitted for group {0}")]
    MissingScales(usize),
}

/// Static grid configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub bits: u32,
    /// `None` means per-channel (one group spanning all columns).
    pub group_size: Option<usize>,
    /// Clip ratios searched per row group; must contain 1.0.
    pub clip_grid: Vec<f64>,
}

pub const DEFAULT_CLIP_GRID: [f64; 5] = [1.00, 0.95, 0.90, 0.85, 0.80];

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            bits: 4,
            group_size: None,
            clip_grid: DEFAULT_CLIP_GRID.to_vec(),
        }
    }
}

impl GridSpec {
    pub fn validate(&self, n_cols: usize) -> Result<(), QuantError> {
        if !(2..=16).contains(&self.bits) {
            return Err(QuantError::Config(format!(
                "bits {} outside [2, 16]",
                self.bits
            )));
        }
        if let Some(g) = self.group_size {
            if g == 0 || !n_cols.is_multiple_of(g) {
                return Err(QuantError::Config(format!(
                    "group size {g} does not divide {n_cols} columns"
                )));
            }
        }
        if self.clip_grid.is_empty() || !self.clip_grid.contains(&1.0) {
            return Err(QuantError::Config(
                "clip grid must be nonempty and contain 1.0".into(),
            ));
        }
        if self.clip_grid.iter().any(|&c| !(c > 0.0 && c <= 1.0)) {
            return Err(QuantError::Config("clip ratios must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn qmax(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    /// Effective group width for a layer with `n_cols` columns.
    pub fn group_width(&self, n_cols: usize) -> usize {
        self.group_size.unwrap_or(n_cols).min(n_cols.max(1))
    }

    pub fn num_groups(&self, n_cols: usize) -> usize {
        let g = self.group_width(n_cols);
        n_cols.div_ceil(g)
    }
}

/// Fitted per-(row, group) scales for one layer.
#[derive(Debug, Clone)]
pub struct QuantGrid {
    pub spec: GridSpec,
    /// `scales[group]` is a per-row vector once the group has been fitted.
    scales: Vec<Option<Vec<f64>>>,
}

impl QuantGrid {
    pub fn new(spec: GridSpec, n_cols: usize) -> Self {
        let groups = spec.num_groups(n_cols);
        Self {
            spec,
            scales: vec![None; groups],
        }
    }

    pub fn set_group_scales(&mut self, group: usize, scales: Vec<f64>) {
        self.scales[group] = Some(scales);
    }

    pub fn group_scales(&self, group: usize) -> Result<&[f64], QuantError> {
        self.scales[group]
            .as_deref()
            .ok_or(QuantError::MissingScales(group))
    }

    pub fn is_fitted(&self, group: usize) -> bool {
        self.scales[group].is_some()
    }
}

/// A quantized weight column: integer levels plus their dequantized values.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedColumn {
    pub levels: Vec<i64>,
    pub dequant: Vec<f64>,
}

#[inline]
pub fn quantize_value(w: f64, scale: f64, qmax: i64) -> (i64, f64) {
    if scale == 0.0 {
        return (0, 0.0);
    }
    let level = (w / scale).round().clamp(-(qmax as f64), qmax as f64) as i64;
    (level, level as f64 * scale)
}

/// MSE of round-to-nearest at a candidate scale over one row group.
fn group_mse(vals: &[f64], scale: f64, qmax: i64) -> f64 {
    vals.iter()
        .map(|&w| {
            let (_, dq) = quantize_value(w, scale, qmax);
            let e = w - dq;
            e * e
        })
        .sum()
}

/// Best scale for one row's group values: candidates are
/// `c * max|w| / qmax` over the clip grid, scored by round-trip MSE.
/// Ties prefer the larger clip ratio. An all-zero group gets scale 0.
pub fn fit_row_scale(vals: &[f64], bits: u32, clip_grid: &[f64]) -> f64 {
    let qmax = (1i64 << (bits - 1)) - 1;
    let max_abs = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return 0.0;
    }
    let mut best_scale = 0.0;
    let mut best_mse = f64::INFINITY;
    let mut best_clip = 0.0;
    for &c in clip_grid {
        let scale = c * max_abs / qmax as f64;
        let mse = group_mse(vals, scale, qmax);
        if mse < best_mse || (mse == best_mse && c > best_clip) {
            best_mse = mse;
            best_scale = scale;
            best_clip = c;
        }
    }
    best_scale
}

/// Per-row scales for an m x g group slice.
pub fn fit_group_scales(group_weights: &Matrix, bits: u32, clip_grid: &[f64]) -> Vec<f64> {
    (0..group_weights.rows())
        .map(|r| fit_row_scale(group_weights.row(r), bits, clip_grid))
        .collect()
}

/// Round-to-nearest quantization of a column with per-row scales.
pub fn quantize_column(col: &[f64], scales: &[f64], bits: u32) -> QuantizedColumn {
    assert_eq!(col.len(), scales.len(), "one scale per row");
    let qmax = (1i64 << (bits - 1)) - 1;
    let mut levels = Vec::with_capacity(col.len());
    let mut dequant = Vec::with_capacity(col.len());
    for (&w, &s) in col.iter().zip(scales) {
        let (l, d) = quantize_value(w, s, qmax);
        levels.push(l);
        dequant.push(d);
    }
    QuantizedColumn { levels, dequant }
}
