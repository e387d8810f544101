//! Symmetric fake quantization.
//!
//! Values are mapped to `s * clip(round(z / s), -2^(b-1), 2^(b-1) - 1)`
//! with rounding half away from zero. Weights are quantized per output
//! channel (columns of `W`), activations per token (rows of `X`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

/// Scale used for all-zero rows/columns so that `z / s` stays finite.
pub const ZERO_SCALE: f32 = f32::MIN_POSITIVE;

pub const DEFAULT_CLIP_RATIOS: [f32; 8] = [1.0, 0.95, 0.9, 0.85, 0.8, 0.7, 0.6, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// One scale per row (per token for activations).
    Row,
    /// One scale per column (per output channel for weights).
    Col,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightGranularity {
    #[default]
    PerOutputChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActivationGranularity {
    #[default]
    PerToken,
}

/// Bit-widths and granularity for a `W{w}A{a}K{k}V{v}` setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    pub w_bits: u8,
    pub a_bits: u8,
    pub k_bits: u8,
    pub v_bits: u8,
    pub weight_granularity: WeightGranularity,
    pub activation_granularity: ActivationGranularity,
    pub clip_ratios: Vec<f32>,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self::uniform_bits(4)
    }
}

impl QuantConfig {
    /// Same bit-width everywhere, default clip grid.
    pub fn uniform_bits(bits: u8) -> Self {
        Self {
            w_bits: bits,
            a_bits: bits,
            k_bits: bits,
            v_bits: bits,
            weight_granularity: WeightGranularity::PerOutputChannel,
            activation_granularity: ActivationGranularity::PerToken,
            clip_ratios: DEFAULT_CLIP_RATIOS.to_vec(),
        }
    }

    pub fn with_clip_ratios(mut self, ratios: Vec<f32>) -> Self {
        self.clip_ratios = ratios;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("w_bits", self.w_bits),
            ("a_bits", self.a_bits),
            ("k_bits", self.k_bits),
            ("v_bits", self.v_bits),
        ] {
            check_bits(b).map_err(|_| {
                Error::InvalidArgument(format!("{name} = {b} is outside [2, 8]"))
            })?;
        }
        validate_ratios(&self.clip_ratios)
    }

    /// Short `W4A4K4V4`-style label.
    pub fn label(&self) -> String {
        format!(
            "W{}A{}K{}V{}",
            self.w_bits, self.a_bits, self.k_bits, self.v_bits
        )
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "bit-width {bits} is outside [2, 8]"
        )));
    }
    Ok(())
}

fn validate_ratios(ratios: &[f32]) -> Result<()> {
    if ratios.is_empty() {
        return Err(Error::InvalidArgument("clip_ratios is empty".into()));
    }
    if ratios[0] != 1.0 {
        return Err(Error::InvalidArgument(
            "clip_ratios must start with 1.0".into(),
        ));
    }
    if ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::InvalidArgument(
            "clip ratios must lie in (0, 1]".into(),
        ));
    }
    if ratios.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InvalidArgument(
            "clip ratios must be sorted descending".into(),
        ));
    }
    Ok(())
}

/// Largest positive grid level, `2^(b-1) - 1`.
#[inline]
pub fn qmax(bits: u8) -> f32 {
    ((1u32 << (bits - 1)) - 1) as f32
}

/// Most negative grid level, `-2^(b-1)`.
#[inline]
pub fn qmin(bits: u8) -> f32 {
    -((1u32 << (bits - 1)) as f32)
}

/// Per-row or per-column quantization scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantScale {
    pub scales: Vec<f32>,
    pub bits: u8,
}

pub fn compute_scale(z: &Tensor, bits: u8, axis: Axis, clip_ratio: f32) -> Result<QuantScale> {
    check_bits(bits)?;
    if !(clip_ratio > 0.0 && clip_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "clip ratio {clip_ratio} outside (0, 1]"
        )));
    }
    if let Some(i) = z.first_non_finite() {
        return Err(Error::NonFinite(format!("quantizer input element {i}")));
    }
    let maxes = axis_max_abs(z, axis);
    let q = qmax(bits) as f64;
    let scales = maxes
        .into_iter()
        .map(|m| {
            let s = (clip_ratio as f64 * m as f64 / q) as f32;
            if s.is_normal() {
                s
            } else {
                ZERO_SCALE
            }
        })
        .collect();
    Ok(QuantScale { scales, bits })
}

fn axis_max_abs(z: &Tensor, axis: Axis) -> Vec<f32> {
    match axis {
        Axis::Row => (0..z.rows())
            .map(|r| z.row(r).iter().fold(0.0f32, |m, v| m.max(v.abs())))
            .collect(),
        Axis::Col => {
            let mut maxes = vec![0.0f32; z.cols()];
            for r in 0..z.rows() {
                for (m, v) in maxes.iter_mut().zip(z.row(r)) {
                    *m = m.max(v.abs());
                }
            }
            maxes
        }
    }
}

fn check_scale_len(z: &Tensor, scale: &QuantScale, axis: Axis) -> Result<()> {
    let extent = match axis {
        Axis::Row => z.rows(),
        Axis::Col => z.cols(),
    };
    if scale.scales.len() != extent {
        return Err(Error::Shape {
            op: "fake_quant",
            left: z.shape(),
            right: (scale.scales.len(), 1),
        });
    }
    Ok(())
}

/// Quantize-dequantize `z` with the given scales.
pub fn fake_quant(z: &Tensor, scale: &QuantScale, axis: Axis) -> Result<Tensor> {
    Ok(fake_quant_masked(z, scale, axis)?.0)
}

/// Like [`fake_quant`], also returning the straight-through mask: `true`
/// where the rounded level was inside the clip range (gradient passes),
/// `false` where it was clipped.
pub fn fake_quant_masked(z: &Tensor, scale: &QuantScale, axis: Axis) -> Result<(Tensor, Vec<bool>)> {
    check_scale_len(z, scale, axis)?;
    let (lo, hi) = (qmin(scale.bits), qmax(scale.bits));
    let mut out = z.clone();
    let mut mask = vec![true; z.len()];
    let cols = z.cols();
    for (i, (v, m)) in out.data_mut().iter_mut().zip(mask.iter_mut()).enumerate() {
        let s = match axis {
            Axis::Row => scale.scales[i / cols],
            Axis::Col => scale.scales[i % cols],
        };
        let level = (*v / s).round();
        let clipped = level.clamp(lo, hi);
        *m = clipped == level;
        *v = clipped * s;
    }
    Ok((out, mask))
}

/// Grid search over clip ratios for the one minimizing `‖fake_quant(z) - z‖_F²`.
/// Ties go to the larger ratio.
pub fn choose_clip(z: &Tensor, bits: u8, axis: Axis, ratios: &[f32]) -> Result<(f32, QuantScale)> {
    validate_ratios(ratios)?;
    let mut best: Option<(f64, f32, QuantScale)> = None;
    for &ratio in ratios {
        let scale = compute_scale(z, bits, axis, ratio)?;
        let q = fake_quant(z, &scale, axis)?;
        let err = crate::tensor::frobenius_mse(z, &q)?;
        if best.as_ref().is_none_or(|(e, _, _)| err < *e) {
            best = Some((err, ratio, scale));
        }
    }
    let (_, ratio, scale) = best.expect("ratios non-empty");
    Ok((ratio, scale))
}

/// Quantized tensor plus the straight-through mask.
#[derive(Debug, Clone)]
pub struct Quantized {
    pub values: Tensor,
    pub mask: Vec<bool>,
}

/// Clip-searched fake quantization along `axis`.
pub fn quantize(z: &Tensor, bits: u8, axis: Axis, ratios: &[f32]) -> Result<Quantized> {
    let (_, scale) = choose_clip(z, bits, axis, ratios)?;
    let (values, mask) = fake_quant_masked(z, &scale, axis)?;
    Ok(Quantized { values, mask })
}

/// Per-output-channel weight quantization where consecutive column blocks
/// use their own bit-width (Q/K/V projections stacked side by side).
pub fn quantize_weight_segments(w: &Tensor, segments: &[(usize, u8)], ratios: &[f32]) -> Result<Quantized> {
    let total: usize = segments.iter().map(|s| s.0).sum();
    if total != w.cols() {
        return Err(Error::InvalidArgument(format!(
            "weight segments cover {total} columns, tensor has {}",
            w.cols()
        )));
    }
    if let [(_, bits)] = segments {
        return quantize(w, *bits, Axis::Col, ratios);
    }
    let mut values = Tensor::zeros(w.rows(), w.cols());
    let mut mask = vec![true; w.len()];
    let mut start = 0;
    for &(width, bits) in segments {
        let part = quantize(&w.columns(start, start + width), bits, Axis::Col, ratios)?;
        for r in 0..w.rows() {
            let dst = r * w.cols() + start;
            values.data_mut()[dst..dst + width].copy_from_slice(part.values.row(r));
            mask[dst..dst + width].copy_from_slice(&part.mask[r * width..(r + 1) * width]);
        }
        start += width;
    }
    Ok(Quantized { values, mask })
}

/// `Q_a(X) * Q_w(W)`: per-token activations at `a_bits`, per-output-channel
/// weights at `w_bits`.
pub fn quant_linear(x: &Tensor, w: &Tensor, cfg: &QuantConfig) -> Result<Tensor> {
    if x.cols() != w.rows() {
        return Err(Error::Shape {
            op: "quant_linear",
            left: x.shape(),
            right: w.shape(),
        });
    }
    let xq = quantize(x, cfg.a_bits, Axis::Row, &cfg.clip_ratios)?;
    let wq = quantize(w, cfg.w_bits, Axis::Col, &cfg.clip_ratios)?;
    matmul(&xq.values, &wq.values)
}
