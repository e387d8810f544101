use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerRecord};
use crate::tensor::Tensor;

/// Normal-consistency factor for the median absolute deviation.
pub const MAD_SCALE: f64 = 1.4826;
/// Added to the scaled MAD so constant inputs map to zero scores.
pub const MAD_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Kurtosis {
    pub value: f64,
    /// Set when the input has zero variance; `value` is then 0.
    pub degenerate: bool,
}

/// Population excess kurtosis `E[(v - μ)⁴] / σ⁴ - 3` over all elements.
pub fn kurtosis(w: &Tensor) -> Result<Kurtosis> {
    kurtosis_of(w.data())
}

pub fn kurtosis_of(values: &[f32]) -> Result<Kurtosis> {
    let n = values.len();
    if n < 4 {
        return Err(Error::InvalidArgument(format!(
            "kurtosis needs at least 4 values, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / nf;
    let (mut m2, mut m4) = (0.0f64, 0.0f64);
    for &v in values {
        let d = v as f64 - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m4 /= nf;
    if !(m2 > 0.0) {
        return Ok(Kurtosis {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Kurtosis {
        value: m4 / (m2 * m2) - 3.0,
        degenerate: false,
    })
}

/// Per-matrix kurtosis of a layer, in the kind's weight order.
pub fn layer_kurtosis(layer: &LayerRecord) -> Result<Vec<(String, Kurtosis)>> {
    layer
        .kind
        .weight_names()
        .iter()
        .map(|&name| {
            let w = layer.weights.get(name).ok_or_else(|| {
                Error::Data(format!("layer {}: missing weight matrix '{name}'", layer.name))
            })?;
            Ok((name.to_string(), kurtosis(w)?))
        })
        .collect()
}

/// Outlier score of a layer: `|κ_q + κ_k + κ_v|` for attention,
/// `|κ_gate_up|` for the feed-forward projection.
pub fn layer_outlier_score(layer: &LayerRecord) -> Result<f64> {
    let parts = layer_kurtosis(layer)?;
    let sum: f64 = parts.iter().map(|(_, k)| k.value).sum();
    debug_assert!(match layer.kind {
        LayerKind::AttentionQkv => parts.len() == 3,
        LayerKind::FfnGateUp => parts.len() == 1,
    });
    Ok(sum.abs())
}

/// Median; the mean of the two central order statistics for even lengths.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutlierScores {
    pub raw: Vec<f64>,
    pub z: Vec<f64>,
    pub median: f64,
    pub mad: f64,
}

/// Robust z-scores `(o - median) / (1.4826 MAD + ε)`.
pub fn robust_z(raw: &[f64]) -> Result<OutlierScores> {
    if raw.is_empty() {
        return Err(Error::InvalidArgument("robust_z needs at least one score".into()));
    }
    let med = median(raw);
    let dev: Vec<f64> = raw.iter().map(|o| (o - med).abs()).collect();
    let mad = median(&dev);
    let denom = MAD_SCALE * mad + MAD_EPSILON;
    Ok(OutlierScores {
        raw: raw.to_vec(),
        z: raw.iter().map(|o| (o - med) / denom).collect(),
        median: med,
        mad,
    })
}
