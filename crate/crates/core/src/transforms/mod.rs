//! Affine and rotation pre-conditioning of a linear layer, and the
//! calibration loops that fit them.
//!
//! Both families rewrite `Y = X W` as `(X T)(T⁻¹ W)` before quantization:
//! affine with `T = A₁ ⊗ A₂`, rotation with an orthogonal `T = R` so that
//! `T⁻¹ = Rᵀ`. Without quantization the product is unchanged; with it, the
//! choice of `T` decides how outliers land on the quantization grid.

mod affine;
mod rotation;

pub use affine::{
    affine_loss_and_grad, apply_affine, calibrate_affine, calibrate_affine_problem,
    kron_factor_shape, AffineTransform,
};
pub use rotation::{
    apply_rotation, calibrate_rotation, calibrate_rotation_observed, calibrate_rotation_problem,
    rotation_loss_and_grad, RotationTransform,
};
pub(crate) use affine::{backward as affine_backward, forward as affine_forward, unpack as affine_unpack};
pub(crate) use rotation::{
    backward as rotation_backward, forward as rotation_forward,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ColumnBlock, LayerRecord, TransformKind, WeightRole};
use crate::quant::{quantize, quantize_weight_segments, Axis, QuantConfig, Quantized};
use crate::tensor::{frobenius_mse, matmul, matmul_nt, matmul_tn, Seed, Tensor};

/// How activations and weights are quantized inside a transformed product.
pub trait LinearQuantizer: Sync {
    fn activations(&self, x: &Tensor) -> Result<Quantized>;
    fn weights(&self, w: &Tensor, blocks: &[ColumnBlock]) -> Result<Quantized>;
}

impl LinearQuantizer for QuantConfig {
    fn activations(&self, x: &Tensor) -> Result<Quantized> {
        quantize(x, self.a_bits, Axis::Row, &self.clip_ratios)
    }

    fn weights(&self, w: &Tensor, blocks: &[ColumnBlock]) -> Result<Quantized> {
        let segments: Vec<(usize, u8)> = blocks
            .iter()
            .map(|b| {
                let bits = match b.role {
                    WeightRole::Weight => self.w_bits,
                    WeightRole::Key => self.k_bits,
                    WeightRole::Value => self.v_bits,
                };
                (b.width, bits)
            })
            .collect();
        quantize_weight_segments(w, &segments, &self.clip_ratios)
    }
}

/// Infinite precision: quantization is the identity.
#[derive(Debug, Clone, Copy, Default)]
pub struct Passthrough;

impl LinearQuantizer for Passthrough {
    fn activations(&self, x: &Tensor) -> Result<Quantized> {
        Ok(Quantized {
            values: x.clone(),
            mask: vec![true; x.len()],
        })
    }

    fn weights(&self, w: &Tensor, _blocks: &[ColumnBlock]) -> Result<Quantized> {
        self.activations(w)
    }
}

/// Quantization replaced by a fixed additive error, `Q(z) = z + e`.
///
/// Taking `e = fake_quant(z₀) - z₀` at a base point gives the
/// straight-through linearization there: the loss is smooth in the
/// transform parameters and its exact gradient equals the STE gradient
/// whenever nothing is clipped. Used to check analytic gradients against
/// finite differences.
#[derive(Debug, Clone)]
pub struct FrozenNoise {
    pub activation: Tensor,
    pub weight: Tensor,
}

impl FrozenNoise {
    pub fn linearize(
        q: &dyn LinearQuantizer,
        xt: &Tensor,
        wt: &Tensor,
        blocks: &[ColumnBlock],
    ) -> Result<Self> {
        Ok(Self {
            activation: q.activations(xt)?.values.sub(xt)?,
            weight: q.weights(wt, blocks)?.values.sub(wt)?,
        })
    }
}

impl LinearQuantizer for FrozenNoise {
    fn activations(&self, x: &Tensor) -> Result<Quantized> {
        Ok(Quantized {
            values: x.add(&self.activation)?,
            mask: vec![true; x.len()],
        })
    }

    fn weights(&self, w: &Tensor, _blocks: &[ColumnBlock]) -> Result<Quantized> {
        Ok(Quantized {
            values: w.add(&self.weight)?,
            mask: vec![true; w.len()],
        })
    }
}

/// Inputs for fitting a transform on one layer.
#[derive(Debug, Clone)]
pub struct LayerProblem {
    pub name: String,
    pub x: Tensor,
    pub w: Tensor,
    pub y: Tensor,
    pub blocks: Vec<ColumnBlock>,
}

impl LayerProblem {
    pub fn new(x: Tensor, w: Tensor) -> Result<Self> {
        let y = matmul(&x, &w)?;
        let blocks = ColumnBlock::single(w.cols());
        Ok(Self {
            name: "layer".into(),
            x,
            w,
            y,
            blocks,
        })
    }

    /// Layer data, optionally with a per-channel diagonal scale folded into
    /// `X` and `W` (see [`smooth_factors`]).
    pub fn from_layer(layer: &LayerRecord, smooth: bool) -> Result<Self> {
        let (x, w) = if smooth {
            let s = smooth_factors(&layer.calib.x, layer.weight());
            fold_smoothing(&layer.calib.x, layer.weight(), &s)
        } else {
            (layer.calib.x.clone(), layer.weight().clone())
        };
        Ok(Self {
            name: layer.name.clone(),
            x,
            w,
            y: layer.calib.y.clone(),
            blocks: layer.column_blocks(),
        })
    }

    pub fn input_width(&self) -> usize {
        self.x.cols()
    }
}

/// Per-input-channel scales `sqrt(max|X_j| / max|W_j|)`.
pub fn smooth_factors(x: &Tensor, w: &Tensor) -> Vec<f32> {
    let m = x.cols();
    let mut xmax = vec![0.0f32; m];
    for r in 0..x.rows() {
        for (mx, v) in xmax.iter_mut().zip(x.row(r)) {
            *mx = mx.max(v.abs());
        }
    }
    (0..m)
        .map(|j| {
            let wmax = w.row(j).iter().fold(0.0f32, |a, v| a.max(v.abs()));
            if xmax[j] > 0.0 && wmax > 0.0 {
                (xmax[j] / wmax).sqrt().clamp(1e-4, 1e4)
            } else {
                1.0
            }
        })
        .collect()
}

/// `X diag(s)⁻¹` and `diag(s) W`.
pub fn fold_smoothing(x: &Tensor, w: &Tensor, s: &[f32]) -> (Tensor, Tensor) {
    let xs = Tensor::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) / s[c]);
    let ws = Tensor::from_fn(w.rows(), w.cols(), |r, c| w.get(r, c) * s[r]);
    (xs, ws)
}

/// Output of a quantized product and what the backward pass needs.
pub(crate) struct QuantForward {
    pub xq: Quantized,
    pub wq: Quantized,
    pub yhat: Tensor,
}

pub(crate) fn quantized_product(
    xt: &Tensor,
    wt: &Tensor,
    blocks: &[ColumnBlock],
    q: &dyn LinearQuantizer,
) -> Result<QuantForward> {
    let xq = q.activations(xt)?;
    let wq = q.weights(wt, blocks)?;
    let yhat = matmul(&xq.values, &wq.values)?;
    Ok(QuantForward { xq, wq, yhat })
}

/// Gradients w.r.t. the transformed (pre-quantization) operands, with the
/// straight-through rule: identity where not clipped, zero where clipped.
pub(crate) fn quantized_product_backward(fwd: &QuantForward, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut dxt = matmul_nt(dy, &fwd.wq.values)?;
    for (g, &keep) in dxt.data_mut().iter_mut().zip(&fwd.xq.mask) {
        if !keep {
            *g = 0.0;
        }
    }
    let mut dwt = matmul_tn(&fwd.xq.values, dy)?;
    for (g, &keep) in dwt.data_mut().iter_mut().zip(&fwd.wq.mask) {
        if !keep {
            *g = 0.0;
        }
    }
    Ok((dxt, dwt))
}

/// `‖Y - Ŷ‖_F²` and its gradient `-2 (Y - Ŷ)`.
pub(crate) fn recon_loss_grad(y: &Tensor, yhat: &Tensor) -> Result<(f64, Tensor)> {
    let loss = frobenius_mse(y, yhat)?;
    let grad = yhat.sub(y)?.scale(2.0);
    Ok((loss, grad))
}

/// Starting point for rotation training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PreRotation {
    /// Hadamard when the width is a power of two, otherwise random orthogonal.
    #[default]
    Auto,
    Hadamard,
    Random,
    /// No pre-rotation: training starts at `R = I`.
    Identity,
}

/// Per-layer calibration budget and options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub pre_rotation: PreRotation,
    /// Fold a per-channel diagonal scale into `X` and `W` before either transform.
    pub smooth: bool,
    pub condition_cap: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 5e-3,
            weight_decay: 0.0,
            pre_rotation: PreRotation::Auto,
            smooth: false,
            condition_cap: crate::tensor::DEFAULT_CONDITION_CAP,
        }
    }
}

/// A fitted transform with its calibration history.
#[derive(Debug, Clone)]
pub struct Calibration<T> {
    pub transform: T,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_step: usize,
    pub losses: Vec<f64>,
    /// Notable events (early stop, reprojection), for logs and reports.
    pub events: Vec<String>,
}

/// Either transform family.
#[derive(Debug, Clone)]
pub enum Transform {
    Affine(AffineTransform),
    Rotation(RotationTransform),
}

impl Transform {
    pub fn kind(&self) -> TransformKind {
        match self {
            Transform::Affine(_) => TransformKind::Affine,
            Transform::Rotation(_) => TransformKind::Rotation,
        }
    }

    /// Quantized layer output `Ŷ_T` on the problem's calibration inputs.
    pub fn output(&self, problem: &LayerProblem, q: &dyn LinearQuantizer) -> Result<Tensor> {
        match self {
            Transform::Affine(t) => affine::forward(problem, t, q).map(|f| f.quant.yhat),
            Transform::Rotation(t) => rotation::forward(problem, t, q).map(|f| f.quant.yhat),
        }
    }
}

/// Fit the requested transform family on a layer.
pub fn calibrate(
    problem: &LayerProblem,
    kind: TransformKind,
    q: &dyn LinearQuantizer,
    cfg: &CalibConfig,
    seed: Seed,
) -> Result<Calibration<Transform>> {
    match kind {
        TransformKind::Affine => {
            let c = calibrate_affine_problem(problem, q, cfg)?;
            Ok(Calibration {
                transform: Transform::Affine(c.transform),
                initial_loss: c.initial_loss,
                best_loss: c.best_loss,
                best_step: c.best_step,
                losses: c.losses,
                events: c.events,
            })
        }
        TransformKind::Rotation => {
            let c = calibrate_rotation_problem(problem, q, cfg, seed)?;
            Ok(Calibration {
                transform: Transform::Rotation(c.transform),
                initial_loss: c.initial_loss,
                best_loss: c.best_loss,
                best_step: c.best_step,
                losses: c.losses,
                events: c.events,
            })
        }
    }
}

pub(crate) fn check_finite_loss(loss: f64, problem: &LayerProblem, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged {
            layer: problem.name.clone(),
            step,
            loss,
        });
    }
    Ok(())
}
