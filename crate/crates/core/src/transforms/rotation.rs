use super::{
    check_finite_loss, quantized_product, quantized_product_backward, recon_loss_grad, CalibConfig,
    Calibration, LayerProblem, LinearQuantizer, PreRotation, QuantForward,
};
use crate::error::{Error, Result};
use crate::model::{ColumnBlock, LayerRecord};
use crate::optim::Adam;
use crate::tensor::{
    dense, hadamard, invert_f64, matmul, matmul_nt, matmul_tn, qr_orthogonal, Seed, Tensor,
};

const MAX_REPROJECTIONS: usize = 60;

/// Orthogonal transform `R = P (I - S)⁻¹ (I + S)` with `S` skew-symmetric
/// and `P` an optional fixed pre-rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationTransform {
    s: Tensor,
    pre: Option<Tensor>,
    r: Tensor,
}

/// Cayley map in `f64`; returns `C = (I - S)⁻¹ (I + S)` and `(I - S)⁻¹`.
fn cayley(s: &[f64], m: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut b = vec![0.0; m * m];
    let mut c = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            let e = (i == j) as u8 as f64;
            b[i * m + j] = e - s[i * m + j];
            c[i * m + j] = e + s[i * m + j];
        }
    }
    let binv = invert_f64(&b, m, m, f64::INFINITY)?;
    Ok((dense::matmul(&binv, &c, m), binv))
}

impl RotationTransform {
    pub fn identity(m: usize) -> Self {
        Self {
            s: Tensor::zeros(m, m),
            pre: None,
            r: Tensor::identity(m),
        }
    }

    /// From a skew-symmetric `S` (checked exactly) and optional orthogonal `P`.
    pub fn new(s: Tensor, pre: Option<Tensor>) -> Result<Self> {
        let m = s.rows();
        if s.cols() != m {
            return Err(Error::Shape {
                op: "rotation",
                left: s.shape(),
                right: (m, m),
            });
        }
        for i in 0..m {
            for j in 0..m {
                if s.get(i, j) != -s.get(j, i) {
                    return Err(Error::InvalidArgument(format!(
                        "rotation parameter is not skew-symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if let Some(p) = &pre {
            if p.shape() != (m, m) {
                return Err(Error::Shape {
                    op: "pre-rotation",
                    left: p.shape(),
                    right: (m, m),
                });
            }
        }
        let (c, _) = cayley(&s.to_f64(), m)?;
        let r = match &pre {
            Some(p) => dense::matmul(&p.to_f64(), &c, m),
            None => c,
        };
        Ok(Self {
            s,
            pre,
            r: Tensor::from_f64(m, m, &r)?,
        })
    }

    /// Build from the strictly upper triangle of `S`, row by row.
    pub fn from_upper(params: &[f64], m: usize, pre: Option<Tensor>) -> Result<Self> {
        Self::new(skew_from_upper(params, m), pre)
    }

    pub fn dim(&self) -> usize {
        self.s.rows()
    }

    pub fn skew(&self) -> &Tensor {
        &self.s
    }

    pub fn pre_rotation(&self) -> Option<&Tensor> {
        self.pre.as_ref()
    }

    /// The orthogonal matrix `R`.
    pub fn matrix(&self) -> &Tensor {
        &self.r
    }

    /// Strictly upper triangle of `S`, row by row.
    pub fn upper(&self) -> Vec<f64> {
        let m = self.dim();
        let mut out = Vec::with_capacity(m * (m - 1) / 2);
        for i in 0..m {
            for j in i + 1..m {
                out.push(self.s.get(i, j) as f64);
            }
        }
        out
    }

    /// `max |RᵀR - I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let m = self.dim();
        let r = self.r.to_f64();
        let rtr = dense::matmul(&dense::transpose(&r, m), &r, m);
        let mut worst = 0.0f64;
        for i in 0..m {
            for j in 0..m {
                let e = (i == j) as u8 as f64;
                worst = worst.max((rtr[i * m + j] - e).abs());
            }
        }
        worst
    }
}

/// Skew matrix from upper-triangle parameters, rounded to storage precision
/// so the stored `S` reproduces `R` exactly.
fn skew_from_upper(params: &[f64], m: usize) -> Tensor {
    assert_eq!(params.len(), m * (m.saturating_sub(1)) / 2);
    let mut s = Tensor::zeros(m, m);
    let mut k = 0;
    for i in 0..m {
        for j in i + 1..m {
            let v = params[k] as f32;
            s.set(i, j, v);
            s.set(j, i, -v);
            k += 1;
        }
    }
    s
}

pub(crate) struct RotationForward {
    pub quant: QuantForward,
}

pub(crate) fn forward(problem: &LayerProblem, t: &RotationTransform, q: &dyn LinearQuantizer) -> Result<RotationForward> {
    if t.dim() != problem.x.cols() {
        return Err(Error::Shape {
            op: "apply_rotation",
            left: (t.dim(), t.dim()),
            right: problem.x.shape(),
        });
    }
    let xt = matmul(&problem.x, &t.r)?;
    let wt = matmul_tn(&t.r, &problem.w)?;
    Ok(RotationForward {
        quant: quantized_product(&xt, &wt, &problem.blocks, q)?,
    })
}

/// `Q_a(X R) Q_w(Rᵀ W)` for a plain (single-block) weight matrix.
pub fn apply_rotation(x: &Tensor, w: &Tensor, t: &RotationTransform, q: &dyn LinearQuantizer) -> Result<Tensor> {
    if x.cols() != w.rows() {
        return Err(Error::Shape {
            op: "apply_rotation",
            left: x.shape(),
            right: w.shape(),
        });
    }
    let problem = LayerProblem {
        name: "apply_rotation".into(),
        x: x.clone(),
        w: w.clone(),
        y: Tensor::zeros(0, 0),
        blocks: ColumnBlock::single(w.cols()),
    };
    Ok(forward(&problem, t, q)?.quant.yhat)
}

/// Calibration loss and its straight-through gradient with respect to the
/// upper triangle of `S` (same order as [`RotationTransform::upper`]).
pub fn rotation_loss_and_grad(
    problem: &LayerProblem,
    t: &RotationTransform,
    q: &dyn LinearQuantizer,
) -> Result<(f64, Vec<f64>)> {
    let fwd = forward(problem, t, q)?;
    let (loss, dy) = recon_loss_grad(&problem.y, &fwd.quant.yhat)?;
    Ok((loss, backward(problem, t, &fwd, &dy)?))
}

/// Skew-parameter gradient given `dL/dŶ`.
pub(crate) fn backward(
    problem: &LayerProblem,
    t: &RotationTransform,
    fwd: &RotationForward,
    dy: &Tensor,
) -> Result<Vec<f64>> {
    let m = t.dim();
    let (dxt, dwt) = quantized_product_backward(&fwd.quant, dy)?;

    // Xt = X R, Wt = Rᵀ W  =>  dR = Xᵀ dXt + W dWtᵀ
    let dr_x = matmul_tn(&problem.x, &dxt)?;
    let dr_w = matmul_nt(&problem.w, &dwt)?;
    let mut dr: Vec<f64> = dr_x
        .data()
        .iter()
        .zip(dr_w.data())
        .map(|(a, b)| *a as f64 + *b as f64)
        .collect();
    if let Some(p) = &t.pre {
        dr = dense::matmul(&dense::transpose(&p.to_f64(), m), &dr, m);
    }

    // C = B⁻¹ (I + S), B = I - S  =>  ∂L/∂S = B⁻ᵀ dC (Cᵀ + I)
    let (c, binv) = cayley(&t.s.to_f64(), m)?;
    let mut ct_i = dense::transpose(&c, m);
    for i in 0..m {
        ct_i[i * m + i] += 1.0;
    }
    let d = dense::matmul(&dense::matmul(&dense::transpose(&binv, m), &dr, m), &ct_i, m);

    let mut grad = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            grad.push(d[i * m + j] - d[j * m + i]);
        }
    }
    Ok(grad)
}

fn initial_pre_rotation(m: usize, mode: PreRotation, seed: Seed) -> Result<Option<Tensor>> {
    Ok(match mode {
        PreRotation::Identity => None,
        PreRotation::Hadamard => Some(hadamard(m)?),
        PreRotation::Random => Some(qr_orthogonal(m, seed)),
        PreRotation::Auto => {
            if m.is_power_of_two() {
                Some(hadamard(m)?)
            } else {
                Some(qr_orthogonal(m, seed))
            }
        }
    })
}

/// Fit `S` on a layer's calibration data.
pub fn calibrate_rotation(
    layer: &LayerRecord,
    q: &dyn LinearQuantizer,
    cfg: &CalibConfig,
    seed: Seed,
) -> Result<Calibration<RotationTransform>> {
    let problem = LayerProblem::from_layer(layer, cfg.smooth)?;
    calibrate_rotation_problem(&problem, q, cfg, seed)
}

pub fn calibrate_rotation_problem(
    problem: &LayerProblem,
    q: &dyn LinearQuantizer,
    cfg: &CalibConfig,
    seed: Seed,
) -> Result<Calibration<RotationTransform>> {
    calibrate_rotation_observed(problem, q, cfg, seed, &mut |_, _| {})
}

/// Adam over the upper triangle of `S` starting from `S = 0`; `observer`
/// sees the transform evaluated at every step. The Cayley map keeps every
/// iterate orthogonal.
pub fn calibrate_rotation_observed(
    problem: &LayerProblem,
    q: &dyn LinearQuantizer,
    cfg: &CalibConfig,
    seed: Seed,
    observer: &mut dyn FnMut(usize, &RotationTransform),
) -> Result<Calibration<RotationTransform>> {
    let m = problem.input_width();
    let pre = initial_pre_rotation(m, cfg.pre_rotation, seed)?;
    let mut params = vec![0.0f64; m * (m - 1) / 2];
    let mut opt = Adam::new(params.len(), cfg.lr).with_weight_decay(cfg.weight_decay);

    let mut best: Option<RotationTransform> = None;
    let mut best_loss = f64::INFINITY;
    let mut best_step = 0;
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let mut events = Vec::new();

    for step in 0..=cfg.steps {
        let mut attempt = 0;
        let t = loop {
            match RotationTransform::from_upper(&params, m, pre.clone()) {
                Ok(t) => break t,
                Err(Error::Singular { .. }) if attempt < MAX_REPROJECTIONS => {
                    params.iter_mut().for_each(|p| *p *= 0.5);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        if attempt > 0 {
            events.push(format!("step {step}: I - S near-singular, halved S {attempt} time(s)"));
            log::warn!("{}: reprojected skew parameter at step {step}", problem.name);
        }
        observer(step, &t);
        let (loss, grad) = rotation_loss_and_grad(problem, &t, q)?;
        check_finite_loss(loss, problem, step)?;
        losses.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best = Some(t);
            best_step = step;
        }
        if step == cfg.steps {
            break;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                layer: problem.name.clone(),
                step,
                loss,
            });
        }
        opt.step(&mut params, &grad);
    }

    Ok(Calibration {
        transform: best.expect("at least one step evaluated"),
        initial_loss: losses[0],
        best_loss,
        best_step,
        losses,
        events,
    })
}
