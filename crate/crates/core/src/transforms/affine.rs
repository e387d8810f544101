use super::{
    check_finite_loss, quantized_product, quantized_product_backward, recon_loss_grad, CalibConfig,
    Calibration, LayerProblem, LinearQuantizer, QuantForward,
};
use crate::error::{Error, Result};
use crate::model::{ColumnBlock, LayerRecord};
use crate::optim::Adam;
use crate::tensor::{
    dense, invert_capped, invert_f64, kron, kron_apply, matmul_nt, matmul_tn, Tensor,
    DEFAULT_CONDITION_CAP,
};

/// Kronecker factor sizes for width `m`: `p` is the largest divisor of `m`
/// not exceeding `sqrt(m)`, and `q = m / p`.
pub fn kron_factor_shape(m: usize) -> (usize, usize) {
    assert!(m >= 1);
    let mut p = 1;
    let mut d = 1;
    while d * d <= m {
        if m % d == 0 {
            p = d;
        }
        d += 1;
    }
    (p, m / p)
}

/// Invertible transform `A = A₁ ⊗ A₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    a1: Tensor,
    a2: Tensor,
}

impl AffineTransform {
    pub fn identity(dim: usize) -> Self {
        let (p, q) = kron_factor_shape(dim);
        Self {
            a1: Tensor::identity(p),
            a2: Tensor::identity(q),
        }
    }

    pub fn new(a1: Tensor, a2: Tensor) -> Result<Self> {
        Self::with_cap(a1, a2, DEFAULT_CONDITION_CAP)
    }

    pub fn with_cap(a1: Tensor, a2: Tensor, condition_cap: f64) -> Result<Self> {
        for f in [&a1, &a2] {
            if f.rows() != f.cols() {
                return Err(Error::Shape {
                    op: "affine factor",
                    left: f.shape(),
                    right: (f.cols(), f.rows()),
                });
            }
            invert_capped(f, condition_cap)?;
        }
        Ok(Self { a1, a2 })
    }

    pub fn dim(&self) -> usize {
        self.a1.rows() * self.a2.rows()
    }

    pub fn factors(&self) -> (&Tensor, &Tensor) {
        (&self.a1, &self.a2)
    }

    /// `A₁⁻¹` and `A₂⁻¹`; `(A₁ ⊗ A₂)⁻¹ = A₁⁻¹ ⊗ A₂⁻¹`.
    pub fn inverse_factors(&self) -> Result<(Tensor, Tensor)> {
        Ok((
            invert_capped(&self.a1, DEFAULT_CONDITION_CAP)?,
            invert_capped(&self.a2, DEFAULT_CONDITION_CAP)?,
        ))
    }

    /// Explicit `dim x dim` matrix; for tests and small widths only.
    pub fn to_matrix(&self) -> Tensor {
        kron(&self.a1, &self.a2)
    }

    /// `X A`.
    pub fn transform_activations(&self, x: &Tensor) -> Result<Tensor> {
        kron_apply(&self.a1, &self.a2, x)
    }

    /// `A⁻¹ W`, computed as `(Wᵀ (A₁⁻ᵀ ⊗ A₂⁻ᵀ))ᵀ`.
    pub fn transform_weights(&self, w: &Tensor) -> Result<Tensor> {
        let (b1, b2) = self.inverse_factors()?;
        inverse_apply(&b1, &b2, w)
    }
}

fn inverse_apply(b1: &Tensor, b2: &Tensor, w: &Tensor) -> Result<Tensor> {
    if w.rows() != b1.rows() * b2.rows() {
        return Err(Error::Shape {
            op: "affine weights",
            left: (b1.rows() * b2.rows(), b1.rows() * b2.rows()),
            right: w.shape(),
        });
    }
    Ok(kron_apply(&b1.transpose(), &b2.transpose(), &w.transpose())?.transpose())
}

pub(crate) struct AffineForward {
    pub b1: Tensor,
    pub b2: Tensor,
    pub quant: QuantForward,
}

pub(crate) fn forward(problem: &LayerProblem, t: &AffineTransform, q: &dyn LinearQuantizer) -> Result<AffineForward> {
    if t.dim() != problem.x.cols() {
        return Err(Error::Shape {
            op: "apply_affine",
            left: (t.dim(), t.dim()),
            right: problem.x.shape(),
        });
    }
    let (b1, b2) = t.inverse_factors()?;
    let xt = t.transform_activations(&problem.x)?;
    let wt = inverse_apply(&b1, &b2, &problem.w)?;
    let quant = quantized_product(&xt, &wt, &problem.blocks, q)?;
    Ok(AffineForward { b1, b2, quant })
}

/// `Q_a(X A) Q_w(A⁻¹ W)` for a plain (single-block) weight matrix.
pub fn apply_affine(x: &Tensor, w: &Tensor, t: &AffineTransform, q: &dyn LinearQuantizer) -> Result<Tensor> {
    if x.cols() != w.rows() {
        return Err(Error::Shape {
            op: "apply_affine",
            left: x.shape(),
            right: w.shape(),
        });
    }
    let problem = LayerProblem {
        name: "apply_affine".into(),
        x: x.clone(),
        w: w.clone(),
        y: Tensor::zeros(0, 0),
        blocks: ColumnBlock::single(w.cols()),
    };
    Ok(forward(&problem, t, q)?.quant.yhat)
}

/// Splits `∂L/∂(F₁ ⊗ F₂)` into per-factor gradients.
fn kron_contract(d: &Tensor, f1: &[f64], f2: &[f64], p: usize, q: usize) -> (Vec<f64>, Vec<f64>) {
    let m = p * q;
    let mut g1 = vec![0.0; p * p];
    let mut g2 = vec![0.0; q * q];
    for i in 0..p {
        for k in 0..q {
            let row = d.row(i * q + k);
            for j in 0..p {
                for l in 0..q {
                    let v = row[j * q + l] as f64;
                    g1[i * p + j] += v * f2[k * q + l];
                    g2[k * q + l] += v * f1[i * p + j];
                }
            }
        }
    }
    debug_assert_eq!(d.shape(), (m, m));
    (g1, g2)
}

/// Calibration loss `‖Y - Q_a(XA) Q_w(A⁻¹W)‖_F²` and its straight-through
/// gradients with respect to `A₁` and `A₂` (row-major).
pub fn affine_loss_and_grad(
    problem: &LayerProblem,
    t: &AffineTransform,
    q: &dyn LinearQuantizer,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let fwd = forward(problem, t, q)?;
    let (loss, dy) = recon_loss_grad(&problem.y, &fwd.quant.yhat)?;
    let (g1, g2) = backward(problem, t, &fwd, &dy)?;
    Ok((loss, g1, g2))
}

/// Factor gradients given `dL/dŶ`.
pub(crate) fn backward(
    problem: &LayerProblem,
    t: &AffineTransform,
    fwd: &AffineForward,
    dy: &Tensor,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (dxt, dwt) = quantized_product_backward(&fwd.quant, dy)?;
    let (p, qd) = (t.a1.rows(), t.a2.rows());

    // X path: Xt = X A  =>  dA = Xᵀ dXt
    let da = matmul_tn(&problem.x, &dxt)?;
    let (mut g1, mut g2) = kron_contract(&da, &t.a1.to_f64(), &t.a2.to_f64(), p, qd);

    // W path: Wt = B W with B = A⁻¹  =>  dB = dWt Wᵀ, dA_k = -B_kᵀ dB_k B_kᵀ
    let db = matmul_nt(&dwt, &problem.w)?;
    let b1 = fwd.b1.to_f64();
    let b2 = fwd.b2.to_f64();
    let (h1, h2) = kron_contract(&db, &b1, &b2, p, qd);
    for (g, h) in [(&mut g1, (h1, &b1, p)), (&mut g2, (h2, &b2, qd))] {
        let (dbk, bk, n) = h;
        let bt = dense::transpose(bk, n);
        let inner = dense::matmul(&dense::matmul(&bt, &dbk, n), &bt, n);
        for (gi, v) in g.iter_mut().zip(inner) {
            *gi -= v;
        }
    }
    Ok((g1, g2))
}

pub(crate) fn unpack(params: &[f64], p: usize, q: usize, cap: f64) -> Result<AffineTransform> {
    let a1 = Tensor::from_f64(p, p, &params[..p * p])?;
    let a2 = Tensor::from_f64(q, q, &params[p * p..])?;
    for f in [&a1, &a2] {
        invert_f64(&f.to_f64(), f.rows(), f.cols(), cap)?;
    }
    Ok(AffineTransform { a1, a2 })
}

/// Fit `A₁, A₂` on a layer's calibration data.
pub fn calibrate_affine(
    layer: &LayerRecord,
    q: &dyn LinearQuantizer,
    cfg: &CalibConfig,
) -> Result<Calibration<AffineTransform>> {
    let problem = LayerProblem::from_layer(layer, cfg.smooth)?;
    calibrate_affine_problem(&problem, q, cfg)
}

/// Adam over both factors from the identity, keeping the best-seen
/// parameters. Training stops early (keeping the best) if a factor leaves
/// the invertible region.
pub fn calibrate_affine_problem(
    problem: &LayerProblem,
    q: &dyn LinearQuantizer,
    cfg: &CalibConfig,
) -> Result<Calibration<AffineTransform>> {
    let dim = problem.input_width();
    let (p, qd) = kron_factor_shape(dim);
    let init = AffineTransform::identity(dim);
    let mut params: Vec<f64> = init.a1.to_f64().into_iter().chain(init.a2.to_f64()).collect();
    let mut opt = Adam::new(params.len(), cfg.lr).with_weight_decay(cfg.weight_decay);

    let mut best = init.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_step = 0;
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let mut events = Vec::new();

    for step in 0..=cfg.steps {
        let t = match unpack(&params, p, qd, cfg.condition_cap) {
            Ok(t) => t,
            Err(e) => {
                events.push(format!("step {step}: stopped, factor not invertible ({e})"));
                log::warn!("{}: affine calibration stopped at step {step}: {e}", problem.name);
                break;
            }
        };
        let (loss, g1, g2) = affine_loss_and_grad(problem, &t, q)?;
        check_finite_loss(loss, problem, step)?;
        losses.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best = t;
            best_step = step;
        }
        if step == cfg.steps {
            break;
        }
        let grads: Vec<f64> = g1.into_iter().chain(g2).collect();
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                layer: problem.name.clone(),
                step,
                loss,
            });
        }
        opt.step(&mut params, &grads);
    }

    Ok(Calibration {
        transform: best,
        initial_loss: losses[0],
        best_loss,
        best_step,
        losses,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{quant_linear, QuantConfig};
    use crate::tensor::{frobenius_mse, matmul, Seed};
    use crate::transforms::{FrozenNoise, Passthrough};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = Seed(seed).rng();
        Tensor::from_fn(rows, cols, |_, _| r.normal() as f32)
    }

    fn near_identity(n: usize, seed: u64, amp: f32) -> Tensor {
        let mut r = Seed(seed).rng();
        Tensor::from_fn(n, n, |i, j| (i == j) as u8 as f32 + amp * r.normal() as f32)
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        frobenius_mse(a, b).unwrap().sqrt() / b.frobenius_norm()
    }

    #[test]
    fn factor_shapes() {
        assert_eq!(kron_factor_shape(1), (1, 1));
        assert_eq!(kron_factor_shape(16), (4, 4));
        assert_eq!(kron_factor_shape(32), (4, 8));
        assert_eq!(kron_factor_shape(12), (3, 4));
        assert_eq!(kron_factor_shape(13), (1, 13));
        assert_eq!(kron_factor_shape(96), (8, 12));
    }

    #[test]
    fn identity_matches_plain_quant_linear() {
        let x = gaussian(32, 16, 1);
        let w = gaussian(16, 8, 2);
        let cfg = QuantConfig::uniform_bits(8);
        let t = AffineTransform::identity(16);
        assert_eq!(
            apply_affine(&x, &w, &t, &cfg).unwrap(),
            quant_linear(&x, &w, &cfg).unwrap()
        );
    }

    #[test]
    fn passthrough_cancels_exactly() {
        let x = gaussian(64, 12, 3);
        let w = gaussian(12, 7, 4);
        let t = AffineTransform::new(near_identity(3, 5, 0.3), near_identity(4, 6, 0.3)).unwrap();
        let out = apply_affine(&x, &w, &t, &Passthrough).unwrap();
        assert!(rel_err(&out, &matmul(&x, &w).unwrap()) <= 1e-4);
    }

    #[test]
    fn factored_inverse_matches_explicit() {
        let t = AffineTransform::new(near_identity(3, 7, 0.4), near_identity(2, 8, 0.4)).unwrap();
        let (b1, b2) = t.inverse_factors().unwrap();
        let explicit_inv = invert_capped(&t.to_matrix(), 1e8).unwrap();
        assert!(kron(&b1, &b2).max_abs_diff(&explicit_inv).unwrap() < 1e-4);
    }

    #[test]
    fn singular_factor_rejected() {
        let bad = Tensor::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        assert!(AffineTransform::new(bad, Tensor::identity(2)).is_err());
        assert!(AffineTransform::new(Tensor::zeros(2, 3), Tensor::identity(2)).is_err());
    }

    #[test]
    fn zero_steps_returns_identity() {
        let problem = LayerProblem::new(gaussian(64, 16, 9), gaussian(16, 8, 10)).unwrap();
        let cfg = CalibConfig { steps: 0, ..Default::default() };
        let c = calibrate_affine_problem(&problem, &QuantConfig::default(), &cfg).unwrap();
        assert_eq!(c.transform, AffineTransform::identity(16));
        assert_eq!(c.losses.len(), 1);
    }

    #[test]
    fn best_seen_never_worse_than_start() {
        let problem = LayerProblem::new(gaussian(128, 16, 11), gaussian(16, 8, 12)).unwrap();
        let cfg = CalibConfig { steps: 30, lr: 0.05, ..Default::default() };
        let c = calibrate_affine_problem(&problem, &QuantConfig::uniform_bits(3), &cfg).unwrap();
        assert!(c.best_loss <= c.initial_loss);
        let out = AffineTransform::clone(&c.transform);
        let y = apply_affine(&problem.x, &problem.w, &out, &QuantConfig::uniform_bits(3)).unwrap();
        assert_eq!(frobenius_mse(&problem.y, &y).unwrap(), c.best_loss);
    }

    fn fd_check(problem: &LayerProblem, t: &AffineTransform, q: &dyn LinearQuantizer) -> f64 {
        let (_, g1, g2) = affine_loss_and_grad(problem, t, q).unwrap();
        let analytic: Vec<f64> = g1.into_iter().chain(g2).collect();
        let (p, qd) = (t.a1.rows(), t.a2.rows());
        let base: Vec<f64> = t.a1.to_f64().into_iter().chain(t.a2.to_f64()).collect();
        let h = 1e-3;
        let mut num = Vec::new();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let lp = affine_loss_and_grad(problem, &unpack(&plus, p, qd, 1e8).unwrap(), q).unwrap().0;
            let lm = affine_loss_and_grad(problem, &unpack(&minus, p, qd, 1e8).unwrap(), q).unwrap().0;
            num.push((lp - lm) / (2.0 * h));
        }
        let diff: f64 = analytic.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|b| b * b).sum::<f64>().sqrt();
        diff / scale
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // 2x2 factors on a 4-wide layer, quantization linearized at the base point.
        let x = gaussian(32, 4, 13);
        let w = gaussian(4, 3, 14);
        let problem = LayerProblem::new(x, w).unwrap();
        let t = AffineTransform::new(near_identity(2, 15, 0.3), near_identity(2, 16, 0.3)).unwrap();
        let cfg = QuantConfig::uniform_bits(3).with_clip_ratios(vec![1.0]);
        let xt = t.transform_activations(&problem.x).unwrap();
        let wt = t.transform_weights(&problem.w).unwrap();
        let noise = FrozenNoise::linearize(&cfg, &xt, &wt, &problem.blocks).unwrap();
        let rel = fd_check(&problem, &t, &noise);
        assert!(rel < 1e-3, "relative gradient error {rel}");
    }

    #[test]
    fn contract_matches_explicit_kron_gradient() {
        // d/dA1 <D, A1 ⊗ A2> via the explicit Kronecker expansion.
        let a1 = gaussian(2, 2, 17);
        let a2 = gaussian(3, 3, 18);
        let d = gaussian(6, 6, 19);
        let (g1, g2) = kron_contract(&d, &a1.to_f64(), &a2.to_f64(), 2, 3);
        for i in 0..2 {
            for j in 0..2 {
                let mut e = Tensor::zeros(2, 2);
                e.set(i, j, 1.0);
                let k = kron(&e, &a2);
                let expect: f64 = d.data().iter().zip(k.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
                assert!((g1[i * 2 + j] - expect).abs() < 1e-5);
            }
        }
        for k in 0..3 {
            for l in 0..3 {
                let mut e = Tensor::zeros(3, 3);
                e.set(k, l, 1.0);
                let kk = kron(&a1, &e);
                let expect: f64 = d.data().iter().zip(kk.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
                assert!((g2[k * 3 + l] - expect).abs() < 1e-5);
            }
        }
    }
}
