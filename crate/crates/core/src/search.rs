//! Differentiable transform selection: a per-layer softmax mixture of the
//! affine and rotation outputs, trained with an entropy penalty and then
//! discretized by argmax.
//!
//! In the default two-phase protocol both transforms are calibrated first and
//! frozen, so each layer's reconstruction term depends on `α` only through
//! `p = π_A`:
//!
//! `‖Y - p Ŷ_A - (1-p) Ŷ_R‖² = p² a + (1-p)² r + 2 p (1-p) c`
//!
//! with `a = ‖E_A‖²`, `r = ‖E_R‖²`, `c = ⟨E_A, E_R⟩`. The search evaluates
//! this closed form; [`search_loss`] computes the same quantity from tensors.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, TransformKind};
use crate::optim::Adam;
use crate::selector::{Provenance, SelectionPlan};
use crate::tensor::{frobenius_mse, Tensor};
use crate::transforms::{
    affine_backward, affine_forward, affine_unpack, rotation_backward, rotation_forward,
    AffineTransform, CalibConfig, LayerProblem, LinearQuantizer, RotationTransform, Transform,
};

pub const RESULT_VERSION: &str = "1.0";

/// How each layer's reconstruction term is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Divided by the number of output elements.
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn factor(self, y: &Tensor) -> f64 {
        match self {
            Reduction::Mean => 1.0 / y.len().max(1) as f64,
            Reduction::Sum => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub steps: usize,
    pub lr: f64,
    pub lambda_entropy: f64,
    pub recon_reduction: Reduction,
    /// Also train the transforms alongside `α` (experimental).
    pub joint: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.05,
            lambda_entropy: 0.01,
            recon_reduction: Reduction::Mean,
            joint: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("search.lr must be positive, got {}", self.lr)));
        }
        if !(self.lambda_entropy >= 0.0 && self.lambda_entropy.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "search.lambda_entropy must be non-negative, got {}",
                self.lambda_entropy
            )));
        }
        Ok(())
    }
}

/// Frozen outputs of one layer under both transforms.
#[derive(Debug, Clone)]
pub struct SearchLayer {
    pub name: String,
    pub kind: LayerKind,
    pub y: Tensor,
    pub affine: Tensor,
    pub rotation: Tensor,
}

/// `a`, `r`, `c` of the closed form, already scaled by the reduction.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ErrorGram {
    a: f64,
    r: f64,
    c: f64,
}

impl SearchLayer {
    pub fn new(name: impl Into<String>, kind: LayerKind, y: Tensor, affine: Tensor, rotation: Tensor) -> Result<Self> {
        for (label, t) in [("affine", &affine), ("rotation", &rotation)] {
            if t.shape() != y.shape() {
                return Err(Error::Shape {
                    op: if label == "affine" { "search_layer_affine" } else { "search_layer_rotation" },
                    left: y.shape(),
                    right: t.shape(),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            kind,
            y,
            affine,
            rotation,
        })
    }

    /// Unnormalized `(‖Y - Ŷ_A‖², ‖Y - Ŷ_R‖²)`.
    pub fn errors(&self) -> Result<(f64, f64)> {
        Ok((frobenius_mse(&self.y, &self.affine)?, frobenius_mse(&self.y, &self.rotation)?))
    }

    fn gram(&self, reduction: Reduction) -> ErrorGram {
        gram(&self.y, &self.affine, &self.rotation, reduction.factor(&self.y))
    }
}

fn gram(y: &Tensor, ya: &Tensor, yr: &Tensor, scale: f64) -> ErrorGram {
    let (mut a, mut r, mut c) = (0.0f64, 0.0f64, 0.0f64);
    for ((&t, &pa), &pr) in y.data().iter().zip(ya.data()).zip(yr.data()) {
        let ea = t as f64 - pa as f64;
        let er = t as f64 - pr as f64;
        a += ea * ea;
        r += er * er;
        c += ea * er;
    }
    ErrorGram {
        a: a * scale,
        r: r * scale,
        c: c * scale,
    }
}

/// Mixture logits for every layer and the entropy weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    /// `(α_A, α_R)` per layer.
    pub alpha: Vec<[f64; 2]>,
    pub lambda_entropy: f64,
}

impl MixtureParams {
    pub fn zeros(n: usize, lambda_entropy: f64) -> Self {
        Self {
            alpha: vec![[0.0, 0.0]; n],
            lambda_entropy,
        }
    }

    pub fn pis(&self) -> Vec<[f64; 2]> {
        self.alpha.iter().map(|&a| softmax2(a)).collect()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `(π_A, π_R)`.
pub fn softmax2(alpha: [f64; 2]) -> [f64; 2] {
    let d = alpha[0] - alpha[1];
    let pa = if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    };
    [pa, 1.0 - pa]
}

/// `-Σ π ln π` in nats, evaluated from the logits so it stays exact at
/// saturation.
pub fn mixture_entropy(alpha: [f64; 2]) -> f64 {
    let d = alpha[0] - alpha[1];
    let [pa, pr] = softmax2(alpha);
    // ln π_A = -softplus(-d), ln π_R = -softplus(d)
    (pa * softplus(-d) + pr * softplus(d)).max(0.0)
}

/// `π_A Ŷ_A + π_R Ŷ_R`.
pub fn mix(affine: &Tensor, rotation: &Tensor, alpha: [f64; 2]) -> Result<Tensor> {
    affine.check_same_shape(rotation, "mix")?;
    let [pa, pr] = softmax2(alpha);
    let data = affine
        .data()
        .iter()
        .zip(rotation.data())
        .map(|(&a, &r)| (pa * a as f64 + pr * r as f64) as f32)
        .collect();
    Tensor::new(affine.rows(), affine.cols(), data)
}

/// Mixture output of a layer under both calibrated transforms.
pub fn mixture_forward(
    problem: &LayerProblem,
    affine: &AffineTransform,
    rotation: &RotationTransform,
    alpha: [f64; 2],
    q: &dyn LinearQuantizer,
) -> Result<Tensor> {
    let ya = Transform::Affine(affine.clone()).output(problem, q)?;
    let yr = Transform::Rotation(rotation.clone()).output(problem, q)?;
    mix(&ya, &yr, alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchLoss {
    pub total: f64,
    pub recon: Vec<f64>,
    pub entropy: Vec<f64>,
}

/// `Σ_l recon_l + λ Σ_l H(π_l)`, with the recon terms computed from the
/// mixed tensors.
pub fn search_loss(layers: &[SearchLayer], params: &MixtureParams, reduction: Reduction) -> Result<SearchLoss> {
    check_len(layers, params)?;
    let mut recon = Vec::with_capacity(layers.len());
    let mut entropy = Vec::with_capacity(layers.len());
    for (layer, &alpha) in layers.iter().zip(&params.alpha) {
        let yhat = mix(&layer.affine, &layer.rotation, alpha)?;
        recon.push(frobenius_mse(&layer.y, &yhat)? * reduction.factor(&layer.y));
        entropy.push(mixture_entropy(alpha));
    }
    let total = recon.iter().sum::<f64>() + params.lambda_entropy * entropy.iter().sum::<f64>();
    if !total.is_finite() {
        return Err(Error::NonFinite("search loss".into()));
    }
    Ok(SearchLoss { total, recon, entropy })
}

/// Closed-form loss of one layer and its gradient with respect to `(α_A, α_R)`.
fn layer_loss_grad(g: ErrorGram, alpha: [f64; 2], lambda: f64) -> (f64, f64, [f64; 2]) {
    let d = alpha[0] - alpha[1];
    let [p, q] = softmax2(alpha);
    let recon = p * p * g.a + q * q * g.r + 2.0 * p * q * g.c;
    let h = mixture_entropy(alpha);
    let drecon_dp = 2.0 * p * g.a - 2.0 * q * g.r + 2.0 * (q - p) * g.c;
    // dH/dp = ln((1-p)/p) = -d
    let dl_dp = drecon_dp - lambda * d;
    let dp_da = p * q;
    (recon, h, [dl_dp * dp_da, -dl_dp * dp_da])
}

/// Loss and gradient of [`search_loss`] with respect to every `α`.
pub fn search_loss_grad(
    layers: &[SearchLayer],
    params: &MixtureParams,
    reduction: Reduction,
) -> Result<(f64, Vec<[f64; 2]>)> {
    check_len(layers, params)?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(layers.len());
    for (layer, &alpha) in layers.iter().zip(&params.alpha) {
        let (recon, h, g) = layer_loss_grad(layer.gram(reduction), alpha, params.lambda_entropy);
        total += recon + params.lambda_entropy * h;
        grads.push(g);
    }
    Ok((total, grads))
}

fn check_len(layers: &[SearchLayer], params: &MixtureParams) -> Result<()> {
    if layers.len() != params.alpha.len() {
        return Err(Error::InvalidArgument(format!(
            "{} layers but {} mixture parameters",
            layers.len(),
            params.alpha.len()
        )));
    }
    Ok(())
}

/// `Affine` unless `π_R` is strictly larger.
pub fn discretize(pis: [f64; 2]) -> TransformKind {
    if pis[1] > pis[0] {
        TransformKind::Rotation
    } else {
        TransformKind::Affine
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    TwoPhase,
    Joint,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub plan: SelectionPlan,
    pub mode: SearchMode,
    pub alpha: Vec<[f64; 2]>,
    pub final_pis: Vec<[f64; 2]>,
    pub final_entropy: Vec<f64>,
    /// Loss before each update, then the loss at the final parameters.
    pub loss_trace: Vec<f64>,
    pub best_step: usize,
    pub best_loss: f64,
    pub config: SearchConfig,
}

#[derive(Serialize)]
struct SearchResultFile<'a> {
    version: &'a str,
    mode: &'a SearchMode,
    config: &'a SearchConfig,
    best_step: usize,
    best_loss: f64,
    layers: Vec<SearchLayerFile<'a>>,
    assignments: &'a [TransformKind],
}

#[derive(Serialize)]
struct SearchLayerFile<'a> {
    id: usize,
    name: &'a str,
    alpha: [f64; 2],
    pi: [f64; 2],
    entropy: f64,
}

impl SearchResult {
    fn from_state(
        layers_meta: &[(String, LayerKind)],
        mode: SearchMode,
        alpha: Vec<[f64; 2]>,
        loss_trace: Vec<f64>,
        best_step: usize,
        best_loss: f64,
        config: SearchConfig,
    ) -> Self {
        let final_pis: Vec<[f64; 2]> = alpha.iter().map(|&a| softmax2(a)).collect();
        let final_entropy = alpha.iter().map(|&a| mixture_entropy(a)).collect();
        let kinds: Vec<LayerKind> = layers_meta.iter().map(|(_, k)| *k).collect();
        let plan = SelectionPlan::from_assignments(
            &kinds,
            final_pis.iter().map(|&p| discretize(p)).collect(),
            Provenance::Learned,
        );
        Self {
            plan,
            mode,
            alpha,
            final_pis,
            final_entropy,
            loss_trace,
            best_step,
            best_loss,
            config,
        }
    }

    pub fn to_json(&self, names: &[String]) -> String {
        let file = SearchResultFile {
            version: RESULT_VERSION,
            mode: &self.mode,
            config: &self.config,
            best_step: self.best_step,
            best_loss: self.best_loss,
            layers: (0..self.alpha.len())
                .map(|i| SearchLayerFile {
                    id: i,
                    name: names.get(i).map(String::as_str).unwrap_or(""),
                    alpha: self.alpha[i],
                    pi: self.final_pis[i],
                    entropy: self.final_entropy[i],
                })
                .collect(),
            assignments: &self.plan.assignments,
        };
        let mut s = serde_json::to_string_pretty(&file).expect("search result serializes");
        s.push('\n');
        s
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.loss_trace.iter().enumerate() {
            let _ = writeln!(s, "{i},{l:e}");
        }
        s
    }
}

fn diverged(step: usize, loss: f64, trace: &[f64]) -> Error {
    let tail: Vec<String> = trace.iter().rev().take(5).rev().map(|l| format!("{l:e}")).collect();
    Error::Diverged {
        layer: format!("search (last losses: {})", tail.join(", ")),
        step,
        loss,
    }
}

/// Adam on `α` from zero with transforms frozen; returns the lowest-loss
/// parameters seen.
pub fn run_search(layers: &[SearchLayer], cfg: &SearchConfig) -> Result<SearchResult> {
    cfg.validate()?;
    if cfg.joint {
        return Err(Error::InvalidArgument(
            "joint search needs the layer problems; use run_joint_search".into(),
        ));
    }
    let grams: Vec<ErrorGram> = layers.iter().map(|l| l.gram(cfg.recon_reduction)).collect();
    let n = layers.len();
    let mut flat = vec![0.0f64; 2 * n];
    let mut opt = Adam::new(flat.len(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut best = (f64::INFINITY, 0usize, flat.clone());

    for step in 0..=cfg.steps {
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(2 * n);
        for (i, g) in grams.iter().enumerate() {
            let alpha = [flat[2 * i], flat[2 * i + 1]];
            let (recon, h, dg) = layer_loss_grad(*g, alpha, cfg.lambda_entropy);
            total += recon + cfg.lambda_entropy * h;
            grads.extend_from_slice(&dg);
        }
        if !total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(diverged(step, total, &trace));
        }
        trace.push(total);
        if total < best.0 {
            best = (total, step, flat.clone());
        }
        if step == cfg.steps {
            break;
        }
        opt.step(&mut flat, &grads);
    }

    let (best_loss, best_step, flat) = best;
    let alpha = flat.chunks(2).map(|c| [c[0], c[1]]).collect();
    let meta: Vec<(String, LayerKind)> = layers.iter().map(|l| (l.name.clone(), l.kind)).collect();
    Ok(SearchResult::from_state(
        &meta,
        SearchMode::TwoPhase,
        alpha,
        trace,
        best_step,
        best_loss,
        cfg.clone(),
    ))
}

/// Output of [`run_joint_search`]: the result plus the co-trained transforms.
#[derive(Debug, Clone)]
pub struct JointOutcome {
    pub result: SearchResult,
    pub affine: Vec<AffineTransform>,
    pub rotation: Vec<RotationTransform>,
}

/// Experimental: `α` and both transforms updated together on the mixture
/// loss. Transforms start from the given ones (typically phase-one
/// calibrations) and use the calibration learning rate. The objective is
/// no longer separable per transform, so no oracle applies.
pub fn run_joint_search(
    problems: &[(LayerProblem, LayerKind)],
    start: &[(AffineTransform, RotationTransform)],
    q: &dyn LinearQuantizer,
    calib: &CalibConfig,
    cfg: &SearchConfig,
) -> Result<JointOutcome> {
    cfg.validate()?;
    if problems.len() != start.len() {
        return Err(Error::InvalidArgument("one starting transform pair per layer required".into()));
    }
    let n = problems.len();
    let mut alpha = vec![0.0f64; 2 * n];
    let mut alpha_opt = Adam::new(2 * n, cfg.lr);
    let mut states: Vec<JointLayer> = start
        .iter()
        .map(|(a, r)| JointLayer::new(a, r, calib.lr))
        .collect();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut best: Option<(f64, usize, Vec<f64>, Vec<AffineTransform>, Vec<RotationTransform>)> = None;

    for step in 0..=cfg.steps {
        let mut total = 0.0;
        let mut alpha_grads = Vec::with_capacity(2 * n);
        let mut updates = Vec::with_capacity(n);
        for (i, ((problem, _), st)) in problems.iter().zip(&states).enumerate() {
            let a_now = [alpha[2 * i], alpha[2 * i + 1]];
            let [p, pr] = softmax2(a_now);
            let at = st.affine(calib.condition_cap)?;
            let rt = st.rotation()?;
            let fa = affine_forward(problem, &at, q)?;
            let fr = rotation_forward(problem, &rt, q)?;
            let scale = cfg.recon_reduction.factor(&problem.y);
            let g = gram(&problem.y, &fa.quant.yhat, &fr.quant.yhat, scale);
            let (recon, h, dg) = layer_loss_grad(g, a_now, cfg.lambda_entropy);
            total += recon + cfg.lambda_entropy * h;
            alpha_grads.extend_from_slice(&dg);

            let yhat = mix(&fa.quant.yhat, &fr.quant.yhat, a_now)?;
            let dy = yhat.sub(&problem.y)?.scale((2.0 * scale) as f32);
            let (g1, g2) = affine_backward(problem, &at, &fa, &dy.scale(p as f32))?;
            let gr = rotation_backward(problem, &rt, &fr, &dy.scale(pr as f32))?;
            updates.push((g1.into_iter().chain(g2).collect::<Vec<f64>>(), gr, at, rt));
        }
        if !total.is_finite() {
            return Err(diverged(step, total, &trace));
        }
        trace.push(total);
        if best.as_ref().is_none_or(|b| total < b.0) {
            best = Some((
                total,
                step,
                alpha.clone(),
                updates.iter().map(|u| u.2.clone()).collect(),
                updates.iter().map(|u| u.3.clone()).collect(),
            ));
        }
        if step == cfg.steps {
            break;
        }
        alpha_opt.step(&mut alpha, &alpha_grads);
        for (st, (ga, gr, _, _)) in states.iter_mut().zip(updates) {
            st.affine_opt.step(&mut st.affine_params, &ga);
            st.rotation_opt.step(&mut st.rotation_params, &gr);
        }
    }

    let (best_loss, best_step, flat, affine, rotation) = best.expect("at least one step evaluated");
    let meta: Vec<(String, LayerKind)> = problems.iter().map(|(p, k)| (p.name.clone(), *k)).collect();
    let result = SearchResult::from_state(
        &meta,
        SearchMode::Joint,
        flat.chunks(2).map(|c| [c[0], c[1]]).collect(),
        trace,
        best_step,
        best_loss,
        cfg.clone(),
    );
    Ok(JointOutcome {
        result,
        affine,
        rotation,
    })
}

struct JointLayer {
    p: usize,
    q: usize,
    dim: usize,
    pre: Option<Tensor>,
    affine_params: Vec<f64>,
    rotation_params: Vec<f64>,
    affine_opt: Adam,
    rotation_opt: Adam,
}

impl JointLayer {
    fn new(a: &AffineTransform, r: &RotationTransform, lr: f64) -> Self {
        let (a1, a2) = a.factors();
        let affine_params: Vec<f64> = a1.to_f64().into_iter().chain(a2.to_f64()).collect();
        let rotation_params = r.upper();
        Self {
            p: a1.rows(),
            q: a2.rows(),
            dim: r.dim(),
            pre: r.pre_rotation().cloned(),
            affine_opt: Adam::new(affine_params.len(), lr),
            rotation_opt: Adam::new(rotation_params.len(), lr),
            affine_params,
            rotation_params,
        }
    }

    fn affine(&self, cap: f64) -> Result<AffineTransform> {
        affine_unpack(&self.affine_params, self.p, self.q, cap)
    }

    fn rotation(&self) -> Result<RotationTransform> {
        RotationTransform::from_upper(&self.rotation_params, self.dim, self.pre.clone())
    }
}

/// Per-layer argmin of the reconstruction error; ties go to `Affine`.
pub fn oracle_from_errors(kinds: &[LayerKind], errors: &[(f64, f64)]) -> SelectionPlan {
    let assignments = errors
        .iter()
        .map(|&(a, r)| {
            if r < a {
                TransformKind::Rotation
            } else {
                TransformKind::Affine
            }
        })
        .collect();
    SelectionPlan::from_assignments(kinds, assignments, Provenance::Oracle)
}

/// Exact minimizer of the total reconstruction error over all `2ⁿ` plans:
/// the objective is a sum of per-layer terms, so a per-layer argmin suffices.
pub fn brute_force_oracle(layers: &[SearchLayer]) -> Result<SelectionPlan> {
    let errors = layers.iter().map(SearchLayer::errors).collect::<Result<Vec<_>>>()?;
    let kinds: Vec<LayerKind> = layers.iter().map(|l| l.kind).collect();
    Ok(oracle_from_errors(&kinds, &errors))
}

/// Total error of a plan given per-layer `(affine, rotation)` errors.
pub fn plan_total(assignments: &[TransformKind], errors: &[(f64, f64)]) -> f64 {
    assignments
        .iter()
        .zip(errors)
        .map(|(t, &(a, r))| match t {
            TransformKind::Affine => a,
            TransformKind::Rotation => r,
        })
        .sum()
}
