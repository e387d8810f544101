use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerRecord, TransformKind};
use crate::quant::QuantConfig;
use crate::search::{oracle_from_errors, SearchConfig, SearchLayer};
use crate::selector::{agreement_of, check_version, PlanGroupRecord, Provenance, SelectionPlan, SelectorConfig};
use crate::tensor::{frobenius_mse, Seed, Tensor};
use crate::transforms::{calibrate, CalibConfig, Calibration, LayerProblem, Transform};

pub const REPORT_VERSION: &str = "1.0";

/// Everything a run can be configured with; each section is optional in
/// the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub quant: QuantConfig,
    pub calibration: CalibConfig,
    pub selection: SelectorConfig,
    pub search: SearchConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.quant.validate()?;
        self.selection.validate()?;
        self.search.validate()?;
        if !(self.calibration.lr > 0.0) {
            return Err(Error::InvalidArgument("calibration.lr must be positive".into()));
        }
        Ok(())
    }
}

/// A calibrated transform and its output on the layer's calibration data.
#[derive(Debug, Clone)]
pub struct CalibratedTransform {
    pub calibration: Calibration<Transform>,
    pub output: Tensor,
    /// `‖Y - Ŷ‖_F²`.
    pub recon: f64,
    pub seconds: f64,
}

pub type CacheSlot = std::result::Result<CalibratedTransform, String>;

fn kind_index(kind: TransformKind) -> usize {
    match kind {
        TransformKind::Affine => 0,
        TransformKind::Rotation => 1,
    }
}

/// Seed for calibrating `kind` on layer `layer`.
pub fn calibration_seed(root: Seed, layer: usize, kind: TransformKind) -> Seed {
    root.derive(layer as u64).derive(kind_index(kind) as u64)
}

/// Lazily calibrates each `(layer, transform)` pair at most once, so every
/// plan evaluated against the cache sees identical per-layer results.
pub struct TransformCache<'a> {
    layers: &'a [LayerRecord],
    cfg: &'a RunConfig,
    seed: Seed,
    slots: Vec<[Option<CacheSlot>; 2]>,
}

impl<'a> TransformCache<'a> {
    pub fn new(layers: &'a [LayerRecord], cfg: &'a RunConfig, seed: Seed) -> Self {
        Self {
            layers,
            cfg,
            seed,
            slots: vec![[None, None]; layers.len()],
        }
    }

    pub fn layers(&self) -> &'a [LayerRecord] {
        self.layers
    }

    pub fn get(&mut self, layer: usize, kind: TransformKind) -> &CacheSlot {
        let k = kind_index(kind);
        if self.slots[layer][k].is_none() {
            let slot = self.run(layer, kind).map_err(|e| {
                format!("calibration of {} ({kind}) failed: {e}", self.layers[layer].name)
            });
            if let Err(msg) = &slot {
                log::warn!("{msg}");
            }
            self.slots[layer][k] = Some(slot);
        }
        self.slots[layer][k].as_ref().expect("slot filled above")
    }

    fn run(&self, layer: usize, kind: TransformKind) -> Result<CalibratedTransform> {
        let start = Instant::now();
        let l = &self.layers[layer];
        let problem = LayerProblem::from_layer(l, self.cfg.calibration.smooth)?;
        let seed = calibration_seed(self.seed, layer, kind);
        let calibration = calibrate(&problem, kind, &self.cfg.quant, &self.cfg.calibration, seed)?;
        let output = calibration.transform.output(&problem, &self.cfg.quant)?;
        let recon = frobenius_mse(&l.calib.y, &output)?;
        log::debug!("{} {kind}: recon {recon:.6e} (best step {})", l.name, calibration.best_step);
        Ok(CalibratedTransform {
            calibration,
            output,
            recon,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn recon(&mut self, layer: usize, kind: TransformKind) -> std::result::Result<f64, String> {
        self.get(layer, kind).as_ref().map(|c| c.recon).map_err(Clone::clone)
    }

    /// Per-layer `(affine, rotation)` errors, calibrating everything.
    pub fn errors(&mut self) -> Result<Vec<(f64, f64)>> {
        (0..self.layers.len())
            .map(|i| {
                let a = self.recon(i, TransformKind::Affine).map_err(Error::Data)?;
                let r = self.recon(i, TransformKind::Rotation).map_err(Error::Data)?;
                Ok((a, r))
            })
            .collect()
    }

    pub fn oracle(&mut self) -> Result<SelectionPlan> {
        let errors = self.errors()?;
        let kinds: Vec<LayerKind> = self.layers.iter().map(|l| l.kind).collect();
        Ok(oracle_from_errors(&kinds, &errors))
    }

    /// Frozen outputs for the mixture search.
    pub fn search_layers(&mut self) -> Result<Vec<SearchLayer>> {
        let mut out = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let mut outputs = Vec::with_capacity(2);
            for kind in [TransformKind::Affine, TransformKind::Rotation] {
                match self.get(i, kind) {
                    Ok(c) => outputs.push(c.output.clone()),
                    Err(msg) => return Err(Error::Data(msg.clone())),
                }
            }
            let l = &self.layers[i];
            let yr = outputs.pop().expect("two outputs");
            let ya = outputs.pop().expect("two outputs");
            out.push(SearchLayer::new(l.name.clone(), l.kind, l.calib.y.clone(), ya, yr)?);
        }
        Ok(out)
    }

    pub fn timings(&self) -> Vec<CalibrationTiming> {
        let mut out = Vec::new();
        for (i, slots) in self.slots.iter().enumerate() {
            for (k, kind) in [TransformKind::Affine, TransformKind::Rotation].into_iter().enumerate() {
                if let Some(Ok(c)) = &slots[k] {
                    out.push(CalibrationTiming {
                        layer: i,
                        transform: kind,
                        seconds: c.seconds,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerResult {
    pub id: usize,
    pub name: String,
    pub kind: LayerKind,
    pub transform: TransformKind,
    /// `‖Y - Ŷ‖_F²`; absent when calibration failed.
    pub recon: Option<f64>,
    /// Recon divided by `‖Y‖_F²`.
    pub relative: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanReport {
    pub name: String,
    pub provenance: Provenance,
    /// Sum of the per-layer recon entries that succeeded.
    pub total: f64,
    /// False when any layer failed to calibrate.
    pub complete: bool,
    pub rotations: usize,
    pub layers: Vec<LayerResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Vec<PlanGroupRecord>>,
}

/// A plan and the label it is reported under.
#[derive(Debug, Clone)]
pub struct NamedPlan {
    pub name: String,
    pub plan: SelectionPlan,
}

impl NamedPlan {
    pub fn new(name: impl Into<String>, plan: SelectionPlan) -> Self {
        Self { name: name.into(), plan }
    }
}

/// Scores one plan against cached calibrations. Calibration failures are
/// recorded on the layer rather than aborting.
pub fn evaluate_plan(cache: &mut TransformCache<'_>, named: &NamedPlan) -> Result<PlanReport> {
    let layers = cache.layers();
    let plan = &named.plan;
    if plan.len() != layers.len() {
        return Err(Error::Data(format!(
            "plan '{}' assigns {} layers but the model has {}",
            named.name,
            plan.len(),
            layers.len()
        )));
    }
    let mut results = Vec::with_capacity(layers.len());
    for (i, (l, &t)) in layers.iter().zip(&plan.assignments).enumerate() {
        if plan.groups.iter().any(|g| g.layer_ids.contains(&i) && g.kind != l.kind) {
            return Err(Error::Data(format!(
                "plan '{}' lists layer {i} as {} but the model has {}",
                named.name,
                plan.groups.iter().find(|g| g.layer_ids.contains(&i)).unwrap().kind,
                l.kind
            )));
        }
        let (recon, error) = match cache.recon(i, t) {
            Ok(r) => (Some(r), None),
            Err(msg) => (None, Some(msg)),
        };
        let ynorm = l.calib.y.frobenius_norm().powi(2);
        results.push(LayerResult {
            id: i,
            name: l.name.clone(),
            kind: l.kind,
            transform: t,
            recon,
            relative: recon.map(|r| if ynorm > 0.0 { r / ynorm } else { r }),
            error,
        });
    }
    let total = results.iter().filter_map(|r| r.recon).sum();
    let complete = results.iter().all(|r| r.error.is_none());
    let rotations = plan.assignments.iter().filter(|&&t| t == TransformKind::Rotation).count();
    let diagnostics = (plan.provenance == Provenance::Heuristic).then(|| plan.group_records());
    Ok(PlanReport {
        name: named.name.clone(),
        provenance: plan.provenance,
        total,
        complete,
        rotations,
        layers: results,
        diagnostics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInfo {
    pub name: String,
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgreementMatrix {
    pub plans: Vec<String>,
    pub matches: Vec<Vec<usize>>,
    pub fraction: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTiming {
    pub layer: usize,
    pub transform: TransformKind,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timings {
    pub total_seconds: f64,
    pub calibrations: Vec<CalibrationTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub version: String,
    pub model: ModelInfo,
    pub seed: u64,
    pub quant: String,
    pub config: RunConfig,
    pub plans: Vec<PlanReport>,
    pub agreement: AgreementMatrix,
    /// Wall-clock data; only present when requested, since it breaks
    /// byte-for-byte reproducibility.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let version: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let v = version.get("version").and_then(|v| v.as_str()).unwrap_or("");
        check_version(v, path)?;
        let report: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        report.check_consistency()?;
        Ok(report)
    }

    /// Every plan total equals the sum of its layer entries.
    pub fn check_consistency(&self) -> Result<()> {
        for p in &self.plans {
            let sum: f64 = p.layers.iter().filter_map(|l| l.recon).sum();
            if (sum - p.total).abs() > 1e-9 * sum.abs().max(f64::MIN_POSITIVE) {
                return Err(Error::Data(format!(
                    "report plan '{}': total {} does not match layer sum {sum}",
                    p.name, p.total
                )));
            }
        }
        Ok(())
    }

    pub fn plan(&self, name: &str) -> Option<&PlanReport> {
        self.plans.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Append the per-layer oracle as an extra plan named `oracle`.
    pub with_oracle: bool,
    pub timings: bool,
}

pub fn evaluate(
    model_name: &str,
    layers: &[LayerRecord],
    plans: &[NamedPlan],
    cfg: &RunConfig,
    seed: Seed,
    opts: EvalOptions,
) -> Result<EvalReport> {
    let start = Instant::now();
    let mut cache = TransformCache::new(layers, cfg, seed);
    let mut plans = plans.to_vec();
    for p in &plans {
        p.plan.validate().map_err(|e| Error::Data(format!("plan '{}': {e}", p.name)))?;
    }
    if opts.with_oracle {
        plans.push(NamedPlan::new("oracle", cache.oracle()?));
    }
    let reports = plans
        .iter()
        .map(|p| evaluate_plan(&mut cache, p))
        .collect::<Result<Vec<_>>>()?;
    let agreement = agreement_matrix(&plans)?;
    let timings = opts.timings.then(|| Timings {
        total_seconds: start.elapsed().as_secs_f64(),
        calibrations: cache.timings(),
    });
    let report = EvalReport {
        version: REPORT_VERSION.into(),
        model: ModelInfo {
            name: model_name.into(),
            layers: layers.len(),
        },
        seed: seed.0,
        quant: cfg.quant.label(),
        config: cfg.clone(),
        plans: reports,
        agreement,
        timings,
    };
    report.check_consistency()?;
    Ok(report)
}

fn agreement_matrix(plans: &[NamedPlan]) -> Result<AgreementMatrix> {
    let n = plans.len();
    let mut matches = vec![vec![0; n]; n];
    let mut fraction = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let (m, f) = agreement_of(&plans[i].plan.assignments, &plans[j].plan.assignments)?;
            matches[i][j] = m;
            fraction[i][j] = f;
        }
    }
    Ok(AgreementMatrix {
        plans: plans.iter().map(|p| p.name.clone()).collect(),
        matches,
        fraction,
    })
}
