use serde::{Deserialize, Serialize};

use super::plan::{group_layers, HeuristicDiagnostics, PlanGroup, Provenance, SelectionPlan};
use super::stats::{layer_outlier_score, robust_z, OutlierScores};
use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerRecord, TransformKind};
use crate::tensor::Seed;

/// `round(v)` with ties to the even neighbour.
pub fn round_half_even(v: f64) -> f64 {
    v.round_ties_even()
}

/// `K_high = round(β L)`, `K_low = L - K_high`.
pub fn budget_split(l: usize, beta: f64) -> (usize, usize) {
    assert!((0.0..=1.0).contains(&beta), "beta {beta} outside [0, 1]");
    let k_high = (round_half_even(beta * l as f64) as usize).min(l);
    (k_high, l - k_high)
}

/// Share of positive z-mass, clipped to `[lo, hi]`. All-zero scores give `lo`.
pub fn beta_from_zmass(scores: &OutlierScores, lo: f64, hi: f64) -> f64 {
    assert!(lo <= hi, "z-mass bounds reversed: ({lo}, {hi})");
    let total: f64 = scores.z.iter().map(|z| z.abs()).sum();
    if total == 0.0 {
        return lo;
    }
    let pos: f64 = scores.z.iter().filter(|&&z| z > 0.0).sum();
    (pos / total).clamp(lo, hi)
}

/// Tail thresholds: `τ_high` is the `k_high`-th largest score (`+∞` when
/// `k_high = 0`), `τ_low` the `k_low`-th smallest (`-∞` when `k_low = 0`).
pub fn tail_thresholds(scores: &OutlierScores, k_high: usize, k_low: usize) -> Result<(f64, f64)> {
    let n = scores.z.len();
    if k_high + k_low > n {
        return Err(Error::InvalidArgument(format!(
            "tail budget {k_high} + {k_low} exceeds group size {n}"
        )));
    }
    let mut sorted = scores.z.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let tau_high = if k_high == 0 {
        f64::INFINITY
    } else {
        sorted[n - k_high]
    };
    let tau_low = if k_low == 0 {
        f64::NEG_INFINITY
    } else {
        sorted[k_low - 1]
    };
    Ok((tau_high, tau_low))
}

/// Union of the top `k_high` and bottom `k_low` positions by score. Ties at a
/// cut go to the lower index, and the bottom tail is drawn from what the top
/// tail left, so the result always has exactly `k_high + k_low` members.
pub fn candidate_set(z: &[f64], k_high: usize, k_low: usize) -> Vec<usize> {
    assert!(k_high + k_low <= z.len());
    let mut by_high: Vec<usize> = (0..z.len()).collect();
    by_high.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    let mut chosen = vec![false; z.len()];
    for &i in by_high.iter().take(k_high) {
        chosen[i] = true;
    }
    let mut by_low: Vec<usize> = (0..z.len()).filter(|&i| !chosen[i]).collect();
    by_low.sort_by(|&a, &b| z[a].total_cmp(&z[b]).then(a.cmp(&b)));
    for &i in by_low.iter().take(k_low) {
        chosen[i] = true;
    }
    (0..z.len()).filter(|&i| chosen[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    #[default]
    Fixed,
    ZMass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorConfig {
    pub attn_fraction: f64,
    pub ffn_fraction: f64,
    pub beta_mode: BetaMode,
    pub beta_attn: f64,
    pub beta_ffn: f64,
    pub zmass_bounds_attn: (f64, f64),
    pub zmass_bounds_ffn: (f64, f64),
    /// Rotation share for random plans.
    pub random_fraction: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            attn_fraction: 0.7,
            ffn_fraction: 0.5,
            beta_mode: BetaMode::Fixed,
            beta_attn: 0.1,
            beta_ffn: 0.9,
            zmass_bounds_attn: (0.1, 0.3),
            zmass_bounds_ffn: (0.7, 0.9),
            random_fraction: 0.5,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("selection.{name} = {v} is outside [0, 1]")))
            }
        };
        unit("attn_fraction", self.attn_fraction)?;
        unit("ffn_fraction", self.ffn_fraction)?;
        unit("beta_attn", self.beta_attn)?;
        unit("beta_ffn", self.beta_ffn)?;
        unit("random_fraction", self.random_fraction)?;
        for (name, (lo, hi)) in [
            ("zmass_bounds_attn", self.zmass_bounds_attn),
            ("zmass_bounds_ffn", self.zmass_bounds_ffn),
        ] {
            unit(name, lo)?;
            unit(name, hi)?;
            if lo > hi {
                return Err(Error::InvalidArgument(format!("selection.{name}: lower bound above upper")));
            }
        }
        Ok(())
    }

    fn fraction(&self, kind: LayerKind) -> f64 {
        match kind {
            LayerKind::AttentionQkv => self.attn_fraction,
            LayerKind::FfnGateUp => self.ffn_fraction,
        }
    }

    fn beta(&self, kind: LayerKind, scores: &OutlierScores) -> f64 {
        match (self.beta_mode, kind) {
            (BetaMode::Fixed, LayerKind::AttentionQkv) => self.beta_attn,
            (BetaMode::Fixed, LayerKind::FfnGateUp) => self.beta_ffn,
            (BetaMode::ZMass, LayerKind::AttentionQkv) => {
                beta_from_zmass(scores, self.zmass_bounds_attn.0, self.zmass_bounds_attn.1)
            }
            (BetaMode::ZMass, LayerKind::FfnGateUp) => {
                beta_from_zmass(scores, self.zmass_bounds_ffn.0, self.zmass_bounds_ffn.1)
            }
        }
    }
}

/// Heuristic plan from precomputed outlier scores (`raw[i]` for layer `i`).
pub fn heuristic_from_scores(kinds: &[LayerKind], raw: &[f64], cfg: &SelectorConfig) -> Result<SelectionPlan> {
    if kinds.len() != raw.len() {
        return Err(Error::InvalidArgument(format!(
            "{} layer kinds but {} scores",
            kinds.len(),
            raw.len()
        )));
    }
    cfg.validate()?;
    let mut assignments = vec![TransformKind::Affine; kinds.len()];
    let mut groups = Vec::new();
    for kind in LayerKind::ALL {
        let ids: Vec<usize> = (0..kinds.len()).filter(|&i| kinds[i] == kind).collect();
        if ids.is_empty() {
            log::warn!("no {kind} layers; group skipped");
            continue;
        }
        let group_raw: Vec<f64> = ids.iter().map(|&i| raw[i]).collect();
        let scores = robust_z(&group_raw)?;
        let l = round_half_even(cfg.fraction(kind) * ids.len() as f64) as usize;
        let beta = cfg.beta(kind, &scores);
        let (k_high, k_low) = budget_split(l, beta);
        let (tau_high, tau_low) = tail_thresholds(&scores, k_high, k_low)?;
        for pos in candidate_set(&scores.z, k_high, k_low) {
            assignments[ids[pos]] = TransformKind::Rotation;
        }
        groups.push(PlanGroup {
            kind,
            layer_ids: ids,
            diagnostics: Some(HeuristicDiagnostics {
                tau_high,
                tau_low,
                beta,
                k_high,
                k_low,
                l,
            }),
        });
    }
    Ok(SelectionPlan {
        assignments,
        provenance: Provenance::Heuristic,
        groups,
    })
}

pub fn heuristic_select(layers: &[LayerRecord], cfg: &SelectorConfig) -> Result<SelectionPlan> {
    let kinds: Vec<LayerKind> = layers.iter().map(|l| l.kind).collect();
    let raw = layers.iter().map(layer_outlier_score).collect::<Result<Vec<_>>>()?;
    heuristic_from_scores(&kinds, &raw, cfg)
}

/// Exactly `round(fraction · n)` rotations at uniformly random positions.
pub fn random_assignments(n: usize, fraction: f64, seed: Seed) -> Vec<TransformKind> {
    assert!((0.0..=1.0).contains(&fraction), "fraction {fraction} outside [0, 1]");
    let k = round_half_even(fraction * n as f64) as usize;
    let mut out: Vec<TransformKind> = (0..n)
        .map(|i| {
            if i < k {
                TransformKind::Rotation
            } else {
                TransformKind::Affine
            }
        })
        .collect();
    seed.rng().shuffle(&mut out);
    out
}

pub fn random_plan(kinds: &[LayerKind], fraction: f64, seed: Seed) -> SelectionPlan {
    SelectionPlan::from_assignments(
        kinds,
        random_assignments(kinds.len(), fraction, seed),
        Provenance::Random { seed: seed.0 },
    )
}

/// Sanity view used by `analyze`: one scored group per layer kind.
pub fn group_scores(layers: &[LayerRecord]) -> Result<Vec<(LayerKind, Vec<usize>, OutlierScores)>> {
    let kinds: Vec<LayerKind> = layers.iter().map(|l| l.kind).collect();
    group_layers(&kinds)
        .into_iter()
        .map(|(kind, ids)| {
            let raw = ids
                .iter()
                .map(|&i| layer_outlier_score(&layers[i]))
                .collect::<Result<Vec<_>>>()?;
            Ok((kind, ids, robust_z(&raw)?))
        })
        .collect()
}
