use std::fmt::Write as _;

use serde::Serialize;

use super::eval::EvalReport;
use crate::error::Result;
use crate::model::{LayerKind, LayerRecord};
use crate::selector::{group_scores, layer_kurtosis, Kurtosis};

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "failed".into())
}

/// Human-readable summary: plan totals, per-layer errors, agreement.
pub fn render_text(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model {} ({} layers), {}, seed {}", r.model.name, r.model.layers, r.quant, r.seed);
    let _ = writeln!(s);
    let best = r.plans.iter().map(|p| p.total).fold(f64::INFINITY, f64::min);
    let w = r.plans.iter().map(|p| p.name.len()).max().unwrap_or(4).max(4);
    let _ = writeln!(s, "{:<w$}  {:<16}  {:>14}  {:>9}  {:>4}", "plan", "provenance", "total", "vs best", "rot");
    for p in &r.plans {
        let _ = writeln!(
            s,
            "{:<w$}  {:<16}  {:>14.6e}  {:>8.2}%  {:>4}{}",
            p.name,
            p.provenance.label(),
            p.total,
            if best > 0.0 { 100.0 * (p.total / best - 1.0) } else { 0.0 },
            p.rotations,
            if p.complete { "" } else { "  (incomplete)" }
        );
    }
    let _ = writeln!(s);
    let _ = write!(s, "{:<14} {:<14}", "layer", "kind");
    for p in &r.plans {
        let _ = write!(s, "  {:>22}", p.name);
    }
    let _ = writeln!(s);
    for i in 0..r.model.layers {
        let first = &r.plans.first().map(|p| &p.layers[i]);
        let (name, kind) = first.map(|l| (l.name.as_str(), l.kind.as_str())).unwrap_or(("", ""));
        let _ = write!(s, "{name:<14} {kind:<14}");
        for p in &r.plans {
            let l = &p.layers[i];
            let tag = match l.transform {
                crate::model::TransformKind::Affine => "A",
                crate::model::TransformKind::Rotation => "R",
            };
            let _ = write!(s, "  {tag} {:>20}", fmt_opt(l.recon));
        }
        let _ = writeln!(s);
    }
    if r.plans.len() > 1 {
        let _ = writeln!(s);
        let _ = writeln!(s, "agreement (matching layers)");
        let _ = write!(s, "{:<w$}", "");
        for name in &r.agreement.plans {
            let _ = write!(s, "  {name:>w$}");
        }
        let _ = writeln!(s);
        for (name, row) in r.agreement.plans.iter().zip(&r.agreement.matches) {
            let _ = write!(s, "{name:<w$}");
            for m in row {
                let _ = write!(s, "  {m:>w$}");
            }
            let _ = writeln!(s);
        }
    }
    for p in &r.plans {
        for l in &p.layers {
            if let Some(e) = &l.error {
                let _ = writeln!(s, "{}: {e}", p.name);
            }
        }
    }
    s
}

fn csv_field(v: &str) -> String {
    if v.contains([',', '"', '\n']) {
        format!("\"{}\"", v.replace('"', "\"\""))
    } else {
        v.to_string()
    }
}

/// One row per plan and layer, plus a `total` row per plan.
pub fn render_csv(r: &EvalReport) -> String {
    let mut s = String::from("plan,provenance,layer,name,kind,transform,recon,relative,error\n");
    for p in &r.plans {
        let prov = p.provenance.label();
        for l in &p.layers {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                csv_field(&p.name),
                prov,
                l.id,
                csv_field(&l.name),
                l.kind,
                l.transform,
                l.recon.map(|v| format!("{v:e}")).unwrap_or_default(),
                l.relative.map(|v| format!("{v:e}")).unwrap_or_default(),
                csv_field(l.error.as_deref().unwrap_or(""))
            );
        }
        let _ = writeln!(s, "{},{},total,,,,{:e},,", csv_field(&p.name), prov, p.total);
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerStats {
    pub id: usize,
    pub name: String,
    pub kurtosis: Vec<(String, Kurtosis)>,
    pub score: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupStats {
    pub kind: LayerKind,
    pub median: f64,
    pub mad: f64,
    pub layers: Vec<LayerStats>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelStats {
    pub version: &'static str,
    pub model: String,
    pub groups: Vec<GroupStats>,
}

/// Kurtosis and robust z-scores per layer group.
pub fn analyze(model: &str, layers: &[LayerRecord]) -> Result<ModelStats> {
    let groups = group_scores(layers)?
        .into_iter()
        .map(|(kind, ids, scores)| {
            let layers = ids
                .iter()
                .enumerate()
                .map(|(pos, &i)| {
                    Ok(LayerStats {
                        id: i,
                        name: layers[i].name.clone(),
                        kurtosis: layer_kurtosis(&layers[i])?,
                        score: scores.raw[pos],
                        z: scores.z[pos],
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(GroupStats {
                kind,
                median: scores.median,
                mad: scores.mad,
                layers,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelStats {
        version: super::eval::REPORT_VERSION,
        model: model.into(),
        groups,
    })
}
