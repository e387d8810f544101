use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{LayerKind, TransformKind};

/// Major version written into plan files; loaders reject other majors.
pub const PLAN_VERSION: &str = "1.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Heuristic,
    Learned,
    FixedAffine,
    FixedRotation,
    Oracle,
    Random { seed: u64 },
}

impl Provenance {
    pub fn label(&self) -> String {
        match self {
            Provenance::Heuristic => "heuristic".into(),
            Provenance::Learned => "learned".into(),
            Provenance::FixedAffine => "fixed-affine".into(),
            Provenance::FixedRotation => "fixed-rotation".into(),
            Provenance::Oracle => "oracle".into(),
            Provenance::Random { seed } => format!("random-{seed}"),
        }
    }
}

/// Threshold that may be an infinite sentinel; JSON stores the sentinels as
/// the strings `"+inf"` / `"-inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold(pub f64);

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("+inf")
        } else if self.0 == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Threshold(v)),
            Raw::Str(s) if s == "+inf" => Ok(Threshold(f64::INFINITY)),
            Raw::Str(s) if s == "-inf" => Ok(Threshold(f64::NEG_INFINITY)),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad threshold {s:?}"))),
        }
    }
}

/// Per-group quantities the heuristic used.
#[derive(Debug, Clone, PartialEq)]
pub struct HeuristicDiagnostics {
    pub tau_high: f64,
    pub tau_low: f64,
    pub beta: f64,
    pub k_high: usize,
    pub k_low: usize,
    pub l: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanGroup {
    pub kind: LayerKind,
    pub layer_ids: Vec<usize>,
    pub diagnostics: Option<HeuristicDiagnostics>,
}

/// Transform assignment for every layer of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionPlan {
    /// Indexed by layer id.
    pub assignments: Vec<TransformKind>,
    pub provenance: Provenance,
    pub groups: Vec<PlanGroup>,
}

/// Groups of layer ids by kind, in model order; empty groups are omitted.
pub fn group_layers(kinds: &[LayerKind]) -> Vec<(LayerKind, Vec<usize>)> {
    LayerKind::ALL
        .iter()
        .map(|&k| {
            (
                k,
                kinds
                    .iter()
                    .enumerate()
                    .filter(|(_, &lk)| lk == k)
                    .map(|(i, _)| i)
                    .collect::<Vec<_>>(),
            )
        })
        .filter(|(_, ids)| !ids.is_empty())
        .collect()
}

impl SelectionPlan {
    /// Plan without diagnostics, grouped by layer kind.
    pub fn from_assignments(kinds: &[LayerKind], assignments: Vec<TransformKind>, provenance: Provenance) -> Self {
        assert_eq!(kinds.len(), assignments.len());
        let groups = group_layers(kinds)
            .into_iter()
            .map(|(kind, layer_ids)| PlanGroup {
                kind,
                layer_ids,
                diagnostics: None,
            })
            .collect();
        Self {
            assignments,
            provenance,
            groups,
        }
    }

    pub fn fixed(kinds: &[LayerKind], t: TransformKind) -> Self {
        let prov = match t {
            TransformKind::Affine => Provenance::FixedAffine,
            TransformKind::Rotation => Provenance::FixedRotation,
        };
        Self::from_assignments(kinds, vec![t; kinds.len()], prov)
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn rotation_count(&self, ids: &[usize]) -> usize {
        ids.iter()
            .filter(|&&i| self.assignments[i] == TransformKind::Rotation)
            .count()
    }

    /// Checks group coverage and the heuristic invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.assignments.len();
        let mut seen = vec![false; n];
        for g in &self.groups {
            for &i in &g.layer_ids {
                if i >= n || seen[i] {
                    return Err(Error::Data(format!(
                        "plan group {} lists layer {i} out of range or twice",
                        g.kind
                    )));
                }
                seen[i] = true;
            }
            let is_heuristic = self.provenance == Provenance::Heuristic;
            match (&g.diagnostics, is_heuristic) {
                (Some(d), true) => {
                    if self.rotation_count(&g.layer_ids) != d.l {
                        return Err(Error::Data(format!(
                            "plan group {}: {} rotations but budget L = {}",
                            g.kind,
                            self.rotation_count(&g.layer_ids),
                            d.l
                        )));
                    }
                }
                (None, false) => {}
                _ => {
                    return Err(Error::Data(format!(
                        "plan group {}: diagnostics must be present exactly for heuristic plans",
                        g.kind
                    )))
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Data("plan groups do not cover every layer".into()));
        }
        Ok(())
    }

    pub fn group_records(&self) -> Vec<PlanGroupRecord> {
        self.groups
            .iter()
            .map(|g| {
                let d = g.diagnostics.as_ref();
                PlanGroupRecord {
                    kind: g.kind,
                    layer_ids: g.layer_ids.clone(),
                    assignments: g.layer_ids.iter().map(|&i| self.assignments[i]).collect(),
                    tau_high: d.map(|d| Threshold(d.tau_high)),
                    tau_low: d.map(|d| Threshold(d.tau_low)),
                    beta: d.map(|d| d.beta),
                    k_high: d.map(|d| d.k_high),
                    k_low: d.map(|d| d.k_low),
                    l: d.map(|d| d.l),
                }
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        let file = PlanFile {
            version: PLAN_VERSION.into(),
            groups: self.group_records(),
            provenance: self.provenance,
        };
        let mut s = serde_json::to_string_pretty(&file).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let file: PlanFile = serde_json::from_str(text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        check_version(&file.version, path)?;
        let n = file.groups.iter().map(|g| g.layer_ids.len()).sum();
        let mut assignments = vec![None; n];
        let mut groups = Vec::new();
        for g in file.groups {
            if g.assignments.len() != g.layer_ids.len() {
                return Err(Error::Data(format!(
                    "{}: group {} has {} ids but {} assignments",
                    path.display(),
                    g.kind,
                    g.layer_ids.len(),
                    g.assignments.len()
                )));
            }
            for (&i, &a) in g.layer_ids.iter().zip(&g.assignments) {
                let slot = assignments.get_mut(i).ok_or_else(|| {
                    Error::Data(format!("{}: layer id {i} out of range", path.display()))
                })?;
                *slot = Some(a);
            }
            let diagnostics = match (g.tau_high, g.tau_low, g.beta, g.k_high, g.k_low, g.l) {
                (Some(th), Some(tl), Some(beta), Some(k_high), Some(k_low), Some(l)) => {
                    Some(HeuristicDiagnostics {
                        tau_high: th.0,
                        tau_low: tl.0,
                        beta,
                        k_high,
                        k_low,
                        l,
                    })
                }
                (None, None, None, None, None, None) => None,
                _ => {
                    return Err(Error::Data(format!(
                        "{}: group {} has partial diagnostics",
                        path.display(),
                        g.kind
                    )))
                }
            };
            groups.push(PlanGroup {
                kind: g.kind,
                layer_ids: g.layer_ids,
                diagnostics,
            });
        }
        let assignments = assignments
            .into_iter()
            .enumerate()
            .map(|(i, a)| a.ok_or_else(|| Error::Data(format!("{}: layer {i} unassigned", path.display()))))
            .collect::<Result<Vec<_>>>()?;
        let plan = Self {
            assignments,
            provenance: file.provenance,
            groups,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

/// Accepts any `1.x` version string.
pub(crate) fn check_version(found: &str, path: &Path) -> Result<()> {
    let major = found.split('.').next().and_then(|m| m.parse::<u32>().ok());
    if major != Some(1) {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: found.to_string(),
            supported: 1,
        });
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    version: String,
    groups: Vec<PlanGroupRecord>,
    provenance: Provenance,
}

/// Serialized form of one plan group; diagnostics are `null` unless the
/// plan came from the heuristic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanGroupRecord {
    pub kind: LayerKind,
    pub layer_ids: Vec<usize>,
    pub assignments: Vec<TransformKind>,
    pub tau_high: Option<Threshold>,
    pub tau_low: Option<Threshold>,
    pub beta: Option<f64>,
    pub k_high: Option<usize>,
    pub k_low: Option<usize>,
    pub l: Option<usize>,
}

/// Matching assignments between two plans: `(count, fraction)`.
pub fn agreement(a: &SelectionPlan, b: &SelectionPlan) -> Result<(usize, f64)> {
    agreement_of(&a.assignments, &b.assignments)
}

pub fn agreement_of(a: &[TransformKind], b: &[TransformKind]) -> Result<(usize, f64)> {
    if a.len() != b.len() {
        return Err(Error::Data(format!(
            "plans have different lengths ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let matches = a.iter().zip(b).filter(|(x, y)| x == y).count();
    let frac = if a.is_empty() {
        1.0
    } else {
        matches as f64 / a.len() as f64
    };
    Ok((matches, frac))
}

#[cfg(test)]
mod tests {
    use super::*;
    use TransformKind::{Affine as A, Rotation as R};

    #[test]
    fn agreement_cases() {
        let p = vec![A, R, R, A];
        assert_eq!(agreement_of(&p, &p).unwrap(), (4, 1.0));
        let q: Vec<_> = p.iter().map(|t| if *t == A { R } else { A }).collect();
        assert_eq!(agreement_of(&p, &q).unwrap(), (0, 0.0));
        let mut a = vec![A; 32];
        let b = a.clone();
        for i in [1, 9, 17, 30] {
            a[i] = R;
        }
        assert_eq!(agreement_of(&a, &b).unwrap(), (28, 0.875));
        assert!(agreement_of(&a, &b[..3]).is_err());
    }

    #[test]
    fn threshold_sentinels_round_trip() {
        let kinds = [LayerKind::FfnGateUp; 3];
        let mut plan = SelectionPlan::from_assignments(&kinds, vec![R, A, A], Provenance::Heuristic);
        plan.groups[0].diagnostics = Some(HeuristicDiagnostics {
            tau_high: 1.5,
            tau_low: f64::NEG_INFINITY,
            beta: 1.0,
            k_high: 1,
            k_low: 0,
            l: 1,
        });
        let json = plan.to_json();
        assert!(json.contains("\"-inf\""));
        let back = SelectionPlan::from_json(&json, Path::new("p.json")).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn rejects_unknown_major_and_broken_plans() {
        let kinds = [LayerKind::AttentionQkv, LayerKind::FfnGateUp];
        let plan = SelectionPlan::fixed(&kinds, A);
        let json = plan.to_json().replace("\"1.0\"", "\"2.0\"");
        assert!(matches!(
            SelectionPlan::from_json(&json, Path::new("p.json")),
            Err(Error::UnsupportedVersion { .. })
        ));
        let mut bad = plan.clone();
        bad.provenance = Provenance::Heuristic;
        assert!(bad.validate().is_err());
        let text = plan.to_json();
        let back = SelectionPlan::from_json(&text, Path::new("p.json")).unwrap();
        assert_eq!(back, plan);
        assert_eq!(back.groups.len(), 2);
    }
}
