use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerRecord};
use crate::tensor::{Seed, SplitMix64, Tensor};

/// Weight distribution of a synthetic layer. Every profile is scaled to
/// variance `1 / width` so layer outputs have comparable magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TailProfile {
    Gaussian,
    Uniform,
    Laplace,
    StudentT { nu: f64 },
    /// Gaussian, with `count` seeded input channels scaled by `magnitude`.
    GaussianWithChannelOutliers { magnitude: f64, count: usize },
}

impl fmt::Display for TailProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TailProfile::Gaussian => write!(f, "gaussian"),
            TailProfile::Uniform => write!(f, "uniform"),
            TailProfile::Laplace => write!(f, "laplace"),
            TailProfile::StudentT { nu } => write!(f, "student_t({nu})"),
            TailProfile::GaussianWithChannelOutliers { magnitude, count } => {
                write!(f, "gaussian_with_channel_outliers({magnitude}, {count})")
            }
        }
    }
}

impl TailProfile {
    fn validate(&self) -> Result<()> {
        match *self {
            TailProfile::StudentT { nu } if !(nu > 2.0) => Err(Error::InvalidArgument(format!(
                "student_t needs nu > 2 for finite variance, got {nu}"
            ))),
            TailProfile::GaussianWithChannelOutliers { magnitude, .. } if !(magnitude > 0.0 && magnitude.is_finite()) => {
                Err(Error::InvalidArgument(format!("outlier magnitude must be positive, got {magnitude}")))
            }
            _ => Ok(()),
        }
    }

    /// One unit-variance draw.
    fn draw(&self, r: &mut SplitMix64) -> f64 {
        match *self {
            TailProfile::Gaussian | TailProfile::GaussianWithChannelOutliers { .. } => r.normal(),
            TailProfile::Uniform => (2.0 * r.uniform() - 1.0) * 3f64.sqrt(),
            TailProfile::Laplace => r.laplace() / 2f64.sqrt(),
            TailProfile::StudentT { nu } => r.student_t(nu) / (nu / (nu - 2.0)).sqrt(),
        }
    }

    fn sample(&self, rows: usize, cols: usize, seed: Seed) -> Tensor {
        let mut r = seed.rng();
        let sd = 1.0 / (rows as f64).sqrt();
        let mut w = Tensor::from_fn(rows, cols, |_, _| (self.draw(&mut r) * sd) as f32);
        if let TailProfile::GaussianWithChannelOutliers { magnitude, count } = *self {
            for c in pick_channels(rows, count, &mut r) {
                for v in w.row_mut(c) {
                    *v = (*v as f64 * magnitude) as f32;
                }
            }
        }
        w
    }
}

/// `count` distinct channels out of `n`, seeded.
fn pick_channels(n: usize, count: usize, r: &mut SplitMix64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    r.shuffle(&mut idx);
    idx.truncate(count.min(n));
    idx.sort();
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationSpikes {
    pub count: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub width: usize,
    /// Output width of each projection; defaults to `width`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_width: Option<usize>,
    pub profile: TailProfile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_spikes: Option<ActivationSpikes>,
    /// Number of consecutive layers sharing this description.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub repeat: usize,
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

impl LayerSpec {
    pub fn new(kind: LayerKind, width: usize, profile: TailProfile) -> Self {
        Self {
            kind,
            width,
            out_width: None,
            profile,
            activation_spikes: None,
            repeat: 1,
        }
    }
}

pub const DEFAULT_TOKENS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tokens")]
    pub tokens: usize,
    pub layers: Vec<LayerSpec>,
}

fn default_name() -> String {
    "synthetic".into()
}

fn default_tokens() -> usize {
    DEFAULT_TOKENS
}

impl SyntheticSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Layer descriptions with `repeat` expanded.
    pub fn expanded(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .flat_map(|l| std::iter::repeat_n(LayerSpec { repeat: 1, ..l.clone() }, l.repeat))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let layers = self.expanded();
        if layers.is_empty() {
            return Err(Error::InvalidArgument("synthetic spec has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.width < 4 {
                return Err(Error::InvalidArgument(format!("layer {i}: width {} is below 4", l.width)));
            }
            if self.tokens < l.width {
                return Err(Error::InvalidArgument(format!(
                    "layer {i}: {} tokens is fewer than width {}",
                    self.tokens, l.width
                )));
            }
            if l.out_width == Some(0) {
                return Err(Error::InvalidArgument(format!("layer {i}: out_width must be positive")));
            }
            l.profile.validate()?;
        }
        Ok(())
    }
}

/// Layer name used in generated models, e.g. `layer3.ffn`.
pub fn layer_name(id: usize, kind: LayerKind) -> String {
    match kind {
        LayerKind::AttentionQkv => format!("layer{id}.attn"),
        LayerKind::FfnGateUp => format!("layer{id}.ffn"),
    }
}

/// A generated model and the profile each layer was drawn from.
#[derive(Debug, Clone)]
pub struct SyntheticModel {
    pub name: String,
    pub seed: u64,
    pub layers: Vec<LayerRecord>,
    pub profiles: Vec<String>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticModel> {
    spec.validate()?;
    let root = Seed(spec.seed);
    let mut layers = Vec::new();
    let mut profiles = Vec::new();
    for (id, l) in spec.expanded().into_iter().enumerate() {
        let ls = root.derive(id as u64);
        let out = l.out_width.unwrap_or(l.width);
        let mut weights = BTreeMap::new();
        for (k, &name) in l.kind.weight_names().iter().enumerate() {
            weights.insert(name.to_string(), l.profile.sample(l.width, out, ls.derive(k as u64)));
        }
        let mut r = ls.derive(100).rng();
        let mut x = Tensor::from_fn(spec.tokens, l.width, |_, _| r.normal() as f32);
        if let Some(sp) = l.activation_spikes {
            let channels = pick_channels(l.width, sp.count, &mut ls.derive(101).rng());
            for t in 0..x.rows() {
                let row = x.row_mut(t);
                for &c in &channels {
                    row[c] = (row[c] as f64 * sp.magnitude) as f32;
                }
            }
        }
        layers.push(LayerRecord::with_activations(id, layer_name(id, l.kind), l.kind, weights, x)?);
        profiles.push(l.profile.to_string());
    }
    Ok(SyntheticModel {
        name: spec.name.clone(),
        seed: spec.seed,
        layers,
        profiles,
    })
}
