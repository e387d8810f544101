//! Layer records shared by the transform, selection and evaluation code.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Stacked query/key/value projections.
    AttentionQkv,
    /// Concatenated gate/up projections.
    FfnGateUp,
}

impl LayerKind {
    pub const ALL: [LayerKind; 2] = [LayerKind::AttentionQkv, LayerKind::FfnGateUp];

    /// Weight tensor names a layer of this kind must carry, in column order.
    pub fn weight_names(self) -> &'static [&'static str] {
        match self {
            LayerKind::AttentionQkv => &["q", "k", "v"],
            LayerKind::FfnGateUp => &["gate_up"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::AttentionQkv => "attention_qkv",
            LayerKind::FfnGateUp => "ffn_gate_up",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The two transform families a layer can be assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Affine,
    Rotation,
}

impl TransformKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::Affine => "affine",
            TransformKind::Rotation => "rotation",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which bit-width a block of output columns is quantized with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightRole {
    Weight,
    Key,
    Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnBlock {
    pub width: usize,
    pub role: WeightRole,
}

impl ColumnBlock {
    pub fn single(width: usize) -> Vec<ColumnBlock> {
        vec![ColumnBlock {
            width,
            role: WeightRole::Weight,
        }]
    }
}

/// Calibration activations and their full-precision outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibSet {
    pub x: Tensor,
    pub y: Tensor,
}

impl CalibSet {
    pub fn from_activations(x: Tensor, w: &Tensor) -> Result<Self> {
        let y = matmul(&x, w)?;
        Ok(Self { x, y })
    }
}

/// One linear layer (or stacked projection group) with calibration data.
#[derive(Debug, Clone)]
pub struct LayerRecord {
    pub id: usize,
    pub name: String,
    pub kind: LayerKind,
    pub weights: BTreeMap<String, Tensor>,
    pub calib: CalibSet,
    combined: Tensor,
}

impl LayerRecord {
    /// Validates names and shapes; `calib.y` is taken as given.
    pub fn new(
        id: usize,
        name: impl Into<String>,
        kind: LayerKind,
        weights: BTreeMap<String, Tensor>,
        calib: CalibSet,
    ) -> Result<Self> {
        let name = name.into();
        let mut parts = Vec::new();
        for &w in kind.weight_names() {
            let t = weights.get(w).ok_or_else(|| {
                Error::Data(format!("layer {name}: missing weight matrix '{w}'"))
            })?;
            if t.rows() != calib.x.cols() {
                return Err(Error::Data(format!(
                    "layer {name}: weight '{w}' has input width {} but calibration activations have {}",
                    t.rows(),
                    calib.x.cols()
                )));
            }
            parts.push(t);
        }
        if let Some(extra) = weights.keys().find(|k| !kind.weight_names().contains(&k.as_str())) {
            return Err(Error::Data(format!(
                "layer {name}: unexpected weight matrix '{extra}' for {kind}"
            )));
        }
        let combined = Tensor::hcat(&parts)?;
        if calib.y.shape() != (calib.x.rows(), combined.cols()) {
            return Err(Error::Data(format!(
                "layer {name}: calibration outputs are {:?}, expected {:?}",
                calib.y.shape(),
                (calib.x.rows(), combined.cols())
            )));
        }
        Ok(Self {
            id,
            name,
            kind,
            weights,
            calib,
            combined,
        })
    }

    /// Convenience constructor computing `y = x * w` from the weights.
    pub fn with_activations(
        id: usize,
        name: impl Into<String>,
        kind: LayerKind,
        weights: BTreeMap<String, Tensor>,
        x: Tensor,
    ) -> Result<Self> {
        let name = name.into();
        let parts: Vec<&Tensor> = kind
            .weight_names()
            .iter()
            .map(|w| {
                weights
                    .get(*w)
                    .ok_or_else(|| Error::Data(format!("layer {name}: missing weight matrix '{w}'")))
            })
            .collect::<Result<_>>()?;
        let combined = Tensor::hcat(&parts)?;
        let calib = CalibSet::from_activations(x, &combined)?;
        Self::new(id, name, kind, weights, calib)
    }

    /// Single-matrix FFN layer, mostly for tests.
    pub fn ffn(id: usize, w: Tensor, x: Tensor) -> Result<Self> {
        let mut weights = BTreeMap::new();
        weights.insert("gate_up".to_string(), w);
        Self::with_activations(id, format!("layer{id}.ffn"), LayerKind::FfnGateUp, weights, x)
    }

    /// All projections stacked along the output axis.
    pub fn weight(&self) -> &Tensor {
        &self.combined
    }

    pub fn input_width(&self) -> usize {
        self.calib.x.cols()
    }

    pub fn output_width(&self) -> usize {
        self.combined.cols()
    }

    pub fn column_blocks(&self) -> Vec<ColumnBlock> {
        match self.kind {
            LayerKind::FfnGateUp => ColumnBlock::single(self.combined.cols()),
            LayerKind::AttentionQkv => ["q", "k", "v"]
                .iter()
                .zip([WeightRole::Weight, WeightRole::Key, WeightRole::Value])
                .map(|(name, role)| ColumnBlock {
                    width: self.weights[*name].cols(),
                    role,
                })
                .collect(),
        }
    }
}
