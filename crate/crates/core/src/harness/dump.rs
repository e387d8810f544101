//! On-disk model format: `manifest.json` plus one raw little-endian f32
//! blob per tensor, row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::SyntheticModel;
use crate::error::{Error, Result};
use crate::model::{CalibSet, LayerKind, LayerRecord};
use crate::selector::check_version;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: &str = "1.0";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub id: usize,
    pub name: String,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    pub weights: BTreeMap<String, TensorEntry>,
    pub calib_x: TensorEntry,
    pub calib_y: TensorEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub name: String,
    pub seed: u64,
    pub dtype: String,
    pub endianness: String,
    pub layers: Vec<LayerEntry>,
}

/// A loaded model with its manifest.
#[derive(Debug, Clone)]
pub struct ModelDump {
    pub manifest: Manifest,
    pub layers: Vec<LayerRecord>,
}

impl ModelDump {
    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(|l| l.kind).collect()
    }
}

fn entry(file: String, t: &Tensor) -> TensorEntry {
    TensorEntry {
        file,
        rows: t.rows(),
        cols: t.cols(),
    }
}

fn write_blob(dir: &Path, e: &TensorEntry, t: &Tensor) -> Result<()> {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let path = dir.join(&e.file);
    fs::write(&path, bytes).map_err(|err| Error::io(path, err))
}

/// Writes `layers` under `dir`, creating it if needed.
pub fn write_dump(
    dir: &Path,
    name: &str,
    seed: u64,
    layers: &[LayerRecord],
    profiles: Option<&[String]>,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        let mut weights = BTreeMap::new();
        for (wname, t) in &l.weights {
            let e = entry(format!("layer{i}.{wname}.bin"), t);
            write_blob(dir, &e, t)?;
            weights.insert(wname.clone(), e);
        }
        let calib_x = entry(format!("layer{i}.calib_x.bin"), &l.calib.x);
        write_blob(dir, &calib_x, &l.calib.x)?;
        let calib_y = entry(format!("layer{i}.calib_y.bin"), &l.calib.y);
        write_blob(dir, &calib_y, &l.calib.y)?;
        entries.push(LayerEntry {
            id: l.id,
            name: l.name.clone(),
            kind: l.kind,
            profile: profiles.and_then(|p| p.get(i).cloned()),
            weights,
            calib_x,
            calib_y,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION.into(),
        name: name.into(),
        seed,
        dtype: "f32".into(),
        endianness: "little".into(),
        layers: entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn write_synthetic(dir: &Path, model: &SyntheticModel) -> Result<Manifest> {
    write_dump(dir, &model.name, model.seed, &model.layers, Some(&model.profiles))
}

fn read_blob(dir: &Path, tensor: &str, e: &TensorEntry) -> Result<Tensor> {
    let path: PathBuf = dir.join(&e.file);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(err) if err.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingBlob {
                tensor: tensor.into(),
                path,
            })
        }
        Err(err) => return Err(Error::io(path, err)),
    };
    let expected = (e.rows * e.cols * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::BlobSize {
            tensor: tensor.into(),
            path,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue {
            tensor: tensor.into(),
            index,
            offset: index * 4,
        });
    }
    Tensor::new(e.rows, e.cols, data)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    check_version(&manifest.version, &path)?;
    if manifest.dtype != "f32" || manifest.endianness != "little" {
        return Err(Error::Data(format!(
            "{}: unsupported tensor encoding {} / {} (only f32 / little)",
            path.display(),
            manifest.dtype,
            manifest.endianness
        )));
    }
    Ok(manifest)
}

/// Reads and validates a model directory.
pub fn load_dump(dir: &Path) -> Result<ModelDump> {
    let manifest = load_manifest(dir)?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, l) in manifest.layers.iter().enumerate() {
        if l.id != i {
            return Err(Error::Data(format!(
                "layer ids must be 0..n-1 in order; entry {i} has id {}",
                l.id
            )));
        }
        let mut weights = BTreeMap::new();
        for (wname, e) in &l.weights {
            weights.insert(wname.clone(), read_blob(dir, &format!("{}.{wname}", l.name), e)?);
        }
        let x = read_blob(dir, &format!("{}.calib_x", l.name), &l.calib_x)?;
        let y = read_blob(dir, &format!("{}.calib_y", l.name), &l.calib_y)?;
        layers.push(LayerRecord::new(l.id, l.name.clone(), l.kind, weights, CalibSet { x, y })?);
    }
    if layers.is_empty() {
        return Err(Error::Data(format!("{}: model has no layers", dir.display())));
    }
    Ok(ModelDump { manifest, layers })
}
