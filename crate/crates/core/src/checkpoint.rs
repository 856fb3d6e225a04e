//! Single-file checkpoints: a safetensors archive whose header metadata
//! carries a JSON manifest describing the architecture.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::ArrayD;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cvae::{CvaeArch, CvaeConfig, CvaeError, CvaeModel};
use crate::flow::{FlowConfig, FlowError, FlowModel};
use crate::invariance::{InvarianceError, PartitionSpec};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed archive: {0}")]
    Format(String),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    WrongKind { expected: ModelKind, found: ModelKind },
    #[error("checkpoint input shape {found:?} does not match {expected:?}")]
    DimensionMismatch { expected: [usize; 3], found: [usize; 3] },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Cvae(#[from] CvaeError),
    #[error(transparent)]
    Partition(#[from] InvarianceError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cflow,
    Cvae,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Cflow => "cflow",
            ModelKind::Cvae => "cvae",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type", content = "config")]
pub enum Architecture {
    Flow(FlowConfig),
    Cvae(CvaeConfig),
}

/// Summary fields for quick inspection, plus the full architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub model_kind: ModelKind,
    pub input_shape: [usize; 3],
    pub levels: usize,
    pub depth: usize,
    pub channels: usize,
    /// Size of the sensitive part; for a cVAE, the label width.
    pub zb: usize,
    pub seed: u64,
    pub architecture: Architecture,
}

const MANIFEST_KEY: &str = "manifest";

fn manifest_for_flow(flow: &FlowModel, partition: &PartitionSpec) -> CheckpointManifest {
    let c = flow.config();
    CheckpointManifest {
        model_kind: ModelKind::Cflow,
        input_shape: c.input_shape,
        levels: c.levels,
        depth: c.depth,
        channels: c.hidden_channels,
        zb: partition.sensitive(),
        seed: flow.seed(),
        architecture: Architecture::Flow(c.clone()),
    }
}

fn manifest_for_cvae(cvae: &CvaeModel) -> CheckpointManifest {
    let c = cvae.config();
    let (levels, channels) = match c.arch {
        CvaeArch::Conv { base_channels, levels } => (levels, base_channels),
        CvaeArch::Dense { hidden } => (1, hidden),
    };
    CheckpointManifest {
        model_kind: ModelKind::Cvae,
        input_shape: c.input_shape,
        levels,
        depth: 1,
        channels,
        zb: c.s_classes,
        seed: cvae.seed(),
        architecture: Architecture::Cvae(c.clone()),
    }
}

fn write(path: &Path, manifest: &CheckpointManifest, tensors: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
        .iter()
        .map(|(name, t)| (name.clone(), t.iter().flat_map(|v| v.to_le_bytes()).collect(), t.shape().to_vec()))
        .collect();
    let views = bytes
        .iter()
        .map(|(name, data, shape)| {
            TensorView::new(Dtype::F64, shape.clone(), data).map(|v| (name.as_str(), v))
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| CheckpointError::Format(e.to_string()))?;
    let meta = HashMap::from([(MANIFEST_KEY.to_string(), serde_json::to_string(manifest).expect("manifest serialises"))]);
    let archive = safetensors::serialize(views, Some(meta)).map_err(|e| CheckpointError::Format(e.to_string()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|source| CheckpointError::Io { path: parent.display().to_string(), source })?;
    }
    std::fs::write(path, archive).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

/// Reads the manifest and all tensors of an archive.
pub fn read(path: &Path) -> Result<(CheckpointManifest, BTreeMap<String, ArrayD<f64>>)> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    let format = |e: &dyn std::fmt::Display| CheckpointError::Format(e.to_string());
    let (_, metadata) = SafeTensors::read_metadata(&bytes).map_err(|e| format(&e))?;
    let manifest_text = metadata
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| CheckpointError::Format("missing manifest".into()))?;
    let manifest: CheckpointManifest = serde_json::from_str(manifest_text).map_err(|e| format(&e))?;
    let archive = SafeTensors::deserialize(&bytes).map_err(|e| format(&e))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in archive.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(CheckpointError::Format(format!("tensor {name} has dtype {:?}", view.dtype())));
        }
        let values: Vec<f64> = view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let array = ArrayD::from_shape_vec(view.shape().to_vec(), values).map_err(|e| format(&e))?;
        tensors.insert(name, array);
    }
    Ok((manifest, tensors))
}

fn check_shape(manifest: &CheckpointManifest, expected: Option<[usize; 3]>) -> Result<()> {
    match expected {
        Some(expected) if expected != manifest.input_shape => {
            Err(CheckpointError::DimensionMismatch { expected, found: manifest.input_shape })
        }
        _ => Ok(()),
    }
}

pub fn save_flow(path: &Path, flow: &FlowModel, partition: &PartitionSpec) -> Result<()> {
    write(path, &manifest_for_flow(flow, partition), &flow.tensors())
}

/// Restores a flow and its partition. With `expected_shape`, an archive for
/// a different input shape is rejected.
pub fn load_flow(path: &Path, expected_shape: Option<[usize; 3]>) -> Result<(FlowModel, PartitionSpec)> {
    let (manifest, tensors) = read(path)?;
    let Architecture::Flow(config) = &manifest.architecture else {
        return Err(CheckpointError::WrongKind { expected: ModelKind::Cflow, found: manifest.model_kind });
    };
    check_shape(&manifest, expected_shape)?;
    let flow = FlowModel::from_tensors(config.clone(), manifest.seed, &tensors)?;
    let partition = PartitionSpec::new(flow.dim(), manifest.zb)?;
    Ok((flow, partition))
}

pub fn save_cvae(path: &Path, cvae: &CvaeModel) -> Result<()> {
    write(path, &manifest_for_cvae(cvae), &cvae.tensors())
}

pub fn load_cvae(path: &Path, expected_shape: Option<[usize; 3]>) -> Result<CvaeModel> {
    let (manifest, tensors) = read(path)?;
    let Architecture::Cvae(config) = &manifest.architecture else {
        return Err(CheckpointError::WrongKind { expected: ModelKind::Cvae, found: manifest.model_kind });
    };
    check_shape(&manifest, expected_shape)?;
    Ok(CvaeModel::from_tensors(config.clone(), manifest.seed, &tensors)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn tiny_flow() -> FlowModel {
        let config = FlowConfig { input_shape: [4, 1, 1], hidden_channels: 8, ..FlowConfig::adult() };
        FlowModel::new(config, 7).unwrap()
    }

    #[test]
    fn flow_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flow.safetensors");
        let flow = tiny_flow();
        let partition = PartitionSpec::new(4, 1).unwrap();
        save_flow(&path, &flow, &partition).unwrap();
        let (loaded, p) = load_flow(&path, Some([4, 1, 1])).unwrap();
        assert_eq!(p, partition);
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 / 7.0 - 0.5);
        assert_eq!(flow.forward(x.view()).unwrap().0, loaded.forward(x.view()).unwrap().0);
    }

    #[test]
    fn mismatched_shape_and_kind_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flow.safetensors");
        save_flow(&path, &tiny_flow(), &PartitionSpec::new(4, 2).unwrap()).unwrap();
        assert!(matches!(load_flow(&path, Some([5, 1, 1])), Err(CheckpointError::DimensionMismatch { .. })));
        assert!(matches!(load_cvae(&path, None), Err(CheckpointError::WrongKind { .. })));
        let (manifest, _) = read(&path).unwrap();
        assert_eq!((manifest.levels, manifest.depth, manifest.zb, manifest.seed), (1, 1, 2, 7));
    }
}
