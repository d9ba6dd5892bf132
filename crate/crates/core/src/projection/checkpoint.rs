//! Checkpoints are a JSON header plus one CEMB weight file per layer, stored
//! next to the header as `<header file name>.w<layer>.cemb`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Activation, HeadKind, HeadSpec, ProjectionError, ProjectionModel};
use crate::embstore::{read_matrix, write_matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: HeadKind,
    pub d: usize,
    pub k: usize,
    pub leaky_slope: f64,
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    pub dropout_rate: f64,
    pub seed: u64,
    pub epoch: usize,
    pub val_spearman: Option<f64>,
    /// Weight file names, relative to the header's directory.
    pub weights: Vec<String>,
}

fn weight_name(path: &Path, layer: usize) -> String {
    let base = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    format!("{base}.w{layer}.cemb")
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or_else(|| Path::new("")).join(name)
}

/// Writes the header to `path` and the weights (narrowed to `f32`) beside it.
pub fn write_checkpoint(
    path: &Path,
    model: &ProjectionModel,
    seed: u64,
    epoch: usize,
    val_spearman: Option<f64>,
) -> Result<CheckpointHeader, ProjectionError> {
    let spec = model.spec();
    let mut weights = Vec::new();
    for (l, w) in model.layers().iter().enumerate() {
        let name = weight_name(path, l);
        let data: Vec<f32> = w.iter().map(|&x| x as f32).collect();
        write_matrix(&sibling(path, &name), w.ncols(), &data)?;
        weights.push(name);
    }
    let header = CheckpointHeader {
        kind: spec.kind,
        d: model.input_dim(),
        k: model.output_dim(),
        leaky_slope: spec.leaky_slope,
        activation: spec.activation,
        hidden_dim: (spec.kind == HeadKind::Nonlinear2).then_some(spec.hidden_dim),
        dropout_rate: model.dropout_rate(),
        seed,
        epoch,
        val_spearman,
        weights,
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, &header)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(header)
}

pub fn read_checkpoint(path: &Path) -> Result<(ProjectionModel, CheckpointHeader), ProjectionError> {
    let header: CheckpointHeader = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let spec = HeadSpec {
        kind: header.kind,
        k: header.k,
        activation: header.activation,
        leaky_slope: header.leaky_slope,
        hidden_dim: header.hidden_dim.unwrap_or(super::DEFAULT_HIDDEN_DIM),
    };
    let mut layers = Vec::with_capacity(header.weights.len());
    for name in &header.weights {
        let (rows, cols, data) = read_matrix(&sibling(path, name))?;
        let w = Array2::from_shape_vec((rows, cols), data.into_iter().map(f64::from).collect())
            .map_err(|e| ProjectionError::Checkpoint(e.to_string()))?;
        layers.push(w);
    }
    let model = ProjectionModel::from_weights(spec, header.dropout_rate, layers)?;
    if model.input_dim() != header.d {
        return Err(ProjectionError::DimMismatch {
            expected: header.d,
            got: model.input_dim(),
        });
    }
    Ok((model, header))
}
