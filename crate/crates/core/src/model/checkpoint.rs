//! Checkpoint directory: `manifest.json` (tensor shapes, activation, seed,
//! optimizer step) and `params.bin` (little-endian f64 values in canonical
//! tensor order).

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Activation, Linear, ModelBundle};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: String,
    pub activation: Activation,
    pub extractor_layers: usize,
    pub heads: usize,
    pub tensors: Vec<TensorShape>,
    pub seed: u64,
    pub step: u64,
}

const FORMAT: &str = "hiertail-checkpoint-v1";

fn shapes(model: &ModelBundle) -> Vec<TensorShape> {
    let mut out = Vec::new();
    let mut push = |prefix: String, l: &Linear| {
        out.push(TensorShape {
            name: format!("{prefix}.weight"),
            rows: l.outputs(),
            cols: l.inputs(),
        });
        out.push(TensorShape {
            name: format!("{prefix}.bias"),
            rows: l.outputs(),
            cols: 1,
        });
    };
    for (i, l) in model.extractor.iter().enumerate() {
        push(format!("extractor.{i}"), l);
    }
    push("classifier".into(), &model.classifier);
    for (i, l) in model.heads.iter().enumerate() {
        push(format!("head.{i}"), l);
    }
    out
}

pub fn save_checkpoint(model: &ModelBundle, dir: &Path, seed: u64, step: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        dtype: "f64-le".into(),
        activation: model.activation,
        extractor_layers: model.extractor.len(),
        heads: model.heads.len(),
        tensors: shapes(model),
        seed,
        step,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    let mut bytes = Vec::new();
    for t in model.tensors() {
        for x in t {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let path = dir.join("params.bin");
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelBundle, CheckpointManifest)> {
    let path = dir.join("manifest.json");
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if text.is_empty() {
        return Err(Error::Truncated { path, reason: "file is empty".into() });
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.format != FORMAT || manifest.dtype != "f64-le" {
        return Err(Error::Malformed(format!(
            "{}: unsupported checkpoint format {} / {}",
            path.display(),
            manifest.format,
            manifest.dtype
        )));
    }
    let expected_tensors = 2 * (manifest.extractor_layers + 1 + manifest.heads);
    if manifest.tensors.len() != expected_tensors || manifest.extractor_layers == 0 {
        return Err(Error::Shape(format!(
            "{}: {} tensors listed, layer counts imply {expected_tensors}",
            path.display(),
            manifest.tensors.len()
        )));
    }

    let path = dir.join("params.bin");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let total: usize = manifest.tensors.iter().map(|t| t.rows * t.cols).sum();
    if bytes.len() < total * 8 {
        return Err(Error::Truncated {
            path,
            reason: format!("expected {} bytes, found {}", total * 8, bytes.len()),
        });
    }
    if bytes.len() > total * 8 {
        return Err(Error::Shape(format!("{}: trailing bytes after parameters", path.display())));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut layers = Vec::with_capacity(manifest.tensors.len() / 2);
    for pair in manifest.tensors.chunks_exact(2) {
        let (w, b) = (&pair[0], &pair[1]);
        if b.rows != w.rows || b.cols != 1 {
            return Err(Error::Shape(format!("bias {} does not match weight {}", b.name, w.name)));
        }
        let weight = Array2::from_shape_vec((w.rows, w.cols), values.by_ref().take(w.rows * w.cols).collect())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let bias = Array1::from_iter(values.by_ref().take(b.rows));
        layers.push(Linear { weight, bias });
    }
    let heads = layers.split_off(manifest.extractor_layers + 1);
    let classifier = layers.pop().expect("classifier present");
    let model = ModelBundle::from_layers(layers, classifier, heads, manifest.activation)?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut spec = ModelSpec::mlp(5, &[7, 3], 4);
        spec.head_widths = vec![2, 1];
        let model = ModelBundle::init(&spec, 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path(), 17, 99).unwrap();
        let (back, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(manifest.step, 99);
        let bits = |m: &ModelBundle| -> Vec<u64> { m.tensors().iter().flat_map(|t| t.iter().map(|x| x.to_bits())).collect() };
        assert_eq!(bits(&model), bits(&back));
        assert_eq!(back.spec(), spec);
    }

    #[test]
    fn truncated_params() {
        let model = ModelBundle::init(&ModelSpec::mlp(2, &[2], 2), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path(), 1, 0).unwrap();
        fs::write(dir.path().join("params.bin"), [0u8; 16]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Truncated { .. })));
    }
}
