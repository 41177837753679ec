//! Dataset directory format.
//!
//! One directory per split:
//!
//! ```text
//! manifest.json   {"n", "k", "d", "split", "seed"}
//! features.bin    n*d little-endian f32, row-major
//! labels.csv      n rows of k comma-separated 0/1 values
//! ```
//!
//! Class counts are always recomputed from the labels.
//! A bundle directory holds `train/`, `val/`, `test/` and `hierarchy.json`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{MultiLabelDataset, Split};
use crate::error::{Error, Result};
use crate::hierarchy::{parse_hierarchy, HierarchyTree};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub split: Split,
    pub seed: u64,
}

pub fn save_dataset(ds: &MultiLabelDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        n: ds.len(),
        k: ds.num_classes(),
        d: ds.feature_dim(),
        split: ds.split(),
        seed: ds.seed(),
    };
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&manifest_path, e))?;
    fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;

    let features_path = dir.join("features.bin");
    let mut bytes = Vec::with_capacity(ds.len() * ds.feature_dim() * 4);
    for x in ds.features().iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&features_path, bytes).map_err(|e| Error::io(&features_path, e))?;

    let labels_path = dir.join("labels.csv");
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&labels_path)
        .map_err(|e| csv_error(&labels_path, e))?;
    for row in ds.labels().rows() {
        writer
            .write_record(row.iter().map(|y| if *y == 0 { "0" } else { "1" }))
            .map_err(|e| csv_error(&labels_path, e))?;
    }
    writer.flush().map_err(|e| Error::io(&labels_path, e))?;
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Malformed(format!("{}: {e}", path.display()))
}

fn read_nonempty(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            reason: "file is empty".into(),
        });
    }
    Ok(bytes)
}

pub fn load_dataset(dir: &Path) -> Result<MultiLabelDataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&read_nonempty(&manifest_path)?)
        .map_err(|e| Error::json(&manifest_path, e))?;

    let features_path = dir.join("features.bin");
    let bytes = read_nonempty(&features_path)?;
    let expected = manifest.n * manifest.d * 4;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: features_path,
            reason: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Shape(format!(
            "{}: {} bytes does not match manifest {}x{}",
            features_path.display(),
            bytes.len(),
            manifest.n,
            manifest.d
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let features = Array2::from_shape_vec((manifest.n, manifest.d), values)
        .map_err(|e| Error::Shape(e.to_string()))?;

    let labels_path = dir.join("labels.csv");
    let text = read_nonempty(&labels_path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_slice());
    let mut labels = Array2::<u8>::zeros((manifest.n, manifest.k));
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(&labels_path, e))?;
        if i >= manifest.n {
            return Err(Error::Shape(format!(
                "{}: more than {} label rows",
                labels_path.display(),
                manifest.n
            )));
        }
        if record.len() != manifest.k {
            return Err(Error::Shape(format!(
                "{}: row {i} has {} columns, manifest k = {}",
                labels_path.display(),
                record.len(),
                manifest.k
            )));
        }
        for (j, field) in record.iter().enumerate() {
            labels[[i, j]] = match field.trim() {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::Malformed(format!(
                        "{}: row {i} column {j}: expected 0 or 1, found {other:?}",
                        labels_path.display()
                    )))
                }
            };
        }
        rows += 1;
    }
    if rows < manifest.n {
        return Err(Error::Truncated {
            path: labels_path,
            reason: format!("expected {} rows, found {rows}", manifest.n),
        });
    }
    MultiLabelDataset::new(features, labels, manifest.split, manifest.seed)
}

/// All three splits plus the label hierarchy.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub train: MultiLabelDataset,
    pub val: MultiLabelDataset,
    pub test: MultiLabelDataset,
    pub tree: HierarchyTree,
}

impl DatasetBundle {
    pub fn split(&self, split: Split) -> &MultiLabelDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for ds in [&bundle.train, &bundle.val, &bundle.test] {
        save_dataset(ds, &dir.join(ds.split().as_str()))?;
    }
    let path = dir.join("hierarchy.json");
    fs::write(&path, bundle.tree.to_json() + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let load = |split: Split| -> Result<MultiLabelDataset> {
        let ds = load_dataset(&dir.join(split.as_str()))?;
        if ds.split() != split {
            return Err(Error::Shape(format!(
                "{}: manifest split is {}, expected {split}",
                dir.join(split.as_str()).display(),
                ds.split()
            )));
        }
        Ok(ds)
    };
    let train = load(Split::Train)?;
    let val = load(Split::Val)?;
    let test = load(Split::Test)?;
    let path: PathBuf = dir.join("hierarchy.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let tree = parse_hierarchy(&text)?;
    for ds in [&val, &test] {
        if ds.num_classes() != train.num_classes() || ds.feature_dim() != train.feature_dim() {
            return Err(Error::Shape(format!(
                "{} split is {}x{} (k x d), train is {}x{}",
                ds.split(),
                ds.num_classes(),
                ds.feature_dim(),
                train.num_classes(),
                train.feature_dim()
            )));
        }
    }
    if tree.leaf_count() != train.num_classes() {
        return Err(Error::Shape(format!(
            "hierarchy has {} leaves, dataset has {} classes",
            tree.leaf_count(),
            train.num_classes()
        )));
    }
    Ok(DatasetBundle { train, val, test, tree })
}
