use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, RunningStats};
use super::spec::BackboneSpec;
use crate::blob::{create_dir, read_blob, read_toml, write_blob, write_toml, Dtype};
use crate::engine::Array;
use crate::error::{Error, Result};

const FORMAT: u32 = 1;
pub const MODEL_MANIFEST: &str = "manifest.toml";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    format: u32,
    name: String,
    seed: u64,
    epochs: usize,
    classes: usize,
    tensors: Vec<TensorEntry>,
    spec: BackboneSpec,
}

fn blob_name(tensor: &str) -> String {
    format!("{tensor}.bin")
}

/// Writes `model` to `dir` as a manifest plus one raw blob per tensor.
pub fn save_model(model: &Model, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut tensors = Vec::new();
    for (name, p) in model.param_names().iter().zip(model.params()) {
        let sha256 = write_blob(&dir.join(blob_name(name)), p.data(), Dtype::F64)?;
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: p.shape().to_vec(),
            sha256,
        });
    }
    for (path, r) in model.bn_names().iter().zip(model.running()) {
        for (suffix, v) in [("running_mean", &r.mean), ("running_var", &r.var)] {
            let name = format!("{path}.{suffix}");
            let sha256 = write_blob(&dir.join(blob_name(&name)), v, Dtype::F64)?;
            tensors.push(TensorEntry {
                name,
                shape: vec![v.len()],
                sha256,
            });
        }
    }
    let manifest = ModelManifest {
        format: FORMAT,
        name: model.name().to_string(),
        seed: model.seed(),
        epochs: model.epochs_trained,
        classes: model.classes(),
        tensors,
        spec: model.spec().clone(),
    };
    write_toml(&dir.join(MODEL_MANIFEST), &manifest)
}

/// Loads a model saved by [`save_model`], verifying every blob's size and hash.
pub fn load_model(dir: &Path) -> Result<Model> {
    let mpath = dir.join(MODEL_MANIFEST);
    if !mpath.exists() {
        return Err(Error::MissingArtifact {
            stage: "pretrain",
            path: mpath,
        });
    }
    let m: ModelManifest = read_toml(&mpath)?;
    if m.format != FORMAT {
        return Err(Error::corrupt(&mpath, format!("unsupported format {}", m.format)));
    }
    if m.spec.name != m.name || m.spec.classes != m.classes {
        return Err(Error::corrupt(&mpath, "manifest header disagrees with its spec"));
    }
    let mut model = Model::build(&m.spec, m.seed)?;
    let find = |name: &str| {
        m.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::corrupt(&mpath, format!("tensor `{name}` not listed")))
    };
    let load = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let entry = find(name)?;
        if entry.shape != shape {
            return Err(Error::corrupt(
                &mpath,
                format!("tensor `{name}` has shape {:?}, expected {shape:?}", entry.shape),
            ));
        }
        read_blob(
            &dir.join(blob_name(name)),
            shape.iter().product(),
            Dtype::F64,
            Some(&entry.sha256),
        )
    };
    let mut params = Vec::with_capacity(model.params().len());
    for (name, p) in model.param_names().iter().zip(model.params()) {
        params.push(Array::new(p.shape().to_vec(), load(name, p.shape())?)?);
    }
    let mut running = Vec::with_capacity(model.bn_count());
    for (path, r) in model.bn_names().iter().zip(model.running()) {
        running.push(RunningStats {
            mean: load(&format!("{path}.running_mean"), &[r.mean.len()])?,
            var: load(&format!("{path}.running_var"), &[r.var.len()])?,
        });
    }
    model.set_state(params, running)?;
    model.epochs_trained = m.epochs;
    Ok(model)
}
