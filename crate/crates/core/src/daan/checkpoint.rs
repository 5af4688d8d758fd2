use std::fs;
use std::path::Path;

use ndcore::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use super::{DaanConfig, DaanModel};
use crate::error::{Error, Result};
use crate::radiosim::ImageShape;

pub const CHECKPOINT_VERSION: &str = "1";

const MANIFEST_FILE: &str = "manifest.json";
const PARAMS_FILE: &str = "params.bin";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into `params.bin`.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: String,
    config: DaanConfig,
    input_shape: ImageShape,
    mu: f64,
    epoch: usize,
    total_elements: usize,
    /// Parameters, then batch-norm running means and variances.
    tensors: Vec<TensorEntry>,
}

/// Writes `manifest.json` and `params.bin` (little-endian f64).
pub fn save_checkpoint<T: Scalar>(model: &DaanModel<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[T]| {
        tensors.push(TensorEntry {
            name,
            shape,
            offset: values.len(),
        });
        values.extend(data.iter().map(|v| v.as_f64()));
    };
    for p in model.params().iter() {
        push(p.name.clone(), p.value.shape().to_vec(), p.value.data());
    }
    for (i, s) in model.bn_stats().iter().enumerate() {
        push(
            format!("block{i}.bn.running_mean"),
            vec![s.mean.len()],
            &s.mean,
        );
        push(
            format!("block{i}.bn.running_var"),
            vec![s.var.len()],
            &s.var,
        );
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION.to_string(),
        config: model.config().clone(),
        input_shape: model.input_shape(),
        mu: model.mu(),
        epoch: model.epochs_trained(),
        total_elements: values.len(),
        tensors,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    let blob: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let path = dir.join(PARAMS_FILE);
    fs::write(&path, blob).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<DaanModel<T>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::invalid(
            "checkpoint",
            format!(
                "format version {} (expected {CHECKPOINT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    let path = dir.join(PARAMS_FILE);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if blob.len() != manifest.total_elements * 8 {
        return Err(Error::shape(
            "params.bin",
            format!("{} elements", manifest.total_elements),
            format!("{} elements ({} bytes)", blob.len() / 8, blob.len()),
        ));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    // The architecture fixes names and shapes; the seed only affects the
    // values, which are all overwritten.
    let mut model = DaanModel::<T>::new(manifest.config, manifest.input_shape, 0)?;
    let n_params = model.params().len();
    let n_bn = model.bn_stats().len();
    if manifest.tensors.len() != n_params + 2 * n_bn {
        return Err(Error::shape(
            "checkpoint tensors",
            n_params + 2 * n_bn,
            manifest.tensors.len(),
        ));
    }
    let read = |entry: &TensorEntry, name: &str, shape: &[usize]| -> Result<Vec<T>> {
        if entry.name != name || entry.shape != shape {
            return Err(Error::shape(
                format!("checkpoint tensor {name}"),
                format!("{name} {shape:?}"),
                format!("{} {:?}", entry.name, entry.shape),
            ));
        }
        let len: usize = shape.iter().product();
        let slice = values
            .get(entry.offset..entry.offset + len)
            .ok_or_else(|| {
                Error::shape(
                    format!("checkpoint tensor {name}"),
                    "in-range offset",
                    entry.offset,
                )
            })?;
        Ok(slice.iter().map(|&v| T::lit(v)).collect())
    };
    for (i, entry) in manifest.tensors[..n_params].iter().enumerate() {
        let p = model.params_mut().get_mut(ndcore::ParamId(i));
        let data = read(entry, &p.name.clone(), p.value.shape())?;
        p.value = Tensor::new(p.value.shape().to_vec(), data)?;
    }
    for (i, pair) in manifest.tensors[n_params..].chunks(2).enumerate() {
        let stats = &mut model.bn_stats_mut()[i];
        let shape = [stats.mean.len()];
        stats.mean = read(&pair[0], &format!("block{i}.bn.running_mean"), &shape)?;
        stats.var = read(&pair[1], &format!("block{i}.bn.running_var"), &shape)?;
    }
    model.mu = manifest.mu;
    model.epochs_trained = manifest.epoch;
    Ok(model)
}
