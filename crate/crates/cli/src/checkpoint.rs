//! Model checkpoints: one STF1 tensor per parameter block plus a JSON index
//! mapping layer names to files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use noisyseg_core::model::{ModelParams, Network, CONV1, CONV2, CONV3};
use noisyseg_core::tensor::Tensor2D;

use crate::manifest::{read_json, write_json};
use crate::stf_io::{read_tensor2d, write_tensor2d};
use crate::{AppError, AppResult};

/// (name, rows, cols) of each parameter tensor; weights are stored as
/// (out_channels, everything-else) matrices.
fn layout() -> [(&'static str, usize, usize); 6] {
    [
        ("conv1.weight", CONV1.1, CONV1.0 * CONV1.2 * CONV1.2),
        ("conv1.bias", 1, CONV1.1),
        ("conv2.weight", CONV2.1, CONV2.0 * CONV2.2 * CONV2.2),
        ("conv2.bias", 1, CONV2.1),
        ("conv3.weight", CONV3.1, CONV3.0),
        ("conv3.bias", 1, CONV3.1),
    ]
}

pub fn save_model(params: &ModelParams, dir: &Path) -> AppResult<()> {
    fs::create_dir_all(dir)?;
    let mut index: BTreeMap<String, String> = BTreeMap::new();
    for ((name, rows, cols), tensor) in layout().into_iter().zip(params.tensors()) {
        let file = format!("{}.stf", name.replace('.', "_"));
        let t = Tensor2D::new(rows, cols, tensor.clone())
            .map_err(|e| AppError::data(format!("{name}: {e}")))?;
        write_tensor2d(&dir.join(&file), &t)?;
        index.insert(name.to_string(), file);
    }
    write_json(&dir.join("index.json"), &index)
}

pub fn load_model(dir: &Path) -> AppResult<ModelParams> {
    let index: BTreeMap<String, String> = read_json(&dir.join("index.json"))?;
    let mut params: ModelParams = Network::zeros();
    for ((name, rows, cols), tensor) in layout().into_iter().zip(params.tensors_mut()) {
        let file = index
            .get(name)
            .ok_or_else(|| AppError::data(format!("checkpoint index missing {name}")))?;
        let t = read_tensor2d(&dir.join(file))?;
        if t.height() != rows || t.width() != cols {
            return Err(AppError::data(format!(
                "{name}: expected {rows}x{cols}, found {}x{}",
                t.height(),
                t.width()
            )));
        }
        tensor.copy_from_slice(t.data());
    }
    Ok(params)
}
