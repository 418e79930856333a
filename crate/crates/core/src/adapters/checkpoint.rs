//! Versioned JSON checkpoints of adapter layers.
//!
//! Floats are written in shortest round-trip form, so a save/load cycle is
//! bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterLayer;
use crate::error::{Error, Result};

pub const LAYER_FORMAT: &str = "bidora-adapters";
pub const LAYER_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerFile {
    format: String,
    version: u32,
    layers: Vec<AdapterLayer>,
}

pub fn layers_to_json(layers: &[AdapterLayer]) -> Result<String> {
    Ok(serde_json::to_string(&LayerFile {
        format: LAYER_FORMAT.into(),
        version: LAYER_FORMAT_VERSION,
        layers: layers.to_vec(),
    })?)
}

pub fn layers_from_json(text: &str) -> Result<Vec<AdapterLayer>> {
    let file: LayerFile = serde_json::from_str(text)?;
    if file.format != LAYER_FORMAT || file.version != LAYER_FORMAT_VERSION {
        return Err(Error::InvalidData(format!(
            "unsupported checkpoint {} v{}",
            file.format, file.version
        )));
    }
    for layer in &file.layers {
        layer.validate()?;
    }
    Ok(file.layers)
}

pub fn save_layers(path: &Path, layers: &[AdapterLayer]) -> Result<()> {
    fs::write(path, layers_to_json(layers)?)?;
    Ok(())
}

pub fn load_layers(path: &Path) -> Result<Vec<AdapterLayer>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    layers_from_json(&fs::read_to_string(path)?)
}
