use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterLayer, AdapterMode, ParamKind};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Which optimization level owns a parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    /// Magnitudes, trained on the validation split.
    Upper,
    /// Direction factors, trained on the training split.
    Lower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamRef {
    pub layer: usize,
    pub kind: ParamKind,
}

/// An ordered set of trainable tensors across all layers, flattened
/// layer-by-layer in the order of `members`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub level: Level,
    pub members: Vec<ParamRef>,
}

impl ParamGroup {
    /// All magnitude vectors of DoRA layers.
    pub fn upper(layers: &[AdapterLayer]) -> Self {
        let members = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.mode() == AdapterMode::Dora)
            .map(|(layer, _)| ParamRef {
                layer,
                kind: ParamKind::Magnitude,
            })
            .collect();
        Self {
            level: Level::Upper,
            members,
        }
    }

    /// All `B`, `A` factors (and dense deltas of full-mode layers).
    pub fn lower(layers: &[AdapterLayer]) -> Self {
        let mut members = Vec::new();
        for (layer, l) in layers.iter().enumerate() {
            for &kind in l.trainable_kinds() {
                if kind != ParamKind::Magnitude {
                    members.push(ParamRef { layer, kind });
                }
            }
        }
        Self {
            level: Level::Lower,
            members,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, r: ParamRef) -> bool {
        self.members.contains(&r)
    }

    fn tensor(layers: &[AdapterLayer], r: ParamRef) -> Result<&Tensor> {
        layers
            .get(r.layer)
            .and_then(|l| l.param(r.kind))
            .ok_or_else(|| Error::InvalidConfig(format!("no parameter {r:?}")))
    }

    /// Total number of scalars in the group.
    pub fn numel(&self, layers: &[AdapterLayer]) -> Result<usize> {
        self.members
            .iter()
            .map(|&r| Self::tensor(layers, r).map(Tensor::len))
            .sum()
    }

    pub fn gather(&self, layers: &[AdapterLayer]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for &r in &self.members {
            out.extend_from_slice(Self::tensor(layers, r)?.data());
        }
        Ok(out)
    }

    pub fn scatter(&self, layers: &mut [AdapterLayer], flat: &[f64]) -> Result<()> {
        let expected = self.numel(layers)?;
        if flat.len() != expected {
            return Err(Error::InvalidData(format!(
                "flat parameter length {} does not match group size {expected}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for &r in &self.members {
            let (rows, cols) = Self::tensor(layers, r)?.shape();
            let n = rows * cols;
            let t = Tensor::from_vec(rows, cols, flat[offset..offset + n].to_vec())?;
            layers[r.layer].set_param(r.kind, t)?;
            offset += n;
        }
        Ok(())
    }
}
