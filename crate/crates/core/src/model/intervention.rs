// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::NeuronId;
use crate::error::{Error, Result};

/// Multiplier applied by [`EditMode::Enhance`].
pub const ENHANCE_FACTOR: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    /// Multiply by zero.
    Suppress,
    /// Multiply by [`ENHANCE_FACTOR`].
    Enhance,
    /// Overwrite with a constant.
    SetTo(f64),
    /// Multiply by a constant.
    Scale(f64),
}

impl EditMode {
    /// `(gain, offset)` such that the edited unit is `gain * natural + offset`.
    pub fn affine(self) -> (f64, f64) {
        match self {
            Self::Suppress => (0.0, 0.0),
            Self::Enhance => (ENHANCE_FACTOR, 0.0),
            Self::SetTo(v) => (0.0, v),
            Self::Scale(a) => (a, 0.0),
        }
    }
}

/// Per-neuron edits applied at every token position during a forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Intervention {
    edits: BTreeMap<NeuronId, EditMode>,
}

impl Intervention {
    pub fn new(targets: impl IntoIterator<Item = NeuronId>, mode: EditMode) -> Result<Self> {
        let edits: BTreeMap<_, _> = targets.into_iter().map(|id| (id, mode)).collect();
        if edits.is_empty() {
            return Err(Error::Config("intervention needs at least one target".into()));
        }
        Ok(Self { edits })
    }

    pub fn suppress(targets: impl IntoIterator<Item = NeuronId>) -> Result<Self> {
        Self::new(targets, EditMode::Suppress)
    }

    /// Adds edits for further neurons; a neuron may carry one mode only.
    pub fn with(mut self, targets: impl IntoIterator<Item = NeuronId>, mode: EditMode) -> Result<Self> {
        for id in targets {
            if let Some(prev) = self.edits.insert(id, mode) {
                if prev != mode {
                    return Err(Error::Config(format!("conflicting edit modes for neuron {id}")));
                }
            }
        }
        Ok(self)
    }

    pub fn targets(&self) -> impl Iterator<Item = NeuronId> + '_ {
        self.edits.keys().copied()
    }

    pub fn target_set(&self) -> BTreeSet<NeuronId> {
        self.edits.keys().copied().collect()
    }

    pub fn edits(&self) -> &BTreeMap<NeuronId, EditMode> {
        &self.edits
    }

    pub fn touches_layer(&self, layer: usize) -> bool {
        self.edits.keys().any(|id| id.layer == layer)
    }

    pub fn earliest_layer(&self) -> Option<usize> {
        self.edits.keys().map(|id| id.layer).min()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_targets_rejected() {
        assert!(Intervention::suppress(std::iter::empty()).is_err());
    }

    #[test]
    fn conflicting_modes_rejected() {
        let iv = Intervention::suppress([NeuronId::new(0, 1)]).unwrap();
        assert!(iv.clone().with([NeuronId::new(0, 1)], EditMode::Enhance).is_err());
        assert!(iv.with([NeuronId::new(0, 1)], EditMode::Suppress).is_ok());
    }
}
