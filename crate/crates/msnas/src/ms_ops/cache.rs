//! Per-execution cache of stage features, keyed by (layer, stage).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::NodeId;

pub type LayerKey = usize;

#[derive(Debug, Clone, Copy)]
pub struct LayerStageEntry {
    /// The stage's own input to the layer (consumed by later input-reuse stages).
    pub input: NodeId,
    /// The layer's raw output for the stage (consumed by the output-reuse chain).
    pub output: NodeId,
}

/// Features produced by already-executed stages. Entries are written once and
/// never overwritten; a violation is an internal bug, not a recoverable state.
#[derive(Debug, Default)]
pub struct StageFeatureCache {
    entries: HashMap<(LayerKey, usize), LayerStageEntry>,
    resolution: Option<usize>,
    stages_done: usize,
}

impl StageFeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: LayerKey, stage: usize, entry: LayerStageEntry) {
        let prev = self.entries.insert((layer, stage), entry);
        assert!(prev.is_none(), "cache entry ({layer}, {stage}) written twice");
    }

    pub fn get(&self, layer: LayerKey, stage: usize) -> Result<LayerStageEntry> {
        self.entries.get(&(layer, stage)).copied().ok_or_else(|| {
            Error::Cache(format!("missing cache entry for layer {layer} stage {stage}"))
        })
    }

    pub fn contains(&self, layer: LayerKey, stage: usize) -> bool {
        self.entries.contains_key(&(layer, stage))
    }

    /// Number of network stages fully executed through this cache.
    pub fn stages_done(&self) -> usize {
        self.stages_done
    }

    pub fn expect_next_stage(&self, stage: usize) -> Result<()> {
        if stage != self.stages_done + 1 {
            return Err(Error::Cache(format!(
                "stage {stage} executed out of order (completed: {})",
                self.stages_done
            )));
        }
        Ok(())
    }

    pub fn mark_stage_done(&mut self, stage: usize) -> Result<()> {
        self.expect_next_stage(stage)?;
        self.stages_done = stage;
        Ok(())
    }

    pub fn check_resolution(&mut self, resolution: usize) -> Result<()> {
        match self.resolution {
            None => {
                self.resolution = Some(resolution);
                Ok(())
            }
            Some(r) if r == resolution => Ok(()),
            Some(r) => Err(Error::Cache(format!(
                "resolution mismatch: cache built at {r}, got {resolution}"
            ))),
        }
    }
}
