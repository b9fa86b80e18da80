//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use candle_core::DType;
use glad_core::config::ModelConfig;
use glad_core::datasets::SequenceRecord;
use glad_core::model::GladModel;
use glad_core::synthetic::{make_synthetic_sequence, SyntheticSceneConfig};
use glad_core::Result;

/// Untrained desk-scale model; timings do not depend on the weights.
pub fn desk_model(seed: u64) -> Result<Arc<GladModel>> {
    Ok(Arc::new(GladModel::new(
        &ModelConfig::desk(),
        DType::F32,
        seed,
    )?))
}

pub fn scene(seed: u64) -> SequenceRecord {
    make_synthetic_sequence(seed, &SyntheticSceneConfig::default())
}
