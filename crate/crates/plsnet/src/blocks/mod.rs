//! Composite structures: dilated residual dense blocks, the encoder with
//! input reinforcement, the conv-upsample-merge decoder, and full network
//! assembly.

mod checkpoint;
mod drdb;
mod network;
mod params;
mod plan;
mod unit;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use drdb::{
    drdb_backward, drdb_forward, drdb_forward_checkpointed, drdb_forward_train, drdb_infer,
    CheckpointTrace, DrdbConfig, DrdbGrads, DrdbTrace, NaiveTrace, DrdbWeights,
};
pub use network::{
    decoder_forward, encoder_forward, plsnet_backward, plsnet_forward, plsnet_forward_train,
    plsnet_infer, plsnet_infer_with_taps, tap_names, NetTrace,
};
pub use params::{PlsNetGrads, PlsNetParams, TensorInfo, TensorRole};
pub use plan::{plan, PlanEntry};
pub use unit::{ConvUnit, ConvUnitGrads, ConvUnitTrace, SpatialConv};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Structural description of the whole network.
///
/// The default is the standard configuration: its channel schedule is
/// calibrated so that the total trainable parameter count lands on 0.25 M
/// (see the cost audit), with growth 12 and seven blocks split 1/2/4 over
/// the three downsampled levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Output classes (softmax channels).
    pub classes: usize,
    /// Growth rate of every dense block.
    pub growth: usize,
    /// Channels produced by the stem (level 0) and by each strided
    /// downsampling convolution (levels 1..=3), before input reinforcement.
    pub channels: [usize; 4],
    /// Dense blocks at levels 1, 2, 3.
    pub drdbs_per_level: [usize; 3],
    /// Re-concatenate the downsampled input after every downsampling stage.
    pub input_reinforcement: bool,
    /// Use depthwise-separable convolutions in place of regular ones.
    pub depthwise_separable: bool,
    /// Dense connectivity + residual learning inside blocks; plain
    /// convolution stacks when false.
    pub residual_dense: bool,
    /// Dilation rates of the four block layers.
    pub dilations: [usize; 4],
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            classes: 6,
            growth: 12,
            channels: [8, 16, 52, 132],
            drdbs_per_level: [1, 2, 4],
            input_reinforcement: true,
            depthwise_separable: true,
            residual_dense: true,
            dilations: [1, 2, 3, 4],
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Format(format!(
                "network needs at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.growth == 0 {
            return Err(Error::Format("growth rate must be positive".into()));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Format("channel schedule entries must be positive".into()));
        }
        if self.dilations.iter().any(|&r| r == 0) {
            return Err(Error::Format("dilation rates must be positive".into()));
        }
        Ok(())
    }

    /// A small configuration for fast desk-scale experiments and tests.
    pub fn small_test_config() -> Self {
        NetworkConfig {
            classes: 6,
            growth: 6,
            channels: [6, 12, 18, 24],
            drdbs_per_level: [1, 2, 4],
            ..NetworkConfig::default()
        }
    }
}
