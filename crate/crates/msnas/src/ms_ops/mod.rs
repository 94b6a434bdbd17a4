//! Multi-stage convolution primitives, residual blocks, and network assembly.

pub mod block;
pub mod cache;
pub mod conv;
pub mod network;
pub mod weights;

pub use block::{ActiveStage, BlockWeights, MsBlock, NORM_EPS};
pub use cache::{LayerKey, LayerStageEntry, StageFeatureCache};
pub use conv::{msconv_forward, ConvStageSpec, MsConvWeights, ReuseType};
pub use network::{HeadLayer, MsNetwork, StageOutput, StagePrediction, StemLayer};
pub use weights::{DwStep, ExecCtx, WeightSrc};
