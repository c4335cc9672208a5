//! Audio-visual bottleneck Conformer (AVBC) and the downstream fusion encoder.
//!
//! Each AVBC layer runs one Conformer block per modality over that modality's
//! tokens followed by the shared bottleneck tokens. The two updated copies of
//! the bottleneck are averaged, so everything one modality learns about the
//! other passes through `K` vectors.

mod avbc;
mod bottleneck;
mod cost;
mod encoder;

pub use avbc::{Avbc, AvbcLayer, BottleneckUpdate, LayerOutput};
pub use bottleneck::{init_bottleneck, BottleneckState, BOTTLENECK_INIT_STD};
pub use cost::attention_cost;
pub use encoder::FusionEncoder;
