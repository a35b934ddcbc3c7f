mod batch;
mod config;
pub mod forward;
pub mod infer;
pub mod layers;
mod net;
mod params;

pub use batch::Batch;
pub use config::{param_count, LayerCombination, ModelConfig};
pub use forward::{forward_combination, EncoderStates};
pub use net::{LayerTrace, Net};
pub use params::{
    average_checkpoints, AttnSlots, DecoderLayerSlots, EncoderLayerSlots, FfnSlots, NormSlots, ParamSet, Parameters,
};
pub(crate) use params::{add_encoder_layer, add_norm, Init};
