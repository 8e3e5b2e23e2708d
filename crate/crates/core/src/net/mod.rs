//! The feature extractor (spectral adapters, frozen core, adapters), the
//! segmentation head and the generative head, with reverse-mode gradients
//! through every trainable path.

pub mod config;
pub mod model;
pub mod params;
pub mod tape;

pub use config::{AdapterConfig, CoreConfig, HeadConfig, ModelConfig};
pub use model::{update_running_stats, BnMode, DomainShape, Flow, FlowOut, Network, SegmentMap, FROZEN_PREFIX};
pub use params::{Param, ParamStore, Role};
pub use tape::{BatchStats, Tape, Var};
