//! Segmentation network, tap-point selection and resolution adapters.

mod adapter;
mod net;
mod params;
mod taps;

pub use adapter::{AdapterKind, AdapterLayout, AdapterSet};
pub use net::{ForwardPass, NetConfig, SegNet, Site, TapActivations};
pub use params::ParamStore;
pub use taps::{resolve_taps, PositionBias, TapRule, TapSpec};
