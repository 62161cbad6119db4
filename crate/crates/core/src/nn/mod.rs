//! Parameter storage, forward sessions and reusable layers.

pub mod attention;
pub mod layers;
pub mod params;
pub mod session;

pub use attention::{ChannelGate, Csfem, Pmm, SpatialChannelAttention, SpatialGate};
pub use layers::{BatchNorm, Conv, ConvUnit, Dense, Path};
pub use params::{ParamKind, ParamStore};
pub use session::{apply_bn_updates, BnUpdate, Mode, Session};
