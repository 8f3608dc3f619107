//! Network building blocks shared by the generators and discriminators.

mod checkpoint;
mod layers;
mod params;
mod patchgan;
pub mod spectral;

pub use checkpoint::Checkpoint;
pub use layers::{Activation, Conv, ConvSpec, Norm, NormKind, ResidualBlock, BN_EPS, BN_MOMENTUM, LEAKY_SLOPE};
pub use params::{Binder, Entry, EntryKind, Mode, ParamStore};
pub use patchgan::{PatchGan, PatchOutput};
pub use spectral::{spectral_normalize, SpectralState};
