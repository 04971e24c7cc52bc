//! Network layers and the generator / discriminator pair.

mod arch;
mod discriminator;
mod generator;
mod layers;
mod spectral;

pub use arch::{receptive_field, ArchConfig, D_WIDTH_CAP};
pub use discriminator::{Discriminator, DiscriminatorOutput, PatchStack, LEAKY_SLOPE};
pub use generator::{Decoder, Encoder, Generator, GeneratorOutput, ADALIN_RHO_INIT};
pub use layers::{
    adalin, flatten_pooled, instance_norm, layer_norm, Conv2d, InstanceNorm, LayerInstanceNorm,
    Linear, Padding, Rho, NORM_EPS,
};
pub use spectral::{top_singular_value, SpectralNorm, SIGMA_FLOOR, WARM_START_ITERS};
