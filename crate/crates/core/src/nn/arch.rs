use crate::attention::SE_RATIO;
use crate::edge::EdgeKernel;
use crate::error::{config_err, Result};

/// Shape hyperparameters shared by both generators and both discriminators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub image_size: usize,
    /// Width of the first generator downsampling conv; doubles per level.
    pub base_channels: usize,
    pub n_down: usize,
    /// Residual blocks in the encoder and, separately, in the decoder.
    pub n_res_blocks: usize,
    pub d_base_channels: usize,
    pub d_local_down: usize,
    pub d_global_down: usize,
    pub edge_kernel: EdgeKernel,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_size: 256,
            base_channels: 32,
            n_down: 3,
            n_res_blocks: 4,
            d_base_channels: 32,
            d_local_down: 3,
            d_global_down: 5,
            edge_kernel: EdgeKernel::Sobel,
        }
    }
}

/// Discriminator width cap as a multiple of its base width.
pub const D_WIDTH_CAP: usize = 8;

impl ArchConfig {
    /// Smallest configuration that still exercises every block.
    pub fn tiny() -> Self {
        ArchConfig {
            image_size: 8,
            base_channels: 4,
            n_down: 2,
            n_res_blocks: 1,
            d_base_channels: 4,
            d_local_down: 1,
            d_global_down: 1,
            edge_kernel: EdgeKernel::Sobel,
        }
    }

    /// Output channels of generator downsampling level `i`.
    pub fn encoder_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    pub fn latent_channels(&self) -> usize {
        self.encoder_channels(self.n_down.saturating_sub(1))
    }

    /// Output channels of discriminator conv `i` (downsampling convs first,
    /// then the stride-1 conv).
    pub fn disc_channels(&self, i: usize) -> usize {
        self.d_base_channels << i.min(D_WIDTH_CAP.trailing_zeros() as usize)
    }

    /// Side of the logit grid a stack with `downs` stride-2 convs produces.
    pub fn patch_grid(&self, downs: usize) -> Option<usize> {
        let mut s = self.image_size;
        for _ in 0..downs {
            if s < 2 || s % 2 != 0 {
                return None;
            }
            s /= 2;
        }
        s.checked_sub(2).filter(|&g| g >= 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_down == 0 {
            return Err(config_err!("generator needs at least one downsampling level"));
        }
        if self.base_channels == 0 || self.d_base_channels == 0 {
            return Err(config_err!("channel widths must be positive"));
        }
        let factor = 1usize << self.n_down;
        if self.image_size == 0 || self.image_size % factor != 0 {
            return Err(config_err!(
                "image size {} is not divisible by {factor}",
                self.image_size
            ));
        }
        if self.image_size / factor < 2 {
            return Err(config_err!(
                "image size {} leaves a 1x1 latent after {} downsamplings",
                self.image_size,
                self.n_down
            ));
        }
        if self.latent_channels() % SE_RATIO != 0 {
            return Err(config_err!(
                "latent width {} must be a multiple of {SE_RATIO}",
                self.latent_channels()
            ));
        }
        for (label, downs) in [("local", self.d_local_down), ("global", self.d_global_down)] {
            if downs == 0 {
                return Err(config_err!("{label} discriminator needs at least one downsampling"));
            }
            if self.disc_channels(downs) % SE_RATIO != 0 {
                return Err(config_err!(
                    "{label} discriminator width {} must be a multiple of {SE_RATIO}",
                    self.disc_channels(downs)
                ));
            }
            if self.patch_grid(downs).is_none() {
                return Err(config_err!(
                    "{label} discriminator with {downs} downsamplings has no output at size {}",
                    self.image_size
                ));
            }
        }
        Ok(())
    }
}

/// Receptive field of a chain of `(kernel, stride)` convolutions.
pub fn receptive_field(layers: &[(usize, usize)]) -> usize {
    layers
        .iter()
        .rev()
        .fold(1, |rf, &(k, s)| (rf - 1) * s + k)
}
