use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Downsampling factor of the analysis transform (four stride-2 stages).
pub const LATENT_STRIDE: usize = 16;

/// Architecture of the codec network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent channels `M`.
    pub latent_channels: usize,
    /// Hyper-latent channels `N`.
    pub hyper_channels: usize,
    /// Internal width of the current-slice analysis/synthesis stacks.
    pub width: usize,
    /// Channels of each encoder-side inter-slice context `E1..E3`.
    pub enc_context: usize,
    /// Channels of each decoder-side inter-slice context `D1, D2`.
    pub dec_context: usize,
    /// Channels of the inter-slice latent `L_F`.
    pub inter_latent: usize,
    /// Width of the reconstruction head.
    pub recon_width: usize,
    /// Depth of the recurrent inter-slice buffer.
    pub buffer_channels: usize,
    /// Number of channel groups `K`.
    pub groups: usize,
    /// Width of the spatial and channel context features.
    pub context_width: usize,
    /// Hidden width of the entropy-parameter network.
    pub param_hidden: usize,
    /// Checkerboard spatial context.
    pub checkerboard: bool,
    /// Channel-wise context across groups.
    pub channelwise: bool,
    /// Inter-slice auxiliary path (`f_a`, `f_s`, `L_F`).
    pub auxiliary: bool,
}

impl ModelConfig {
    /// Full-size widths: 192-channel latents and hyper-latents, 16-channel buffer.
    pub fn full() -> Self {
        ModelConfig {
            latent_channels: 192,
            hyper_channels: 192,
            width: 192,
            enc_context: 32,
            dec_context: 32,
            inter_latent: 64,
            recon_width: 32,
            buffer_channels: 16,
            groups: 4,
            context_width: 96,
            param_hidden: 192,
            checkerboard: true,
            channelwise: true,
            auxiliary: true,
        }
    }

    /// Desk-scale widths: everything but the buffer depth scaled by 1/6.
    pub fn desk() -> Self {
        ModelConfig {
            latent_channels: 32,
            hyper_channels: 32,
            width: 32,
            enc_context: 6,
            dec_context: 6,
            inter_latent: 11,
            recon_width: 6,
            buffer_channels: 16,
            groups: 4,
            context_width: 16,
            param_hidden: 32,
            checkerboard: true,
            channelwise: true,
            auxiliary: true,
        }
    }

    /// Tiny widths (≤ 8 channels) for gradient checks.
    pub fn debug() -> Self {
        ModelConfig {
            latent_channels: 8,
            hyper_channels: 8,
            width: 8,
            enc_context: 4,
            dec_context: 4,
            inter_latent: 4,
            recon_width: 4,
            buffer_channels: 4,
            groups: 4,
            context_width: 4,
            param_hidden: 8,
            checkerboard: true,
            channelwise: true,
            auxiliary: true,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "desk" | "smoke" => Some(Self::desk()),
            "debug" => Some(Self::debug()),
            _ => None,
        }
    }

    pub fn without_checkerboard(mut self) -> Self {
        self.checkerboard = false;
        self
    }

    pub fn without_channelwise(mut self) -> Self {
        self.channelwise = false;
        self
    }

    pub fn without_auxiliary(mut self) -> Self {
        self.auxiliary = false;
        self
    }

    /// Channel groups actually used; one group when channel context is off.
    pub fn effective_groups(&self) -> usize {
        if self.channelwise {
            self.groups
        } else {
            1
        }
    }

    pub fn group_channels(&self) -> usize {
        self.latent_channels / self.effective_groups()
    }

    /// Input channels of the entropy-parameter network.
    pub fn param_inputs(&self) -> usize {
        let mut n = 2 * self.latent_channels;
        if self.checkerboard {
            n += self.context_width;
        }
        if self.channelwise && self.effective_groups() > 1 {
            n += self.context_width;
        }
        if self.auxiliary {
            n += self.inter_latent;
        }
        n
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.latent_channels,
            self.hyper_channels,
            self.width,
            self.enc_context,
            self.dec_context,
            self.inter_latent,
            self.recon_width,
            self.buffer_channels,
            self.groups,
            self.context_width,
            self.param_hidden,
        ];
        if widths.contains(&0) {
            return Err(Error::config("all channel widths must be positive"));
        }
        if self.latent_channels % self.effective_groups() != 0 {
            return Err(Error::config(format!(
                "{} latent channels do not split into {} groups",
                self.latent_channels,
                self.effective_groups()
            )));
        }
        if self.latent_channels % 2 != 0 {
            return Err(Error::config("latent channels must be even"));
        }
        Ok(())
    }
}

/// Spatial sizes derived from a padded slice size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || height % LATENT_STRIDE != 0 || width % LATENT_STRIDE != 0 {
            return Err(Error::shape(format!(
                "slice {}x{} is not a positive multiple of {}",
                height, width, LATENT_STRIDE
            )));
        }
        Ok(Geometry { height, width })
    }

    /// Size at `1/2^level` resolution.
    pub fn scaled(&self, level: u32) -> (usize, usize) {
        (self.height >> level, self.width >> level)
    }

    pub fn latent(&self) -> (usize, usize) {
        self.scaled(4)
    }

    /// Hyper-latent size: two further stride-2 stages, rounding up.
    pub fn hyper(&self) -> (usize, usize) {
        let (h, w) = self.latent();
        (h.div_ceil(2).div_ceil(2), w.div_ceil(2).div_ceil(2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [ModelConfig::full(), ModelConfig::desk(), ModelConfig::debug()] {
            c.validate().unwrap();
            assert_eq!(c.group_channels() * c.groups, c.latent_channels);
        }
        assert_eq!(ModelConfig::desk().without_channelwise().effective_groups(), 1);
    }

    #[test]
    fn geometry() {
        let g = Geometry::new(64, 48).unwrap();
        assert_eq!(g.latent(), (4, 3));
        assert_eq!(g.hyper(), (1, 1));
        assert_eq!(Geometry::new(256, 256).unwrap().hyper(), (4, 4));
        assert!(Geometry::new(250, 256).is_err());
    }
}
