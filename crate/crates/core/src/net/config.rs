use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latents::{PriorSet, DEFAULT_TEMPERATURE};
use crate::mask_compose::{MaskNormalization, DEFAULT_LOGIT_BOUND, DEFAULT_SIGMA_BG, DEFAULT_SIGMA_FG};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Likelihood {
    /// Spatial Gaussian mixture over object and background components.
    #[default]
    Mixture,
    /// One Gaussian on the mask-weighted mean image.
    Gaussian,
}

/// Architecture and generative-model hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Channels of the three stride-2 encoder stages.
    pub encoder_channels: [usize; 3],
    /// `F`, channels of the quarter-resolution feature map.
    pub feature_channels: usize,
    /// Side of glimpses cropped from the feature map.
    pub feature_glimpse: usize,
    /// Side of glimpses cropped from the image (image-space ablation).
    pub image_glimpse: usize,
    /// Side of decoded object glimpses.
    pub object_glimpse: usize,
    pub glimpse_channels: usize,
    pub glimpse_code: usize,
    pub hidden_dim: usize,
    pub what_dim: usize,
    pub bg_dim: usize,
    pub bg_channels: usize,
    pub decoder_channels: usize,
    /// Discovery grid side `G`; `D = G²` proposals per step.
    pub grid_size: usize,
    pub slot_cap: usize,
    pub filter_threshold: f64,
    pub logit_bound: f64,
    /// Smallest box scale any pose can take.
    pub min_scale: f64,
    pub temperature: f64,
    /// Initial bias of the propagated presence head.
    pub pres_bias_init: f64,
    pub sigma_fg: f64,
    pub sigma_bg: f64,
    pub likelihood: Likelihood,
    pub mask_normalization: MaskNormalization,
    pub image_space_stn: bool,
    /// KL(prior ‖ posterior) for z_what and z_where.
    pub inclusive_kl: bool,
    pub priors: PriorSet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 64,
            image_width: 64,
            encoder_channels: [16, 32, 64],
            feature_channels: 64,
            feature_glimpse: 8,
            image_glimpse: 16,
            object_glimpse: 16,
            glimpse_channels: 64,
            glimpse_code: 128,
            hidden_dim: 128,
            what_dim: 32,
            bg_dim: 64,
            bg_channels: 32,
            decoder_channels: 32,
            grid_size: 8,
            slot_cap: 16,
            filter_threshold: 0.1,
            logit_bound: DEFAULT_LOGIT_BOUND,
            min_scale: 0.05,
            temperature: DEFAULT_TEMPERATURE,
            pres_bias_init: 2.0,
            sigma_fg: DEFAULT_SIGMA_FG,
            sigma_bg: DEFAULT_SIGMA_BG,
            likelihood: Likelihood::Mixture,
            mask_normalization: MaskNormalization::Softmax,
            image_space_stn: false,
            inclusive_kl: true,
            priors: PriorSet::default(),
        }
    }
}

fn is_pow2_at_least(v: usize, min: usize) -> bool {
    v >= min && v.is_power_of_two()
}

impl ModelConfig {
    /// Feature map size `(H/4, W/4)`.
    pub fn feature_hw(&self) -> (usize, usize) {
        (self.image_height / 4, self.image_width / 4)
    }

    pub fn num_proposals(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_height == 0 || self.image_height % 8 != 0 || self.image_width == 0 || self.image_width % 8 != 0 {
            return bad(format!("image size {}x{} must be a positive multiple of 8", self.image_height, self.image_width));
        }
        let (fh, fw) = self.feature_hw();
        if self.grid_size == 0 || fh % self.grid_size != 0 || fw % self.grid_size != 0 {
            return bad(format!("grid size {} must divide the {fh}x{fw} feature map", self.grid_size));
        }
        if !is_pow2_at_least(self.feature_glimpse, 2) || !is_pow2_at_least(self.image_glimpse, 4) {
            return bad("feature_glimpse and image_glimpse must be powers of two (>= 2 and >= 4)".into());
        }
        if !is_pow2_at_least(self.object_glimpse, 4) {
            return bad("object_glimpse must be a power of two >= 4".into());
        }
        let dims = [
            self.feature_channels,
            self.glimpse_channels,
            self.glimpse_code,
            self.hidden_dim,
            self.what_dim,
            self.bg_dim,
            self.bg_channels,
            self.decoder_channels,
            self.slot_cap,
        ];
        if dims.contains(&0) || self.encoder_channels.contains(&0) {
            return bad("layer widths, latent sizes and slot_cap must be positive".into());
        }
        if !(self.filter_threshold > 0.0 && self.filter_threshold < 1.0) {
            return bad(format!("filter_threshold {} outside (0, 1)", self.filter_threshold));
        }
        let min_allowed = 1.0 / self.image_height.min(self.image_width) as f64;
        if !(self.min_scale >= min_allowed && self.min_scale < 1.0) {
            return bad(format!("min_scale {} outside [{min_allowed}, 1)", self.min_scale));
        }
        if !(self.priors.where_scale > self.min_scale) {
            return bad("priors.where_scale must exceed min_scale".into());
        }
        if !(self.logit_bound > 0.0 && self.temperature > 0.0 && self.sigma_fg > 0.0 && self.sigma_bg > 0.0) {
            return bad("logit_bound, temperature and sigmas must be positive".into());
        }
        self.priors.validate()
    }
}
