use candle_core::{DType, Device, Module, Tensor, Var};
use candle_nn::{linear, Conv2d, Linear, VarBuilder, VarMap};

use super::config::ModelConfig;
use super::layers::{conv, fill_var, init_weights, split_last, ConvLstm, ConvLstmState, GlimpseEncoder, GruCell, UpDecoder};
use crate::error::{Error, Result};
use crate::latents::DiagonalGaussian;
use crate::mask_compose::{clamp_logits, softplus, stn_crop_unchecked, stn_place_unchecked};

/// Quarter-resolution feature map, stored as `[1, F, H/4, W/4]`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub features: Tensor,
}

impl FeatureMap {
    pub fn hw(&self) -> (usize, usize) {
        let d = self.features.dims();
        (d[2], d[3])
    }
}

/// Decoded object glimpses.
#[derive(Debug, Clone)]
pub struct ObjectDecoding {
    /// `[N, 3, g, g]` in `[0, 1]`
    pub appearance: Tensor,
    /// `[N, g, g]`, bounded by the configured logit bound
    pub logits: Tensor,
}

#[derive(Debug, Clone)]
struct Encoder {
    stem: Conv2d,
    down2: Conv2d,
    down3: Conv2d,
    fuse: Conv2d,
    lstm: ConvLstm,
}

#[derive(Debug, Clone)]
struct BackgroundEncoder {
    convs: Vec<Conv2d>,
    head: Linear,
}

/// The full model: sequence encoder, propagation and discovery branches,
/// object and background decoders. Weights live in one `VarMap`.
pub struct ApexNet {
    pub config: ModelConfig,
    varmap: VarMap,
    device: Device,
    dtype: DType,
    encoder: Encoder,
    pub(crate) patch_enc: GlimpseEncoder,
    pub(crate) glimpse_enc: GlimpseEncoder,
    pub(crate) where_rnn: GruCell,
    pub(crate) where_head: Linear,
    pub(crate) what_rnn: GruCell,
    pub(crate) what_head: Linear,
    pub(crate) pres_rnn: GruCell,
    pub(crate) pres_head: Linear,
    pub(crate) disc_feat: Conv2d,
    pub(crate) disc_where: Linear,
    pub(crate) disc_pres: Linear,
    obj_dec: UpDecoder,
    bg_enc: BackgroundEncoder,
    bg_dec: UpDecoder,
}

impl std::fmt::Debug for ApexNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ApexNet").field("config", &self.config).field("dtype", &self.dtype).finish_non_exhaustive()
    }
}

impl ApexNet {
    /// Builds a model with weights drawn deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, device);
        let c = &config;
        let [c1, c2, c3] = c.encoder_channels;
        let f = c.feature_channels;
        let encoder = Encoder {
            stem: conv(3, c1, 3, 2, vb.pp("encoder.stem"))?,
            down2: conv(c1, c2, 3, 2, vb.pp("encoder.down2"))?,
            down3: conv(c2, c3, 3, 2, vb.pp("encoder.down3"))?,
            fuse: conv(c1 + c2 + c3, f, 1, 1, vb.pp("encoder.fuse"))?,
            lstm: ConvLstm::new(f, f, vb.pp("encoder.lstm"))?,
        };
        let (src_c, src_side) = if c.image_space_stn { (3, c.image_glimpse) } else { (f, c.feature_glimpse) };
        let code = c.glimpse_code;
        let patch_enc = GlimpseEncoder::new(src_c, src_side, c.glimpse_channels, code, vb.pp("patch_enc"))?;
        let glimpse_enc = GlimpseEncoder::new(src_c, src_side, c.glimpse_channels, code, vb.pp("glimpse_enc"))?;
        let (a, hd) = (c.what_dim, c.hidden_dim);
        let where_rnn = GruCell::new(code + a + 4, hd, vb.pp("where_rnn"))?;
        let where_head = linear(hd, 8, vb.pp("where_head"))?;
        let what_rnn = GruCell::new(code + a, hd, vb.pp("what_rnn"))?;
        let what_head = linear(hd, 2 * a, vb.pp("what_head"))?;
        let pres_rnn = GruCell::new(code + a + 1, hd, vb.pp("pres_rnn"))?;
        let pres_head = linear(hd, 1, vb.pp("pres_head"))?;
        let disc_feat = conv(f, code, 1, 1, vb.pp("disc_feat"))?;
        let disc_where = linear(code, 8, vb.pp("disc_where"))?;
        let disc_pres = linear(code + a + 4, 1, vb.pp("disc_pres"))?;
        let obj_stages = (c.object_glimpse / 4).trailing_zeros() as usize;
        let obj_dec = UpDecoder::new(a, (4, 4), obj_stages, c.decoder_channels, 4, vb.pp("obj_dec"))?;
        let mut bg_convs = Vec::new();
        let mut ch = 4;
        for i in 0..3 {
            bg_convs.push(conv(ch, c.bg_channels, 3, 2, vb.pp(format!("bg_enc.conv{i}")))?);
            ch = c.bg_channels;
        }
        let (h8, w8) = (c.image_height / 8, c.image_width / 8);
        let bg_head = linear(ch * h8 * w8, 2 * c.bg_dim, vb.pp("bg_enc.head"))?;
        let bg_dec = UpDecoder::new(c.bg_dim, (h8, w8), 3, c.bg_channels, 3, vb.pp("bg_dec"))?;
        init_weights(&varmap, seed)?;
        fill_var(&varmap, "pres_head.bias", c.pres_bias_init)?;
        Ok(ApexNet {
            config,
            varmap,
            device: device.clone(),
            dtype,
            encoder,
            patch_enc,
            glimpse_enc,
            where_rnn,
            where_head,
            what_rnn,
            what_head,
            pres_rnn,
            pres_head,
            disc_feat,
            disc_where,
            disc_pres,
            obj_dec,
            bg_enc: BackgroundEncoder { convs: bg_convs, head: bg_head },
            bg_dec,
        })
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// All trainable variables, sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("varmap lock poisoned");
        let mut v: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites a variable; the shape must match.
    pub fn set_var(&self, name: &str, value: &Tensor) -> Result<()> {
        let data = self.varmap.data().lock().expect("varmap lock poisoned");
        let var = data.get(name).ok_or_else(|| Error::Checkpoint(format!("unknown variable {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!("{name}: shape {:?} vs stored {:?}", var.dims(), value.dims())));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    fn check_frame(&self, x: &Tensor) -> Result<Tensor> {
        let (h, w) = (self.config.image_height, self.config.image_width);
        let x = if x.rank() == 3 { x.unsqueeze(0)? } else { x.clone() };
        if x.dims() != [1, 3, h, w] {
            return Err(Error::Shape(format!("frame {:?}, expected [3, {h}, {w}]", x.dims())));
        }
        Ok(x.to_dtype(self.dtype)?)
    }

    /// One encoder step on a `[3, H, W]` frame.
    pub fn encode_sequence_step(
        &self,
        x_t: &Tensor,
        memory: Option<&ConvLstmState>,
    ) -> Result<(FeatureMap, ConvLstmState)> {
        let x = self.check_frame(x_t)?;
        let e = &self.encoder;
        let s1 = e.stem.forward(&x)?.relu()?;
        let s2 = e.down2.forward(&s1)?.relu()?;
        let s3 = e.down3.forward(&s2)?.relu()?;
        let (_, _, h4, w4) = s2.dims4()?;
        let fused = Tensor::cat(&[&s1.avg_pool2d(2)?, &s2, &s3.upsample_nearest2d(h4, w4)?], 1)?;
        let fused = e.fuse.forward(&fused)?.relu()?;
        let state = match memory {
            Some(m) => m.clone(),
            None => e.lstm.zero_state(&fused)?,
        };
        let next = e.lstm.forward(&fused, &state)?;
        Ok((FeatureMap { features: next.h.clone() }, next))
    }

    /// Glimpses for `poses` from the feature map or, in the image-space
    /// variant, from the frame.
    pub(crate) fn crop_glimpses(&self, e: &FeatureMap, x: &Tensor, poses: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if c.image_space_stn {
            let x = self.check_frame(x)?;
            stn_crop_unchecked(&x, poses, (c.image_glimpse, c.image_glimpse))
        } else {
            stn_crop_unchecked(&e.features, poses, (c.feature_glimpse, c.feature_glimpse))
        }
    }

    /// Decodes `[N, A]` codes into appearance glimpses and bounded mask logits.
    pub fn decode_object(&self, z_what: &Tensor) -> Result<ObjectDecoding> {
        let (n, a) = z_what.dims2()?;
        if a != self.config.what_dim {
            return Err(Error::Shape(format!("z_what has {a} dims, expected {}", self.config.what_dim)));
        }
        let g = self.config.object_glimpse;
        let out = self.obj_dec.forward(z_what)?;
        let appearance = candle_nn::ops::sigmoid(&out.narrow(1, 0, 3)?)?;
        let logits = clamp_logits(&out.narrow(1, 3, 1)?.reshape((n, g, g))?, self.config.logit_bound)?;
        Ok(ObjectDecoding { appearance, logits })
    }

    /// Posterior over `z_bg` from the frame and the background mask.
    pub fn encode_background(&self, x_t: &Tensor, bg_mask: &Tensor) -> Result<DiagonalGaussian> {
        let x = self.check_frame(x_t)?;
        let (h, w) = (self.config.image_height, self.config.image_width);
        if bg_mask.dims() != [h, w] {
            return Err(Error::Shape(format!("bg_mask {:?}, expected [{h}, {w}]", bg_mask.dims())));
        }
        let mut t = Tensor::cat(&[&x, &bg_mask.reshape((1, 1, h, w))?.to_dtype(self.dtype)?], 1)?;
        for c in &self.bg_enc.convs {
            t = c.forward(&t)?.relu()?;
        }
        let params = self.bg_enc.head.forward(&t.flatten_from(1)?)?;
        let (mean, log_std) = split_last(&params, self.config.bg_dim)?;
        DiagonalGaussian::new(mean, log_std)
    }

    /// `[1, B]` (or `[B]`) code to a `[3, H, W]` background image in `[0, 1]`.
    pub fn decode_background(&self, z_bg: &Tensor) -> Result<Tensor> {
        let z = if z_bg.rank() == 1 { z_bg.unsqueeze(0)? } else { z_bg.clone() };
        if z.dims() != [1, self.config.bg_dim] {
            return Err(Error::Shape(format!("z_bg {:?}, expected [1, {}]", z.dims(), self.config.bg_dim)));
        }
        Ok(candle_nn::ops::sigmoid(&self.bg_dec.forward(&z)?)?.squeeze(0)?)
    }

    /// Places decoded appearance glimpses onto `[N, 3, H, W]` canvases.
    pub(crate) fn place_appearance(&self, appearance: &Tensor, poses: &Tensor) -> Result<Tensor> {
        let g = self.config.object_glimpse;
        stn_place_unchecked(appearance, poses, (self.config.image_height, self.config.image_width), (g, g))
    }

    /// Discovery proposal weights `tanh(STN(softplus(α)))`, `[D, H, W]`.
    pub(crate) fn proposal_weights(&self, logits: &Tensor, poses: &Tensor) -> Result<Tensor> {
        proposal_weights(logits, poses, (self.config.image_height, self.config.image_width))
    }
}

/// `tanh(STN(softplus(α)))` for `[D, g, g]` logits, `[D, H, W]`.
pub fn proposal_weights(logits: &Tensor, poses: &Tensor, out: (usize, usize)) -> Result<Tensor> {
    let (d, gh, gw) = logits.dims3()?;
    let placed = stn_place_unchecked(&softplus(logits)?.unsqueeze(1)?, poses, out, (gh, gw))?;
    Ok(placed.reshape((d, out.0, out.1))?.tanh()?)
}

/// Fraction of each proposal's weight lying inside the scope:
/// `Σ_ij s_ij w_ij / Σ_ij w_ij`, `[D]`.
pub fn context_probability(weights: &Tensor, scope: &Tensor) -> Result<Tensor> {
    let (_d, h, w) = weights.dims3()?;
    if scope.dims() != [h, w] {
        return Err(Error::Shape(format!("scope {:?} vs weights {:?}", scope.dims(), weights.dims())));
    }
    let num = weights.broadcast_mul(&scope.unsqueeze(0)?)?.sum((1, 2))?;
    let den = weights.sum((1, 2))?.maximum(1e-12)?;
    Ok((num / den)?)
}
