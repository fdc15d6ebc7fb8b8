//! Mask normalisation, spatial transformer placement and the spatial
//! Gaussian mixture image likelihood.
//!
//! Everything here is a pure function of candle tensors, so gradients with
//! respect to logits, presences, poses and component means come from
//! autodiff. Layouts are channel-first: glimpses are `[N, C, h, w]`, masks
//! `[N, H, W]`, images `[C, H, W]` and poses `[N, 4]` holding
//! `(scale_x, scale_y, center_x, center_y)`.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default bound on mask logits.
pub const DEFAULT_LOGIT_BOUND: f64 = 8.0;
/// Added inside logarithms of the entropy loss and the ratio normaliser.
pub const LOG_EPS: f64 = 1e-6;
/// Log weight standing in for `log 0`; finite so gradients stay finite.
const LOG_ZERO: f64 = -1e30;

/// Axis-aligned box in normalised image coordinates. The box spans
/// `center ± scale` on each axis, so `scale` is the fraction of the image
/// covered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub scale_x: f64,
    pub scale_y: f64,
    pub center_x: f64,
    pub center_y: f64,
}

impl PoseParams {
    pub const IDENTITY: PoseParams = PoseParams { scale_x: 1.0, scale_y: 1.0, center_x: 0.0, center_y: 0.0 };

    pub fn new(scale_x: f64, scale_y: f64, center_x: f64, center_y: f64) -> Self {
        PoseParams { scale_x, scale_y, center_x, center_y }
    }

    /// Rejects degenerate or fully off-image boxes for an `height × width` canvas.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let vals = [self.scale_x, self.scale_y, self.center_x, self.center_y];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("pose {self:?}")));
        }
        // f32 poses round-trip through f64, so allow a hair of slack.
        let slack = 1e-6;
        if self.scale_x < 1.0 / width as f64 - slack || self.scale_y < 1.0 / height as f64 - slack {
            return Err(Error::precondition(format!(
                "degenerate pose scale ({}, {}) below one pixel of a {height}x{width} canvas",
                self.scale_x, self.scale_y
            )));
        }
        if self.scale_x > 1.0 + slack || self.scale_y > 1.0 + slack {
            return Err(Error::precondition(format!("pose scale above 1: {self:?}")));
        }
        if self.center_x.abs() >= 1.0 + self.scale_x || self.center_y.abs() >= 1.0 + self.scale_y {
            return Err(Error::precondition(format!("pose box lies entirely outside the image: {self:?}")));
        }
        Ok(())
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.scale_x, self.scale_y, self.center_x, self.center_y]
    }

    pub fn stack(poses: &[PoseParams], dtype: DType, device: &Device) -> Result<Tensor> {
        let flat: Vec<f64> = poses.iter().flat_map(|p| p.to_array()).collect();
        Ok(Tensor::from_vec(flat, (poses.len(), 4), device)?.to_dtype(dtype)?)
    }

    pub fn unstack(poses: &Tensor) -> Result<Vec<PoseParams>> {
        let rows = poses.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Ok(rows.into_iter().map(|r| PoseParams::new(r[0], r[1], r[2], r[3])).collect())
    }

    /// Box corners `(x0, y0, x1, y1)` in normalised coordinates.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.center_x - self.scale_x,
            self.center_y - self.scale_y,
            self.center_x + self.scale_x,
            self.center_y + self.scale_y,
        ]
    }

    pub fn iou(&self, other: &PoseParams) -> f64 {
        let a = self.corners();
        let b = other.corners();
        let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
        let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        let inter = iw * ih;
        let union = 4.0 * self.scale_x * self.scale_y + 4.0 * other.scale_x * other.scale_y - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Validates every row of a `[N, 4]` pose tensor.
pub fn check_poses(poses: &Tensor, height: usize, width: usize) -> Result<()> {
    if poses.rank() != 2 || poses.dim(1)? != 4 {
        return Err(Error::Shape(format!("poses must be [N, 4], got {:?}", poses.dims())));
    }
    for p in PoseParams::unstack(poses)? {
        p.validate(height, width)?;
    }
    Ok(())
}

/// Numerically stable softplus.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    // relu(x) + log(1 + exp(-|x|)) is stable for large |x|.
    let tail = ((x.abs()?.neg()?.exp()? + 1.0)?).log()?;
    Ok((x.relu()? + tail)?)
}

fn axis_coords(len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f64> = (0..len).map(|j| (2 * j + 1) as f64 / len as f64 - 1.0).collect();
    Ok(Tensor::from_vec(v, len, device)?.to_dtype(dtype)?)
}

fn index_coords(len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f64> = (0..len).map(|j| j as f64).collect();
    Ok(Tensor::from_vec(v, len, device)?.to_dtype(dtype)?)
}

/// Bilinear tent weights `max(0, 1 - |p - q|)` for sample positions `p`
/// `[N, out, 1]` against integer source positions `0..in_len`.
fn tent(p: &Tensor, in_len: usize) -> Result<Tensor> {
    let q = index_coords(in_len, p.dtype(), p.device())?.reshape((1, 1, in_len))?;
    let d = p.broadcast_sub(&q)?.abs()?;
    Ok(d.neg()?.affine(1.0, 1.0)?.relu()?)
}

fn axis_params(poses: &Tensor, axis: usize) -> Result<(Tensor, Tensor)> {
    let n = poses.dim(0)?;
    let scale = poses.narrow(1, axis, 1)?.reshape((n, 1, 1))?;
    let center = poses.narrow(1, axis + 2, 1)?.reshape((n, 1, 1))?;
    Ok((scale, center))
}

/// `[N, out_len, glimpse_len]` weights placing a glimpse axis onto a canvas axis.
fn place_weights(poses: &Tensor, axis: usize, out_len: usize, glimpse_len: usize) -> Result<Tensor> {
    let (scale, center) = axis_params(poses, axis)?;
    let x = axis_coords(out_len, poses.dtype(), poses.device())?.reshape((1, out_len, 1))?;
    let u = x.broadcast_sub(&center)?.broadcast_div(&scale)?;
    let p = u.affine(glimpse_len as f64 / 2.0, (glimpse_len as f64 - 1.0) / 2.0)?;
    tent(&p, glimpse_len)
}

/// `[N, glimpse_len, in_len]` weights sampling a canvas axis into a glimpse axis.
fn crop_weights(poses: &Tensor, axis: usize, glimpse_len: usize, in_len: usize) -> Result<Tensor> {
    let (scale, center) = axis_params(poses, axis)?;
    let u = axis_coords(glimpse_len, poses.dtype(), poses.device())?.reshape((1, glimpse_len, 1))?;
    let x = u.broadcast_mul(&scale)?.broadcast_add(&center)?;
    let p = x.affine(in_len as f64 / 2.0, (in_len as f64 - 1.0) / 2.0)?;
    tent(&p, in_len)
}

/// Places `[N, C, h, w]` glimpses into `[N, C, H, W]` canvases with bilinear
/// sampling; everything outside each box is zero.
pub fn stn_place(glimpses: &Tensor, poses: &Tensor, out: (usize, usize)) -> Result<Tensor> {
    let (n, _c, gh, gw) = glimpses.dims4()?;
    if poses.dims() != [n, 4] {
        return Err(Error::Shape(format!("{} glimpses but poses {:?}", n, poses.dims())));
    }
    check_poses(poses, out.0, out.1)?;
    stn_place_unchecked(glimpses, poses, out, (gh, gw))
}

pub(crate) fn stn_place_unchecked(
    glimpses: &Tensor,
    poses: &Tensor,
    out: (usize, usize),
    glimpse: (usize, usize),
) -> Result<Tensor> {
    let wy = place_weights(poses, 1, out.0, glimpse.0)?.unsqueeze(1)?;
    let wx = place_weights(poses, 0, out.1, glimpse.1)?.transpose(1, 2)?.unsqueeze(1)?;
    Ok(wy.broadcast_matmul(glimpses)?.broadcast_matmul(&wx)?)
}

/// Samples `[N, C, h, w]` glimpses out of `[N, C, H, W]` images.
pub fn stn_crop(images: &Tensor, poses: &Tensor, out: (usize, usize)) -> Result<Tensor> {
    let (n, _c, h, w) = images.dims4()?;
    if poses.dims() != [n, 4] {
        return Err(Error::Shape(format!("{} images but poses {:?}", n, poses.dims())));
    }
    check_poses(poses, h, w)?;
    stn_crop_unchecked(images, poses, out)
}

pub(crate) fn stn_crop_unchecked(images: &Tensor, poses: &Tensor, out: (usize, usize)) -> Result<Tensor> {
    let (_n, _c, h, w) = images.dims4()?;
    let wy = crop_weights(poses, 1, out.0, h)?.unsqueeze(1)?;
    let wx = crop_weights(poses, 0, out.1, w)?.transpose(1, 2)?.unsqueeze(1)?;
    Ok(wy.broadcast_matmul(images)?.broadcast_matmul(&wx)?)
}

/// `c · tanh(raw)`.
pub fn clamp_logits(raw: &Tensor, bound: f64) -> Result<Tensor> {
    Ok((raw.tanh()? * bound)?)
}

fn place_masks(maps: &Tensor, poses: &Tensor, out: (usize, usize)) -> Result<Tensor> {
    let (n, gh, gw) = maps.dims3()?;
    let placed = stn_place_unchecked(&maps.unsqueeze(1)?, poses, out, (gh, gw))?;
    Ok(placed.reshape((n, out.0, out.1))?)
}

fn validate_objects(alphas: &Tensor, z_pres: &Tensor, poses: &Tensor, out: (usize, usize)) -> Result<usize> {
    let n = alphas.dims3()?.0;
    if z_pres.dims() != [n] || poses.dims() != [n, 4] {
        return Err(Error::Shape(format!(
            "alphas {:?}, z_pres {:?}, poses {:?}",
            alphas.dims(),
            z_pres.dims(),
            poses.dims()
        )));
    }
    check_poses(poses, out.0, out.1)?;
    Ok(n)
}

/// Total foreground occupancy `tanh(Σ_k STN(softplus(α_k)·z_k))`, `[H, W]`.
pub fn foreground_mask(alphas: &Tensor, z_pres: &Tensor, poses: &Tensor, out: (usize, usize)) -> Result<Tensor> {
    let n = validate_objects(alphas, z_pres, poses, out)?;
    if n == 0 {
        return Ok(Tensor::zeros(out, alphas.dtype(), alphas.device())?);
    }
    Ok(occupancy(alphas, z_pres, poses, out, n)?.tanh()?)
}

/// `Σ_k STN(softplus(α_k)·z_k)` before the squashing, `[H, W]`.
fn occupancy(alphas: &Tensor, z_pres: &Tensor, poses: &Tensor, out: (usize, usize), n: usize) -> Result<Tensor> {
    let gated = softplus(alphas)?.broadcast_mul(&z_pres.reshape((n, 1, 1))?)?;
    Ok(place_masks(&gated, poses, out)?.sum(0)?)
}

/// Per-object responsibilities `softmax_k(STN(α_k) + 2c·z_k)`, `[N, H, W]`.
pub fn normalize_object_masks(
    alphas: &Tensor,
    z_pres: &Tensor,
    poses: &Tensor,
    bound: f64,
    out: (usize, usize),
) -> Result<Tensor> {
    let n = validate_objects(alphas, z_pres, poses, out)?;
    if n == 0 {
        return Ok(Tensor::zeros((0, out.0, out.1), alphas.dtype(), alphas.device())?);
    }
    let shifted = place_masks(alphas, poses, out)?.broadcast_add(&(z_pres * (2.0 * bound))?.reshape((n, 1, 1))?)?;
    Ok(candle_nn::ops::softmax(&shifted, 0)?)
}

/// `α_s² / (Σ_k α_s + ε)` per pixel; `alphas_s` is `[N, H, W]` in `[0, 1]`.
pub fn scalor_style_normalize(alphas_s: &Tensor) -> Result<Tensor> {
    let denom = (alphas_s.sum_keepdim(0)? + LOG_EPS)?;
    Ok(alphas_s.sqr()?.broadcast_div(&denom)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskNormalization {
    /// Presence-shifted softmax times a tanh occupancy mask.
    #[default]
    Softmax,
    /// Squared-ratio normalisation of sigmoid masks.
    ScalorRatio,
}

/// `K - 1` foreground masks plus the background complement.
#[derive(Debug, Clone)]
pub struct MaskStack {
    /// `[K-1, H, W]`
    pub fg_masks: Tensor,
    /// `[H, W]`
    pub bg_mask: Tensor,
    /// `[H, W]`
    pub fg_total: Tensor,
}

impl MaskStack {
    pub fn num_foreground(&self) -> usize {
        self.fg_masks.dim(0).unwrap_or(0)
    }

    pub fn shape(&self) -> (usize, usize) {
        let d = self.bg_mask.dims();
        (d[0], d[1])
    }

    /// All `K` masks as `[K, H, W]` with the background last.
    pub fn all(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.fg_masks, &self.bg_mask.unsqueeze(0)?], 0)?)
    }

    /// Largest deviation of `Σ_k m_k` from one over all pixels.
    pub fn partition_error(&self) -> Result<f64> {
        let total = (self.fg_masks.sum(0)? + &self.bg_mask)?;
        Ok(total.affine(1.0, -1.0)?.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

pub fn compose_masks(
    alphas: &Tensor,
    z_pres: &Tensor,
    poses: &Tensor,
    bound: f64,
    out: (usize, usize),
    normalization: MaskNormalization,
) -> Result<MaskStack> {
    let n = validate_objects(alphas, z_pres, poses, out)?;
    if n == 0 {
        let zeros = Tensor::zeros(out, alphas.dtype(), alphas.device())?;
        return Ok(MaskStack {
            fg_masks: Tensor::zeros((0, out.0, out.1), alphas.dtype(), alphas.device())?,
            bg_mask: zeros.ones_like()?,
            fg_total: zeros,
        });
    }
    match normalization {
        MaskNormalization::Softmax => {
            let occ = occupancy(alphas, z_pres, poses, out, n)?;
            let fg_total = occ.tanh()?;
            let m_hat = normalize_object_masks(alphas, z_pres, poses, bound, out)?;
            let fg_masks = m_hat.broadcast_mul(&fg_total.unsqueeze(0)?)?;
            // 1 - tanh(s) = 2σ(-2s), which keeps precision where s is large.
            let bg_mask = (candle_nn::ops::sigmoid(&(occ * -2.0)?)? * 2.0)?;
            Ok(MaskStack { fg_masks, bg_mask, fg_total })
        }
        MaskNormalization::ScalorRatio => {
            let gated = candle_nn::ops::sigmoid(alphas)?.broadcast_mul(&z_pres.reshape((n, 1, 1))?)?;
            let fg_masks = scalor_style_normalize(&place_masks(&gated, poses, out)?)?;
            let fg_total = fg_masks.sum(0)?;
            let bg_mask = fg_total.neg()?.affine(1.0, 1.0)?;
            Ok(MaskStack { fg_masks, bg_mask, fg_total })
        }
    }
}

/// Gaussian mixture component means and their fixed deviations.
#[derive(Debug, Clone)]
pub struct ComponentMeans {
    /// `[K-1, C, H, W]`
    pub fg_means: Tensor,
    /// `[C, H, W]`
    pub bg_mean: Tensor,
    pub sigma_fg: f64,
    pub sigma_bg: f64,
}

pub const DEFAULT_SIGMA_FG: f64 = 0.1;
pub const DEFAULT_SIGMA_BG: f64 = 0.04;

fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    let s = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if s.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Per-pixel isotropic Gaussian log density summed over channels, `[.., H, W]`.
fn gaussian_log_density(x: &Tensor, mean: &Tensor, sigma: f64) -> Result<Tensor> {
    let c = x.dim(D::Minus(3))? as f64;
    let z = (x.broadcast_sub(mean)? / sigma)?;
    let norm = c * (0.5 * (2.0 * std::f64::consts::PI).ln() + sigma.ln());
    Ok((z.sqr()?.sum(D::Minus(3))? * -0.5)?.affine(1.0, -norm)?)
}

/// `log m`, with exact zeros mapped to [`LOG_ZERO`] so an absent component
/// drops out of the mixture.
fn log_weight(m: &Tensor) -> Result<Tensor> {
    let live = m.gt(0.0)?;
    let safe = live.where_cond(m, &m.ones_like()?)?;
    Ok(live.where_cond(&safe.log()?, &m.ones_like()?.affine(0.0, LOG_ZERO)?)?)
}

fn log_sum_exp0(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(0)?.detach();
    let s = x.broadcast_sub(&m)?.exp()?.sum_keepdim(0)?.log()?;
    Ok((s + m)?.squeeze(0)?)
}

/// `Σ_pixels log Σ_k m_k N(x | μ_k, σ_k² I)` for `x` of shape `[C, H, W]`.
pub fn mixture_log_likelihood(x: &Tensor, masks: &MaskStack, means: &ComponentMeans) -> Result<Tensor> {
    if means.sigma_fg <= 0.0 || means.sigma_bg <= 0.0 {
        return Err(Error::precondition("component deviations must be positive"));
    }
    ensure_finite(x, "image")?;
    let fg = masks.num_foreground();
    let bg_term = (log_weight(&masks.bg_mask)? + gaussian_log_density(x, &means.bg_mean, means.sigma_bg)?)?;
    let terms = if fg == 0 {
        bg_term.unsqueeze(0)?
    } else {
        let fg_term = (log_weight(&masks.fg_masks)?
            + gaussian_log_density(&x.unsqueeze(0)?, &means.fg_means, means.sigma_fg)?)?;
        Tensor::cat(&[fg_term, bg_term.unsqueeze(0)?], 0)?
    };
    Ok(log_sum_exp0(&terms)?.sum_all()?)
}

/// Single Gaussian on the mask-weighted mean image with deviation `σ_fg`.
pub fn gaussian_log_likelihood(x: &Tensor, masks: &MaskStack, means: &ComponentMeans) -> Result<Tensor> {
    ensure_finite(x, "image")?;
    let mut mean = means.bg_mean.broadcast_mul(&masks.bg_mask.unsqueeze(0)?)?;
    if masks.num_foreground() > 0 {
        let fg = means.fg_means.broadcast_mul(&masks.fg_masks.unsqueeze(1)?)?.sum(0)?;
        mean = (mean + fg)?;
    }
    Ok(gaussian_log_density(x, &mean, means.sigma_fg)?.sum_all()?)
}

/// `Σ_pixels Σ_k -m_fg · m_k · log m_k` over the foreground masks.
pub fn mask_entropy_loss(masks: &MaskStack) -> Result<Tensor> {
    if masks.num_foreground() == 0 {
        return Ok(Tensor::zeros((), masks.bg_mask.dtype(), masks.bg_mask.device())?);
    }
    let m = &masks.fg_masks;
    let per = (m * (m + LOG_EPS)?.log()?)?.broadcast_mul(&masks.fg_total.unsqueeze(0)?)?;
    Ok(per.sum_all()?.neg()?)
}
