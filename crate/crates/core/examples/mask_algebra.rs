//! Composes masks for three glimpses and scores an image under the mixture.

use apex::mask_compose::*;
use candle_core::{Device, Tensor};

fn main() -> apex::Result<()> {
    let dev = Device::Cpu;
    let (h, w) = (16, 16);
    let alphas = Tensor::randn(0f32, 2f32, (3, 6, 6), &dev)?;
    let z_pres = Tensor::new(&[1.0f32, 0.6, 0.0], &dev)?;
    let poses = Tensor::new(&[[0.4f32, 0.4, -0.4, -0.4], [0.5, 0.3, 0.3, 0.2], [0.3, 0.3, 0.0, 0.0]], &dev)?;
    for norm in [MaskNormalization::Softmax, MaskNormalization::ScalorRatio] {
        let masks = compose_masks(&alphas, &z_pres, &poses, DEFAULT_LOGIT_BOUND, (h, w), norm)?;
        let per_object: Vec<f32> = masks.fg_masks.sum((1, 2))?.to_vec1()?;
        let bg: f32 = masks.bg_mask.sum_all()?.to_scalar()?;
        println!("{norm:?}: partition error {:.2e}, object mass {per_object:?}, background mass {bg:.2}", masks.partition_error()?);

        let bg_mean = Tensor::full(0.2f32, (3, h, w), &dev)?;
        let fg_means = Tensor::full(0.8f32, (3, 3, h, w), &dev)?;
        let means = ComponentMeans { fg_means, bg_mean: bg_mean.clone(), sigma_fg: DEFAULT_SIGMA_FG, sigma_bg: DEFAULT_SIGMA_BG };
        let ll: f32 = mixture_log_likelihood(&bg_mean, &masks, &means)?.to_scalar()?;
        let ent: f32 = mask_entropy_loss(&masks)?.to_scalar()?;
        println!("  log-likelihood of a flat background image {ll:.1}, entropy loss {ent:.3}");
    }
    Ok(())
}
