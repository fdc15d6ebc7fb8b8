//! Overlay strips: input frame, reconstruction and segmentation side by side,
//! with segments coloured by object id.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::RgbImage;

use crate::data_synth::VideoEpisode;
use crate::error::{Error, Result};
use crate::metrics::{episode_ground_truth, slots_to_labelframes, LabelFrame};
use crate::net::StepOutputs;

pub const PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

pub const BACKGROUND_COLOUR: [u8; 3] = [0, 0, 0];

/// Stable colour of an object id. Ids differing mod 16 never share a colour.
pub fn id_colour(id: u32) -> [u8; 3] {
    if id == 0 {
        BACKGROUND_COLOUR
    } else {
        PALETTE[(id as usize * 7) % PALETTE.len()]
    }
}

pub fn segmentation_rgb(labels: &LabelFrame) -> Vec<u8> {
    labels.labels.iter().flat_map(|&l| id_colour(l)).collect()
}

/// `[3,H,W]` tensor in `[0,1]` to interleaved RGB bytes.
pub fn tensor_to_rgb(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut out = vec![0u8; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            out[3 * i + ch] = (v[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(out)
}

/// Horizontal concatenation of equally sized RGB panels.
pub fn strip(panels: &[&[u8]], width: usize, height: usize) -> Result<RgbImage> {
    let n = panels.len();
    if panels.iter().any(|p| p.len() != 3 * width * height) {
        return Err(Error::Shape("strip panels differ in size".into()));
    }
    let mut img = RgbImage::new((n * width) as u32, height as u32);
    for (k, p) in panels.iter().enumerate() {
        for y in 0..height {
            for x in 0..width {
                let i = 3 * (y * width + x);
                img.put_pixel((k * width + x) as u32, y as u32, image::Rgb([p[i], p[i + 1], p[i + 2]]));
            }
        }
    }
    Ok(img)
}

fn save_strips(strips: Vec<RgbImage>, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    strips
        .into_iter()
        .enumerate()
        .map(|(t, img)| {
            let p = dir.join(format!("overlay_{t:03}.png"));
            img.save(&p)?;
            Ok(p)
        })
        .collect()
}

/// frame | reconstruction | predicted segmentation, one PNG per frame.
pub fn render_predictions(ep: &VideoEpisode, outputs: &[StepOutputs], dir: &Path) -> Result<Vec<PathBuf>> {
    let (labels, _) = slots_to_labelframes(outputs)?;
    let mut strips = Vec::with_capacity(outputs.len());
    for (t, (out, lf)) in outputs.iter().zip(&labels).enumerate() {
        let recon = tensor_to_rgb(&out.reconstruction)?;
        strips.push(strip(&[&ep.frames[t], &recon, &segmentation_rgb(lf)], ep.width, ep.height)?);
    }
    save_strips(strips, dir)
}

/// frame | ground-truth segmentation coloured by persistent track id.
pub fn render_ground_truth(ep: &VideoEpisode, dir: &Path) -> Result<Vec<PathBuf>> {
    let (labels, _) = episode_ground_truth(ep)?;
    let strips = labels
        .iter()
        .enumerate()
        .map(|(t, lf)| strip(&[&ep.frames[t], &segmentation_rgb(lf)], ep.width, ep.height))
        .collect::<Result<Vec<_>>>()?;
    save_strips(strips, dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{generate_episode, SceneSpec};
    use std::collections::BTreeMap;

    #[test]
    fn palette_is_injective_mod_16() {
        let colours: Vec<_> = (1..=16).map(id_colour).collect();
        for i in 0..16 {
            assert_ne!(colours[i], BACKGROUND_COLOUR);
            for j in 0..i {
                assert_ne!(colours[i], colours[j]);
            }
        }
        assert_eq!(id_colour(3), id_colour(19));
    }

    #[test]
    fn ground_truth_overlay_is_bijective() {
        let spec = SceneSpec { image_height: 32, image_width: 32, sprite_radius: (3, 5), episode_length: 3, num_objects: 3, ..SceneSpec::default() };
        let ep = generate_episode(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = render_ground_truth(&ep, dir.path()).unwrap();
        assert_eq!(paths.len(), 3);
        let (labels, _) = episode_ground_truth(&ep).unwrap();
        for (p, lf) in paths.iter().zip(&labels) {
            let img = image::open(p).unwrap().into_rgb8();
            let mut id_to_colour = BTreeMap::new();
            let mut colour_to_id = BTreeMap::new();
            for (i, &l) in lf.labels.iter().enumerate() {
                let px = img.get_pixel((32 + i % 32) as u32, (i / 32) as u32).0;
                assert_eq!(*id_to_colour.entry(l).or_insert(px), px);
                assert_eq!(*colour_to_id.entry(px).or_insert(l), l);
            }
        }
    }
}
