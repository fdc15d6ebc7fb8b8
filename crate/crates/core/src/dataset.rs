//! On-disk dataset layout.
//!
//! ```text
//! root/manifest.json
//! root/{train,val,test}/ep_00000/frame_000.png   RGB8
//! root/{train,val,test}/ep_00000/mask_000.png    L8 label map
//! root/{train,val,test}/ep_00000/depth_000.png   L16 depth in millimetres
//! root/{train,val,test}/ep_00000/meta.json       ids, states, camera
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data_synth::{split_sizes, CameraMeta, FrameState, VideoEpisode};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec_hash: String,
    pub splits: SplitCounts,
    pub image_height: usize,
    pub image_width: usize,
    pub episode_length: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<VideoEpisode>,
    pub val: Vec<VideoEpisode>,
    pub test: Vec<VideoEpisode>,
}

impl DatasetSplits {
    /// Splits episodes in order according to `ratio`.
    pub fn from_episodes(mut episodes: Vec<VideoEpisode>, ratio: [u32; 3]) -> Self {
        let (train, val, _) = split_sizes(episodes.len(), ratio);
        let rest = episodes.split_off(train);
        let mut rest = rest;
        let test = rest.split_off(val);
        DatasetSplits { train: episodes, val: rest, test }
    }

    pub fn get(&self, split: Split) -> &[VideoEpisode] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn parts(&self) -> [(&'static str, &[VideoEpisode]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeMeta {
    height: usize,
    width: usize,
    num_frames: usize,
    seed: u64,
    background: [u8; 3],
    camera_meta: CameraMeta,
    track_ids: Vec<BTreeMap<String, u32>>,
    states: Vec<FrameState>,
}

fn episode_dir(root: &Path, split: &str, index: usize) -> PathBuf {
    root.join(split).join(format!("ep_{index:05}"))
}

fn write_episode(ep: &VideoEpisode, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (w, h) = (ep.width as u32, ep.height as u32);
    for t in 0..ep.len() {
        let rgb = RgbImage::from_raw(w, h, ep.frames[t].clone())
            .ok_or_else(|| Error::Shape(format!("frame {t} has wrong size")))?;
        rgb.save(dir.join(format!("frame_{t:03}.png")))?;
        let mask = GrayImage::from_raw(w, h, ep.gt_masks[t].clone())
            .ok_or_else(|| Error::Shape(format!("mask {t} has wrong size")))?;
        mask.save(dir.join(format!("mask_{t:03}.png")))?;
        let mm: Vec<u16> = ep.gt_depth[t].iter().map(|d| (d * 1000.0).round() as u16).collect();
        let depth: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w, h, mm)
            .ok_or_else(|| Error::Shape(format!("depth {t} has wrong size")))?;
        depth.save(dir.join(format!("depth_{t:03}.png")))?;
    }
    let meta = EpisodeMeta {
        height: ep.height,
        width: ep.width,
        num_frames: ep.len(),
        seed: ep.seed,
        background: ep.background,
        camera_meta: ep.camera_meta,
        track_ids: ep
            .gt_track_ids
            .iter()
            .map(|m| m.iter().map(|(l, id)| (l.to_string(), *id)).collect())
            .collect(),
        states: ep.states.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Writes `splits` below `root` and returns the manifest stored there.
pub fn write_dataset(splits: &DatasetSplits, root: &Path, spec_hash: &str) -> Result<DatasetManifest> {
    fs::create_dir_all(root)?;
    let first = splits.parts().into_iter().flat_map(|(_, eps)| eps.iter()).next();
    let (image_height, image_width, episode_length) =
        first.map(|e| (e.height, e.width, e.len())).unwrap_or((0, 0, 0));
    for (name, eps) in splits.parts() {
        for (i, ep) in eps.iter().enumerate() {
            write_episode(ep, &episode_dir(root, name, i))?;
        }
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        spec_hash: spec_hash.to_string(),
        splits: SplitCounts {
            train: splits.train.len(),
            val: splits.val.len(),
            test: splits.test.len(),
        },
        image_height,
        image_width,
        episode_length,
    };
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Dataset {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Dataset {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Dataset {
            path,
            reason: format!("unsupported format version {}", manifest.format_version),
        });
    }
    Ok(manifest)
}

fn read_episode(dir: &Path) -> std::result::Result<VideoEpisode, String> {
    let meta_text = fs::read_to_string(dir.join("meta.json")).map_err(|e| format!("meta.json: {e}"))?;
    let meta: EpisodeMeta = serde_json::from_str(&meta_text).map_err(|e| format!("meta.json: {e}"))?;
    let (w, h) = (meta.width as u32, meta.height as u32);
    let mut frames = Vec::with_capacity(meta.num_frames);
    let mut masks = Vec::with_capacity(meta.num_frames);
    let mut depths = Vec::with_capacity(meta.num_frames);
    for t in 0..meta.num_frames {
        let open = |name: String| image::open(dir.join(&name)).map_err(|e| format!("{name}: {e}"));
        let frame = open(format!("frame_{t:03}.png"))?.into_rgb8();
        let mask = open(format!("mask_{t:03}.png"))?.into_luma8();
        let depth = open(format!("depth_{t:03}.png"))?.into_luma16();
        if frame.dimensions() != (w, h) || mask.dimensions() != (w, h) || depth.dimensions() != (w, h) {
            return Err(format!("frame {t} has unexpected dimensions"));
        }
        frames.push(frame.into_raw());
        masks.push(mask.into_raw());
        depths.push(depth.into_raw().iter().map(|&d| d as f32 / 1000.0).collect());
    }
    let gt_track_ids = meta
        .track_ids
        .iter()
        .map(|m| {
            m.iter()
                .map(|(l, id)| l.parse::<u8>().map(|l| (l, *id)).map_err(|e| format!("label {l:?}: {e}")))
                .collect::<std::result::Result<BTreeMap<_, _>, _>>()
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(VideoEpisode {
        height: meta.height,
        width: meta.width,
        frames,
        gt_masks: masks,
        gt_track_ids,
        gt_depth: depths,
        camera_meta: meta.camera_meta,
        states: meta.states,
        background: meta.background,
        seed: meta.seed,
    })
}

pub fn read_split(root: &Path, split: Split, manifest: &DatasetManifest) -> Result<Vec<VideoEpisode>> {
    let count = match split {
        Split::Train => manifest.splits.train,
        Split::Val => manifest.splits.val,
        Split::Test => manifest.splits.test,
    };
    (0..count)
        .map(|i| {
            read_episode(&episode_dir(root, split.name(), i)).map_err(|reason| Error::Episode {
                episode: i,
                reason: format!("{} split: {reason}", split.name()),
            })
        })
        .collect()
}

pub fn read_dataset(root: &Path) -> Result<DatasetSplits> {
    let manifest = read_manifest(root)?;
    Ok(DatasetSplits {
        train: read_split(root, Split::Train, &manifest)?,
        val: read_split(root, Split::Val, &manifest)?,
        test: read_split(root, Split::Test, &manifest)?,
    })
}
