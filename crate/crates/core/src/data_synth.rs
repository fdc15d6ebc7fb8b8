//! Synthetic moving-sprite videos with pixel-exact ground truth.
//!
//! Each episode shows up to three flat sprites resting on a uniformly
//! coloured table and an optional vertical "arm" bar that sweeps along one
//! horizontal line and shoves any sprite it touches out of its way. All
//! geometry is integer valued, so rendering is bitwise reproducible for a
//! given seed on every platform.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Table plane depth in millimetres seen from the camera.
pub const TABLE_DEPTH_MM: u16 = 1500;
/// Height of the arm above the table in millimetres.
pub const ARM_HEIGHT_MM: u16 = 400;
const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpriteShape {
    Disc,
    Square,
    Triangle,
    Cup,
}

impl SpriteShape {
    pub const ALL: [SpriteShape; 4] = [
        SpriteShape::Disc,
        SpriteShape::Square,
        SpriteShape::Triangle,
        SpriteShape::Cup,
    ];

    /// Whether the offset `(dx, dy)` from the sprite centre is covered by a
    /// sprite of half-size `r`.
    pub fn covers(self, dx: i32, dy: i32, r: i32) -> bool {
        if dx.abs() > r || dy.abs() > r {
            return false;
        }
        match self {
            SpriteShape::Disc => dx * dx + dy * dy <= r * r + r,
            SpriteShape::Square => true,
            SpriteShape::Triangle => 2 * dx.abs() <= dy + r,
            SpriteShape::Cup => {
                let body = dx <= r - 3 && dy >= -r + 1;
                let half = (r / 2).max(1);
                let handle =
                    dx >= r - 2 && dy.abs() <= half && !(dx == r - 1 && dy.abs() < half);
                body || handle
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpriteMotion {
    /// Sprites only move when the arm pushes them.
    #[default]
    Static,
    /// Sprites drift one pixel per frame and bounce off the image border.
    Drift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub image_height: usize,
    pub image_width: usize,
    pub num_objects: usize,
    pub sprite_shapes: Vec<SpriteShape>,
    pub palette: Vec<[u8; 3]>,
    pub background_palette: Vec<[u8; 3]>,
    /// Inclusive range of sprite half-sizes in pixels.
    pub sprite_radius: (usize, usize),
    pub arm_enabled: bool,
    pub arm_width: usize,
    pub arm_colour: [u8; 3],
    pub episode_length: usize,
    pub motion: SpriteMotion,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_height: 64,
            image_width: 64,
            num_objects: 3,
            sprite_shapes: SpriteShape::ALL.to_vec(),
            palette: vec![
                [230, 50, 50],
                [50, 180, 60],
                [60, 90, 230],
                [240, 200, 40],
                [200, 60, 200],
                [40, 200, 210],
                [250, 140, 30],
                [240, 240, 240],
            ],
            background_palette: vec![[110, 90, 70], [80, 80, 90], [70, 100, 80]],
            sprite_radius: (4, 7),
            arm_enabled: true,
            arm_width: 6,
            arm_colour: [30, 30, 30],
            episode_length: 20,
            motion: SpriteMotion::Static,
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if !(1..=3).contains(&self.num_objects) {
            return fail(format!("num_objects must be in [1, 3], got {}", self.num_objects));
        }
        if self.episode_length < 2 {
            return fail(format!("episode_length must be >= 2, got {}", self.episode_length));
        }
        if self.sprite_shapes.is_empty() || self.palette.is_empty() {
            return fail("sprite_shapes and palette must be non-empty".into());
        }
        if self.background_palette.is_empty() {
            return fail("background_palette must be non-empty".into());
        }
        let (lo, hi) = self.sprite_radius;
        if lo == 0 || lo > hi {
            return fail(format!("invalid sprite radius range {:?}", self.sprite_radius));
        }
        if 2 * hi + 1 > self.image_height.min(self.image_width) {
            return fail("largest sprite does not fit inside the image".into());
        }
        if self.arm_enabled && (self.arm_width == 0 || self.arm_width >= self.image_width) {
            return fail(format!("invalid arm width {}", self.arm_width));
        }
        Ok(())
    }

    /// Short content hash used to tag datasets generated from this spec.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("scene spec serialises");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// Axis-aligned integer box, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl PixelBox {
    pub fn intersects(&self, other: &PixelBox) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }

    pub fn intersects_image(&self, width: usize, height: usize) -> bool {
        self.x1 >= 0 && self.y1 >= 0 && self.x0 < width as i32 && self.y0 < height as i32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpriteState {
    pub id: u32,
    pub shape: SpriteShape,
    pub colour: [u8; 3],
    pub center: (i32, i32),
    pub radius: i32,
    pub height_mm: u16,
    pub velocity: (i32, i32),
}

impl SpriteState {
    pub fn bbox(&self) -> PixelBox {
        PixelBox {
            x0: self.center.0 - self.radius,
            y0: self.center.1 - self.radius,
            x1: self.center.0 + self.radius,
            y1: self.center.1 + self.radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmState {
    pub id: u32,
    /// Left column of the bar.
    pub x: i32,
    pub width: i32,
    /// Lowest row reached by the bar; the bar spans rows `0..=tip_y`.
    pub tip_y: i32,
    pub velocity: i32,
}

impl ArmState {
    pub fn bbox(&self) -> PixelBox {
        PixelBox {
            x0: self.x,
            y0: 0,
            x1: self.x + self.width - 1,
            y1: self.tip_y,
        }
    }
}

/// Minimum translation that separates `sprite` from `obstacle`, or `None`
/// when they do not overlap. Ties prefer the obstacle's direction of travel.
pub fn separating_vector(sprite: &PixelBox, obstacle: &PixelBox, push_dx: i32) -> Option<(i32, i32)> {
    if !sprite.intersects(obstacle) {
        return None;
    }
    let right = obstacle.x1 - sprite.x0 + 1;
    let left = sprite.x1 - obstacle.x0 + 1;
    let down = obstacle.y1 - sprite.y0 + 1;
    let up = sprite.y1 - obstacle.y0 + 1;
    let mut candidates = if push_dx >= 0 {
        vec![(right, 0), (-left, 0)]
    } else {
        vec![(-left, 0), (right, 0)]
    };
    candidates.push((0, down));
    candidates.push((0, -up));
    candidates
        .into_iter()
        .min_by_key(|(dx, dy)| dx.abs() + dy.abs())
}

/// Camera geometry tying pixels to the table plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraMeta {
    /// Table extent covered by the image, in world units (x, y).
    pub table_extent: (f64, f64),
    pub table_depth: f64,
}

impl Default for CameraMeta {
    fn default() -> Self {
        CameraMeta {
            table_extent: (1.0, 1.0),
            table_depth: TABLE_DEPTH_MM as f64 / 1000.0,
        }
    }
}

impl CameraMeta {
    /// World coordinates of a (possibly fractional) pixel position.
    pub fn pixel_to_world(&self, px: f64, py: f64, width: usize, height: usize) -> [f64; 2] {
        [
            px / width as f64 * self.table_extent.0,
            py / height as f64 * self.table_extent.1,
        ]
    }

    pub fn world_to_pixel(&self, p: [f64; 2], width: usize, height: usize) -> (f64, f64) {
        (
            p[0] / self.table_extent.0 * width as f64,
            p[1] / self.table_extent.1 * height as f64,
        )
    }

    pub fn on_table(&self, p: [f64; 2]) -> bool {
        (0.0..=self.table_extent.0).contains(&p[0]) && (0.0..=self.table_extent.1).contains(&p[1])
    }
}

/// Everything needed to rasterise one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub width: usize,
    pub height: usize,
    pub background: [u8; 3],
    /// Drawn in order; later sprites occlude earlier ones.
    pub sprites: Vec<SpriteState>,
    pub arm: Option<ArmState>,
    pub arm_colour: [u8; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub rgb: Vec<u8>,
    pub labels: Vec<u8>,
    pub depth_mm: Vec<u16>,
}

pub fn render_scene(layout: &SceneLayout) -> RenderedFrame {
    let (w, h) = (layout.width, layout.height);
    let mut rgb = Vec::with_capacity(w * h * 3);
    for _ in 0..w * h {
        rgb.extend_from_slice(&layout.background);
    }
    let mut labels = vec![0u8; w * h];
    let mut depth_mm = vec![TABLE_DEPTH_MM; w * h];
    let mut paint = |x: i32, y: i32, colour: [u8; 3], label: u8, depth: u16| {
        if x < 0 || y < 0 || x >= w as i32 || y >= h as i32 {
            return;
        }
        let i = y as usize * w + x as usize;
        rgb[3 * i..3 * i + 3].copy_from_slice(&colour);
        labels[i] = label;
        depth_mm[i] = depth;
    };
    for s in &layout.sprites {
        let r = s.radius;
        for dy in -r..=r {
            for dx in -r..=r {
                if s.shape.covers(dx, dy, r) {
                    paint(
                        s.center.0 + dx,
                        s.center.1 + dy,
                        s.colour,
                        s.id as u8,
                        TABLE_DEPTH_MM - s.height_mm,
                    );
                }
            }
        }
    }
    if let Some(arm) = &layout.arm {
        let b = arm.bbox();
        for y in b.y0..=b.y1 {
            for x in b.x0..=b.x1 {
                paint(x, y, layout.arm_colour, arm.id as u8, TABLE_DEPTH_MM - ARM_HEIGHT_MM);
            }
        }
    }
    RenderedFrame { rgb, labels, depth_mm }
}

/// Per-frame simulator state kept alongside the rendered episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameState {
    pub sprites: Vec<SpriteState>,
    pub arm: Option<ArmState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoEpisode {
    pub height: usize,
    pub width: usize,
    /// `T` frames of interleaved RGB bytes, row-major.
    pub frames: Vec<Vec<u8>>,
    /// `T` label maps; 0 is the table.
    pub gt_masks: Vec<Vec<u8>>,
    /// Per frame: label -> persistent object id, for every object in the scene.
    pub gt_track_ids: Vec<BTreeMap<u8, u32>>,
    /// `T` depth maps in world units.
    pub gt_depth: Vec<Vec<f32>>,
    pub camera_meta: CameraMeta,
    pub states: Vec<FrameState>,
    pub background: [u8; 3],
    pub seed: u64,
}

impl VideoEpisode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame `t` as a `[3, H, W]` tensor in `[0, 1]`.
    pub fn frame_tensor(&self, t: usize, device: &Device) -> Result<Tensor> {
        let (h, w) = (self.height, self.width);
        let src = &self.frames[t];
        let mut chw = vec![0f32; 3 * h * w];
        for i in 0..h * w {
            for c in 0..3 {
                chw[c * h * w + i] = src[3 * i + c] as f32 / 255.0;
            }
        }
        Ok(Tensor::from_vec(chw, (3, h, w), device)?)
    }

    /// Frames `range` stacked as `[T, 3, H, W]`.
    pub fn frames_tensor(&self, range: std::ops::Range<usize>, device: &Device) -> Result<Tensor> {
        let frames = range
            .map(|t| self.frame_tensor(t, device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&frames, 0)?)
    }

    pub fn persistent_ids(&self, t: usize) -> Vec<u32> {
        self.gt_track_ids[t].values().copied().collect()
    }
}

fn to_metres(depth_mm: &[u16]) -> Vec<f32> {
    depth_mm.iter().map(|&d| d as f32 / 1000.0).collect()
}

fn place_sprites(spec: &SceneSpec, rng: &mut ChaCha8Rng, arm: Option<&ArmState>) -> Result<Vec<SpriteState>> {
    let (w, h) = (spec.image_width as i32, spec.image_height as i32);
    let mut attempts = 0;
    'restart: loop {
        let mut sprites: Vec<SpriteState> = Vec::with_capacity(spec.num_objects);
        let mut colours = spec.palette.clone();
        while sprites.len() < spec.num_objects {
            attempts += 1;
            if attempts > PLACEMENT_ATTEMPTS {
                return Err(Error::OverDense {
                    num_objects: spec.num_objects,
                    attempts: PLACEMENT_ATTEMPTS,
                });
            }
            let r = rng.random_range(spec.sprite_radius.0..=spec.sprite_radius.1) as i32;
            let cx = rng.random_range(r..w - r);
            let cy = rng.random_range(r..h - r);
            let candidate = PixelBox { x0: cx - r - 1, y0: cy - r - 1, x1: cx + r + 1, y1: cy + r + 1 };
            let clash = sprites.iter().any(|s| s.bbox().intersects(&candidate))
                || arm.is_some_and(|a| a.bbox().intersects(&candidate));
            if clash {
                continue;
            }
            if colours.is_empty() {
                continue 'restart;
            }
            let colour = colours.remove(rng.random_range(0..colours.len()));
            let shape = spec.sprite_shapes[rng.random_range(0..spec.sprite_shapes.len())];
            let velocity = match spec.motion {
                SpriteMotion::Static => (0, 0),
                SpriteMotion::Drift => (
                    [-1, 1][rng.random_range(0..2)],
                    [-1, 1][rng.random_range(0..2)],
                ),
            };
            sprites.push(SpriteState {
                id: sprites.len() as u32 + 1,
                shape,
                colour,
                center: (cx, cy),
                radius: r,
                height_mm: 20 + 5 * r as u16,
                velocity,
            });
        }
        return Ok(sprites);
    }
}

/// Advances the sprites by their own motion and resolves arm contact.
pub fn push_sprites(sprites: &mut [SpriteState], arm: Option<&ArmState>, width: usize, height: usize) {
    for s in sprites.iter_mut() {
        if s.velocity != (0, 0) {
            let (mut vx, mut vy) = s.velocity;
            let nx = s.center.0 + vx;
            let ny = s.center.1 + vy;
            if nx - s.radius < 0 || nx + s.radius >= width as i32 {
                vx = -vx;
            }
            if ny - s.radius < 0 || ny + s.radius >= height as i32 {
                vy = -vy;
            }
            s.velocity = (vx, vy);
            s.center = (s.center.0 + vx, s.center.1 + vy);
        }
        if let Some(arm) = arm {
            if let Some((dx, dy)) = separating_vector(&s.bbox(), &arm.bbox(), arm.velocity) {
                s.center = (s.center.0 + dx, s.center.1 + dy);
            }
        }
    }
}

pub fn generate_episode(spec: &SceneSpec) -> Result<VideoEpisode> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let (w, h) = (spec.image_width, spec.image_height);
    let background = spec.background_palette[rng.random_range(0..spec.background_palette.len())];

    let mut arm = if spec.arm_enabled {
        let aw = spec.arm_width as i32;
        let speed = rng.random_range(2..=4);
        let rightwards = rng.random_bool(0.5);
        let margin = (w as i32 / 4).max(1);
        let x = if rightwards {
            rng.random_range(0..margin)
        } else {
            w as i32 - aw - rng.random_range(0..margin)
        };
        Some(ArmState {
            id: spec.num_objects as u32 + 1,
            x,
            width: aw,
            tip_y: rng.random_range(h as i32 / 4..(3 * h as i32) / 4),
            velocity: if rightwards { speed } else { -speed },
        })
    } else {
        None
    };
    let mut sprites = place_sprites(spec, &mut rng, arm.as_ref())?;

    let mut episode = VideoEpisode {
        height: h,
        width: w,
        frames: Vec::with_capacity(spec.episode_length),
        gt_masks: Vec::with_capacity(spec.episode_length),
        gt_track_ids: Vec::with_capacity(spec.episode_length),
        gt_depth: Vec::with_capacity(spec.episode_length),
        camera_meta: CameraMeta::default(),
        states: Vec::with_capacity(spec.episode_length),
        background,
        seed: spec.rng_seed,
    };
    // Once an object leaves the image it never comes back.
    let mut departed: Vec<u32> = Vec::new();
    for t in 0..spec.episode_length {
        if t > 0 {
            if let Some(a) = arm.as_mut() {
                a.x += a.velocity;
            }
            push_sprites(&mut sprites, arm.as_ref(), w, h);
        }
        for s in &sprites {
            if !s.bbox().intersects_image(w, h) && !departed.contains(&s.id) {
                departed.push(s.id);
            }
        }
        if let Some(a) = &arm {
            if !a.bbox().intersects_image(w, h) && !departed.contains(&a.id) {
                departed.push(a.id);
            }
        }
        let visible: Vec<SpriteState> = sprites
            .iter()
            .filter(|s| !departed.contains(&s.id))
            .copied()
            .collect();
        let visible_arm = arm.filter(|a| !departed.contains(&a.id));
        let layout = SceneLayout {
            width: w,
            height: h,
            background,
            sprites: visible.clone(),
            arm: visible_arm,
            arm_colour: spec.arm_colour,
        };
        let frame = render_scene(&layout);
        let mut ids = BTreeMap::new();
        for s in &visible {
            ids.insert(s.id as u8, s.id);
        }
        if let Some(a) = &visible_arm {
            ids.insert(a.id as u8, a.id);
        }
        episode.frames.push(frame.rgb);
        episode.gt_masks.push(frame.labels);
        episode.gt_depth.push(to_metres(&frame.depth_mm));
        episode.gt_track_ids.push(ids);
        episode.states.push(FrameState { sprites: sprites.clone(), arm });
    }
    Ok(episode)
}

/// Split sizes for `n` episodes in the given train/val/test proportions.
/// Validation and test sizes are rounded down; training takes the rest.
pub fn split_sizes(n: usize, ratio: [u32; 3]) -> (usize, usize, usize) {
    let total: u64 = ratio.iter().map(|&r| r as u64).sum();
    if total == 0 {
        return (n, 0, 0);
    }
    let val = (n as u64 * ratio[1] as u64 / total) as usize;
    let test = (n as u64 * ratio[2] as u64 / total) as usize;
    (n - val - test, val, test)
}

/// Configuration for a whole generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub scene: SceneSpec,
    pub num_episodes: usize,
    /// Train/val/test proportions.
    pub split_ratio: [u32; 3],
    /// Draw the object count uniformly from `1..=scene.num_objects` per episode.
    pub vary_num_objects: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scene: SceneSpec::default(),
            num_episodes: 2400,
            split_ratio: [2000, 200, 200],
            vary_num_objects: true,
        }
    }
}

/// Generates `config.num_episodes` episodes with seeds derived from the
/// template seed.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Vec<VideoEpisode>> {
    config.scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.scene.rng_seed);
    (0..config.num_episodes)
        .map(|i| {
            let mut spec = config.scene.clone();
            spec.rng_seed = rng.random();
            if config.vary_num_objects {
                spec.num_objects = rng.random_range(1..=config.scene.num_objects);
            }
            generate_episode(&spec).map_err(|e| Error::Episode {
                episode: i,
                reason: e.to_string(),
            })
        })
        .collect()
}
