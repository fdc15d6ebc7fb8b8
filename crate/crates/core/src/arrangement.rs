//! Object rearrangement: parse a current and a goal scene into objects,
//! match them by appearance, plan pick-and-place moves with edge parking,
//! execute them in a kinematic table simulator and score the result.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{greedy_assignment, solve_assignment};
use crate::data_synth::{render_scene, CameraMeta, RenderedFrame, SceneLayout, SceneSpec, SpriteState, TABLE_DEPTH_MM};
use crate::error::{Error, Result};
use crate::metrics::slots_to_labelframes;
use crate::net::{ApexNet, SceneState, StepContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Matching {
    /// Minimum total cost one-to-one assignment.
    #[default]
    Optimal,
    /// Cheapest pair first.
    Greedy,
    /// `i`-th current object to `i`-th goal object (control).
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArrangementConfig {
    /// Two objects occupy the same place when closer than this factor
    /// times the sum of their extents.
    pub occupancy_factor: f64,
    /// Spacing of candidate parking sites along the table edge.
    pub edge_step: f64,
    pub matching: Matching,
    /// Distance counted as a successful placement.
    pub tolerance: f64,
    pub off_table_penalty: f64,
    /// Detections with fewer pixels are discarded.
    pub min_mask_pixels: usize,
}

impl Default for ArrangementConfig {
    fn default() -> Self {
        ArrangementConfig {
            occupancy_factor: 1.1,
            edge_step: 1.0 / 32.0,
            matching: Matching::Optimal,
            tolerance: 0.01,
            off_table_penalty: 1.0,
            min_mask_pixels: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectDescriptor {
    pub appearance_code: Vec<f64>,
    /// Table coordinates in world units.
    pub position: [f64; 2],
    /// Footprint radius in world units.
    pub extent: f64,
    /// Height above the table in world units.
    pub height: f64,
    #[serde(skip)]
    pub source_mask: Vec<bool>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Descriptor of one object mask: depth-filtered centroid, footprint radius
/// from the mask area, mean height.
pub fn describe_mask(
    mask: &[bool],
    depth: &[f32],
    camera: &CameraMeta,
    width: usize,
    height: usize,
    appearance_code: Vec<f64>,
) -> Option<ObjectDescriptor> {
    let table = camera.table_depth as f32 - 1e-3;
    let raised: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] && depth[i] < table).collect();
    let pixels: Vec<usize> = if raised.is_empty() { (0..mask.len()).filter(|&i| mask[i]).collect() } else { raised };
    if pixels.is_empty() {
        return None;
    }
    let n = pixels.len() as f64;
    let (mut sx, mut sy, mut sh) = (0.0, 0.0, 0.0);
    for &i in &pixels {
        sx += (i % width) as f64 + 0.5;
        sy += (i / width) as f64 + 0.5;
        sh += camera.table_depth - depth[i] as f64;
    }
    let position = camera.pixel_to_world(sx / n, sy / n, width, height);
    let extent = (n / std::f64::consts::PI).sqrt() * camera.table_extent.0 / width as f64;
    Some(ObjectDescriptor { appearance_code, position, extent, height: sh / n, source_mask: mask.to_vec() })
}

/// Descriptors from a ground-truth label map; the appearance code is the
/// mean colour of each object.
pub fn parse_scene_gt(frame: &RenderedFrame, camera: &CameraMeta, width: usize, height: usize) -> Vec<ObjectDescriptor> {
    let depth: Vec<f32> = frame.depth_mm.iter().map(|&d| d as f32 / 1000.0).collect();
    let mut labels: Vec<u8> = frame.labels.iter().copied().filter(|&l| l != 0).collect();
    labels.sort_unstable();
    labels.dedup();
    labels
        .into_iter()
        .filter_map(|l| {
            let mask: Vec<bool> = frame.labels.iter().map(|&x| x == l).collect();
            let mut rgb = [0.0; 3];
            let mut n = 0.0;
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    for c in 0..3 {
                        rgb[c] += frame.rgb[3 * i + c] as f64 / 255.0;
                    }
                    n += 1.0;
                }
            }
            describe_mask(&mask, &depth, camera, width, height, rgb.iter().map(|v| v / n).collect())
        })
        .collect()
}

/// Descriptors from one deterministic, discovery-only pass of the model.
pub fn parse_scene(
    model: &ApexNet,
    frame: &RenderedFrame,
    camera: &CameraMeta,
    cfg: &ArrangementConfig,
) -> Result<Vec<ObjectDescriptor>> {
    let (h, w) = (model.config.image_height, model.config.image_width);
    if frame.rgb.len() != 3 * h * w {
        return Err(Error::Shape(format!("frame has {} bytes, model expects {h}x{w} RGB", frame.rgb.len())));
    }
    let mut chw = vec![0f32; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            chw[c * h * w + i] = frame.rgb[3 * i + c] as f32 / 255.0;
        }
    }
    let x = candle_core::Tensor::from_vec(chw, (3, h, w), model.device())?;
    let (state, out) = model.step(&SceneState::new(), &x, &mut StepContext::deterministic())?;
    let (labels, _) = slots_to_labelframes(std::slice::from_ref(&out))?;
    let depth: Vec<f32> = frame.depth_mm.iter().map(|&d| d as f32 / 1000.0).collect();
    let mut found = Vec::new();
    for slot in &state.slots {
        let mask: Vec<bool> = labels[0].labels.iter().map(|&l| l as u64 == slot.id).collect();
        if mask.iter().filter(|&&m| m).count() < cfg.min_mask_pixels {
            continue;
        }
        let code = slot.what_posterior.mean.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
        if let Some(d) = describe_mask(&mask, &depth, camera, w, h, code) {
            found.push(d);
        }
    }
    Ok(found)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(current index, goal index, appearance distance)`
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_current: Vec<usize>,
    pub unmatched_goal: Vec<usize>,
    pub total_cost: f64,
}

fn code_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn match_objects(current: &[ObjectDescriptor], goal: &[ObjectDescriptor], matching: Matching) -> Result<Assignment> {
    if current.is_empty() || goal.is_empty() {
        return Err(Error::Arrangement("cannot match: a scene has no detected objects".into()));
    }
    let cost: Vec<Vec<f64>> =
        current.iter().map(|c| goal.iter().map(|g| code_distance(&c.appearance_code, &g.appearance_code)).collect()).collect();
    let rows = match matching {
        Matching::Optimal => solve_assignment(&cost),
        Matching::Greedy => greedy_assignment(&cost),
        Matching::Identity => (0..current.len()).map(|i| (i < goal.len()).then_some(i)).collect(),
    };
    let pairs: Vec<(usize, usize, f64)> = rows.iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j, cost[i][j]))).collect();
    let unmatched_current = (0..current.len()).filter(|i| rows[*i].is_none()).collect();
    let unmatched_goal = (0..goal.len()).filter(|j| !pairs.iter().any(|p| p.1 == *j)).collect();
    let total_cost = pairs.iter().map(|p| p.2).sum();
    Ok(Assignment { pairs, unmatched_current, unmatched_goal, total_cost })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubTask {
    /// Index into the current descriptors.
    pub object: usize,
    pub from: [f64; 2],
    pub to: [f64; 2],
    pub park: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ArrangementPlan {
    pub tasks: Vec<SubTask>,
}

impl ArrangementPlan {
    pub fn num_parks(&self) -> usize {
        self.tasks.iter().filter(|t| t.park).count()
    }
}

fn is_free(target: [f64; 2], mover: usize, pos: &[[f64; 2]], ext: &[f64], factor: f64) -> bool {
    (0..pos.len()).all(|j| j == mover || dist(target, pos[j]) >= factor * (ext[mover] + ext[j]))
}

fn edge_sites(extent: f64, camera: &CameraMeta, step: f64) -> Vec<[f64; 2]> {
    let (w, h) = camera.table_extent;
    let m = extent;
    let mut sites = Vec::new();
    if m * 2.0 > w.min(h) {
        return sites;
    }
    let n_x = ((w - 2.0 * m) / step).floor() as usize;
    let n_y = ((h - 2.0 * m) / step).floor() as usize;
    for k in 0..=n_x {
        let x = m + k as f64 * step;
        sites.push([x, m]);
        sites.push([x, h - m]);
    }
    for k in 0..=n_y {
        let y = m + k as f64 * step;
        sites.push([m, y]);
        sites.push([w - m, y]);
    }
    sites
}

/// Greedy occupancy-checked schedule. Objects whose target is free move
/// directly; on deadlock the first unsorted object is parked at the nearest
/// free edge site, and parked objects are restored at the end.
pub fn plan_arrangement(
    assignment: &Assignment,
    current: &[ObjectDescriptor],
    goal: &[ObjectDescriptor],
    camera: &CameraMeta,
    cfg: &ArrangementConfig,
) -> Result<ArrangementPlan> {
    let mut pos: Vec<[f64; 2]> = current.iter().map(|d| d.position).collect();
    let ext: Vec<f64> = current.iter().map(|d| d.extent).collect();
    let target = |i: usize| assignment.pairs.iter().find(|p| p.0 == i).map(|p| goal[p.1].position);
    let mut pending: Vec<usize> = assignment
        .pairs
        .iter()
        .map(|p| p.0)
        .filter(|&i| dist(pos[i], target(i).expect("paired")) > cfg.tolerance)
        .collect();
    let mut parked: Vec<usize> = Vec::new();
    let mut plan = ArrangementPlan::default();
    let f = cfg.occupancy_factor;
    while !pending.is_empty() {
        if let Some(k) = pending.iter().position(|&i| is_free(target(i).unwrap(), i, &pos, &ext, f)) {
            let i = pending.remove(k);
            let to = target(i).unwrap();
            plan.tasks.push(SubTask { object: i, from: pos[i], to, park: false });
            pos[i] = to;
            continue;
        }
        let i = pending.remove(0);
        let unfinished: Vec<usize> = pending.iter().chain(parked.iter()).copied().collect();
        let site = edge_sites(ext[i], camera, cfg.edge_step)
            .into_iter()
            .filter(|s| is_free(*s, i, &pos, &ext, f))
            .filter(|s| unfinished.iter().all(|&k| dist(*s, target(k).unwrap()) >= f * (ext[i] + ext[k])))
            .min_by(|a, b| dist(*a, pos[i]).total_cmp(&dist(*b, pos[i])))
            .ok_or_else(|| Error::Arrangement(format!("no free edge site to park object {i}")))?;
        plan.tasks.push(SubTask { object: i, from: pos[i], to: site, park: true });
        pos[i] = site;
        parked.push(i);
    }
    for i in parked {
        let to = target(i).unwrap();
        if !is_free(to, i, &pos, &ext, f) {
            return Err(Error::Arrangement(format!("target of parked object {i} stays occupied")));
        }
        plan.tasks.push(SubTask { object: i, from: pos[i], to, park: false });
        pos[i] = to;
    }
    Ok(plan)
}

/// True when no task of `plan` moves into space occupied at that time.
pub fn plan_respects_occupancy(plan: &ArrangementPlan, current: &[ObjectDescriptor], factor: f64) -> bool {
    let mut pos: Vec<[f64; 2]> = current.iter().map(|d| d.position).collect();
    let ext: Vec<f64> = current.iter().map(|d| d.extent).collect();
    for t in &plan.tasks {
        if !is_free(t.to, t.object, &pos, &ext, factor) {
            return false;
        }
        pos[t.object] = t.to;
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimObject {
    pub id: u32,
    pub position: [f64; 2],
    pub radius: f64,
}

/// Kinematic table: picks grab the object under the gripper, places
/// translate it and are rejected on collision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulator {
    pub objects: Vec<SimObject>,
    pub camera: CameraMeta,
}

impl Simulator {
    /// Moves the object under `from` so that point lands on `to`.
    /// Returns false if nothing is picked or the place collides.
    pub fn pick_place(&mut self, from: [f64; 2], to: [f64; 2]) -> bool {
        let Some(k) = (0..self.objects.len())
            .filter(|&k| dist(self.objects[k].position, from) <= self.objects[k].radius)
            .min_by(|&a, &b| dist(self.objects[a].position, from).total_cmp(&dist(self.objects[b].position, from)))
        else {
            return false;
        };
        let o = &self.objects[k];
        let new = [o.position[0] + to[0] - from[0], o.position[1] + to[1] - from[1]];
        let clash = self
            .objects
            .iter()
            .enumerate()
            .any(|(j, other)| j != k && dist(new, other.position) < o.radius + other.radius);
        if clash {
            return false;
        }
        self.objects[k].position = new;
        true
    }

    pub fn position_of(&self, id: u32) -> Option<[f64; 2]> {
        self.objects.iter().find(|o| o.id == id).map(|o| o.position)
    }

    /// Mean distance to the goals; objects off the table cost the penalty.
    pub fn score(&self, goals: &[(u32, [f64; 2])], cfg: &ArrangementConfig) -> f64 {
        if goals.is_empty() {
            return 0.0;
        }
        let total: f64 = goals
            .iter()
            .map(|(id, g)| match self.position_of(*id) {
                Some(p) if self.camera.on_table(p) => dist(p, *g),
                _ => cfg.off_table_penalty,
            })
            .sum();
        total / goals.len() as f64
    }
}

/// Runs every sub-task and scores the final state. Returns the score and the
/// number of rejected sub-tasks.
pub fn execute_and_score(
    plan: &ArrangementPlan,
    sim: &mut Simulator,
    goals: &[(u32, [f64; 2])],
    cfg: &ArrangementConfig,
) -> (f64, usize) {
    let rejected = plan.tasks.iter().filter(|t| !sim.pick_place(t.from, t.to)).count();
    (sim.score(goals, cfg), rejected)
}

/// A current and a goal table with the same objects.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub seed: u64,
    pub current: SceneLayout,
    pub goal: SceneLayout,
    pub current_frame: RenderedFrame,
    pub goal_frame: RenderedFrame,
    pub camera: CameraMeta,
}

fn sprite_world(s: &SpriteState, w: usize, h: usize, camera: &CameraMeta) -> [f64; 2] {
    camera.pixel_to_world(s.center.0 as f64 + 0.5, s.center.1 as f64 + 0.5, w, h)
}

/// Footprint centroid of sprite `s` in `frame`, or its centre if hidden.
fn footprint_world(s: &SpriteState, frame: &RenderedFrame, w: usize, h: usize, camera: &CameraMeta) -> [f64; 2] {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (i, &l) in frame.labels.iter().enumerate() {
        if l as u32 == s.id {
            sx += (i % w) as f64 + 0.5;
            sy += (i / w) as f64 + 0.5;
            n += 1.0;
        }
    }
    if n == 0.0 {
        return sprite_world(s, w, h, camera);
    }
    camera.pixel_to_world(sx / n, sy / n, w, h)
}

impl Scenario {
    /// Ground-truth goals keyed by sprite id.
    pub fn goals(&self) -> Vec<(u32, [f64; 2])> {
        let (w, h) = (self.goal.width, self.goal.height);
        self.goal.sprites.iter().map(|s| (s.id, footprint_world(s, &self.goal_frame, w, h, &self.camera))).collect()
    }

    /// Simulator initialised with the current table; positions and radii
    /// come from the rendered footprints.
    pub fn simulator(&self) -> Simulator {
        let (w, h) = (self.current.width, self.current.height);
        let objects = self
            .current
            .sprites
            .iter()
            .map(|s| {
                let area = self.current_frame.labels.iter().filter(|&&l| l as u32 == s.id).count() as f64;
                SimObject {
                    id: s.id,
                    position: footprint_world(s, &self.current_frame, w, h, &self.camera),
                    radius: (area / std::f64::consts::PI).sqrt() * self.camera.table_extent.0 / w as f64,
                }
            })
            .collect();
        Simulator { objects, camera: self.camera }
    }
}

fn place_layout(
    spec: &SceneSpec,
    rng: &mut ChaCha8Rng,
    radii: &[i32],
    clearance: f64,
) -> Option<Vec<(i32, i32)>> {
    let (w, h) = (spec.image_width as i32, spec.image_height as i32);
    'attempt: for _ in 0..1000 {
        let mut centers: Vec<(i32, i32)> = Vec::with_capacity(radii.len());
        for &r in radii {
            let reach = r as f64 * std::f64::consts::SQRT_2 + 1.0;
            let mut ok = None;
            for _ in 0..200 {
                let c = (rng.random_range(r + 1..w - r - 1), rng.random_range(r + 1..h - r - 1));
                let free = centers.iter().zip(radii).all(|(o, &ro)| {
                    let ro_reach = ro as f64 * std::f64::consts::SQRT_2 + 1.0;
                    let d = (((c.0 - o.0).pow(2) + (c.1 - o.1).pow(2)) as f64).sqrt();
                    d >= clearance * (reach + ro_reach)
                });
                if free {
                    ok = Some(c);
                    break;
                }
            }
            match ok {
                Some(c) => centers.push(c),
                None => continue 'attempt,
            }
        }
        return Some(centers);
    }
    None
}

/// Random current and goal tables holding the same `num_objects` sprites.
pub fn generate_scenario(spec: &SceneSpec, num_objects: usize, seed: u64) -> Result<Scenario> {
    if num_objects == 0 || num_objects > spec.palette.len() {
        return Err(Error::Spec(format!("{num_objects} objects but {} palette colours", spec.palette.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radii: Vec<i32> =
        (0..num_objects).map(|_| rng.random_range(spec.sprite_radius.0..=spec.sprite_radius.1) as i32).collect();
    let mut colours = spec.palette.clone();
    let bodies: Vec<_> = radii
        .iter()
        .map(|&r| {
            let colour = colours.remove(rng.random_range(0..colours.len()));
            let shape = spec.sprite_shapes[rng.random_range(0..spec.sprite_shapes.len())];
            (r, colour, shape)
        })
        .collect();
    let background = spec.background_palette[rng.random_range(0..spec.background_palette.len())];
    let clearance = 1.25;
    let over = || Error::OverDense { num_objects, attempts: 1000 };
    let cur = place_layout(spec, &mut rng, &radii, clearance).ok_or_else(over)?;
    let goal = place_layout(spec, &mut rng, &radii, clearance).ok_or_else(over)?;
    let layout = |centers: &[(i32, i32)]| SceneLayout {
        width: spec.image_width,
        height: spec.image_height,
        background,
        sprites: bodies
            .iter()
            .zip(centers)
            .enumerate()
            .map(|(i, (&(r, colour, shape), &center))| SpriteState {
                id: i as u32 + 1,
                shape,
                colour,
                center,
                radius: r,
                height_mm: 20 + 5 * r as u16,
                velocity: (0, 0),
            })
            .collect(),
        arm: None,
        arm_colour: spec.arm_colour,
    };
    let current = layout(&cur);
    let goal = layout(&goal);
    Ok(Scenario {
        seed,
        current_frame: render_scene(&current),
        goal_frame: render_scene(&goal),
        current,
        goal,
        camera: CameraMeta { table_depth: TABLE_DEPTH_MM as f64 / 1000.0, ..CameraMeta::default() },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub seed: u64,
    pub num_objects: usize,
    pub score: f64,
    pub solved: bool,
    pub failure: Option<String>,
    pub assignment: Option<Assignment>,
    pub plan: Option<ArrangementPlan>,
    pub rejected_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrangementReport {
    pub perception: String,
    pub matching: Matching,
    pub mean: f64,
    pub std: f64,
    pub solved: usize,
    pub scenarios: Vec<ScenarioResult>,
}

/// Full pipeline on one scenario. `model = None` uses ground-truth masks.
pub fn run_scenario(scenario: &Scenario, model: Option<&ApexNet>, cfg: &ArrangementConfig) -> Result<ScenarioResult> {
    let (w, h) = (scenario.current.width, scenario.current.height);
    let goals = scenario.goals();
    let mut sim = scenario.simulator();
    let n = goals.len();
    let failed = |reason: String, sim: &Simulator| ScenarioResult {
        seed: scenario.seed,
        num_objects: n,
        score: sim.score(&goals, cfg),
        solved: false,
        failure: Some(reason),
        assignment: None,
        plan: None,
        rejected_tasks: 0,
    };
    let (cur, goal) = match model {
        Some(m) => (
            parse_scene(m, &scenario.current_frame, &scenario.camera, cfg)?,
            parse_scene(m, &scenario.goal_frame, &scenario.camera, cfg)?,
        ),
        None => (
            parse_scene_gt(&scenario.current_frame, &scenario.camera, w, h),
            parse_scene_gt(&scenario.goal_frame, &scenario.camera, w, h),
        ),
    };
    let assignment = match match_objects(&cur, &goal, cfg.matching) {
        Ok(a) => a,
        Err(e) => return Ok(failed(e.to_string(), &sim)),
    };
    let plan = match plan_arrangement(&assignment, &cur, &goal, &scenario.camera, cfg) {
        Ok(p) => p,
        Err(e) => return Ok(ScenarioResult { assignment: Some(assignment), ..failed(e.to_string(), &sim) }),
    };
    let (score, rejected) = execute_and_score(&plan, &mut sim, &goals, cfg);
    Ok(ScenarioResult {
        seed: scenario.seed,
        num_objects: n,
        score,
        solved: true,
        failure: None,
        assignment: Some(assignment),
        plan: Some(plan),
        rejected_tasks: rejected,
    })
}

pub fn summarize(perception: &str, matching: Matching, scenarios: Vec<ScenarioResult>) -> ArrangementReport {
    let n = scenarios.len().max(1) as f64;
    let mean = scenarios.iter().map(|s| s.score).sum::<f64>() / n;
    let var = scenarios.iter().map(|s| (s.score - mean).powi(2)).sum::<f64>() / n;
    ArrangementReport {
        perception: perception.to_string(),
        matching,
        mean,
        std: var.sqrt(),
        solved: scenarios.iter().filter(|s| s.solved).count(),
        scenarios,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(code: &[f64], pos: [f64; 2], extent: f64) -> ObjectDescriptor {
        ObjectDescriptor { appearance_code: code.to_vec(), position: pos, extent, height: 0.02, source_mask: vec![] }
    }

    #[test]
    fn identical_lists_match_identically() {
        let d = vec![desc(&[0.0, 1.0], [0.2, 0.2], 0.05), desc(&[1.0, 0.0], [0.7, 0.7], 0.05)];
        let a = match_objects(&d, &d, Matching::Optimal).unwrap();
        assert_eq!(a.pairs.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(), vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 0.0);
        assert!(match_objects(&d, &[], Matching::Optimal).is_err());
    }

    #[test]
    fn surplus_objects_are_reported() {
        let cur = vec![desc(&[0.0], [0.2, 0.2], 0.05), desc(&[5.0], [0.5, 0.5], 0.05), desc(&[9.0], [0.8, 0.8], 0.05)];
        let goal = vec![desc(&[9.1], [0.2, 0.8], 0.05)];
        let a = match_objects(&cur, &goal, Matching::Optimal).unwrap();
        assert_eq!(a.pairs.len(), 1);
        assert_eq!(a.pairs[0].0, 2);
        assert_eq!(a.unmatched_current, vec![0, 1]);
    }

    #[test]
    fn free_targets_need_no_parking() {
        let cur = vec![desc(&[0.0], [0.2, 0.2], 0.05), desc(&[1.0], [0.2, 0.6], 0.05)];
        let goal = vec![desc(&[0.0], [0.7, 0.2], 0.05), desc(&[1.0], [0.7, 0.6], 0.05)];
        let a = match_objects(&cur, &goal, Matching::Optimal).unwrap();
        let plan = plan_arrangement(&a, &cur, &goal, &CameraMeta::default(), &ArrangementConfig::default()).unwrap();
        assert_eq!(plan.tasks.len(), 2);
        assert_eq!(plan.num_parks(), 0);
    }

    #[test]
    fn swap_needs_three_moves() {
        let cur = vec![desc(&[0.0], [0.4, 0.5], 0.05), desc(&[1.0], [0.6, 0.5], 0.05)];
        let goal = vec![desc(&[0.0], [0.6, 0.5], 0.05), desc(&[1.0], [0.4, 0.5], 0.05)];
        let cfg = ArrangementConfig::default();
        let a = match_objects(&cur, &goal, Matching::Optimal).unwrap();
        let plan = plan_arrangement(&a, &cur, &goal, &CameraMeta::default(), &cfg).unwrap();
        assert_eq!(plan.tasks.len(), 3);
        assert!(plan.tasks[0].park);
        assert_eq!(plan.tasks[0].object, 0);
        assert_eq!(plan.tasks[2].object, 0);
        assert!(plan_respects_occupancy(&plan, &cur, cfg.occupancy_factor));
    }

    #[test]
    fn off_table_costs_the_penalty() {
        let cfg = ArrangementConfig::default();
        let mut sim = Simulator {
            objects: vec![SimObject { id: 1, position: [0.5, 0.5], radius: 0.05 }, SimObject { id: 2, position: [0.2, 0.2], radius: 0.05 }],
            camera: CameraMeta::default(),
        };
        assert!(sim.pick_place([0.5, 0.5], [1.5, 0.5]));
        let goals = vec![(1, [0.5, 0.5]), (2, [0.2, 0.2])];
        assert!((sim.score(&goals, &cfg) - 0.5).abs() < 1e-12);
        assert!(!sim.pick_place([0.9, 0.9], [0.1, 0.1]));
        assert!(!sim.pick_place([0.2, 0.2], [1.5, 0.52]), "collides with the first object");
    }

    #[test]
    fn ground_truth_pipeline_is_nearly_exact() {
        let spec = SceneSpec { sprite_radius: (3, 5), ..SceneSpec::default() };
        for seed in 0..10 {
            let sc = generate_scenario(&spec, 3, seed).unwrap();
            let r = run_scenario(&sc, None, &ArrangementConfig::default()).unwrap();
            if r.solved {
                assert!(r.score < 0.01, "seed {seed}: {}", r.score);
                assert_eq!(r.rejected_tasks, 0);
            }
        }
    }
}
