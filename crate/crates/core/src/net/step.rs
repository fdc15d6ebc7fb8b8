use candle_core::{Module, Tensor};

use super::config::Likelihood;
use super::layers::{scalar, to_vec_f64, ConvLstmState};
use super::model::{context_probability, ApexNet, FeatureMap};
use crate::error::{Error, Result};
use crate::latents::{kl_bernoulli, kl_gaussian_exclusive, kl_gaussian_inclusive, DiagonalGaussian, NoiseSource, RelaxedBernoulli};
use crate::mask_compose::{
    compose_masks, foreground_mask, gaussian_log_likelihood, mask_entropy_loss, mixture_log_likelihood, ComponentMeans,
    MaskStack, PoseParams,
};

/// One tracked object. Tensors keep a leading batch dimension of one so slots
/// can be stacked for batched propagation.
#[derive(Debug, Clone)]
pub struct ObjectSlot {
    pub id: u64,
    /// `[1]`
    pub z_pres: Tensor,
    /// `[1, 4]` pose `(scale_x, scale_y, center_x, center_y)`
    pub z_where: Tensor,
    pub where_posterior: DiagonalGaussian,
    /// `[1, A]`
    pub z_what: Tensor,
    pub what_posterior: DiagonalGaussian,
    pub hidden_where: Tensor,
    pub hidden_what: Tensor,
    pub hidden_pres: Tensor,
    /// Frame index at which the slot was discovered.
    pub born: usize,
}

impl ObjectSlot {
    pub fn presence(&self) -> Result<f64> {
        scalar(&self.z_pres)
    }

    pub fn pose(&self) -> Result<PoseParams> {
        Ok(PoseParams::unstack(&self.z_where)?[0])
    }

    fn detach(&self) -> Self {
        ObjectSlot {
            id: self.id,
            z_pres: self.z_pres.detach(),
            z_where: self.z_where.detach(),
            where_posterior: DiagonalGaussian { mean: self.where_posterior.mean.detach(), log_std: self.where_posterior.log_std.detach() },
            z_what: self.z_what.detach(),
            what_posterior: DiagonalGaussian { mean: self.what_posterior.mean.detach(), log_std: self.what_posterior.log_std.detach() },
            hidden_where: self.hidden_where.detach(),
            hidden_what: self.hidden_what.detach(),
            hidden_pres: self.hidden_pres.detach(),
            born: self.born,
        }
    }
}

/// Everything carried from one frame to the next.
#[derive(Debug, Clone, Default)]
pub struct SceneState {
    pub slots: Vec<ObjectSlot>,
    /// `[1, B]`
    pub z_bg: Option<Tensor>,
    pub bg_posterior: Option<DiagonalGaussian>,
    /// Number of frames processed so far.
    pub time_index: usize,
    pub encoder_memory: Option<ConvLstmState>,
    /// Next id to hand out; ids are never reused within an episode.
    pub next_id: u64,
}

impl SceneState {
    pub fn new() -> Self {
        SceneState { next_id: 1, ..Default::default() }
    }

    pub fn ids(&self) -> Vec<u64> {
        self.slots.iter().map(|s| s.id).collect()
    }

    /// Drops the autograd history, for evaluation.
    pub fn detach(&self) -> Self {
        SceneState {
            slots: self.slots.iter().map(ObjectSlot::detach).collect(),
            z_bg: self.z_bg.as_ref().map(Tensor::detach),
            bg_posterior: self.bg_posterior.as_ref().map(|q| DiagonalGaussian { mean: q.mean.detach(), log_std: q.log_std.detach() }),
            time_index: self.time_index,
            encoder_memory: self.encoder_memory.as_ref().map(ConvLstmState::detach),
            next_id: self.next_id,
        }
    }
}

/// Sampling controls for one step. Without a noise source the step is
/// deterministic: posterior means and hard presences `q >= 0.5`.
pub struct StepContext<'a> {
    pub iteration: usize,
    pub noise: Option<&'a mut NoiseSource>,
}

impl<'a> StepContext<'a> {
    pub fn sample(iteration: usize, noise: &'a mut NoiseSource) -> Self {
        StepContext { iteration, noise: Some(noise) }
    }

    pub fn deterministic() -> Self {
        StepContext { iteration: usize::MAX, noise: None }
    }

    fn gaussian(&mut self, q: &DiagonalGaussian) -> Result<Tensor> {
        match self.noise.as_deref_mut() {
            Some(n) => {
                let eps = n.normal(q.mean.dims(), q.mean.dtype(), q.mean.device())?;
                q.sample(&eps)
            }
            None => Ok(q.mean.clone()),
        }
    }

    fn presence(&mut self, prob: &Tensor, temperature: f64) -> Result<Tensor> {
        match self.noise.as_deref_mut() {
            Some(n) => {
                let u = n.uniform(prob.dims(), prob.dtype(), prob.device())?;
                RelaxedBernoulli::from_prob(prob, temperature)?.sample(&u, false)
            }
            None => Ok(prob.ge(0.5)?.to_dtype(prob.dtype())?),
        }
    }
}

/// Object reported by a step, in the order of the step's foreground masks.
#[derive(Debug, Clone, PartialEq)]
pub struct StepObject {
    /// Slot id if the object survived filtering.
    pub id: Option<u64>,
    pub z_pres: f64,
    pub pose: PoseParams,
    pub propagated: bool,
}

/// Loss terms and diagnostics of one step. Scalars are 0-d tensors.
#[derive(Debug, Clone)]
pub struct StepOutputs {
    pub log_likelihood: Tensor,
    pub kl_pres: Tensor,
    pub kl_where: Tensor,
    pub kl_what: Tensor,
    pub kl_bg: Tensor,
    /// Presence, where and what KLs of propagated objects.
    pub kl_propagated: Tensor,
    /// Presence, where and what KLs of discovery proposals.
    pub kl_discovered: Tensor,
    pub entropy: Tensor,
    pub masks: MaskStack,
    /// `[3, H, W]` mask-weighted mean image.
    pub reconstruction: Tensor,
    /// `[N, 3, H, W]` placed object appearances.
    pub fg_means: Tensor,
    /// `[3, H, W]`
    pub bg_mean: Tensor,
    pub objects: Vec<StepObject>,
    pub num_propagated: usize,
    pub num_proposals: usize,
    /// `[D]`
    pub p_proposal: Tensor,
    /// `[D]`
    pub p_context: Tensor,
    /// Discoveries dropped because the slot cap was reached.
    pub capped: usize,
}

impl StepOutputs {
    pub fn kl_total(&self) -> Result<Tensor> {
        Ok((((&self.kl_pres + &self.kl_where)? + &self.kl_what)? + &self.kl_bg)?)
    }

    /// Ids of the objects that survived filtering, in mask order.
    pub fn surviving_ids(&self) -> Vec<u64> {
        self.objects.iter().filter_map(|o| o.id).collect()
    }
}

/// Keeps slots whose presence reaches `threshold`.
pub fn filter_slots(slots: Vec<ObjectSlot>, threshold: f64) -> Result<Vec<ObjectSlot>> {
    let mut kept = Vec::with_capacity(slots.len());
    for s in slots {
        if s.presence()? >= threshold {
            kept.push(s);
        }
    }
    Ok(kept)
}

struct Branch {
    poses: Tensor,
    z_what: Tensor,
    z_pres: Tensor,
    q_where: DiagonalGaussian,
    q_what: DiagonalGaussian,
    h_where: Tensor,
    h_what: Tensor,
    h_pres: Tensor,
    kl_pres: Tensor,
    kl_where: Tensor,
    kl_what: Tensor,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl ApexNet {
    fn zeros(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(shape, self.dtype(), self.device())?)
    }

    fn kl_latent(&self, q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<Tensor> {
        if self.config.inclusive_kl {
            kl_gaussian_inclusive(q, p)
        } else {
            kl_gaussian_exclusive(q, p)
        }
    }

    /// Propagates `slots` onto the current feature map.
    fn propagate(&self, slots: &[ObjectSlot], e: &FeatureMap, x: &Tensor, ctx: &mut StepContext) -> Result<Branch> {
        let c = &self.config;
        let n = slots.len();
        let cat = |f: &dyn Fn(&ObjectSlot) -> &Tensor| Tensor::cat(&slots.iter().map(f).collect::<Vec<_>>(), 0);
        let prev_pose = cat(&|s| &s.z_where)?;
        let prev_what = cat(&|s| &s.z_what)?;
        let prev_pres = cat(&|s| &s.z_pres)?;
        let h_where = cat(&|s| &s.hidden_where)?;
        let h_what = cat(&|s| &s.hidden_what)?;
        let h_pres = cat(&|s| &s.hidden_pres)?;

        let side = prev_pose.narrow(1, 0, 1)?.maximum(&prev_pose.narrow(1, 1, 1)?)?;
        let square = Tensor::cat(&[&side, &side, &prev_pose.narrow(1, 2, 2)?], 1)?;
        let c_p = self.patch_enc.forward(&self.crop_glimpses(e, x, &square)?)?;

        let h_where = self.where_rnn.forward(&Tensor::cat(&[&c_p, &prev_what, &prev_pose], 1)?, &h_where)?;
        let q_where = DiagonalGaussian::from_params(&self.where_head.forward(&h_where)?)?;
        let u = ctx.gaussian(&q_where)?;
        let m = c.min_scale;
        let ratio = prev_pose.narrow(1, 0, 2)?.affine(1.0 / (1.0 - m), -m / (1.0 - m))?.clamp(1e-6, 1.0 - 1e-6)?;
        let prev_logit = (ratio.log()? - ratio.neg()?.affine(1.0, 1.0)?.log()?)?;
        let scales = candle_nn::ops::sigmoid(&(prev_logit + u.narrow(1, 0, 2)?)?)?.affine(1.0 - m, m)?;
        let step = 2.0 / c.grid_size as f64;
        let centers = (prev_pose.narrow(1, 2, 2)? + (u.narrow(1, 2, 2)?.tanh()? * step)?)?.clamp(-1.0, 1.0)?;
        let poses = Tensor::cat(&[&scales, &centers], 1)?;

        let g = self.glimpse_enc.forward(&self.crop_glimpses(e, x, &poses)?)?;
        let h_what = self.what_rnn.forward(&Tensor::cat(&[&g, &prev_what], 1)?, &h_what)?;
        let q_what = DiagonalGaussian::from_params(&self.what_head.forward(&h_what)?)?;
        let z_what = ctx.gaussian(&q_what)?;

        let pres_in = Tensor::cat(&[&c_p, &z_what, &prev_pres.unsqueeze(1)?], 1)?;
        let h_pres = self.pres_rnn.forward(&pres_in, &h_pres)?;
        let q_pres = candle_nn::ops::sigmoid(&self.pres_head.forward(&h_pres)?.squeeze(1)?)?;
        let z_pres = ctx.presence(&q_pres, c.temperature)?;

        let prior_pres = c.priors.propagation_pres_prob(&prev_pres.detach())?;
        let kl_pres = kl_bernoulli(&q_pres, &prior_pres)?;
        let pw = c.priors.propagation_where_std;
        let p_where = DiagonalGaussian::constant(n, &[0.0; 4], &[pw; 4], self.dtype(), self.device())?;
        let p_what = self.what_prior(n)?;
        let kl_where = (self.kl_latent(&q_where, &p_where)? * &z_pres)?;
        let kl_what = (self.kl_latent(&q_what, &p_what)? * &z_pres)?;
        Ok(Branch { poses, z_what, z_pres, q_where, q_what, h_where, h_what, h_pres, kl_pres, kl_where, kl_what })
    }

    fn what_prior(&self, n: usize) -> Result<DiagonalGaussian> {
        let a = self.config.what_dim;
        DiagonalGaussian::constant(n, &vec![0.0; a], &vec![self.config.priors.what_std; a], self.dtype(), self.device())
    }

    /// Centres of the discovery grid cells, `[D, 2]` as `(x, y)`.
    pub fn grid_anchors(&self) -> Result<Tensor> {
        let g = self.config.grid_size;
        let mut v = Vec::with_capacity(2 * g * g);
        for i in 0..g {
            for j in 0..g {
                v.push((2 * j + 1) as f64 / g as f64 - 1.0);
                v.push((2 * i + 1) as f64 / g as f64 - 1.0);
            }
        }
        Ok(Tensor::from_vec(v, (g * g, 2), self.device())?.to_dtype(self.dtype())?)
    }

    /// Prior over discovery pose latents.
    fn where_prior(&self, n: usize) -> Result<DiagonalGaussian> {
        let c = &self.config;
        let l = logit((c.priors.where_scale - c.min_scale) / (1.0 - c.min_scale));
        let s = c.priors.where_std;
        DiagonalGaussian::constant(n, &[l, l, 0.0, 0.0], &[s; 4], self.dtype(), self.device())
    }

    /// Discovery branch before presence: grid features, poses, codes and
    /// proposal probabilities.
    fn discover_latents(&self, e: &FeatureMap, x: &Tensor, ctx: &mut StepContext) -> Result<(Branch, Tensor, Tensor)> {
        let c = &self.config;
        let (fh, fw) = e.hw();
        let g = c.grid_size;
        let d = g * g;
        let pooled = e.features.avg_pool2d_with_stride((fh / g, fw / g), (fh / g, fw / g))?;
        let cd = self.disc_feat.forward(&pooled)?.relu()?;
        let code = cd.dim(1)?;
        let c_d = cd.reshape((code, d))?.t()?.contiguous()?;

        let q_where = DiagonalGaussian::from_params(&self.disc_where.forward(&c_d)?)?;
        let u = ctx.gaussian(&q_where)?;
        let m = c.min_scale;
        let scales = candle_nn::ops::sigmoid(&u.narrow(1, 0, 2)?)?.affine(1.0 - m, m)?;
        let offsets = (u.narrow(1, 2, 2)?.tanh()? * (2.0 / g as f64))?;
        let centers = (self.grid_anchors()? + offsets)?.clamp(-1.0, 1.0)?;
        let poses = Tensor::cat(&[&scales, &centers], 1)?;

        let glimpse = self.glimpse_enc.forward(&self.crop_glimpses(e, x, &poses)?)?;
        let a = c.what_dim;
        let h0 = self.zeros(&[d, c.hidden_dim])?;
        let h_what = self.what_rnn.forward(&Tensor::cat(&[&glimpse, &self.zeros(&[d, a])?], 1)?, &h0)?;
        let q_what = DiagonalGaussian::from_params(&self.what_head.forward(&h_what)?)?;
        let z_what = ctx.gaussian(&q_what)?;

        let p_in = Tensor::cat(&[&c_d, &z_what, &poses], 1)?;
        let p_proposal = candle_nn::ops::sigmoid(&self.disc_pres.forward(&p_in)?.squeeze(1)?)?;
        let kl_where = self.kl_latent(&q_where, &self.where_prior(d)?)?;
        let kl_what = self.kl_latent(&q_what, &self.what_prior(d)?)?;
        let placeholder = self.zeros(&[d])?;
        let branch = Branch {
            poses,
            z_what,
            z_pres: placeholder.clone(),
            q_where,
            q_what,
            h_where: h0.clone(),
            h_what,
            h_pres: h0,
            kl_pres: placeholder,
            kl_where,
            kl_what,
        };
        Ok((branch, p_proposal, c_d))
    }

    /// One inference step on frame `x_t` (`[3, H, W]`).
    pub fn step(&self, prev: &SceneState, x_t: &Tensor, ctx: &mut StepContext) -> Result<(SceneState, StepOutputs)> {
        let c = &self.config;
        let (h, w) = (c.image_height, c.image_width);
        let x = x_t.to_dtype(self.dtype())?;
        let (e, memory) = self.encode_sequence_step(&x, prev.encoder_memory.as_ref())?;

        let mut incoming = Vec::with_capacity(prev.slots.len());
        for s in &prev.slots {
            let p = s.pose()?;
            if p.to_array().iter().all(|v| v.is_finite()) && p.scale_x > 1e-6 && p.scale_y > 1e-6 {
                incoming.push(s.clone());
            } else {
                log::warn!("dropping slot {}: degenerate box {:?}", s.id, p);
            }
        }
        let np = incoming.len();
        let prop = if np > 0 { Some(self.propagate(&incoming, &e, &x, ctx)?) } else { None };
        let prop_dec = match &prop {
            Some(b) => Some(self.decode_object(&b.z_what)?),
            None => None,
        };

        let (mut disc, p_proposal, _c_d) = self.discover_latents(&e, &x, ctx)?;
        let disc_dec = self.decode_object(&disc.z_what)?;
        let scope = match (&prop, &prop_dec) {
            (Some(b), Some(dec)) => foreground_mask(&dec.logits, &b.z_pres, &b.poses, (h, w))?.neg()?.affine(1.0, 1.0)?,
            _ => Tensor::ones((h, w), self.dtype(), self.device())?,
        };
        let weights = self.proposal_weights(&disc_dec.logits, &disc.poses)?;
        let p_context = context_probability(&weights, &scope)?;
        let q_disc = (&p_proposal * &p_context)?;
        disc.z_pres = ctx.presence(&q_disc, c.temperature)?;
        let prior = c.priors.discovery_pres_prob(ctx.iteration);
        disc.kl_pres = kl_bernoulli(&q_disc, &q_disc.ones_like()?.affine(prior, 0.0)?)?;
        disc.kl_where = (&disc.kl_where * &disc.z_pres)?;
        disc.kl_what = (&disc.kl_what * &disc.z_pres)?;

        let branches: Vec<&Branch> = prop.iter().chain(std::iter::once(&disc)).collect();
        let decs: Vec<_> = prop_dec.iter().chain(std::iter::once(&disc_dec)).collect();
        let cat_b = |f: &dyn Fn(&Branch) -> &Tensor| Tensor::cat(&branches.iter().map(|b| f(b)).collect::<Vec<_>>(), 0);
        let poses = cat_b(&|b| &b.poses)?;
        let z_pres = cat_b(&|b| &b.z_pres)?;
        let logits = Tensor::cat(&decs.iter().map(|d| &d.logits).collect::<Vec<_>>(), 0)?;
        let appearance = Tensor::cat(&decs.iter().map(|d| &d.appearance).collect::<Vec<_>>(), 0)?;

        let masks = compose_masks(&logits, &z_pres, &poses, c.logit_bound, (h, w), c.mask_normalization)?;
        let fg_means = self.place_appearance(&appearance, &poses)?;

        let q_bg = self.encode_background(&x, &masks.bg_mask)?;
        let z_bg = ctx.gaussian(&q_bg)?;
        let bg_mean = self.decode_background(&z_bg)?;
        let p_bg = DiagonalGaussian::constant(1, &vec![0.0; c.bg_dim], &vec![c.priors.bg_std; c.bg_dim], self.dtype(), self.device())?;
        let kl_bg = kl_gaussian_exclusive(&q_bg, &p_bg)?.sum_all()?;

        let means = ComponentMeans { fg_means: fg_means.clone(), bg_mean: bg_mean.clone(), sigma_fg: c.sigma_fg, sigma_bg: c.sigma_bg };
        let log_likelihood = match c.likelihood {
            Likelihood::Mixture => mixture_log_likelihood(&x, &masks, &means)?,
            Likelihood::Gaussian => gaussian_log_likelihood(&x, &masks, &means)?,
        };
        let entropy = mask_entropy_loss(&masks)?;
        let reconstruction = (fg_means.broadcast_mul(&masks.fg_masks.unsqueeze(1)?)?.sum(0)?
            + bg_mean.broadcast_mul(&masks.bg_mask.unsqueeze(0)?)?)?;

        let sum = |f: &dyn Fn(&Branch) -> &Tensor, bs: &[&Branch]| -> Result<Tensor> {
            let mut acc = Tensor::zeros((), self.dtype(), self.device())?;
            for b in bs {
                acc = (acc + f(b).sum_all()?)?;
            }
            Ok(acc)
        };
        let kl_pres = sum(&|b| &b.kl_pres, &branches)?;
        let kl_where = sum(&|b| &b.kl_where, &branches)?;
        let kl_what = sum(&|b| &b.kl_what, &branches)?;
        let branch_kl = |b: &Branch| -> Result<Tensor> {
            Ok(((b.kl_pres.sum_all()? + b.kl_where.sum_all()?)? + b.kl_what.sum_all()?)?)
        };
        let kl_propagated = match &prop {
            Some(b) => branch_kl(b)?,
            None => self.zeros(&[])?,
        };
        let kl_discovered = branch_kl(&disc)?;

        // Filtering, the slot cap and id assignment.
        let pres_values = to_vec_f64(&z_pres)?;
        let pose_values = PoseParams::unstack(&poses)?;
        let d = c.num_proposals();
        let keep_prop: Vec<usize> = (0..np).filter(|&i| pres_values[i] >= c.filter_threshold).collect();
        let mut keep_disc: Vec<usize> = (np..np + d).filter(|&i| pres_values[i] >= c.filter_threshold).collect();
        let room = c.slot_cap.saturating_sub(keep_prop.len());
        let mut capped = 0;
        if keep_disc.len() > room {
            let mut by_pres = keep_disc.clone();
            by_pres.sort_by(|&a, &b| pres_values[b].total_cmp(&pres_values[a]).then(a.cmp(&b)));
            by_pres.truncate(room);
            capped = keep_disc.len() - room;
            log::info!("slot cap {} reached: dropping {capped} discoveries", c.slot_cap);
            keep_disc.retain(|i| by_pres.contains(i));
        }
        let keep_prop = if keep_prop.len() > c.slot_cap {
            let mut by_pres = keep_prop.clone();
            by_pres.sort_by(|&a, &b| pres_values[b].total_cmp(&pres_values[a]).then(a.cmp(&b)));
            by_pres.truncate(c.slot_cap);
            keep_prop.into_iter().filter(|i| by_pres.contains(i)).collect()
        } else {
            keep_prop
        };

        let deterministic = ctx.noise.is_none();
        let mut next_id = prev.next_id;
        let mut slots = Vec::with_capacity(keep_prop.len() + keep_disc.len());
        let mut ids: Vec<Option<u64>> = vec![None; np + d];
        let row = |t: &Tensor, i: usize| t.narrow(0, i, 1);
        let make = |b: &Branch, i: usize, id: u64, born: usize| -> Result<ObjectSlot> {
            Ok(ObjectSlot {
                id,
                z_pres: row(&b.z_pres, i)?,
                z_where: row(&b.poses, i)?,
                where_posterior: b.q_where.rows(i, 1)?,
                z_what: row(&b.z_what, i)?,
                what_posterior: b.q_what.rows(i, 1)?,
                hidden_where: row(&b.h_where, i)?,
                hidden_what: row(&b.h_what, i)?,
                hidden_pres: row(&b.h_pres, i)?,
                born,
            })
        };
        if let Some(b) = &prop {
            for &i in &keep_prop {
                let old = &incoming[i];
                slots.push(make(b, i, old.id, old.born)?);
                ids[i] = Some(old.id);
            }
        }
        for &i in &keep_disc {
            let id = next_id;
            next_id += 1;
            slots.push(make(&disc, i - np, id, prev.time_index)?);
            ids[i] = Some(id);
        }
        if deterministic {
            slots = slots.iter().map(ObjectSlot::detach).collect();
        }

        let objects = (0..np + d)
            .map(|i| StepObject { id: ids[i], z_pres: pres_values[i], pose: pose_values[i], propagated: i < np })
            .collect();
        let mut state = SceneState {
            slots,
            z_bg: Some(z_bg),
            bg_posterior: Some(q_bg),
            time_index: prev.time_index + 1,
            encoder_memory: Some(memory),
            next_id,
        };
        if deterministic {
            state = state.detach();
        }
        let outputs = StepOutputs {
            log_likelihood,
            kl_pres,
            kl_where,
            kl_what,
            kl_bg,
            kl_propagated,
            kl_discovered,
            entropy,
            masks,
            reconstruction,
            fg_means,
            bg_mean,
            objects,
            num_propagated: np,
            num_proposals: d,
            p_proposal,
            p_context,
            capped,
        };
        Ok((state, outputs))
    }

    /// Runs `step` over a `[T, 3, H, W]` clip from an empty state.
    pub fn run_sequence(&self, frames: &Tensor, ctx: &mut StepContext) -> Result<Vec<StepOutputs>> {
        let t = frames.dim(0)?;
        let mut state = SceneState::new();
        let mut outs = Vec::with_capacity(t);
        for i in 0..t {
            let (next, out) = self.step(&state, &frames.get(i)?, ctx)?;
            state = next;
            outs.push(out);
        }
        Ok(outs)
    }
}

pub(crate) fn check_finite_outputs(out: &StepOutputs) -> Result<()> {
    for (name, t) in [
        ("log_likelihood", &out.log_likelihood),
        ("kl_pres", &out.kl_pres),
        ("kl_where", &out.kl_where),
        ("kl_what", &out.kl_what),
        ("kl_bg", &out.kl_bg),
        ("entropy", &out.entropy),
    ] {
        if !scalar(t)?.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    Ok(())
}
