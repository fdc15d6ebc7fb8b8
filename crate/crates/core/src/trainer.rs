//! Training objective, optimiser, training loop and checkpoint evaluation.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_synth::VideoEpisode;
use crate::error::{Error, Result};
use crate::latents::NoiseSource;
use crate::mask_compose::MaskNormalization;
use crate::metrics::{episode_ground_truth, evaluate_predictions, slots_to_labelframes, MetricsReport, MotConfig};
use crate::net::{check_finite_outputs, load_checkpoint, save_checkpoint, ApexNet, Likelihood, ModelConfig, StepContext, StepOutputs};

/// Independent switches for the ablation study.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    pub image_space_stn: bool,
    pub no_entropy_loss: bool,
    pub scalor_norm: bool,
    pub gaussian_likelihood: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 4] = ["image_space_stn", "no_entropy_loss", "scalor_norm", "gaussian_likelihood"];

    pub fn enable(&mut self, name: &str) -> Result<()> {
        match name.replace('-', "_").as_str() {
            "image_space_stn" => self.image_space_stn = true,
            "no_entropy_loss" => self.no_entropy_loss = true,
            "scalor_norm" => self.scalor_norm = true,
            "gaussian_likelihood" => self.gaussian_likelihood = true,
            other => {
                return Err(Error::Config(format!("unknown ablation {other:?}; expected one of {:?}", Self::NAMES)))
            }
        }
        Ok(())
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut a = Ablations::default();
        for n in names {
            a.enable(n.as_ref())?;
        }
        Ok(a)
    }

    /// Model-side ablations written into a model config.
    pub fn apply(&self, model: &mut ModelConfig) {
        if self.image_space_stn {
            model.image_space_stn = true;
        }
        if self.scalor_norm {
            model.mask_normalization = MaskNormalization::ScalorRatio;
        }
        if self.gaussian_likelihood {
            model.likelihood = Likelihood::Gaussian;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    /// Frames per training clip; clips start at a random frame.
    pub sequence_length: usize,
    pub entropy_weight: f64,
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub validate_every: usize,
    /// Validation episodes used per validation pass; 0 means all.
    pub val_episodes: usize,
    pub log_every: usize,
    pub ablations: Ablations,
    pub mot: MotConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 4,
            max_iterations: 40_000,
            sequence_length: 20,
            entropy_weight: 1.0,
            grad_clip: 5.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 1000,
            validate_every: 1000,
            val_episodes: 0,
            log_every: 1,
            ablations: Ablations::default(),
            mot: MotConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_iterations == 0 || self.sequence_length == 0 {
            return Err(Error::Config("learning_rate, batch_size, max_iterations and sequence_length must be positive".into()));
        }
        if !(self.grad_clip > 0.0) || self.entropy_weight < 0.0 || self.checkpoint_every == 0 {
            return Err(Error::Config("grad_clip and checkpoint_every must be positive, entropy_weight non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        self.effective_model().validate()
    }

    /// Model config with the model-side ablations applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        self.ablations.apply(&mut m);
        m
    }

    pub fn effective_entropy_weight(&self) -> f64 {
        if self.ablations.no_entropy_loss {
            0.0
        } else {
            self.entropy_weight
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub total_loss: f64,
    pub nll: f64,
    pub kl_pres: f64,
    pub kl_where: f64,
    pub kl_what: f64,
    pub kl_bg: f64,
    /// Unweighted mask entropy.
    pub entropy_loss: f64,
    pub grad_norm: f64,
    pub slots_capped: usize,
    pub wall_time: f64,
}

impl TrainRecord {
    pub fn all_finite(&self) -> bool {
        [self.total_loss, self.nll, self.kl_pres, self.kl_where, self.kl_what, self.kl_bg, self.entropy_loss]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Differentiable loss plus the logged terms, averaged over the batch.
pub struct Objective {
    pub loss: Tensor,
    pub record: TrainRecord,
    pub outputs: Vec<Vec<StepOutputs>>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `mean_b Σ_t [-log p(x_t | z_t) + KL_t] + w · Σ_t entropy_t` over clips of
/// shape `[T, 3, H, W]`.
pub fn compute_objective(
    model: &ApexNet,
    clips: &[Tensor],
    iteration: usize,
    noise: &mut NoiseSource,
    entropy_weight: f64,
) -> Result<Objective> {
    if clips.is_empty() {
        return Err(Error::precondition("empty batch"));
    }
    let zero = || Tensor::zeros((), model.dtype(), model.device());
    let mut loss = zero()?;
    let mut rec = TrainRecord { iteration, ..Default::default() };
    let mut all = Vec::with_capacity(clips.len());
    for clip in clips {
        let mut ctx = StepContext::sample(iteration, noise);
        let outs = model.run_sequence(clip, &mut ctx)?;
        for o in &outs {
            let term = ((o.kl_total()? - &o.log_likelihood)? + (&o.entropy * entropy_weight)?)?;
            loss = (loss + term)?;
            rec.nll -= scalar(&o.log_likelihood)?;
            rec.kl_pres += scalar(&o.kl_pres)?;
            rec.kl_where += scalar(&o.kl_where)?;
            rec.kl_what += scalar(&o.kl_what)?;
            rec.kl_bg += scalar(&o.kl_bg)?;
            rec.entropy_loss += scalar(&o.entropy)?;
            rec.slots_capped += o.capped;
        }
        all.push(outs);
    }
    let b = clips.len() as f64;
    let loss = (loss / b)?;
    for v in [&mut rec.nll, &mut rec.kl_pres, &mut rec.kl_where, &mut rec.kl_what, &mut rec.kl_bg, &mut rec.entropy_loss] {
        *v /= b;
    }
    rec.total_loss = scalar(&loss)?;
    Ok(Objective { loss, record: rec, outputs: all })
}

fn gradients_of(vars: &[(String, Var)], grads: &GradStore) -> Result<Vec<Tensor>> {
    Ok(vars
        .iter()
        // Leaf gradients still reference the forward graph; detaching lets
        // it be freed.
        .map(|(_, v)| match grads.get(v.as_tensor()) {
            Some(g) => Ok(g.detach()),
            None => v.as_tensor().zeros_like(),
        })
        .collect::<candle_core::Result<Vec<_>>>()?)
}

/// Batch-mean gradients computed clip by clip so only one clip's graph is
/// alive at a time. Numerically this is the gradient of
/// [`compute_objective`] over the whole batch.
pub fn batch_gradients(
    model: &ApexNet,
    clips: &[Tensor],
    iteration: usize,
    noise: &mut NoiseSource,
    entropy_weight: f64,
) -> Result<(Vec<Tensor>, TrainRecord)> {
    if clips.is_empty() {
        return Err(Error::precondition("empty batch"));
    }
    let vars = model.named_vars();
    let b = clips.len() as f64;
    let mut sum: Option<Vec<Tensor>> = None;
    let mut rec = TrainRecord { iteration, ..Default::default() };
    for clip in clips {
        let obj = compute_objective(model, std::slice::from_ref(clip), iteration, noise, entropy_weight)?;
        if !obj.record.all_finite() || obj.outputs.iter().flatten().any(|o| check_finite_outputs(o).is_err()) {
            return Err(Error::NonFinite("clip objective".into()));
        }
        let g = gradients_of(&vars, &obj.loss.backward()?)?;
        sum = Some(match sum {
            None => g,
            Some(acc) => acc.iter().zip(&g).map(|(a, b)| a + b).collect::<candle_core::Result<Vec<_>>>()?,
        });
        let r = &obj.record;
        rec.total_loss += r.total_loss / b;
        rec.nll += r.nll / b;
        rec.kl_pres += r.kl_pres / b;
        rec.kl_where += r.kl_where / b;
        rec.kl_what += r.kl_what / b;
        rec.kl_bg += r.kl_bg / b;
        rec.entropy_loss += r.entropy_loss / b;
        rec.slots_capped += r.slots_capped;
    }
    let grads = sum.unwrap().iter().map(|g| g / b).collect::<candle_core::Result<Vec<_>>>()?;
    Ok((grads, rec))
}

/// Adam with global gradient-norm clipping. Moments are plain tensors so
/// they can be checkpointed.
pub struct Adam {
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: usize,
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: f64,
}

impl Adam {
    pub fn new(model: &ApexNet, cfg: &TrainConfig) -> Result<Self> {
        let vars = model.named_vars();
        let m = vars.iter().map(|(_, v)| v.as_tensor().zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Adam {
            vars,
            m,
            v,
            step: 0,
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            clip: cfg.grad_clip,
        })
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn apply(&mut self, grads: &GradStore) -> Result<f64> {
        let grads = gradients_of(&self.vars, grads)?;
        self.apply_gradients(&grads)
    }

    /// Same as [`Adam::apply`] with one gradient per variable, in
    /// [`ApexNet::named_vars`] order.
    pub fn apply_gradients(&mut self, grads: &[Tensor]) -> Result<f64> {
        if grads.len() != self.vars.len() {
            return Err(Error::precondition(format!("{} gradients for {} variables", grads.len(), self.vars.len())));
        }
        let mut sq = 0.0;
        for g in grads {
            sq += scalar(&g.sqr()?.sum_all()?)?;
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let g = (g * scale)?;
            self.m[i] = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?.detach();
            self.v[i] = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?.detach();
            let mhat = (&self.m[i] / bc1)?;
            let vhat = (&self.v[i] / bc2)?;
            let update = (mhat / (vhat.sqrt()? + self.eps)?)?;
            let var = &self.vars[i].1;
            var.set(&(var.as_tensor() - (update * self.lr)?)?.detach())?;
        }
        Ok(norm)
    }

    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.vars.len());
        for (i, (name, _)) in self.vars.iter().enumerate() {
            out.push((format!("adam.m.{name}"), self.m[i].clone()));
            out.push((format!("adam.v.{name}"), self.v[i].clone()));
        }
        out
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, step: usize) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            for (kind, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let t = tensors
                    .get(&format!("adam.{kind}.{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimiser state for {name}")))?;
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!("optimiser state for {name} has the wrong shape")));
                }
                *slot = t.to_dtype(var.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Trainer bookkeeping stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: usize,
    pub adam_step: usize,
    pub config: TrainConfig,
    pub finished: bool,
}

/// RNG for everything random in one iteration.
fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64 + 1);
    rng
}

/// Picks the batch for `iteration`: episode indices and clip start frames.
pub fn sample_batch(cfg: &TrainConfig, num_episodes: usize, episode_len: usize, iteration: usize) -> (Vec<usize>, Vec<usize>, ChaCha8Rng) {
    let mut rng = iteration_rng(cfg.seed, iteration);
    let b = cfg.batch_size.min(num_episodes);
    let idx = sample(&mut rng, num_episodes, b).into_vec();
    let len = cfg.sequence_length.min(episode_len);
    let starts = idx.iter().map(|_| rng.random_range(0..=episode_len - len)).collect();
    (idx, starts, rng)
}

pub fn checkpoint_path(out: &Path, iteration: usize) -> PathBuf {
    out.join("checkpoints").join(format!("ckpt_{iteration:06}.safetensors"))
}

pub fn final_checkpoint_path(out: &Path) -> PathBuf {
    out.join("checkpoints").join("final.safetensors")
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub records: Vec<TrainRecord>,
    pub validations: Vec<(usize, MetricsReport)>,
}

fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

/// Trains on `train`, validating on `val`. With `resume` the run continues
/// from a checkpoint written by an earlier call with the same config.
pub fn train(
    cfg: &TrainConfig,
    train_eps: &[VideoEpisode],
    val_eps: &[VideoEpisode],
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train_eps.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mcfg = cfg.effective_model();
    let ep_len = train_eps.iter().map(VideoEpisode::len).min().unwrap_or(0);
    for (i, ep) in train_eps.iter().enumerate() {
        if ep.height != mcfg.image_height || ep.width != mcfg.image_width {
            return Err(Error::Episode { episode: i, reason: format!("frames are {}x{}, model expects {}x{}", ep.height, ep.width, mcfg.image_height, mcfg.image_width) });
        }
    }
    std::fs::create_dir_all(out.join("checkpoints"))?;
    let device = Device::Cpu;
    let (model, mut adam, start) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path, &device)?;
            let state: TrainState = serde_json::from_value(
                ck.train_state.clone().ok_or_else(|| Error::Checkpoint("checkpoint has no trainer state".into()))?,
            )
            .map_err(|e| Error::Checkpoint(format!("trainer state: {e}")))?;
            if ck.model.config != mcfg {
                return Err(Error::Checkpoint("checkpoint model config differs from the training config".into()));
            }
            let mut adam = Adam::new(&ck.model, cfg)?;
            adam.load_state(&ck.extra, state.adam_step)?;
            (ck.model, adam, state.iteration)
        }
        None => {
            let model = ApexNet::new(mcfg, cfg.seed, DType::F32, &device)?;
            let adam = Adam::new(&model, cfg)?;
            (model, adam, 0)
        }
    };
    let log_path = out.join("train_log.jsonl");
    let val_path = out.join("val_log.jsonl");
    let clock = Instant::now();
    let mut records = Vec::new();
    let mut validations = Vec::new();
    let save = |model: &ApexNet, adam: &Adam, it: usize, path: &Path, finished: bool| -> Result<()> {
        let state = TrainState { iteration: it, adam_step: adam.step, config: cfg.clone(), finished };
        save_checkpoint(model, path, Some(&serde_json::to_value(&state)?), &adam.state_tensors())
    };
    for it in start + 1..=cfg.max_iterations {
        let (idx, starts, rng) = sample_batch(cfg, train_eps.len(), ep_len, it);
        let len = cfg.sequence_length.min(ep_len);
        let clips = idx
            .iter()
            .zip(&starts)
            .map(|(&i, &s)| train_eps[i].frames_tensor(s..s + len, &device))
            .collect::<Result<Vec<_>>>()?;
        let mut noise = NoiseSource::from_rng(rng);
        let non_finite = |e: Error| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss { iteration: it, batch: idx.clone() },
            other => other,
        };
        let (grads, mut rec) =
            batch_gradients(&model, &clips, it, &mut noise, cfg.effective_entropy_weight()).map_err(non_finite)?;
        let norm = adam.apply_gradients(&grads).map_err(non_finite)?;
        rec.grad_norm = norm;
        rec.wall_time = clock.elapsed().as_secs_f64();
        if cfg.log_every > 0 && (it % cfg.log_every == 0 || it == cfg.max_iterations) {
            append_jsonl(&log_path, &rec)?;
            log::info!("iter {it}: loss {:.3} nll {:.3} grad {:.3}", rec.total_loss, rec.nll, rec.grad_norm);
        }
        records.push(rec);
        if it % cfg.checkpoint_every == 0 {
            save(&model, &adam, it, &checkpoint_path(out, it), false)?;
        }
        if cfg.validate_every > 0 && it % cfg.validate_every == 0 && !val_eps.is_empty() {
            let n = if cfg.val_episodes == 0 { val_eps.len() } else { cfg.val_episodes.min(val_eps.len()) };
            let report = evaluate_model(&model, &val_eps[..n], "val", &cfg.mot)?;
            append_jsonl(&val_path, &serde_json::json!({"iteration": it, "report": report}))?;
            validations.push((it, report));
        }
    }
    let final_path = final_checkpoint_path(out);
    save(&model, &adam, cfg.max_iterations.max(start), &final_path, true)?;
    Ok(TrainSummary { final_checkpoint: final_path, records, validations })
}

/// Deterministic inference over an episode.
pub fn infer_episode(model: &ApexNet, ep: &VideoEpisode) -> Result<Vec<StepOutputs>> {
    let frames = ep.frames_tensor(0..ep.len(), model.device())?;
    model.run_sequence(&frames, &mut StepContext::deterministic())
}

pub fn evaluate_model(model: &ApexNet, episodes: &[VideoEpisode], split: &str, mot: &MotConfig) -> Result<MetricsReport> {
    let mut items = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let outs = infer_episode(model, ep)?;
        let (pf, pt) = slots_to_labelframes(&outs)?;
        let (gf, gt) = episode_ground_truth(ep)?;
        items.push((pf, pt, gf, gt));
    }
    evaluate_predictions(split, &items, mot)
}

/// Loads a checkpoint, evaluates it on `episodes` and writes the report.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    episodes: &[VideoEpisode],
    split: &str,
    mot: &MotConfig,
    report_path: Option<&Path>,
) -> Result<MetricsReport> {
    let ck = load_checkpoint(checkpoint, &Device::Cpu)?;
    let report = evaluate_model(&ck.model, episodes, split, mot)?;
    if let Some(p) = report_path {
        report.write(p)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.max_iterations, 40_000);
        assert_eq!(c.model.sigma_fg, 0.1);
        assert_eq!(c.model.sigma_bg, 0.04);
        c.validate().unwrap();
    }

    #[test]
    fn ablation_names() {
        let a = Ablations::from_names(&["scalor_norm", "gaussian-likelihood"]).unwrap();
        assert!(a.scalor_norm && a.gaussian_likelihood && !a.image_space_stn && !a.no_entropy_loss);
        assert!(matches!(Ablations::from_names(&["nope"]), Err(Error::Config(_))));
        let mut m = ModelConfig::default();
        a.apply(&mut m);
        assert_eq!(m.likelihood, Likelihood::Gaussian);
        assert_eq!(m.mask_normalization, MaskNormalization::ScalorRatio);
    }

    #[test]
    fn batch_sampling_is_reproducible() {
        let c = TrainConfig { sequence_length: 5, ..Default::default() };
        let (a, sa, _) = sample_batch(&c, 10, 20, 7);
        let (b, sb, _) = sample_batch(&c, 10, 20, 7);
        assert_eq!((a.clone(), sa.clone()), (b, sb));
        assert!(sa.iter().all(|&s| s <= 15));
        let mut sorted = a.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
        assert_ne!(sample_batch(&c, 10, 20, 8).0, a);
    }

    #[test]
    fn config_toml_rejects_unknown_keys() {
        assert!(toml::from_str::<TrainConfig>("learning_rat = 1.0").is_err());
        let c: TrainConfig = toml::from_str("batch_size = 2\n[model]\ngrid_size = 4\n").unwrap();
        assert_eq!((c.batch_size, c.model.grid_size), (2, 4));
    }
}
