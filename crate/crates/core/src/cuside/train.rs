use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{inference_modes, Model, ModelConfig};
use super::sim::{simulation_loss, total_loss};
use crate::asr::ctc_loss_var;
use crate::chunking::{draw_context_mode, jitter_chunk_size, plan_chunks, ContextMode, ContextPolicy, Stage};
use crate::error::{Error, Result};
use crate::neural::{
    adam_step, add_grads, clip_grad_norm, load_checkpoint, AdamConfig, AdamState, GradMap, ModelParams, Tape, Var,
};
use crate::scene::SimulatedScene;
use crate::signal::{stft, MultiChannelSpectrogram, Waveform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Weight of the simulation loss.
    pub alpha: f64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub decay_factor: f64,
    /// Evaluations without improvement before the learning rate decays.
    pub patience: u32,
    /// Training stops once the learning rate falls below this.
    pub min_lr: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub max_steps: u64,
    pub eval_every: u64,
    /// Checkpoints averaged into the final model.
    pub keep_best: usize,
    /// `[none, real, simulated]` for the front-end (simulated must be 0).
    pub frontend_policy: [f64; 3],
    pub backend_policy: [f64; 3],
    pub jitter_low: usize,
    pub jitter_high: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.975,
            lr: 1e-3,
            warmup_steps: 500,
            decay_factor: 0.1,
            patience: 2,
            min_lr: 1e-6,
            clip_norm: 5.0,
            batch_size: 8,
            seed: 0,
            max_steps: 20_000,
            eval_every: 200,
            keep_best: 5,
            frontend_policy: ContextPolicy::frontend_default().probabilities,
            backend_policy: ContextPolicy::backend_default().probabilities,
            jitter_low: 35,
            jitter_high: 45,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad("alpha must be finite and >= 0");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad("decay factor must lie in (0, 1)");
        }
        if !(self.lr > 0.0) || !(self.min_lr >= 0.0) || !(self.clip_norm > 0.0) {
            return bad("lr and clip_norm must be positive");
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.keep_best == 0 {
            return bad("batch_size, eval_every and keep_best must be positive");
        }
        if self.jitter_low == 0 || self.jitter_low > self.jitter_high {
            return bad("jitter bounds must satisfy 0 < low <= high");
        }
        self.policies().map(|_| ())
    }

    pub fn policies(&self) -> Result<(ContextPolicy, ContextPolicy)> {
        Ok((
            ContextPolicy::new(Stage::Frontend, self.frontend_policy)?,
            ContextPolicy::new(Stage::Backend, self.backend_policy)?,
        ))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain config serialises")
    }
}

/// A training or evaluation example: multi-channel STFT plus transcript.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub spec: MultiChannelSpectrogram,
    pub tokens: Vec<u32>,
}

impl Utterance {
    pub fn from_waveform(id: impl Into<String>, wave: &Waveform, tokens: Vec<u32>, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            spec: stft(wave, &cfg.stft)?,
            tokens,
        })
    }

    pub fn from_scene(scene: &SimulatedScene, cfg: &ModelConfig) -> Result<Self> {
        Self::from_waveform(scene.spec.id.clone(), &scene.mixture, scene.spec.transcript.clone(), cfg)
    }
}

/// Context modes and chunk size used by the chunked branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchModes {
    pub chunk_frames: usize,
    pub frontend: ContextMode,
    pub backend: ContextMode,
}

/// Loss terms of one utterance, built on a tape.
pub struct Objective {
    pub total: Var,
    pub l_utt: f64,
    pub l_chunk: f64,
    pub l_simu: f64,
    /// Chunks whose future lay entirely past the utterance end.
    pub masked_sim_chunks: usize,
}

/// Whole-utterance CTC, chunked CTC over concatenated core logits, and the
/// L1 simulation loss, all on one tape with one parameter binding.
pub fn utterance_objective(
    model: &Model,
    tape: &mut Tape,
    bound: &crate::neural::BoundParams,
    utt: &Utterance,
    modes: BranchModes,
    alpha: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Objective> {
    let cfg = &model.config;
    let utt_logits = model.utterance_logits(tape, bound, &utt.spec, rng.as_deref_mut())?;
    let l_utt = ctc_loss_var(tape, utt_logits, &utt.tokens)?;

    let plan = plan_chunks(utt.spec.num_frames(), modes.chunk_frames, cfg.left_frames, cfg.right_frames)?;
    let mut state = cfg.sim.zero_state().to_tape(tape);
    let mut cores = Vec::with_capacity(plan.len());
    let mut sims = Vec::new();
    let mut masked = 0;
    for d in &plan.descriptors {
        let out = model.chunk_forward(
            tape,
            bound,
            &utt.spec,
            d,
            modes.frontend,
            modes.backend,
            Some(&state),
            true,
            rng.as_deref_mut(),
        )?;
        cores.push(out.core_logits);
        state = out.sim_state;
        let (target, valid) = out.sim_target.expect("target requested");
        match simulation_loss(tape, out.simulated.expect("simulator ran"), &target, valid)? {
            Some(l) => sims.push(l),
            None => masked += 1,
        }
    }
    let chunk_logits = tape.concat_rows(&cores)?;
    let l_chunk = ctc_loss_var(tape, chunk_logits, &utt.tokens)?;
    let l_simu = if sims.is_empty() {
        None
    } else {
        let s = tape.concat_cols(&sims)?;
        let s = tape.sum(s);
        Some(tape.scale(s, 1.0 / sims.len() as f64))
    };

    let mut total = tape.add(l_utt, l_chunk)?;
    if let Some(ls) = l_simu {
        let w = tape.scale(ls, alpha);
        total = tape.add(total, w)?;
    }
    let (u, c) = (tape.value(l_utt).item(), tape.value(l_chunk).item());
    let s = l_simu.map(|v| tape.value(v).item()).unwrap_or(0.0);
    Ok(Objective {
        total,
        l_utt: u,
        l_chunk: c,
        l_simu: s,
        masked_sim_chunks: masked,
    })
}

/// Per-step training log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_utt: f64,
    pub l_chunk: f64,
    pub l_simu: f64,
    pub l_total: f64,
    pub alpha: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub skipped: usize,
}

/// Validation record; `step` is the number of updates applied so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub step: u64,
    pub l_utt: f64,
    pub l_chunk: f64,
    pub l_simu: f64,
    pub l_total: f64,
}

/// SplitMix64 finaliser over a pair, for per-step and per-utterance seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One update over `batch`: gradients of the batch-mean total loss summed in
/// batch order, clipped, then one Adam step at `adam.lr`.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &[&Utterance],
    cfg: &TrainingConfig,
    step_seed: u64,
) -> Result<StepMetrics> {
    let (fe_policy, be_policy) = cfg.policies()?;
    let mut acc: GradMap = GradMap::new();
    let (mut lu, mut lc, mut ls, mut lt) = (0.0, 0.0, 0.0, 0.0);
    let mut skipped = 0;
    let mut used = 0usize;
    let n = batch.len() as f64;
    for (i, utt) in batch.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(step_seed, i as u64));
        let modes = BranchModes {
            chunk_frames: jitter_chunk_size(model.config.chunk_frames.clamp(cfg.jitter_low, cfg.jitter_high), cfg.jitter_low, cfg.jitter_high, &mut rng)?,
            frontend: draw_context_mode(&fe_policy, &mut rng)?,
            backend: draw_context_mode(&be_policy, &mut rng)?,
        };
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let obj = match utterance_objective(model, &mut tape, &bound, utt, modes, cfg.alpha, Some(&mut rng)) {
            Ok(o) => o,
            Err(Error::InfeasibleAlignment { .. }) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        if let Some(op) = tape.first_non_finite() {
            return Err(Error::NonFinite(format!("utterance {} produced a non-finite value in {op}", utt.id)));
        }
        let scaled = tape.scale(obj.total, 1.0 / n);
        let mut grads = tape.backward(scaled)?;
        add_grads(&mut acc, &bound.gradients(&tape, &mut grads));
        lu += obj.l_utt;
        lc += obj.l_chunk;
        ls += obj.l_simu;
        lt += tape.value(obj.total).item();
        used += 1;
    }
    let denom = used.max(1) as f64;
    let mut grad_norm = 0.0;
    if used > 0 {
        grad_norm = clip_grad_norm(&mut acc, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        adam_step(&mut model.params, &acc, adam)?;
    }
    Ok(StepMetrics {
        step: adam.step,
        l_utt: lu / denom,
        l_chunk: lc / denom,
        l_simu: ls / denom,
        l_total: lt / denom,
        alpha: cfg.alpha,
        lr: adam.lr,
        grad_norm,
        skipped,
    })
}

/// Deterministic validation: fixed chunk size, no dropout, and the three
/// streaming modes assigned round-robin over utterances.
pub fn validate(model: &Model, utts: &[Utterance], alpha: f64, step: u64) -> Result<ValMetrics> {
    if utts.is_empty() {
        return Err(Error::InvalidInput("empty validation set".into()));
    }
    let (mut lu, mut lc, mut ls) = (0.0, 0.0, 0.0);
    let mut used = 0usize;
    for (i, utt) in utts.iter().enumerate() {
        let (frontend, backend) = inference_modes(ContextMode::ALL[i % 3]);
        let modes = BranchModes {
            chunk_frames: model.config.chunk_frames,
            frontend,
            backend,
        };
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        match utterance_objective(model, &mut tape, &bound, utt, modes, alpha, None) {
            Ok(o) => {
                lu += o.l_utt;
                lc += o.l_chunk;
                ls += o.l_simu;
                used += 1;
            }
            Err(Error::InfeasibleAlignment { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let d = used.max(1) as f64;
    let (lu, lc, ls) = (lu / d, lc / d, ls / d);
    Ok(ValMetrics {
        step,
        l_utt: lu,
        l_chunk: lc,
        l_simu: ls,
        l_total: total_loss(lu, lc, ls, alpha),
    })
}

/// Mean of checkpoints that share one architecture.
pub fn average_checkpoints<P: AsRef<Path>>(paths: &[P]) -> Result<ModelParams> {
    let sets = paths
        .iter()
        .map(|p| load_checkpoint(p, None))
        .collect::<Result<Vec<_>>>()?;
    ModelParams::average(&sets)
}

/// Warmup, plateau decay and the best-checkpoint list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub decays: u32,
    pub best_val: Option<f64>,
    pub bad_evals: u32,
    /// `(validation loss, step)` of retained checkpoints, best first.
    pub best: Vec<(f64, u64)>,
    pub stopped: bool,
}

impl SchedulerState {
    pub fn new() -> Self {
        Self {
            decays: 0,
            best_val: None,
            bad_evals: 0,
            best: Vec::new(),
            stopped: false,
        }
    }

    pub fn lr(&self, cfg: &TrainingConfig, step: u64) -> f64 {
        let warm = if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
            (step + 1) as f64 / cfg.warmup_steps as f64
        } else {
            1.0
        };
        cfg.lr * warm * cfg.decay_factor.powi(self.decays as i32)
    }

    /// Record a validation loss; returns whether it entered the best list.
    pub fn observe(&mut self, cfg: &TrainingConfig, step: u64, val: f64) -> bool {
        if self.best_val.is_none_or(|b| val < b) {
            self.best_val = Some(val);
            self.bad_evals = 0;
        } else {
            self.bad_evals += 1;
            if self.bad_evals >= cfg.patience {
                self.decays += 1;
                self.bad_evals = 0;
            }
        }
        if self.lr(cfg, step.max(cfg.warmup_steps)) < cfg.min_lr {
            self.stopped = true;
        }
        let pos = self.best.iter().position(|(v, _)| val < *v).unwrap_or(self.best.len());
        if pos < cfg.keep_best {
            self.best.insert(pos, (val, step));
            self.best.truncate(cfg.keep_best);
            true
        } else {
            false
        }
    }
}

impl Default for SchedulerState {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Serialize, Deserialize)]
struct TrainerMeta {
    training: TrainingConfig,
    model: ModelConfig,
    scheduler: SchedulerState,
    step: u64,
}

/// Summary returned by [`Trainer::run`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub initial: ValMetrics,
    pub history: Vec<ValMetrics>,
    pub final_params: ModelParams,
}

/// Training loop with validation, plateau decay, best-k averaging and
/// resumable state.
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub cfg: TrainingConfig,
    pub sched: SchedulerState,
    best_params: Vec<(u64, ModelParams)>,
    out_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainingConfig, out_dir: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        if let Some(d) = &out_dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let adam = AdamState::new(&model.params, cfg.lr, AdamConfig::default());
        Ok(Self {
            model,
            adam,
            cfg,
            sched: SchedulerState::new(),
            best_params: Vec::new(),
            out_dir,
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// The batch drawn for update number `step`.
    pub fn batch_indices(&self, step: u64, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, step));
        let k = self.cfg.batch_size.min(n);
        let mut idx = sample(&mut rng, n, k).into_vec();
        idx.sort_unstable();
        idx
    }

    /// One scheduled update on `train`.
    pub fn step_once(&mut self, train: &[Utterance]) -> Result<StepMetrics> {
        if train.is_empty() {
            return Err(Error::InvalidInput("empty training set".into()));
        }
        let step = self.adam.step;
        self.adam.lr = self.sched.lr(&self.cfg, step);
        let idx = self.batch_indices(step, train.len());
        let batch: Vec<&Utterance> = idx.iter().map(|&i| &train[i]).collect();
        let seed = mix_seed(self.cfg.seed ^ 0x5EED, step);
        train_step(&mut self.model, &mut self.adam, &batch, &self.cfg, seed)
    }

    fn record_eval(&mut self, v: &ValMetrics) -> Result<()> {
        let step = self.adam.step;
        if self.sched.observe(&self.cfg, step, v.l_total) {
            self.best_params.push((step, self.model.params.clone()));
            let keep: Vec<u64> = self.sched.best.iter().map(|(_, s)| *s).collect();
            self.best_params.retain(|(s, _)| keep.contains(s));
            if let Some(d) = &self.out_dir {
                self.model.params.save(d.join(format!("best_{step:08}.ckpt")))?;
                for entry in std::fs::read_dir(d).map_err(|e| Error::io(d, e))? {
                    let p = entry.map_err(|e| Error::io(d, e))?.path();
                    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    if let Some(s) = name.strip_prefix("best_").and_then(|r| r.strip_suffix(".ckpt")) {
                        if s.parse::<u64>().is_ok_and(|s| !keep.contains(&s)) {
                            std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Train until `max_steps` or until the learning rate decays below
    /// `min_lr`. Step metrics and validation records go to the two sinks as
    /// JSON lines.
    pub fn run(
        &mut self,
        train: &[Utterance],
        val: &[Utterance],
        metrics: &mut dyn Write,
        val_log: &mut dyn Write,
    ) -> Result<TrainSummary> {
        let jl = |w: &mut dyn Write, v: &dyn erased::Json| -> Result<()> {
            writeln!(w, "{}", v.json()).map_err(|e| Error::io(Path::new("<metrics>"), e))
        };
        let mut history = Vec::new();
        let initial = validate(&self.model, val, self.cfg.alpha, self.adam.step)?;
        if self.adam.step == 0 {
            jl(val_log, &initial)?;
        }
        while self.adam.step < self.cfg.max_steps && !self.sched.stopped {
            let m = self.step_once(train)?;
            jl(metrics, &m)?;
            let step = self.adam.step;
            if step % self.cfg.eval_every == 0 || step == self.cfg.max_steps {
                let v = validate(&self.model, val, self.cfg.alpha, step)?;
                jl(val_log, &v)?;
                self.record_eval(&v)?;
                history.push(v);
                if let Some(d) = self.out_dir.clone() {
                    self.save_state(&d)?;
                }
            }
        }
        metrics.flush().map_err(|e| Error::io(Path::new("<metrics>"), e))?;
        let final_params = self.final_params()?;
        if let Some(d) = &self.out_dir {
            Model::with_params(self.model.config.clone(), final_params.clone())?.save(d.join("final.ckpt"))?;
        }
        Ok(TrainSummary {
            steps: self.adam.step,
            initial,
            history,
            final_params,
        })
    }

    /// Average of the retained best checkpoints (current parameters when none).
    pub fn final_params(&self) -> Result<ModelParams> {
        if self.best_params.is_empty() {
            return Ok(self.model.params.clone());
        }
        let sets: Vec<ModelParams> = self.best_params.iter().map(|(_, p)| p.clone()).collect();
        ModelParams::average(&sets)
    }

    /// Parameters, optimiser moments and scheduler state under `dir`.
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(dir.join("model.ckpt"))?;
        self.adam.to_params().save(dir.join("adam.ckpt"))?;
        for (s, p) in &self.best_params {
            let path = dir.join(format!("best_{s:08}.ckpt"));
            if !path.exists() {
                p.save(&path)?;
            }
        }
        let meta = TrainerMeta {
            training: self.cfg.clone(),
            model: self.model.config.clone(),
            scheduler: self.sched.clone(),
            step: self.adam.step,
        };
        let path = dir.join("trainer.json");
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Continue from [`Trainer::save_state`] output. `cfg` may raise
    /// `max_steps`; everything else should match the original run.
    pub fn resume(dir: &Path, cfg: Option<TrainingConfig>) -> Result<Self> {
        let path = dir.join("trainer.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: TrainerMeta =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let model = Model::load(dir.join("model.ckpt"))?;
        if model.config != meta.model {
            return Err(Error::Checkpoint("model configuration changed since the checkpoint".into()));
        }
        let training = cfg.unwrap_or(meta.training);
        training.validate()?;
        let moments = load_checkpoint(dir.join("adam.ckpt"), None)?;
        let adam = AdamState::from_params(&moments, training.lr, AdamConfig::default())?;
        if adam.step != meta.step {
            return Err(Error::Checkpoint("optimiser step disagrees with trainer state".into()));
        }
        let mut best_params = Vec::new();
        for (_, s) in &meta.scheduler.best {
            let p = load_checkpoint(dir.join(format!("best_{s:08}.ckpt")), Some(model.params.arch_hash()))?;
            best_params.push((*s, p));
        }
        Ok(Self {
            model,
            adam,
            cfg: training,
            sched: meta.scheduler,
            best_params,
            out_dir: Some(dir.to_path_buf()),
        })
    }
}

mod erased {
    pub trait Json {
        fn json(&self) -> String;
    }
    impl<T: serde::Serialize> Json for T {
        fn json(&self) -> String {
            serde_json::to_string(self).expect("metrics serialise")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streamer::tests::{noise, small_model};

    fn utts(model: &Model, n: usize) -> Vec<Utterance> {
        (0..n)
            .map(|i| {
                let w = noise(2, 8_000 + 900 * i, 40 + i as u64);
                Utterance::from_waveform(format!("u{i}"), &w, vec![1 + i as u32 % 10, 3], &model.config).unwrap()
            })
            .collect()
    }

    #[test]
    fn config_parsing_and_validation() {
        let c = TrainingConfig::default();
        assert_eq!(c.alpha, 0.975);
        assert_eq!(TrainingConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(TrainingConfig::from_toml("alpha = -1.0").is_err());
        assert!(TrainingConfig::from_toml("decay_factor = 1.0").is_err());
        assert!(TrainingConfig::from_toml("frontend_policy = [0.5, 0.0, 0.5]").is_err());
        assert!(TrainingConfig::from_toml("jitter_low = 50").is_err());
        assert!(TrainingConfig::from_toml("lerning_rate = 1.0").is_err());
    }

    #[test]
    fn warmup_then_plateau_decay() {
        let cfg = TrainingConfig {
            lr: 1.0,
            warmup_steps: 4,
            keep_best: 2,
            min_lr: 5e-3,
            ..TrainingConfig::default()
        };
        let mut s = SchedulerState::new();
        assert_eq!(s.lr(&cfg, 0), 0.25);
        assert_eq!(s.lr(&cfg, 3), 1.0);
        assert_eq!(s.lr(&cfg, 100), 1.0);
        assert!(s.observe(&cfg, 10, 5.0));
        assert!(s.observe(&cfg, 20, 4.0));
        assert!(s.observe(&cfg, 30, 4.5));
        assert_eq!(s.decays, 0);
        assert!(s.observe(&cfg, 40, 4.2));
        assert_eq!(s.decays, 1);
        assert!((s.lr(&cfg, 100) - 0.1).abs() < 1e-15);
        assert_eq!(s.best, vec![(4.0, 20), (4.2, 40)]);
        s.observe(&cfg, 50, 9.0);
        assert!(!s.stopped);
        s.observe(&cfg, 60, 9.0);
        assert_eq!(s.decays, 2);
        assert!(!s.stopped);
        s.observe(&cfg, 70, 9.0);
        s.observe(&cfg, 80, 9.0);
        assert_eq!(s.decays, 3);
        assert!(s.stopped);
    }

    #[test]
    fn seeds_mix() {
        assert_ne!(mix_seed(1, 2), mix_seed(2, 1));
        assert_ne!(mix_seed(0, 0), mix_seed(0, 1));
        assert_eq!(mix_seed(7, 9), mix_seed(7, 9));
    }

    #[test]
    fn branches_share_one_parameter_map() {
        let model = small_model(2);
        let u = &utts(&model, 1)[0];
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let leaves_before = tape.len();
        assert_eq!(leaves_before, model.params.len());
        let modes = BranchModes {
            chunk_frames: 40,
            frontend: ContextMode::Real,
            backend: ContextMode::Simulated,
        };
        let obj = utterance_objective(&model, &mut tape, &bound, u, modes, 0.975, None).unwrap();
        let mut g = tape.backward(obj.total).unwrap();
        let grads = bound.gradients(&tape, &mut g);
        let names: Vec<&String> = model.params.names().collect();
        assert_eq!(grads.keys().collect::<Vec<_>>(), names);
        assert!(grads.keys().filter(|k| k.starts_with("mask.")).all(|k| grads[k].sum_sq() > 0.0));
        assert!(grads.keys().filter(|k| k.starts_with("sim.")).all(|k| grads[k].sum_sq() > 0.0));
        let want = total_loss(obj.l_utt, obj.l_chunk, obj.l_simu, 0.975);
        assert!((tape.value(obj.total).item() - want).abs() < 1e-9 * want);
    }

    #[test]
    fn simulator_is_trained_only_by_its_loss_when_backend_ignores_it() {
        let model = small_model(3);
        let u = &utts(&model, 1)[0];
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let modes = BranchModes {
            chunk_frames: 40,
            frontend: ContextMode::None,
            backend: ContextMode::None,
        };
        let obj = utterance_objective(&model, &mut tape, &bound, u, modes, 0.0, None).unwrap();
        let mut g = tape.backward(obj.total).unwrap();
        let grads = bound.gradients(&tape, &mut g);
        assert!(grads.iter().filter(|(k, _)| k.starts_with("sim.")).all(|(_, t)| t.sum_sq() == 0.0));
        assert!(grads["enc.out.w"].sum_sq() > 0.0);
    }

    #[test]
    fn steps_are_deterministic_and_resumable() {
        let model = small_model(4);
        let data = utts(&model, 3);
        let cfg = TrainingConfig {
            batch_size: 2,
            max_steps: 2,
            eval_every: 1,
            warmup_steps: 2,
            ..TrainingConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let run = |out: Option<PathBuf>, steps: u64| {
            let mut t = Trainer::new(model.clone(), TrainingConfig { max_steps: steps, ..cfg.clone() }, out).unwrap();
            let (mut m, mut v) = (Vec::new(), Vec::new());
            t.run(&data, &data[..1], &mut m, &mut v).unwrap();
            (String::from_utf8(m).unwrap(), t)
        };
        let (a, ta) = run(None, 2);
        let (b, _) = run(None, 2);
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 2);

        let (first, _) = run(Some(dir.path().to_path_buf()), 1);
        let mut resumed = Trainer::resume(dir.path(), Some(TrainingConfig { max_steps: 2, ..cfg.clone() })).unwrap();
        assert_eq!(resumed.step(), 1);
        let (mut m, mut v) = (Vec::new(), Vec::new());
        resumed.run(&data, &data[..1], &mut m, &mut v).unwrap();
        let joined = first + &String::from_utf8(m).unwrap();
        assert_eq!(joined, a);
        assert_eq!(resumed.model.params, ta.model.params);
        assert!(dir.path().join("final.ckpt").exists());
    }

    #[test]
    fn averaging_checkpoints() {
        let model = small_model(5);
        let dir = tempfile::tempdir().unwrap();
        let mut neg = model.params.clone();
        for n in model.params.names() {
            neg.get_mut(n).unwrap().scale_in_place(-1.0);
        }
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        model.params.save(&a).unwrap();
        neg.save(&b).unwrap();
        assert_eq!(average_checkpoints(&[&a]).unwrap(), model.params);
        let z = average_checkpoints(&[&a, &b]).unwrap();
        assert!(z.iter().all(|(_, t)| t.data().iter().all(|v| *v == 0.0)));
        let other = Model::new(ModelConfig::toy(), 0).unwrap();
        let c = dir.path().join("c.ckpt");
        other.params.save(&c).unwrap();
        assert!(average_checkpoints(&[&a, &c]).is_err());
    }
}
