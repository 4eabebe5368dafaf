use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sim::{simulate_future, SimNetConfig};
use crate::asr::{encoder_forward, EncoderConfig};
use crate::beamformer::{mask_features, mask_net_forward, mvdr_power, MaskNet, MaskNetConfig, MvdrConfig};
use crate::chunking::{ChunkDescriptor, ContextMode};
use crate::error::{Error, Result};
use crate::neural::{load_checkpoint, BoundParams, ModelParams, Tape, Tensor, Var};
use crate::signal::{mel_filterbank, MultiChannelSpectrogram, StftConfig, DEFAULT_LOG_FLOOR};

/// Every size and constant of the front-end, back-end and simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub sample_rate: u32,
    pub stft: StftConfig,
    pub mel_bins: usize,
    /// Multiplies log-mel features before the encoder and simulator.
    pub feature_scale: f64,
    pub log_floor: f64,
    /// Global mean/variance normalisation applied after scaling.
    #[serde(default)]
    pub feature_norm: Option<FeatureNorm>,
    pub mask: MaskNetConfig,
    pub mvdr: MvdrConfig,
    pub encoder: EncoderConfig,
    pub sim: SimNetConfig,
    pub chunk_frames: usize,
    pub left_frames: usize,
    pub right_frames: usize,
}

impl ModelConfig {
    /// Sizes of the reference system: 3x320 mask BLSTM, 3x256 simulator GRU,
    /// 2x128 encoder BLSTM.
    pub fn paper() -> Self {
        Self {
            sample_rate: 16000,
            stft: StftConfig::default(),
            mel_bins: 80,
            feature_scale: 0.1,
            log_floor: DEFAULT_LOG_FLOOR,
            feature_norm: None,
            mask: MaskNetConfig::default(),
            mvdr: MvdrConfig::default(),
            encoder: EncoderConfig::default(),
            sim: SimNetConfig::default(),
            chunk_frames: 40,
            left_frames: 80,
            right_frames: 40,
        }
    }

    /// Small networks that train on one CPU core in minutes.
    pub fn toy() -> Self {
        let mut c = Self::paper();
        c.mask = MaskNetConfig {
            layers: 1,
            hidden_per_direction: 16,
            dropout: 0.0,
            num_bins: 257,
        };
        c.encoder.hidden_per_direction = 32;
        c.sim.layers = 1;
        c.sim.hidden = 32;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.mask.validate()?;
        self.encoder.validate()?;
        self.sim.validate()?;
        let bins = self.stft.num_bins();
        if self.mask.num_bins != bins {
            return Err(Error::InvalidConfig(format!(
                "mask network expects {} bins but the STFT has {bins}",
                self.mask.num_bins
            )));
        }
        if self.encoder.input_dim != self.mel_bins || self.sim.feature_dim != self.mel_bins {
            return Err(Error::InvalidConfig("encoder and simulator must read mel_bins features".into()));
        }
        if self.sim.right_frames != self.right_frames {
            return Err(Error::InvalidConfig("simulator must emit right_frames frames".into()));
        }
        if self.chunk_frames == 0 {
            return Err(Error::InvalidConfig("chunk size must be positive".into()));
        }
        if !(self.feature_scale > 0.0) || !(self.log_floor > 0.0) {
            return Err(Error::InvalidConfig("feature scale and log floor must be positive".into()));
        }
        if let Some(n) = &self.feature_norm {
            if n.mean.len() != self.mel_bins || n.std.len() != self.mel_bins {
                return Err(Error::InvalidConfig("feature normalisation must have mel_bins entries".into()));
            }
            if n.mean.iter().any(|m| !m.is_finite()) || n.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                return Err(Error::InvalidConfig("feature normalisation needs finite means and positive deviations".into()));
            }
        }
        Ok(())
    }

    pub fn hop_ms(&self) -> f64 {
        1000.0 * self.stft.hop as f64 / self.sample_rate as f64
    }
}

/// Per-dimension mean and standard deviation of the scaled log-mel features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    /// Statistics of whole-utterance enhanced features of `model` (its own
    /// normalisation, if any, is ignored).
    pub fn estimate<'a>(model: &Model, specs: impl IntoIterator<Item = &'a MultiChannelSpectrogram>) -> Result<Self> {
        let mut cfg = model.config.clone();
        cfg.feature_norm = None;
        let raw = Model::with_params(cfg, model.params.clone())?;
        let d = raw.config.mel_bins;
        let (mut sum, mut sq, mut n) = (vec![0.0; d], vec![0.0; d], 0usize);
        for spec in specs {
            let mut tape = Tape::new();
            let bound = raw.params.bind(&mut tape);
            let (f, _) = raw.enhance(&mut tape, &bound, spec, spec, None)?;
            let f = tape.value(f);
            for t in 0..f.rows() {
                for (j, v) in f.row(t).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            n += f.rows();
        }
        if n == 0 {
            return Err(Error::InvalidInput("feature statistics need at least one frame".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        Ok(Self { mean, std })
    }
}

/// Parameters plus the fixed mel projection.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    mel_t: Tensor,
    /// Diagonal scale and bias of the feature normalisation.
    norm: Option<(Tensor, Tensor)>,
}

/// What one chunk produced.
pub struct ChunkForward {
    /// Back-end logits for the core frames only.
    pub core_logits: Var,
    /// Enhanced, scaled log-mel features of the core frames.
    pub core_features: Tensor,
    /// Simulated right context `[R][mel]`, when the simulator ran.
    pub simulated: Option<Var>,
    pub sim_state: Vec<Var>,
    /// True enhanced future frames (zero-padded) and how many are real.
    pub sim_target: Option<(Tensor, usize)>,
    pub fallback_bins: usize,
    /// Wall time spent in the simulator.
    pub sim_elapsed: Option<Duration>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        MaskNet::new(&config.mask).init_params(&mut params, &mut rng)?;
        config.encoder.init_params(&mut params, &mut rng)?;
        config.sim.init_params(&mut params, &mut rng)?;
        Self::with_params(config, params)
    }

    /// Adopt trained parameters; their names and shapes must match `config`.
    pub fn with_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let expected = Self::arch_hash_for(&config)?;
        if params.arch_hash() != expected {
            return Err(Error::Checkpoint(format!(
                "parameters (hash {:016x}) do not fit this configuration (hash {expected:016x})",
                params.arch_hash()
            )));
        }
        let fb = mel_filterbank(config.stft.num_bins(), config.mel_bins, config.sample_rate)?;
        let mel_t = Tensor::from_vec(config.mel_bins, config.stft.num_bins(), fb)?.transpose();
        let d = config.mel_bins;
        let norm = match &config.feature_norm {
            Some(n) => {
                let mut diag = Tensor::zeros(d, d);
                let mut bias = Tensor::zeros(1, d);
                for j in 0..d {
                    diag.row_mut(j)[j] = 1.0 / n.std[j];
                    bias.row_mut(0)[j] = -n.mean[j] / n.std[j];
                }
                Some((diag, bias))
            }
            None => None,
        };
        Ok(Self { config, params, mel_t, norm })
    }

    pub fn arch_hash_for(config: &ModelConfig) -> Result<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ModelParams::new();
        MaskNet::new(&config.mask).init_params(&mut p, &mut rng)?;
        config.encoder.init_params(&mut p, &mut rng)?;
        config.sim.init_params(&mut p, &mut rng)?;
        Ok(p.arch_hash())
    }

    /// Checkpoint at `path`, configuration next to it as JSON.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.params.save(path)?;
        let cfg_path = config_path(path);
        let json = serde_json::to_string_pretty(&self.config).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(&cfg_path, json).map_err(|e| Error::io(&cfg_path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cfg_path = config_path(path);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: ModelConfig =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", cfg_path.display())))?;
        let params = load_checkpoint(path, Some(Self::arch_hash_for(&config)?))?;
        Self::with_params(config, params)
    }

    /// Same parameters with the normalisation fitted to `specs`.
    pub fn with_estimated_norm<'a>(self, specs: impl IntoIterator<Item = &'a MultiChannelSpectrogram>) -> Result<Self> {
        let norm = FeatureNorm::estimate(&self, specs)?;
        let mut cfg = self.config;
        cfg.feature_norm = Some(norm);
        Self::with_params(cfg, self.params)
    }

    pub fn feature_dim(&self) -> usize {
        self.config.mel_bins
    }

    /// Scaled log-mel features of a power spectrogram `[T][bins]`.
    pub fn features(&self, tape: &mut Tape, power: Var) -> Result<Var> {
        let m = tape.constant(self.mel_t.clone());
        let mel = tape.matmul(power, m)?;
        let lg = tape.log_floor(mel, self.config.log_floor);
        let x = tape.scale(lg, self.config.feature_scale);
        match &self.norm {
            None => Ok(x),
            Some((diag, bias)) => {
                let (d, b) = (tape.constant(diag.clone()), tape.constant(bias.clone()));
                let y = tape.matmul(x, d)?;
                tape.add_row(y, b)
            }
        }
    }

    /// Masks and covariances from `estimate`, filter applied to `apply`.
    /// Returns features for every frame of `apply`.
    pub fn enhance(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        estimate: &MultiChannelSpectrogram,
        apply: &MultiChannelSpectrogram,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, usize)> {
        let f = tape.constant(mask_features(estimate, self.config.mvdr.reference_channel)?);
        let (s, n) = mask_net_forward(tape, bound, &self.config.mask, f, rng)?;
        let out = mvdr_power(tape, s, n, estimate, apply, &self.config.mvdr)?;
        Ok((self.features(tape, out.power)?, out.fallback_bins))
    }

    pub fn encode(&self, tape: &mut Tape, bound: &BoundParams, features: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        encoder_forward(tape, bound, &self.config.encoder, features, rng)
    }

    /// Whole-utterance enhancement and encoding.
    pub fn utterance_logits(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        spec: &MultiChannelSpectrogram,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let (feats, _) = self.enhance(tape, bound, spec, spec, rng.as_deref_mut())?;
        self.encode(tape, bound, feats, rng)
    }

    /// One context-sensitive chunk. `spec` must hold every frame up to the
    /// furthest one the modes need. `sim_state` is required when the
    /// simulator runs (`backend == Simulated` or `sim_target`).
    #[allow(clippy::too_many_arguments)]
    pub fn chunk_forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        spec: &MultiChannelSpectrogram,
        d: &ChunkDescriptor,
        frontend: ContextMode,
        backend: ContextMode,
        sim_state: Option<&[Var]>,
        sim_target: bool,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ChunkForward> {
        if frontend == ContextMode::Simulated {
            return Err(Error::InvalidConfig("the front-end never uses simulated context".into()));
        }
        let lcs = d.left_ctx_start;
        let fe_end = if frontend == ContextMode::Real { d.right_ctx_end } else { d.core_end };
        let be_end = if backend == ContextMode::Real { d.right_ctx_end } else { d.core_end };
        let apply_end = if sim_target { be_end.max(d.right_ctx_end) } else { be_end };
        if apply_end > spec.num_frames() {
            return Err(Error::InvalidInput(format!(
                "chunk needs frame {apply_end} but only {} are available",
                spec.num_frames()
            )));
        }
        let estimate = spec.padded_frames(lcs as isize, fe_end as isize);
        let apply = spec.padded_frames(lcs as isize, apply_end as isize);
        let (feats, fallback_bins) = self.enhance(tape, bound, &estimate, &apply, rng.as_deref_mut())?;
        let dim = self.feature_dim();

        let core_rel = (d.core_start - lcs, d.core_end - lcs);
        let core_features = tape.value(feats).slice_rows(core_rel.0, core_rel.1);
        let mut sim_elapsed = None;
        let run_sim = backend == ContextMode::Simulated || sim_target;
        let (simulated, state) = if run_sim {
            let h = sim_state.ok_or_else(|| Error::InvalidInput("simulator state missing".into()))?;
            // The simulator reads a detached copy: only CTC trains the front-end.
            let started = Instant::now();
            let x = tape.constant(core_features.clone());
            let (s, h) = simulate_future(tape, bound, &self.config.sim, x, h)?;
            sim_elapsed = Some(started.elapsed());
            (Some(s), h)
        } else {
            (None, sim_state.map(|h| h.to_vec()).unwrap_or_default())
        };

        let mut parts = Vec::new();
        if d.left_pad > 0 {
            parts.push(tape.constant(Tensor::zeros(d.left_pad, dim)));
        }
        parts.push(tape.rows(feats, 0, be_end - lcs)?);
        match backend {
            ContextMode::Real if d.right_pad > 0 => parts.push(tape.constant(Tensor::zeros(d.right_pad, dim))),
            ContextMode::Simulated => parts.push(simulated.expect("simulator ran")),
            _ => {}
        }
        let input = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let logits = self.encode(tape, bound, input, rng)?;
        let off = d.core_offset();
        let core_logits = tape.rows(logits, off, off + d.core_len())?;

        let target = if sim_target {
            let r = self.config.right_frames;
            let real = d.right_ctx_end - d.core_end;
            let mut t = Tensor::zeros(r, dim);
            let fv = tape.value(feats);
            for i in 0..real {
                t.row_mut(i).copy_from_slice(fv.row(core_rel.1 + i));
            }
            Some((t, real))
        } else {
            None
        };
        Ok(ChunkForward {
            core_logits,
            core_features,
            simulated,
            sim_state: state,
            sim_target: target,
            fallback_bins,
            sim_elapsed,
        })
    }
}

fn config_path(ckpt: &Path) -> std::path::PathBuf {
    let mut p = ckpt.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

/// Front-end and back-end right-context modes used at inference for a
/// streaming mode. Simulated context lives at the back-end only.
pub fn inference_modes(mode: ContextMode) -> (ContextMode, ContextMode) {
    match mode {
        ContextMode::None => (ContextMode::None, ContextMode::None),
        ContextMode::Real => (ContextMode::Real, ContextMode::Real),
        ContextMode::Simulated => (ContextMode::None, ContextMode::Simulated),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunking::plan_chunks;
    use crate::signal::logfbank_from_power;
    use crate::streamer::tests::{noise, small_model};
    use crate::signal::stft;

    #[test]
    fn features_match_log_mel() {
        let model = small_model(1);
        let spec = stft(&noise(1, 4_000, 2), &model.config.stft).unwrap();
        let power = spec.power(0);
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_vec(spec.num_frames(), spec.num_bins(), power.clone()).unwrap());
        let f = model.features(&mut tape, p).unwrap();
        let fb = mel_filterbank(257, 80, 16_000).unwrap();
        let want = logfbank_from_power(&power, 257, &fb, model.config.log_floor).unwrap();
        for t in 0..spec.num_frames() {
            for (a, b) in tape.value(f).row(t).iter().zip(want.frame(t)) {
                assert!((a - 0.1 * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn estimated_norm_whitens_training_features() {
        let model = small_model(1);
        let specs: Vec<_> = (0..3).map(|s| stft(&noise(2, 6_000, 10 + s), &model.config.stft).unwrap()).collect();
        let normed = model.clone().with_estimated_norm(&specs).unwrap();
        let norm = normed.config.feature_norm.clone().unwrap();
        let (mut sum, mut sq, mut n) = (vec![0.0; 80], vec![0.0; 80], 0.0);
        for spec in &specs {
            let mut tape = Tape::new();
            let bound = normed.params.bind(&mut tape);
            let (f, _) = normed.enhance(&mut tape, &bound, spec, spec, None).unwrap();
            let mut raw_tape = Tape::new();
            let raw_bound = model.params.bind(&mut raw_tape);
            let (g, _) = model.enhance(&mut raw_tape, &raw_bound, spec, spec, None).unwrap();
            let (f, g) = (tape.value(f), raw_tape.value(g));
            for t in 0..f.rows() {
                for j in 0..80 {
                    let v = f.row(t)[j];
                    assert!((v - (g.row(t)[j] - norm.mean[j]) / norm.std[j]).abs() < 1e-9);
                    sum[j] += v;
                    sq[j] += v * v;
                }
                n += 1.0;
            }
        }
        for j in 0..80 {
            assert!((sum[j] / n).abs() < 1e-9);
            if norm.std[j] > 1e-3 {
                assert!((sq[j] / n - 1.0).abs() < 1e-6, "dim {j}");
            }
        }
        let mut bad = normed.config.clone();
        bad.feature_norm.as_mut().unwrap().std[0] = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn chunk_forward_shapes_and_padding() {
        let model = small_model(3);
        let spec = stft(&noise(2, 12_000, 4), &model.config.stft).unwrap();
        let plan = plan_chunks(spec.num_frames(), 40, 80, 40).unwrap();
        let last = plan.descriptors.last().unwrap();
        assert!(last.right_pad > 0);
        for fe in [ContextMode::None, ContextMode::Real] {
            for be in ContextMode::ALL {
                let mut tape = Tape::new();
                let b = model.params.bind(&mut tape);
                let h = model.config.sim.zero_state().to_tape(&mut tape);
                let out = model.chunk_forward(&mut tape, &b, &spec, last, fe, be, Some(&h), true, None).unwrap();
                assert_eq!(tape.value(out.core_logits).shape(), [last.core_len(), 11]);
                let (target, valid) = out.sim_target.unwrap();
                assert_eq!(valid, 0);
                assert_eq!(target, Tensor::zeros(40, 80));
                assert!(out.simulated.is_some());
            }
        }
        let mut tape = Tape::new();
        let b = model.params.bind(&mut tape);
        let err = model.chunk_forward(&mut tape, &b, &spec, last, ContextMode::Simulated, ContextMode::None, None, false, None);
        assert!(err.is_err());
        let err = model.chunk_forward(&mut tape, &b, &spec, last, ContextMode::None, ContextMode::Simulated, None, false, None);
        assert!(err.is_err());
    }

    #[test]
    fn no_future_frames_without_real_context() {
        let model = small_model(5);
        let wave = noise(2, 16_000, 6);
        let spec = stft(&wave, &model.config.stft).unwrap();
        let d = plan_chunks(spec.num_frames(), 40, 80, 40).unwrap().descriptors[1];
        let mut altered = spec.clone();
        for c in 0..2 {
            for t in d.core_end..spec.num_frames() {
                altered.frame_mut(c, t).iter_mut().for_each(|z| *z *= 3.0);
            }
        }
        let run = |s: &MultiChannelSpectrogram, fe, be| {
            let mut tape = Tape::new();
            let b = model.params.bind(&mut tape);
            let h = model.config.sim.zero_state().to_tape(&mut tape);
            let out = model.chunk_forward(&mut tape, &b, s, &d, fe, be, Some(&h), false, None).unwrap();
            tape.value(out.core_logits).clone()
        };
        for be in [ContextMode::None, ContextMode::Simulated] {
            assert_eq!(run(&spec, ContextMode::None, be), run(&altered, ContextMode::None, be));
        }
        assert_ne!(run(&spec, ContextMode::Real, ContextMode::Real), run(&altered, ContextMode::Real, ContextMode::Real));
    }

    #[test]
    fn save_load_and_architecture_check() {
        let model = small_model(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.config, model.config);
        let other = Model::new(ModelConfig::toy(), 0).unwrap();
        assert!(Model::with_params(model.config.clone(), other.params).is_err());
    }

    #[test]
    fn mode_mapping() {
        assert_eq!(inference_modes(ContextMode::None), (ContextMode::None, ContextMode::None));
        assert_eq!(inference_modes(ContextMode::Real), (ContextMode::Real, ContextMode::Real));
        assert_eq!(inference_modes(ContextMode::Simulated), (ContextMode::None, ContextMode::Simulated));
    }
}
