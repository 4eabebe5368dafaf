//! Chunk-by-chunk streaming recognition and enhancement.
//!
//! Audio is pushed in arrival order; a chunk is decoded as soon as every STFT
//! frame it needs is complete. Latency is accounted per chunk: the algorithmic
//! part is the chunk span plus any real future context waited for, and the
//! compute part is measured wall time.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::asr::{collapse, frame_argmax, TokenSequence};
use crate::beamformer::{enhance_chunk, MaskSource, TimeFrequencyMask};
use crate::chunking::{plan_chunks, ChunkDescriptor, ContextMode};
use crate::cuside::{inference_modes, Model, ModelConfig, SimState};
use crate::error::{Error, Result};
use crate::neural::{Tape, Tensor};
use crate::signal::{istft, stft, stft_frames, MultiChannelSpectrogram, Waveform};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub chunk_ms: f64,
    pub left_ctx_ms: f64,
    pub right_ctx_ms: f64,
    pub hop_ms: f64,
    /// Right-context mode, fixed for the whole run.
    pub mode: ContextMode,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            chunk_ms: 400.0,
            left_ctx_ms: 800.0,
            right_ctx_ms: 400.0,
            hop_ms: 10.0,
            mode: ContextMode::None,
        }
    }
}

fn whole_hops(ms: f64, hop: f64, what: &str) -> Result<usize> {
    let q = ms / hop;
    if !q.is_finite() || q < 0.0 || (q - q.round()).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("{what} of {ms} ms is not a multiple of the {hop} ms hop")));
    }
    Ok(q.round() as usize)
}

impl StreamConfig {
    /// Geometry of `model` with the given mode.
    pub fn for_model(model: &ModelConfig, mode: ContextMode) -> Self {
        let hop = model.hop_ms();
        Self {
            chunk_ms: model.chunk_frames as f64 * hop,
            left_ctx_ms: model.left_frames as f64 * hop,
            right_ctx_ms: model.right_frames as f64 * hop,
            hop_ms: hop,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hop_ms > 0.0) {
            return Err(Error::InvalidConfig("hop must be positive".into()));
        }
        self.frames().and_then(|(c, _, _)| {
            if c == 0 {
                Err(Error::InvalidConfig("chunk must span at least one hop".into()))
            } else {
                Ok(())
            }
        })
    }

    /// `(chunk, left, right)` in frames.
    pub fn frames(&self) -> Result<(usize, usize, usize)> {
        Ok((
            whole_hops(self.chunk_ms, self.hop_ms, "chunk")?,
            whole_hops(self.left_ctx_ms, self.hop_ms, "left context")?,
            whole_hops(self.right_ctx_ms, self.hop_ms, "right context")?,
        ))
    }

    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        self.validate()?;
        if (self.hop_ms - model.hop_ms()).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "stream hop {} ms differs from the model's {} ms",
                self.hop_ms,
                model.hop_ms()
            )));
        }
        let (_, _, r) = self.frames()?;
        if self.mode == ContextMode::Simulated && r != model.sim.right_frames {
            return Err(Error::InvalidConfig(format!(
                "simulated context needs right context of {} frames, got {r}",
                model.sim.right_frames
            )));
        }
        Ok(())
    }

    /// Chunk span plus the real future context waited for.
    pub fn algorithmic_latency_ms(&self) -> f64 {
        match self.mode {
            ContextMode::Real => self.chunk_ms + self.right_ctx_ms,
            _ => self.chunk_ms,
        }
    }
}

/// One decoded chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub chunk: usize,
    /// Tokens appended to the transcript by this chunk.
    pub tokens: Vec<u32>,
    pub alg_latency_ms: f64,
    pub compute_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_compute_ms: Option<f64>,
}

/// Result of a complete streaming run.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutput {
    pub events: Vec<StreamEvent>,
    pub transcript: TokenSequence,
    /// Per-frame argmax labels over all core frames.
    pub frame_labels: Vec<u32>,
    /// Core-frame logits of each chunk.
    pub logits: Vec<Tensor>,
    /// The input was shorter than one chunk (or one window) and was padded.
    pub short_input: bool,
}

/// Incremental decoder. Feed audio with [`Streamer::push`] and close the
/// stream with [`Streamer::finish`].
pub struct Streamer<'a> {
    model: &'a Model,
    cfg: StreamConfig,
    geometry: (usize, usize, usize),
    modes: (ContextMode, ContextMode),
    channels: Vec<Vec<f64>>,
    sample_rate: Option<u32>,
    next_chunk: usize,
    sim_state: SimState,
    prev_label: Option<u32>,
    events: Vec<StreamEvent>,
    frame_labels: Vec<u32>,
    logits: Vec<Tensor>,
    finished: bool,
}

impl<'a> Streamer<'a> {
    pub fn new(model: &'a Model, cfg: StreamConfig) -> Result<Self> {
        cfg.check_model(&model.config)?;
        Ok(Self {
            model,
            cfg,
            geometry: cfg.frames()?,
            modes: inference_modes(cfg.mode),
            channels: Vec::new(),
            sample_rate: None,
            next_chunk: 0,
            sim_state: model.config.sim.zero_state(),
            prev_label: None,
            events: Vec::new(),
            frame_labels: Vec::new(),
            logits: Vec::new(),
            finished: false,
        })
    }

    pub fn events(&self) -> &[StreamEvent] {
        &self.events
    }

    pub fn transcript(&self) -> TokenSequence {
        TokenSequence::from_ids_unchecked(self.events.iter().flat_map(|e| e.tokens.iter().copied()).collect())
    }

    fn complete_frames(&self) -> usize {
        let n = self.channels.first().map_or(0, Vec::len);
        let st = &self.model.config.stft;
        if n < st.window_size {
            0
        } else {
            (n - st.window_size) / st.hop + 1
        }
    }

    fn uses_real_future(&self) -> bool {
        self.modes.0 == ContextMode::Real || self.modes.1 == ContextMode::Real
    }

    /// Append audio and decode every chunk that became ready.
    pub fn push(&mut self, block: &Waveform) -> Result<Vec<StreamEvent>> {
        if self.finished {
            return Err(Error::InvalidInput("stream already finished".into()));
        }
        match self.sample_rate {
            None => {
                if block.sample_rate() != self.model.config.sample_rate {
                    return Err(Error::InvalidInput(format!(
                        "audio at {} Hz, model expects {} Hz",
                        block.sample_rate(),
                        self.model.config.sample_rate
                    )));
                }
                self.sample_rate = Some(block.sample_rate());
                self.channels = vec![Vec::new(); block.num_channels()];
            }
            Some(sr) => {
                if block.sample_rate() != sr || block.num_channels() != self.channels.len() {
                    return Err(Error::Shape("pushed block changes channel count or rate".into()));
                }
            }
        }
        for (dst, src) in self.channels.iter_mut().zip(block.channels()) {
            dst.extend_from_slice(src);
        }
        let (c, l, r) = self.geometry;
        let extra = if self.uses_real_future() { r } else { 0 };
        let mut out = Vec::new();
        loop {
            let core_start = self.next_chunk * c;
            let core_end = core_start + c;
            if self.complete_frames() < core_end + extra {
                break;
            }
            // Every frame this chunk reads exists, so the utterance length
            // cannot change its geometry.
            let d = ChunkDescriptor::new(core_start, core_end, l, r, usize::MAX);
            out.push(self.process(&d)?);
        }
        Ok(out)
    }

    /// Close the stream: decode the remaining chunks with the final length.
    pub fn finish(&mut self) -> Result<StreamOutput> {
        if self.finished {
            return Err(Error::InvalidInput("stream already finished".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::InvalidInput("no audio was pushed".into()));
        }
        self.finished = true;
        let st = self.model.config.stft;
        let n = self.channels[0].len();
        let mut short_input = false;
        if n < st.window_size {
            for ch in &mut self.channels {
                ch.resize(st.window_size, 0.0);
            }
            short_input = true;
        }
        let total = st.num_frames(self.channels[0].len())?;
        let (c, l, r) = self.geometry;
        short_input |= total < c;
        while self.next_chunk * c < total {
            let core_start = self.next_chunk * c;
            let d = ChunkDescriptor::new(core_start, (core_start + c).min(total), l, r, total);
            self.process(&d)?;
        }
        Ok(StreamOutput {
            events: self.events.clone(),
            transcript: self.transcript(),
            frame_labels: self.frame_labels.clone(),
            logits: self.logits.clone(),
            short_input,
        })
    }

    fn process(&mut self, d: &ChunkDescriptor) -> Result<StreamEvent> {
        let started = Instant::now();
        let need_end = if self.uses_real_future() { d.right_ctx_end } else { d.core_end };
        let local = stft_frames(&self.channels, &self.model.config.stft, d.left_ctx_start, need_end)?;
        let ld = shift(d, d.left_ctx_start);
        let (logits, state, sim) = decode_chunk(self.model, &local, &ld, self.modes, &self.sim_state)?;
        let labels = frame_argmax(&logits);
        if let Some(s) = state {
            self.sim_state = s;
        }
        let tokens = collapse(&labels, self.prev_label);
        self.prev_label = labels.last().copied().or(self.prev_label);
        self.frame_labels.extend_from_slice(&labels);
        self.logits.push(logits);
        let ev = StreamEvent {
            chunk: self.next_chunk,
            tokens,
            alg_latency_ms: self.cfg.algorithmic_latency_ms(),
            compute_ms: started.elapsed().as_secs_f64() * 1e3,
            sim_compute_ms: sim,
        };
        self.next_chunk += 1;
        self.events.push(ev.clone());
        Ok(ev)
    }
}

/// Descriptor re-indexed so that frame `offset` becomes frame 0.
fn shift(d: &ChunkDescriptor, offset: usize) -> ChunkDescriptor {
    ChunkDescriptor {
        core_start: d.core_start - offset,
        core_end: d.core_end - offset,
        left_ctx_start: d.left_ctx_start - offset,
        right_ctx_end: d.right_ctx_end - offset,
        left_pad: d.left_pad,
        right_pad: d.right_pad,
    }
}

type ChunkDecode = (Tensor, Option<SimState>, Option<f64>);

fn decode_chunk(
    model: &Model,
    spec: &MultiChannelSpectrogram,
    d: &ChunkDescriptor,
    (frontend, backend): (ContextMode, ContextMode),
    state: &SimState,
) -> Result<ChunkDecode> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let h = state.to_tape(&mut tape);
    let out = model.chunk_forward(&mut tape, &bound, spec, d, frontend, backend, Some(&h), false, None)?;
    let logits = tape.value(out.core_logits).clone();
    let next = out.simulated.map(|_| SimState::from_tape(&tape, &out.sim_state));
    Ok((logits, next, out.sim_elapsed.map(|t| t.as_secs_f64() * 1e3)))
}

/// Pad audio shorter than one analysis window with trailing zeros.
fn at_least_one_window(wave: &Waveform, window: usize) -> Result<(Waveform, bool)> {
    if wave.len() >= window {
        return Ok((wave.clone(), false));
    }
    let chans = wave
        .channels()
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c.resize(window, 0.0);
            c
        })
        .collect();
    Ok((Waveform::new(chans, wave.sample_rate())?, true))
}

/// Stream `mixture` through a [`Streamer`] one hop at a time.
pub fn stream_decode(mixture: &Waveform, model: &Model, cfg: &StreamConfig) -> Result<StreamOutput> {
    let mut s = Streamer::new(model, *cfg)?;
    let hop = model.config.stft.hop;
    let mut start = 0;
    while start < mixture.len() {
        let end = (start + hop).min(mixture.len());
        let block = Waveform::new(
            mixture.channels().iter().map(|c| c[start..end].to_vec()).collect(),
            mixture.sample_rate(),
        )?;
        s.push(&block)?;
        start = end;
    }
    if mixture.is_empty() {
        s.push(mixture)?;
    }
    s.finish()
}

/// The same chunked pipeline run over a precomputed spectrogram of the whole
/// recording. Returns per-frame labels and the transcript.
pub fn decode_offline(model: &Model, spec: &MultiChannelSpectrogram, cfg: &StreamConfig) -> Result<(Vec<u32>, TokenSequence)> {
    cfg.check_model(&model.config)?;
    let (c, l, r) = cfg.frames()?;
    let modes = inference_modes(cfg.mode);
    let plan = plan_chunks(spec.num_frames(), c, l, r)?;
    let mut state = model.config.sim.zero_state();
    let mut labels = Vec::with_capacity(spec.num_frames());
    for d in &plan.descriptors {
        let (logits, next, _) = decode_chunk(model, spec, d, modes, &state)?;
        if let Some(s) = next {
            state = s;
        }
        labels.extend(frame_argmax(&logits));
    }
    let ids = collapse(&labels, None);
    Ok((labels, TokenSequence::from_ids_unchecked(ids)))
}

/// [`decode_offline`] from a waveform.
pub fn decode_offline_waveform(model: &Model, mixture: &Waveform, cfg: &StreamConfig) -> Result<TokenSequence> {
    let (wave, _) = at_least_one_window(mixture, model.config.stft.window_size)?;
    let spec = stft(&wave, &model.config.stft)?;
    Ok(decode_offline(model, &spec, cfg)?.1)
}

/// Non-streaming decode: whole-utterance enhancement and encoding.
pub fn decode_utterance(model: &Model, spec: &MultiChannelSpectrogram) -> Result<TokenSequence> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let logits = model.utterance_logits(&mut tape, &bound, spec, None)?;
    Ok(TokenSequence::from_ids_unchecked(collapse(&frame_argmax(tape.value(logits)), None)))
}

/// Mean and nearest-rank 95th percentile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub p95: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = (0.95 * v.len() as f64).ceil() as usize;
        Some(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            p95: v[rank.max(1) - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mode: ContextMode,
    pub chunks: usize,
    pub algorithmic_ms: Aggregate,
    pub compute_ms: Aggregate,
    pub sim_compute_ms: Option<Aggregate>,
}

/// Aggregate latency over `events`, rejecting any event whose algorithmic
/// latency departs from the configured formula.
pub fn latency_report(events: &[StreamEvent], cfg: &StreamConfig) -> Result<LatencyReport> {
    if events.is_empty() {
        return Err(Error::InvalidInput("latency report needs at least one event".into()));
    }
    let expected = cfg.algorithmic_latency_ms();
    if let Some(bad) = events.iter().find(|e| e.alg_latency_ms != expected) {
        return Err(Error::InvalidInput(format!(
            "chunk {} reports {} ms algorithmic latency, expected {expected} ms",
            bad.chunk, bad.alg_latency_ms
        )));
    }
    let alg: Vec<f64> = events.iter().map(|e| e.alg_latency_ms).collect();
    let comp: Vec<f64> = events.iter().map(|e| e.compute_ms).collect();
    let sim: Vec<f64> = events.iter().filter_map(|e| e.sim_compute_ms).collect();
    Ok(LatencyReport {
        mode: cfg.mode,
        chunks: events.len(),
        algorithmic_ms: Aggregate::of(&alg).expect("non-empty"),
        compute_ms: Aggregate::of(&comp).expect("non-empty"),
        sim_compute_ms: Aggregate::of(&sim),
    })
}

impl fmt::Display for LatencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<9} {} chunks, algorithmic {} ms + compute {:.2} ms mean ({:.2} ms p95)",
            self.mode.as_str(),
            self.chunks,
            self.algorithmic_ms.mean,
            self.compute_ms.mean,
            self.compute_ms.p95
        )?;
        if let Some(s) = &self.sim_compute_ms {
            write!(f, ", simulator {:.2} ms mean ({:.2} ms p95)", s.mean, s.p95)?;
        }
        Ok(())
    }
}

/// Where enhancement masks come from.
#[derive(Clone, Copy)]
pub enum StreamMasks<'a> {
    Network(&'a Model),
    /// Whole-utterance masks; each chunk reads its own frames.
    Oracle {
        speech: &'a TimeFrequencyMask,
        noise: &'a TimeFrequencyMask,
    },
}

#[derive(Debug, Clone)]
pub struct EnhancedStream {
    pub waveform: Waveform,
    pub fallback_bins: usize,
}

/// Front-end only: per-chunk MVDR over the estimation span, core frames
/// stitched and inverted.
pub fn enhance_stream(
    mixture: &Waveform,
    model_cfg: &ModelConfig,
    cfg: &StreamConfig,
    masks: StreamMasks<'_>,
) -> Result<EnhancedStream> {
    cfg.check_model(model_cfg)?;
    let (wave, _) = at_least_one_window(mixture, model_cfg.stft.window_size)?;
    let spec = stft(&wave, &model_cfg.stft)?;
    let (c, l, r) = cfg.frames()?;
    let frontend = inference_modes(cfg.mode).0;
    let total = spec.num_frames();
    if let StreamMasks::Oracle { speech, noise } = masks {
        for m in [speech, noise] {
            if m.num_frames() != total || m.num_bins() != spec.num_bins() {
                return Err(Error::Shape(format!(
                    "mask [{}, {}] does not match spectrogram [{total}, {}]",
                    m.num_frames(),
                    m.num_bins(),
                    spec.num_bins()
                )));
            }
        }
    }
    let plan = plan_chunks(total, c, l, r)?;
    let mut out = MultiChannelSpectrogram::zeros(1, total, model_cfg.stft);
    let mut fallback_bins = 0;
    for d in &plan.descriptors {
        let end = if frontend == ContextMode::Real { d.right_ctx_end } else { d.core_end };
        let est = spec.padded_frames(d.left_ctx_start as isize, end as isize);
        let core = (d.core_start - d.left_ctx_start)..(d.core_end - d.left_ctx_start);
        let sliced;
        let source = match masks {
            StreamMasks::Network(m) => MaskSource::Network {
                params: &m.params,
                config: &m.config.mask,
            },
            StreamMasks::Oracle { speech, noise } => {
                let (a, b) = (d.left_ctx_start as isize, end as isize);
                sliced = (speech.padded_frames(a, b, 0.5), noise.padded_frames(a, b, 0.5));
                MaskSource::Oracle {
                    speech: &sliced.0,
                    noise: &sliced.1,
                }
            }
        };
        let e = enhance_chunk(&est, core.clone(), source, &model_cfg.mvdr)?;
        fallback_bins += e.fallback_bins;
        for (i, t) in core.clone().enumerate() {
            out.frame_mut(0, d.core_start + i).copy_from_slice(e.spectrum.frame(0, t));
        }
    }
    Ok(EnhancedStream {
        waveform: istft(&out, mixture.sample_rate(), Some(mixture.len()))?,
        fallback_bins,
    })
}
