//! Python bindings. Signals cross the boundary as `list[list[float]]`
//! (channels x samples) and token sequences as `list[int]`.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cuside_array::asr;
use cuside_array::chunking::{self, ContextMode};
use cuside_array::cuside::{self, Utterance};
use cuside_array::scene::{self, DatasetRecipe};
use cuside_array::signal::{self, Waveform};
use cuside_array::streamer::{self, StreamConfig, StreamMasks};
use cuside_array::{neural::Tensor, verify};

fn py_err(e: cuside_array::Error) -> PyErr {
    if e.is_io() {
        PyOSError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for cuside_array::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn mode(s: &str) -> PyResult<ContextMode> {
    s.parse().py()
}

fn wave(channels: Vec<Vec<f64>>, sample_rate: u32) -> PyResult<Waveform> {
    Waveform::new(channels, sample_rate).py()
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Tensor::from_vec(rows.len(), cols, rows.concat()).py()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// One simulated multi-channel utterance.
#[pyclass(name = "Scene", frozen)]
struct PyScene {
    inner: scene::SimulatedScene,
}

#[pymethods]
impl PyScene {
    #[getter]
    fn id(&self) -> String {
        self.inner.spec.id.clone()
    }
    #[getter]
    fn tokens(&self) -> Vec<u32> {
        self.inner.spec.transcript.clone()
    }
    #[getter]
    fn snr_db(&self) -> f64 {
        self.inner.spec.snr_db
    }
    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.mixture.sample_rate()
    }
    #[getter]
    fn mixture(&self) -> Vec<Vec<f64>> {
        self.inner.mixture.channels().to_vec()
    }
    #[getter]
    fn speech(&self) -> Vec<Vec<f64>> {
        self.inner.speech_image.channels().to_vec()
    }
    #[getter]
    fn noise(&self) -> Vec<Vec<f64>> {
        self.inner.noise_image.channels().to_vec()
    }
    fn __repr__(&self) -> String {
        format!(
            "Scene(id={:?}, channels={}, samples={}, snr_db={:.2})",
            self.inner.spec.id,
            self.inner.mixture.num_channels(),
            self.inner.mixture.len(),
            self.inner.spec.snr_db
        )
    }
}

/// Deterministic toy scenes: `n` utterances from `seed`.
#[pyfunction]
#[pyo3(signature = (n, seed=0, snr_low=0.0, snr_high=10.0, mics=4, spacing=0.05, directional=true))]
fn simulate(
    n: usize,
    seed: u64,
    snr_low: f64,
    snr_high: f64,
    mics: usize,
    spacing: f64,
    directional: bool,
) -> PyResult<Vec<PyScene>> {
    let recipe = DatasetRecipe {
        num_utterances: n,
        seed,
        snr_db: (snr_low, snr_high),
        directional_noise: directional,
        geometry: scene::ArrayGeometry::uniform_linear(mics, spacing),
        ..Default::default()
    };
    Ok(recipe.scenes().py()?.into_iter().map(|inner| PyScene { inner }).collect())
}

/// CTC negative log-likelihood and its gradient w.r.t. the logits.
#[pyfunction]
fn ctc_loss(logits: Vec<Vec<f64>>, labels: Vec<u32>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let (loss, grad) = asr::ctc_loss(&tensor(logits)?, &labels).py()?;
    Ok((loss, rows(&grad)))
}

#[pyfunction]
fn si_sdr(reference: Vec<f64>, estimate: Vec<f64>) -> PyResult<f64> {
    signal::si_sdr(&reference, &estimate).py()
}

#[pyfunction]
fn snr_db(signal: Vec<f64>, noise: Vec<f64>) -> PyResult<f64> {
    signal::snr_db(&signal, &noise).py()
}

#[pyfunction]
fn cer(hyps: Vec<Vec<u32>>, refs: Vec<Vec<u32>>) -> PyResult<f64> {
    if hyps.len() != refs.len() {
        return Err(PyValueError::new_err("hypothesis and reference counts differ"));
    }
    asr::cer(hyps.iter().map(|h| &h[..]).zip(refs.iter().map(|r| &r[..]))).py()
}

/// Chunk layout as a list of dicts with core and context bounds.
#[pyfunction]
fn plan_chunks<'py>(
    py: Python<'py>,
    total_frames: usize,
    chunk_frames: usize,
    left_frames: usize,
    right_frames: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let plan = chunking::plan_chunks(total_frames, chunk_frames, left_frames, right_frames).py()?;
    plan.descriptors
        .iter()
        .map(|d| {
            let out = PyDict::new(py);
            out.set_item("core_start", d.core_start)?;
            out.set_item("core_end", d.core_end)?;
            out.set_item("left_ctx_start", d.left_ctx_start)?;
            out.set_item("right_ctx_end", d.right_ctx_end)?;
            out.set_item("left_pad", d.left_pad)?;
            out.set_item("right_pad", d.right_pad)?;
            Ok(out)
        })
        .collect()
}

/// Streaming MVDR with ideal ratio masks computed from the speech and noise
/// images. Returns the enhanced single-channel signal.
#[pyfunction]
#[pyo3(signature = (mixture, speech, noise, mode="none", sample_rate=16_000))]
fn oracle_enhance(
    mixture: Vec<Vec<f64>>,
    speech: Vec<Vec<f64>>,
    noise: Vec<Vec<f64>>,
    mode: &str,
    sample_rate: u32,
) -> PyResult<Vec<f64>> {
    let cfg = cuside::ModelConfig::toy();
    let spec = |w| signal::stft(&w, &cfg.stft).py();
    let (sm, nm) = scene::oracle_irm(&spec(wave(speech, sample_rate)?)?, &spec(wave(noise, sample_rate)?)?, 0).py()?;
    let scfg = StreamConfig::for_model(&cfg, self::mode(mode)?);
    let out = streamer::enhance_stream(&wave(mixture, sample_rate)?, &cfg, &scfg, StreamMasks::Oracle { speech: &sm, noise: &nm })
        .py()?;
    Ok(out.waveform.channel(0).to_vec())
}

/// Result of a streaming run.
#[pyclass(name = "StreamResult", frozen, get_all)]
struct PyStreamResult {
    transcript: Vec<u32>,
    /// Tokens emitted per chunk.
    chunk_tokens: Vec<Vec<u32>>,
    algorithmic_latency_ms: f64,
    compute_ms: Vec<f64>,
    simulator_ms: Vec<f64>,
    short_input: bool,
}

#[pymethods]
impl PyStreamResult {
    fn __repr__(&self) -> String {
        format!(
            "StreamResult(tokens={:?}, chunks={}, algorithmic_latency_ms={})",
            self.transcript,
            self.chunk_tokens.len(),
            self.algorithmic_latency_ms
        )
    }
}

/// Mask network, MVDR front end, CTC encoder and future-context simulator.
#[pyclass(name = "Model")]
struct PyModel {
    inner: cuside::Model,
}

#[pymethods]
impl PyModel {
    /// Freshly initialised model. `preset` is "toy" or "paper".
    #[new]
    #[pyo3(signature = (seed=0, preset="toy"))]
    fn new(seed: u64, preset: &str) -> PyResult<Self> {
        let cfg = match preset {
            "toy" => cuside::ModelConfig::toy(),
            "paper" => cuside::ModelConfig::paper(),
            other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
        };
        Ok(Self { inner: cuside::Model::new(cfg, seed).py()? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: cuside::Model::load(path).py()? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).py()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.num_values()
    }

    /// Model configuration as a JSON string.
    #[getter]
    fn config_json(&self) -> String {
        serde_json_config(&self.inner.config)
    }

    /// Fit the feature normalisation to the mixtures of `scenes`.
    fn estimate_norm(&mut self, scenes: Vec<PyRef<'_, PyScene>>) -> PyResult<()> {
        let specs = scenes
            .iter()
            .map(|s| signal::stft(&s.inner.mixture, &self.inner.config.stft))
            .collect::<cuside_array::Result<Vec<_>>>()
            .py()?;
        self.inner = self.inner.clone().with_estimated_norm(&specs).py()?;
        Ok(())
    }

    /// Train in place on `train` scenes, validating on `val`. Returns the
    /// validation history as `(step, utterance CTC loss, total loss)` tuples.
    #[pyo3(signature = (train, val, steps=100, batch_size=4, lr=3e-3, seed=0, eval_every=50))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        train: Vec<PyRef<'_, PyScene>>,
        val: Vec<PyRef<'_, PyScene>>,
        steps: u64,
        batch_size: usize,
        lr: f64,
        seed: u64,
        eval_every: u64,
    ) -> PyResult<Vec<(u64, f64, f64)>> {
        let utts = |s: &[PyRef<'_, PyScene>]| {
            s.iter().map(|x| Utterance::from_scene(&x.inner, &self.inner.config)).collect::<cuside_array::Result<Vec<_>>>()
        };
        let (tr, va) = (utts(&train).py()?, utts(&val).py()?);
        let cfg = cuside::TrainingConfig {
            max_steps: steps,
            batch_size,
            lr,
            seed,
            eval_every,
            warmup_steps: (steps / 20).max(1),
            ..Default::default()
        };
        let model = self.inner.clone();
        let summary = py
            .detach(move || {
                let mut t = cuside::Trainer::new(model, cfg, None)?;
                t.run(&tr, &va, &mut std::io::sink(), &mut std::io::sink())
            })
            .py()?;
        self.inner = cuside::Model::with_params(self.inner.config.clone(), summary.final_params).py()?;
        Ok(summary.history.iter().map(|v| (v.step, v.l_utt, v.l_total)).collect())
    }

    /// Greedy full-utterance transcript.
    #[pyo3(signature = (mixture, sample_rate=16_000))]
    fn decode(&self, mixture: Vec<Vec<f64>>, sample_rate: u32) -> PyResult<Vec<u32>> {
        let w = wave(mixture, sample_rate)?;
        let spec = signal::stft(&w, &self.inner.config.stft).py()?;
        Ok(streamer::decode_utterance(&self.inner, &spec).py()?.ids().to_vec())
    }

    /// Chunk-by-chunk streaming recognition with the given right-context
    /// mode ("none", "real" or "simulated").
    #[pyo3(signature = (mixture, mode="simulated", sample_rate=16_000))]
    fn stream(&self, mixture: Vec<Vec<f64>>, mode: &str, sample_rate: u32) -> PyResult<PyStreamResult> {
        let w = wave(mixture, sample_rate)?;
        let cfg = StreamConfig::for_model(&self.inner.config, self::mode(mode)?);
        let out = streamer::stream_decode(&w, &self.inner, &cfg).py()?;
        Ok(PyStreamResult {
            transcript: out.transcript.ids().to_vec(),
            chunk_tokens: out.events.iter().map(|e| e.tokens.clone()).collect(),
            algorithmic_latency_ms: cfg.algorithmic_latency_ms(),
            compute_ms: out.events.iter().map(|e| e.compute_ms).collect(),
            simulator_ms: out.events.iter().filter_map(|e| e.sim_compute_ms).collect(),
            short_input: out.short_input,
        })
    }

    /// Streaming front end only: the enhanced reference-channel signal.
    #[pyo3(signature = (mixture, mode="none", sample_rate=16_000))]
    fn enhance(&self, mixture: Vec<Vec<f64>>, mode: &str, sample_rate: u32) -> PyResult<Vec<f64>> {
        let w = wave(mixture, sample_rate)?;
        let cfg = StreamConfig::for_model(&self.inner.config, self::mode(mode)?);
        let out = streamer::enhance_stream(&w, &self.inner.config, &cfg, StreamMasks::Network(&self.inner)).py()?;
        Ok(out.waveform.channel(0).to_vec())
    }
}

fn serde_json_config(cfg: &cuside::ModelConfig) -> String {
    serde_json::to_string(cfg).unwrap_or_default()
}

/// Run the built-in numerical self-checks. Returns `(name, passed, detail)`.
#[pyfunction]
#[pyo3(signature = (filter=None, seed=0))]
fn self_check(filter: Option<&str>, seed: u64) -> Vec<(String, bool, String)> {
    let opts = verify::VerifyOptions { seed, fault: None };
    verify::run_checks(&opts, filter)
        .into_iter()
        .map(|r| (r.name.to_string(), r.passed, r.detail))
        .collect()
}

#[pymodule]
fn cuside_array_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyStreamResult>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(si_sdr, m)?)?;
    m.add_function(wrap_pyfunction!(snr_db, m)?)?;
    m.add_function(wrap_pyfunction!(cer, m)?)?;
    m.add_function(wrap_pyfunction!(plan_chunks, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_enhance, m)?)?;
    m.add_function(wrap_pyfunction!(self_check, m)?)?;
    m.add("VOCAB_SIZE", scene::toy::VOCAB_SIZE)?;
    m.add("BLANK", asr::BLANK)?;
    Ok(())
}
