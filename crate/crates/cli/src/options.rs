//! Command options: clap flags layered over an optional TOML file.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use cuside_array::chunking::ContextMode;
use cuside_array::cuside::TrainingConfig;

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    None,
    Real,
    Simulated,
}

impl From<Mode> for ContextMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::None => ContextMode::None,
            Mode::Real => ContextMode::Real,
            Mode::Simulated => ContextMode::Simulated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    Paper,
}

pub fn load_file<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
        }
    }
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

fn required(p: &Option<PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    p.clone().ok_or_else(|| Failure::Usage(format!("missing {flag} (flag or config file)")))
}

pub fn log_resolved<T: Serialize>(command: &str, opts: &T) {
    let json = serde_json::to_string(opts).unwrap_or_default();
    eprintln!("resolved {command} config: {json}");
}

// ---------------------------------------------------------------- simulate

#[derive(Args)]
pub struct SimulateArgs {
    /// TOML file with any of the options below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of utterances.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub snr_low: Option<f64>,
    #[arg(long)]
    pub snr_high: Option<f64>,
    /// Microphones in the uniform linear array.
    #[arg(long)]
    pub mics: Option<usize>,
    /// Microphone spacing in metres.
    #[arg(long)]
    pub spacing: Option<f64>,
    /// Spatially white noise only (no directional interferer).
    #[arg(long)]
    pub diffuse_only: bool,
    /// Re-measure every written SNR from the WAV files.
    #[arg(long)]
    pub audit_snr: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateOptions {
    pub out: Option<PathBuf>,
    pub n: usize,
    pub seed: u64,
    pub snr_low: f64,
    pub snr_high: f64,
    pub mics: usize,
    pub spacing: f64,
    pub directional: bool,
    pub diffuse_db: f64,
    pub audit_snr: bool,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            out: None,
            n: 200,
            seed: 0,
            snr_low: 0.0,
            snr_high: 10.0,
            mics: 4,
            spacing: 0.05,
            directional: true,
            diffuse_db: -20.0,
            audit_snr: false,
        }
    }
}

impl SimulateArgs {
    pub fn resolve(&self) -> Result<(SimulateOptions, PathBuf), Failure> {
        let mut o: SimulateOptions = load_file(self.config.as_deref())?;
        set(&mut o.out, self.out.clone().map(Some));
        set(&mut o.n, self.n);
        set(&mut o.seed, self.seed);
        set(&mut o.snr_low, self.snr_low);
        set(&mut o.snr_high, self.snr_high);
        set(&mut o.mics, self.mics);
        set(&mut o.spacing, self.spacing);
        if self.diffuse_only {
            o.directional = false;
        }
        o.audit_snr |= self.audit_snr;
        let out = required(&o.out, "--out")?;
        Ok((o, out))
    }
}

// ------------------------------------------------------------------- data

/// Where utterances come from: a simulated dataset on disk or an in-memory
/// synthetic set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataOptions {
    pub dir: Option<PathBuf>,
    pub synth: usize,
    pub seed: u64,
}

impl DataOptions {
    fn synthetic(n: usize, seed: u64) -> Self {
        Self { dir: None, synth: n, seed }
    }
}

impl Default for DataOptions {
    fn default() -> Self {
        Self::synthetic(200, 0)
    }
}

// ------------------------------------------------------------------ train

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training dataset directory (from `simulate`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation dataset directory.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    /// Synthesise this many training utterances in memory instead of --data.
    #[arg(long)]
    pub synth: Option<usize>,
    /// Synthetic validation utterances.
    #[arg(long)]
    pub val_synth: Option<usize>,
    /// Seed of the synthetic data recipe.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<Preset>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    /// Continue from the state saved in --out.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub out: Option<PathBuf>,
    pub model: Preset,
    pub resume: bool,
    pub data: DataOptions,
    pub val: DataOptions,
    pub training: TrainingConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            out: None,
            model: Preset::Toy,
            resume: false,
            data: DataOptions::default(),
            val: DataOptions::synthetic(20, 1000),
            training: toy_training(),
        }
    }
}

/// Training defaults sized for the toy task on one CPU core.
pub fn toy_training() -> TrainingConfig {
    TrainingConfig {
        batch_size: 4,
        max_steps: 1200,
        eval_every: 100,
        warmup_steps: 50,
        lr: 3e-3,
        patience: 3,
        ..TrainingConfig::default()
    }
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<(TrainOptions, PathBuf), Failure> {
        let mut o: TrainOptions = load_file(self.config.as_deref())?;
        set(&mut o.out, self.out.clone().map(Some));
        set(&mut o.model, self.model);
        o.resume |= self.resume;
        if let Some(d) = &self.data {
            o.data.dir = Some(d.clone());
        }
        if let Some(d) = &self.val_data {
            o.val.dir = Some(d.clone());
        }
        if let Some(n) = self.synth {
            o.data.dir = None;
            o.data.synth = n;
        }
        if let Some(n) = self.val_synth {
            o.val.dir = None;
            o.val.synth = n;
        }
        if let Some(s) = self.data_seed {
            o.data.seed = s;
            o.val.seed = s + 1000;
        }
        let t = &mut o.training;
        set(&mut t.max_steps, self.steps);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.lr, self.lr);
        set(&mut t.alpha, self.alpha);
        set(&mut t.seed, self.seed);
        set(&mut t.eval_every, self.eval_every);
        set(&mut t.warmup_steps, self.warmup);
        t.validate()?;
        let out = required(&o.out, "--out")?;
        Ok((o, out))
    }
}

// ------------------------------------------------------------------- eval

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Test dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Synthesise this many test utterances instead of --data.
    #[arg(long)]
    pub synth: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Write every hypothesis as JSON lines.
    #[arg(long)]
    pub hyp_out: Option<PathBuf>,
    /// Also write the report as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Skip SI-SDR scoring.
    #[arg(long)]
    pub no_sisdr: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub model: Option<PathBuf>,
    pub data: DataOptions,
    pub hyp_out: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub sisdr: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            model: None,
            data: DataOptions::synthetic(40, 2000),
            hyp_out: None,
            csv: None,
            sisdr: true,
        }
    }
}

impl EvalArgs {
    pub fn resolve(&self) -> Result<(EvalOptions, PathBuf), Failure> {
        let mut o: EvalOptions = load_file(self.config.as_deref())?;
        set(&mut o.model, self.model.clone().map(Some));
        if let Some(d) = &self.data {
            o.data.dir = Some(d.clone());
        }
        if let Some(n) = self.synth {
            o.data.dir = None;
            o.data.synth = n;
        }
        set(&mut o.data.seed, self.data_seed);
        set(&mut o.hyp_out, self.hyp_out.clone().map(Some));
        set(&mut o.csv, self.csv.clone().map(Some));
        if self.no_sisdr {
            o.sisdr = false;
        }
        let model = required(&o.model, "--model")?;
        Ok((o, model))
    }
}

// ---------------------------------------------------------------- enhance

#[derive(Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Multi-channel input WAV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Enhanced single-channel output WAV.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Checkpoint for network masks.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Speech image WAV for oracle masks (with --noise).
    #[arg(long)]
    pub speech: Option<PathBuf>,
    /// Noise image WAV for oracle masks.
    #[arg(long)]
    pub noise: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceOptions {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub speech: Option<PathBuf>,
    pub noise: Option<PathBuf>,
    pub mode: Option<Mode>,
}

impl EnhanceArgs {
    pub fn resolve(&self) -> Result<EnhanceOptions, Failure> {
        let mut o: EnhanceOptions = load_file(self.config.as_deref())?;
        set(&mut o.input, self.input.clone().map(Some));
        set(&mut o.output, self.output.clone().map(Some));
        set(&mut o.model, self.model.clone().map(Some));
        set(&mut o.speech, self.speech.clone().map(Some));
        set(&mut o.noise, self.noise.clone().map(Some));
        set(&mut o.mode, self.mode.map(Some));
        required(&o.input, "--input")?;
        required(&o.output, "--output")?;
        let oracle = o.speech.is_some() || o.noise.is_some();
        if oracle && (o.speech.is_none() || o.noise.is_none()) {
            return Err(Failure::Usage("oracle masks need both --speech and --noise".into()));
        }
        if oracle == o.model.is_some() {
            return Err(Failure::Usage("give either --model or --speech/--noise".into()));
        }
        Ok(o)
    }
}

// ----------------------------------------------------------------- stream

#[derive(Args)]
pub struct StreamArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Event log (JSON lines).
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub chunk_ms: Option<f64>,
    #[arg(long)]
    pub left_ctx_ms: Option<f64>,
    #[arg(long)]
    pub right_ctx_ms: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct StreamOptions {
    pub input: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub events: Option<PathBuf>,
    pub chunk_ms: Option<f64>,
    pub left_ctx_ms: Option<f64>,
    pub right_ctx_ms: Option<f64>,
}

impl StreamArgs {
    pub fn resolve(&self) -> Result<StreamOptions, Failure> {
        let mut o: StreamOptions = load_file(self.config.as_deref())?;
        set(&mut o.input, self.input.clone().map(Some));
        set(&mut o.model, self.model.clone().map(Some));
        set(&mut o.mode, self.mode.map(Some));
        set(&mut o.events, self.events.clone().map(Some));
        set(&mut o.chunk_ms, self.chunk_ms.map(Some));
        set(&mut o.left_ctx_ms, self.left_ctx_ms.map(Some));
        set(&mut o.right_ctx_ms, self.right_ctx_ms.map(Some));
        required(&o.input, "--input")?;
        required(&o.model, "--model")?;
        Ok(o)
    }
}

// ------------------------------------------------------------------ bench

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to time; a freshly initialised model otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Length of the synthetic workload in seconds.
    #[arg(long)]
    pub seconds: Option<f64>,
    #[arg(long)]
    pub mics: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write medians as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchOptions {
    pub model: Option<PathBuf>,
    pub preset: Preset,
    pub seconds: f64,
    pub mics: usize,
    pub repeats: usize,
    pub seed: u64,
    pub json: Option<PathBuf>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            model: None,
            preset: Preset::Toy,
            seconds: 4.0,
            mics: 4,
            repeats: 5,
            seed: 0,
            json: None,
        }
    }
}

impl BenchArgs {
    pub fn resolve(&self) -> Result<BenchOptions, Failure> {
        let mut o: BenchOptions = load_file(self.config.as_deref())?;
        set(&mut o.model, self.model.clone().map(Some));
        set(&mut o.preset, self.preset);
        set(&mut o.seconds, self.seconds);
        set(&mut o.mics, self.mics);
        set(&mut o.repeats, self.repeats);
        set(&mut o.seed, self.seed);
        set(&mut o.json, self.json.clone().map(Some));
        if o.repeats == 0 || !(o.seconds > 0.0) || o.mics == 0 {
            return Err(Failure::Usage("repeats, seconds and mics must be positive".into()));
        }
        Ok(o)
    }
}

// ----------------------------------------------------------------- verify

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultArg {
    Ctc,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run only checks whose name contains this.
    #[arg(long)]
    pub filter: Option<String>,
    /// Test hook: inject a known defect.
    #[arg(long, value_enum)]
    pub inject_fault: Option<FaultArg>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyOptions {
    pub seed: u64,
    pub filter: Option<String>,
    pub inject_fault: Option<FaultArg>,
}

impl VerifyArgs {
    pub fn resolve(&self) -> Result<VerifyOptions, Failure> {
        let mut o: VerifyOptions = load_file(self.config.as_deref())?;
        set(&mut o.seed, self.seed);
        set(&mut o.filter, self.filter.clone().map(Some));
        set(&mut o.inject_fault, self.inject_fault.map(Some));
        Ok(o)
    }
}
