//! Deterministic feature substrate: waveforms, STFT/iSTFT, mel filterbank,
//! log-Fbank features, WAV I/O and enhancement metrics.

mod fbank;
mod metrics;
mod stft;
mod wav;

pub use fbank::{logfbank, logfbank_from_power, mel_filterbank, FbankFeatures, DEFAULT_LOG_FLOOR};
pub use metrics::{si_sdr, snr_db};
pub use stft::{istft, stft, stft_frames, MultiChannelSpectrogram, StftConfig, WindowKind};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Multi-channel real waveform, one `Vec` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if channels.is_empty() {
            return Err(Error::InvalidInput("waveform needs at least one channel".into()));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("all channels must have equal length".into()));
        }
        if channels.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("waveform samples".into()));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn zeros(num_channels: usize, len: usize, sample_rate: u32) -> Self {
        Self {
            channels: vec![vec![0.0; len]; num_channels.max(1)],
            sample_rate,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// Keep only the selected channel as a mono waveform.
    pub fn select_channel(&self, c: usize) -> Result<Self> {
        if c >= self.num_channels() {
            return Err(Error::InvalidInput(format!(
                "channel {c} out of range for {} channels",
                self.num_channels()
            )));
        }
        Ok(Self {
            channels: vec![self.channels[c].clone()],
            sample_rate: self.sample_rate,
        })
    }

    /// Samplewise sum; shapes must agree.
    pub fn add(&self, other: &Waveform) -> Result<Self> {
        if self.num_channels() != other.num_channels() || self.len() != other.len() {
            return Err(Error::Shape("waveform shapes differ".into()));
        }
        let channels = self
            .channels
            .iter()
            .zip(&other.channels)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        Ok(Self {
            channels,
            sample_rate: self.sample_rate,
        })
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|x| x * gain).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Mean power of one channel.
    pub fn power(&self, c: usize) -> f64 {
        let ch = &self.channels[c];
        if ch.is_empty() {
            return 0.0;
        }
        ch.iter().map(|x| x * x).sum::<f64>() / ch.len() as f64
    }
}
