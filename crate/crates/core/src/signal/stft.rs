use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    /// Periodic Hann.
    Hann,
    Rectangular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub window_size: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    /// 512-point FFT, 32 ms Hann window, 10 ms hop at 16 kHz.
    fn default() -> Self {
        Self {
            fft_size: 512,
            window_size: 512,
            hop: 160,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || self.window_size == 0 || self.hop == 0 {
            return Err(Error::InvalidConfig("STFT sizes must be positive".into()));
        }
        if self.window_size > self.fft_size {
            return Err(Error::InvalidConfig(format!(
                "window_size {} exceeds fft_size {}",
                self.window_size, self.fft_size
            )));
        }
        if self.hop > self.window_size {
            return Err(Error::InvalidConfig(format!(
                "hop {} exceeds window_size {}",
                self.hop, self.window_size
            )));
        }
        Ok(())
    }

    pub fn window_coefficients(&self) -> Vec<f64> {
        let n = self.window_size;
        match self.window {
            WindowKind::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
            WindowKind::Rectangular => vec![1.0; n],
        }
    }

    /// Steady-state overlap-add envelope `sum_t w(n - t*hop)^p` over one hop
    /// period. `p = 1` is the COLA sum, `p = 2` the WOLA normalizer.
    pub fn overlap_add_envelope(&self, p: i32) -> Vec<f64> {
        let w = self.window_coefficients();
        (0..self.hop)
            .map(|n| {
                let mut acc = 0.0;
                let mut idx = n;
                while idx < w.len() {
                    acc += w[idx].powi(p);
                    idx += self.hop;
                }
                acc
            })
            .collect()
    }

    /// Largest relative deviation of the COLA sum from its mean.
    pub fn cola_deviation(&self) -> f64 {
        let env = self.overlap_add_envelope(1);
        let mean = env.iter().sum::<f64>() / env.len() as f64;
        env.iter()
            .map(|v| (v - mean).abs() / mean)
            .fold(0.0, f64::max)
    }

    /// Weighted overlap-add inversion needs a strictly positive squared-window
    /// envelope.
    pub fn check_invertible(&self) -> Result<()> {
        self.validate()?;
        let env = self.overlap_add_envelope(2);
        let max = env.iter().cloned().fold(0.0, f64::max);
        let min = env.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(max > 0.0) || min < 1e-8 * max {
            return Err(Error::InvalidConfig(format!(
                "window/hop combination is not overlap-add invertible (hop {}, window {})",
                self.hop, self.window_size
            )));
        }
        Ok(())
    }

    /// Frames produced for a signal of `len` samples: the final partial frame is
    /// zero-padded.
    pub fn num_frames(&self, len: usize) -> Result<usize> {
        if len < self.window_size {
            return Err(Error::InputTooShort {
                len,
                needed: self.window_size,
            });
        }
        Ok(1 + (len - self.window_size).div_ceil(self.hop))
    }
}

/// Complex STFT of every channel, stored `[channel][frame][bin]` in one flat
/// buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelSpectrogram {
    data: Vec<Complex64>,
    num_channels: usize,
    num_frames: usize,
    num_bins: usize,
    config: StftConfig,
}

impl MultiChannelSpectrogram {
    pub fn zeros(num_channels: usize, num_frames: usize, config: StftConfig) -> Self {
        let num_bins = config.num_bins();
        Self {
            data: vec![Complex64::new(0.0, 0.0); num_channels * num_frames * num_bins],
            num_channels,
            num_frames,
            num_bins,
            config,
        }
    }

    pub fn from_data(
        data: Vec<Complex64>,
        num_channels: usize,
        num_frames: usize,
        config: StftConfig,
    ) -> Result<Self> {
        let num_bins = config.num_bins();
        if data.len() != num_channels * num_frames * num_bins {
            return Err(Error::Shape(format!(
                "spectrogram data has {} values, expected {}x{}x{}",
                data.len(),
                num_channels,
                num_frames,
                num_bins
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("spectrogram".into()));
        }
        Ok(Self {
            data,
            num_channels,
            num_frames,
            num_bins,
            config,
        })
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }
    pub fn num_frames(&self) -> usize {
        self.num_frames
    }
    pub fn num_bins(&self) -> usize {
        self.num_bins
    }
    pub fn config(&self) -> &StftConfig {
        &self.config
    }
    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    #[inline]
    fn offset(&self, c: usize, t: usize) -> usize {
        (c * self.num_frames + t) * self.num_bins
    }

    pub fn frame(&self, c: usize, t: usize) -> &[Complex64] {
        let o = self.offset(c, t);
        &self.data[o..o + self.num_bins]
    }

    pub fn frame_mut(&mut self, c: usize, t: usize) -> &mut [Complex64] {
        let o = self.offset(c, t);
        &mut self.data[o..o + self.num_bins]
    }

    #[inline]
    pub fn get(&self, c: usize, t: usize, k: usize) -> Complex64 {
        self.data[self.offset(c, t) + k]
    }

    /// Frames `[start, end)` of every channel; indices outside the utterance
    /// yield zero frames.
    pub fn padded_frames(&self, start: isize, end: isize) -> Self {
        let len = (end - start).max(0) as usize;
        let mut out = Self::zeros(self.num_channels, len, self.config);
        for c in 0..self.num_channels {
            for (i, t) in (start..end).enumerate() {
                if t >= 0 && (t as usize) < self.num_frames {
                    out.frame_mut(c, i).copy_from_slice(self.frame(c, t as usize));
                }
            }
        }
        out
    }

    pub fn select_channel(&self, c: usize) -> Self {
        let o = self.offset(c, 0);
        Self {
            data: self.data[o..o + self.num_frames * self.num_bins].to_vec(),
            num_channels: 1,
            num_frames: self.num_frames,
            num_bins: self.num_bins,
            config: self.config,
        }
    }

    /// Elementwise sum; shapes must agree.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.data.len() != other.data.len() || self.num_frames != other.num_frames {
            return Err(Error::Shape("spectrogram shapes differ".into()));
        }
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(out)
    }

    /// `|X|^2` of one channel as `[frame][bin]`.
    pub fn power(&self, c: usize) -> Vec<f64> {
        let o = self.offset(c, 0);
        self.data[o..o + self.num_frames * self.num_bins]
            .iter()
            .map(|z| z.norm_sqr())
            .collect()
    }
}

/// Forward STFT. Frame `t` covers samples `[t*hop, t*hop + window_size)`.
pub fn stft(wave: &Waveform, cfg: &StftConfig) -> Result<MultiChannelSpectrogram> {
    cfg.validate()?;
    let num_frames = cfg.num_frames(wave.len())?;
    stft_frames(wave.channels(), cfg, 0, num_frames)
}

/// Frames `[start, end)` of the STFT of `channels`; samples past the end of
/// the buffers count as zeros.
pub fn stft_frames(
    channels: &[Vec<f64>],
    cfg: &StftConfig,
    start: usize,
    end: usize,
) -> Result<MultiChannelSpectrogram> {
    cfg.validate()?;
    let window = cfg.window_coefficients();
    let num_bins = cfg.num_bins();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let frames = end.saturating_sub(start);
    let mut out = MultiChannelSpectrogram::zeros(channels.len(), frames, *cfg);
    for (c, x) in channels.iter().enumerate() {
        for t in 0..frames {
            let s0 = (start + t) * cfg.hop;
            buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            for (i, w) in window.iter().enumerate() {
                if let Some(s) = x.get(s0 + i) {
                    buf[i] = Complex64::new(s * w, 0.0);
                }
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            out.frame_mut(c, t).copy_from_slice(&buf[..num_bins]);
        }
    }
    Ok(out)
}

/// Lower bound on the WOLA normaliser, relative to its peak. Near the signal
/// edges the squared-window sum goes to zero; dividing a modified spectrum's
/// overlap-add by it there would amplify the edge samples without bound.
/// Samples whose normaliser exceeds the floor are reconstructed exactly.
pub const EDGE_NORM_FLOOR: f64 = 0.1;

/// Weighted overlap-add inverse STFT. Output length is
/// `(frames - 1) * hop + window_size`, trimmed or zero-extended to `length`
/// when given.
pub fn istft(
    spec: &MultiChannelSpectrogram,
    sample_rate: u32,
    length: Option<usize>,
) -> Result<Waveform> {
    let cfg = spec.config();
    cfg.check_invertible()?;
    let window = cfg.window_coefficients();
    let nfft = cfg.fft_size;
    let frames = spec.num_frames();
    let full_len = if frames == 0 {
        0
    } else {
        (frames - 1) * cfg.hop + cfg.window_size
    };
    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(nfft);
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];

    let mut norm = vec![0.0; full_len];
    for t in 0..frames {
        for (i, w) in window.iter().enumerate() {
            norm[t * cfg.hop + i] += w * w;
        }
    }
    let peak = norm.iter().cloned().fold(0.0, f64::max);

    let mut channels = Vec::with_capacity(spec.num_channels());
    for c in 0..spec.num_channels() {
        let mut y = vec![0.0; full_len];
        for t in 0..frames {
            let bins = spec.frame(c, t);
            buf[..bins.len()].copy_from_slice(bins);
            // Hermitian extension of the one-sided spectrum.
            for k in bins.len()..nfft {
                buf[k] = bins[nfft - k].conj();
            }
            ifft.process_with_scratch(&mut buf, &mut scratch);
            let start = t * cfg.hop;
            for (i, w) in window.iter().enumerate() {
                y[start + i] += buf[i].re / nfft as f64 * w;
            }
        }
        for (v, n) in y.iter_mut().zip(&norm) {
            *v /= n.max(EDGE_NORM_FLOOR * peak);
        }
        if let Some(len) = length {
            y.resize(len, 0.0);
        }
        channels.push(y);
    }
    Waveform::new(channels, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    fn interior_rel_rms(x: &[f64], y: &[f64], margin: usize) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in margin..x.len() - margin {
            num += (x[i] - y[i]).powi(2);
            den += x[i] * x[i];
        }
        (num / den).sqrt()
    }

    #[test]
    fn frame_count_rule() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.num_frames(512).unwrap(), 1);
        assert_eq!(cfg.num_frames(672).unwrap(), 2);
        assert_eq!(cfg.num_frames(673).unwrap(), 3);
        assert_eq!(cfg.num_frames(16000).unwrap(), 98);
        assert!(matches!(cfg.num_frames(511), Err(Error::InputTooShort { .. })));
    }

    #[test]
    fn zero_signal_gives_zero_spectrum() {
        let w = Waveform::zeros(2, 16000, 16000);
        let s = stft(&w, &StftConfig::default()).unwrap();
        assert!(s.data().iter().all(|z| z.norm() == 0.0));
        let back = istft(&s, 16000, Some(16000)).unwrap();
        assert!(back.channels().iter().flatten().all(|x| *x == 0.0));
    }

    #[test]
    fn bin_centred_sinusoid_is_concentrated() {
        let cfg = StftConfig {
            window: WindowKind::Rectangular,
            ..StftConfig::default()
        };
        let k = 37;
        let x: Vec<f64> = (0..4000)
            .map(|n| (2.0 * PI * k as f64 * n as f64 / cfg.fft_size as f64).cos())
            .collect();
        let s = stft(&Waveform::mono(x, 16000).unwrap(), &cfg).unwrap();
        for t in 0..s.num_frames() - 1 {
            let f = s.frame(0, t);
            let total: f64 = f.iter().map(|z| z.norm_sqr()).sum();
            assert!(f[k].norm_sqr() / total >= 0.99);
        }
    }

    #[test]
    fn stft_is_linear() {
        let cfg = StftConfig::default();
        let a = Waveform::mono(noise(5000, 1), 16000).unwrap();
        let b = Waveform::mono(noise(5000, 2), 16000).unwrap();
        let sa = stft(&a, &cfg).unwrap();
        let sb = stft(&b, &cfg).unwrap();
        let sab = stft(&a.add(&b).unwrap(), &cfg).unwrap();
        for ((x, y), z) in sa.data().iter().zip(sb.data()).zip(sab.data()) {
            assert!((x + y - z).norm() <= 1e-9);
        }
    }

    #[test]
    fn round_trip_white_noise() {
        let x = noise(16000, 3);
        let w = Waveform::mono(x.clone(), 16000).unwrap();
        let s = stft(&w, &StftConfig::default()).unwrap();
        let y = istft(&s, 16000, Some(x.len())).unwrap();
        assert!(interior_rel_rms(&x, y.channel(0), 512) <= 1e-6);
    }

    #[test]
    fn modified_spectrum_keeps_edges_bounded() {
        let cfg = StftConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames = 40;
        let data = (0..frames * cfg.num_bins())
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let s = MultiChannelSpectrogram::from_data(data, 1, frames, cfg).unwrap();
        let y = istft(&s, 16000, None).unwrap();
        let y = y.channel(0);
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        let interior = rms(&y[512..y.len() - 512]);
        assert!(rms(&y[..160]) < 2.0 * interior);
        assert!(rms(&y[y.len() - 160..]) < 2.0 * interior);
    }

    #[test]
    fn parseval_per_frame() {
        let cfg = StftConfig::default();
        let x = noise(2000, 4);
        let w = cfg.window_coefficients();
        let s = stft(&Waveform::mono(x.clone(), 16000).unwrap(), &cfg).unwrap();
        for t in 0..s.num_frames() - 1 {
            let time: f64 = (0..cfg.window_size)
                .map(|i| (x[t * cfg.hop + i] * w[i]).powi(2))
                .sum();
            let f = s.frame(0, t);
            let n = cfg.fft_size;
            // One-sided spectrum: interior bins count twice.
            let mut freq = f[0].norm_sqr() + f[n / 2].norm_sqr();
            freq += 2.0 * f[1..n / 2].iter().map(|z| z.norm_sqr()).sum::<f64>();
            freq /= n as f64;
            assert!((time - freq).abs() <= 1e-6 * time);
        }
    }

    #[test]
    fn rejects_hop_beyond_window_and_non_invertible() {
        let bad = StftConfig {
            hop: 600,
            ..StftConfig::default()
        };
        assert!(bad.validate().is_err());
        // Hann at hop == window has a zero in its squared envelope.
        let gap = StftConfig {
            hop: 512,
            ..StftConfig::default()
        };
        assert!(gap.check_invertible().is_err());
        let s = MultiChannelSpectrogram::zeros(1, 4, gap);
        assert!(istft(&s, 16000, None).is_err());
    }

    #[test]
    fn hann_cola_at_quarter_hop() {
        let cfg = StftConfig {
            hop: 128,
            ..StftConfig::default()
        };
        assert!(cfg.cola_deviation() < 1e-12);
        // The default 10 ms hop is WOLA-invertible but not strictly COLA.
        assert!(StftConfig::default().check_invertible().is_ok());
    }
}
