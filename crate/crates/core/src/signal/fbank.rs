use super::MultiChannelSpectrogram;
use crate::error::{Error, Result};

/// Floor applied to mel power before the log.
pub const DEFAULT_LOG_FLOOR: f64 = 1e-10;

/// Log mel filterbank energies, `[frame][mel_bin]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FbankFeatures {
    pub data: Vec<f64>,
    pub num_frames: usize,
    pub mel_bins: usize,
    pub floor: f64,
}

impl FbankFeatures {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.mel_bins..(t + 1) * self.mel_bins]
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters from 0 Hz to Nyquist as a `[mel_bins][num_bins]`
/// row-major matrix.
///
/// Low filters can be narrower than the FFT bin spacing; a filter that would
/// otherwise touch no bin gets unit weight on the bin nearest its centre.
pub fn mel_filterbank(num_bins: usize, mel_bins: usize, sample_rate: u32) -> Result<Vec<f64>> {
    if mel_bins == 0 {
        return Err(Error::InvalidConfig("mel_bins must be at least 1".into()));
    }
    if mel_bins > num_bins {
        return Err(Error::InvalidConfig(format!(
            "mel_bins {mel_bins} exceeds num_bins {num_bins}"
        )));
    }
    if num_bins < 2 {
        return Err(Error::InvalidConfig("need at least two FFT bins".into()));
    }
    let nyquist = sample_rate as f64 / 2.0;
    let bin_hz = nyquist / (num_bins - 1) as f64;
    let mel_max = hz_to_mel(nyquist);
    let points: Vec<f64> = (0..mel_bins + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (mel_bins + 1) as f64))
        .collect();
    let mut fb = vec![0.0; mel_bins * num_bins];
    for m in 0..mel_bins {
        let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
        let row = &mut fb[m * num_bins..(m + 1) * num_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let v = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            *w = v;
        }
        if row.iter().all(|w| *w == 0.0) {
            let nearest = ((mid / bin_hz).round() as usize).min(num_bins - 1);
            row[nearest] = 1.0;
        }
    }
    Ok(fb)
}

/// `out[t][m] = ln(max(floor, sum_k fb[m][k] * power[t][k]))` for a
/// `[frames][num_bins]` power matrix.
pub fn logfbank_from_power(
    power: &[f64],
    num_bins: usize,
    fb: &[f64],
    floor: f64,
) -> Result<FbankFeatures> {
    if num_bins == 0 || power.len() % num_bins != 0 || fb.len() % num_bins != 0 {
        return Err(Error::Shape("power/filterbank width mismatch".into()));
    }
    if !(floor > 0.0) {
        return Err(Error::InvalidInput("log floor must be positive".into()));
    }
    let mel_bins = fb.len() / num_bins;
    let num_frames = power.len() / num_bins;
    let mut data = Vec::with_capacity(num_frames * mel_bins);
    for p in power.chunks_exact(num_bins) {
        for row in fb.chunks_exact(num_bins) {
            let e: f64 = row.iter().zip(p).map(|(w, x)| w * x).sum();
            data.push(e.max(floor).ln());
        }
    }
    Ok(FbankFeatures {
        data,
        num_frames,
        mel_bins,
        floor,
    })
}

pub fn logfbank(
    spec: &MultiChannelSpectrogram,
    channel: usize,
    fb: &[f64],
    floor: f64,
) -> Result<FbankFeatures> {
    if channel >= spec.num_channels() {
        return Err(Error::InvalidInput(format!(
            "channel {channel} out of range for {} channels",
            spec.num_channels()
        )));
    }
    logfbank_from_power(&spec.power(channel), spec.num_bins(), fb, floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::StftConfig;
    use num_complex::Complex64;

    #[test]
    fn filterbank_shape_and_coverage() {
        let fb = mel_filterbank(257, 80, 16000).unwrap();
        assert_eq!(fb.len(), 80 * 257);
        assert!(fb.iter().all(|w| *w >= 0.0));
        for row in fb.chunks_exact(257) {
            assert!(row.iter().sum::<f64>() > 0.0);
        }
        for k in 1..256 {
            assert!((0..80).any(|m| fb[m * 257 + k] > 0.0), "bin {k} uncovered");
        }
        let peaks: Vec<usize> = fb
            .chunks_exact(257)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, -1.0), |acc, (k, w)| if *w > acc.1 { (k, *w) } else { acc })
                    .0
            })
            .collect();
        // Nearest-bin fallbacks can share a bin at the very bottom; the
        // analytic centres are strictly increasing.
        assert!(peaks.windows(2).all(|p| p[0] <= p[1]));
        let centres: Vec<f64> = (1..=80)
            .map(|i| mel_to_hz(hz_to_mel(8000.0) * i as f64 / 81.0))
            .collect();
        assert!(centres.windows(2).all(|c| c[0] < c[1]));
    }

    #[test]
    fn too_many_mel_bins_rejected() {
        assert!(mel_filterbank(10, 11, 16000).is_err());
        assert!(mel_filterbank(257, 0, 16000).is_err());
    }

    #[test]
    fn zero_spectrum_hits_floor() {
        let cfg = StftConfig::default();
        let spec = MultiChannelSpectrogram::zeros(1, 5, cfg);
        let fb = mel_filterbank(257, 80, 16000).unwrap();
        let f = logfbank(&spec, 0, &fb, DEFAULT_LOG_FLOOR).unwrap();
        assert_eq!((f.num_frames, f.mel_bins), (5, 80));
        assert!(f.data.iter().all(|v| *v == DEFAULT_LOG_FLOOR.ln()));
        assert!(logfbank(&spec, 1, &fb, DEFAULT_LOG_FLOOR).is_err());
    }

    #[test]
    fn doubling_magnitude_adds_log4() {
        let cfg = StftConfig::default();
        let data: Vec<Complex64> = (0..3 * 257)
            .map(|i| Complex64::new(1.0 + (i % 7) as f64, (i % 3) as f64))
            .collect();
        let doubled: Vec<Complex64> = data.iter().map(|z| z * 2.0).collect();
        let a = MultiChannelSpectrogram::from_data(data, 1, 3, cfg).unwrap();
        let b = MultiChannelSpectrogram::from_data(doubled, 1, 3, cfg).unwrap();
        let fb = mel_filterbank(257, 80, 16000).unwrap();
        let fa = logfbank(&a, 0, &fb, DEFAULT_LOG_FLOOR).unwrap();
        let fbb = logfbank(&b, 0, &fb, DEFAULT_LOG_FLOOR).unwrap();
        for (x, y) in fa.data.iter().zip(&fbb.data) {
            assert!((y - x - 4f64.ln()).abs() < 1e-12);
        }
    }
}
