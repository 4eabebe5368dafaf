//! Mask-based MVDR front-end: masks from a recurrent estimator, mask-weighted
//! spatial covariances, reference-channel MVDR weights and their application.

mod masknet;
mod mvdr;
mod scm;

pub use masknet::{mask_features, mask_net_forward, MaskNet, MaskNetConfig};
pub use mvdr::{mvdr_power, mvdr_weights, BeamformerWeights, MvdrConfig, MvdrOutput};
pub use scm::{estimate_scm, SpatialCovariance};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::neural::ModelParams;
use crate::signal::MultiChannelSpectrogram;

/// Per time-frequency weights in `[0, 1]`, `[frame][bin]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeFrequencyMask {
    values: Vec<f64>,
    num_frames: usize,
    num_bins: usize,
}

impl TimeFrequencyMask {
    pub fn new(values: Vec<f64>, num_frames: usize, num_bins: usize) -> Result<Self> {
        if values.len() != num_frames * num_bins {
            return Err(Error::Shape(format!(
                "mask has {} values, expected {num_frames}x{num_bins}",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("mask values must lie in [0, 1]".into()));
        }
        Ok(Self {
            values,
            num_frames,
            num_bins,
        })
    }

    pub fn ones(num_frames: usize, num_bins: usize) -> Self {
        Self {
            values: vec![1.0; num_frames * num_bins],
            num_frames,
            num_bins,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }
    pub fn num_bins(&self) -> usize {
        self.num_bins
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.values[t * self.num_bins + k]
    }

    /// Frames `[start, end)`; out-of-range frames get `fill`.
    pub fn padded_frames(&self, start: isize, end: isize, fill: f64) -> Self {
        let mut values = Vec::with_capacity(((end - start).max(0) as usize) * self.num_bins);
        for t in start..end {
            if t >= 0 && (t as usize) < self.num_frames {
                let t = t as usize;
                values.extend_from_slice(&self.values[t * self.num_bins..(t + 1) * self.num_bins]);
            } else {
                values.extend(std::iter::repeat_n(fill, self.num_bins));
            }
        }
        Self {
            num_frames: values.len() / self.num_bins.max(1),
            values,
            num_bins: self.num_bins,
        }
    }
}

/// `y[t][k] = w[k]^H x_t[k]`, returned as a single-channel spectrogram.
pub fn apply_beamformer(
    weights: &BeamformerWeights,
    spec: &MultiChannelSpectrogram,
) -> Result<MultiChannelSpectrogram> {
    if weights.num_bins() != spec.num_bins() || weights.num_channels() != spec.num_channels() {
        return Err(Error::Shape(format!(
            "weights {}x{} vs spectrogram {} bins x {} channels",
            weights.num_bins(),
            weights.num_channels(),
            spec.num_bins(),
            spec.num_channels()
        )));
    }
    let (t_len, k_len, m_len) = (spec.num_frames(), spec.num_bins(), spec.num_channels());
    let mut out = vec![Complex64::new(0.0, 0.0); t_len * k_len];
    for m in 0..m_len {
        for t in 0..t_len {
            let x = spec.frame(m, t);
            let o = &mut out[t * k_len..(t + 1) * k_len];
            for k in 0..k_len {
                o[k] += weights.get(k, m).conj() * x[k];
            }
        }
    }
    MultiChannelSpectrogram::from_data(out, 1, t_len, *spec.config())
}

/// Enhanced single-channel spectrum for a context-sensitive chunk.
#[derive(Debug, Clone)]
pub struct EnhancedChunk {
    /// All frames of the chunk, context included.
    pub spectrum: MultiChannelSpectrogram,
    pub core: std::ops::Range<usize>,
    pub weights: BeamformerWeights,
    pub fallback_bins: usize,
}

/// Where the masks of [`enhance_chunk`] come from.
pub enum MaskSource<'a> {
    Network {
        params: &'a ModelParams,
        config: &'a MaskNetConfig,
    },
    Oracle {
        speech: &'a TimeFrequencyMask,
        noise: &'a TimeFrequencyMask,
    },
}

/// Masks, covariances, MVDR weights and filtering over one whole chunk.
pub fn enhance_chunk(
    chunk: &MultiChannelSpectrogram,
    core: std::ops::Range<usize>,
    masks: MaskSource<'_>,
    cfg: &MvdrConfig,
) -> Result<EnhancedChunk> {
    let (speech, noise) = match masks {
        MaskSource::Network { params, config } => {
            MaskNet::new(config).masks(params, chunk, cfg.reference_channel)?
        }
        MaskSource::Oracle { speech, noise } => (speech.clone(), noise.clone()),
    };
    let (phi_s, fs) = estimate_scm(chunk, &speech)?;
    let (phi_n, fneed) = estimate_scm(chunk, &noise)?;
    let weights = mvdr_weights(&phi_s, &phi_n, cfg)?;
    let spectrum = apply_beamformer(&weights, chunk)?;
    Ok(EnhancedChunk {
        spectrum,
        core,
        fallback_bins: fs + fneed + weights.degenerate_bins(),
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::StftConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_spec(m: usize, t: usize, cfg: StftConfig, seed: u64) -> MultiChannelSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = m * t * cfg.num_bins();
        let d = (0..n)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        MultiChannelSpectrogram::from_data(d, m, t, cfg).unwrap()
    }

    #[test]
    fn one_hot_selects_channel_and_zero_maps_to_zero() {
        let cfg = StftConfig::default();
        let x = random_spec(3, 4, cfg, 1);
        let w = BeamformerWeights::one_hot(cfg.num_bins(), 3, 1);
        let y = apply_beamformer(&w, &x).unwrap();
        assert_eq!(y.data(), x.select_channel(1).data());
        let z = apply_beamformer(&w, &MultiChannelSpectrogram::zeros(3, 4, cfg)).unwrap();
        assert!(z.data().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn application_is_linear() {
        let cfg = StftConfig::default();
        let a = random_spec(2, 3, cfg, 2);
        let b = random_spec(2, 3, cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let wd = (0..2 * cfg.num_bins())
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let w = BeamformerWeights::from_data(wd, cfg.num_bins(), 2).unwrap();
        let ya = apply_beamformer(&w, &a).unwrap();
        let yb = apply_beamformer(&w, &b).unwrap();
        let yab = apply_beamformer(&w, &a.add(&b).unwrap()).unwrap();
        for ((p, q), r) in ya.data().iter().zip(yb.data()).zip(yab.data()) {
            assert!((p + q - r).norm() <= 1e-9);
        }
    }

    #[test]
    fn mask_validation() {
        assert!(TimeFrequencyMask::new(vec![0.5, 1.5], 1, 2).is_err());
        assert!(TimeFrequencyMask::new(vec![0.5], 1, 2).is_err());
        let m = TimeFrequencyMask::new(vec![0.1, 0.2, 0.3, 0.4], 2, 2).unwrap();
        let p = m.padded_frames(-1, 2, 0.0);
        assert_eq!(p.values(), &[0.0, 0.0, 0.1, 0.2, 0.3, 0.4]);
    }
}
