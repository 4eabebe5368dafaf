//! Anechoic far-field microphone-array scenes: plane-wave delays, additive
//! directional and diffuse noise at a target SNR, and ground-truth images for
//! oracle masks.

mod dataset;
pub mod toy;

pub use dataset::{
    read_manifest, synth_dataset, DatasetRecipe, Manifest, ManifestRecord, MANIFEST_FILE,
};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::beamformer::TimeFrequencyMask;
use crate::error::{Error, Result};
use crate::signal::{MultiChannelSpectrogram, Waveform};

pub const SPEED_OF_SOUND: f64 = 343.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub mic_positions: Vec<[f64; 3]>,
    pub speed_of_sound: f64,
}

impl ArrayGeometry {
    pub fn new(mic_positions: Vec<[f64; 3]>, speed_of_sound: f64) -> Result<Self> {
        let g = Self {
            mic_positions,
            speed_of_sound,
        };
        g.validate()?;
        Ok(g)
    }

    /// Uniform linear array along x, centred on the origin.
    pub fn uniform_linear(num_mics: usize, spacing: f64) -> Self {
        let centre = (num_mics as f64 - 1.0) / 2.0;
        Self {
            mic_positions: (0..num_mics)
                .map(|i| [(i as f64 - centre) * spacing, 0.0, 0.0])
                .collect(),
            speed_of_sound: SPEED_OF_SOUND,
        }
    }

    pub fn num_mics(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mic_positions.is_empty() {
            return Err(Error::InvalidConfig("array needs at least one microphone".into()));
        }
        if !(self.speed_of_sound > 0.0) {
            return Err(Error::InvalidConfig("speed of sound must be positive".into()));
        }
        if self.mic_positions.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("microphone positions".into()));
        }
        for (i, a) in self.mic_positions.iter().enumerate() {
            for b in &self.mic_positions[i + 1..] {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
                if d2 < 1e-12 {
                    return Err(Error::InvalidConfig("coincident microphones".into()));
                }
            }
        }
        Ok(())
    }
}

impl Default for ArrayGeometry {
    /// Four microphones, 5 cm apart.
    fn default() -> Self {
        Self::uniform_linear(4, 0.05)
    }
}

/// Per-microphone arrival delay in seconds relative to the array origin for a
/// far-field source in direction (`azimuth`, `elevation`).
///
/// `delay_m = -(u . p_m) / c` where `u` points from the origin toward the
/// source, so microphones nearer the source hear it earlier.
pub fn steering_delays(geom: &ArrayGeometry, azimuth: f64, elevation: f64) -> Vec<f64> {
    let u = [
        elevation.cos() * azimuth.cos(),
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
    ];
    geom.mic_positions
        .iter()
        .map(|p| -(u[0] * p[0] + u[1] * p[1] + u[2] * p[2]) / geom.speed_of_sound)
        .collect()
}

/// Delay a mono signal per channel by a frequency-domain phase shift.
/// The transform is zero-padded past the largest delay so shifts never wrap
/// into the kept samples.
pub fn spatialize(source: &Waveform, delays: &[f64]) -> Result<Waveform> {
    if source.num_channels() != 1 {
        return Err(Error::InvalidInput("spatialize expects a mono source".into()));
    }
    if delays.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("delays".into()));
    }
    let sr = source.sample_rate() as f64;
    let len = source.len();
    let max_shift = delays.iter().map(|d| (d.abs() * sr).ceil() as usize).max().unwrap_or(0);
    let n = (len + max_shift + 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut spectrum: Vec<Complex64> = source
        .channel(0)
        .iter()
        .map(|&x| Complex64::new(x, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(n)
        .collect();
    fwd.process(&mut spectrum);

    let mut channels = Vec::with_capacity(delays.len());
    for &d in delays {
        let mut buf: Vec<Complex64> = spectrum
            .iter()
            .enumerate()
            .map(|(k, z)| {
                let f = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
                let phase = -2.0 * std::f64::consts::PI * f * d * sr / n as f64;
                if k == n / 2 {
                    // Real-valued Nyquist term keeps the output real.
                    z * phase.cos()
                } else {
                    z * Complex64::from_polar(1.0, phase)
                }
            })
            .collect();
        inv.process(&mut buf);
        channels.push(buf[..len].iter().map(|z| z.re / n as f64).collect());
    }
    Waveform::new(channels, source.sample_rate())
}

/// Scale `noise` so the reference-channel SNR equals `snr_db`, returning
/// `(speech + scaled_noise, scaled_noise)`. Noise is looped or trimmed to the
/// speech length first.
pub fn mix_at_snr(
    speech: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    reference: usize,
) -> Result<(Waveform, Waveform)> {
    if speech.num_channels() != noise.num_channels() {
        return Err(Error::Shape("speech and noise channel counts differ".into()));
    }
    if reference >= speech.num_channels() {
        return Err(Error::InvalidInput(format!("reference channel {reference} out of range")));
    }
    if !snr_db.is_finite() {
        return Err(Error::NonFinite("snr_db".into()));
    }
    let len = speech.len();
    if noise.is_empty() {
        return Err(Error::InvalidInput("noise is empty".into()));
    }
    let fitted: Vec<Vec<f64>> = noise
        .channels()
        .iter()
        .map(|c| (0..len).map(|i| c[i % c.len()]).collect())
        .collect();
    let fitted = Waveform::new(fitted, noise.sample_rate())?;
    let ps = speech.power(reference);
    let pn = fitted.power(reference);
    if ps <= 0.0 || pn <= 0.0 {
        return Err(Error::InvalidInput("zero power at reference channel".into()));
    }
    let gain = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled = fitted.scaled(gain);
    Ok((speech.add(&scaled)?, scaled))
}

/// Ideal ratio masks at the reference channel. A bin with no energy in either
/// image gets 0.5.
pub fn oracle_irm(
    speech: &MultiChannelSpectrogram,
    noise: &MultiChannelSpectrogram,
    reference: usize,
) -> Result<(TimeFrequencyMask, TimeFrequencyMask)> {
    if speech.num_frames() != noise.num_frames() || speech.num_bins() != noise.num_bins() {
        return Err(Error::Shape("speech/noise spectrograms not aligned".into()));
    }
    let ps = speech.power(reference);
    let pn = noise.power(reference);
    let sm: Vec<f64> = ps
        .iter()
        .zip(&pn)
        .map(|(s, n)| if s + n > 0.0 { s / (s + n) } else { 0.5 })
        .collect();
    let nm: Vec<f64> = sm.iter().map(|m| 1.0 - m).collect();
    let t = speech.num_frames();
    let k = speech.num_bins();
    Ok((
        TimeFrequencyMask::new(sm, t, k)?,
        TimeFrequencyMask::new(nm, t, k)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interferer {
    pub azimuth: f64,
    pub elevation: f64,
}

/// Noise field: an optional white-noise point interferer plus spatially white
/// (independent per microphone) noise `diffuse_db` relative to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub interferer: Option<Interferer>,
    pub diffuse_db: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            interferer: None,
            diffuse_db: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub id: String,
    pub source: Waveform,
    pub transcript: Vec<u32>,
    pub azimuth: f64,
    pub elevation: f64,
    pub noise: NoiseSpec,
    pub snr_db: f64,
    pub reference_channel: usize,
    pub geometry: ArrayGeometry,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SimulatedScene {
    pub mixture: Waveform,
    pub speech_image: Waveform,
    pub noise_image: Waveform,
    pub spec: SceneSpec,
}

fn gaussian(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn simulate_scene(spec: &SceneSpec) -> Result<SimulatedScene> {
    spec.geometry.validate()?;
    if spec.source.is_empty() {
        return Err(Error::InvalidInput("scene source is empty".into()));
    }
    let m = spec.geometry.num_mics();
    let len = spec.source.len();
    let sr = spec.source.sample_rate();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let speech_image = spatialize(
        &spec.source,
        &steering_delays(&spec.geometry, spec.azimuth, spec.elevation),
    )?;

    let diffuse: Vec<Vec<f64>> = (0..m).map(|_| gaussian(len, &mut rng)).collect();
    let raw_noise = match &spec.noise.interferer {
        Some(intf) => {
            let src = Waveform::mono(gaussian(len, &mut rng), sr)?;
            let image = spatialize(
                &src,
                &steering_delays(&spec.geometry, intf.azimuth, intf.elevation),
            )?;
            let pi = image.power(spec.reference_channel).max(f64::MIN_POSITIVE);
            let pd = diffuse[spec.reference_channel].iter().map(|x| x * x).sum::<f64>() / len as f64;
            let g = (pi * 10f64.powf(spec.noise.diffuse_db / 10.0) / pd).sqrt();
            let d = Waveform::new(diffuse, sr)?.scaled(g);
            image.add(&d)?
        }
        None => Waveform::new(diffuse, sr)?,
    };
    let (mixture, noise_image) =
        mix_at_snr(&speech_image, &raw_noise, spec.snr_db, spec.reference_channel)?;
    Ok(SimulatedScene {
        mixture,
        speech_image,
        noise_image,
        spec: spec.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn delays_for_simple_geometries() {
        let one = ArrayGeometry::new(vec![[0.0; 3]], SPEED_OF_SOUND).unwrap();
        assert_eq!(steering_delays(&one, 0.3, 0.1), vec![0.0]);
        let pair = ArrayGeometry::uniform_linear(2, 0.05);
        let broad = steering_delays(&pair, std::f64::consts::FRAC_PI_2, 0.0);
        assert!((broad[0] - broad[1]).abs() < 1e-15);
        let end = steering_delays(&pair, 0.0, 0.0);
        assert!(((end[0] - end[1]).abs() - 0.05 / 343.0).abs() < 1e-12);
        assert!(((end[0] - end[1]).abs() * 1e6 - 145.77).abs() < 0.01);
    }

    #[test]
    fn geometry_rejects_coincident_mics() {
        assert!(ArrayGeometry::new(vec![[0.0; 3], [0.0; 3]], 343.0).is_err());
        assert!(ArrayGeometry::new(vec![], 343.0).is_err());
    }

    fn random_mono(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::mono((0..len).map(|_| rng.random_range(-0.3..0.3)).collect(), 16000).unwrap()
    }

    #[test]
    fn zero_and_integer_delays() {
        let s = random_mono(3000, 1);
        let z = spatialize(&s, &[0.0, 0.0]).unwrap();
        for c in 0..2 {
            for (a, b) in z.channel(c).iter().zip(s.channel(0)) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
        let d = spatialize(&s, &[10.0 / 16000.0, -4.0 / 16000.0]).unwrap();
        for n in 20..2980 {
            assert!((d.channel(0)[n] - s.channel(0)[n - 10]).abs() <= 1e-6);
            assert!((d.channel(1)[n] - s.channel(0)[n + 4]).abs() <= 1e-6);
        }
    }

    #[test]
    fn cross_correlation_peak_matches_delay() {
        let s = random_mono(4000, 2);
        let dt = 3.4 / 16000.0;
        let d = spatialize(&s, &[0.0, dt]).unwrap();
        let (a, b) = (d.channel(0), d.channel(1));
        let best = (-8i64..=8)
            .max_by(|&x, &y| {
                let cc = |lag: i64| -> f64 {
                    (100..3900).map(|n| a[n] * b[(n as i64 + lag) as usize]).sum()
                };
                cc(x).partial_cmp(&cc(y)).unwrap()
            })
            .unwrap();
        assert_eq!(best, 3);
    }

    #[test]
    fn spatialization_preserves_energy() {
        // Smooth, band-limited burst so fractional delays keep it in the buffer.
        let x: Vec<f64> = (0..4000)
            .map(|n| {
                let t = n as f64;
                let env = if (1000..3000).contains(&n) {
                    (std::f64::consts::PI * (t - 1000.0) / 2000.0).sin().powi(2)
                } else {
                    0.0
                };
                env * ((0.07 * t).sin() + 0.5 * (0.31 * t + 1.0).sin())
            })
            .collect();
        let s = Waveform::mono(x, 16000).unwrap();
        let d = spatialize(&s, &[1.3e-4, -0.7e-4]).unwrap();
        for c in 0..2 {
            let rel = (d.power(c) - s.power(0)).abs() / s.power(0);
            assert!(rel < 1e-6, "rel {rel}");
        }
    }

    #[test]
    fn snr_mixing() {
        let s = random_mono(5000, 4);
        let n = random_mono(1234, 5);
        for snr in [0.0, 20.0, -5.0, 7.3] {
            let (mix, scaled) = mix_at_snr(&s, &n, snr, 0).unwrap();
            let got = 10.0 * (s.power(0) / scaled.power(0)).log10();
            assert!((got - snr).abs() < 0.01);
            for i in 0..5000 {
                assert!((mix.channel(0)[i] - s.channel(0)[i] - scaled.channel(0)[i]).abs() < 1e-12);
            }
        }
        let quiet = Waveform::zeros(1, 100, 16000);
        assert!(mix_at_snr(&quiet, &n, 0.0, 0).is_err());
    }

    #[test]
    fn oracle_mask_edge_cases() {
        use crate::signal::StftConfig;
        let cfg = StftConfig::default();
        let k = cfg.num_bins();
        let mut s = MultiChannelSpectrogram::zeros(1, 1, cfg);
        let mut n = MultiChannelSpectrogram::zeros(1, 1, cfg);
        s.frame_mut(0, 0)[0] = Complex64::new(1.0, 0.0);
        s.frame_mut(0, 0)[1] = Complex64::new(0.0, 2.0);
        n.frame_mut(0, 0)[1] = Complex64::new(2.0, 0.0);
        let (sm, nm) = oracle_irm(&s, &n, 0).unwrap();
        assert_eq!(sm.get(0, 0), 1.0);
        assert_eq!(sm.get(0, 1), 0.5);
        assert_eq!(sm.get(0, 2), 0.5);
        for b in 0..k {
            assert_eq!(sm.get(0, b) + nm.get(0, b), 1.0);
        }
    }

    #[test]
    fn scene_decomposes_and_hits_snr() {
        let spec = SceneSpec {
            id: "u".into(),
            source: random_mono(8000, 6),
            transcript: vec![],
            azimuth: 1.2,
            elevation: 0.0,
            noise: NoiseSpec {
                interferer: Some(Interferer {
                    azimuth: 0.4,
                    elevation: 0.0,
                }),
                diffuse_db: -15.0,
            },
            snr_db: 3.0,
            reference_channel: 0,
            geometry: ArrayGeometry::default(),
            seed: 9,
        };
        let sc = simulate_scene(&spec).unwrap();
        assert_eq!(sc.mixture.num_channels(), 4);
        for c in 0..4 {
            for i in 0..8000 {
                let d = sc.mixture.channel(c)[i] - sc.speech_image.channel(c)[i] - sc.noise_image.channel(c)[i];
                assert!(d.abs() < 1e-9);
            }
        }
        let got = 10.0 * (sc.speech_image.power(0) / sc.noise_image.power(0)).log10();
        assert!((got - 3.0).abs() < 0.1);
        let again = simulate_scene(&spec).unwrap();
        assert_eq!(again.mixture, sc.mixture);
    }
}
