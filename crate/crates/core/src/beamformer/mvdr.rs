use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::scm::{estimate_scm, SpatialCovariance};
use super::TimeFrequencyMask;
use crate::error::{Error, Result};
use crate::neural::{Function, Tape, Tensor, Var};
use crate::signal::MultiChannelSpectrogram;

type C = Complex64;

/// Loading is relative to `max(tr(Phi_N)/M, TRACE_FLOOR)` so digital silence
/// stays invertible.
const TRACE_FLOOR: f64 = 1e-12;
/// Condition-number estimate above which a loaded noise covariance counts as
/// singular.
const MAX_CONDITION: f64 = 1e12;
/// `|tr(Phi_N'^-1 Phi_S)|` at or below this means no speech energy in the bin.
const DEGENERATE_TRACE: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MvdrConfig {
    pub reference_channel: usize,
    pub diagonal_loading: f64,
}

impl Default for MvdrConfig {
    fn default() -> Self {
        Self {
            reference_channel: 0,
            diagonal_loading: 1e-6,
        }
    }
}

impl MvdrConfig {
    pub fn validate(&self, num_channels: usize) -> Result<()> {
        if self.reference_channel >= num_channels {
            return Err(Error::InvalidConfig(format!(
                "reference channel {} out of range for {num_channels} channels",
                self.reference_channel
            )));
        }
        if !(self.diagonal_loading >= 0.0) || !self.diagonal_loading.is_finite() {
            return Err(Error::InvalidConfig("diagonal loading must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Complex filter weights `[bin][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerWeights {
    data: Vec<C>,
    num_bins: usize,
    num_channels: usize,
    degenerate: usize,
}

impl BeamformerWeights {
    pub fn from_data(data: Vec<C>, num_bins: usize, num_channels: usize) -> Result<Self> {
        if data.len() != num_bins * num_channels {
            return Err(Error::Shape("beamformer weight length".into()));
        }
        Ok(Self {
            data,
            num_bins,
            num_channels,
            degenerate: 0,
        })
    }

    pub fn one_hot(num_bins: usize, num_channels: usize, channel: usize) -> Self {
        let mut data = vec![C::new(0.0, 0.0); num_bins * num_channels];
        for k in 0..num_bins {
            data[k * num_channels + channel] = C::new(1.0, 0.0);
        }
        Self {
            data,
            num_bins,
            num_channels,
            degenerate: 0,
        }
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }
    pub fn num_channels(&self) -> usize {
        self.num_channels
    }
    pub fn data(&self) -> &[C] {
        &self.data
    }
    #[inline]
    pub fn get(&self, k: usize, m: usize) -> C {
        self.data[k * self.num_channels + m]
    }
    pub fn bin(&self, k: usize) -> &[C] {
        &self.data[k * self.num_channels..(k + 1) * self.num_channels]
    }
    /// Bins without speech energy that fell back to reference selection.
    pub fn degenerate_bins(&self) -> usize {
        self.degenerate
    }
}

struct BinSolve {
    w: DVector<C>,
    /// `Phi_N'^-1 Phi_S`.
    a: DMatrix<C>,
    b_inv: DMatrix<C>,
    tau: C,
    /// Loading scaled with the trace (false when the floor was used).
    trace_loading: bool,
    /// No gradient flows through this bin.
    frozen: bool,
}

fn frobenius(a: &DMatrix<C>) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

fn solve_bin(phi_s: DMatrix<C>, phi_n: DMatrix<C>, cfg: &MvdrConfig, k: usize) -> Result<BinSolve> {
    let m = phi_s.nrows();
    let r = cfg.reference_channel;
    if phi_s.iter().chain(phi_n.iter()).any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::NonFinite(format!("covariance at bin {k}")));
    }
    let unit = |m: usize| {
        let mut u = DVector::from_element(m, C::new(0.0, 0.0));
        u[r] = C::new(1.0, 0.0);
        u
    };
    if m == 1 {
        return Ok(BinSolve {
            w: unit(1),
            a: DMatrix::identity(1, 1),
            b_inv: DMatrix::identity(1, 1),
            tau: C::new(1.0, 0.0),
            trace_loading: false,
            frozen: true,
        });
    }
    let mean_eig = (0..m).map(|i| phi_n[(i, i)].re).sum::<f64>() / m as f64;
    let trace_loading = mean_eig >= TRACE_FLOOR;
    let load = cfg.diagonal_loading * mean_eig.max(TRACE_FLOOR);
    let mut b = phi_n;
    for i in 0..m {
        b[(i, i)] += load;
    }
    let b_inv = b
        .clone()
        .try_inverse()
        .filter(|inv| frobenius(&b) * frobenius(inv) <= MAX_CONDITION)
        .ok_or(Error::SingularCovariance { bin: k })?;
    let a = &b_inv * phi_s;
    let tau = a.trace();
    if !(tau.norm() > DEGENERATE_TRACE) {
        return Ok(BinSolve {
            w: unit(m),
            a,
            b_inv,
            tau,
            trace_loading,
            frozen: true,
        });
    }
    let w = a.column(r).into_owned() / tau;
    Ok(BinSolve {
        w,
        a,
        b_inv,
        tau,
        trace_loading,
        frozen: false,
    })
}

fn solve_all(
    phi_s: &SpatialCovariance,
    phi_n: &SpatialCovariance,
    cfg: &MvdrConfig,
) -> Result<Vec<BinSolve>> {
    if phi_s.num_bins() != phi_n.num_bins() || phi_s.num_channels() != phi_n.num_channels() {
        return Err(Error::Shape("speech and noise covariances differ in shape".into()));
    }
    cfg.validate(phi_s.num_channels())?;
    (0..phi_s.num_bins())
        .map(|k| solve_bin(phi_s.matrix(k), phi_n.matrix(k), cfg, k))
        .collect()
}

fn weights_of(solves: &[BinSolve], m: usize) -> BeamformerWeights {
    let mut data = Vec::with_capacity(solves.len() * m);
    let mut degenerate = 0;
    for s in solves {
        data.extend(s.w.iter().copied());
        if s.frozen && m > 1 {
            degenerate += 1;
        }
    }
    BeamformerWeights {
        data,
        num_bins: solves.len(),
        num_channels: m,
        degenerate,
    }
}

/// Souden reference-channel MVDR:
/// `w[k] = Phi_N'^-1 Phi_S u / tr(Phi_N'^-1 Phi_S)` with
/// `Phi_N' = Phi_N + eps * tr(Phi_N)/M * I`.
pub fn mvdr_weights(
    phi_s: &SpatialCovariance,
    phi_n: &SpatialCovariance,
    cfg: &MvdrConfig,
) -> Result<BeamformerWeights> {
    let solves = solve_all(phi_s, phi_n, cfg)?;
    Ok(weights_of(&solves, phi_s.num_channels()))
}

/// Result of the differentiable front-end.
pub struct MvdrOutput {
    /// `|y[t][k]|^2` for every frame of the filtered spectrogram.
    pub power: Var,
    pub weights: BeamformerWeights,
    pub fallback_bins: usize,
}

/// Enhanced power as a differentiable function of the two masks.
///
/// Covariances come from `scm_spec` weighted by the masks (`[frames][bins]`,
/// one row per frame of `scm_spec`); the resulting filter is applied to
/// `apply_spec`, which may cover more frames than were used for estimation.
pub fn mvdr_power(
    tape: &mut Tape,
    speech_mask: Var,
    noise_mask: Var,
    scm_spec: &MultiChannelSpectrogram,
    apply_spec: &MultiChannelSpectrogram,
    cfg: &MvdrConfig,
) -> Result<MvdrOutput> {
    let (ts, k_len, m) = (scm_spec.num_frames(), scm_spec.num_bins(), scm_spec.num_channels());
    if apply_spec.num_bins() != k_len || apply_spec.num_channels() != m {
        return Err(Error::Shape("estimation and application spectrograms differ".into()));
    }
    let to_mask = |t: &Tensor| -> Result<TimeFrequencyMask> {
        if t.shape() != [ts, k_len] {
            return Err(Error::Shape(format!("mask shape {:?}, expected [{ts}, {k_len}]", t.shape())));
        }
        TimeFrequencyMask::new(t.data().to_vec(), ts, k_len)
    };
    let ms = to_mask(tape.value(speech_mask))?;
    let mn = to_mask(tape.value(noise_mask))?;
    let (phi_s, fs) = estimate_scm(scm_spec, &ms)?;
    let (phi_n, fnz) = estimate_scm(scm_spec, &mn)?;
    let solves = solve_all(&phi_s, &phi_n, cfg)?;
    let weights = weights_of(&solves, m);

    let ta = apply_spec.num_frames();
    let mut y = vec![C::new(0.0, 0.0); ta * k_len];
    for c in 0..m {
        for t in 0..ta {
            let x = apply_spec.frame(c, t);
            for k in 0..k_len {
                y[t * k_len + k] += weights.get(k, c).conj() * x[k];
            }
        }
    }
    let power = Tensor::from_vec(ta, k_len, y.iter().map(|v| v.norm_sqr()).collect())?;
    let fallback_bins = fs + fnz + weights.degenerate_bins();
    let func = MvdrPowerFn {
        solves,
        phi_s,
        phi_n,
        scm_spec: scm_spec.clone(),
        apply_spec: apply_spec.clone(),
        y,
        reference: cfg.reference_channel,
        loading: cfg.diagonal_loading,
    };
    let power = tape.custom(&[speech_mask, noise_mask], power, Box::new(func));
    Ok(MvdrOutput {
        power,
        weights,
        fallback_bins,
    })
}

struct MvdrPowerFn {
    solves: Vec<BinSolve>,
    phi_s: SpatialCovariance,
    phi_n: SpatialCovariance,
    scm_spec: MultiChannelSpectrogram,
    apply_spec: MultiChannelSpectrogram,
    y: Vec<C>,
    reference: usize,
    loading: f64,
}

impl MvdrPowerFn {
    /// `dL/dm[t]` for a covariance `Phi = sum m x x^H / sum m` given the
    /// complex gradient `g` of `Phi`.
    fn mask_grad(&self, g: &DMatrix<C>, phi: &DMatrix<C>, mask: &Tensor, k: usize, out: &mut Tensor) {
        let (ts, m) = (self.scm_spec.num_frames(), self.scm_spec.num_channels());
        let denom: f64 = (0..ts).map(|t| mask.data()[t * mask.cols() + k]).sum();
        if denom <= 0.0 {
            return;
        }
        let base: f64 = g.iter().zip(phi.iter()).map(|(a, b)| (a.conj() * b).re).sum();
        let mut x = DVector::from_element(m, C::new(0.0, 0.0));
        for t in 0..ts {
            for c in 0..m {
                x[c] = self.scm_spec.get(c, t, k);
            }
            let gx = g * &x;
            let quad: C = x.iter().zip(gx.iter()).map(|(a, b)| a.conj() * b).sum();
            let cols = out.cols();
            out.data_mut()[t * cols + k] += (quad.re - base) / denom;
        }
    }
}

impl Function for MvdrPowerFn {
    fn name(&self) -> &'static str {
        "mvdr_power"
    }

    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let (ts, k_len, m) = (
            self.scm_spec.num_frames(),
            self.scm_spec.num_bins(),
            self.scm_spec.num_channels(),
        );
        let ta = self.apply_spec.num_frames();
        let mut gs = Tensor::zeros(ts, k_len);
        let mut gn = Tensor::zeros(ts, k_len);
        for (k, s) in self.solves.iter().enumerate() {
            if s.frozen {
                continue;
            }
            // Complex gradients follow dL = Re tr(G^H dZ).
            let mut gw = DVector::from_element(m, C::new(0.0, 0.0));
            for t in 0..ta {
                let gy = self.y[t * k_len + k] * (2.0 * grad_out.data()[t * k_len + k]);
                for c in 0..m {
                    gw[c] += gy.conj() * self.apply_spec.get(c, t, k);
                }
            }
            let tau_c = s.tau.conj();
            let ga = &gw / tau_c;
            let gtau = -gw.iter().zip(s.w.iter()).map(|(g, w)| w.conj() * g).sum::<C>() / tau_c;
            let mut g_a = DMatrix::from_element(m, m, C::new(0.0, 0.0));
            for i in 0..m {
                g_a[(i, self.reference)] += ga[i];
                g_a[(i, i)] += gtau;
            }
            let b_inv_h = s.b_inv.adjoint();
            let g_phi_s = &b_inv_h * &g_a;
            let g_b = -(&g_phi_s * s.a.adjoint());
            let mut g_phi_n = g_b.clone();
            if s.trace_loading {
                let add = g_b.trace() * (self.loading / m as f64);
                for i in 0..m {
                    g_phi_n[(i, i)] += add;
                }
            }
            self.mask_grad(&g_phi_s, &self.phi_s.matrix(k), inputs[0], k, &mut gs);
            self.mask_grad(&g_phi_n, &self.phi_n.matrix(k), inputs[1], k, &mut gn);
        }
        vec![Some(gs), Some(gn)]
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::random_spec;
    use super::super::{apply_beamformer, estimate_scm};
    use super::*;
    use crate::neural::gradcheck::check_gradients;
    use crate::signal::StftConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> StftConfig {
        StftConfig {
            fft_size: 4,
            window_size: 4,
            hop: 2,
            ..StftConfig::default()
        }
    }

    fn cov(m: usize, k: usize, f: impl Fn(usize, usize, usize) -> C) -> SpatialCovariance {
        let mut d = Vec::new();
        for b in 0..k {
            for i in 0..m {
                for j in 0..m {
                    d.push(f(b, i, j));
                }
            }
        }
        SpatialCovariance::from_data(d, k, m).unwrap()
    }

    #[test]
    fn single_channel_is_identity() {
        let phi = cov(1, 5, |b, _, _| C::new(0.5 + b as f64, 0.0));
        let w = mvdr_weights(&phi, &phi, &MvdrConfig::default()).unwrap();
        assert!(w.data().iter().all(|v| *v == C::new(1.0, 0.0)));
    }

    #[test]
    fn distortionless_for_rank_one_speech() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = 4;
        let d: Vec<C> = (0..m).map(|_| C::from_polar(1.0, rng.random_range(-3.0..3.0))).collect();
        let sigma2 = 2.5;
        let phi_s = cov(m, 1, |_, i, j| d[i] * d[j].conj() * sigma2);
        let phi_n = cov(m, 1, |_, i, j| if i == j { C::new(1.0, 0.0) } else { C::new(0.0, 0.0) });
        for r in 0..m {
            let cfg = MvdrConfig {
                reference_channel: r,
                ..MvdrConfig::default()
            };
            let w = mvdr_weights(&phi_s, &phi_n, &cfg).unwrap();
            let s = C::new(0.3, -1.1);
            let out: C = (0..m).map(|i| w.get(0, i).conj() * d[i] * s).sum();
            assert!((out - d[r] * s).norm() <= 1e-12);
        }
    }

    #[test]
    fn singular_noise_is_an_error_naming_the_bin() {
        let m = 3;
        let phi_s = cov(m, 3, |_, i, j| if i == j { C::new(1.0, 0.0) } else { C::new(0.0, 0.0) });
        let phi_n = cov(m, 3, |b, i, j| {
            if b == 2 {
                C::new(1.0, 0.0)
            } else if i == j {
                C::new(1.0, 0.0)
            } else {
                C::new(0.0, 0.0)
            }
        });
        let cfg = MvdrConfig {
            diagonal_loading: 0.0,
            ..MvdrConfig::default()
        };
        match mvdr_weights(&phi_s, &phi_n, &cfg) {
            Err(Error::SingularCovariance { bin }) => assert_eq!(bin, 2),
            other => panic!("expected singular error, got {other:?}"),
        }
        assert!(mvdr_weights(&phi_s, &phi_n, &MvdrConfig::default()).is_ok());
    }

    #[test]
    fn nan_and_bad_config_rejected() {
        let ok = cov(2, 1, |_, i, j| if i == j { C::new(1.0, 0.0) } else { C::new(0.0, 0.0) });
        let bad = cov(2, 1, |_, _, _| C::new(f64::NAN, 0.0));
        assert!(matches!(mvdr_weights(&bad, &ok, &MvdrConfig::default()), Err(Error::NonFinite(_))));
        let cfg = MvdrConfig {
            reference_channel: 2,
            ..MvdrConfig::default()
        };
        assert!(mvdr_weights(&ok, &ok, &cfg).is_err());
    }

    #[test]
    fn zero_speech_falls_back_to_reference() {
        let eye = cov(2, 1, |_, i, j| if i == j { C::new(1.0, 0.0) } else { C::new(0.0, 0.0) });
        let zero = cov(2, 1, |_, _, _| C::new(0.0, 0.0));
        let w = mvdr_weights(&zero, &eye, &MvdrConfig::default()).unwrap();
        assert_eq!(w.degenerate_bins(), 1);
        assert_eq!(w.bin(0), &[C::new(1.0, 0.0), C::new(0.0, 0.0)]);
        // Digital silence everywhere must not error.
        assert!(mvdr_weights(&zero, &zero, &MvdrConfig::default()).is_ok());
    }

    #[test]
    fn forward_matches_standalone_pipeline() {
        let cfg = tiny_cfg();
        let x = random_spec(3, 6, cfg, 9);
        let k = cfg.num_bins();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ms: Vec<f64> = (0..6 * k).map(|_| rng.random_range(0.05..0.95)).collect();
        let mn: Vec<f64> = ms.iter().map(|v| 1.0 - v).collect();
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::from_vec(6, k, ms.clone()).unwrap());
        let n = tape.constant(Tensor::from_vec(6, k, mn.clone()).unwrap());
        let out = mvdr_power(&mut tape, s, n, &x, &x, &MvdrConfig::default()).unwrap();
        let (ps, _) = estimate_scm(&x, &TimeFrequencyMask::new(ms, 6, k).unwrap()).unwrap();
        let (pn, _) = estimate_scm(&x, &TimeFrequencyMask::new(mn, 6, k).unwrap()).unwrap();
        let w = mvdr_weights(&ps, &pn, &MvdrConfig::default()).unwrap();
        assert_eq!(w, out.weights);
        let y = apply_beamformer(&w, &x).unwrap();
        let p: Vec<f64> = y.data().iter().map(|v| v.norm_sqr()).collect();
        assert_eq!(tape.value(out.power).data(), &p[..]);
    }

    #[test]
    fn mask_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let k = cfg.num_bins();
        let (ts, ta) = (5, 7);
        let x_apply = random_spec(3, ta, cfg, 11);
        let x_scm = x_apply.padded_frames(1, 1 + ts as isize);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let logits = vec![
            crate::neural::gradcheck::random_tensor(ts, k, 1.5, &mut rng),
            crate::neural::gradcheck::random_tensor(ts, k, 1.5, &mut rng),
        ];
        let wsum = crate::neural::gradcheck::random_tensor(ta, k, 1.0, &mut rng);
        let mcfg = MvdrConfig {
            reference_channel: 1,
            diagonal_loading: 1e-2,
        };
        let report = check_gradients(&logits, 1e-3, |t, v| {
            let s = t.sigmoid(v[0]);
            let n = t.sigmoid(v[1]);
            let out = mvdr_power(t, s, n, &x_scm, &x_apply, &mcfg)?;
            let c = t.constant(wsum.clone());
            let prod = t.mul(out.power, c)?;
            Ok(t.sum(prod))
        })
        .unwrap();
        assert_eq!(report.checked, 2 * ts * k);
    }
}
