use nalgebra::DMatrix;
use num_complex::Complex64;

use super::TimeFrequencyMask;
use crate::error::{Error, Result};
use crate::signal::MultiChannelSpectrogram;

/// Per-bin `M x M` Hermitian covariance matrices, `[bin][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialCovariance {
    data: Vec<Complex64>,
    num_bins: usize,
    num_channels: usize,
}

impl SpatialCovariance {
    pub fn from_data(data: Vec<Complex64>, num_bins: usize, num_channels: usize) -> Result<Self> {
        if data.len() != num_bins * num_channels * num_channels {
            return Err(Error::Shape("covariance data length".into()));
        }
        Ok(Self {
            data,
            num_bins,
            num_channels,
        })
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }
    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    pub fn bin(&self, k: usize) -> &[Complex64] {
        let mm = self.num_channels * self.num_channels;
        &self.data[k * mm..(k + 1) * mm]
    }

    pub fn matrix(&self, k: usize) -> DMatrix<Complex64> {
        let m = self.num_channels;
        DMatrix::from_row_slice(m, m, self.bin(k))
    }

    pub fn is_hermitian(&self) -> bool {
        let m = self.num_channels;
        (0..self.num_bins).all(|k| {
            let b = self.bin(k);
            (0..m).all(|i| (0..m).all(|j| b[i * m + j] == b[j * m + i].conj()))
        })
    }

    /// Smallest eigenvalue over all bins relative to that bin's trace.
    pub fn min_relative_eigenvalue(&self) -> f64 {
        (0..self.num_bins)
            .map(|k| {
                let a = self.matrix(k);
                let tr: f64 = (0..self.num_channels).map(|i| a[(i, i)].re).sum();
                let eig = a.symmetric_eigenvalues();
                let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
                if tr > 0.0 {
                    min / tr
                } else {
                    min
                }
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// `Phi[k] = sum_t m[t][k] x_t x_t^H / sum_t m[t][k]`, symmetrised. Bins whose
/// mask column sums to zero fall back to the unweighted average; the count of
/// such bins is returned alongside.
pub fn estimate_scm(
    spec: &MultiChannelSpectrogram,
    mask: &TimeFrequencyMask,
) -> Result<(SpatialCovariance, usize)> {
    let (t_len, k_len, m) = (spec.num_frames(), spec.num_bins(), spec.num_channels());
    if mask.num_frames() != t_len || mask.num_bins() != k_len {
        return Err(Error::Shape(format!(
            "mask {}x{} vs spectrogram {}x{}",
            mask.num_frames(),
            mask.num_bins(),
            t_len,
            k_len
        )));
    }
    let mm = m * m;
    let mut acc = vec![Complex64::new(0.0, 0.0); k_len * mm];
    let mut weight = vec![0.0; k_len];
    let mut plain = vec![Complex64::new(0.0, 0.0); k_len * mm];
    let mut x = vec![Complex64::new(0.0, 0.0); m];
    for t in 0..t_len {
        for k in 0..k_len {
            for (c, xc) in x.iter_mut().enumerate() {
                *xc = spec.get(c, t, k);
            }
            let w = mask.get(t, k);
            weight[k] += w;
            let a = &mut acc[k * mm..(k + 1) * mm];
            let p = &mut plain[k * mm..(k + 1) * mm];
            for i in 0..m {
                for j in i..m {
                    let r = x[i] * x[j].conj();
                    a[i * m + j] += r * w;
                    p[i * m + j] += r;
                }
            }
        }
    }
    let mut fallbacks = 0;
    let mut data = vec![Complex64::new(0.0, 0.0); k_len * mm];
    for k in 0..k_len {
        let (src, denom) = if weight[k] > 0.0 {
            (&acc[k * mm..(k + 1) * mm], weight[k])
        } else {
            fallbacks += 1;
            (&plain[k * mm..(k + 1) * mm], t_len.max(1) as f64)
        };
        let d = &mut data[k * mm..(k + 1) * mm];
        for i in 0..m {
            d[i * m + i] = Complex64::new(src[i * m + i].re / denom, 0.0);
            for j in i + 1..m {
                let v = src[i * m + j] / denom;
                d[i * m + j] = v;
                d[j * m + i] = v.conj();
            }
        }
    }
    Ok((SpatialCovariance::from_data(data, k_len, m)?, fallbacks))
}

#[cfg(test)]
mod tests {
    use super::super::tests::random_spec;
    use super::*;
    use crate::signal::StftConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> StftConfig {
        StftConfig {
            fft_size: 8,
            window_size: 8,
            hop: 4,
            ..StftConfig::default()
        }
    }

    fn random_mask(t: usize, k: usize, seed: u64) -> TimeFrequencyMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TimeFrequencyMask::new((0..t * k).map(|_| rng.random_range(0.0..1.0)).collect(), t, k).unwrap()
    }

    #[test]
    fn single_frame_unit_mask_is_outer_product() {
        let cfg = small_cfg();
        let x = random_spec(3, 1, cfg, 1);
        let (phi, _) = estimate_scm(&x, &TimeFrequencyMask::ones(1, cfg.num_bins())).unwrap();
        for k in 0..cfg.num_bins() {
            let b = phi.bin(k);
            for i in 0..3 {
                for j in 0..3 {
                    let want = x.get(i, 0, k) * x.get(j, 0, k).conj();
                    assert!((b[i * 3 + j] - want).norm() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn mono_is_masked_mean_power() {
        let cfg = small_cfg();
        let x = random_spec(1, 6, cfg, 2);
        let mask = random_mask(6, cfg.num_bins(), 3);
        let (phi, _) = estimate_scm(&x, &mask).unwrap();
        for k in 0..cfg.num_bins() {
            let num: f64 = (0..6).map(|t| mask.get(t, k) * x.get(0, t, k).norm_sqr()).sum();
            let den: f64 = (0..6).map(|t| mask.get(t, k)).sum();
            let v = phi.bin(k)[0];
            assert!(v.im == 0.0 && v.re >= 0.0);
            assert!((v.re - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_summation() {
        let cfg = small_cfg();
        let (m, t) = (4, 7);
        let x = random_spec(m, t, cfg, 4);
        let mask = random_mask(t, cfg.num_bins(), 5);
        let (phi, fb) = estimate_scm(&x, &mask).unwrap();
        assert_eq!(fb, 0);
        for k in 0..cfg.num_bins() {
            for i in 0..m {
                for j in 0..m {
                    let mut num = Complex64::new(0.0, 0.0);
                    let mut den = 0.0;
                    for tt in 0..t {
                        num += x.get(i, tt, k) * x.get(j, tt, k).conj() * mask.get(tt, k);
                        den += mask.get(tt, k);
                    }
                    assert!((phi.bin(k)[i * m + j] - num / den).norm() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn zero_mask_column_falls_back() {
        let cfg = small_cfg();
        let x = random_spec(2, 3, cfg, 6);
        let k = cfg.num_bins();
        let mut v = vec![1.0; 3 * k];
        for t in 0..3 {
            v[t * k + 2] = 0.0;
        }
        let (phi, fb) = estimate_scm(&x, &TimeFrequencyMask::new(v, 3, k).unwrap()).unwrap();
        assert_eq!(fb, 1);
        let (plain, _) = estimate_scm(&x, &TimeFrequencyMask::ones(3, k)).unwrap();
        assert_eq!(phi.bin(2), plain.bin(2));
    }

    #[test]
    fn hermitian_and_psd() {
        let cfg = small_cfg();
        for seed in 0..50 {
            let x = random_spec(3, 5, cfg, 100 + seed);
            let (phi, _) = estimate_scm(&x, &random_mask(5, cfg.num_bins(), seed)).unwrap();
            assert!(phi.is_hermitian());
            assert!(phi.min_relative_eigenvalue() >= -1e-8);
        }
    }
}
