use crate::error::{Error, Result};

/// Scale-invariant SDR in dB of `estimate` against `reference`.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() || reference.is_empty() {
        return Err(Error::Shape("si_sdr needs equal, non-empty signals".into()));
    }
    let ref_energy: f64 = reference.iter().map(|x| x * x).sum();
    if ref_energy <= 0.0 {
        return Err(Error::InvalidInput("si_sdr reference has zero energy".into()));
    }
    let dot: f64 = reference.iter().zip(estimate).map(|(r, e)| r * e).sum();
    let alpha = dot / ref_energy;
    let (mut target, mut residual) = (0.0, 0.0);
    for (r, e) in reference.iter().zip(estimate) {
        let t = alpha * r;
        target += t * t;
        residual += (e - t) * (e - t);
    }
    Ok(10.0 * (target / residual.max(f64::MIN_POSITIVE)).log10())
}

/// `10 log10(P_signal / P_noise)`.
pub fn snr_db(signal: &[f64], noise: &[f64]) -> Result<f64> {
    let ps: f64 = signal.iter().map(|x| x * x).sum();
    let pn: f64 = noise.iter().map(|x| x * x).sum();
    if ps <= 0.0 || pn <= 0.0 {
        return Err(Error::InvalidInput("snr needs non-zero powers".into()));
    }
    Ok(10.0 * (ps / pn).log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_invariance() {
        let r = [1.0, -2.0, 0.5, 3.0];
        let e = [1.1, -1.9, 0.4, 3.2];
        let a = si_sdr(&r, &e).unwrap();
        let scaled: Vec<f64> = e.iter().map(|x| x * 7.0).collect();
        assert!((si_sdr(&r, &scaled).unwrap() - a).abs() < 1e-9);
    }

    #[test]
    fn equal_power_is_zero_db() {
        assert!(snr_db(&[1.0, -1.0], &[-1.0, 1.0]).unwrap().abs() < 1e-12);
        assert!(snr_db(&[0.0], &[1.0]).is_err());
    }
}
