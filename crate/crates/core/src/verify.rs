//! Registry of invariant and oracle checks run by `verify`.
//!
//! Each check is self-contained and deterministic for a given seed. A fault
//! can be injected to confirm that the registry actually detects failures.

use std::time::Instant;

use num_complex::Complex64 as C;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::asr::{collapse, ctc_loss, ctc_loss_var, encoder_forward, log_softmax_rows, EncoderConfig};
use crate::beamformer::{estimate_scm, mask_net_forward, mvdr_weights, MaskNet, MaskNetConfig, MvdrConfig, SpatialCovariance, TimeFrequencyMask};
use crate::chunking::{extract_chunk, plan_chunks, stitch_cores};
use crate::cuside::{simulate_future, SimNetConfig};
use crate::error::Error;
use crate::neural::gradcheck::{check_gradients, random_tensor};
use crate::neural::{add_gru_params, add_lstm_params, bind_gru, bind_lstm, blstm, gru, linear, BoundParams, ModelParams, Tape, Tensor, Var};
use crate::signal::{istft, stft, MultiChannelSpectrogram, StftConfig, Waveform};

/// Deliberate defects for exercising the registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Add a small offset to every CTC loss before comparison.
    PerturbCtc,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
}

type CheckFn = fn(&VerifyOptions) -> Result<String, String>;

pub struct Check {
    pub name: &'static str,
    pub description: &'static str,
    run: CheckFn,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed_ms: f64,
}

pub fn registry() -> Vec<Check> {
    vec![
        Check {
            name: "ctc_bruteforce",
            description: "CTC loss and gradient against exhaustive path enumeration",
            run: ctc_bruteforce,
        },
        Check {
            name: "gradients",
            description: "finite-difference checks of every differentiable layer",
            run: gradient_suite,
        },
        Check {
            name: "mvdr_identities",
            description: "single-channel identity, distortionless rank-one response, Hermitian PSD covariances",
            run: mvdr_identities,
        },
        Check {
            name: "stft_roundtrip",
            description: "STFT followed by inverse STFT reproduces interior samples",
            run: stft_roundtrip,
        },
        Check {
            name: "chunk_plans",
            description: "chunk cores partition the utterance and stitch back exactly",
            run: chunk_plans,
        },
    ]
}

impl Check {
    pub fn run(&self, opts: &VerifyOptions) -> CheckResult {
        let t = Instant::now();
        let r = (self.run)(opts);
        let elapsed_ms = t.elapsed().as_secs_f64() * 1e3;
        let (passed, detail) = match r {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        CheckResult {
            name: self.name,
            passed,
            detail,
            elapsed_ms,
        }
    }
}

/// Run every registered check whose name contains `filter`.
pub fn run_checks(opts: &VerifyOptions, filter: Option<&str>) -> Vec<CheckResult> {
    registry()
        .iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| c.run(opts))
        .collect()
}

fn rng_for(opts: &VerifyOptions, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(0x9E37_79B9).wrapping_add(salt))
}

/// `-log` of the summed probability of every frame path that collapses to
/// `labels`, by enumeration.
pub fn ctc_enumerate(logits: &Tensor, labels: &[u32]) -> Option<f64> {
    let (t_len, v) = (logits.rows(), logits.cols());
    let lp = log_softmax_rows(logits);
    let mut path = vec![0u32; t_len];
    let mut scores = Vec::new();
    loop {
        if collapse(&path, None) == labels {
            scores.push((0..t_len).map(|t| lp.row(t)[path[t] as usize]).sum::<f64>());
        }
        let mut i = 0;
        loop {
            if i == t_len {
                if scores.is_empty() {
                    return None;
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                return Some(-(m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()));
            }
            path[i] += 1;
            if (path[i] as usize) < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn ctc_bruteforce(opts: &VerifyOptions) -> Result<String, String> {
    let mut rng = rng_for(opts, 1);
    let offset = if opts.fault == Some(Fault::PerturbCtc) { 1e-3 } else { 0.0 };
    let (mut compared, mut infeasible, mut worst, mut worst_grad) = (0, 0, 0.0f64, 0.0f64);
    let mut attempts = 0;
    while compared < 500 && attempts < 5_000 {
        attempts += 1;
        let t_len = rng.random_range(1..=6);
        let v = rng.random_range(2..=3u32);
        let l = rng.random_range(0..=3);
        let labels: Vec<u32> = (0..l).map(|_| rng.random_range(1..v)).collect();
        let logits = random_tensor(t_len, v as usize, 3.0, &mut rng);
        let oracle = ctc_enumerate(&logits, &labels);
        match (ctc_loss(&logits, &labels), oracle) {
            (Err(Error::InfeasibleAlignment { .. }), None) => infeasible += 1,
            (Ok((loss, grad)), Some(want)) => {
                let loss = loss + offset;
                let rel = (loss - want).abs() / want.abs().max(1e-12);
                worst = worst.max(rel);
                if rel > 1e-6 {
                    return Err(format!("T={t_len} V={v} labels={labels:?}: loss {loss} vs enumeration {want}"));
                }
                let h = 1e-5;
                for i in 0..logits.len() {
                    let mut up = logits.clone();
                    up.data_mut()[i] += h;
                    let mut dn = logits.clone();
                    dn.data_mut()[i] -= h;
                    let fd = (ctc_enumerate(&up, &labels).unwrap() - ctc_enumerate(&dn, &labels).unwrap()) / (2.0 * h);
                    let a = grad.data()[i];
                    let e = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                    worst_grad = worst_grad.max(e);
                    if e > 1e-3 {
                        return Err(format!("gradient entry {i} of T={t_len} labels={labels:?}: {a} vs {fd}"));
                    }
                }
                compared += 1;
            }
            (got, want) => {
                return Err(format!(
                    "feasibility disagrees for T={t_len} labels={labels:?}: ctc {:?}, enumeration {want:?}",
                    got.map(|g| g.0)
                ))
            }
        }
    }
    if compared < 500 {
        return Err(format!("only {compared} feasible instances"));
    }
    Ok(format!(
        "{compared} instances (+{infeasible} infeasible), max rel loss error {worst:.1e}, grad {worst_grad:.1e}"
    ))
}

fn grad(name: &str, leaves: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> crate::Result<Var>) -> Result<f64, String> {
    check_gradients(leaves, 1e-3, f)
        .map(|r| r.max_rel_error)
        .map_err(|e| format!("{name}: {e}"))
}

fn params_as_leaves(p: &ModelParams) -> (Vec<String>, Vec<Tensor>) {
    let names: Vec<String> = p.names().cloned().collect();
    let leaves = names.iter().map(|n| p.get(n).expect("listed").clone()).collect();
    (names, leaves)
}

fn bind_leaves(names: &[String], vars: &[Var]) -> BoundParams {
    BoundParams::from_vars(names.iter().cloned().zip(vars.iter().copied()).collect())
}

fn gradient_suite(opts: &VerifyOptions) -> Result<String, String> {
    let mut rng = rng_for(opts, 2);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let (t, d, h) = (rng.random_range(2..5), rng.random_range(2..4), rng.random_range(2..4));

    let x = random_tensor(t, d, 1.0, &mut rng);
    let w = random_tensor(d, h, 1.0, &mut rng);
    let b = random_tensor(1, h, 1.0, &mut rng);
    let c = random_tensor(t, h, 1.0, &mut rng);
    worst.push((
        "linear",
        grad("linear", &[x.clone(), w, b], |tp, v| {
            let y = linear(tp, v[0], v[1], v[2])?;
            let k = tp.constant(c.clone());
            let y = tp.mul(y, k)?;
            Ok(tp.sum(y))
        })?,
    ));
    worst.push((
        "sigmoid",
        grad("sigmoid", &[x.clone()], |tp, v| {
            let y = tp.sigmoid(v[0]);
            let y = tp.mul(y, y)?;
            Ok(tp.sum(y))
        })?,
    ));
    let sel = random_tensor(t, d, 1.0, &mut rng);
    worst.push((
        "log_softmax",
        grad("log_softmax", &[x.clone()], |tp, v| {
            let y = tp.log_softmax(v[0]);
            let k = tp.constant(sel.clone());
            let y = tp.mul(y, k)?;
            Ok(tp.sum(y))
        })?,
    ));
    // Offset target keeps every residual away from the kink at zero.
    let target = x.map(|v| v + if v > 0.0 { 0.5 } else { -0.5 });
    let mask: Vec<bool> = (0..x.len()).map(|i| i % 3 != 1).collect();
    worst.push((
        "l1_loss",
        grad("l1_loss", &[x.clone()], |tp, v| tp.l1_loss(v[0], &target, Some(&mask)))?,
    ));

    let mut p = ModelParams::new();
    add_gru_params(&mut p, "g", d, h, &mut rng).map_err(|e| e.to_string())?;
    let (names, mut leaves) = params_as_leaves(&p);
    leaves.push(x.clone());
    leaves.push(random_tensor(1, h, 0.5, &mut rng));
    let n = names.len();
    worst.push((
        "gru",
        grad("gru", &leaves, |tp, v| {
            let bp = bind_leaves(&names, &v[..n]);
            let y = gru(tp, v[n], v[n + 1], &bind_gru(&bp, "g")?)?;
            let k = tp.constant(c.clone());
            let y = tp.mul(y, k)?;
            Ok(tp.sum(y))
        })?,
    ));

    let mut p = ModelParams::new();
    add_lstm_params(&mut p, "fw", d, h, &mut rng).map_err(|e| e.to_string())?;
    add_lstm_params(&mut p, "bw", d, h, &mut rng).map_err(|e| e.to_string())?;
    let (names, mut leaves) = params_as_leaves(&p);
    leaves.push(x.clone());
    let n = names.len();
    let c2 = random_tensor(t, 2 * h, 1.0, &mut rng);
    worst.push((
        "blstm",
        grad("blstm", &leaves, |tp, v| {
            let bp = bind_leaves(&names, &v[..n]);
            let y = blstm(tp, v[n], &bind_lstm(&bp, "fw")?, &bind_lstm(&bp, "bw")?)?;
            let k = tp.constant(c2.clone());
            let y = tp.mul(y, k)?;
            Ok(tp.sum(y))
        })?,
    ));

    let mcfg = MaskNetConfig {
        layers: 1,
        hidden_per_direction: 2,
        dropout: 0.0,
        num_bins: 3,
    };
    let mut p = ModelParams::new();
    MaskNet::new(&mcfg).init_params(&mut p, &mut rng).map_err(|e| e.to_string())?;
    let (names, leaves) = params_as_leaves(&p);
    let feats = random_tensor(t, 3, 1.0, &mut rng);
    let cm = random_tensor(t, 3, 1.0, &mut rng);
    worst.push((
        "mask_net",
        grad("mask_net", &leaves, |tp, v| {
            let bp = bind_leaves(&names, v);
            let f = tp.constant(feats.clone());
            let (s, nm) = mask_net_forward::<ChaCha8Rng>(tp, &bp, &mcfg, f, None)?;
            let k = tp.constant(cm.clone());
            let s = tp.mul(s, k)?;
            let y = tp.add(s, nm)?;
            Ok(tp.sum(y))
        })?,
    ));

    let ecfg = EncoderConfig {
        input_dim: d,
        layers: 2,
        hidden_per_direction: 2,
        vocab_size: 3,
        dropout: 0.0,
    };
    let mut p = ModelParams::new();
    ecfg.init_params(&mut p, &mut rng).map_err(|e| e.to_string())?;
    let (names, leaves) = params_as_leaves(&p);
    let labels: Vec<u32> = vec![1, 2];
    let xe = random_tensor(t.max(3), d, 1.0, &mut rng);
    worst.push((
        "encoder",
        grad("encoder", &leaves, |tp, v| {
            let bp = bind_leaves(&names, v);
            let f = tp.constant(xe.clone());
            let y = encoder_forward::<ChaCha8Rng>(tp, &bp, &ecfg, f, None)?;
            ctc_loss_var(tp, y, &labels)
        })?,
    ));

    let scfg = SimNetConfig {
        layers: 2,
        hidden: 3,
        right_frames: 2,
        feature_dim: d,
    };
    let mut p = ModelParams::new();
    scfg.init_params(&mut p, &mut rng).map_err(|e| e.to_string())?;
    let (names, mut leaves) = params_as_leaves(&p);
    leaves.push(random_tensor(4, d, 1.0, &mut rng));
    let n = names.len();
    let cs = random_tensor(2, d, 1.0, &mut rng);
    worst.push((
        "sim_net",
        grad("sim_net", &leaves, |tp, v| {
            let bp = bind_leaves(&names, &v[..n]);
            let h0 = scfg.zero_state().to_tape(tp);
            let a = tp.rows(v[n], 0, 2)?;
            let (_, h1) = simulate_future(tp, &bp, &scfg, a, &h0)?;
            let b = tp.rows(v[n], 2, 4)?;
            let (s, _) = simulate_future(tp, &bp, &scfg, b, &h1)?;
            let k = tp.constant(cs.clone());
            let y = tp.mul(s, k)?;
            Ok(tp.sum(y))
        })?,
    ));
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    Ok(format!("{} layers, max rel error {max:.1e}", worst.len()))
}

fn random_cov<R: Rng>(m: usize, bins: usize, rng: &mut R) -> SpatialCovariance {
    let mut data = vec![C::new(0.0, 0.0); bins * m * m];
    for k in 0..bins {
        // A A^H + I is Hermitian positive definite.
        let a: Vec<C> = (0..m * m).map(|_| C::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        for i in 0..m {
            for j in 0..m {
                let mut s: C = (0..m).map(|l| a[i * m + l] * a[j * m + l].conj()).sum();
                if i == j {
                    s += 1.0;
                }
                data[k * m * m + i * m + j] = s;
            }
        }
    }
    SpatialCovariance::from_data(data, bins, m).expect("shape")
}

fn mvdr_identities(opts: &VerifyOptions) -> Result<String, String> {
    let mut rng = rng_for(opts, 3);
    let cfg = MvdrConfig::default();
    for _ in 0..20 {
        let w = mvdr_weights(&random_cov(1, 9, &mut rng), &random_cov(1, 9, &mut rng), &cfg).map_err(|e| e.to_string())?;
        if w.data().iter().any(|v| *v != C::new(1.0, 0.0)) {
            return Err("single-channel filter is not exactly one".into());
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (m, bins) = (rng.random_range(2..=6), 5);
        let mut phi_s = vec![C::new(0.0, 0.0); bins * m * m];
        let mut phi_n = vec![C::new(0.0, 0.0); bins * m * m];
        let steer: Vec<C> = (0..bins * m)
            .map(|_| C::from_polar(rng.random_range(0.5..1.5), rng.random_range(0.0..6.28)))
            .collect();
        for k in 0..bins {
            for i in 0..m {
                for j in 0..m {
                    phi_s[k * m * m + i * m + j] = steer[k * m + i] * steer[k * m + j].conj();
                }
                phi_n[k * m * m + i * m + i] = C::new(1.0, 0.0);
            }
        }
        let w = mvdr_weights(
            &SpatialCovariance::from_data(phi_s, bins, m).expect("shape"),
            &SpatialCovariance::from_data(phi_n, bins, m).expect("shape"),
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        for k in 0..bins {
            let s = C::from_polar(1.0, rng.random_range(0.0..6.28));
            let y: C = (0..m).map(|c| w.get(k, c).conj() * steer[k * m + c] * s).sum();
            let clean = steer[k * m + cfg.reference_channel] * s;
            worst = worst.max((y - clean).norm());
        }
    }
    if worst > 1e-8 {
        return Err(format!("rank-one response deviates from the reference by {worst:.2e}"));
    }
    let stft_cfg = StftConfig {
        fft_size: 8,
        window_size: 8,
        hop: 4,
        ..StftConfig::default()
    };
    let mut min_eig = f64::INFINITY;
    for _ in 0..1000 {
        let (m, t) = (rng.random_range(1..=5), rng.random_range(1..=6));
        let bins = stft_cfg.num_bins();
        let data = (0..m * t * bins).map(|_| C::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))).collect();
        let spec = MultiChannelSpectrogram::from_data(data, m, t, stft_cfg).expect("shape");
        let mask = TimeFrequencyMask::new((0..t * bins).map(|_| rng.random_range(0.0..=1.0)).collect(), t, bins)
            .expect("valid mask");
        let (phi, _) = estimate_scm(&spec, &mask).map_err(|e| e.to_string())?;
        if !phi.is_hermitian() {
            return Err("covariance is not Hermitian".into());
        }
        min_eig = min_eig.min(phi.min_relative_eigenvalue());
    }
    if min_eig < -1e-10 {
        return Err(format!("covariance eigenvalue {min_eig:.2e} below zero"));
    }
    Ok(format!("rank-one error {worst:.1e}, min relative eigenvalue {min_eig:.1e} over 1000 covariances"))
}

fn stft_roundtrip(opts: &VerifyOptions) -> Result<String, String> {
    let mut rng = rng_for(opts, 4);
    let cfg = StftConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let len = rng.random_range(2_000..20_000);
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Waveform::mono(x.clone(), 16_000).map_err(|e| e.to_string())?;
        let y = istft(&stft(&w, &cfg).map_err(|e| e.to_string())?, 16_000, Some(len)).map_err(|e| e.to_string())?;
        let r = cfg.window_size..len - cfg.window_size;
        let err: f64 = r.clone().map(|n| (x[n] - y.channel(0)[n]).powi(2)).sum::<f64>();
        let ref_e: f64 = r.map(|n| x[n].powi(2)).sum::<f64>();
        worst = worst.max((err / ref_e).sqrt());
    }
    if worst > 1e-6 {
        return Err(format!("interior relative RMS {worst:.2e}"));
    }
    Ok(format!("10 signals, max interior relative RMS {worst:.1e}"))
}

fn chunk_plans(opts: &VerifyOptions) -> Result<String, String> {
    let mut rng = rng_for(opts, 5);
    for i in 0..1000 {
        let total = rng.random_range(1..400);
        let (c, l, r) = (rng.random_range(1..60), rng.random_range(0..100), rng.random_range(0..60));
        let plan = plan_chunks(total, c, l, r).map_err(|e| e.to_string())?;
        let mut next = 0;
        for d in &plan.descriptors {
            let ok = d.core_start == next
                && d.core_end > d.core_start
                && d.left_pad + (d.core_start - d.left_ctx_start) == l
                && (d.right_ctx_end - d.core_end) + d.right_pad == r
                && d.right_ctx_end <= total;
            if !ok {
                return Err(format!("plan {i}: bad descriptor {d:?} for T={total} C={c} L={l} R={r}"));
            }
            next = d.core_end;
        }
        if next != total {
            return Err(format!("plan {i}: cores cover {next} of {total} frames"));
        }
        let dim = rng.random_range(1..4);
        let frames: Vec<u32> = (0..(total * dim) as u32).collect();
        let chunks = plan
            .descriptors
            .iter()
            .map(|d| extract_chunk(&frames, dim, d, u32::MAX))
            .collect::<crate::Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        if stitch_cores(&chunks, &plan.descriptors, dim) != frames {
            return Err(format!("plan {i}: stitched cores differ from the input"));
        }
    }
    Ok("1000 plans".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_oracle_small_cases() {
        // One frame, one label: -log softmax(label).
        let x = Tensor::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        assert!((ctc_enumerate(&x, &[1]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(ctc_enumerate(&x, &[1, 1]).is_none());
        // Two uniform frames over {blank, a}: paths "a-", "-a", "aa" -> 3/4.
        let x = Tensor::from_vec(2, 2, vec![0.0; 4]).unwrap();
        assert!((ctc_enumerate(&x, &[1]).unwrap() - (4.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn registry_names_are_unique() {
        let r = registry();
        let mut names: Vec<_> = r.iter().map(|c| c.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), r.len());
    }

    #[test]
    fn fault_is_detected_by_the_ctc_check() {
        let opts = VerifyOptions {
            seed: 0,
            fault: Some(Fault::PerturbCtc),
        };
        let r = run_checks(&opts, Some("ctc"));
        assert_eq!(r.len(), 1);
        assert!(!r[0].passed);
    }
}
