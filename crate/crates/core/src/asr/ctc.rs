//! Connectionist temporal classification in log space.

use crate::error::{Error, Result};
use crate::neural::{Function, Tape, Tensor, Var};

pub const BLANK: u32 = 0;

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for t in 0..logits.rows() {
        let row = out.row_mut(t);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= z);
    }
    out
}

/// Fewest frames that can emit `labels`: one per label plus a separating
/// blank between each pair of equal neighbours.
pub fn min_frames(labels: &[u32]) -> (usize, usize) {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    (labels.len() + repeats, repeats)
}

/// Negative log-likelihood of `labels` under per-frame `logits` (`[T][V]`,
/// unnormalised), summed over all alignments, and its exact gradient with
/// respect to the logits.
pub fn ctc_loss(logits: &Tensor, labels: &[u32]) -> Result<(f64, Tensor)> {
    let (t_len, v) = (logits.rows(), logits.cols());
    if t_len == 0 {
        return Err(Error::InvalidInput("CTC needs at least one frame".into()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l == BLANK || l as usize >= v) {
        return Err(Error::InvalidInput(format!("label {bad} invalid for {v} classes")));
    }
    let (need, repeats) = min_frames(labels);
    if t_len < need {
        return Err(Error::InfeasibleAlignment {
            frames: t_len,
            labels: labels.len(),
            repeats,
        });
    }
    let lp = log_softmax_rows(logits);
    let ninf = f64::NEG_INFINITY;
    let s_len = 2 * labels.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { BLANK as usize } else { labels[s / 2] as usize })
        .collect();
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK as usize && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp.row(0)[ext[0]];
    if s_len > 1 {
        alpha[1] = lp.row(0)[ext[1]];
    }
    for t in 1..t_len {
        let e = lp.row(t);
        for s in 0..s_len {
            let p = &alpha[(t - 1) * s_len..t * s_len];
            let a = p[s];
            let b = if s >= 1 { p[s - 1] } else { ninf };
            let c = if skip_ok(s) { p[s - 2] } else { ninf };
            alpha[t * s_len + s] = lse3(a, b, c) + e[ext[s]];
        }
    }
    let last = &alpha[(t_len - 1) * s_len..];
    let log_p = if s_len > 1 {
        lse2(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };

    let mut beta = vec![ninf; t_len * s_len];
    let tl = t_len - 1;
    beta[tl * s_len + s_len - 1] = lp.row(tl)[ext[s_len - 1]];
    if s_len > 1 {
        beta[tl * s_len + s_len - 2] = lp.row(tl)[ext[s_len - 2]];
    }
    for t in (0..tl).rev() {
        let e = lp.row(t);
        for s in 0..s_len {
            let n = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let a = n[s];
            let b = if s + 1 < s_len { n[s + 1] } else { ninf };
            let c = if s + 2 < s_len && skip_ok(s + 2) { n[s + 2] } else { ninf };
            beta[t * s_len + s] = lse3(a, b, c) + e[ext[s]];
        }
    }

    let mut grad = lp.map(f64::exp);
    for t in 0..t_len {
        let e = lp.row(t);
        let g = grad.row_mut(t);
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            if v > ninf {
                g[ext[s]] -= (v - e[ext[s]] - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

struct CtcFn {
    grad: Tensor,
}

impl Function for CtcFn {
    fn name(&self) -> &'static str {
        "ctc"
    }

    fn backward(&self, grad_out: &Tensor, _inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let mut g = self.grad.clone();
        g.scale_in_place(grad_out.item());
        vec![Some(g)]
    }
}

/// CTC loss as a scalar tape node.
pub fn ctc_loss_var(tape: &mut Tape, logits: Var, labels: &[u32]) -> Result<Var> {
    let (loss, grad) = ctc_loss(tape.value(logits), labels)?;
    Ok(tape.custom(&[logits], Tensor::scalar(loss), Box::new(CtcFn { grad })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gradcheck::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_frame_single_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(1, 3, 2.0, &mut rng);
        let lp = log_softmax_rows(&x);
        let (l, _) = ctc_loss(&x, &[2]).unwrap();
        assert!((l + lp.row(0)[2]).abs() < 1e-12);
    }

    #[test]
    fn empty_labels_is_all_blank() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(5, 4, 2.0, &mut rng);
        let lp = log_softmax_rows(&x);
        let want: f64 = -(0..5).map(|t| lp.row(t)[0]).sum::<f64>();
        let (l, g) = ctc_loss(&x, &[]).unwrap();
        assert!((l - want).abs() < 1e-12);
        for t in 0..5 {
            let s: f64 = g.row(t).iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn infeasible_is_an_error() {
        let x = Tensor::zeros(2, 3);
        assert!(matches!(
            ctc_loss(&x, &[1, 1]),
            Err(Error::InfeasibleAlignment {
                frames: 2,
                labels: 2,
                repeats: 1
            })
        ));
        assert!(ctc_loss(&Tensor::zeros(3, 3), &[1, 1]).is_ok());
        assert!(ctc_loss(&x, &[0]).is_err());
        assert!(ctc_loss(&x, &[3]).is_err());
    }

    #[test]
    fn feasibility_rule_is_exact() {
        // With uniform logits any probability > 0 means feasible.
        let labels_set: [&[u32]; 5] = [&[1], &[1, 1], &[1, 2], &[1, 1, 1], &[2, 1, 1]];
        for labels in labels_set {
            let (need, _) = min_frames(labels);
            for t in 1..=6 {
                let r = ctc_loss(&Tensor::zeros(t, 3), labels);
                assert_eq!(r.is_ok(), t >= need, "{labels:?} T={t}");
                if let Ok((l, _)) = r {
                    assert!(l.is_finite() && l >= 0.0);
                }
            }
        }
    }
}
