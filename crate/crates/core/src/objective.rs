//! Training losses and their gradients with respect to the video-level logits.
//!
//! `total = w_e * cls_e + w_o * cls_o + alpha * c2c + beta * a2c`, where the
//! stream weights `w_e`, `w_o` are 1 unless an ablation drops a stream.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::data::VideoLabel;
use crate::error::{EcmError, Result};
use crate::model::{softmax, ForwardOutput, HeadGrads};

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_BETA: f64 = 5.0;
/// Probabilities entering a log are clamped to `[PROB_EPSILON, 1 - PROB_EPSILON]`.
pub const PROB_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls_e: f64,
    pub cls_o: f64,
    pub c2c: f64,
    pub a2c: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub cls_e_weight: f64,
    pub cls_o_weight: f64,
}

impl LossBreakdown {
    pub fn zero() -> Self {
        Self {
            cls_e: 0.0,
            cls_o: 0.0,
            c2c: 0.0,
            a2c: 0.0,
            total: 0.0,
            alpha: 0.0,
            beta: 0.0,
            cls_e_weight: 0.0,
            cls_o_weight: 0.0,
        }
    }

    /// Component-wise mean; coefficients are taken from the first entry.
    pub fn mean(parts: &[LossBreakdown]) -> Option<Self> {
        let first = parts.first()?;
        let n = parts.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
        Some(Self {
            cls_e: avg(|p| p.cls_e),
            cls_o: avg(|p| p.cls_o),
            c2c: avg(|p| p.c2c),
            a2c: avg(|p| p.a2c),
            total: avg(|p| p.total),
            ..*first
        })
    }
}

/// Which terms enter the objective and with what coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls_e: f64,
    pub cls_o: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls_e: 1.0,
            cls_o: 1.0,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(EcmError::Shape(format!(
            "{what}: lengths {a} and {b} differ"
        )));
    }
    Ok(())
}

fn log_softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.mapv(|v| (v - max).exp()).sum().ln();
    logits.mapv(|v| v - lse)
}

/// Cross-entropy between `softmax(logits)` and the L1-normalized label.
pub fn loss_cls(logits: &Array1<f64>, label: &VideoLabel) -> Result<f64> {
    check_len(logits.len(), label.num_categories(), "loss_cls")?;
    let logp = log_softmax(logits);
    Ok(-label
        .normalized()
        .iter()
        .zip(logp.iter())
        .map(|(y, lp)| if *y > 0.0 { y * lp } else { 0.0 })
        .sum::<f64>())
}

/// Mean squared difference of the two streams' class probabilities.
pub fn loss_c2c(s_e: &Array1<f64>, s_o: &Array1<f64>) -> Result<f64> {
    check_len(s_e.len(), s_o.len(), "loss_c2c")?;
    let c = s_e.len() as f64;
    Ok(s_e
        .iter()
        .zip(s_o.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / c)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON)
}

/// `-(1/2k) * Σ_{c positive} [log s_o[c] + log(1 - s̃_o[c])]`.
pub fn loss_a2c(s_o: &Array1<f64>, s_tilde_o: &Array1<f64>, label: &VideoLabel) -> Result<f64> {
    check_len(s_o.len(), label.num_categories(), "loss_a2c")?;
    check_len(s_tilde_o.len(), label.num_categories(), "loss_a2c")?;
    let k = label.positive_count();
    if k == 0 {
        return Err(EcmError::Label("a2c needs at least one positive".into()));
    }
    let sum: f64 = label
        .positives()
        .map(|c| clamp_prob(s_o[c]).ln() + (1.0 - clamp_prob(s_tilde_o[c])).ln())
        .sum();
    Ok(-sum / (2.0 * k as f64))
}

/// Raw loss components before weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub cls_e: f64,
    pub cls_o: f64,
    pub c2c: f64,
    pub a2c: f64,
}

pub fn loss_total(parts: LossParts, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    weighted_total(
        parts,
        &LossWeights {
            cls_e: 1.0,
            cls_o: 1.0,
            alpha,
            beta,
        },
    )
}

fn weighted_total(parts: LossParts, w: &LossWeights) -> Result<LossBreakdown> {
    let values = [
        parts.cls_e,
        parts.cls_o,
        parts.c2c,
        parts.a2c,
        w.alpha,
        w.beta,
    ];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(EcmError::NonFinite(format!("loss parts {parts:?}")));
    }
    Ok(LossBreakdown {
        cls_e: parts.cls_e,
        cls_o: parts.cls_o,
        c2c: parts.c2c,
        a2c: parts.a2c,
        total: w.cls_e * parts.cls_e
            + w.cls_o * parts.cls_o
            + w.alpha * parts.c2c
            + w.beta * parts.a2c,
        alpha: w.alpha,
        beta: w.beta,
        cls_e_weight: w.cls_e,
        cls_o_weight: w.cls_o,
    })
}

// Vector-Jacobian product of softmax: p ⊙ (g - <p, g>).
fn softmax_vjp(p: &Array1<f64>, g: &Array1<f64>) -> Array1<f64> {
    let dot = p.dot(g);
    p * &(g - dot)
}

/// Loss breakdown for one video plus the gradient of its weighted total with
/// respect to the head logits.
pub fn objective(
    out: &ForwardOutput,
    label: &VideoLabel,
    weights: &LossWeights,
) -> Result<(LossBreakdown, HeadGrads)> {
    let post = &out.post;
    let parts = LossParts {
        cls_e: loss_cls(&out.logits_e, label)?,
        cls_o: loss_cls(&post.logits_o, label)?,
        c2c: loss_c2c(&out.s_e, &post.p_o)?,
        a2c: loss_a2c(&post.s_o, &post.s_tilde_o, label)?,
    };
    let breakdown = weighted_total(parts, weights)?;

    let y = Array1::from(label.normalized());
    let c = y.len();
    let mut d_e = (&out.s_e - &y) * weights.cls_e;
    let mut d_o = (&softmax(&post.logits_o) - &y) * weights.cls_o;

    if weights.alpha != 0.0 {
        let g = (&out.s_e - &post.p_o) * (2.0 * weights.alpha / c as f64);
        d_e += &softmax_vjp(&out.s_e, &g);
        d_o -= &softmax_vjp(&post.p_o, &g);
    }

    let mut d_tilde = Array1::zeros(c);
    if weights.beta != 0.0 {
        let scale = weights.beta / (2.0 * label.positive_count() as f64);
        for ci in label.positives() {
            let s = post.s_o[ci];
            if clamp_prob(s) == s {
                d_o[ci] -= scale * (1.0 - s);
            }
            let st = post.s_tilde_o[ci];
            if clamp_prob(st) == st {
                d_tilde[ci] += scale * st;
            }
        }
    }

    Ok((
        breakdown,
        HeadGrads {
            logits_e: d_e,
            logits_o: d_o,
            logits_tilde_o: d_tilde,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn label(c: usize, pos: &[usize]) -> VideoLabel {
        VideoLabel::from_indices(c, pos).unwrap()
    }

    #[test]
    fn cls_examples() {
        assert!(loss_cls(&array![30.0, 0.0], &label(2, &[0])).unwrap() < 1e-12);
        let logits = array![0.3, -1.2];
        let p = softmax(&logits);
        let expected = -(p[0].ln() + p[1].ln()) / 2.0;
        assert!((loss_cls(&logits, &label(2, &[0, 1])).unwrap() - expected).abs() < 1e-15);
        let v = loss_cls(&array![0.7, 0.7, 0.7, 0.7], &label(4, &[0, 2])).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        assert!((4f64.ln() - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn c2c_examples() {
        assert_eq!(loss_c2c(&array![0.2, 0.8], &array![0.2, 0.8]).unwrap(), 0.0);
        assert_eq!(loss_c2c(&array![1.0, 0.0], &array![0.0, 1.0]).unwrap(), 1.0);
        let v = loss_c2c(&array![0.5, 0.3, 0.2], &array![0.2, 0.3, 0.5]).unwrap();
        assert!((v - 0.06).abs() < 1e-9);
        assert!(loss_c2c(&array![0.5], &array![0.5, 0.5]).is_err());
    }

    #[test]
    fn a2c_examples() {
        let eps = PROB_EPSILON;
        let v = loss_a2c(&array![1.0 - eps, 0.3], &array![eps, 0.9], &label(2, &[0])).unwrap();
        assert!(v < 1e-6);
        let v = loss_a2c(&array![0.5, 0.1], &array![0.5, 0.7], &label(2, &[0])).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let v = loss_a2c(
            &array![0.9, 0.8, 0.4],
            &array![0.1, 0.2, 0.6],
            &label(3, &[0, 1]),
        )
        .unwrap();
        let expected = -(0.9f64.ln() + 0.8f64.ln() + 0.9f64.ln() + 0.8f64.ln()) / 4.0;
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.1643).abs() < 1e-4);
    }

    #[test]
    fn total_examples() {
        let parts = LossParts {
            cls_e: 1.0,
            cls_o: 1.0,
            c2c: 1.0,
            a2c: 1.0,
        };
        let b = loss_total(parts, DEFAULT_ALPHA, DEFAULT_BETA).unwrap();
        assert_eq!(b.total, 7.05);
        let zero = LossParts {
            cls_e: 0.0,
            cls_o: 0.0,
            c2c: 0.0,
            a2c: 0.0,
        };
        assert_eq!(loss_total(zero, 0.05, 5.0).unwrap().total, 0.0);
        let bad = LossParts {
            c2c: f64::NAN,
            ..parts
        };
        assert!(loss_total(bad, 0.05, 5.0).is_err());
    }

    #[test]
    fn breakdown_mean() {
        let a = loss_total(
            LossParts {
                cls_e: 1.0,
                cls_o: 2.0,
                c2c: 0.0,
                a2c: 1.0,
            },
            0.05,
            5.0,
        )
        .unwrap();
        let b = loss_total(
            LossParts {
                cls_e: 3.0,
                cls_o: 0.0,
                c2c: 2.0,
                a2c: 0.0,
            },
            0.05,
            5.0,
        )
        .unwrap();
        let m = LossBreakdown::mean(&[a, b]).unwrap();
        assert_eq!(m.cls_e, 2.0);
        assert!((m.total - (a.total + b.total) / 2.0).abs() < 1e-15);
        assert!(LossBreakdown::mean(&[]).is_none());
    }

    fn probs(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.001f64..0.999, n)
    }

    proptest! {
        #[test]
        fn c2c_symmetric_and_nonnegative(a in probs(5), b in probs(5)) {
            let (a, b) = (Array1::from(a), Array1::from(b));
            let ab = loss_c2c(&a, &b).unwrap();
            prop_assert_eq!(ab, loss_c2c(&b, &a).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(loss_c2c(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn losses_are_permutation_invariant(
            so in probs(4), st in probs(4), logits in proptest::collection::vec(-3.0f64..3.0, 4),
            mask in proptest::collection::vec(any::<bool>(), 4), rot in 0usize..4,
        ) {
            prop_assume!(mask.iter().any(|&m| m));
            let perm = |v: &[f64]| Array1::from_iter((0..4).map(|i| v[(i + rot) % 4]));
            let pmask: Vec<bool> = (0..4).map(|i| mask[(i + rot) % 4]).collect();
            let y = VideoLabel::from_mask(mask.clone()).unwrap();
            let py = VideoLabel::from_mask(pmask).unwrap();
            let a = loss_a2c(&Array1::from(so.clone()), &Array1::from(st.clone()), &y).unwrap();
            let pa = loss_a2c(&perm(&so), &perm(&st), &py).unwrap();
            prop_assert!((a - pa).abs() < 1e-12);
            let c = loss_cls(&Array1::from(logits.clone()), &y).unwrap();
            let pc = loss_cls(&perm(&logits), &py).unwrap();
            prop_assert!((c - pc).abs() < 1e-12);
        }

        #[test]
        fn a2c_monotone(so in probs(3), st in probs(3), bump in 0.0001f64..0.1) {
            let y = label(3, &[0, 2]);
            let so = Array1::from(so);
            let st = Array1::from(st);
            let base = loss_a2c(&so, &st, &y).unwrap();
            let mut up = so.clone();
            up[2] = (up[2] + bump).min(0.9999);
            prop_assert!(loss_a2c(&up, &st, &y).unwrap() <= base);
            let mut worse = st.clone();
            worse[0] = (worse[0] + bump).min(0.9999);
            prop_assert!(loss_a2c(&so, &worse, &y).unwrap() >= base);
        }
    }
}
