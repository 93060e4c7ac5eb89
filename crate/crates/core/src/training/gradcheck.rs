//! Finite-difference verification of the hand-written backward pass.

use ndarray::Array2;
use rand::Rng;
use serde::Serialize;

use super::{batch_gradient, batch_loss, AblationFlags, Example, Streams};
use crate::data::{FeatureSequence, VideoLabel};
use crate::error::Result;
use crate::model::{EcmParams, ModelShape};
use crate::objective::LossWeights;
use crate::seed;

/// Denominator floor of the relative error, so entries whose analytic and
/// numeric values are both ~0 do not blow up the ratio.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the analytic gradient of the batch-mean objective with central
/// differences over every parameter.
pub fn gradient_check(
    params: &EcmParams,
    batch: &[Example],
    weights: &LossWeights,
    k_ratio: f64,
    epsilon: f64,
) -> Result<GradCheckReport> {
    let refs: Vec<&Example> = batch.iter().collect();
    let (_, grad) = batch_gradient(params, &refs, weights, k_ratio)?;
    let analytic: Vec<(String, Vec<f64>)> = grad
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.data.to_vec()))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = params.clone();
    for (ti, (name, values)) in analytic.iter().enumerate() {
        for (i, &a) in values.iter().enumerate() {
            let original = probe.tensors()[ti].data[i];
            let mut loss_at = |x: f64| -> Result<f64> {
                probe.tensors_mut()[ti].data[i] = x;
                Ok(batch_loss(&probe, &refs, weights, k_ratio)?.total)
            };
            let plus = loss_at(original + epsilon)?;
            let minus = loss_at(original - epsilon)?;
            loss_at(original)?;
            let n = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(a, n);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_tensor.is_empty() {
                report.max_rel_error = err;
                report.worst_tensor = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = n;
            }
        }
    }
    Ok(report)
}

/// A random model with nonzero biases and a small random batch.
pub fn tiny_problem(
    shape: &ModelShape,
    snippets: usize,
    videos: usize,
    master_seed: u64,
) -> Result<(EcmParams, Vec<Example>)> {
    let mut params = EcmParams::init(shape, master_seed);
    let mut rng = seed::rng(master_seed, "gradcheck.problem");
    for t in params.tensors_mut() {
        if t.is_bias {
            t.data
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let c = shape.categories;
    let batch = (0..videos)
        .map(|i| {
            let values = Array2::from_shape_fn((snippets, shape.feature_dim), |_| {
                rng.random_range(-1.0..1.0)
            });
            let mut mask: Vec<bool> = (0..c).map(|_| rng.random_bool(0.4)).collect();
            mask[rng.random_range(0..c)] = true;
            Ok(Example {
                video_id: format!("probe_{i}"),
                features: FeatureSequence::new(values)?,
                label: VideoLabel::from_mask(mask)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((params, batch))
}

/// One line of [`check_flag_combinations`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlagCheck {
    pub flags: AblationFlags,
    pub report: GradCheckReport,
}

/// Runs [`gradient_check`] on the tiny configuration for every combination
/// of classifier sharing, c2c, a2c and class-agnostic weights.
pub fn check_flag_combinations(master_seed: u64, epsilon: f64) -> Result<Vec<FlagCheck>> {
    let mut out = Vec::new();
    for bits in 0..16u32 {
        let flags = AblationFlags {
            streams: Streams::Both,
            share_classifier: bits & 1 != 0,
            use_c2c: bits & 2 != 0,
            use_a2c: bits & 4 != 0,
            class_agnostic_weights: bits & 8 != 0,
        };
        let shape = ModelShape {
            feature_dim: 5,
            hidden: 4,
            categories: 3,
            share_classifier: flags.share_classifier,
            class_agnostic_weights: flags.class_agnostic_weights,
        };
        let (params, batch) = tiny_problem(&shape, 9, 2, master_seed.wrapping_add(bits as u64))?;
        let weights = flags.loss_weights(super::DEFAULT_ALPHA, super::DEFAULT_BETA);
        let report = gradient_check(&params, &batch, &weights, super::DEFAULT_K_RATIO, epsilon)?;
        out.push(FlagCheck { flags, report });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model;
    use crate::objective;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_model_closed_form() {
        // All-zero parameters: every logit equals the last-layer bias, so each
        // classification term contributes 1/C - y to it, and nothing reaches
        // the transition because the post classifier ignores its input.
        let shape = ModelShape {
            feature_dim: 5,
            hidden: 4,
            categories: 3,
            share_classifier: true,
            class_agnostic_weights: false,
        };
        let params = EcmParams::zeros(&shape);
        let seq = FeatureSequence::new(Array2::from_shape_fn((9, 5), |(t, d)| {
            ((t * 5 + d) as f64 * 0.37).sin()
        }))
        .unwrap();
        let label = VideoLabel::from_indices(3, &[1]).unwrap();
        let weights = LossWeights::default();
        let trace = model::forward_traced(&seq, &params, 0.125).unwrap();
        let (_, head) = objective::objective(&trace.output, &label, &weights).unwrap();
        let mut grad = params.zeros_like();
        model::backward(&seq, &params, &trace, &head, &mut grad);
        // c2c vanishes at equal distributions; the a2c pulls on s_o and s~_o
        // cancel because both sit at 1/2 and share the bias.
        let b3 = &grad.classifier.layer3.bias;
        let expected = [2.0 / 3.0, -4.0 / 3.0, 2.0 / 3.0];
        for c in 0..3 {
            assert!(
                (b3[c] - expected[c]).abs() < 1e-12,
                "{c}: {} vs {}",
                b3[c],
                expected[c]
            );
        }
        assert!(grad.transition.conv.bias.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn default_flags_pass_tolerance() {
        let shape = ModelShape {
            feature_dim: 5,
            hidden: 4,
            categories: 3,
            share_classifier: true,
            class_agnostic_weights: false,
        };
        let (params, batch) = tiny_problem(&shape, 9, 2, 3).unwrap();
        let report = gradient_check(&params, &batch, &LossWeights::default(), 0.125, 1e-5).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
        assert_eq!(report.checked, params.num_parameters());
    }

    #[test]
    fn every_flag_combination_passes() {
        let checks = check_flag_combinations(0, 1e-5).unwrap();
        assert_eq!(checks.len(), 16);
        for c in &checks {
            assert!(c.report.max_rel_error <= 1e-4, "{:?}", c);
        }
    }
}
