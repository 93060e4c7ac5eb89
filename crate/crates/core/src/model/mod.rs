//! The two-stream network.
//!
//! The pre-classification stream runs the classifier over every snippet to
//! get the class activation sequence (CAS) and pools it with a top-k mean.
//! The post-classification stream turns the CAS into per-category attention
//! weights, aggregates snippet features fold by fold into three-step
//! sequences, and classifies those with the same classifier.

mod classifier;
mod conv;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use classifier::ClassifierParams;
pub(crate) use classifier::ClassifierTrace;
pub use conv::Conv1d;

use crate::data::FeatureSequence;
use crate::error::{EcmError, Result};
use crate::seed;

/// Guard for folds whose attention mass vanishes.
pub const FOLD_EPSILON: f64 = 1e-8;
/// Number of folds, and so the temporal length of aggregated features.
pub const FOLDS: usize = 3;
/// Default top-k ratio of the pre-stream pooling.
pub const DEFAULT_K_RATIO: f64 = 1.0 / 8.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Kernel-1 conv from the CAS to attention logits. With `C` outputs the
/// weights are category-specific; a single output gives one class-agnostic
/// row broadcast to every category.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionParams {
    pub conv: Conv1d,
}

impl TransitionParams {
    pub fn zeros(categories: usize, class_agnostic: bool) -> Self {
        let out = if class_agnostic { 1 } else { categories };
        Self {
            conv: Conv1d::zeros(1, categories, out),
        }
    }

    pub fn init(categories: usize, class_agnostic: bool, rng: &mut impl Rng) -> Self {
        let out = if class_agnostic { 1 } else { categories };
        Self {
            conv: Conv1d::init(1, categories, out, rng),
        }
    }

    pub fn from_conv(conv: Conv1d) -> Result<Self> {
        if conv.kernel() != 1
            || (conv.out_channels() != 1 && conv.out_channels() != conv.in_channels())
        {
            return Err(EcmError::Shape(format!(
                "transition conv must be kernel 1 with C or 1 outputs, got kernel {} {}->{}",
                conv.kernel(),
                conv.in_channels(),
                conv.out_channels()
            )));
        }
        Ok(Self { conv })
    }

    pub fn categories(&self) -> usize {
        self.conv.in_channels()
    }

    pub fn is_class_agnostic(&self) -> bool {
        self.conv.out_channels() == 1 && self.conv.in_channels() != 1
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv: self.conv.zeros_like(),
        }
    }
}

/// Architecture of an [`EcmParams`] set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub feature_dim: usize,
    pub hidden: usize,
    pub categories: usize,
    /// When false the post stream owns an independent classifier copy.
    pub share_classifier: bool,
    pub class_agnostic_weights: bool,
}

/// All trainable parameters. With `post_classifier == None` both streams read
/// the very same [`ClassifierParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EcmParams {
    pub classifier: ClassifierParams,
    pub post_classifier: Option<ClassifierParams>,
    pub transition: TransitionParams,
}

/// A borrowed parameter tensor with its checkpoint name and logical shape.
#[derive(Debug)]
pub struct ParamView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub is_bias: bool,
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct ParamViewMut<'a> {
    pub name: String,
    pub is_bias: bool,
    pub data: &'a mut [f64],
}

fn conv_views<'a>(prefix: &str, conv: &'a Conv1d, out: &mut Vec<ParamView<'a>>) {
    out.push(ParamView {
        name: format!("{prefix}.weight"),
        shape: vec![conv.kernel(), conv.in_channels(), conv.out_channels()],
        is_bias: false,
        data: conv.weight.as_slice().expect("standard layout"),
    });
    out.push(ParamView {
        name: format!("{prefix}.bias"),
        shape: vec![conv.out_channels()],
        is_bias: true,
        data: conv.bias.as_slice().expect("standard layout"),
    });
}

fn conv_views_mut<'a>(prefix: &str, conv: &'a mut Conv1d, out: &mut Vec<ParamViewMut<'a>>) {
    out.push(ParamViewMut {
        name: format!("{prefix}.weight"),
        is_bias: false,
        data: conv.weight.as_slice_mut().expect("standard layout"),
    });
    out.push(ParamViewMut {
        name: format!("{prefix}.bias"),
        is_bias: true,
        data: conv.bias.as_slice_mut().expect("standard layout"),
    });
}

fn classifier_convs<'a>(prefix: &str, c: &'a ClassifierParams) -> [(String, &'a Conv1d); 3] {
    [
        (format!("{prefix}.layer1"), &c.layer1),
        (format!("{prefix}.layer2"), &c.layer2),
        (format!("{prefix}.layer3"), &c.layer3),
    ]
}

impl EcmParams {
    pub fn init(shape: &ModelShape, master_seed: u64) -> Self {
        let mut rng = seed::rng(master_seed, "model.init");
        let ModelShape {
            feature_dim: d,
            hidden: h,
            categories: c,
            ..
        } = *shape;
        let classifier = ClassifierParams::init(d, h, c, &mut rng);
        let transition = TransitionParams::init(c, shape.class_agnostic_weights, &mut rng);
        let post_classifier =
            (!shape.share_classifier).then(|| ClassifierParams::init(d, h, c, &mut rng));
        Self {
            classifier,
            post_classifier,
            transition,
        }
    }

    pub fn zeros(shape: &ModelShape) -> Self {
        let ModelShape {
            feature_dim: d,
            hidden: h,
            categories: c,
            ..
        } = *shape;
        Self {
            classifier: ClassifierParams::zeros(d, h, c),
            post_classifier: (!shape.share_classifier).then(|| ClassifierParams::zeros(d, h, c)),
            transition: TransitionParams::zeros(c, shape.class_agnostic_weights),
        }
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            feature_dim: self.classifier.feature_dim(),
            hidden: self.classifier.hidden(),
            categories: self.classifier.categories(),
            share_classifier: self.is_shared(),
            class_agnostic_weights: self.transition.is_class_agnostic(),
        }
    }

    /// Classifier used by the post-classification stream.
    pub fn post(&self) -> &ClassifierParams {
        self.post_classifier.as_ref().unwrap_or(&self.classifier)
    }

    pub fn is_shared(&self) -> bool {
        self.post_classifier.is_none()
    }

    pub fn categories(&self) -> usize {
        self.classifier.categories()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            classifier: self.classifier.zeros_like(),
            post_classifier: self.post_classifier.as_ref().map(|p| p.zeros_like()),
            transition: self.transition.zeros_like(),
        }
    }

    /// Every tensor in a fixed order: classifier, post classifier (if any),
    /// transition.
    pub fn tensors(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        for (name, conv) in classifier_convs("classifier", &self.classifier) {
            conv_views(&name, conv, &mut out);
        }
        if let Some(post) = &self.post_classifier {
            for (name, conv) in classifier_convs("post_classifier", post) {
                conv_views(&name, conv, &mut out);
            }
        }
        conv_views("transition", &self.transition.conv, &mut out);
        out
    }

    /// Mutable views in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut out = Vec::new();
        let c = &mut self.classifier;
        conv_views_mut("classifier.layer1", &mut c.layer1, &mut out);
        conv_views_mut("classifier.layer2", &mut c.layer2, &mut out);
        conv_views_mut("classifier.layer3", &mut c.layer3, &mut out);
        if let Some(p) = &mut self.post_classifier {
            conv_views_mut("post_classifier.layer1", &mut p.layer1, &mut out);
            conv_views_mut("post_classifier.layer2", &mut p.layer2, &mut out);
            conv_views_mut("post_classifier.layer3", &mut p.layer3, &mut out);
        }
        conv_views_mut("transition", &mut self.transition.conv, &mut out);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Class activation sequence from the pre-stream classifier.
    pub fn cas(&self, seq: &FeatureSequence) -> Result<ClassActivationSequence> {
        ClassActivationSequence::new(self.classifier.forward(seq.values())?)
    }

    /// Class activation sequence from the post-stream classifier (identical
    /// to [`Self::cas`] when shared).
    pub fn post_cas(&self, seq: &FeatureSequence) -> Result<ClassActivationSequence> {
        ClassActivationSequence::new(self.post().forward(seq.values())?)
    }
}

/// `T x C` per-snippet logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassActivationSequence {
    scores: Array2<f64>,
}

impl ClassActivationSequence {
    pub fn new(scores: Array2<f64>) -> Result<Self> {
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(EcmError::NonFinite("class activation sequence".into()));
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    pub fn snippets(&self) -> usize {
        self.scores.nrows()
    }

    pub fn categories(&self) -> usize {
        self.scores.ncols()
    }
}

/// Paired `C x T` attention weights with `action + background = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub action: Array2<f64>,
    pub background: Array2<f64>,
}

/// Category-specific `C x D x 3` features.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedFeatures {
    pub action: Array3<f64>,
    pub background: Array3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostScores {
    pub logits_o: Array1<f64>,
    /// Per-category sigmoid of `logits_o`: action presence.
    pub s_o: Array1<f64>,
    /// Softmax of `logits_o`, used by the classification and c2c losses.
    pub p_o: Array1<f64>,
    pub logits_tilde_o: Array1<f64>,
    /// Per-category sigmoid on background features: action absence.
    pub s_tilde_o: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub cas: ClassActivationSequence,
    pub weights: AttentionWeights,
    pub agg: AggregatedFeatures,
    pub logits_e: Array1<f64>,
    pub s_e: Array1<f64>,
    pub post: PostScores,
}

/// `max(1, ceil(k_ratio * T))`.
pub fn top_k_count(snippets: usize, k_ratio: f64) -> usize {
    ((k_ratio * snippets as f64).ceil() as usize).clamp(1, snippets)
}

// Indices of the k largest entries; ties prefer the earlier snippet.
fn top_k_indices(column: ndarray::ArrayView1<'_, f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..column.len()).collect();
    idx.sort_by(|&a, &b| column[b].total_cmp(&column[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn check_k_ratio(k_ratio: f64) -> Result<()> {
    if !(k_ratio > 0.0 && k_ratio <= 1.0) {
        return Err(EcmError::InvalidArgument(format!(
            "k_ratio must be in (0, 1], got {k_ratio}"
        )));
    }
    Ok(())
}

/// Video-level logits (top-k mean per category) and their softmax.
pub fn pre_stream_score(
    cas: &ClassActivationSequence,
    k_ratio: f64,
) -> Result<(Array1<f64>, Array1<f64>)> {
    check_k_ratio(k_ratio)?;
    let (logits, _) = pre_stream_traced(cas.scores(), k_ratio);
    let probs = softmax(&logits);
    Ok((logits, probs))
}

fn pre_stream_traced(cas: &Array2<f64>, k_ratio: f64) -> (Array1<f64>, Vec<Vec<usize>>) {
    let k = top_k_count(cas.nrows(), k_ratio);
    let mut selected = Vec::with_capacity(cas.ncols());
    let logits = Array1::from_iter(cas.axis_iter(Axis(1)).map(|col| {
        let idx = top_k_indices(col, k);
        let mean = idx.iter().map(|&t| col[t]).sum::<f64>() / k as f64;
        selected.push(idx);
        mean
    }));
    (logits, selected)
}

/// `W_a = sigmoid(conv1x1(cas))`, `W_b = 1 - W_a`, both `C x T`.
pub fn weight_transition(
    cas: &ClassActivationSequence,
    params: &TransitionParams,
) -> Result<AttentionWeights> {
    Ok(transition_traced(cas.scores(), params)?.1)
}

fn transition_traced(
    cas: &Array2<f64>,
    params: &TransitionParams,
) -> Result<(Array2<f64>, AttentionWeights)> {
    if cas.ncols() != params.categories() {
        return Err(EcmError::Shape(format!(
            "transition expects {} categories, CAS has {}",
            params.categories(),
            cas.ncols()
        )));
    }
    let (_, logits) = params.conv.forward(cas, cas.nrows())?;
    let gate = logits.mapv(sigmoid);
    let c = cas.ncols();
    let action = if params.conv.out_channels() == c {
        gate.t().to_owned()
    } else {
        let row = gate.column(0);
        Array2::from_shape_fn((c, cas.nrows()), |(_, t)| row[t])
    };
    let background = action.mapv(|w| 1.0 - w);
    Ok((logits, AttentionWeights { action, background }))
}

/// Fold-wise weighted average. Fold `j` holds snippets `t ≡ j (mod 3)`;
/// `out[c, :, j] = Σ w[c,t] f_t / max(Σ w[c,t], ε)` over that fold.
pub fn aggregate_features(seq: &Array2<f64>, weights: &Array2<f64>) -> Result<Array3<f64>> {
    let (t, d) = seq.dim();
    if t < FOLDS {
        return Err(EcmError::Shape(format!(
            "aggregation needs at least {FOLDS} snippets, got {t}"
        )));
    }
    if weights.ncols() != t {
        return Err(EcmError::Shape(format!(
            "weights cover {} snippets, features have {t}",
            weights.ncols()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(EcmError::InvalidArgument(format!(
            "aggregation weights must be finite and nonnegative, got {w}"
        )));
    }
    let c = weights.nrows();
    let mut out = Array3::zeros((c, d, FOLDS));
    for ci in 0..c {
        for j in 0..FOLDS {
            let mut acc = Array1::<f64>::zeros(d);
            let mut mass = 0.0;
            for ti in (j..t).step_by(FOLDS) {
                let w = weights[[ci, ti]];
                acc.scaled_add(w, &seq.row(ti));
                mass += w;
            }
            acc /= mass.max(FOLD_EPSILON);
            out.slice_mut(ndarray::s![ci, .., j]).assign(&acc);
        }
    }
    Ok(out)
}

fn fold_masses(weights: &Array2<f64>) -> Array2<f64> {
    let (c, t) = weights.dim();
    Array2::from_shape_fn((c, FOLDS), |(ci, j)| {
        (j..t).step_by(FOLDS).map(|ti| weights[[ci, ti]]).sum()
    })
}

// Rows `s * 3 + j` hold fold `j` of sequence `s`; action sequences first,
// then background.
fn stack_aggregates(agg: &AggregatedFeatures) -> Array2<f64> {
    let (c, d, _) = agg.action.dim();
    let mut x = Array2::zeros((2 * c * FOLDS, d));
    for (block, feats) in [&agg.action, &agg.background].into_iter().enumerate() {
        for ci in 0..c {
            for j in 0..FOLDS {
                x.row_mut((block * c + ci) * FOLDS + j)
                    .assign(&feats.slice(ndarray::s![ci, .., j]));
            }
        }
    }
    x
}

fn post_from_stacked(out: &Array2<f64>, c: usize) -> PostScores {
    let pool = |block: usize| {
        Array1::from_shape_fn(c, |ci| {
            (0..FOLDS)
                .map(|j| out[[(block * c + ci) * FOLDS + j, ci]])
                .sum::<f64>()
                / FOLDS as f64
        })
    };
    let logits_o = pool(0);
    let logits_tilde_o = pool(1);
    PostScores {
        s_o: logits_o.mapv(sigmoid),
        p_o: softmax(&logits_o),
        s_tilde_o: logits_tilde_o.mapv(sigmoid),
        logits_o,
        logits_tilde_o,
    }
}

/// Runs sub-classifier `c` on `f^a_c` and `f^b_c`: the classifier is applied
/// to each 3-step aggregate, channel `c` is averaged over the three steps.
pub fn post_stream_score(
    agg: &AggregatedFeatures,
    params: &ClassifierParams,
) -> Result<PostScores> {
    check_aggregates(agg, params)?;
    let x = stack_aggregates(agg);
    let trace = params.forward_traced(&x, FOLDS)?;
    Ok(post_from_stacked(&trace.logits, params.categories()))
}

fn check_aggregates(agg: &AggregatedFeatures, params: &ClassifierParams) -> Result<()> {
    let (c, _, len) = agg.action.dim();
    if len != FOLDS || agg.background.dim() != agg.action.dim() {
        return Err(EcmError::Shape(format!(
            "aggregated features must be C x D x {FOLDS}, got {:?} / {:?}",
            agg.action.dim(),
            agg.background.dim()
        )));
    }
    if c != params.categories() {
        return Err(EcmError::Shape(format!(
            "{c} aggregated categories for a {}-category classifier",
            params.categories()
        )));
    }
    Ok(())
}

/// Intermediate values kept for backpropagation.
pub(crate) struct ForwardTrace {
    pub output: ForwardOutput,
    pre: ClassifierTrace,
    topk: Vec<Vec<usize>>,
    transition_logits: Array2<f64>,
    masses_action: Array2<f64>,
    masses_background: Array2<f64>,
    post: ClassifierTrace,
}

/// Full forward pass of both streams.
pub fn ecm_forward(
    seq: &FeatureSequence,
    params: &EcmParams,
    k_ratio: f64,
) -> Result<ForwardOutput> {
    Ok(forward_traced(seq, params, k_ratio)?.output)
}

pub(crate) fn forward_traced(
    seq: &FeatureSequence,
    params: &EcmParams,
    k_ratio: f64,
) -> Result<ForwardTrace> {
    check_k_ratio(k_ratio)?;
    let x = seq.values();
    let pre = params.classifier.forward_traced(x, x.nrows())?;
    let cas = ClassActivationSequence::new(pre.logits.clone())?;
    let (logits_e, topk) = pre_stream_traced(cas.scores(), k_ratio);
    let s_e = softmax(&logits_e);

    let (transition_logits, weights) = transition_traced(cas.scores(), &params.transition)?;
    let agg = AggregatedFeatures {
        action: aggregate_features(x, &weights.action)?,
        background: aggregate_features(x, &weights.background)?,
    };
    let masses_action = fold_masses(&weights.action);
    let masses_background = fold_masses(&weights.background);

    let post_params = params.post();
    check_aggregates(&agg, post_params)?;
    let post = post_params.forward_traced(&stack_aggregates(&agg), FOLDS)?;
    let scores = post_from_stacked(&post.logits, params.categories());
    if scores
        .logits_o
        .iter()
        .chain(scores.logits_tilde_o.iter())
        .any(|v| !v.is_finite())
    {
        return Err(EcmError::NonFinite("post-stream logits".into()));
    }

    Ok(ForwardTrace {
        output: ForwardOutput {
            cas,
            weights,
            agg,
            logits_e,
            s_e,
            post: scores,
        },
        pre,
        topk,
        transition_logits,
        masses_action,
        masses_background,
        post,
    })
}

/// Which stream's classifier produces the CAS and video scores used for
/// localization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CasSource {
    /// Snippet logits of the pre-stream classifier; video scores `s_e`.
    Pre,
    /// Snippet logits of the post-stream classifier; video scores
    /// `softmax(logits_o)`.
    Post,
}

/// What localization and frame accuracy consume for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoPrediction {
    pub cas: ClassActivationSequence,
    pub video_scores: Array1<f64>,
}

pub fn predict(
    seq: &FeatureSequence,
    params: &EcmParams,
    k_ratio: f64,
    source: CasSource,
) -> Result<VideoPrediction> {
    match source {
        CasSource::Pre => {
            let cas = params.cas(seq)?;
            let (_, video_scores) = pre_stream_score(&cas, k_ratio)?;
            Ok(VideoPrediction { cas, video_scores })
        }
        CasSource::Post => {
            let out = ecm_forward(seq, params, k_ratio)?;
            Ok(VideoPrediction {
                cas: params.post_cas(seq)?,
                video_scores: out.post.p_o,
            })
        }
    }
}

/// Architecture hyperparameters not implied by the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: 512 }
    }
}

/// Loss gradients with respect to the three video-level logit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub logits_e: Array1<f64>,
    pub logits_o: Array1<f64>,
    pub logits_tilde_o: Array1<f64>,
}

/// Backpropagates head gradients through both streams, accumulating into
/// `grad` (shaped like `params`).
pub(crate) fn backward(
    seq: &FeatureSequence,
    params: &EcmParams,
    trace: &ForwardTrace,
    head: &HeadGrads,
    grad: &mut EcmParams,
) {
    let x = seq.values();
    let (t, d) = x.dim();
    let c = params.categories();
    let out = &trace.output;

    // Post stream: only channel c of sequence c carries gradient.
    let mut d_post = Array2::zeros(trace.post.logits.raw_dim());
    for ci in 0..c {
        for j in 0..FOLDS {
            d_post[[ci * FOLDS + j, ci]] = head.logits_o[ci] / FOLDS as f64;
            d_post[[(c + ci) * FOLDS + j, ci]] = head.logits_tilde_o[ci] / FOLDS as f64;
        }
    }
    let post_grad = grad
        .post_classifier
        .as_mut()
        .unwrap_or(&mut grad.classifier);
    let d_stacked = params
        .post()
        .backward(&trace.post, &d_post, post_grad, true)
        .expect("input gradient requested");

    // Aggregation: d agg -> d weights.
    let mut d_action = Array2::<f64>::zeros((c, t));
    for (block, (feats, masses)) in [
        (&out.agg.action, &trace.masses_action),
        (&out.agg.background, &trace.masses_background),
    ]
    .into_iter()
    .enumerate()
    {
        // Background weights are 1 - action weights.
        let sign = if block == 0 { 1.0 } else { -1.0 };
        for ci in 0..c {
            for j in 0..FOLDS {
                let g = d_stacked.row((block * c + ci) * FOLDS + j);
                let mass = masses[[ci, j]];
                let offset = if mass > FOLD_EPSILON {
                    feats.slice(ndarray::s![ci, .., j]).dot(&g)
                } else {
                    0.0
                };
                let denom = mass.max(FOLD_EPSILON);
                for ti in (j..t).step_by(FOLDS) {
                    d_action[[ci, ti]] += sign * (x.row(ti).dot(&g) - offset) / denom;
                }
            }
        }
    }
    debug_assert_eq!(d, out.agg.action.dim().1);

    // Transition: W_a = sigmoid(U)^T.
    let gate = &out.weights.action;
    let out_channels = params.transition.conv.out_channels();
    let mut d_logits = Array2::<f64>::zeros((t, out_channels));
    for ti in 0..t {
        if out_channels == c {
            for ci in 0..c {
                let w = gate[[ci, ti]];
                d_logits[[ti, ci]] = d_action[[ci, ti]] * w * (1.0 - w);
            }
        } else {
            let w = gate[[0, ti]];
            let total: f64 = (0..c).map(|ci| d_action[[ci, ti]]).sum();
            d_logits[[ti, 0]] = total * w * (1.0 - w);
        }
    }
    debug_assert_eq!(trace.transition_logits.dim(), d_logits.dim());
    let mut d_cas = params
        .transition
        .conv
        .backward(
            out.cas.scores(),
            &d_logits,
            t,
            &mut grad.transition.conv,
            true,
        )
        .expect("input gradient requested");

    // Pre stream top-k mean.
    for (ci, idx) in trace.topk.iter().enumerate() {
        let share = head.logits_e[ci] / idx.len() as f64;
        for &ti in idx {
            d_cas[[ti, ci]] += share;
        }
    }
    params
        .classifier
        .backward(&trace.pre, &d_cas, &mut grad.classifier, false);
}
