use ndarray::Array2;
use rand::Rng;

use super::conv::Conv1d;
use crate::error::{EcmError, Result};

/// The shared snippet classifier: conv(k=3) -> ReLU -> conv(k=3) -> ReLU ->
/// conv(k=1). Output channel `c` of the last layer is the sub-classifier for
/// category `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub layer1: Conv1d,
    pub layer2: Conv1d,
    pub layer3: Conv1d,
}

pub(crate) struct ClassifierTrace {
    cols1: Array2<f64>,
    pre1: Array2<f64>,
    cols2: Array2<f64>,
    pre2: Array2<f64>,
    cols3: Array2<f64>,
    pub logits: Array2<f64>,
    seg_len: usize,
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

// Subgradient 0 at the kink.
fn relu_backward(pre: &Array2<f64>, grad: &mut Array2<f64>) {
    ndarray::Zip::from(grad).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
}

impl ClassifierParams {
    pub const KERNELS: [usize; 3] = [3, 3, 1];

    pub fn zeros(feature_dim: usize, hidden: usize, categories: usize) -> Self {
        Self {
            layer1: Conv1d::zeros(3, feature_dim, hidden),
            layer2: Conv1d::zeros(3, hidden, hidden),
            layer3: Conv1d::zeros(1, hidden, categories),
        }
    }

    pub fn init(feature_dim: usize, hidden: usize, categories: usize, rng: &mut impl Rng) -> Self {
        Self {
            layer1: Conv1d::init(3, feature_dim, hidden, rng),
            layer2: Conv1d::init(3, hidden, hidden, rng),
            layer3: Conv1d::init(1, hidden, categories, rng),
        }
    }

    pub fn from_layers(layer1: Conv1d, layer2: Conv1d, layer3: Conv1d) -> Result<Self> {
        let kernels = [layer1.kernel(), layer2.kernel(), layer3.kernel()];
        if kernels != Self::KERNELS {
            return Err(EcmError::Shape(format!(
                "classifier kernels must be {:?}, got {kernels:?}",
                Self::KERNELS
            )));
        }
        if layer1.out_channels() != layer2.in_channels()
            || layer2.out_channels() != layer3.in_channels()
        {
            return Err(EcmError::Shape(
                "classifier layer widths do not chain".into(),
            ));
        }
        Ok(Self {
            layer1,
            layer2,
            layer3,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layer1: self.layer1.zeros_like(),
            layer2: self.layer2.zeros_like(),
            layer3: self.layer3.zeros_like(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.layer1.in_channels()
    }

    pub fn hidden(&self) -> usize {
        self.layer1.out_channels()
    }

    pub fn categories(&self) -> usize {
        self.layer3.out_channels()
    }

    /// Per-snippet logits for a `T' x D` sequence, `T' x C`.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_traced(x, x.nrows())?.logits)
    }

    /// Runs a stack of equal-length sequences (`(n * seg_len) x D`).
    pub(crate) fn forward_traced(
        &self,
        x: &Array2<f64>,
        seg_len: usize,
    ) -> Result<ClassifierTrace> {
        if x.ncols() != self.feature_dim() {
            return Err(EcmError::Shape(format!(
                "classifier expects feature dim {}, got {}",
                self.feature_dim(),
                x.ncols()
            )));
        }
        let (cols1, pre1) = self.layer1.forward(x, seg_len)?;
        let (cols2, pre2) = self.layer2.forward(&relu(&pre1), seg_len)?;
        let (cols3, logits) = self.layer3.forward(&relu(&pre2), seg_len)?;
        Ok(ClassifierTrace {
            cols1,
            pre1,
            cols2,
            pre2,
            cols3,
            logits,
            seg_len,
        })
    }

    /// Accumulates gradients for `d_logits` into `grad`; returns the input
    /// gradient if requested.
    pub(crate) fn backward(
        &self,
        trace: &ClassifierTrace,
        d_logits: &Array2<f64>,
        grad: &mut ClassifierParams,
        want_input: bool,
    ) -> Option<Array2<f64>> {
        let len = trace.seg_len;
        let mut d2 = self
            .layer3
            .backward(&trace.cols3, d_logits, len, &mut grad.layer3, true)
            .expect("input gradient requested");
        relu_backward(&trace.pre2, &mut d2);
        let mut d1 = self
            .layer2
            .backward(&trace.cols2, &d2, len, &mut grad.layer2, true)
            .expect("input gradient requested");
        relu_backward(&trace.pre1, &mut d1);
        self.layer1
            .backward(&trace.cols1, &d1, len, &mut grad.layer1, want_input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_zero_logits() {
        let p = ClassifierParams::zeros(4, 6, 3);
        let y = p.forward(&Array2::zeros((7, 4))).unwrap();
        assert_eq!(y, Array2::<f64>::zeros((7, 3)));
    }

    #[test]
    fn output_length_matches_input_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ClassifierParams::init(5, 4, 3, &mut rng);
        for t in [1, 3, 9, 100] {
            let x = Array2::from_shape_fn((t, 5), |_| rng.random_range(-1.0..1.0));
            assert_eq!(p.forward(&x).unwrap().dim(), (t, 3));
        }
    }

    #[test]
    fn identity_first_layers_reduce_to_pointwise_linear_map() {
        // Layers 1 and 2 pass nonnegative input through the centre tap, so the
        // classifier collapses to x W3 + b3.
        let (d, c) = (4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = ClassifierParams::zeros(d, d, c);
        for i in 0..d {
            p.layer1.weight[[d + i, i]] = 1.0;
            p.layer2.weight[[d + i, i]] = 1.0;
        }
        p.layer3
            .weight
            .mapv_inplace(|_| rng.random_range(-1.0..1.0));
        p.layer3.bias.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let x = Array2::from_shape_fn((10, d), |_| rng.random_range(0.0..2.0));
        let direct = x.dot(&p.layer3.weight) + &p.layer3.bias;
        let got = p.forward(&x).unwrap();
        assert!((got - direct).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn rejects_wrong_kernels_and_dims() {
        assert!(ClassifierParams::from_layers(
            Conv1d::zeros(1, 2, 3),
            Conv1d::zeros(3, 3, 3),
            Conv1d::zeros(1, 3, 2)
        )
        .is_err());
        let p = ClassifierParams::zeros(4, 2, 2);
        assert!(p.forward(&Array2::zeros((3, 5))).is_err());
    }
}
