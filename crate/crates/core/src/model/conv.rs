use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::error::{EcmError, Result};

/// Temporal convolution with an odd kernel and zero padding `kernel / 2`, so
/// output length equals input length.
///
/// Inputs are stacks of equal-length sequences laid out as `(n * len) x in`;
/// padding is applied at every sequence boundary, never across sequences.
/// The weight is stored im2col-style as `(kernel * in) x out`, row
/// `k * in + i` holding tap `k` of input channel `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    kernel: usize,
    in_channels: usize,
    out_channels: usize,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv1d {
    pub fn zeros(kernel: usize, in_channels: usize, out_channels: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Self {
            kernel,
            in_channels,
            out_channels,
            weight: Array2::zeros((kernel * in_channels, out_channels)),
            bias: Array1::zeros(out_channels),
        }
    }

    /// Fan-in scaled uniform weights, zero bias.
    pub fn init(
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut conv = Self::zeros(kernel, in_channels, out_channels);
        let bound = 1.0 / ((kernel * in_channels) as f64).sqrt();
        conv.weight
            .mapv_inplace(|_| rng.random_range(-bound..bound));
        conv
    }

    pub fn from_parts(kernel: usize, weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if kernel.is_multiple_of(2)
            || !weight.nrows().is_multiple_of(kernel)
            || weight.ncols() != bias.len()
        {
            return Err(EcmError::Shape(format!(
                "conv parts: kernel {kernel}, weight {:?}, bias {}",
                weight.dim(),
                bias.len()
            )));
        }
        Ok(Self {
            kernel,
            in_channels: weight.nrows() / kernel,
            out_channels: weight.ncols(),
            weight,
            bias,
        })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// A zeroed conv of the same shape, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.kernel, self.in_channels, self.out_channels)
    }

    fn check_input(&self, x: &Array2<f64>, seg_len: usize) -> Result<()> {
        if x.ncols() != self.in_channels {
            return Err(EcmError::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.ncols()
            )));
        }
        if seg_len == 0 || !x.nrows().is_multiple_of(seg_len) {
            return Err(EcmError::Shape(format!(
                "{} rows is not a whole number of length-{seg_len} sequences",
                x.nrows()
            )));
        }
        Ok(())
    }

    /// Unfolds the padded receptive field of every row.
    pub fn im2col(&self, x: &Array2<f64>, seg_len: usize) -> Array2<f64> {
        if self.kernel == 1 {
            return x.clone();
        }
        let rows = x.nrows();
        let pad = (self.kernel / 2) as isize;
        let mut cols = Array2::zeros((rows, self.kernel * self.in_channels));
        for r in 0..rows {
            let pos = (r % seg_len) as isize;
            for k in 0..self.kernel {
                let src = pos + k as isize - pad;
                if src < 0 || src >= seg_len as isize {
                    continue;
                }
                let src_row = (r as isize + k as isize - pad) as usize;
                cols.slice_mut(s![r, k * self.in_channels..(k + 1) * self.in_channels])
                    .assign(&x.row(src_row));
            }
        }
        cols
    }

    /// Returns `(cols, output)`; `cols` is the im2col buffer needed by [`Self::backward`].
    pub fn forward(&self, x: &Array2<f64>, seg_len: usize) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_input(x, seg_len)?;
        let cols = self.im2col(x, seg_len);
        let mut out = cols.dot(&self.weight);
        out += &self.bias;
        Ok((cols, out))
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `want_input` is set.
    pub fn backward(
        &self,
        cols: &Array2<f64>,
        d_out: &Array2<f64>,
        seg_len: usize,
        grad: &mut Conv1d,
        want_input: bool,
    ) -> Option<Array2<f64>> {
        grad.weight += &cols.t().dot(d_out);
        grad.bias += &d_out.sum_axis(Axis(0));
        if !want_input {
            return None;
        }
        let d_cols = d_out.dot(&self.weight.t());
        if self.kernel == 1 {
            return Some(d_cols);
        }
        let rows = d_out.nrows();
        let pad = (self.kernel / 2) as isize;
        let mut dx = Array2::zeros((rows, self.in_channels));
        for r in 0..rows {
            let pos = (r % seg_len) as isize;
            for k in 0..self.kernel {
                let src = pos + k as isize - pad;
                if src < 0 || src >= seg_len as isize {
                    continue;
                }
                let src_row = (r as isize + k as isize - pad) as usize;
                let mut target = dx.row_mut(src_row);
                target += &d_cols.slice(s![r, k * self.in_channels..(k + 1) * self.in_channels]);
            }
        }
        Some(dx)
    }
}
