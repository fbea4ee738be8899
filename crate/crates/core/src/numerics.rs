//! Dense arrays and the differentiable kernels every layer is built from.
//!
//! Each forward kernel has a matching hand-written backward pass. Frame
//! sequences are stored time-major (`T × C`), one row per frame.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// `rows × cols` matrix; for frame sequences rows are frames.
pub type Matrix = Array2<f64>;
/// `batch × frames × channels`.
pub type Tensor3 = Array3<f64>;

/// Lower bound applied to variances before taking a square root.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// Weights and bias of a dilated 1-D convolution over time.
///
/// `weights` is laid out `K × C_in × C_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weights: Array3<f64>,
    pub bias: Array1<f64>,
    pub dilation: usize,
}

impl ConvParams {
    pub fn new(weights: Array3<f64>, bias: Array1<f64>, dilation: usize) -> Result<Self> {
        let (k, _, c_out) = weights.dim();
        if k == 0 {
            return Err(Error::Shape("kernel width must be at least 1".into()));
        }
        if dilation == 0 {
            return Err(Error::Shape("dilation must be at least 1".into()));
        }
        if bias.len() != c_out {
            return Err(Error::Shape(format!(
                "bias has {} entries but the filter has {} output channels",
                bias.len(),
                c_out
            )));
        }
        Ok(Self {
            weights,
            bias,
            dilation,
        })
    }

    pub fn zeros(kernel: usize, c_in: usize, c_out: usize, dilation: usize) -> Self {
        Self {
            weights: Array3::zeros((kernel, c_in, c_out)),
            bias: Array1::zeros(c_out),
            dilation,
        }
    }

    /// Per-frame affine map `x ↦ x·W + b`, stored as a width-1 convolution.
    pub fn affine(weights: Matrix, bias: Array1<f64>) -> Result<Self> {
        let (c_in, c_out) = weights.dim();
        let weights = weights
            .into_shape_with_order((1, c_in, c_out))
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(weights, bias, 1)
    }

    pub fn kernel(&self) -> usize {
        self.weights.dim().0
    }

    pub fn c_in(&self) -> usize {
        self.weights.dim().1
    }

    pub fn c_out(&self) -> usize {
        self.weights.dim().2
    }

    /// Frames lost to the receptive field, `(K − 1)·d`.
    pub fn shrink(&self) -> usize {
        (self.kernel() - 1) * self.dilation
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn output_frames(&self, frames: usize) -> Result<usize> {
        if frames <= self.shrink() {
            return Err(Error::ReceptiveField {
                frames,
                minimum: self.shrink() + 1,
            });
        }
        Ok(frames - self.shrink())
    }

    pub fn same_shape(&self, other: &ConvParams) -> bool {
        self.weights.dim() == other.weights.dim() && self.dilation == other.dilation
    }
}

/// Gradients of [`conv1d`] with respect to its input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub d_input: Matrix,
    pub d_weights: Array3<f64>,
    pub d_bias: Array1<f64>,
}

fn check_conv_input(input: &ArrayView2<f64>, p: &ConvParams) -> Result<usize> {
    if input.ncols() != p.c_in() {
        return Err(Error::Shape(format!(
            "convolution expects {} input channels, got {}",
            p.c_in(),
            input.ncols()
        )));
    }
    p.output_frames(input.nrows())
}

/// Valid (unpadded) dilated convolution along time.
///
/// `out[t, o] = Σ_k Σ_i input[t + k·d, i] · W[k, i, o] + b[o]`, with
/// `T' = T − (K − 1)·d` output frames.
pub fn conv1d(input: ArrayView2<f64>, p: &ConvParams) -> Result<Matrix> {
    let t_out = check_conv_input(&input, p)?;
    let mut out = Array2::zeros((t_out, p.c_out()));
    out += &p.bias;
    for k in 0..p.kernel() {
        let start = k * p.dilation;
        let window = input.slice(s![start..start + t_out, ..]);
        general_mat_mul(1.0, &window, &p.weights.index_axis(Axis(0), k), 1.0, &mut out);
    }
    Ok(out)
}

/// Exact gradients of [`conv1d`] given the upstream gradient of its output.
pub fn conv1d_backward(
    input: ArrayView2<f64>,
    p: &ConvParams,
    upstream: ArrayView2<f64>,
) -> Result<ConvGrads> {
    let t_out = check_conv_input(&input, p)?;
    if upstream.dim() != (t_out, p.c_out()) {
        return Err(Error::Shape(format!(
            "upstream gradient is {:?}, convolution output is {:?}",
            upstream.dim(),
            (t_out, p.c_out())
        )));
    }
    let mut d_input = Array2::zeros(input.raw_dim());
    let mut d_weights = Array3::zeros(p.weights.raw_dim());
    for k in 0..p.kernel() {
        let start = k * p.dilation;
        let window = input.slice(s![start..start + t_out, ..]);
        let mut dw = d_weights.index_axis_mut(Axis(0), k);
        general_mat_mul(1.0, &window.t(), &upstream, 0.0, &mut dw);
        let mut dx = d_input.slice_mut(s![start..start + t_out, ..]);
        general_mat_mul(
            1.0,
            &upstream,
            &p.weights.index_axis(Axis(0), k).t(),
            1.0,
            &mut dx,
        );
    }
    let d_bias = upstream.sum_axis(Axis(0));
    Ok(ConvGrads {
        d_input,
        d_weights,
        d_bias,
    })
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: ArrayView1<f64>) -> Result<Array1<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("softmax input is not finite".into()));
    }
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out = logits.mapv(|v| (v - max).exp());
    let total = out.sum();
    out /= total;
    Ok(out)
}

/// Gradient through softmax: `p ⊙ (g − ⟨p, g⟩)`.
pub fn softmax_backward(probs: ArrayView1<f64>, upstream: ArrayView1<f64>) -> Array1<f64> {
    let dot = probs.dot(&upstream);
    &probs * &upstream.mapv(|g| g - dot)
}

/// Weighted first and second order statistics over frames.
#[derive(Clone, Debug)]
pub struct WeightedStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    /// Channels whose variance hit [`VARIANCE_FLOOR`].
    pub floored: Vec<bool>,
}

/// `mean = Σ_t α_t e_t`, `std = √max(Σ_t α_t e_t² − mean², floor)`.
///
/// Weights must be nonnegative and sum to one.
pub fn weighted_stats(values: ArrayView2<f64>, weights: ArrayView1<f64>) -> Result<WeightedStats> {
    if values.nrows() == 0 {
        return Err(Error::InvalidArgument("statistics over zero frames".into()));
    }
    if weights.len() != values.nrows() {
        return Err(Error::Shape(format!(
            "{} weights for {} frames",
            weights.len(),
            values.nrows()
        )));
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidArgument("frame weights must be nonnegative".into()));
    }
    let total = weights.sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "frame weights sum to {total}, expected 1"
        )));
    }
    Ok(weighted_stats_unchecked(values, weights))
}

pub(crate) fn weighted_stats_unchecked(
    values: ArrayView2<f64>,
    weights: ArrayView1<f64>,
) -> WeightedStats {
    let mean = weights.dot(&values);
    let second = weights.dot(&values.mapv(|v| v * v));
    let var = second - mean.mapv(|m| m * m);
    let floored: Vec<bool> = var.iter().map(|&v| !(v > VARIANCE_FLOOR)).collect();
    let std = var.mapv(|v| v.max(VARIANCE_FLOOR).sqrt());
    WeightedStats { mean, std, floored }
}

/// Gradients of [`weighted_stats`] with respect to values and weights.
///
/// Channels clamped at the variance floor pass no gradient through `std`.
pub fn weighted_stats_backward(
    values: ArrayView2<f64>,
    weights: ArrayView1<f64>,
    stats: &WeightedStats,
    d_mean: ArrayView1<f64>,
    d_std: ArrayView1<f64>,
) -> (Matrix, Array1<f64>) {
    let d_var: Array1<f64> = stats
        .std
        .iter()
        .zip(d_std.iter())
        .zip(stats.floored.iter())
        .map(|((&s, &g), &floored)| if floored { 0.0 } else { g / (2.0 * s) })
        .collect();
    let mut d_values = Array2::zeros(values.raw_dim());
    let mut d_weights = Array1::zeros(weights.len());
    for (t, row) in values.outer_iter().enumerate() {
        let alpha = weights[t];
        let mut dw = 0.0;
        let mut dv_row = d_values.row_mut(t);
        for c in 0..row.len() {
            let e = row[c];
            let centered = e - stats.mean[c];
            dv_row[c] = alpha * (d_mean[c] + 2.0 * d_var[c] * centered);
            dw += d_mean[c] * e + d_var[c] * (e * e - 2.0 * stats.mean[c] * e);
        }
        d_weights[t] = dw;
    }
    (d_values, d_weights)
}

pub fn relu(x: &Matrix) -> Matrix {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given its pre-activation input.
pub fn relu_backward(pre: &Matrix, upstream: &Matrix) -> Matrix {
    let mut out = upstream.clone();
    out.zip_mut_with(pre, |g, &x| {
        if x <= 0.0 {
            *g = 0.0
        }
    });
    out
}

/// Gradient through tanh given its output.
pub fn tanh_backward(out: &Matrix, upstream: &Matrix) -> Matrix {
    let mut g = upstream.clone();
    g.zip_mut_with(out, |g, &y| *g *= 1.0 - y * y);
    g
}

/// Mean softmax cross-entropy over rows, its gradient with respect to the
/// logits, and the number of rows whose arg-max equals the label.
pub fn softmax_cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Matrix, usize)> {
    let (rows, classes) = logits.dim();
    if rows != labels.len() || rows == 0 {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            rows,
            labels.len()
        )));
    }
    let mut grad = Array2::zeros((rows, classes));
    let mut loss = 0.0;
    let mut correct = 0;
    for (r, (row, &label)) in logits.outer_iter().zip(labels).enumerate() {
        if label >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} outside {classes} classes"
            )));
        }
        let probs = softmax(row)?;
        loss -= probs[label].max(f64::MIN_POSITIVE).ln();
        let argmax = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        if argmax == label {
            correct += 1;
        }
        let mut g = grad.row_mut(r);
        g.assign(&probs);
        g[label] -= 1.0;
    }
    grad /= rows as f64;
    Ok((loss / rows as f64, grad, correct))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_grad_close, numeric_grad, random_matrix};
    use ndarray::{array, Array};

    fn scalar_conv(w: &[f64], d: usize) -> ConvParams {
        let k = w.len();
        let weights = Array::from_shape_vec((k, 1, 1), w.to_vec()).unwrap();
        ConvParams::new(weights, array![0.0], d).unwrap()
    }

    #[test]
    fn identity_conv_passes_input_through() {
        let x = random_matrix(7, 3, 1);
        let mut w = Array3::zeros((1, 3, 3));
        for i in 0..3 {
            w[[0, i, i]] = 1.0;
        }
        let p = ConvParams::new(w, Array1::zeros(3), 1).unwrap();
        assert_eq!(conv1d(x.view(), &p).unwrap(), x);
    }

    #[test]
    fn conv_direct_sums() {
        let x = array![[1.0], [2.0], [3.0]];
        let y = conv1d(x.view(), &scalar_conv(&[1.0, 1.0], 1)).unwrap();
        assert_eq!(y, array![[3.0], [5.0]]);

        let x = array![[1.0], [2.0], [3.0], [4.0], [5.0]];
        let y = conv1d(x.view(), &scalar_conv(&[1.0, 1.0], 2)).unwrap();
        assert_eq!(y, array![[4.0], [6.0], [8.0]]);
    }

    #[test]
    fn conv_rejects_short_input_and_bad_channels() {
        let p = scalar_conv(&[1.0, 1.0, 1.0], 3);
        let err = conv1d(Array2::ones((6, 1)).view(), &p).unwrap_err();
        assert!(matches!(err, Error::ReceptiveField { frames: 6, minimum: 7 }));
        assert!(conv1d(Array2::zeros((10, 2)).view(), &p).is_err());
        assert!(ConvParams::new(Array3::zeros((2, 1, 3)), Array1::zeros(2), 1).is_err());
        assert!(ConvParams::new(Array3::zeros((2, 1, 1)), Array1::zeros(1), 0).is_err());
    }

    #[test]
    fn unit_kernel_conv_is_per_frame_affine() {
        let x = random_matrix(5, 4, 2);
        let w = random_matrix(4, 3, 3);
        let b = array![0.1, -0.2, 0.3];
        let p = ConvParams::affine(w.clone(), b.clone()).unwrap();
        let expected = x.dot(&w) + &b;
        let got = conv1d(x.view(), &p).unwrap();
        for (a, e) in got.iter().zip(expected.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_zero_upstream_and_identity() {
        let x = random_matrix(6, 2, 4);
        let mut w = Array3::zeros((1, 2, 2));
        w[[0, 0, 0]] = 1.0;
        w[[0, 1, 1]] = 1.0;
        let p = ConvParams::new(w, Array1::zeros(2), 1).unwrap();
        let g = conv1d_backward(x.view(), &p, Array2::zeros((6, 2)).view()).unwrap();
        assert!(g.d_input.iter().chain(g.d_weights.iter()).chain(g.d_bias.iter()).all(|&v| v == 0.0));

        let up = random_matrix(6, 2, 5);
        let g = conv1d_backward(x.view(), &p, up.view()).unwrap();
        assert_eq!(g.d_input, up);
        assert!(conv1d_backward(x.view(), &p, Array2::zeros((5, 2)).view()).is_err());
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x = random_matrix(4, 3, 6);
        let p = ConvParams::new(
            Array3::from_shape_vec((2, 3, 2), random_matrix(6, 2, 7).into_raw_vec_and_offset().0)
                .unwrap(),
            array![0.3, -0.1],
            1,
        )
        .unwrap();
        let proj = random_matrix(3, 2, 8);
        let loss = |x: &Matrix, p: &ConvParams| (conv1d(x.view(), p).unwrap() * &proj).sum();
        let g = conv1d_backward(x.view(), &p, proj.view()).unwrap();

        let num_x = numeric_grad(x.as_slice().unwrap(), |v| {
            loss(&Array2::from_shape_vec(x.raw_dim(), v.to_vec()).unwrap(), &p)
        });
        assert_grad_close(g.d_input.as_slice().unwrap(), &num_x, 1e-6);
        let num_w = numeric_grad(p.weights.as_slice().unwrap(), |v| {
            let mut q = p.clone();
            q.weights.as_slice_mut().unwrap().copy_from_slice(v);
            loss(&x, &q)
        });
        assert_grad_close(g.d_weights.as_slice().unwrap(), &num_w, 1e-6);
        let num_b = numeric_grad(p.bias.as_slice().unwrap(), |v| {
            let mut q = p.clone();
            q.bias.as_slice_mut().unwrap().copy_from_slice(v);
            loss(&x, &q)
        });
        assert_grad_close(g.d_bias.as_slice().unwrap(), &num_b, 1e-6);
    }

    #[test]
    fn dilated_affine_backward_matches_finite_differences() {
        let x = random_matrix(9, 2, 9);
        let w = Array3::from_shape_vec((3, 2, 3), random_matrix(6, 3, 10).into_raw_vec_and_offset().0)
            .unwrap();
        let p = ConvParams::new(w, array![0.0, 0.5, -0.5], 2).unwrap();
        let proj = random_matrix(5, 3, 11);
        let g = conv1d_backward(x.view(), &p, proj.view()).unwrap();
        let num_x = numeric_grad(x.as_slice().unwrap(), |v| {
            let x = Array2::from_shape_vec(x.raw_dim(), v.to_vec()).unwrap();
            (conv1d(x.view(), &p).unwrap() * &proj).sum()
        });
        assert_grad_close(g.d_input.as_slice().unwrap(), &num_x, 1e-6);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(array![0.0, 0.0, 0.0].view()).unwrap();
        for v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(array![0.0, 3f64.ln()].view()).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let a = softmax(array![1000.0, 0.0].view()).unwrap();
        let b = softmax(array![0.0, -1000.0].view()).unwrap();
        assert_eq!(a, b);
        assert!((a[0] - 1.0).abs() < 1e-15 && a[1] < 1e-300);
        assert!(softmax(Array1::<f64>::zeros(0).view()).is_err());
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let logits = array![0.3, -1.2, 0.8, 0.05];
        let proj = array![1.0, -2.0, 0.5, 3.0];
        let p = softmax(logits.view()).unwrap();
        let g = softmax_backward(p.view(), proj.view());
        let num = numeric_grad(logits.as_slice().unwrap(), |v| {
            softmax(ArrayView1::from(v)).unwrap().dot(&proj)
        });
        assert_grad_close(g.as_slice().unwrap(), &num, 1e-6);
    }

    #[test]
    fn weighted_stats_examples() {
        let st = weighted_stats(array![[2.0, -1.0], [2.0, -1.0]].view(), array![0.5, 0.5].view()).unwrap();
        assert_eq!(st.mean, array![2.0, -1.0]);
        assert_eq!(st.std, array![VARIANCE_FLOOR.sqrt(), VARIANCE_FLOOR.sqrt()]);

        let st = weighted_stats(array![[0.0], [2.0]].view(), array![0.5, 0.5].view()).unwrap();
        assert!((st.mean[0] - 1.0).abs() < 1e-15 && (st.std[0] - 1.0).abs() < 1e-15);

        let values = random_matrix(4, 3, 12);
        let st = weighted_stats(values.view(), array![0.0, 0.0, 1.0, 0.0].view()).unwrap();
        assert_eq!(st.mean, values.row(2));
        assert!(st.std.iter().all(|&s| s == VARIANCE_FLOOR.sqrt()));

        assert!(weighted_stats(values.view(), array![0.5, 0.5, 0.5, -0.5].view()).is_err());
        assert!(weighted_stats(values.view(), array![0.5, 0.5, 0.5, 0.5].view()).is_err());
    }

    #[test]
    fn weighted_stats_backward_matches_finite_differences() {
        let values = random_matrix(5, 3, 13);
        let logits = array![0.2, -0.4, 1.1, 0.0, 0.6];
        let pm = array![0.7, -1.3, 0.4];
        let ps = array![1.5, 0.2, -0.8];
        let loss = |v: &Matrix, l: ArrayView1<f64>| {
            let w = softmax(l).unwrap();
            let st = weighted_stats(v.view(), w.view()).unwrap();
            st.mean.dot(&pm) + st.std.dot(&ps)
        };
        let w = softmax(logits.view()).unwrap();
        let st = weighted_stats(values.view(), w.view()).unwrap();
        let (dv, dw) = weighted_stats_backward(values.view(), w.view(), &st, pm.view(), ps.view());
        let dl = softmax_backward(w.view(), dw.view());

        let num_v = numeric_grad(values.as_slice().unwrap(), |v| {
            loss(&Array2::from_shape_vec(values.raw_dim(), v.to_vec()).unwrap(), logits.view())
        });
        assert_grad_close(dv.as_slice().unwrap(), &num_v, 1e-6);
        let num_l = numeric_grad(logits.as_slice().unwrap(), |v| loss(&values, ArrayView1::from(v)));
        assert_grad_close(dl.as_slice().unwrap(), &num_l, 1e-6);
    }

    #[test]
    fn floored_variance_has_zero_std_gradient() {
        let values = array![[1.0, 0.0], [1.0, 2.0]];
        let w = array![0.5, 0.5];
        let st = weighted_stats(values.view(), w.view()).unwrap();
        assert_eq!(st.floored, vec![true, false]);
        let (dv, _) = weighted_stats_backward(values.view(), w.view(), &st, array![0.0, 0.0].view(), array![1.0, 1.0].view());
        assert!(dv.column(0).iter().all(|&g| g == 0.0 && g.is_finite()));
        assert!(dv.column(1).iter().all(|g| g.is_finite()));
    }

    #[test]
    fn elementwise_backward_matches_finite_differences() {
        let x = random_matrix(3, 4, 14);
        let proj = random_matrix(3, 4, 15);
        let y = x.mapv(f64::tanh);
        let g = tanh_backward(&y, &proj);
        let num = numeric_grad(x.as_slice().unwrap(), |v| {
            ArrayView1::from(v).mapv(f64::tanh).dot(&ArrayView1::from(proj.as_slice().unwrap()))
        });
        assert_grad_close(g.as_slice().unwrap(), &num, 1e-6);

        // keep ReLU inputs away from the kink
        let x = x.mapv(|v| if v.abs() < 0.05 { 0.3 } else { v });
        let g = relu_backward(&x, &proj);
        let num = numeric_grad(x.as_slice().unwrap(), |v| {
            ArrayView1::from(v).mapv(|a| a.max(0.0)).dot(&ArrayView1::from(proj.as_slice().unwrap()))
        });
        assert_grad_close(g.as_slice().unwrap(), &num, 1e-6);
    }

    #[test]
    fn cross_entropy_gradient_and_accuracy() {
        let logits = random_matrix(3, 4, 16);
        let labels = [1, 3, 0];
        let (_, g, _) = softmax_cross_entropy(logits.view(), &labels).unwrap();
        let num = numeric_grad(logits.as_slice().unwrap(), |v| {
            let l = Array2::from_shape_vec((3, 4), v.to_vec()).unwrap();
            softmax_cross_entropy(l.view(), &labels).unwrap().0
        });
        assert_grad_close(g.as_slice().unwrap(), &num, 1e-6);

        let (loss, _, correct) =
            softmax_cross_entropy(array![[5.0, 0.0], [0.0, 0.0]].view(), &[0, 1]).unwrap();
        assert_eq!(correct, 1);
        assert!(loss > 0.0);
        assert!(softmax_cross_entropy(logits.view(), &[0, 9, 0]).is_err());
    }
}
