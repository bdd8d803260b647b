//! Dense `[batch, channels, time]` arrays and the 1-D convolution kernels
//! shared by training (autograd), batch inference and streaming inference.
//!
//! Convolution convention: `out[t] = Σ_k w[k] · x[t·stride + shift − k·dilation]`,
//! with `x` read as zero outside `[0, len)`. Tap `k = 0` is the most recent
//! sample. A causal layer uses `shift = stride − 1` so output `t` sees input up
//! to the last sample of its stride block and nothing after it.

use std::fmt;

/// Three-dimensional `f64` array stored row-major as `[d0][d1][d2]`.
///
/// Activations use `[batch, channels, time]`; conv weights use
/// `[out_channels, in_channels / groups, kernel]`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl Tensor {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 3], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec([1, 1, 1], vec![value])
    }

    /// A single-channel signal `[1, 1, len]`.
    pub fn signal(samples: &[f64]) -> Self {
        Self::from_vec([1, 1, samples.len()], samples.to_vec())
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.shape[2]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn row(&self, b: usize, c: usize) -> &[f64] {
        let t = self.shape[2];
        let start = (b * self.shape[1] + c) * t;
        &self.data[start..start + t]
    }

    pub fn row_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let t = self.shape[2];
        let start = (b * self.shape[1] + c) * t;
        &mut self.data[start..start + t]
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn reshape(self, shape: [usize; 3]) -> Self {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Slice along time: `[.., .., start..end]`.
    pub fn narrow_time(&self, start: usize, end: usize) -> Tensor {
        let [b, c, _] = self.shape;
        let mut out = Tensor::zeros([b, c, end - start]);
        for bi in 0..b {
            for ci in 0..c {
                out.row_mut(bi, ci).copy_from_slice(&self.row(bi, ci)[start..end]);
            }
        }
        out
    }

    /// Concatenate along time.
    pub fn cat_time(parts: &[&Tensor]) -> Tensor {
        let first = parts.first().expect("cat_time of nothing");
        let [b, c, _] = first.shape;
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let mut out = Tensor::zeros([b, c, total]);
        for bi in 0..b {
            for ci in 0..c {
                let row = out.row_mut(bi, ci);
                let mut at = 0;
                for p in parts {
                    assert_eq!([p.shape[0], p.shape[1]], [b, c], "cat_time shape mismatch");
                    row[at..at + p.len()].copy_from_slice(p.row(bi, ci));
                    at += p.len();
                }
            }
        }
        out
    }

    /// Stack single-batch tensors along the batch axis.
    pub fn stack_batch(parts: &[Tensor]) -> Tensor {
        let first = parts.first().expect("stack_batch of nothing");
        let [_, c, t] = first.shape;
        let mut data = Vec::with_capacity(parts.len() * c * t);
        for p in parts {
            assert_eq!([p.shape[1], p.shape[2]], [c, t], "stack_batch shape mismatch");
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec([data.len() / (c * t).max(1), c, t], data)
    }

    pub fn batch_item(&self, b: usize) -> Tensor {
        let [_, c, t] = self.shape;
        Tensor::from_vec([1, c, t], self.data[b * c * t..(b + 1) * c * t].to_vec())
    }
}

/// Geometry of a 1-D (transposed) convolution under the convention in the
/// module docs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub shift: isize,
    pub out_len: usize,
}

impl ConvGeometry {
    /// One-side (left) padded convolution: output `t` depends on inputs at
    /// times `≤ t·stride + stride − 1`. Output length `ceil(len / stride)`.
    pub fn causal(len: usize, stride: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride,
            dilation,
            groups,
            shift: stride as isize - 1,
            out_len: len.div_ceil(stride),
        }
    }

    /// Symmetric zero padding `padding` on both sides (non-causal; used by
    /// discriminators only).
    pub fn padded(
        len: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
        padding: usize,
    ) -> Self {
        let span = (kernel - 1) * dilation;
        let padded = len + 2 * padding;
        let out_len = if padded > span { (padded - span - 1) / stride + 1 } else { 0 };
        Self {
            stride,
            dilation,
            groups,
            shift: span as isize - padding as isize,
            out_len,
        }
    }

    /// Causal transposed convolution with the right tail trimmed: output
    /// length `len · stride`, zero lookahead.
    pub fn causal_transposed(len: usize, stride: usize) -> Self {
        Self {
            stride,
            dilation: 1,
            groups: 1,
            shift: 0,
            out_len: len * stride,
        }
    }
}

/// Output indices `t ∈ [lo, hi)` for which `t·stride + offset ∈ [0, in_len)`.
#[inline]
fn valid_range(offset: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset < 0 { (-offset + s - 1) / s } else { 0 };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = ((last / s) + 1).min(out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// Positions `t ∈ [lo, hi)` with `t·stride + offset ∈ [0, out_len)` for a
/// transposed convolution scattering `in_len` inputs.
#[inline]
fn scatter_range(offset: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    valid_range(offset, stride, out_len, in_len)
}

fn check_conv_shapes(x: &Tensor, w: &Tensor, geo: &ConvGeometry) -> (usize, usize) {
    let cin = x.shape[1];
    let [cout, cin_g, _] = w.shape;
    assert!(geo.groups >= 1 && geo.stride >= 1 && geo.dilation >= 1);
    assert_eq!(cin, cin_g * geo.groups, "conv input channels {cin} vs weight {:?} groups {}", w.shape, geo.groups);
    assert_eq!(cout % geo.groups, 0, "conv out channels not divisible by groups");
    (cin_g, cout / geo.groups)
}

/// Strided matrix view `(data, row stride, column stride)`.
type View<'a> = (&'a [f64], usize, usize);

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    (rows - 1) * rs + (cols - 1) * cs + 1
}

/// `c += a·b` with `a` m×k, `b` k×n and `c` m×n, all strided views.
fn gemm_acc(m: usize, k: usize, n: usize, a: View, b: View, c: (&mut [f64], usize, usize)) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.0.len() >= span(m, k, a.1, a.2), "gemm: a out of bounds");
    assert!(b.0.len() >= span(k, n, b.1, b.2), "gemm: b out of bounds");
    assert!(c.0.len() >= span(m, n, c.1, c.2), "gemm: c out of bounds");
    // SAFETY: the asserts keep every strided access inside its slice, and
    // `c` is a unique borrow so it cannot alias `a` or `b`. Every caller
    // passes row/column strides that map distinct (i, j) to distinct
    // elements of `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            1.0,
            c.0.as_mut_ptr(),
            c.1 as isize,
            c.2 as isize,
        );
    }
}

/// Rows of batch item `b`, channels `c0..c0+count`, as one contiguous slice.
fn channel_block(t: &Tensor, b: usize, c0: usize, count: usize) -> &[f64] {
    let [_, c, len] = t.shape;
    &t.data[(b * c + c0) * len..(b * c + c0 + count) * len]
}

fn channel_block_mut(t: &mut Tensor, b: usize, c0: usize, count: usize) -> &mut [f64] {
    let [_, c, len] = t.shape;
    &mut t.data[(b * c + c0) * len..(b * c + c0 + count) * len]
}

/// Outputs `[lo, hi)` that tap `k` of a conv reads in range, and the input
/// index of output `lo`.
fn tap_range(k: usize, tin: usize, geo: &ConvGeometry) -> Option<(usize, usize, usize)> {
    let offset = geo.shift - (k * geo.dilation) as isize;
    let (lo, hi) = valid_range(offset, geo.stride, tin, geo.out_len);
    (lo < hi).then(|| (lo, hi, ((lo * geo.stride) as isize + offset) as usize))
}

// Each conv below is a sum over kernel taps of one GEMM between the
// per-tap weight slice and a strided view of the signal.

pub fn conv1d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, geo: &ConvGeometry) -> Tensor {
    let (cin_g, cout_g) = check_conv_shapes(x, w, geo);
    let [batch, _, tin] = x.shape;
    let [cout, _, kernel] = w.shape;
    let n = geo.out_len;
    let ck = cin_g * kernel;
    let mut out = Tensor::zeros([batch, cout, n]);
    for b in 0..batch {
        if let Some(bias) = bias {
            for co in 0..cout {
                out.row_mut(b, co).fill(bias.data[co]);
            }
        }
        for g in 0..geo.groups {
            let xg = channel_block(x, b, g * cin_g, cin_g);
            let wg = &w.data[g * cout_g * ck..(g + 1) * cout_g * ck];
            let dst = channel_block_mut(&mut out, b, g * cout_g, cout_g);
            for k in 0..kernel {
                let Some((lo, hi, src)) = tap_range(k, tin, geo) else { continue };
                gemm_acc(cout_g, cin_g, hi - lo, (&wg[k..], ck, kernel), (&xg[src..], tin, geo.stride), (&mut dst[lo..], n, 1));
            }
        }
    }
    out
}

/// Gradient of [`conv1d`] with respect to its input.
pub fn conv1d_grad_input(gy: &Tensor, w: &Tensor, geo: &ConvGeometry, in_shape: [usize; 3]) -> Tensor {
    let [batch, _, tin] = in_shape;
    let [cout, cin_g, kernel] = w.shape;
    let cout_g = cout / geo.groups;
    let n = geo.out_len;
    let ck = cin_g * kernel;
    let mut gx = Tensor::zeros(in_shape);
    for b in 0..batch {
        for g in 0..geo.groups {
            let gyg = channel_block(gy, b, g * cout_g, cout_g);
            let wg = &w.data[g * cout_g * ck..(g + 1) * cout_g * ck];
            let dst = channel_block_mut(&mut gx, b, g * cin_g, cin_g);
            for k in 0..kernel {
                let Some((lo, hi, src)) = tap_range(k, tin, geo) else { continue };
                gemm_acc(cin_g, cout_g, hi - lo, (&wg[k..], kernel, ck), (&gyg[lo..], n, 1), (&mut dst[src..], tin, geo.stride));
            }
        }
    }
    gx
}

/// Gradients of [`conv1d`] with respect to weight and bias.
pub fn conv1d_grad_params(x: &Tensor, gy: &Tensor, w_shape: [usize; 3], geo: &ConvGeometry) -> (Tensor, Tensor) {
    let [batch, _, tin] = x.shape;
    let [cout, cin_g, kernel] = w_shape;
    let cout_g = cout / geo.groups;
    let n = geo.out_len;
    let ck = cin_g * kernel;
    let mut gw = Tensor::zeros(w_shape);
    let mut gb = Tensor::zeros([1, cout, 1]);
    for b in 0..batch {
        for co in 0..cout {
            gb.data[co] += gy.row(b, co).iter().sum::<f64>();
        }
        for g in 0..geo.groups {
            let xg = channel_block(x, b, g * cin_g, cin_g);
            let gyg = channel_block(gy, b, g * cout_g, cout_g);
            let dst = &mut gw.data[g * cout_g * ck..(g + 1) * cout_g * ck];
            for k in 0..kernel {
                let Some((lo, hi, src)) = tap_range(k, tin, geo) else { continue };
                gemm_acc(cout_g, hi - lo, cin_g, (&gyg[lo..], n, 1), (&xg[src..], geo.stride, tin), (&mut dst[k..], ck, kernel));
            }
        }
    }
    (gw, gb)
}

/// Inputs `[lo, hi)` that tap `j` of a transposed conv scatters in range,
/// and the output index of input `lo`.
fn scatter_tap(j: usize, tin: usize, geo: &ConvGeometry) -> Option<(usize, usize, usize)> {
    let offset = j as isize + geo.shift;
    let (lo, hi) = scatter_range(offset, geo.stride, tin, geo.out_len);
    (lo < hi).then(|| (lo, hi, ((lo * geo.stride) as isize + offset) as usize))
}

/// Transposed convolution, `out[t·stride + j + shift] += w[ci, co, j] · x[ci, t]`.
/// Weight shape `[in_channels, out_channels, kernel]`; outputs outside
/// `[0, out_len)` are dropped.
pub fn conv_transpose1d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, geo: &ConvGeometry) -> Tensor {
    let [batch, cin, tin] = x.shape;
    let [wcin, cout, kernel] = w.shape;
    assert_eq!(cin, wcin, "transposed conv channel mismatch");
    let n = geo.out_len;
    let mut out = Tensor::zeros([batch, cout, n]);
    for b in 0..batch {
        if let Some(bias) = bias {
            for co in 0..cout {
                out.row_mut(b, co).fill(bias.data[co]);
            }
        }
        let xb = channel_block(x, b, 0, cin);
        let dst = channel_block_mut(&mut out, b, 0, cout);
        for j in 0..kernel {
            let Some((lo, hi, o)) = scatter_tap(j, tin, geo) else { continue };
            gemm_acc(cout, cin, hi - lo, (&w.data[j..], kernel, cout * kernel), (&xb[lo..], tin, 1), (&mut dst[o..], n, geo.stride));
        }
    }
    out
}

pub fn conv_transpose1d_grad_input(gy: &Tensor, w: &Tensor, geo: &ConvGeometry, in_shape: [usize; 3]) -> Tensor {
    let [batch, cin, tin] = in_shape;
    let [_, cout, kernel] = w.shape;
    let n = geo.out_len;
    let mut gx = Tensor::zeros(in_shape);
    for b in 0..batch {
        let gyb = channel_block(gy, b, 0, cout);
        let dst = channel_block_mut(&mut gx, b, 0, cin);
        for j in 0..kernel {
            let Some((lo, hi, o)) = scatter_tap(j, tin, geo) else { continue };
            gemm_acc(cin, cout, hi - lo, (&w.data[j..], cout * kernel, kernel), (&gyb[o..], n, geo.stride), (&mut dst[lo..], tin, 1));
        }
    }
    gx
}

pub fn conv_transpose1d_grad_params(x: &Tensor, gy: &Tensor, w_shape: [usize; 3], geo: &ConvGeometry) -> (Tensor, Tensor) {
    let [batch, cin, tin] = x.shape;
    let [_, cout, kernel] = w_shape;
    let n = geo.out_len;
    let mut gw = Tensor::zeros(w_shape);
    let mut gb = Tensor::zeros([1, cout, 1]);
    for b in 0..batch {
        for co in 0..cout {
            gb.data[co] += gy.row(b, co).iter().sum::<f64>();
        }
        let xb = channel_block(x, b, 0, cin);
        let gyb = channel_block(gy, b, 0, cout);
        for j in 0..kernel {
            let Some((lo, hi, o)) = scatter_tap(j, tin, geo) else { continue };
            gemm_acc(cin, hi - lo, cout, (&xb[lo..], tin, 1), (&gyb[o..], geo.stride, n), (&mut gw.data[j..], cout * kernel, kernel));
        }
    }
    (gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Direct O(N·K) evaluation of the convolution definition.
    fn direct_conv(x: &Tensor, w: &Tensor, geo: &ConvGeometry) -> Tensor {
        let [batch, _, tin] = x.shape();
        let [cout, cin_g, kernel] = w.shape();
        let cout_g = cout / geo.groups;
        let mut out = Tensor::zeros([batch, cout, geo.out_len]);
        for b in 0..batch {
            for co in 0..cout {
                for t in 0..geo.out_len {
                    let mut acc = 0.0;
                    for ci in 0..cin_g {
                        for k in 0..kernel {
                            let idx = (t * geo.stride) as isize + geo.shift - (k * geo.dilation) as isize;
                            if idx >= 0 && (idx as usize) < tin {
                                acc += w.at(co, ci, k) * x.at(b, (co / cout_g) * cin_g + ci, idx as usize);
                            }
                        }
                    }
                    out.row_mut(b, co)[t] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::signal(&[0.5, -0.25, 1.0, 0.0, 0.75]);
        let w = Tensor::from_vec([1, 1, 4], vec![1.0, 0.0, 0.0, 0.0]);
        let y = conv1d(&x, &w, None, &ConvGeometry::causal(5, 1, 1, 1));
        assert_eq!(y, x);
    }

    #[test]
    fn impulse_response_is_kernel_from_impulse_onward() {
        let mut samples = vec![0.0; 12];
        samples[3] = 1.0;
        let x = Tensor::signal(&samples);
        let kernel = [0.3, -0.2, 0.7];
        let w = Tensor::from_vec([1, 1, 3], kernel.to_vec());
        let y = conv1d(&x, &w, None, &ConvGeometry::causal(12, 1, 2, 1));
        let y = y.data();
        assert!(y[..3].iter().all(|&v| v == 0.0));
        assert_eq!(y[3], 0.3);
        assert_eq!(y[5], -0.2);
        assert_eq!(y[7], 0.7);
        assert_eq!(y[4], 0.0);
    }

    #[test]
    fn causal_conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random([2, 3, 50], &mut rng);
        let w = random([4, 3, 7], &mut rng);
        let geo = ConvGeometry::causal(50, 1, 3, 1);
        let fast = conv1d(&x, &w, None, &geo);
        assert!(fast.max_abs_diff(&direct_conv(&x, &w, &geo)) < 1e-6);
    }

    #[test]
    fn strided_grouped_and_padded_conv_match_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random([2, 6, 37], &mut rng);
        let w = random([9, 2, 5], &mut rng);
        for geo in [
            ConvGeometry::causal(37, 3, 1, 3),
            ConvGeometry::padded(37, 5, 2, 2, 3, 4),
            ConvGeometry::padded(37, 5, 1, 1, 3, 2),
        ] {
            let fast = conv1d(&x, &w, None, &geo);
            assert!(fast.max_abs_diff(&direct_conv(&x, &w, &geo)) < 1e-12, "{geo:?}");
        }
    }

    #[test]
    fn grouped_conv_equals_independent_partition_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let groups = 3;
        let x = random([1, 6, 40], &mut rng);
        let w = random([6, 2, 5], &mut rng);
        let grouped = conv1d(&x, &w, None, &ConvGeometry::causal(40, 1, 2, groups));
        for g in 0..groups {
            let mut xs = Tensor::zeros([1, 2, 40]);
            for c in 0..2 {
                xs.row_mut(0, c).copy_from_slice(x.row(0, g * 2 + c));
            }
            let ws = Tensor::from_vec([2, 2, 5], w.data()[g * 20..(g + 1) * 20].to_vec());
            let single = conv1d(&xs, &ws, None, &ConvGeometry::causal(40, 1, 2, 1));
            for c in 0..2 {
                let a = grouped.row(0, g * 2 + c);
                let b = single.row(0, c);
                for (u, v) in a.iter().zip(b) {
                    assert!((u - v).abs() <= 1e-6 * (1.0 + v.abs()));
                }
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random([2, 4, 19], &mut rng);
        let w = random([6, 2, 3], &mut rng);
        let bias = random([1, 6, 1], &mut rng);
        let geo = ConvGeometry::causal(19, 2, 2, 2);
        let probe = random([2, 6, geo.out_len], &mut rng);
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| {
            conv1d(x, w, Some(b), &geo).zip_map(&probe, |a, p| a * p).sum()
        };
        let gx = conv1d_grad_input(&probe, &w, &geo, x.shape());
        let (gw, gb) = conv1d_grad_params(&x, &probe, w.shape(), &geo);
        let h = 1e-6;
        for i in [0, 5, 17, 40, 75] {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp, &w, &bias) - loss(&xm, &w, &bias)) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() < 1e-6);
        }
        for i in 0..w.numel() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.data_mut()[i] += h;
            wm.data_mut()[i] -= h;
            let fd = (loss(&x, &wp, &bias) - loss(&x, &wm, &bias)) / (2.0 * h);
            assert!((fd - gw.data()[i]).abs() < 1e-6);
        }
        let gb_fd = probe.sum() / 6.0;
        assert!(gb.data().iter().all(|v| v.is_finite()));
        assert!((gb.sum() / 6.0 - gb_fd).abs() < 1e-9);
    }

    #[test]
    fn transposed_conv_matches_scatter_definition_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random([2, 3, 6], &mut rng);
        let w = random([3, 2, 6], &mut rng);
        let geo = ConvGeometry::causal_transposed(6, 3);
        let y = conv_transpose1d(&x, &w, None, &geo);
        assert_eq!(y.shape(), [2, 2, 18]);
        let mut direct = Tensor::zeros([2, 2, 18]);
        for b in 0..2 {
            for co in 0..2 {
                for ci in 0..3 {
                    for t in 0..6 {
                        for j in 0..6 {
                            let n = t * 3 + j;
                            if n < 18 {
                                direct.row_mut(b, co)[n] += w.at(ci, co, j) * x.at(b, ci, t);
                            }
                        }
                    }
                }
            }
        }
        assert!(y.max_abs_diff(&direct) < 1e-12);

        let probe = random([2, 2, 18], &mut rng);
        let loss = |x: &Tensor, w: &Tensor| conv_transpose1d(x, w, None, &geo).zip_map(&probe, |a, p| a * p).sum();
        let gx = conv_transpose1d_grad_input(&probe, &w, &geo, x.shape());
        let (gw, _) = conv_transpose1d_grad_params(&x, &probe, w.shape(), &geo);
        let h = 1e-6;
        for i in 0..x.numel() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            assert!(((loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h) - gx.data()[i]).abs() < 1e-6);
        }
        for i in 0..w.numel() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.data_mut()[i] += h;
            wm.data_mut()[i] -= h;
            assert!(((loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h) - gw.data()[i]).abs() < 1e-6);
        }
    }
}
