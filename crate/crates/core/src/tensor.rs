//! Dense row-major f64 tensors and the raw compute kernels.
//!
//! Tensors are immutable values: every operation returns a new tensor. The
//! kernels here are the single source of truth for forward arithmetic; the
//! autodiff tape wraps them, so recorded and straight-line evaluation cannot
//! diverge in the values they produce.

use crate::error::{Error, Result};

/// Dense multi-dimensional array of f64, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Build a tensor, rejecting shape/length mismatch and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} elements, got {} values",
                shape,
                numel_of(&shape),
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor construction"));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for values produced by kernels that already
    /// guarantee finiteness checks at the operation level.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![0.0; numel_of(shape)])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![1.0; numel_of(shape)])
    }

    pub fn full(shape: &[usize], v: f64) -> Result<Self> {
        Tensor::new(shape.to_vec(), vec![v; numel_of(shape)])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Value of a one-element tensor (scalar or single-entry vector).
    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::ShapeMismatch(format!(
                "expected one element, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) into {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn flatten(&self) -> Tensor {
        Tensor::from_parts(vec![self.data.len()], self.data.clone())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.data.len() != other.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dot of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum())
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn check_finite(self, ctx: &'static str) -> Result<Tensor> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite(ctx))
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch(format!(
            "{op} of {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Elementwise and reduction kernels
// ---------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::from_parts(a.shape.clone(), data).check_finite("add")
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "sub")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Tensor::from_parts(a.shape.clone(), data).check_finite("sub")
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Tensor::from_parts(a.shape.clone(), data).check_finite("mul")
}

pub fn scalar_mul(a: &Tensor, c: f64) -> Result<Tensor> {
    let data = a.data.iter().map(|x| x * c).collect();
    Tensor::from_parts(a.shape.clone(), data).check_finite("scalar_mul")
}

pub fn add_scalar(a: &Tensor, c: f64) -> Result<Tensor> {
    let data = a.data.iter().map(|x| x + c).collect();
    Tensor::from_parts(a.shape.clone(), data).check_finite("add_scalar")
}

/// a + c * b, shapes must match.
pub fn axpy(a: &Tensor, c: f64, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "axpy")?;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| x + c * y)
        .collect();
    Tensor::from_parts(a.shape.clone(), data).check_finite("axpy")
}

pub fn relu(a: &Tensor) -> Result<Tensor> {
    let data = a.data.iter().map(|x| x.max(0.0)).collect();
    Ok(Tensor::from_parts(a.shape.clone(), data))
}

pub fn sum(a: &Tensor) -> Result<Tensor> {
    let s: f64 = a.data.iter().sum();
    Tensor::from_parts(vec![], vec![s]).check_finite("sum")
}

pub fn mean(a: &Tensor) -> Result<Tensor> {
    if a.data.is_empty() {
        return Err(Error::ShapeMismatch("mean of empty tensor".into()));
    }
    let s: f64 = a.data.iter().sum();
    Tensor::from_parts(vec![], vec![s / a.data.len() as f64]).check_finite("mean")
}

pub fn l2_norm(a: &Tensor) -> Result<Tensor> {
    Tensor::from_parts(vec![], vec![a.l2_norm()]).check_finite("l2_norm")
}

/// Matrix product: [m,k]x[k,n] -> [m,n], or [m,k]x[k] -> [m].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.shape.as_slice(), b.shape.as_slice()) {
        (&[m, k], &[k2, n]) if k == k2 => {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let arow = &a.data[i * k..(i + 1) * k];
                for (p, &av) in arow.iter().enumerate() {
                    let brow = &b.data[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Tensor::from_parts(vec![m, n], out).check_finite("matmul")
        }
        (&[m, k], &[k2]) if k == k2 => {
            let mut out = vec![0.0; m];
            for i in 0..m {
                out[i] = a.data[i * k..(i + 1) * k]
                    .iter()
                    .zip(&b.data)
                    .map(|(x, y)| x * y)
                    .sum();
            }
            Tensor::from_parts(vec![m], out).check_finite("matmul")
        }
        _ => Err(Error::ShapeMismatch(format!(
            "matmul of {:?} and {:?}",
            a.shape, b.shape
        ))),
    }
}

pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    let mut data = Vec::new();
    for p in parts {
        if p.rank() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "concat expects vectors, got {:?}",
                p.shape
            )));
        }
        data.extend_from_slice(&p.data);
    }
    let n = data.len();
    Ok(Tensor::from_parts(vec![n], data))
}

/// out[i] = a[indices[i]], 1-D input.
pub fn gather(a: &Tensor, indices: &[usize]) -> Result<Tensor> {
    if a.rank() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "gather expects a vector, got {:?}",
            a.shape
        )));
    }
    let mut data = Vec::with_capacity(indices.len());
    for &i in indices {
        let v = *a.data.get(i).ok_or_else(|| {
            Error::ShapeMismatch(format!("gather index {i} out of range {}", a.data.len()))
        })?;
        data.push(v);
    }
    let n = data.len();
    Ok(Tensor::from_parts(vec![n], data))
}

/// Maximum over all elements of a vector; ties resolve to the smallest index.
pub fn reduce_max(a: &Tensor) -> Result<(Tensor, usize)> {
    if a.data.is_empty() {
        return Err(Error::ShapeMismatch("max of empty tensor".into()));
    }
    let mut arg = 0;
    for (i, v) in a.data.iter().enumerate() {
        if *v > a.data[arg] {
            arg = i;
        }
    }
    Ok((Tensor::from_parts(vec![], vec![a.data[arg]]), arg))
}

/// Numerically stable log-softmax of a vector.
pub fn log_softmax(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 1 || a.data.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "log_softmax expects a non-empty vector, got {:?}",
            a.shape
        )));
    }
    let max = a.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = a.data.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let data = a.data.iter().map(|v| v - max - log_z).collect();
    Tensor::from_parts(a.shape.clone(), data).check_finite("log_softmax")
}

// ---------------------------------------------------------------------------
// Convolution / pooling kernels (single image, no batch axis)
// ---------------------------------------------------------------------------

/// Output spatial extent for a conv/pool window.
pub fn conv_out_extent(input: usize, window: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < window || stride == 0 {
        return Err(Error::ShapeMismatch(format!(
            "window {window} with stride {stride} does not fit input {input} (padding {padding})"
        )));
    }
    Ok((padded - window) / stride + 1)
}

/// 2-D convolution (cross-correlation): input [c_in,h,w], kernel
/// [c_out,c_in,kh,kw], symmetric zero padding.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (ci, h, w) = match input.shape.as_slice() {
        &[c, h, w] => (c, h, w),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "conv2d input must be [c,h,w], got {:?}",
                input.shape
            )))
        }
    };
    let (co, ci2, kh, kw) = match kernel.shape.as_slice() {
        &[co, ci2, kh, kw] => (co, ci2, kh, kw),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "conv2d kernel must be [c_out,c_in,kh,kw], got {:?}",
                kernel.shape
            )))
        }
    };
    if ci != ci2 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d channel mismatch: input {ci}, kernel {ci2}"
        )));
    }
    let oh = conv_out_extent(h, kh, stride, padding)?;
    let ow = conv_out_extent(w, kw, stride, padding)?;
    let mut out = vec![0.0; co * oh * ow];
    let pad = padding as isize;
    for o in 0..co {
        for c in 0..ci {
            let kbase = ((o * ci) + c) * kh * kw;
            let ibase = c * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = ibase + iy as usize * w;
                        let krow = kbase + ky * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride) as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += input.data[irow + ix as usize] * kernel.data[krow + kx];
                        }
                    }
                    out[(o * oh + oy) * ow + ox] += acc;
                }
            }
        }
    }
    Tensor::from_parts(vec![co, oh, ow], out).check_finite("conv2d")
}

/// Gradient of conv2d with respect to its input.
pub fn conv2d_grad_input(
    grad_out: &Tensor,
    kernel: &Tensor,
    input_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (ci, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (co, _, kh, kw) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    let (oh, ow) = (grad_out.shape[1], grad_out.shape[2]);
    let mut gin = vec![0.0; ci * h * w];
    let pad = padding as isize;
    for o in 0..co {
        for c in 0..ci {
            let kbase = ((o * ci) + c) * kh * kw;
            let ibase = c * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out.data[(o * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ky in 0..kh {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = ibase + iy as usize * w;
                        let krow = kbase + ky * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride) as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gin[irow + ix as usize] += g * kernel.data[krow + kx];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), gin))
}

/// Gradient of conv2d with respect to its kernel.
pub fn conv2d_grad_kernel(
    grad_out: &Tensor,
    input: &Tensor,
    kernel_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (ci, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (co, kh, kw) = (kernel_shape[0], kernel_shape[2], kernel_shape[3]);
    let (oh, ow) = (grad_out.shape[1], grad_out.shape[2]);
    let mut gk = vec![0.0; kernel_shape.iter().product()];
    let pad = padding as isize;
    for o in 0..co {
        for c in 0..ci {
            let kbase = ((o * ci) + c) * kh * kw;
            let ibase = c * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out.data[(o * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ky in 0..kh {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = ibase + iy as usize * w;
                        let krow = kbase + ky * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride) as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gk[krow + kx] += g * input.data[irow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(kernel_shape.to_vec(), gk))
}

/// Per-channel bias add: input [c,h,w] + bias [c].
pub fn channel_bias(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match input.shape.as_slice() {
        &[c, h, w] => (c, h, w),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "channel_bias input must be [c,h,w], got {:?}",
                input.shape
            )))
        }
    };
    if bias.shape.as_slice() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "channel_bias bias must be [{c}], got {:?}",
            bias.shape
        )));
    }
    let mut data = input.data.clone();
    for ch in 0..c {
        let b = bias.data[ch];
        for v in &mut data[ch * h * w..(ch + 1) * h * w] {
            *v += b;
        }
    }
    Tensor::from_parts(input.shape.clone(), data).check_finite("channel_bias")
}

/// Max pooling over [c,h,w]; returns (output, argmax flat input indices).
pub fn max_pool(input: &Tensor, size: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = match input.shape.as_slice() {
        &[c, h, w] => (c, h, w),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "max_pool input must be [c,h,w], got {:?}",
                input.shape
            )))
        }
    };
    let oh = conv_out_extent(h, size, stride, 0)?;
    let ow = conv_out_extent(w, size, stride, 0)?;
    let mut out = vec![0.0; c * oh * ow];
    let mut switches = vec![0usize; c * oh * ow];
    for ch in 0..c {
        let ibase = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for ky in 0..size {
                    let iy = oy * stride + ky;
                    for kx in 0..size {
                        let ix = ox * stride + kx;
                        let idx = ibase + iy * w + ix;
                        if input.data[idx] > best {
                            best = input.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let oidx = (ch * oh + oy) * ow + ox;
                out[oidx] = best;
                switches[oidx] = best_idx;
            }
        }
    }
    Ok((Tensor::from_parts(vec![c, oh, ow], out), switches))
}

/// Channel-wise L2 normalization at each pixel of a [c,h,w] activation.
/// Pixels whose channel vector has norm <= eps map to the zero vector.
pub fn channel_normalize(input: &Tensor, eps: f64) -> Result<Tensor> {
    let (c, h, w) = match input.shape.as_slice() {
        &[c, h, w] => (c, h, w),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "channel_normalize input must be [c,h,w], got {:?}",
                input.shape
            )))
        }
    };
    let hw = h * w;
    let mut data = vec![0.0; c * hw];
    for p in 0..hw {
        let mut sq = 0.0;
        for ch in 0..c {
            let v = input.data[ch * hw + p];
            sq += v * v;
        }
        let n = sq.sqrt();
        if n > eps {
            for ch in 0..c {
                data[ch * hw + p] = input.data[ch * hw + p] / n;
            }
        }
    }
    Ok(Tensor::from_parts(input.shape.clone(), data))
}

/// Backward of [`channel_normalize`].
pub fn channel_normalize_grad(input: &Tensor, grad_out: &Tensor, eps: f64) -> Result<Tensor> {
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let hw = h * w;
    let mut gin = vec![0.0; c * hw];
    for p in 0..hw {
        let mut sq = 0.0;
        for ch in 0..c {
            let v = input.data[ch * hw + p];
            sq += v * v;
        }
        let n = sq.sqrt();
        if n <= eps {
            continue;
        }
        // d(v/n)/dv = (I - u u^T)/n with u = v/n
        let mut udotg = 0.0;
        for ch in 0..c {
            udotg += (input.data[ch * hw + p] / n) * grad_out.data[ch * hw + p];
        }
        for ch in 0..c {
            let u = input.data[ch * hw + p] / n;
            gin[ch * hw + p] = (grad_out.data[ch * hw + p] - u * udotg) / n;
        }
    }
    Ok(Tensor::from_parts(input.shape.clone(), gin))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_rejects_length_mismatch() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn construction_rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::INFINITY]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn relu_matches_definition() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity_is_identity() {
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let a = Tensor::new(vec![3, 3], (1..=9).map(f64::from).collect()).unwrap();
        assert_eq!(matmul(&eye, &a).unwrap(), a);
    }

    #[test]
    fn conv2d_all_ones_sums_window() {
        // 3x3 ones kernel over 5x5 ones image, stride 1, no padding: each
        // output position sums a full 3x3 window of ones.
        let img = Tensor::ones(&[1, 5, 5]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let out = conv2d(&img, &k, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv2d_padding_and_stride_shapes() {
        let img = Tensor::ones(&[2, 6, 6]);
        let k = Tensor::ones(&[4, 2, 3, 3]);
        let out = conv2d(&img, &k, 2, 1).unwrap();
        assert_eq!(out.shape(), &[4, 3, 3]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let img = Tensor::ones(&[2, 5, 5]);
        let k = Tensor::ones(&[1, 3, 3, 3]);
        assert!(conv2d(&img, &k, 1, 0).is_err());
    }

    #[test]
    fn max_pool_tracks_argmax() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let (out, sw) = max_pool(&x, 2, 2).unwrap();
        assert_eq!(out.data(), &[5.0]);
        assert_eq!(sw, vec![1]);
    }

    #[test]
    fn log_softmax_is_stable_for_huge_logits() {
        let x = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap();
        let ls = log_softmax(&x).unwrap();
        assert!(ls.data()[0].abs() < 1e-12);
    }

    #[test]
    fn channel_normalize_unit_norm_and_zero_guard() {
        // pixel channel pair (3,4) -> (0.6, 0.8); all-zero pixel stays zero.
        let x = Tensor::new(vec![2, 1, 2], vec![3.0, 0.0, 4.0, 0.0]).unwrap();
        let out = channel_normalize(&x, 1e-10).unwrap();
        assert!((out.data()[0] - 0.6).abs() < 1e-15);
        assert!((out.data()[2] - 0.8).abs() < 1e-15);
        assert_eq!(out.data()[1], 0.0);
        assert_eq!(out.data()[3], 0.0);
    }

    #[test]
    fn gather_and_reduce_max_tie_break() {
        let x = Tensor::new(vec![4], vec![2.0, 7.0, 7.0, 1.0]).unwrap();
        let g = gather(&x, &[3, 0]).unwrap();
        assert_eq!(g.data(), &[1.0, 2.0]);
        let (m, arg) = reduce_max(&x).unwrap();
        assert_eq!(m.scalar_value().unwrap(), 7.0);
        assert_eq!(arg, 1, "ties resolve to the smallest index");
    }
}
