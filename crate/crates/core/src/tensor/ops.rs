use super::Tensor;
use crate::error::{Error, Result};

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref other => Err(Error::dim(format!("{what} must be N×C×H×W, got {other:?}"))),
    }
}

/// Output spatial extent of a convolution or pooling window.
pub fn conv2d_output_size(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::dim("stride must be positive"));
    }
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    if kh > ph || kw > pw {
        return Err(Error::dim(format!(
            "kernel {kh}×{kw} larger than padded input {ph}×{pw}"
        )));
    }
    Ok(((ph - kh) / stride + 1, (pw - kw) / stride + 1))
}

/// 2-D cross-correlation (no kernel flip) with zero padding.
///
/// Each output starts from the bias and accumulates over input channel, then
/// kernel row, then kernel column.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = dims4(input, "conv2d input")?;
    let (o, wc, kh, kw) = dims4(weight, "conv2d weight")?;
    if wc != c {
        return Err(Error::dim(format!(
            "conv2d channel mismatch: input has {c}, weight expects {wc}"
        )));
    }
    if bias.shape() != [o] {
        return Err(Error::dim(format!(
            "conv2d bias shape {:?}, expected [{o}]",
            bias.shape()
        )));
    }
    let (oh, ow) = conv2d_output_size(h, w, kh, kw, stride, padding)?;
    let (x, wt, b) = (input.data(), weight.data(), bias.data());
    let mut out = vec![0.0; n * o * oh * ow];
    let pad = padding as isize;
    for ni in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[oc];
                    let iy0 = (y * stride) as isize - pad;
                    let ix0 = (xo * stride) as isize - pad;
                    for ci in 0..c {
                        let xbase = (ni * c + ci) * h * w;
                        let wbase = (oc * c + ci) * kh * kw;
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w;
                            for kx in 0..kw {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += wt[wbase + ky * kw + kx] * x[xrow + ix as usize];
                            }
                        }
                    }
                    out[((ni * o + oc) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::from_parts(vec![n, o, oh, ow], out)
}

/// Mean over each H×W plane, giving `N×C×1×1`.
pub fn adaptive_avg_pool_1x1(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4(input, "adaptive_avg_pool_1x1 input")?;
    let plane = h * w;
    let out = input
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::from_parts(vec![n, c, 1, 1], out)
}

/// Source index range feeding output position `i` along one axis.
///
/// Shrinking an axis uses adaptive-average-pooling bins; growing it (or
/// keeping it) maps each output to a single nearest source index.
fn resize_bin(i: usize, src: usize, dst: usize) -> (usize, usize) {
    if dst >= src {
        let s = i * src / dst;
        (s, s + 1)
    } else {
        let start = i * src / dst;
        let end = ((i + 1) * src).div_ceil(dst);
        (start, end)
    }
}

/// Resamples the spatial axes of an `N×C×H×W` tensor.
pub fn resize_spatial(input: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = dims4(input, "resize_spatial input")?;
    if target_h == 0 || target_w == 0 {
        return Err(Error::dim("resize target must be at least 1×1"));
    }
    if (target_h, target_w) == (h, w) {
        return Ok(input.clone());
    }
    let rows: Vec<_> = (0..target_h).map(|i| resize_bin(i, h, target_h)).collect();
    let cols: Vec<_> = (0..target_w).map(|j| resize_bin(j, w, target_w)).collect();
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * target_h * target_w);
    for plane in x.chunks(h * w) {
        for &(r0, r1) in &rows {
            for &(c0, c1) in &cols {
                let mut acc = 0.0;
                for r in r0..r1 {
                    for col in c0..c1 {
                        acc += plane[r * w + col];
                    }
                }
                out.push(acc / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    Tensor::from_parts(vec![n, c, target_h, target_w], out)
}

/// Max pooling without padding. Also returns the flat input index chosen for
/// each output (first maximum wins), which training needs for backprop.
pub(crate) fn max_pool2d_with_indices(
    input: &Tensor,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = dims4(input, "max_pool2d input")?;
    let (oh, ow) = conv2d_output_size(h, w, kernel, kernel, stride, 0)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + y * stride * w + xo * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = base + (y * stride + ky) * w + xo * stride + kx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out)?, idx))
}

pub fn max_pool2d(input: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    max_pool2d_with_indices(input, kernel, stride).map(|(t, _)| t)
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        shape: input.shape().to_vec(),
        data,
    }
}

/// Row-wise softmax of an `N×K` matrix, max-shifted for stability.
pub fn softmax_rows(input: &Tensor) -> Result<Tensor> {
    let (n, k) = input.as_matrix_dims()?;
    let mut out = input.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::from_parts(vec![n, k], out)
}
