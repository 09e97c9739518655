use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{shape_err, Padding, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub moving_mean: Vec<f32>,
    pub moving_variance: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNormParams {
    /// gamma = 1, beta = 0, mean = 0, variance = 1.
    pub fn identity(channels: usize, epsilon: f32) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            moving_mean: vec![0.0; channels],
            moving_variance: vec![1.0; channels],
            epsilon,
        }
    }
}

/// `c = a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn matmul(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].fill(0.0);
        return;
    }
    // SAFETY: the slices hold at least m*k, k*n and m*n elements (asserted
    // above) and the strides describe dense row-major layouts within them.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn batch_norm_apply(
    data: &mut [f32],
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) {
    let c = gamma.len();
    let (scale, shift): (Vec<f32>, Vec<f32>) = (0..c)
        .map(|i| {
            let s = gamma[i] / (var[i] + eps).sqrt();
            (s, beta[i] - mean[i] * s)
        })
        .unzip();
    for px in data.chunks_exact_mut(c) {
        for i in 0..c {
            px[i] = px[i] * scale[i] + shift[i];
        }
    }
}

/// Inference-mode batch normalization over the trailing (channel) axis.
pub fn batch_norm_infer(input: &Tensor, params: &BatchNormParams) -> Result<Tensor> {
    const OP: &str = "batch_norm_infer";
    let c = input.channels();
    for (what, len) in [
        ("gamma length", params.gamma.len()),
        ("beta length", params.beta.len()),
        ("moving_mean length", params.moving_mean.len()),
        ("moving_variance length", params.moving_variance.len()),
    ] {
        if len != c {
            return Err(shape_err(OP, what, c, len));
        }
    }
    if !(params.epsilon > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: OP,
            msg: format!("epsilon must be positive, got {}", params.epsilon),
        });
    }
    if params.moving_variance.iter().any(|&v| v < 0.0) {
        return Err(TensorError::InvalidArgument {
            op: OP,
            msg: "negative moving variance".into(),
        });
    }
    let mut out = input.clone();
    batch_norm_apply(
        out.data_mut(),
        &params.gamma,
        &params.beta,
        &params.moving_mean,
        &params.moving_variance,
        params.epsilon,
    );
    Ok(out)
}

/// Max pooling; SAME padding behaves as if padded with −∞.
pub fn max_pool2d(input: &Tensor, window: usize, stride: usize, padding: Padding) -> Result<Tensor> {
    const OP: &str = "max_pool2d";
    if window == 0 || stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: OP,
            msg: format!("window {window} and stride {stride} must be >= 1"),
        });
    }
    let (n, h, w, c) = input.dims4(OP)?;
    let bad = || TensorError::InvalidArgument {
        op: OP,
        msg: format!("input {h}x{w} smaller than window {window}"),
    };
    let (oh, pt) = padding.geometry(h, window, stride).ok_or_else(bad)?;
    let (ow, pl) = padding.geometry(w, window, stride).ok_or_else(bad)?;
    let mut out = vec![f32::NEG_INFINITY; n * oh * ow * c];
    for b in 0..n {
        let img = &input.data()[b * h * w * c..(b + 1) * h * w * c];
        let dst = &mut out[b * oh * ow * c..(b + 1) * oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let acc = &mut dst[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                for ky in 0..window {
                    let iy = (oy * stride + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..window {
                        let ix = (ox * stride + kx) as isize - pl as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = &img[(iy as usize * w + ix as usize) * c..][..c];
                        for (a, &x) in acc.iter_mut().zip(src) {
                            if x > *a {
                                *a = x;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, oh, ow, c], out)
}

pub fn global_average_pool(input: &Tensor) -> Result<Tensor> {
    let (n, h, w, c) = input.dims4("global_average_pool")?;
    let mut out = vec![0.0f32; n * c];
    let inv = 1.0 / (h * w) as f32;
    for b in 0..n {
        let acc = &mut out[b * c..(b + 1) * c];
        for px in input.data()[b * h * w * c..(b + 1) * h * w * c].chunks_exact(c) {
            for (a, &x) in acc.iter_mut().zip(px) {
                *a += x;
            }
        }
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    Tensor::new(vec![n, c], out)
}

/// `y = x·W + b` for `x: N×Fin`, `W: Fin×Fout`.
pub fn dense_affine(input: &Tensor, weight: &Tensor, bias: &[f32]) -> Result<Tensor> {
    const OP: &str = "dense_affine";
    let (n, fin) = input.dims2(OP)?;
    let (wfin, fout) = weight.dims2(OP)?;
    if wfin != fin {
        return Err(shape_err(OP, "inner dimension", wfin, fin));
    }
    if bias.len() != fout {
        return Err(shape_err(OP, "bias length", fout, bias.len()));
    }
    let mut out = vec![0.0f32; n * fout];
    matmul(input.data(), weight.data(), &mut out, n, fin, fout);
    for row in out.chunks_exact_mut(fout) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    Tensor::new(vec![n, fout], out)
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation_inplace(t: &mut Tensor, kind: Activation) {
    match kind {
        Activation::Relu => t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Sigmoid => t.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v)),
    }
}

pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    let mut out = input.clone();
    activation_inplace(&mut out, kind);
    out
}

/// Inverted-dropout multipliers: each entry is 0 with probability `rate`,
/// otherwise `1/(1−rate)`.
pub fn dropout_mask(len: usize, rate: f32, seed: u64) -> Result<Vec<f32>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidArgument {
            op: "dropout",
            msg: format!("rate must be in [0, 1), got {rate}"),
        });
    }
    if rate == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len)
        .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
        .collect())
}

pub fn dropout(input: &Tensor, rate: f32, mode: Mode, seed: u64) -> Result<Tensor> {
    let mask = dropout_mask(if mode == Mode::Train { input.len() } else { 0 }, rate, seed)?;
    let mut out = input.clone();
    if mode == Mode::Train {
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
    }
    Ok(out)
}
