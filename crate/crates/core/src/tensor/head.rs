//! The trainable classifier head: Dense → ReLU → BatchNorm → Dropout → Dense
//! → Sigmoid, applied to globally pooled base features.
//!
//! Generic over the float type so the same code path can be run in `f64`
//! when checking gradients.

use num_traits::Float;

use super::{shape_err, Result, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<F> {
    pub in_features: usize,
    pub hidden: usize,
    /// `in_features × hidden`, row-major.
    pub dense1_kernel: Vec<F>,
    pub dense1_bias: Vec<F>,
    pub bn_gamma: Vec<F>,
    pub bn_beta: Vec<F>,
    pub bn_moving_mean: Vec<F>,
    pub bn_moving_variance: Vec<F>,
    pub bn_epsilon: F,
    /// `hidden × 1`.
    pub dense2_kernel: Vec<F>,
    /// Length 1.
    pub dense2_bias: Vec<F>,
}

/// Gradients for every trainable head parameter, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads<F> {
    pub dense1_kernel: Vec<F>,
    pub dense1_bias: Vec<F>,
    pub bn_gamma: Vec<F>,
    pub bn_beta: Vec<F>,
    pub dense2_kernel: Vec<F>,
    pub dense2_bias: Vec<F>,
}

/// Activations recorded by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct HeadCache<F> {
    pub batch: usize,
    pub in_features: usize,
    pub hidden: usize,
    input: Vec<F>,
    pre_relu: Vec<F>,
    normalized: Vec<F>,
    inv_std: Vec<F>,
    mask: Vec<F>,
    dropped: Vec<F>,
    gamma: Vec<F>,
    dense2_kernel: Vec<F>,
    pub probabilities: Vec<F>,
    /// Per-feature batch mean of the BN input.
    pub batch_mean: Vec<F>,
    /// Per-feature biased batch variance of the BN input.
    pub batch_variance: Vec<F>,
}

pub(crate) fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Float> HeadParams<F> {
    pub fn check(&self) -> Result<()> {
        const OP: &str = "head";
        let h = self.hidden;
        let checks = [
            ("dense1 kernel", self.in_features * h, self.dense1_kernel.len()),
            ("dense1 bias", h, self.dense1_bias.len()),
            ("bn gamma", h, self.bn_gamma.len()),
            ("bn beta", h, self.bn_beta.len()),
            ("bn moving mean", h, self.bn_moving_mean.len()),
            ("bn moving variance", h, self.bn_moving_variance.len()),
            ("dense2 kernel", h, self.dense2_kernel.len()),
            ("dense2 bias", 1, self.dense2_bias.len()),
        ];
        for (what, expected, actual) in checks {
            if expected != actual {
                return Err(shape_err(OP, what, expected, actual));
            }
        }
        Ok(())
    }

    /// Converts every value to another float type.
    pub fn cast<G: Float>(&self) -> HeadParams<G> {
        let c = |v: &[F]| v.iter().map(|x| G::from(*x).unwrap()).collect::<Vec<G>>();
        HeadParams {
            in_features: self.in_features,
            hidden: self.hidden,
            dense1_kernel: c(&self.dense1_kernel),
            dense1_bias: c(&self.dense1_bias),
            bn_gamma: c(&self.bn_gamma),
            bn_beta: c(&self.bn_beta),
            bn_moving_mean: c(&self.bn_moving_mean),
            bn_moving_variance: c(&self.bn_moving_variance),
            bn_epsilon: G::from(self.bn_epsilon).unwrap(),
            dense2_kernel: c(&self.dense2_kernel),
            dense2_bias: c(&self.dense2_bias),
        }
    }

    fn dense1_relu(&self, input: &[F], n: usize) -> Vec<F> {
        let (fin, h) = (self.in_features, self.hidden);
        let mut z = Vec::with_capacity(n * h);
        for row in input.chunks_exact(fin).take(n) {
            z.extend_from_slice(&self.dense1_bias);
            let start = z.len() - h;
            let zr = &mut z[start..];
            for (k, &x) in row.iter().enumerate() {
                if x == F::zero() {
                    continue;
                }
                let wrow = &self.dense1_kernel[k * h..(k + 1) * h];
                for (a, &w) in zr.iter_mut().zip(wrow) {
                    *a = *a + x * w;
                }
            }
        }
        z
    }

    fn output(&self, features: &[F], n: usize) -> Vec<F> {
        features
            .chunks_exact(self.hidden)
            .take(n)
            .map(|row| {
                let z = row
                    .iter()
                    .zip(&self.dense2_kernel)
                    .fold(self.dense2_bias[0], |acc, (&a, &w)| acc + a * w);
                sigmoid(z)
            })
            .collect()
    }

    fn check_input(&self, input: &[F], n: usize) -> Result<()> {
        self.check()?;
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "head",
                msg: "empty batch".into(),
            });
        }
        if input.len() != n * self.in_features {
            return Err(shape_err("head", "input length", n * self.in_features, input.len()));
        }
        Ok(())
    }

    /// Inference-mode forward: BN uses moving statistics and dropout is off.
    pub fn forward_infer(&self, input: &[F], n: usize) -> Result<Vec<F>> {
        self.check_input(input, n)?;
        let mut a = self.dense1_relu(input, n);
        for v in a.iter_mut() {
            *v = v.max(F::zero());
        }
        for row in a.chunks_exact_mut(self.hidden) {
            for j in 0..self.hidden {
                let inv = (self.bn_moving_variance[j] + self.bn_epsilon).sqrt().recip();
                row[j] = self.bn_gamma[j] * (row[j] - self.bn_moving_mean[j]) * inv + self.bn_beta[j];
            }
        }
        Ok(self.output(&a, n))
    }

    /// Training-mode forward: BN normalizes with batch statistics and `mask`
    /// (`n × hidden` inverted-dropout multipliers) is applied after BN.
    pub fn forward_train(&self, input: &[F], n: usize, mask: &[F]) -> Result<(Vec<F>, HeadCache<F>)> {
        self.check_input(input, n)?;
        let h = self.hidden;
        if mask.len() != n * h {
            return Err(shape_err("head", "dropout mask length", n * h, mask.len()));
        }
        let pre_relu = self.dense1_relu(input, n);
        let act: Vec<F> = pre_relu.iter().map(|v| v.max(F::zero())).collect();

        let nf = F::from(n).unwrap();
        let mut mean = vec![F::zero(); h];
        for row in act.chunks_exact(h) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nf);
        let mut var = vec![F::zero(); h];
        for row in act.chunks_exact(h) {
            for j in 0..h {
                let d = row[j] - mean[j];
                var[j] = var[j] + d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / nf);
        let inv_std: Vec<F> = var.iter().map(|&v| (v + self.bn_epsilon).sqrt().recip()).collect();

        let mut normalized = Vec::with_capacity(n * h);
        let mut dropped = Vec::with_capacity(n * h);
        for (row, mrow) in act.chunks_exact(h).zip(mask.chunks_exact(h)) {
            for j in 0..h {
                let xh = (row[j] - mean[j]) * inv_std[j];
                normalized.push(xh);
                dropped.push((self.bn_gamma[j] * xh + self.bn_beta[j]) * mrow[j]);
            }
        }
        let probabilities = self.output(&dropped, n);
        let cache = HeadCache {
            batch: n,
            in_features: self.in_features,
            hidden: h,
            input: input.to_vec(),
            pre_relu,
            normalized,
            inv_std,
            mask: mask.to_vec(),
            dropped,
            gamma: self.bn_gamma.clone(),
            dense2_kernel: self.dense2_kernel.clone(),
            probabilities: probabilities.clone(),
            batch_mean: mean,
            batch_variance: var,
        };
        Ok((probabilities, cache))
    }
}

/// Reverse-mode gradients of a loss with respect to all trainable head
/// parameters, given `upstream[i] = ∂loss/∂probability[i]`.
pub fn head_backward<F: Float>(cache: &HeadCache<F>, upstream: &[F]) -> Result<HeadGrads<F>> {
    let (n, fin, h) = (cache.batch, cache.in_features, cache.hidden);
    if upstream.len() != n {
        return Err(shape_err("head_backward", "upstream gradient length", n, upstream.len()));
    }
    let consistent = cache.input.len() == n * fin
        && cache.pre_relu.len() == n * h
        && cache.normalized.len() == n * h
        && cache.mask.len() == n * h
        && cache.dropped.len() == n * h
        && cache.gamma.len() == h
        && cache.dense2_kernel.len() == h
        && cache.probabilities.len() == n;
    if !consistent {
        return Err(TensorError::InvalidArgument {
            op: "head_backward",
            msg: "cache buffers are inconsistent with the recorded batch geometry".into(),
        });
    }

    // Sigmoid.
    let dlogit: Vec<F> = upstream
        .iter()
        .zip(&cache.probabilities)
        .map(|(&g, &p)| g * p * (F::one() - p))
        .collect();

    // Dense2.
    let mut d2_kernel = vec![F::zero(); h];
    for (row, &g) in cache.dropped.chunks_exact(h).zip(&dlogit) {
        for (acc, &a) in d2_kernel.iter_mut().zip(row) {
            *acc = *acc + a * g;
        }
    }
    let d2_bias = vec![dlogit.iter().fold(F::zero(), |a, &b| a + b)];

    // Dropout, then BN affine.
    let mut dy = vec![F::zero(); n * h];
    for i in 0..n {
        for j in 0..h {
            dy[i * h + j] = dlogit[i] * cache.dense2_kernel[j] * cache.mask[i * h + j];
        }
    }
    let mut dgamma = vec![F::zero(); h];
    let mut dbeta = vec![F::zero(); h];
    for (dyr, xr) in dy.chunks_exact(h).zip(cache.normalized.chunks_exact(h)) {
        for j in 0..h {
            dgamma[j] = dgamma[j] + dyr[j] * xr[j];
            dbeta[j] = dbeta[j] + dyr[j];
        }
    }

    // BN normalization with batch statistics:
    // dx = inv_std/N · (N·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)), with dx̂ = dy·γ.
    let nf = F::from(n).unwrap();
    let mut dpre = vec![F::zero(); n * h];
    for j in 0..h {
        let g = cache.gamma[j];
        let mut sum_dxh = F::zero();
        let mut sum_dxh_xh = F::zero();
        for i in 0..n {
            let dxh = dy[i * h + j] * g;
            sum_dxh = sum_dxh + dxh;
            sum_dxh_xh = sum_dxh_xh + dxh * cache.normalized[i * h + j];
        }
        let scale = cache.inv_std[j] / nf;
        for i in 0..n {
            let idx = i * h + j;
            let dxh = dy[idx] * g;
            let dact = scale * (nf * dxh - sum_dxh - cache.normalized[idx] * sum_dxh_xh);
            // ReLU.
            dpre[idx] = if cache.pre_relu[idx] > F::zero() { dact } else { F::zero() };
        }
    }

    // Dense1.
    let mut d1_kernel = vec![F::zero(); fin * h];
    let mut d1_bias = vec![F::zero(); h];
    for (xr, dr) in cache.input.chunks_exact(fin).zip(dpre.chunks_exact(h)) {
        for (b, &d) in d1_bias.iter_mut().zip(dr) {
            *b = *b + d;
        }
        for (k, &x) in xr.iter().enumerate() {
            if x == F::zero() {
                continue;
            }
            for (acc, &d) in d1_kernel[k * h..(k + 1) * h].iter_mut().zip(dr) {
                *acc = *acc + x * d;
            }
        }
    }

    Ok(HeadGrads {
        dense1_kernel: d1_kernel,
        dense1_bias: d1_bias,
        bn_gamma: dgamma,
        bn_beta: dbeta,
        dense2_kernel: d2_kernel,
        dense2_bias: d2_bias,
    })
}
