//! Independent reference implementations used as test oracles. Nothing here
//! calls into the kernels under test; geometry and arithmetic are restated
//! from first principles with plain nested loops in f64.

#![allow(dead_code)]

pub mod gates;

use rand::Rng;

/// Output size and leading pad for one spatial axis.
pub fn axis_geometry(input: usize, k: usize, stride: usize, same: bool) -> Option<(usize, usize)> {
    if same {
        let out = input.div_ceil(stride);
        let needed = ((out - 1) * stride + k).saturating_sub(input);
        Some((out, needed / 2))
    } else if input >= k {
        Some(((input - k) / stride + 1, 0))
    } else {
        None
    }
}

pub struct Nhwc {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Nhwc {
    pub fn at(&self, b: usize, y: usize, x: usize, ch: usize) -> usize {
        ((b * self.h + y) * self.w + x) * self.c + ch
    }
}

/// Cross-correlation with zero padding; kernel `[kh][kw][cin][cout]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_oracle(
    x: &[f32],
    d: &Nhwc,
    kernel: &[f32],
    k: usize,
    cout: usize,
    stride: usize,
    same: bool,
    bias: Option<&[f32]>,
) -> Option<(Vec<f32>, usize, usize)> {
    let (oh, pt) = axis_geometry(d.h, k, stride, same)?;
    let (ow, pl) = axis_geometry(d.w, k, stride, same)?;
    let mut out = vec![0f32; d.n * oh * ow * cout];
    for b in 0..d.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = bias.map_or(0.0, |bb| bb[co] as f64);
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pt as isize;
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                continue;
                            }
                            for ci in 0..d.c {
                                let xv = x[d.at(b, iy as usize, ix as usize, ci)] as f64;
                                let kv = kernel[((ky * k + kx) * d.c + ci) * cout + co] as f64;
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * cout + co] = acc as f32;
                }
            }
        }
    }
    Some((out, oh, ow))
}

/// Per-channel cross-correlation; kernel `[kh][kw][c]`.
pub fn depthwise_oracle(
    x: &[f32],
    d: &Nhwc,
    kernel: &[f32],
    k: usize,
    stride: usize,
    same: bool,
) -> Option<(Vec<f32>, usize, usize)> {
    let (oh, pt) = axis_geometry(d.h, k, stride, same)?;
    let (ow, pl) = axis_geometry(d.w, k, stride, same)?;
    let mut out = vec![0f32; d.n * oh * ow * d.c];
    for b in 0..d.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..d.c {
                    let mut acc = 0f64;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pt as isize;
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                continue;
                            }
                            acc += x[d.at(b, iy as usize, ix as usize, ch)] as f64
                                * kernel[(ky * k + kx) * d.c + ch] as f64;
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * d.c + ch] = acc as f32;
                }
            }
        }
    }
    Some((out, oh, ow))
}

/// Max over the in-bounds part of each window (padding never wins).
pub fn max_pool_oracle(x: &[f32], d: &Nhwc, k: usize, stride: usize, same: bool) -> Option<(Vec<f32>, usize, usize)> {
    let (oh, pt) = axis_geometry(d.h, k, stride, same)?;
    let (ow, pl) = axis_geometry(d.w, k, stride, same)?;
    let mut out = Vec::with_capacity(d.n * oh * ow * d.c);
    for b in 0..d.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..d.c {
                    let mut best: Option<f32> = None;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pt as isize;
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                continue;
                            }
                            let v = x[d.at(b, iy as usize, ix as usize, ch)];
                            best = Some(best.map_or(v, |m: f32| m.max(v)));
                        }
                    }
                    out.push(best.expect("every window overlaps the input"));
                }
            }
        }
    }
    Some((out, oh, ow))
}

/// `x·W + b` with `x: n×fin`, `W: fin×fout`.
pub fn dense_oracle(x: &[f32], n: usize, fin: usize, w: &[f32], fout: usize, b: &[f32]) -> Vec<f32> {
    let mut out = vec![0f32; n * fout];
    for i in 0..n {
        for j in 0..fout {
            let mut acc = b[j] as f64;
            for k in 0..fin {
                acc += x[i * fin + k] as f64 * w[k * fout + j] as f64;
            }
            out[i * fout + j] = acc as f32;
        }
    }
    out
}

/// Largest elementwise `|a−b| / max(|b|, floor)`.
pub fn max_rel_err(a: &[f32], b: &[f32], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).abs() / (y as f64).abs().max(floor))
        .fold(0.0, f64::max)
}

pub fn uniform_vec(rng: &mut impl Rng, len: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

/// Plain-f64 head used as the loss oracle for gradient checks.
#[derive(Clone, Debug)]
pub struct HeadOracle {
    pub fin: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub eps: f64,
}

impl HeadOracle {
    /// Pre-activations of the first dense layer, `n × hidden`.
    pub fn pre_relu(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut z = vec![0.0; n * self.hidden];
        for i in 0..n {
            for j in 0..self.hidden {
                z[i * self.hidden + j] =
                    self.b1[j] + (0..self.fin).map(|k| x[i * self.fin + k] * self.w1[k * self.hidden + j]).sum::<f64>();
            }
        }
        z
    }

    /// Training-mode probabilities: batch-statistics BN (biased variance),
    /// then the fixed dropout multipliers.
    pub fn train_probs(&self, x: &[f64], n: usize, mask: &[f64]) -> Vec<f64> {
        let h = self.hidden;
        let a: Vec<f64> = self.pre_relu(x, n).into_iter().map(|v| v.max(0.0)).collect();
        let mut probs = vec![0.0; n];
        let mut y = vec![0.0; n * h];
        for j in 0..h {
            let mean = (0..n).map(|i| a[i * h + j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (a[i * h + j] - mean).powi(2)).sum::<f64>() / n as f64;
            for i in 0..n {
                y[i * h + j] =
                    (self.gamma[j] * (a[i * h + j] - mean) / (var + self.eps).sqrt() + self.beta[j]) * mask[i * h + j];
            }
        }
        for i in 0..n {
            let logit = self.b2 + (0..h).map(|j| y[i * h + j] * self.w2[j]).sum::<f64>();
            probs[i] = 1.0 / (1.0 + (-logit).exp());
        }
        probs
    }

    /// Mean binary cross-entropy (no clipping is reached for these inputs).
    pub fn loss(&self, x: &[f64], n: usize, mask: &[f64], y: &[f64]) -> f64 {
        let p = self.train_probs(x, n, mask);
        -p.iter()
            .zip(y)
            .map(|(&p, &t)| t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            .sum::<f64>()
            / n as f64
    }
}

/// Gaussian-textured 8-bit slice: a smooth random field (box-blurred white
/// noise of the given radius) around `mean` with spread `spread`.
pub fn textured_slice(rng: &mut impl Rng, side: usize, mean: f64, spread: f64, radius: usize) -> Vec<u8> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, 1.0).unwrap();
    let noise: Vec<f64> = (0..side * side).map(|_| normal.sample(rng)).collect();
    let r = radius as isize;
    let mut field = vec![0.0; side * side];
    for y in 0..side as isize {
        for x in 0..side as isize {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && yy < side as isize && xx < side as isize {
                        acc += noise[yy as usize * side + xx as usize];
                        cnt += 1.0;
                    }
                }
            }
            field[y as usize * side + x as usize] = acc / cnt * (2 * radius + 1) as f64;
        }
    }
    field
        .iter()
        .map(|v| (mean + spread * v).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// The two synthetic slice families: COVID slices are darker with coarse
/// texture, Non-COVID slices brighter with fine texture.
pub fn family_slice(rng: &mut impl Rng, side: usize, covid: bool) -> Vec<u8> {
    if covid {
        textured_slice(rng, side, 90.0, 25.0, 3)
    } else {
        textured_slice(rng, side, 150.0, 25.0, 0)
    }
}

/// Writes `root/{covid,non-covid}/<class>_<i>/slice_<j>.png` with
/// `per_class` volumes per class and `slices` slices per volume.
pub fn write_dataset(root: &std::path::Path, per_class: usize, slices: usize, side: usize, seed: u64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for (dir, covid) in [("covid", true), ("non-covid", false)] {
        for v in 0..per_class {
            let vd = root.join(dir).join(format!("{dir}_{v:03}"));
            std::fs::create_dir_all(&vd).unwrap();
            for s in 0..slices {
                let px = family_slice(&mut rng, side, covid);
                image::GrayImage::from_raw(side as u32, side as u32, px)
                    .unwrap()
                    .save(vd.join(format!("slice_{s:03}.png")))
                    .unwrap();
            }
        }
    }
}
