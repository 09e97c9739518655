//! Randomized oracle comparisons shared by the integration tests and the
//! acceptance target. Each returns a one-line summary or the first failure.

use ctdiag_core::tensor::head::{head_backward, HeadParams};
use ctdiag_core::tensor::{conv2d, dense_affine, depthwise_conv2d, max_pool2d, ConvSpec, Padding, Tensor};
use ctdiag_core::trainer::bce_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;

pub type GateResult = Result<String, String>;

pub const KERNEL_TOL: f64 = 1e-5;

/// Norm-wise relative error: `max|a−b| / max|b|`.
pub fn normwise(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0f64, |m, &v| m.max(v.abs() as f64)).max(1e-30);
    let diff = a.iter().zip(b).fold(0f64, |m, (&x, &y)| m.max((x as f64 - y as f64).abs()));
    diff / scale
}

struct Case {
    d: Nhwc,
    k: usize,
    stride: usize,
    same: bool,
}

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    Case {
        d: Nhwc {
            n: rng.random_range(1..=3),
            h: rng.random_range(1..=9),
            w: rng.random_range(1..=9),
            c: rng.random_range(1..=5),
        },
        k: [1, 2, 3, 5][rng.random_range(0..4)],
        stride: rng.random_range(1..=3),
        same: rng.random_bool(0.5),
    }
}

fn padding(same: bool) -> Padding {
    if same {
        Padding::Same
    } else {
        Padding::Valid
    }
}

fn check_shape(op: &str, got: &Tensor, want: &[usize]) -> Result<(), String> {
    if got.shape() == want {
        Ok(())
    } else {
        Err(format!("{op}: shape {:?}, oracle {want:?}", got.shape()))
    }
}

/// `instances` valid random geometries; invalid VALID geometries must be
/// rejected and do not count.
pub fn conv2d_gate(instances: usize, seed: u64) -> GateResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut checked, mut rejected, mut worst) = (0, 0, 0f64);
    while checked < instances {
        let Case { d, k, stride, same } = random_case(&mut rng);
        let cout = rng.random_range(1..=5);
        let x = uniform_vec(&mut rng, d.n * d.h * d.w * d.c, -1.0, 1.0);
        let kern = uniform_vec(&mut rng, k * k * d.c * cout, -1.0, 1.0);
        let with_bias = rng.random_bool(0.3);
        let bias = uniform_vec(&mut rng, cout, -1.0, 1.0);
        let mut spec = ConvSpec::new(k, stride, padding(same));
        if with_bias {
            spec = spec.with_bias();
        }
        let xt = Tensor::new(vec![d.n, d.h, d.w, d.c], x.clone()).unwrap();
        let kt = Tensor::new(vec![k, k, d.c, cout], kern.clone()).unwrap();
        let got = conv2d(&xt, &kt, &spec, with_bias.then_some(&bias[..]));
        match conv2d_oracle(&x, &d, &kern, k, cout, stride, same, with_bias.then_some(&bias[..])) {
            Some((want, oh, ow)) => {
                let got = got.map_err(|e| format!("conv2d rejected a valid geometry: {e}"))?;
                check_shape("conv2d", &got, &[d.n, oh, ow, cout])?;
                let e = normwise(got.data(), &want);
                worst = worst.max(e);
                if e > KERNEL_TOL {
                    return Err(format!("conv2d k{k} s{stride} same={same} {}x{}x{}: rel {e:e}", d.h, d.w, d.c));
                }
                checked += 1;
            }
            None => {
                if got.is_ok() {
                    return Err(format!("conv2d accepted VALID k{k} on {}x{}", d.h, d.w));
                }
                rejected += 1;
            }
        }
    }
    Ok(format!("conv2d {checked} instances, worst rel {worst:.2e}, {rejected} invalid rejected"))
}

pub fn depthwise_gate(instances: usize, seed: u64) -> GateResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut checked, mut worst) = (0, 0f64);
    while checked < instances {
        let Case { d, k, stride, same } = random_case(&mut rng);
        let x = uniform_vec(&mut rng, d.n * d.h * d.w * d.c, -1.0, 1.0);
        let kern = uniform_vec(&mut rng, k * k * d.c, -1.0, 1.0);
        let xt = Tensor::new(vec![d.n, d.h, d.w, d.c], x.clone()).unwrap();
        let kt = Tensor::new(vec![k, k, d.c], kern.clone()).unwrap();
        let got = depthwise_conv2d(&xt, &kt, &ConvSpec::new(k, stride, padding(same)));
        match depthwise_oracle(&x, &d, &kern, k, stride, same) {
            Some((want, oh, ow)) => {
                let got = got.map_err(|e| format!("depthwise rejected a valid geometry: {e}"))?;
                check_shape("depthwise", &got, &[d.n, oh, ow, d.c])?;
                let e = normwise(got.data(), &want);
                worst = worst.max(e);
                if e > KERNEL_TOL {
                    return Err(format!("depthwise k{k} s{stride} same={same}: rel {e:e}"));
                }
                checked += 1;
            }
            None if got.is_ok() => return Err(format!("depthwise accepted VALID k{k} on {}x{}", d.h, d.w)),
            None => {}
        }
    }
    Ok(format!("depthwise {checked} instances, worst rel {worst:.2e}"))
}

pub fn max_pool_gate(instances: usize, seed: u64) -> GateResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    while checked < instances {
        let Case { d, k, stride, same } = random_case(&mut rng);
        let x = uniform_vec(&mut rng, d.n * d.h * d.w * d.c, -1.0, 1.0);
        let xt = Tensor::new(vec![d.n, d.h, d.w, d.c], x.clone()).unwrap();
        let got = max_pool2d(&xt, k, stride, padding(same));
        match max_pool_oracle(&x, &d, k, stride, same) {
            Some((want, oh, ow)) => {
                let got = got.map_err(|e| format!("max_pool rejected a valid geometry: {e}"))?;
                check_shape("max_pool", &got, &[d.n, oh, ow, d.c])?;
                // Max selects an input element, so agreement is exact.
                if got.data() != &want[..] {
                    return Err(format!("max_pool k{k} s{stride} same={same} differs"));
                }
                checked += 1;
            }
            None if got.is_ok() => return Err(format!("max_pool accepted VALID k{k} on {}x{}", d.h, d.w)),
            None => {}
        }
    }
    Ok(format!("max_pool {checked} instances, exact"))
}

pub fn dense_gate(instances: usize, seed: u64) -> GateResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..instances {
        let n = rng.random_range(1..=6);
        let fin = rng.random_range(1..=40);
        let fout = rng.random_range(1..=12);
        let x = uniform_vec(&mut rng, n * fin, -1.0, 1.0);
        let w = uniform_vec(&mut rng, fin * fout, -1.0, 1.0);
        let b = uniform_vec(&mut rng, fout, -1.0, 1.0);
        let got = dense_affine(
            &Tensor::new(vec![n, fin], x.clone()).unwrap(),
            &Tensor::new(vec![fin, fout], w.clone()).unwrap(),
            &b,
        )
        .map_err(|e| format!("dense rejected valid shapes: {e}"))?;
        check_shape("dense", &got, &[n, fout])?;
        let e = normwise(got.data(), &dense_oracle(&x, n, fin, &w, fout, &b));
        worst = worst.max(e);
        if e > KERNEL_TOL {
            return Err(format!("dense {n}x{fin}x{fout}: rel {e:e}"));
        }
    }
    Ok(format!("dense {instances} instances, worst rel {worst:.2e}"))
}

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely at `GRAD_TOL × FLOOR`.
pub const GRAD_FLOOR: f64 = 1e-3;

pub struct GradProblem {
    pub oracle: HeadOracle,
    pub x: Vec<f64>,
    pub n: usize,
    pub mask: Vec<f64>,
    pub y: Vec<f64>,
}

pub fn sample_grad_problem(rng: &mut ChaCha8Rng) -> GradProblem {
    let (fin, hidden, n) = (6, 5, 8);
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let mut g = |len: usize, s: f64| -> Vec<f64> { (0..len).map(|_| s * normal.sample(rng)).collect() };
        let oracle = HeadOracle {
            fin,
            hidden,
            w1: g(fin * hidden, 1.0),
            b1: g(hidden, 0.3),
            gamma: g(hidden, 0.3).into_iter().map(|v| 1.0 + v).collect(),
            beta: g(hidden, 0.3),
            w2: g(hidden, 0.7),
            b2: g(1, 0.2)[0],
            eps: 1e-3,
        };
        // Truncation error of the w1 differences grows with x²; unit-scale
        // pre-activations come from small inputs and larger weights.
        let x = g(n * fin, 0.5);
        let mask: Vec<f64> = (0..n * hidden)
            .map(|_| if rng.random_bool(0.2) { 0.0 } else { 1.25 })
            .collect();
        let y: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        // Stay clear of the ReLU kink so the step cannot cross it. BN divides
        // by the batch std of each unit, so a nearly constant unit turns the
        // fixed step into a large relative move; require std >= 0.3.
        let z = oracle.pre_relu(&x, n);
        let near_kink = z.iter().any(|v| v.abs() < 1e-2);
        let flat = (0..hidden).any(|j| {
            let a: Vec<f64> = (0..n).map(|i| z[i * hidden + j].max(0.0)).collect();
            let m = a.iter().sum::<f64>() / n as f64;
            a.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64) < 0.09
        });
        if !near_kink && !flat {
            return GradProblem { oracle, x, n, mask, y };
        }
    }
}

fn to_params(o: &HeadOracle) -> HeadParams<f64> {
    HeadParams {
        in_features: o.fin,
        hidden: o.hidden,
        dense1_kernel: o.w1.clone(),
        dense1_bias: o.b1.clone(),
        bn_gamma: o.gamma.clone(),
        bn_beta: o.beta.clone(),
        bn_moving_mean: vec![0.0; o.hidden],
        bn_moving_variance: vec![1.0; o.hidden],
        bn_epsilon: o.eps,
        dense2_kernel: o.w2.clone(),
        dense2_bias: vec![o.b2],
    }
}

fn central_difference(p: &GradProblem, perturb: impl Fn(&mut HeadOracle, f64)) -> f64 {
    let mut plus = p.oracle.clone();
    perturb(&mut plus, FD_STEP);
    let mut minus = p.oracle.clone();
    perturb(&mut minus, -FD_STEP);
    (plus.loss(&p.x, p.n, &p.mask, &p.y) - minus.loss(&p.x, p.n, &p.mask, &p.y)) / (2.0 * FD_STEP)
}

type Perturb = fn(&mut HeadOracle, usize, f64);

/// Library gradients (BCE + sigmoid + head, f64) against central differences
/// of the independent oracle loss, for every trainable parameter.
pub fn gradient_gate(batches: usize, seed: u64) -> GateResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = ["dense1_kernel", "dense1_bias", "bn_gamma", "bn_beta", "dense2_kernel", "dense2_bias"];
    let mut worst = [0f64; 6];
    let mut checked = 0usize;
    for _ in 0..batches {
        let p = sample_grad_problem(&mut rng);
        let params = to_params(&p.oracle);
        let (probs, cache) = params.forward_train(&p.x, p.n, &p.mask).map_err(|e| e.to_string())?;
        for (a, b) in probs.iter().zip(p.oracle.train_probs(&p.x, p.n, &p.mask)) {
            if (a - b).abs() > 1e-12 {
                return Err(format!("forward disagrees with oracle: {a} vs {b}"));
            }
        }
        let (_, upstream) = bce_loss(&probs, &p.y).map_err(|e| e.to_string())?;
        let g = head_backward(&cache, &upstream).map_err(|e| e.to_string())?;
        let classes: [(&[f64], Perturb); 6] = [
            (&g.dense1_kernel, |o, i, h| o.w1[i] += h),
            (&g.dense1_bias, |o, i, h| o.b1[i] += h),
            (&g.bn_gamma, |o, i, h| o.gamma[i] += h),
            (&g.bn_beta, |o, i, h| o.beta[i] += h),
            (&g.dense2_kernel, |o, i, h| o.w2[i] += h),
            (&g.dense2_bias, |o, _, h| o.b2 += h),
        ];
        for (c, (analytic, perturb)) in classes.iter().enumerate() {
            for (i, &a) in analytic.iter().enumerate() {
                let fd = central_difference(&p, |o, h| perturb(o, i, h));
                let e = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_FLOOR);
                worst[c] = worst[c].max(e);
                if e > GRAD_TOL {
                    return Err(format!("{}[{i}]: analytic {a:e} vs finite difference {fd:e} (rel {e:e})", names[c]));
                }
                checked += 1;
            }
        }
    }
    let worst_all = worst.iter().cloned().fold(0.0, f64::max);
    Ok(format!("{checked} gradients over {batches} batches, worst rel {worst_all:.2e}"))
}
