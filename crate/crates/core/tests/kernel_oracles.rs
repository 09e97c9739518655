mod common;

use common::gates::{conv2d_gate, dense_gate, depthwise_gate, max_pool_gate, normwise, KERNEL_TOL};
use common::*;
use ctdiag_core::tensor::{separable_conv2d, ConvSpec, Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 200;

#[test]
fn conv2d_matches_nested_loops() {
    let summary = conv2d_gate(INSTANCES, 11).unwrap();
    assert!(!summary.ends_with(" 0 invalid rejected"), "{summary}");
}

#[test]
fn depthwise_matches_nested_loops() {
    depthwise_gate(INSTANCES, 12).unwrap();
}

#[test]
fn max_pool_matches_nested_loops() {
    max_pool_gate(INSTANCES, 13).unwrap();
}

#[test]
fn dense_matches_nested_loops() {
    dense_gate(INSTANCES, 14).unwrap();
}

#[test]
fn separable_is_depthwise_then_pointwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..50 {
        let d = Nhwc {
            n: rng.random_range(1..=2),
            h: rng.random_range(3..=8),
            w: rng.random_range(3..=8),
            c: rng.random_range(1..=4),
        };
        let cout = rng.random_range(1..=4);
        let x = uniform_vec(&mut rng, d.n * d.h * d.w * d.c, -1.0, 1.0);
        let dw = uniform_vec(&mut rng, 9 * d.c, -1.0, 1.0);
        let pw = uniform_vec(&mut rng, d.c * cout, -1.0, 1.0);
        let (mid, oh, ow) = depthwise_oracle(&x, &d, &dw, 3, 1, true).unwrap();
        let md = Nhwc { n: d.n, h: oh, w: ow, c: d.c };
        let (want, _, _) = conv2d_oracle(&mid, &md, &pw, 1, cout, 1, true, None).unwrap();
        let got = separable_conv2d(
            &Tensor::new(vec![d.n, d.h, d.w, d.c], x).unwrap(),
            &Tensor::new(vec![3, 3, d.c], dw).unwrap(),
            &Tensor::new(vec![1, 1, d.c, cout], pw).unwrap(),
            &ConvSpec::new(3, 1, Padding::Same),
        )
        .unwrap();
        assert!(normwise(got.data(), &want) <= KERNEL_TOL);
    }
}

#[test]
fn oracle_geometry_agrees_with_size_formulas() {
    // SAME: ceil(n/s); VALID: floor((n−k)/s)+1.
    assert_eq!(axis_geometry(224, 3, 2, false), Some((111, 0)));
    assert_eq!(axis_geometry(109, 3, 2, true), Some((55, 1)));
    assert_eq!(axis_geometry(110, 3, 2, true), Some((55, 0)));
    assert_eq!(axis_geometry(4, 2, 2, true), Some((2, 0)));
    assert_eq!(axis_geometry(5, 2, 2, true), Some((3, 0)));
    assert_eq!(axis_geometry(6, 5, 1, true), Some((6, 2)));
    assert_eq!(axis_geometry(2, 3, 1, false), None);
}
