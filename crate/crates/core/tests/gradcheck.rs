mod common;

use units_core::numcore::{ops, Tensor};

#[test]
fn every_primitive_matches_central_differences() {
    for (name, err) in common::gradcheck_suite(20, 11) {
        assert!(err < 1e-6, "{name}: max relative error {err:e}");
    }
}

#[test]
fn conv_backward_kernel_matches_probe_differences() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let x = common::random_tensor(&mut rng, &[2, 2, 4, 5], 1.0);
    let w = common::random_tensor(&mut rng, &[3, 2, 3, 3], 1.0);
    let b = common::random_tensor(&mut rng, &[3], 1.0);
    let probe = common::random_tensor(&mut rng, &[2, 3, 4, 5], 1.0);
    let f = |xs: &[Tensor]| {
        let y = ops::conv2d(&xs[0], &xs[1], &xs[2]).unwrap();
        y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum::<f64>()
    };
    let inputs = [x.clone(), w.clone(), b.clone()];
    let numeric = common::numeric_grads(&f, &inputs);
    let g = ops::conv2d_backward(&x, &w, &b, &probe, true).unwrap();
    let analytic = [g.input.unwrap(), g.weight, g.bias];
    assert!(common::max_rel_err(&analytic, &numeric) < 1e-6);
}
