mod common;

use lge_core::tensor::{Activation, Graph, Mlp};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::Relu), Just(Activation::Tanh)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tape_gradients_match_finite_differences(
        widths in prop::collection::vec(1usize..9, 2..5),
        act in activation(),
        seed in any::<u64>(),
    ) {
        let err = common::mlp_gradient_error(&widths, act, seed, 60);
        prop_assert!(err < 1e-4, "relative error {err} for {widths:?}");
    }

    #[test]
    fn forward_and_gradient_are_pure(
        widths in prop::collection::vec(1usize..9, 2..5),
        act in activation(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(&widths, act, &mut rng).unwrap();
        let x = common::random_matrix(4, widths[0], 2.0, &mut rng);
        let grad = || {
            let mut g = Graph::new();
            let xin = g.constant(x.clone());
            let nodes = net.record(&mut g, xin, true).unwrap();
            let loss = g.sum(nodes.output);
            let grads = g.backward(loss).unwrap();
            net.flat_grad(&nodes, &grads).unwrap()
        };
        let (a, b) = (grad(), grad());
        prop_assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
        let (y1, y2) = (net.forward_batch(x.view()).unwrap(), net.forward_batch(x.view()).unwrap());
        prop_assert!(y1.iter().zip(y2.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}

#[test]
fn repository_shapes_pass_gradient_check() {
    for (i, widths) in [vec![6, 64, 64, 4], vec![6, 300, 400, 1]].iter().enumerate() {
        for act in [Activation::Relu, Activation::Tanh] {
            let err = common::mlp_gradient_error(widths, act, 100 + i as u64, 40);
            assert!(err < 1e-4, "{widths:?} {act:?}: {err}");
        }
    }
}
