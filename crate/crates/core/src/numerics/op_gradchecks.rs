//! Finite-difference verification of every primitive operator.
//!
//! Each op is wrapped in a tiny graph whose only trainable leaf is the
//! tensor under test, reduced to a scalar through `mse` against a random
//! target so upstream gradients are non-uniform.

use crate::numerics::eval::Inputs;
use crate::numerics::gradcheck::{assert_gradients_match, GradCheck};
use crate::numerics::graph::{ActKind, Graph, NodeId, Op};
use crate::numerics::params::ParamStore;
use crate::numerics::rng::{derive_stream, RngStream};
use crate::numerics::tensor::Tensor;

fn tolerance() -> GradCheck {
    GradCheck {
        step: 1e-5,
        tolerance: 1e-4,
        max_coords_per_param: usize::MAX,
    }
}

fn randn(rng: &mut RngStream, shape: Vec<usize>) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    rng.fill_normal(t.data_mut());
    t
}

/// Random tensor bounded away from activation kinks at zero.
fn randn_off_kink(rng: &mut RngStream, shape: Vec<usize>) -> Tensor<f64> {
    let mut t = randn(rng, shape);
    for v in t.data_mut() {
        if v.abs() < 0.1 {
            *v = 0.1 * v.signum() + *v;
        }
        if *v == 0.0 {
            *v = 0.1;
        }
    }
    t
}

/// Build `loss = mse(f(params...), target)` and check all gradients.
fn check_against_target(
    seed: u64,
    build: impl FnOnce(&mut Graph, &mut ParamStore<f64>, &mut RngStream) -> NodeId,
) {
    let mut rng = derive_stream(0xC0FFEE, seed);
    let mut g = Graph::new();
    let mut store = ParamStore::new();
    let out = build(&mut g, &mut store, &mut rng);
    let target = g.input("target", g.shape(out).to_vec()).unwrap();
    let loss = g.push(Op::Mse, &[out, target]).unwrap();

    let target_val = randn(&mut rng, g.shape(out).to_vec());
    let inputs = Inputs::new().bind("target", target_val);
    assert_gradients_match(&g, &mut store, &inputs, loss, &tolerance());
}

fn unary_case(seed: u64, shape: Vec<usize>, op: Op, off_kink: bool) {
    check_against_target(seed, |g, store, rng| {
        let x = if off_kink {
            randn_off_kink(rng, shape.clone())
        } else {
            randn(rng, shape.clone())
        };
        store.insert("x", x);
        let xn = g.param("x", shape.clone()).unwrap();
        g.push(op, &[xn]).unwrap()
    });
}

#[test]
fn activations_all_seeds() {
    for seed in 0..20 {
        unary_case(seed, vec![4], Op::Relu, true);
        unary_case(100 + seed, vec![4], Op::LeakyRelu { slope: 0.2 }, true);
        unary_case(200 + seed, vec![4], Op::Silu, false);
        unary_case(300 + seed, vec![4], Op::Tanh, false);
        unary_case(400 + seed, vec![4], Op::Sigmoid, false);
        unary_case(500 + seed, vec![4], Op::Softplus, false);
    }
}

#[test]
fn scalar_and_shape_ops() {
    for seed in 0..20 {
        unary_case(seed, vec![2, 2], Op::MulScalar { c: -1.7 }, false);
        unary_case(40 + seed, vec![2, 3], Op::Flatten, false);
        unary_case(80 + seed, vec![6], Op::Reshape { shape: vec![2, 3] }, false);
        unary_case(120 + seed, vec![3], Op::SqrtEps { eps: 2.0 }, false); // inputs > -2 w.h.p. after offset
    }
}

#[test]
fn sqrt_eps_positive_domain() {
    for seed in 0..20 {
        check_against_target(seed, |g, store, rng| {
            let mut x = randn(rng, vec![5]);
            for v in x.data_mut() {
                *v = v.abs() + 0.5;
            }
            store.insert("x", x);
            let xn = g.param("x", vec![5]).unwrap();
            g.push(Op::SqrtEps { eps: 1e-12 }, &[xn]).unwrap()
        });
    }
}

#[test]
fn pools_and_resizes() {
    for seed in 0..20 {
        unary_case(seed, vec![1, 2, 4, 4], Op::AvgPool2x2, false);
        unary_case(40 + seed, vec![2, 1, 4, 4], Op::MaxPool2x2, false);
        unary_case(80 + seed, vec![1, 2, 2, 2], Op::UpsampleNearest2x, false);
        unary_case(120 + seed, vec![1, 2, 2, 2], Op::AvgUnpool2x2, false);
    }
}

#[test]
fn reductions() {
    for seed in 0..20 {
        unary_case(seed, vec![3, 4], Op::SumPerSample, false);
        // MeanAll produces [1]; mse against a random scalar still exercises it
        unary_case(40 + seed, vec![2, 3], Op::MeanAll, false);
    }
}

#[test]
fn add_mul_broadcast_variants() {
    let bcast_shapes: [(Vec<usize>, Vec<usize>); 4] = [
        (vec![2, 3], vec![2, 3]),
        (vec![2, 3], vec![1]),
        (vec![2, 3, 2, 2], vec![2]),
        (vec![2, 3, 2, 2], vec![2, 3]),
    ];
    for (case, (sa, sb)) in bcast_shapes.iter().enumerate() {
        for seed in 0..20 {
            for op in [Op::Add, Op::Mul] {
                let (sa, sb) = (sa.clone(), sb.clone());
                check_against_target((case * 100 + seed as usize) as u64, move |g, store, rng| {
                    store.insert("a", randn(rng, sa.clone()));
                    store.insert("b", randn(rng, sb.clone()));
                    let a = g.param("a", sa).unwrap();
                    let b = g.param("b", sb).unwrap();
                    g.push(op.clone(), &[a, b]).unwrap()
                });
            }
        }
    }
}

/// `ActGradMask` output is constant w.r.t. its argument; gradients still
/// flow correctly through tensors multiplied by the mask.
#[test]
fn act_grad_mask_passthrough() {
    for seed in 0..20 {
        let mut rng = derive_stream(0xD00D, seed);
        let mut g = Graph::new();
        let mut store = ParamStore::new();
        store.insert("x", randn(&mut rng, vec![6]));
        let x = g.param("x", vec![6]).unwrap();
        let z = g.input("z", vec![6]).unwrap();
        let mask = g
            .push(
                Op::ActGradMask {
                    kind: ActKind::LeakyRelu { slope: 0.2 },
                },
                &[z],
            )
            .unwrap();
        let out = g.push(Op::Mul, &[x, mask]).unwrap();
        let target = g.input("target", vec![6]).unwrap();
        let loss = g.push(Op::Mse, &[out, target]).unwrap();
        let inputs = Inputs::new()
            .bind("z", randn_off_kink(&mut rng, vec![6]))
            .bind("target", randn(&mut rng, vec![6]));
        assert_gradients_match(&g, &mut store, &inputs, loss, &tolerance());
    }
}

#[test]
fn concat_channels_grad() {
    for seed in 0..20 {
        check_against_target(seed, |g, store, rng| {
            store.insert("a", randn(rng, vec![2, 2, 2, 2]));
            store.insert("b", randn(rng, vec![2, 3, 2, 2]));
            let a = g.param("a", vec![2, 2, 2, 2]).unwrap();
            let b = g.param("b", vec![2, 3, 2, 2]).unwrap();
            g.push(Op::ConcatChannels, &[a, b]).unwrap()
        });
    }
}

#[test]
fn linear_grad() {
    for seed in 0..20 {
        check_against_target(seed, |g, store, rng| {
            store.insert("x", randn(rng, vec![3, 4]));
            store.insert("w", randn(rng, vec![2, 4]));
            store.insert("b", randn(rng, vec![2]));
            let x = g.param("x", vec![3, 4]).unwrap();
            let w = g.param("w", vec![2, 4]).unwrap();
            let b = g.param("b", vec![2]).unwrap();
            g.push(Op::Linear, &[x, w, b]).unwrap()
        });
    }
}

#[test]
fn linear_input_grad_op() {
    for seed in 0..20 {
        check_against_target(seed, |g, store, rng| {
            store.insert("gy", randn(rng, vec![3, 2]));
            store.insert("w", randn(rng, vec![2, 4]));
            let gy = g.param("gy", vec![3, 2]).unwrap();
            let w = g.param("w", vec![2, 4]).unwrap();
            g.push(Op::LinearInputGrad, &[gy, w]).unwrap()
        });
    }
}

#[test]
fn conv2d_grad() {
    for seed in 0..20 {
        for pad in [0usize, 1] {
            check_against_target(seed * 2 + pad as u64, move |g, store, rng| {
                store.insert("x", randn(rng, vec![2, 2, 4, 4]));
                store.insert("w", randn(rng, vec![3, 2, 3, 3]));
                store.insert("b", randn(rng, vec![3]));
                let x = g.param("x", vec![2, 2, 4, 4]).unwrap();
                let w = g.param("w", vec![3, 2, 3, 3]).unwrap();
                let b = g.param("b", vec![3]).unwrap();
                g.push(Op::Conv2d { padding: pad }, &[x, w, b]).unwrap()
            });
        }
    }
}

#[test]
fn conv2d_input_grad_op() {
    for seed in 0..20 {
        check_against_target(seed, |g, store, rng| {
            store.insert("gy", randn(rng, vec![1, 3, 4, 4]));
            store.insert("w", randn(rng, vec![3, 2, 3, 3]));
            let gy = g.param("gy", vec![1, 3, 4, 4]).unwrap();
            let w = g.param("w", vec![3, 2, 3, 3]).unwrap();
            g.push(Op::Conv2dInputGrad { padding: 1 }, &[gy, w]).unwrap()
        });
    }
}

#[test]
fn batch_norm_grad_training_mode() {
    for seed in 0..20 {
        check_against_target(seed, |g, store, rng| {
            store.insert("x", randn(rng, vec![3, 2, 2, 2]));
            store.insert("gamma", randn(rng, vec![2]));
            store.insert("beta", randn(rng, vec![2]));
            store.insert_state("rm", Tensor::zeros(vec![2]));
            store.insert_state("rv", Tensor::ones(vec![2]));
            let x = g.param("x", vec![3, 2, 2, 2]).unwrap();
            let ga = g.param("gamma", vec![2]).unwrap();
            let be = g.param("beta", vec![2]).unwrap();
            let rm = g.param("rm", vec![2]).unwrap();
            let rv = g.param("rv", vec![2]).unwrap();
            g.push(
                Op::BatchNorm {
                    eps: 1e-5,
                    momentum: 0.1,
                },
                &[x, ga, be, rm, rv],
            )
            .unwrap()
        });
    }
}

#[test]
fn softmax_cross_entropy_grad() {
    for seed in 0..20 {
        let mut rng = derive_stream(0xFEED, seed);
        let mut g = Graph::new();
        let mut store = ParamStore::new();
        store.insert("logits", randn(&mut rng, vec![4, 3]));
        let logits = g.param("logits", vec![4, 3]).unwrap();
        let labels = g.input("labels", vec![4]).unwrap();
        let loss = g.push(Op::SoftmaxCrossEntropy, &[logits, labels]).unwrap();
        let label_vals: Vec<f64> = (0..4).map(|_| rng.next_usize(3) as f64).collect();
        let inputs = Inputs::new().bind("labels", Tensor::from_vec(vec![4], label_vals));
        assert_gradients_match(&g, &mut store, &inputs, loss, &tolerance());
    }
}

#[test]
fn mse_grad_both_sides() {
    for seed in 0..20 {
        let mut rng = derive_stream(0xABCD, seed);
        let mut g = Graph::new();
        let mut store = ParamStore::new();
        store.insert("a", randn(&mut rng, vec![2, 3]));
        store.insert("b", randn(&mut rng, vec![2, 3]));
        let a = g.param("a", vec![2, 3]).unwrap();
        let b = g.param("b", vec![2, 3]).unwrap();
        let loss = g.push(Op::Mse, &[a, b]).unwrap();
        assert_gradients_match(&g, &mut store, &Inputs::new(), loss, &tolerance());
    }
}

/// Composite graph with shared weights and mixed ops, checked end to end.
#[test]
fn composite_network_grad() {
    for seed in 0..5 {
        check_against_target(seed, |g, store, rng| {
            store.insert("w1", randn(rng, vec![2, 1, 3, 3]));
            store.insert("b1", randn(rng, vec![2]));
            store.insert("w2", randn(rng, vec![3, 8]));
            store.insert("b2", randn(rng, vec![3]));
            let x_val = randn(rng, vec![2, 1, 4, 4]);
            store.insert("x", x_val);
            let x = g.param("x", vec![2, 1, 4, 4]).unwrap();
            let w1 = g.param("w1", vec![2, 1, 3, 3]).unwrap();
            let b1 = g.param("b1", vec![2]).unwrap();
            let c = g.push(Op::Conv2d { padding: 1 }, &[x, w1, b1]).unwrap();
            let a = g.push(Op::Silu, &[c]).unwrap();
            let p = g.push(Op::AvgPool2x2, &[a]).unwrap();
            let f = g.push(Op::Flatten, &[p]).unwrap();
            let w2 = g.param("w2", vec![3, 8]).unwrap();
            let b2 = g.param("b2", vec![3]).unwrap();
            g.push(Op::Linear, &[f, w2, b2]).unwrap()
        });
    }
}

mod shape_soundness {
    //! Any graph that passes construction must evaluate without shape
    //! errors on conforming inputs.

    use proptest::prelude::*;

    use crate::numerics::eval::{evaluate_graph, EvalOptions, Inputs};
    use crate::numerics::graph::{Graph, Op};
    use crate::numerics::params::ParamStore;
    use crate::numerics::rng::derive_stream;
    use crate::numerics::tensor::Tensor;

    fn unary_op(idx: u8) -> Op {
        match idx % 8 {
            0 => Op::Relu,
            1 => Op::LeakyRelu { slope: 0.2 },
            2 => Op::Silu,
            3 => Op::Tanh,
            4 => Op::Sigmoid,
            5 => Op::Softplus,
            6 => Op::AvgPool2x2,
            _ => Op::MaxPool2x2,
        }
    }

    proptest! {
        #[test]
        fn constructible_graphs_evaluate(
            batch in 1usize..3,
            ch in 1usize..4,
            side_pow in 2u32..5,
            ops in proptest::collection::vec(0u8..8, 1..6),
            seed in 0u64..1000,
        ) {
            let side = 2usize.pow(side_pow);
            let shape = vec![batch, ch, side, side];
            let mut g = Graph::new();
            let mut cur = g.input("x", shape.clone()).unwrap();
            for &o in &ops {
                match g.push(unary_op(o), &[cur]) {
                    Ok(id) => cur = id,
                    //構築 rejected (e.g. pooling odd sizes): nothing to evaluate
                    Err(_) => {}
                }
            }
            let mut store = ParamStore::<f32>::new();
            let mut rng = derive_stream(seed, 0);
            let mut x = Tensor::zeros(shape);
            rng.fill_normal(x.data_mut());
            let inputs = Inputs::new().bind("x", x);
            // must not fail: construction already validated all shapes
            evaluate_graph(&g, &mut store, &inputs, &EvalOptions::inference()).unwrap();
        }
    }
}

/// Determinism: identical graph, params and inputs give bitwise-identical
/// outputs across repeated evaluations and across rayon pool sizes.
#[test]
fn evaluation_is_bitwise_deterministic() {
    use crate::numerics::eval::{evaluate_graph, EvalOptions};
    let build = || {
        let mut g = Graph::new();
        let mut store = ParamStore::<f64>::new();
        let mut rng = derive_stream(7, 7);
        store.insert("w", randn(&mut rng, vec![4, 2, 3, 3]));
        store.insert("b", randn(&mut rng, vec![4]));
        let x = g.param("x", vec![3, 2, 8, 8]).unwrap();
        let w = g.param("w", vec![4, 2, 3, 3]).unwrap();
        let b = g.param("b", vec![4]).unwrap();
        let c = g.push(Op::Conv2d { padding: 1 }, &[x, w, b]).unwrap();
        let t = g.push(Op::Tanh, &[c]).unwrap();
        g.mark_output("y", t);
        store.insert("x", randn(&mut rng, vec![3, 2, 8, 8]));
        (g, store)
    };
    let (g1, mut s1) = build();
    let (g2, mut s2) = build();
    let v1 = evaluate_graph(&g1, &mut s1, &Inputs::new(), &EvalOptions::inference()).unwrap();
    let v2 = evaluate_graph(&g2, &mut s2, &Inputs::new(), &EvalOptions::inference()).unwrap();
    let a = v1.output(&g1, "y").unwrap().data();
    let b = v2.output(&g2, "y").unwrap().data();
    assert_eq!(a, b);
}
