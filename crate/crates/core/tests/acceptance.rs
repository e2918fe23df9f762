//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (visible with `cargo test --test acceptance --
//! --nocapture`). Tolerances are fixed here, not tuned at runtime.

use augbench_core::classify::{build_custom_cnn, build_vgg16, ModelKind};
use augbench_core::corpus::generate_synthetic_corpus;
use augbench_core::denoiser::{MlpDenoiser, UNet, UNetConfig};
use augbench_core::diffusion::{
    ancestral_sample, build_schedule, ddpm_loss, ddpm_loss_and_grads, forward_marginal,
    forward_step, NoisePredictor, SampleOptions, ScheduleKind,
};
use augbench_core::metrics::{
    classification_metrics, frechet_distance, run_stats, GaussianStats,
};
use augbench_core::numerics::eval::{evaluate_graph, EvalOptions, Inputs};
use augbench_core::numerics::gradcheck::{check_gradients, GradCheck};
use augbench_core::numerics::graph::{Graph, Op};
use augbench_core::numerics::{derive_stream, Adam, AdamConfig, ParamStore, RngStream, Tensor};
use augbench_core::pggan::{gan_loss, sample_generator, train_pggan, GanConfig, LossMode};
use augbench_core::selection::{greedy_k_select, LabeledDataset, Provenance, Record};

fn verdict(criterion: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion:>2} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

// -- 1. architecture fidelity ------------------------------------------

#[test]
fn criterion_01_architecture_fidelity() {
    let cnn = build_custom_cnn(128).unwrap();
    let per_layer: Vec<(String, usize)> = cnn
        .summary()
        .iter()
        .map(|l| (l.name.clone(), l.params))
        .collect();
    let expected = [
        ("conv2d_1", 1_792usize),
        ("batch_normalization_1", 256),
        ("max_pooling2d", 0),
        ("conv2d_2", 73_856),
        ("batch_normalization_2", 512),
        ("max_pooling2d", 0),
        ("conv2d_3", 295_168),
        ("batch_normalization_3", 1_024),
        ("max_pooling2d", 0),
        ("flatten", 0),
        ("dense_1", 16_777_472),
        ("dropout_1", 0),
        ("dense_2", 32_896),
        ("dropout_2", 0),
        ("dense_3", 258),
    ];
    let lines_match = per_layer.len() == expected.len()
        && per_layer
            .iter()
            .zip(expected.iter())
            .all(|((n, p), (en, ep))| n == en && p == ep);

    let cnn_ok = lines_match
        && cnn.total_params() == 17_183_234
        && cnn.trainable_params() == 17_182_338
        && cnn.non_trainable_params() == 896;

    let vgg = build_vgg16(224).unwrap();
    let head_dense = vgg
        .summary()
        .iter()
        .find(|l| l.name == "head.dense")
        .unwrap()
        .params;
    let head_out = vgg
        .summary()
        .iter()
        .find(|l| l.name == "head.dense_1")
        .unwrap()
        .params;
    let vgg_ok = vgg.backbone_params() == 14_714_688
        && head_dense == 12_845_568
        && head_out == 1_026
        && vgg.total_params() == 27_561_282;

    verdict(
        1,
        "architecture fidelity",
        cnn_ok && vgg_ok,
        &format!(
            "cnn total {} / trainable {} / non-trainable {}; vgg backbone {} + {} + {} = {}",
            cnn.total_params(),
            cnn.trainable_params(),
            cnn.non_trainable_params(),
            vgg.backbone_params(),
            head_dense,
            head_out,
            vgg.total_params()
        ),
    );
}

// -- 2. FID correctness --------------------------------------------------

fn random_psd_stats(dim: usize, n: usize, rng: &mut RngStream) -> GaussianStats {
    // sigma = A A^T + eps I, guaranteed symmetric PSD
    let a: Vec<f64> = (0..dim * dim).map(|_| rng.next_normal_f64()).collect();
    let mut sigma = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            let mut acc = 0.0;
            for k in 0..dim {
                acc += a[i * dim + k] * a[j * dim + k];
            }
            sigma[i * dim + j] = acc + if i == j { 1e-3 } else { 0.0 };
        }
    }
    let mu: Vec<f64> = (0..dim).map(|_| rng.next_normal_f64()).collect();
    GaussianStats { mu, sigma, dim, n }
}

#[test]
fn criterion_02_fid_correctness() {
    let mut rng = derive_stream(0xF1D, 0);

    // FID(X, X) <= 1e-6 on a general (non-diagonal) covariance
    let x = random_psd_stats(6, 100, &mut rng);
    let self_fid = frechet_distance(&x, &x).unwrap();

    // 20 random diagonal pairs match the closed form within 1e-5
    let mut max_diag_err = 0.0f64;
    for _ in 0..20 {
        let dim = 2 + rng.next_usize(5);
        let mk = |rng: &mut RngStream| {
            let mu: Vec<f64> = (0..dim).map(|_| rng.next_normal_f64()).collect();
            let d: Vec<f64> = (0..dim).map(|_| rng.next_range(0.05, 4.0)).collect();
            let mut sigma = vec![0.0; dim * dim];
            for (i, &v) in d.iter().enumerate() {
                sigma[i * dim + i] = v;
            }
            (GaussianStats { mu, sigma, dim, n: 50 }, d)
        };
        let (a, da) = mk(&mut rng);
        let (b, db) = mk(&mut rng);
        let got = frechet_distance(&a, &b).unwrap();
        let closed: f64 = a
            .mu
            .iter()
            .zip(&b.mu)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            + da.iter()
                .zip(&db)
                .map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2))
                .sum::<f64>();
        max_diag_err = max_diag_err.max((got - closed).abs());
    }

    // worked case: equal means, S1 = I, S2 = diag(4, 1) -> 1.0
    let eye = GaussianStats {
        mu: vec![0.0, 0.0],
        sigma: vec![1.0, 0.0, 0.0, 1.0],
        dim: 2,
        n: 10,
    };
    let stretched = GaussianStats {
        mu: vec![0.0, 0.0],
        sigma: vec![4.0, 0.0, 0.0, 1.0],
        dim: 2,
        n: 10,
    };
    let worked = frechet_distance(&eye, &stretched).unwrap();

    // symmetry on general PSD stats
    let y = random_psd_stats(6, 100, &mut rng);
    let sym_err = (frechet_distance(&x, &y).unwrap() - frechet_distance(&y, &x).unwrap()).abs();

    let pass = self_fid <= 1e-6
        && max_diag_err < 1e-5
        && (worked - 1.0).abs() <= 1e-6
        && sym_err <= 1e-6;
    verdict(
        2,
        "FID correctness",
        pass,
        &format!(
            "self {self_fid:.2e}, diag err {max_diag_err:.2e}, worked {worked:.9}, sym {sym_err:.2e}"
        ),
    );
}

// -- 3. diffusion math ----------------------------------------------------

#[test]
fn criterion_03_diffusion_math() {
    // exact recursion over the full desk schedule
    let s = build_schedule::<f64>(ScheduleKind::Linear, 200, 1e-4, 0.02).unwrap();
    let recursion_exact = (2..=200).all(|t| s.alpha_bar(t) == s.alpha_bar(t - 1) * s.alpha(t))
        && (2..=200).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1));

    // worked T = 4 example
    let s4 = build_schedule::<f64>(ScheduleKind::Linear, 4, 0.1, 0.4).unwrap();
    let abar4_err = (s4.alpha_bar(4) - 0.3024).abs();

    // marginal vs iterated moments, 1e4 chains, 3 sigma
    let s8 = build_schedule::<f64>(ScheduleKind::Linear, 8, 0.05, 0.3).unwrap();
    let n = 10_000usize;
    let x0 = Tensor::from_vec(vec![1], vec![1.5]);
    let mut rng = derive_stream(0xD1FF, 0);
    let mut iterated = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = x0.clone();
        for t in 1..=s8.len() {
            let mut eps = Tensor::zeros(vec![1]);
            rng.fill_normal(eps.data_mut());
            x = forward_step(&x, t, &s8, &eps).unwrap();
        }
        iterated.push(x.data()[0]);
    }
    let mut marginal = Vec::with_capacity(n);
    for _ in 0..n {
        let mut eps = Tensor::zeros(vec![1]);
        rng.fill_normal(eps.data_mut());
        marginal.push(forward_marginal(&x0, s8.len(), &s8, &eps).unwrap().data()[0]);
    }
    let stats = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (mean, var)
    };
    let (m1, v1) = stats(&iterated);
    let (m2, v2) = stats(&marginal);
    let se_mean = ((v1 + v2) / n as f64).sqrt();
    let se_var = ((2.0 * v1 * v1 + 2.0 * v2 * v2) / (n as f64 - 1.0)).sqrt();
    let moments_ok = (m1 - m2).abs() < 3.0 * se_mean && (v1 - v2).abs() < 3.0 * se_var;

    // perfect predictor: eps recovered analytically, loss exactly 0
    struct Perfect;
    impl NoisePredictor<f64> for Perfect {
        fn time_dim(&self) -> usize {
            2
        }
        fn emit(
            &self,
            g: &mut Graph,
            x_t: augbench_core::numerics::NodeId,
            _temb: augbench_core::numerics::NodeId,
        ) -> augbench_core::Result<augbench_core::numerics::NodeId> {
            let shape = g.shape(x_t).to_vec();
            let x0 = g.input("x0", shape)?;
            let inv = g.input("coef_inv", vec![1])?;
            let neg = g.input("coef_x0", vec![1])?;
            let sx0 = g.push(Op::Mul, &[x0, neg])?;
            let num = g.push(Op::Add, &[x_t, sx0])?;
            g.push(Op::Mul, &[num, inv])
        }
        fn bind_extras(
            &self,
            batch: &augbench_core::diffusion::DiffusionBatchSample<f64>,
            x0: &Tensor<f64>,
            schedule: &augbench_core::diffusion::NoiseSchedule<f64>,
            inputs: &mut Inputs<f64>,
        ) -> augbench_core::Result<()> {
            let ab = schedule.alpha_bar(batch.t[0]);
            inputs.set("x0", x0.clone());
            inputs.set("coef_inv", Tensor::scalar(1.0 / (1.0 - ab).sqrt()));
            inputs.set("coef_x0", Tensor::scalar(-ab.sqrt()));
            Ok(())
        }
    }
    let s1 = build_schedule::<f64>(ScheduleKind::Linear, 1, 0.25, 0.25).unwrap();
    let mut x0b = Tensor::zeros(vec![16, 2]);
    rng.fill_normal(x0b.data_mut());
    let mut empty = ParamStore::new();
    let perfect_loss = ddpm_loss(&x0b, &Perfect, &mut empty, &s1, &mut rng).unwrap();

    let pass = recursion_exact && abar4_err < 1e-12 && moments_ok && perfect_loss.abs() < 1e-12;
    verdict(
        3,
        "diffusion math",
        pass,
        &format!(
            "recursion {recursion_exact}, abar4 err {abar4_err:.2e}, moments({m1:.3}/{m2:.3}, {v1:.3}/{v2:.3}), perfect loss {perfect_loss:.2e}"
        ),
    );
}

// -- 4. toy DDPM recovery --------------------------------------------------

fn mixture_batch(n: usize, rng: &mut RngStream) -> Tensor<f32> {
    let mut t = Tensor::zeros(vec![n, 2]);
    for i in 0..n {
        let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
        t.data_mut()[i * 2] = (sign * 2.0 + 0.3 * rng.next_normal_f64()) as f32;
        t.data_mut()[i * 2 + 1] = (0.3 * rng.next_normal_f64()) as f32;
    }
    t
}

#[test]
fn criterion_04_toy_ddpm_recovery() {
    let mut passes = 0usize;
    let mut details = Vec::new();
    for seed in 0..5u64 {
        let schedule = build_schedule::<f32>(ScheduleKind::Linear, 50, 0.01, 0.3).unwrap();
        let model = MlpDenoiser::new("toy", 2, 64, 32).unwrap();
        let mut store = ParamStore::new();
        let mut rng = derive_stream(1000 + seed, 0);
        model.register(&mut store, &mut rng);
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..3000 {
            let x0 = mixture_batch(128, &mut rng);
            ddpm_loss_and_grads(&x0, &model, &mut store, &schedule, &mut rng).unwrap();
            adam.step(&mut store, 1e-3).unwrap();
        }
        let samples = ancestral_sample(
            &model,
            &mut store,
            &schedule,
            2000,
            &[2],
            &mut derive_stream(2000 + seed, 0),
            &SampleOptions {
                clamp: None,
                chunk: 512,
            },
        )
        .unwrap();
        let (mut nl, mut nr) = (0usize, 0usize);
        let (mut ml, mut mr) = ([0f64; 2], [0f64; 2]);
        for i in 0..2000 {
            let x = samples.data()[i * 2] as f64;
            let y = samples.data()[i * 2 + 1] as f64;
            // assign to the nearer true component
            if x < 0.0 {
                nl += 1;
                ml[0] += x;
                ml[1] += y;
            } else {
                nr += 1;
                mr[0] += x;
                mr[1] += y;
            }
        }
        let ml = [ml[0] / nl.max(1) as f64, ml[1] / nl.max(1) as f64];
        let mr = [mr[0] / nr.max(1) as f64, mr[1] / nr.max(1) as f64];
        let dl = ((ml[0] + 2.0).powi(2) + ml[1].powi(2)).sqrt();
        let dr = ((mr[0] - 2.0).powi(2) + mr[1].powi(2)).sqrt();
        let frac = nl as f64 / 2000.0;
        let ok = dl < 0.3 && dr < 0.3 && (frac - 0.5).abs() < 0.1;
        if ok {
            passes += 1;
        }
        details.push(format!("seed {seed}: d=({dl:.2},{dr:.2}) f={frac:.2}"));
    }
    verdict(
        4,
        "toy DDPM recovery",
        passes >= 4,
        &format!("{passes}/5 seeds [{}]", details.join("; ")),
    );
}

// -- 5. gradient suite ------------------------------------------------------

#[test]
fn criterion_05_gradient_suite() {
    let tol = GradCheck {
        step: 1e-5,
        tolerance: 1e-3,
        max_coords_per_param: usize::MAX,
    };
    let mut failures: Vec<String> = Vec::new();
    let mut rng = derive_stream(0x5EED, 0);

    // every primitive op with parameter-bearing inputs, small shapes
    let mut check_named = |name: &str, build: &dyn Fn(&mut Graph, &mut ParamStore<f64>, &mut RngStream) -> augbench_core::numerics::NodeId,
                           extra: &dyn Fn(&mut Inputs<f64>, &mut RngStream)| {
        let mut g = Graph::new();
        let mut store = ParamStore::new();
        let out = build(&mut g, &mut store, &mut rng);
        let loss = if g.shape(out) == [1] {
            out
        } else {
            let target = g.input("target", g.shape(out).to_vec()).unwrap();
            g.push(Op::Mse, &[out, target]).unwrap()
        };
        let mut inputs = Inputs::new();
        if g.shape(out) != [1] {
            let mut t = Tensor::zeros(g.shape(out).to_vec());
            rng.fill_normal(t.data_mut());
            inputs.set("target", t);
        }
        extra(&mut inputs, &mut rng);
        match check_gradients(&g, &mut store, &inputs, loss, &tol) {
            Ok(f) if f.is_empty() => {}
            Ok(f) => failures.push(format!("{name}: {} coords", f.len())),
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    };

    let no_extra: &dyn Fn(&mut Inputs<f64>, &mut RngStream) = &|_, _| {};

    for (name, op, kinked) in [
        ("relu", Op::Relu, true),
        ("leaky_relu", Op::LeakyRelu { slope: 0.2 }, true),
        ("silu", Op::Silu, false),
        ("tanh", Op::Tanh, false),
        ("sigmoid", Op::Sigmoid, false),
        ("softplus", Op::Softplus, false),
        ("mul_scalar", Op::MulScalar { c: -2.3 }, false),
        ("flatten", Op::Flatten, false),
        ("reshape", Op::Reshape { shape: vec![3, 2] }, false),
        ("sum_per_sample", Op::SumPerSample, false),
        ("mean_all", Op::MeanAll, false),
        ("sqrt_eps", Op::SqrtEps { eps: 4.0 }, false),
    ] {
        let op2 = op.clone();
        check_named(
            name,
            &move |g, store, rng| {
                let x = if kinked {
                    let mut t = Tensor::<f64>::zeros(vec![2, 3]);
                    for v in t.data_mut() {
                        let z = rng.next_normal_f64();
                        *v = z + 0.15 * z.signum() + if z == 0.0 { 0.2 } else { 0.0 };
                    }
                    t
                } else {
                    let mut t = Tensor::<f64>::zeros(vec![2, 3]);
                    rng.fill_normal(t.data_mut());
                    t
                };
                store.insert("x", x);
                let xn = g.param("x", vec![2, 3]).unwrap();
                g.push(op2.clone(), &[xn]).unwrap()
            },
            no_extra,
        );
    }

    for (name, pool_op) in [
        ("avg_pool_2x2", Op::AvgPool2x2),
        ("max_pool_2x2", Op::MaxPool2x2),
        ("upsample_nearest_2x", Op::UpsampleNearest2x),
        ("avg_unpool_2x2", Op::AvgUnpool2x2),
    ] {
        let op2 = pool_op.clone();
        check_named(
            name,
            &move |g, store, rng| {
                let mut t = Tensor::<f64>::zeros(vec![1, 2, 4, 4]);
                rng.fill_normal(t.data_mut());
                store.insert("x", t);
                let xn = g.param("x", vec![1, 2, 4, 4]).unwrap();
                g.push(op2.clone(), &[xn]).unwrap()
            },
            no_extra,
        );
    }

    for (name, op) in [("add", Op::Add), ("mul", Op::Mul)] {
        for (case, sb) in [(0usize, vec![2, 3]), (1, vec![1]), (2, vec![2])] {
            let op2 = op.clone();
            let sb2 = sb.clone();
            check_named(
                &format!("{name}/b{case}"),
                &move |g, store, rng| {
                    let sa = vec![2, 3];
                    let mut a = Tensor::<f64>::zeros(sa.clone());
                    rng.fill_normal(a.data_mut());
                    let mut b = Tensor::<f64>::zeros(sb2.clone());
                    rng.fill_normal(b.data_mut());
                    store.insert("a", a);
                    store.insert("b", b);
                    let an = g.param("a", sa).unwrap();
                    let bn = g.param("b", sb2.clone()).unwrap();
                    g.push(op2.clone(), &[an, bn]).unwrap()
                },
                no_extra,
            );
        }
    }

    check_named(
        "concat_channels",
        &|g, store, rng| {
            store.insert("a", {
                let mut t = Tensor::<f64>::zeros(vec![2, 2, 2, 2]);
                rng.fill_normal(t.data_mut());
                t
            });
            store.insert("b", {
                let mut t = Tensor::<f64>::zeros(vec![2, 1, 2, 2]);
                rng.fill_normal(t.data_mut());
                t
            });
            let a = g.param("a", vec![2, 2, 2, 2]).unwrap();
            let b = g.param("b", vec![2, 1, 2, 2]).unwrap();
            g.push(Op::ConcatChannels, &[a, b]).unwrap()
        },
        no_extra,
    );

    check_named(
        "linear",
        &|g, store, rng| {
            store.insert("x", randn_of(rng, vec![3, 4]));
            store.insert("w", randn_of(rng, vec![2, 4]));
            store.insert("b", randn_of(rng, vec![2]));
            let x = g.param("x", vec![3, 4]).unwrap();
            let w = g.param("w", vec![2, 4]).unwrap();
            let b = g.param("b", vec![2]).unwrap();
            g.push(Op::Linear, &[x, w, b]).unwrap()
        },
        no_extra,
    );
    check_named(
        "linear_input_grad",
        &|g, store, rng| {
            store.insert("gy", randn_of(rng, vec![3, 2]));
            store.insert("w", randn_of(rng, vec![2, 4]));
            let gy = g.param("gy", vec![3, 2]).unwrap();
            let w = g.param("w", vec![2, 4]).unwrap();
            g.push(Op::LinearInputGrad, &[gy, w]).unwrap()
        },
        no_extra,
    );
    for pad in [0usize, 1] {
        check_named(
            &format!("conv2d/p{pad}"),
            &move |g, store, rng| {
                store.insert("x", randn_of(rng, vec![1, 2, 4, 4]));
                store.insert("w", randn_of(rng, vec![2, 2, 3, 3]));
                store.insert("b", randn_of(rng, vec![2]));
                let x = g.param("x", vec![1, 2, 4, 4]).unwrap();
                let w = g.param("w", vec![2, 2, 3, 3]).unwrap();
                let b = g.param("b", vec![2]).unwrap();
                g.push(Op::Conv2d { padding: pad }, &[x, w, b]).unwrap()
            },
            no_extra,
        );
    }
    check_named(
        "conv2d_input_grad",
        &|g, store, rng| {
            store.insert("gy", randn_of(rng, vec![1, 2, 4, 4]));
            store.insert("w", randn_of(rng, vec![2, 2, 3, 3]));
            let gy = g.param("gy", vec![1, 2, 4, 4]).unwrap();
            let w = g.param("w", vec![2, 2, 3, 3]).unwrap();
            g.push(Op::Conv2dInputGrad { padding: 1 }, &[gy, w]).unwrap()
        },
        no_extra,
    );
    check_named(
        "batch_norm",
        &|g, store, rng| {
            store.insert("x", randn_of(rng, vec![3, 2, 2, 2]));
            store.insert("gamma", randn_of(rng, vec![2]));
            store.insert("beta", randn_of(rng, vec![2]));
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
        },
        no_extra,
    );
    check_named(
        "softmax_cross_entropy",
        &|g, store, rng| {
            store.insert("logits", randn_of(rng, vec![4, 3]));
            let logits = g.param("logits", vec![4, 3]).unwrap();
            let labels = g.input("labels", vec![4]).unwrap();
            g.push(Op::SoftmaxCrossEntropy, &[logits, labels]).unwrap()
        },
        &|inputs, rng| {
            let labels: Vec<f64> = (0..4).map(|_| rng.next_usize(3) as f64).collect();
            inputs.set("labels", Tensor::from_vec(vec![4], labels));
        },
    );
    check_named(
        "mse",
        &|g, store, rng| {
            store.insert("a", randn_of(rng, vec![2, 3]));
            store.insert("b", randn_of(rng, vec![2, 3]));
            let a = g.param("a", vec![2, 3]).unwrap();
            let b = g.param("b", vec![2, 3]).unwrap();
            g.push(Op::Mse, &[a, b]).unwrap()
        },
        no_extra,
    );
    check_named(
        "act_grad_mask_flow",
        &|g, store, rng| {
            store.insert("x", randn_of(rng, vec![6]));
            let x = g.param("x", vec![6]).unwrap();
            let z = g.input("z", vec![6]).unwrap();
            let mask = g
                .push(
                    Op::ActGradMask {
                        kind: augbench_core::numerics::ActKind::LeakyRelu { slope: 0.2 },
                    },
                    &[z],
                )
                .unwrap();
            g.push(Op::Mul, &[x, mask]).unwrap()
        },
        &|inputs, rng| {
            inputs.set("z", {
                let mut t = Tensor::<f64>::zeros(vec![6]);
                for v in t.data_mut() {
                    let z = rng.next_normal_f64();
                    *v = z + 0.2 * z.signum() + if z == 0.0 { 0.3 } else { 0.0 };
                }
                t
            });
        },
    );

    // full 8x8 U-Net, f64 mode
    {
        let unet = UNet::new(
            "u",
            UNetConfig {
                input_size: 8,
                base_channels: 2,
                depth: 2,
                time_dim: 4,
                channels: 1,
            },
        )
        .unwrap();
        let mut store = ParamStore::<f64>::new();
        unet.register(&mut store, &mut rng);
        let mut g = Graph::new();
        let x = g.input("x_t", vec![2, 1, 8, 8]).unwrap();
        let temb = g.input("temb", vec![2, 4]).unwrap();
        let out = NoisePredictor::<f64>::emit(&unet, &mut g, x, temb).unwrap();
        let target = g.input("target", vec![2, 1, 8, 8]).unwrap();
        let loss = g.push(Op::Mse, &[out, target]).unwrap();
        let inputs = Inputs::new()
            .bind("x_t", randn_of(&mut rng, vec![2, 1, 8, 8]))
            .bind(
                "temb",
                augbench_core::denoiser::time_embed_batch(&[3, 7], 4).unwrap(),
            )
            .bind("target", randn_of(&mut rng, vec![2, 1, 8, 8]));
        match check_gradients(&g, &mut store, &inputs, loss, &tol) {
            Ok(f) if f.is_empty() => {}
            Ok(f) => failures.push(format!("unet_8x8: {} coords", f.len())),
            Err(e) => failures.push(format!("unet_8x8: {e}")),
        }
    }

    verdict(
        5,
        "gradient suite",
        failures.is_empty(),
        &if failures.is_empty() {
            "all primitive ops + 8x8 U-Net within 1e-3".to_string()
        } else {
            failures.join(", ")
        },
    );
}

fn randn_of(rng: &mut RngStream, shape: Vec<usize>) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    rng.fill_normal(t.data_mut());
    t
}

// -- 6. greedy-K oracle ----------------------------------------------------

/// Independent brute-force farthest-point traversal over raw points.
fn oracle_farthest_point(points: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = points.len();
    let dim = points[0].len();
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut centroid = vec![0.0; dim];
    for p in points {
        for (c, v) in centroid.iter_mut().zip(p) {
            *c += v;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n as f64);
    let mut selected: Vec<usize> = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut seed = 0;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, &centroid);
        if d > best {
            best = d;
            seed = i;
        }
    }
    selected.push(seed);
    while selected.len() < k {
        let mut pick = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for i in 0..n {
            if selected.contains(&i) {
                continue;
            }
            // recompute min distance to the selected set from scratch
            let min_d = selected
                .iter()
                .map(|&s| dist2(&points[i], &points[s]))
                .fold(f64::INFINITY, f64::min);
            if min_d > best {
                best = min_d;
                pick = i;
            }
        }
        selected.push(pick);
    }
    selected
}

#[test]
fn criterion_06_greedy_k_oracle() {
    // worked 1-D example
    let mut ds = LabeledDataset::new(vec!["c".into()], Provenance::Original, 1, 1);
    for (i, &p) in [0.0f32, 1.0, 2.0, 10.0].iter().enumerate() {
        ds.push(Record {
            id: format!("p{i}"),
            class: 0,
            pixels: Tensor::from_vec(vec![1, 1, 1], vec![p]),
        })
        .unwrap();
    }
    let worked = greedy_k_select(&ds, 3).unwrap() == vec![3, 0, 2];

    let mut rng = derive_stream(0x6EED, 0);
    let mut mismatches = 0usize;
    for _case in 0..200 {
        let n = 2 + rng.next_usize(11); // 2..=12 points
        let dim = 1 + rng.next_usize(3); // vectors as 1 x dim images
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.next_normal_f64()).collect())
            .collect();
        let k = 1 + rng.next_usize(n);
        let mut ds = LabeledDataset::new(vec!["c".into()], Provenance::Original, 1, dim);
        for (i, p) in points.iter().enumerate() {
            ds.push(Record {
                id: format!("p{i}"),
                class: 0,
                pixels: Tensor::from_vec(vec![1, 1, dim], p.iter().map(|&v| v as f32).collect()),
            })
            .unwrap();
        }
        // oracle runs on the same f32-rounded coordinates the dataset holds
        let rounded: Vec<Vec<f64>> = points
            .iter()
            .map(|p| p.iter().map(|&v| v as f32 as f64).collect())
            .collect();
        let got = greedy_k_select(&ds, k).unwrap();
        let want = oracle_farthest_point(&rounded, k);
        if got != want {
            mismatches += 1;
        }
    }
    verdict(
        6,
        "greedy-K oracle",
        worked && mismatches == 0,
        &format!("worked example {worked}, {mismatches}/200 mismatches"),
    );
}

// -- 7. GAN components -------------------------------------------------------

#[test]
fn criterion_07_gan_components() {
    // equalized-LR equivalence within 1e-6
    let mut rng = derive_stream(0x6A4, 0);
    let spec = augbench_core::nn::Conv2dSpec::new("eq", 3, 4, 3, 1).equalized();
    let mut store = ParamStore::<f32>::new();
    spec.register(&mut store, &mut rng);
    let mut g = Graph::new();
    let x = g.input("x", vec![2, 3, 6, 6]).unwrap();
    let y = spec.emit(&mut g, x).unwrap();
    g.mark_output("y", y);
    let scale = (2.0f32 / spec.fan_in() as f32).sqrt();
    let mut plain_store = ParamStore::<f32>::new();
    plain_store.insert("p.w", store.get("eq.w").unwrap().map(|v| v * scale));
    plain_store.insert("p.b", store.get("eq.b").unwrap().clone());
    let plain = augbench_core::nn::Conv2dSpec::new("p", 3, 4, 3, 1);
    let mut g2 = Graph::new();
    let x2 = g2.input("x", vec![2, 3, 6, 6]).unwrap();
    let y2 = plain.emit(&mut g2, x2).unwrap();
    g2.mark_output("y", y2);
    let mut xv = Tensor::zeros(vec![2, 3, 6, 6]);
    rng.fill_normal(xv.data_mut());
    let inputs = Inputs::new().bind("x", xv);
    let a = evaluate_graph(&g, &mut store, &inputs, &EvalOptions::inference()).unwrap();
    let b = evaluate_graph(&g2, &mut plain_store, &inputs, &EvalOptions::inference()).unwrap();
    let eq_err = a
        .output(&g, "y")
        .unwrap()
        .data()
        .iter()
        .zip(b.output(&g2, "y").unwrap().data())
        .map(|(u, v)| (u - v).abs())
        .fold(0.0f32, f32::max);

    // fade blend endpoints and midpoint
    let blend = |alpha: f32, old: f32, new: f32| alpha * new + (1.0 - alpha) * old;
    let endpoints_ok = blend(0.0, 0.2, 0.6) == 0.2
        && blend(1.0, 0.2, 0.6) == 0.6
        && (blend(0.5, 0.2, 0.6) - 0.4).abs() < 1e-7;

    // logistic loss at (0.5, 0.5)
    let (l_d, _) = gan_loss(&[0.5], &[0.5], LossMode::Logistic).unwrap();
    let logistic_err = (l_d + 1.38629).abs();

    // degenerate-dataset smoke: 8x8, 2000 steps, fixed seed
    let src = generate_synthetic_corpus(1, 32, &mut derive_stream(5, 0)).unwrap();
    let full = src.records()[0].pixels.data().to_vec();
    let mut p16 = vec![0f32; 256];
    augbench_core::numerics::kernels::avg_pool_2x2(&full, 1, 32, 32, &mut p16);
    let mut p8 = vec![0f32; 64];
    augbench_core::numerics::kernels::avg_pool_2x2(&p16, 1, 16, 16, &mut p8);
    let target = Tensor::from_vec(vec![1, 8, 8], p8.clone());
    let mut ds = LabeledDataset::new(vec!["c".into()], Provenance::Train, 8, 8);
    for i in 0..8 {
        ds.push(Record {
            id: format!("i{i}"),
            class: 0,
            pixels: target.clone(),
        })
        .unwrap();
    }
    let cfg = GanConfig {
        latent_dim: 16,
        target_resolution: 8,
        batch_size: 4,
        steps_per_stage: 1000, // 2 stages -> 2000 optimizer iterations
        filter_override: Some(24),
        ..Default::default()
    };
    let result = train_pggan(&ds, &cfg, &mut derive_stream(77, 0)).unwrap();
    let gen = augbench_core::pggan::Generator::new(&cfg).unwrap();
    let mut params = result.generator.clone();
    let samples = sample_generator(&gen, &mut params, &cfg, 256, &mut derive_stream(78, 0)).unwrap();
    let mut mean = vec![0f64; 64];
    for i in 0..256 {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += samples.data()[i * 64 + j] as f64 / 256.0;
        }
    }
    let smoke_err = mean
        .iter()
        .zip(&p8)
        .map(|(m, &t)| (m - t as f64).abs())
        .fold(0.0f64, f64::max);

    let pass = eq_err < 1e-6
        && endpoints_ok
        && logistic_err <= 1e-5
        && result.aborted.is_none()
        && smoke_err < 0.1;
    verdict(
        7,
        "GAN components",
        pass,
        &format!(
            "equalized {eq_err:.2e}, endpoints {endpoints_ok}, logistic err {logistic_err:.2e}, smoke max|err| {smoke_err:.4}"
        ),
    );
}

// -- 8. metrics & aggregation -------------------------------------------------

#[test]
fn criterion_08_metrics_and_aggregation() {
    let mut preds = vec![1usize; 10];
    let mut labels = vec![1usize; 8];
    labels.extend([0, 0]); // 8 TP, 2 FP
    preds.push(0);
    labels.push(1); // 1 FN
    preds.extend(vec![0usize; 9]);
    labels.extend(vec![0usize; 9]); // 9 TN
    let m = classification_metrics(&preds, &labels, 1).unwrap();
    let conf_ok = (m.accuracy - 0.85).abs() < 1e-12
        && (m.precision - 0.8).abs() < 1e-12
        && (m.recall - 0.88889).abs() < 1e-5
        && (m.f1 - 0.84211).abs() < 1e-5;

    let agg = run_stats(&[0.90, 0.92, 0.91, 0.93, 0.89]).unwrap();
    let agg_ok = (agg.mean - 0.91).abs() < 1e-5 && (agg.std - 0.01581).abs() < 1e-5;

    verdict(
        8,
        "metrics & aggregation",
        conf_ok && agg_ok,
        &format!(
            "acc {:.4} prec {:.4} rec {:.5} f1 {:.5}; runs {:.3} +- {:.5}",
            m.accuracy, m.precision, m.recall, m.f1, agg.mean, agg.std
        ),
    );
}

// -- 9. FID sanity ordering ----------------------------------------------------

#[test]
fn criterion_09_fid_sanity_ordering() {
    use augbench_core::metrics::{feature_stats, PixelFeaturizer};
    use augbench_core::pipeline::{train_ddpm, DdpmConfig};

    let corpus = generate_synthetic_corpus(500, 32, &mut derive_stream(42, 0)).unwrap();
    let class0 = corpus.indices_by_class()[0].clone();
    let real = corpus.subset(&class0, Provenance::Original);
    let half_a = real.subset(&(0..250).collect::<Vec<_>>(), Provenance::Original);
    let half_b = real.subset(&(250..500).collect::<Vec<_>>(), Provenance::Original);

    let mut noise = LabeledDataset::new(vec!["class_0".into()], Provenance::Original, 32, 32);
    let mut rng = derive_stream(43, 0);
    for i in 0..250 {
        let mut img = Tensor::zeros(vec![1, 32, 32]);
        for v in img.data_mut() {
            *v = (rng.next_f64() * 2.0 - 1.0) as f32;
        }
        noise
            .push(Record {
                id: format!("n{i}"),
                class: 0,
                pixels: img,
            })
            .unwrap();
    }

    let mut fz = PixelFeaturizer;
    let s_real = feature_stats(&real, &mut fz).unwrap();
    let fid_ab = frechet_distance(
        &feature_stats(&half_a, &mut fz).unwrap(),
        &feature_stats(&half_b, &mut fz).unwrap(),
    )
    .unwrap();
    let fid_noise = frechet_distance(&s_real, &feature_stats(&noise, &mut fz).unwrap()).unwrap();

    let ddpm_cfg = DdpmConfig {
        timesteps: 100,
        epochs: 48,
        batch_size: 16,
        unet: UNetConfig {
            input_size: 32,
            base_channels: 16,
            depth: 2,
            time_dim: 32,
            channels: 1,
        },
        ..Default::default()
    };
    let result = train_ddpm(&real, &ddpm_cfg, &mut derive_stream(44, 0)).unwrap();
    let mut params = result.params.clone();
    let samples = ancestral_sample(
        &result.unet,
        &mut params,
        &result.schedule,
        250,
        &[1, 32, 32],
        &mut derive_stream(45, 0),
        &SampleOptions::default(),
    )
    .unwrap();
    let mut synth = LabeledDataset::new(vec!["class_0".into()], Provenance::SyntheticDdpm, 32, 32);
    for i in 0..250 {
        let px = samples.data()[i * 1024..(i + 1) * 1024].to_vec();
        synth
            .push(Record {
                id: format!("s{i}"),
                class: 0,
                pixels: Tensor::from_vec(vec![1, 32, 32], px),
            })
            .unwrap();
    }
    let fid_synth = frechet_distance(&s_real, &feature_stats(&synth, &mut fz).unwrap()).unwrap();

    let pass = fid_ab < fid_noise && fid_synth < fid_noise;
    verdict(
        9,
        "FID sanity ordering",
        pass,
        &format!("FID(A,B) {fid_ab:.3} < FID(real,noise) {fid_noise:.3}; FID(ddpm,real) {fid_synth:.3} < {fid_noise:.3}"),
    );
}

// -- 10. protocol reproduction in shape ------------------------------------------

#[test]
fn criterion_10_protocol_reproduction() {
    use augbench_core::pggan::GanConfig;
    use augbench_core::pipeline::{
        audit_disjoint, run_experiment, ClassifierConfig, CorpusSource, DdpmConfig,
        ExperimentConfig, ExtractorKind, Variant,
    };
    use augbench_core::selection::{SamplingMethod, ScenarioKind, ScenarioSpec};

    let tmp = tempfile::tempdir().unwrap();

    // -- run A: imbalanced desk-scale structure with both models
    let cfg_a = ExperimentConfig {
        corpus: CorpusSource::Generated {
            n_per_class: 140,
            size: 32,
            seed: None,
        },
        scenario: ScenarioSpec {
            kind: ScenarioKind::Imbalanced,
            sampling: SamplingMethod::Random,
            desk_factor: 0.05, // train 75/10, three test sets of (15, 5)
            ..Default::default()
        },
        ddpm: DdpmConfig {
            timesteps: 50,
            epochs: 10,
            batch_size: 16,
            unet: UNetConfig {
                input_size: 32,
                base_channels: 12,
                depth: 2,
                time_dim: 32,
                channels: 1,
            },
            ..Default::default()
        },
        pggan: GanConfig {
            latent_dim: 32,
            target_resolution: 32,
            batch_size: 4,
            steps_per_stage: 150,
            filter_override: Some(12),
            ..Default::default()
        },
        synth_per_class: 15,
        classifier: ClassifierConfig {
            models: vec![ModelKind::CustomCnn, ModelKind::Vgg16],
            input_size: 32,
            batch_size: 16,
            lr: 1e-4,
            cnn_epochs: 2,
            vgg_epochs: 1,
        },
        runs: 5,
        master_seed: 42,
        out_dir: tmp.path().join("imbalanced"),
        fid_extractor: ExtractorKind::Pixels8,
    };
    let report_a = run_experiment(&cfg_a).unwrap();
    // 2 models x 3 variants x 5 runs
    let rows_ok = report_a.rows.len() == 2 * 3 * 5;
    // three disjoint imbalanced test sets at the scaled shape
    let test_shape_ok = {
        let mut shapes = Vec::new();
        for i in 0..3 {
            let dir = cfg_a.out_dir.join(format!("scenario/test_{i}"));
            let t = augbench_core::corpus::load_corpus(&dir).unwrap();
            shapes.push(t.class_counts());
        }
        shapes.iter().all(|s| s == &vec![15, 5])
    };
    let train_shape_ok = {
        let t = augbench_core::corpus::load_corpus(&cfg_a.out_dir.join("scenario/train")).unwrap();
        t.class_counts() == vec![75, 10]
    };
    let aggregates_ok = report_a.aggregates.len() == 2 * 3 * 4
        && report_a
            .aggregates
            .iter()
            .all(|a| a.std >= 0.0 && a.mean.is_finite());
    let disjoint_ok = audit_disjoint(&cfg_a.out_dir).is_ok();

    // -- run B: small scenario with 40 real images/class; directional check
    let cfg_b = ExperimentConfig {
        corpus: CorpusSource::Generated {
            n_per_class: 120,
            size: 32,
            seed: None,
        },
        scenario: ScenarioSpec {
            kind: ScenarioKind::Small,
            sampling: SamplingMethod::Random,
            desk_factor: 0.2, // 200 * 0.2 = 40 per class
            ..Default::default()
        },
        ddpm: DdpmConfig {
            timesteps: 50,
            epochs: 24,
            batch_size: 16,
            unet: UNetConfig {
                input_size: 32,
                base_channels: 12,
                depth: 2,
                time_dim: 32,
                channels: 1,
            },
            ..Default::default()
        },
        pggan: GanConfig {
            latent_dim: 32,
            target_resolution: 32,
            batch_size: 4,
            steps_per_stage: 200,
            filter_override: Some(12),
            ..Default::default()
        },
        synth_per_class: 60,
        classifier: ClassifierConfig {
            models: vec![ModelKind::CustomCnn],
            input_size: 32,
            batch_size: 16,
            lr: 1e-4,
            cnn_epochs: 3,
            vgg_epochs: 1,
        },
        runs: 5,
        master_seed: 2042,
        out_dir: tmp.path().join("small"),
        fid_extractor: ExtractorKind::Pixels8,
    };
    let report_b = run_experiment(&cfg_b).unwrap();
    let train_b = augbench_core::corpus::load_corpus(&cfg_b.out_dir.join("scenario/train")).unwrap();
    let small_shape_ok = train_b.class_counts() == vec![40, 40] && report_b.rows.len() == 1 * 3 * 5;
    let baseline = report_b
        .aggregate_for("custom_cnn", Variant::Original, "accuracy")
        .unwrap()
        .mean;
    let ddpm_mix = report_b
        .aggregate_for("custom_cnn", Variant::Ddpm, "accuracy")
        .unwrap()
        .mean;
    // directional expectation; reported but non-binding by design
    let directional = ddpm_mix >= baseline - 0.01;
    println!(
        "ACCEPTANCE 10 directional (non-binding): ddpm-mix {ddpm_mix:.4} vs baseline {baseline:.4} -> {}",
        if directional { "CONSISTENT" } else { "NOT OBSERVED" }
    );

    // -- run C: bitwise rerun determinism on a micro config
    let cfg_c = ExperimentConfig {
        corpus: CorpusSource::Generated {
            n_per_class: 24,
            size: 32,
            seed: None,
        },
        scenario: ScenarioSpec {
            kind: ScenarioKind::Small,
            n_small_per_class: 8,
            ..Default::default()
        },
        ddpm: DdpmConfig {
            timesteps: 8,
            epochs: 2,
            batch_size: 4,
            unet: UNetConfig {
                input_size: 32,
                base_channels: 4,
                depth: 2,
                time_dim: 8,
                channels: 1,
            },
            ..Default::default()
        },
        pggan: GanConfig {
            latent_dim: 8,
            target_resolution: 32,
            batch_size: 2,
            steps_per_stage: 2,
            filter_override: Some(4),
            ..Default::default()
        },
        synth_per_class: 4,
        classifier: ClassifierConfig {
            models: vec![ModelKind::CustomCnn],
            input_size: 32,
            batch_size: 8,
            lr: 1e-3,
            cnn_epochs: 1,
            vgg_epochs: 1,
        },
        runs: 2,
        master_seed: 7,
        out_dir: tmp.path().join("det_a"),
        fid_extractor: ExtractorKind::Pixels8,
    };
    run_experiment(&cfg_c).unwrap();
    let cfg_c2 = ExperimentConfig {
        out_dir: tmp.path().join("det_b"),
        ..cfg_c.clone()
    };
    run_experiment(&cfg_c2).unwrap();
    let deterministic = ["report/runs.csv", "report/fid.csv", "report/expert.csv"]
        .iter()
        .all(|f| {
            std::fs::read(cfg_c.out_dir.join(f)).unwrap()
                == std::fs::read(cfg_c2.out_dir.join(f)).unwrap()
        });

    let pass = rows_ok
        && test_shape_ok
        && train_shape_ok
        && aggregates_ok
        && disjoint_ok
        && small_shape_ok
        && deterministic;
    verdict(
        10,
        "protocol reproduction in shape",
        pass,
        &format!(
            "rows {rows_ok}, tests {test_shape_ok}, train {train_shape_ok}, aggregates {aggregates_ok}, disjoint {disjoint_ok}, small {small_shape_ok}, deterministic {deterministic}, directional {directional}"
        ),
    );
}
