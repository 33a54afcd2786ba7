mod common;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use proptest::prelude::*;

use mqvtg::autodiff::{
    backward_eval, forward_eval, grad_check, AutodiffError, Primitive, Program, Tape, Tensor, LAYER_NORM_EPS,
};
use mqvtg::data::generate_synthetic;
use mqvtg::model::{positional_encoding, Model, ModelConfig, Placement};

fn inputs(pairs: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

#[test]
fn every_catalog_primitive_has_a_gradient_case() {
    let names: Vec<&str> = common::gradient_cases().iter().map(|c| c.name).collect();
    for p in Primitive::CATALOG {
        assert!(
            names.iter().any(|n| n.split('/').next() == Some(p.name())),
            "no gradient case for {}",
            p.name()
        );
    }
}

#[test]
fn primitives_and_losses_pass_grad_check() {
    for (i, case) in common::gradient_cases().iter().enumerate() {
        let err = case.worst_error(3, 50 + i as u64).unwrap();
        assert!(err < common::GRAD_TOL, "{}: {err:e}", case.name);
    }
}

#[test]
fn identity_matmul_and_uniform_softmax() {
    let x = Tensor::new(&[3, 1], vec![0.3, -2.0, 7.5]);
    let p = Program::new()
        .input("i")
        .input("x")
        .node("y", "matmul", &["i", "x"])
        .input("z")
        .node("s", "softmax", &["z"])
        .with_axis(1);
    let out = forward_eval(&p, &inputs(&[("i", Tensor::eye(3)), ("x", x.clone()), ("z", Tensor::zeros(&[1, 3]))])).unwrap();
    assert_eq!(out["y"], x);
    for v in out["s"].data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn sum_gradient_is_all_ones() {
    let p = Program::new().input("x").node("l", "sum", &["x"]);
    let g = backward_eval(&p, &inputs(&[("x", Tensor::full(&[2, 3, 2], 0.7))]), "l").unwrap();
    assert_eq!(g["x"], Tensor::ones(&[2, 3, 2]));
}

#[test]
fn stop_gradient_kills_one_product_branch() {
    let p = Program::new()
        .input("x")
        .node("s", "stop_gradient", &["x"])
        .node("l", "mul", &["x", "s"]);
    let g = backward_eval(&p, &inputs(&[("x", Tensor::scalar(3.0))]), "l").unwrap();
    assert_eq!(g["x"].item(), 3.0);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]));
    let s = tape.stop_gradient(x).unwrap();
    assert_eq!(tape.value(s).data(), &[1.0, 2.0, 3.0]);
    let l = tape.sum(s);
    assert_eq!(tape.backward(l).unwrap().get_or_zeros(x), Tensor::zeros(&[3]));
}

#[test]
fn stop_gradient_subgraph_keeps_forward_and_zeroes_its_gradient() {
    // f = sum(exp(a) * b) versus sum(sg(exp(a)) * b)
    let a = Tensor::new(&[2, 2], vec![0.1, -0.4, 1.2, 0.3]);
    let b = Tensor::new(&[2, 2], vec![2.0, -1.0, 0.5, 3.0]);
    let run = |stop: bool| {
        let mut t = Tape::new();
        let (av, bv) = (t.param(a.clone()), t.param(b.clone()));
        let mut e = t.exp(av);
        if stop {
            e = t.stop_gradient(e).unwrap();
        }
        let m = t.mul(e, bv).unwrap();
        let l = t.sum(m);
        let g = t.backward(l).unwrap();
        (t.value(l).item(), g.get_or_zeros(av), g.get_or_zeros(bv))
    };
    let (l0, ga0, gb0) = run(false);
    let (l1, ga1, gb1) = run(true);
    assert_eq!(l0.to_bits(), l1.to_bits());
    assert_eq!(gb0, gb1);
    assert!(ga0.data().iter().all(|&v| v != 0.0));
    assert_eq!(ga1, Tensor::zeros(&[2, 2]));
}

#[test]
fn grad_check_scalar_examples() {
    let sq = grad_check(|t, v| t.mul(v[0], v[0]), &[Tensor::scalar(2.0)], 1e-5).unwrap();
    assert!(sq < 1e-8, "{sq:e}");
    let relu = grad_check(|t, v| Ok(t.relu(v[0])), &[Tensor::scalar(0.5)], 1e-5).unwrap();
    assert!(relu < 1e-6, "{relu:e}");
}

#[test]
fn commitment_loss_gradient_wrt_features() {
    let cases = common::gradient_cases();
    let case = cases.iter().find(|c| c.name == "loss/commitment").unwrap();
    assert!(case.worst_error(2, 8).unwrap() < 1e-4);
}

#[test]
fn random_three_layer_graph_matches_finite_differences() {
    let mut r = common::rng(4);
    let point = vec![
        Tensor::randn(&[4, 5], &mut r),
        Tensor::randn(&[5, 6], &mut r),
        Tensor::randn(&[6, 3], &mut r),
        Tensor::randn(&[3], &mut r),
    ];
    let err = grad_check(
        |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.sigmoid(h);
            let h = t.linear(h, v[2], v[3])?;
            let h = t.layer_norm(h)?;
            let s = t.softmax(h, 1)?;
            let l = t.log(s);
            Ok(t.mean(l))
        },
        &point,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn errors_name_the_offending_node() {
    let p = Program::new()
        .input("a")
        .input("b")
        .node("bad_product", "matmul", &["a", "b"]);
    let err = forward_eval(&p, &inputs(&[("a", Tensor::zeros(&[2, 3])), ("b", Tensor::zeros(&[4, 2]))])).unwrap_err();
    match err {
        AutodiffError::ShapeMismatch { node, .. } => assert_eq!(node, "bad_product"),
        other => panic!("unexpected {other:?}"),
    }

    let p = Program::new().input("a").node("w", "warp", &["a"]);
    let err = forward_eval(&p, &inputs(&[("a", Tensor::zeros(&[2]))])).unwrap_err();
    assert!(matches!(err, AutodiffError::UnknownPrimitive { ref node, ref op } if node == "w" && op == "warp"));

    let p = Program::new().node("x", "relu", &["y"]).node("y", "relu", &["x"]);
    assert!(matches!(forward_eval(&p, &BTreeMap::new()), Err(AutodiffError::Cycle { .. })));

    let p = Program::new().input("a");
    assert!(matches!(forward_eval(&p, &BTreeMap::new()), Err(AutodiffError::UnboundInput { .. })));

    let mut t = Tape::new();
    let x = t.param(Tensor::zeros(&[2]));
    assert!(matches!(t.backward(x), Err(AutodiffError::NonScalarLoss { .. })));
}

#[test]
fn grad_check_rejects_bad_inputs() {
    let f = |t: &mut Tape, v: &[mqvtg::Var]| Ok(t.sum(v[0]));
    assert!(grad_check(f, &[Tensor::scalar(1.0)], 0.0).is_err());
    assert!(grad_check(f, &[Tensor::scalar(1.0)], 0.1).is_err());
    assert!(matches!(grad_check(f, &[Tensor::scalar(f64::NAN)], 1e-5), Err(AutodiffError::NonFinite { .. })));
    // log(-1) is NaN inside the graph
    let err = grad_check(|t, v| Ok(t.log(v[0])), &[Tensor::scalar(-1.0)], 1e-5).unwrap_err();
    assert!(matches!(err, AutodiffError::NonFinite { .. }));
}

#[test]
fn max_pool_ties_route_to_lowest_index() {
    let mut t = Tape::new();
    let x = t.param(Tensor::new(&[1, 3], vec![2.0, 2.0, 1.0]));
    let m = t.max_pool(x, 1).unwrap();
    let l = t.sum(m);
    assert_eq!(t.backward(l).unwrap().get_or_zeros(x).data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut r = common::rng(12);
        let mut t = Tape::new();
        let a = t.param(Tensor::randn(&[5, 4], &mut r));
        let b = t.param(Tensor::randn(&[3, 4], &mut r));
        let c = t.cosine(a, b).unwrap();
        let s = t.softmax(c, 0).unwrap();
        let l = t.sum(s);
        let g = t.backward(l).unwrap();
        (t.value(s).clone(), g.get_or_zeros(a), g.get_or_zeros(b))
    };
    assert_eq!(run(), run());
}

// ---- independent encoder evaluator ----

fn mat(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = (t.rows(), t.cols());
    DMatrix::from_row_slice(r, c, &t.data()[..r * c])
}

fn bias(t: &Tensor, rows: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, t.numel(), |_, j| t.data()[j])
}

fn layer_norm(x: &DMatrix<f64>, g: &Tensor, b: &Tensor) -> DMatrix<f64> {
    let mut out = x.clone();
    for r in 0..x.nrows() {
        let row = x.row(r);
        let mean = row.mean();
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
        for c in 0..x.ncols() {
            out[(r, c)] = (x[(r, c)] - mean) / (var + LAYER_NORM_EPS).sqrt() * g.data()[c] + b.data()[c];
        }
    }
    out
}

fn softmax_rows(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for r in 0..x.nrows() {
        let m = x.row(r).max();
        let e: Vec<f64> = x.row(r).iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for c in 0..x.ncols() {
            out[(r, c)] = e[c] / s;
        }
    }
    out
}

fn reference_encoder(model: &Model, clips: &Tensor, words: &Tensor) -> DMatrix<f64> {
    let cfg = model.config();
    let get = |n: &str| model.params().get(n).unwrap().clone();
    let (t, n) = (clips.rows(), words.rows());
    let mut x = mat(clips) * mat(&get("input.w")) + bias(&get("input.b"), t) + mat(&positional_encoding(t, cfg.d));
    let text = mat(words) * mat(&get("text.w")) + bias(&get("text.b"), n);
    let dh = cfg.d / cfg.attention_heads;
    let attend = |prefix: &str, x: &DMatrix<f64>, ctx: &DMatrix<f64>| {
        let mut heads = DMatrix::zeros(x.nrows(), cfg.d);
        for h in 0..cfg.attention_heads {
            let q = x * mat(&get(&format!("{prefix}.{h}.q")));
            let k = ctx * mat(&get(&format!("{prefix}.{h}.k")));
            let v = ctx * mat(&get(&format!("{prefix}.{h}.v")));
            let a = softmax_rows(&((q * k.transpose()) / (dh as f64).sqrt()));
            heads.columns_mut(h * dh, dh).copy_from(&(a * v));
        }
        heads * mat(&get(&format!("{prefix}.o"))) + bias(&get(&format!("{prefix}.o_b")), x.nrows())
    };
    for l in 0..cfg.encoder_layers {
        let ln = |i: usize, v: &DMatrix<f64>| {
            layer_norm(v, &get(&format!("enc.{l}.ln{i}.g")), &get(&format!("enc.{l}.ln{i}.b")))
        };
        let sa = attend(&format!("enc.{l}.self"), &x, &x);
        x = ln(1, &(&x + sa));
        let ca = attend(&format!("enc.{l}.cross"), &x, &text);
        x = ln(2, &(&x + ca));
        let h = (&x * mat(&get(&format!("enc.{l}.ff.w1"))) + bias(&get(&format!("enc.{l}.ff.b1")), t)).map(|v| v.max(0.0));
        let f = h * mat(&get(&format!("enc.{l}.ff.w2"))) + bias(&get(&format!("enc.{l}.ff.b2")), t);
        x = ln(3, &(&x + f));
    }
    x
}

#[test]
fn encoder_matches_independent_evaluator() {
    let spec = mqvtg::data::SyntheticSpec {
        dim: 12,
        ..common::tiny_spec(2)
    };
    let samples = generate_synthetic(&spec).unwrap().dataset.train;
    let config = ModelConfig {
        d: 16,
        input_dim: 12,
        encoder_layers: 2,
        attention_heads: 4,
        ff_hidden: 24,
        placement: Placement::None,
        fusion: None,
        codebook_size: 4,
    };
    let model = Model::new(config, 31).unwrap();
    for s in &samples {
        let got = model.infer(s).unwrap().z_t;
        let want = reference_encoder(&model, &s.clip_features, &s.query_features);
        for r in 0..got.rows() {
            for c in 0..got.cols() {
                assert!((got.get2(r, c) - want[(r, c)]).abs() < 1e-12, "{} at ({r},{c})", s.vid);
            }
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut r = common::rng(seed);
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(&[rows, cols], &mut r).map(|v| v * scale));
        let s = t.softmax(x, 1).unwrap();
        for i in 0..rows {
            let total: f64 = t.value(s).row(i).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean(rows in 1usize..6, cols in 2usize..17, seed in any::<u64>(), shift in -100f64..100.0) {
        let mut r = common::rng(seed);
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(&[rows, cols], &mut r).map(|v| v + shift));
        let y = t.layer_norm(x).unwrap();
        for i in 0..rows {
            let mean = t.value(y).row(i).iter().sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-10);
        }
    }
}
