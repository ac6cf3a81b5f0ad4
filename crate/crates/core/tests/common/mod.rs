//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use ncttt::autodiff::{grad_check, Bindings, OpKind, Tape, Tensor, Var};
use ncttt::model::{BnPolicy, Model, ModelSpec};
use ncttt::nce::NoiseConfig;
use ncttt::{rng, Result};
use rand::Rng;

pub type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub params: Vec<Tensor>,
    pub f: LossFn,
}

pub fn random(shape: &[usize], r: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Scalar `sum(out ⊙ weights)` so that every output coordinate is checked.
fn project(t: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = t.constant(weights.clone());
    let p = t.mul(out, w)?;
    t.sum(p)
}

fn unary(name: &'static str, kind: OpKind, shape: &[usize], r: &mut impl Rng) -> Case {
    let x = random(shape, r);
    let out_shape = if matches!(kind, OpKind::NormSqRows) { vec![shape[0], 1] } else { shape.to_vec() };
    let w = random(&out_shape, r);
    Case {
        name,
        params: vec![x],
        f: Box::new(move |t, v| {
            let out = t.apply(&kind, v)?;
            if t.value(out).is_scalar() {
                Ok(out)
            } else {
                project(t, out, &w)
            }
        }),
    }
}

/// One gradient check case per layer kind of the engine, with inputs drawn from `seed`.
pub fn layer_cases(seed: u64) -> Vec<Case> {
    let mut r = rng::rng(rng::derive(seed, &[rng::tag("layer-cases")]));
    let mut cases = vec![
        unary("relu", OpKind::Relu, &[4, 3], &mut r),
        unary("leaky_relu", OpKind::LeakyRelu, &[4, 3], &mut r),
        unary("sigmoid", OpKind::Sigmoid, &[4, 3], &mut r),
        unary("log_sigmoid", OpKind::LogSigmoid, &[4, 3], &mut r),
        unary("softmax", OpKind::Softmax, &[4, 3], &mut r),
        unary("mean", OpKind::Mean, &[4, 3], &mut r),
        unary("sum", OpKind::Sum, &[4, 3], &mut r),
        unary("square", OpKind::Square, &[4, 3], &mut r),
        unary("norm_sq_rows", OpKind::NormSqRows, &[5, 3], &mut r),
        unary("cross_entropy", OpKind::CrossEntropy(vec![0, 2, 1, 2]), &[4, 3], &mut r),
    ];
    for (name, kind) in [("matmul", OpKind::MatMul), ("add", OpKind::Add), ("mul", OpKind::Mul)] {
        let a = random(&[3, 4], &mut r);
        let b = if name == "matmul" { random(&[4, 2], &mut r) } else { random(&[3, 4], &mut r) };
        let w = random(if name == "matmul" { &[3, 2] } else { &[3, 4] }, &mut r);
        cases.push(Case {
            name,
            params: vec![a, b],
            f: Box::new(move |t, v| {
                let out = t.apply(&kind, v)?;
                project(t, out, &w)
            }),
        });
    }
    let row_bias = random(&[4], &mut r);
    let w = random(&[3, 4], &mut r);
    cases.push(Case {
        name: "add_broadcast",
        params: vec![random(&[3, 4], &mut r), row_bias],
        f: Box::new(move |t, v| {
            let out = t.add(v[0], v[1])?;
            project(t, out, &w)
        }),
    });
    let w = random(&[5, 2], &mut r);
    cases.push(Case {
        name: "affine",
        params: vec![random(&[5, 3], &mut r), random(&[3, 2], &mut r), random(&[2], &mut r)],
        f: Box::new(move |t, v| {
            let out = t.apply(&OpKind::Affine, v)?;
            project(t, out, &w)
        }),
    });
    let w = random(&[6, 3], &mut r);
    cases.push(Case {
        name: "batchnorm_train",
        params: vec![random(&[6, 3], &mut r), random(&[3], &mut r), random(&[3], &mut r)],
        f: Box::new(move |t, v| {
            let (out, _) = t.batchnorm_train(v[0], v[1], v[2])?;
            project(t, out, &w)
        }),
    });
    let w = random(&[6, 3], &mut r);
    let mean: Vec<f64> = (0..3).map(|_| r.gen_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..3).map(|_| r.gen_range(0.5..2.0)).collect();
    cases.push(Case {
        name: "batchnorm_eval",
        params: vec![random(&[6, 3], &mut r), random(&[3], &mut r), random(&[3], &mut r)],
        f: Box::new(move |t, v| {
            let out = t.batchnorm_eval(v[0], v[1], v[2], &mean, &var)?;
            project(t, out, &w)
        }),
    });
    let targets = Tensor::vector((0..5).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
    cases.push(Case {
        name: "bce_with_soft_targets",
        params: vec![random(&[5], &mut r)],
        f: Box::new(move |t, v| {
            let p = t.constant(targets.clone());
            t.bce_with_soft_targets(v[0], p)
        }),
    });
    let w = random(&[5, 3], &mut r);
    cases.push(Case {
        name: "gather_rows",
        params: vec![random(&[4, 3], &mut r)],
        f: Box::new(move |t, v| {
            let out = t.gather_rows(v[0], &[3, 0, 0, 2, 1])?;
            project(t, out, &w)
        }),
    });
    let w = random(&[2, 3], &mut r);
    cases.push(Case {
        name: "pool_rows",
        params: vec![random(&[6, 3], &mut r)],
        f: Box::new(move |t, v| {
            let out = t.pool_rows(v[0], 3)?;
            project(t, out, &w)
        }),
    });
    let w = random(&[3, 4], &mut r);
    cases.push(Case {
        name: "reshape_scale",
        params: vec![random(&[4, 3], &mut r)],
        f: Box::new(move |t, v| {
            let out = t.reshape(v[0], vec![3, 4])?;
            let out = t.scale(out, -1.7)?;
            project(t, out, &w)
        }),
    });
    cases
}

/// Worst gradient error over all layer cases for `seed`, with the case name.
pub fn worst_layer_error(seed: u64) -> (&'static str, f64) {
    layer_cases(seed)
        .into_iter()
        .map(|c| {
            let err = grad_check(&c.params, 1e-6, |t, v| (c.f)(t, v)).unwrap_or_else(|e| panic!("{}: {e}", c.name));
            (c.name, err)
        })
        .fold(("none", 0.0), |a, b| if b.1 > a.1 { b } else { a })
}

/// Gradient errors of the joint loss and of the test loss of a two-block
/// model, over all trainable parameters.
pub fn model_loss_errors(seed: u64) -> (f64, f64) {
    let mut spec = ModelSpec::mlp(2, &[5, 4], 3, 1, 2);
    spec.discriminator.hidden = 6;
    let mut m = Model::new(spec, seed).unwrap();
    let mut r = rng::rng(rng::derive(seed, &[rng::tag("model-batch")]));
    // zero biases put ReLU inputs exactly on the kink for all-zero feature rows;
    // finite differences are only meaningful at a differentiable point
    let trainable: Vec<String> = m.params().iter().filter(|(_, t)| t.requires_grad()).map(|(n, _)| n.to_string()).collect();
    for n in &trainable {
        for v in m.params_mut().get_mut(n).unwrap().data_mut() {
            *v += 0.05 * r.gen_range(-1.0..1.0);
        }
    }
    let x = random(&[6, 2], &mut r);
    let y: Vec<usize> = (0..6).map(|i| i % 3).collect();
    let cfg = NoiseConfig::new(0.2, 0.6, 2).unwrap();
    let names: Vec<String> = m.params().iter().filter(|(_, t)| t.requires_grad()).map(|(n, _)| n.to_string()).collect();
    let tensors: Vec<Tensor> = names.iter().map(|n| m.params().get(n).unwrap().clone()).collect();
    let bind = |tape: &mut Tape, vars: &[Var]| {
        let mut pairs: Vec<(String, Var)> = names.iter().cloned().zip(vars.iter().copied()).collect();
        for (n, t) in m.params().iter().filter(|(_, t)| !t.requires_grad()) {
            pairs.push((n.to_string(), tape.constant(t.clone())));
        }
        Bindings::from_pairs(pairs)
    };
    let joint = grad_check(&tensors, 1e-6, |tape, vars| {
        let b = bind(tape, vars);
        Ok(m.joint_graph(tape, &b, &x, &y, &cfg, seed)?.total)
    })
    .unwrap();
    let test = grad_check(&tensors, 1e-6, |tape, vars| {
        let b = bind(tape, vars);
        m.test_graph(tape, &b, &x, BnPolicy::Batch)
    })
    .unwrap();
    (joint, test)
}
