mod common;

use std::collections::BTreeMap;

use dirl_core::gradcheck::grad_check;
use dirl_core::ssl::train::sample_loss_on;
use dirl_core::ssl::{RepKey, Variant};
use dirl_core::{Binder, Encoder, EncoderConfig, ParamSet, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

/// Reduces a matrix to a scalar through a fixed random projection so no
/// gradient is trivially zero.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let v = tape.value(x);
    let (r, c) = (v.rows(), v.cols());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(rand_tensor(&[c, 1], &mut rng));
    let y = tape.matmul(x, w)?;
    let u = tape.constant(rand_tensor(&[1, r], &mut rng));
    let z = tape.matmul(u, y)?;
    Ok(tape.sum(z))
}

fn check(f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, params: &[Tensor]) {
    let report = grad_check(f, params, 1e-5, 1e-6).unwrap();
    assert!(report.passed(), "max rel error {}: {:?}", report.max_rel_error(), report.flagged().collect::<Vec<_>>());
}

#[test]
fn every_tape_op_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[4, 5], &mut rng);
    let c = rand_tensor(&[5, 4], &mut rng);
    let v = rand_tensor(&[4], &mut rng);

    check(|t, p| { let y = t.matmul(p[0], p[1])?; project(t, y, 1) }, &[a.clone(), b.clone()]);
    check(|t, p| { let y = t.matmul_bt(p[0], p[1])?; project(t, y, 2) }, &[a.clone(), c.clone()]);
    check(|t, p| { let y = t.transpose(p[0]); project(t, y, 3) }, &[a.clone()]);
    check(|t, p| { let y = t.add(p[0], p[1])?; project(t, y, 4) }, &[a.clone(), a.map(|x| x * 0.3)]);
    check(|t, p| { let y = t.add_row(p[0], p[1])?; project(t, y, 5) }, &[a.clone(), v.clone()]);
    check(|t, p| { let y = t.scale(p[0], -1.7); project(t, y, 6) }, &[a.clone()]);
    check(|t, p| { let y = t.gelu(p[0]); project(t, y, 7) }, &[a.map(|x| 3.0 * x)]);
    check(
        |t, p| { let y = t.layer_norm(p[0], p[1], p[2], 1e-6)?; project(t, y, 8) },
        &[a.clone(), v.map(|x| 1.0 + x), v.clone()],
    );
    let mut mask = Tensor::zeros(&[3, 4]);
    mask.data_mut()[1] = f64::NEG_INFINITY;
    mask.data_mut()[6] = f64::NEG_INFINITY;
    check(move |t, p| { let y = t.softmax_rows(p[0], Some(&mask))?; project(t, y, 9) }, &[a.map(|x| 2.0 * x)]);
    check(|t, p| { let y = t.slice_cols(p[0], 1, 2)?; project(t, y, 10) }, &[a.clone()]);
    check(|t, p| { let y = t.concat_cols(&[p[0], p[1], p[0]])?; project(t, y, 11) }, &[a.clone(), a.map(|x| x - 0.2)]);
    check(|t, p| { let y = t.subset_mean(p[0], &[0, 2])?; project(t, y, 12) }, &[a.clone()]);
    check(|t, p| { let y = t.mean_rows(p[0])?; project(t, y, 13) }, &[a.clone()]);
    check(|t, p| { let y = t.gather_row(p[0], 1)?; project(t, y, 14) }, &[a.clone()]);
    check(|t, p| { let y = t.l2_normalize_rows(p[0]); project(t, y, 15) }, &[a.clone()]);
    let target = vec![0.1, 0.6, 0.0, 0.3];
    check(move |t, p| { let r = t.gather_row(p[0], 0)?; t.soft_cross_entropy(r, &target, 0.3) }, &[a.clone()]);
    let target = vec![0.5, -1.0, 2.0, 0.0];
    check(move |t, p| { let r = t.gather_row(p[0], 2)?; t.mse(r, &target) }, &[a.clone()]);
    check(
        |t, p| { let y = t.weighted_sum(&[(p[0], 0.4), (p[1], -1.5)])?; project(t, y, 16) },
        &[a.clone(), a.map(|x| x * x)],
    );
    check(|t, p| { let y = t.gelu(p[0]); Ok(t.sum(y)) }, &[a]);
}

#[test]
fn encoder_gradients_two_blocks() {
    let cfg = EncoderConfig {
        image_w: 8,
        image_h: 8,
        patch: 4,
        dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2.0,
        ..EncoderConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut set = ParamSet::new();
    let enc = Encoder::init(&mut set, &cfg, &mut rng).unwrap();
    let set = perturbed(&set, 0.6, 6);
    let img = random_image(8, 8, &mut rng);
    let f = |tape: &mut Tape, vars: &[Var]| {
        let mut b = Binder::preset(vars);
        let trace = enc.forward_on(tape, &mut b, &img)?;
        project(tape, trace.tokens, 21)
    };
    let report = grad_check(f, set.tensors(), 1e-5, 1e-4).unwrap();
    assert!(report.passed(), "{:?}", report.flagged().collect::<Vec<_>>());
}

fn dirl_loss_report(variant: Variant, aux: bool, seed: u64) -> (dirl_core::gradcheck::GradCheckReport, usize) {
    let (cfg, model, student) = toy_model(variant, aux, seed);
    let teacher = perturbed(&student, 0.2, seed + 1);
    let views = toy_views(&cfg, seed + 2);
    let mut centers = BTreeMap::new();
    for k in model.heads.keys() {
        centers.insert(k, Tensor::vector((0..7).map(|i| 0.01 * i as f64).collect()));
    }
    let targets = teacher_targets(&model, &teacher, &views, &cfg, &centers);
    let f = |tape: &mut Tape, vars: &[Var]| {
        let mut b = Binder::preset(vars);
        Ok(sample_loss_on(tape, &mut b, &model, &cfg, &views, &targets, aux)?.0)
    };
    (grad_check(f, student.tensors(), 1e-5, 1e-4).unwrap(), student.len())
}

#[test]
fn dirl_loss_gradients_on_toy_model() {
    let (report, count) = dirl_loss_report(Variant::Dirl, true, 40);
    assert!(report.passed(), "max {}: {:?}", report.max_rel_error(), report.flagged().collect::<Vec<_>>());
    // Every tensor is covered, the disentangle block and all seven heads
    // included.
    assert_eq!(report.params.len(), count);
    assert!(count > 90, "{count}");
}

#[test]
fn other_variants_gradients() {
    for v in [Variant::Baseline, Variant::Cellback, Variant::CellbackV2] {
        let (report, _) = dirl_loss_report(v, false, 50);
        assert!(report.passed(), "{v}: {:?}", report.flagged().collect::<Vec<_>>());
    }
}

#[test]
fn teacher_receives_no_gradient() {
    let (cfg, model, student) = toy_model(Variant::Dirl, false, 60);
    let teacher = perturbed(&student, 0.2, 61);
    let views = toy_views(&cfg, 62);
    let centers = BTreeMap::new();
    let loss_with = |teacher: &ParamSet| {
        let targets = teacher_targets(&model, teacher, &views, &cfg, &centers);
        let mut tape = Tape::new();
        let mut b = Binder::trainable(&student);
        let (root, _, _) = sample_loss_on(&mut tape, &mut b, &model, &cfg, &views, &targets, false).unwrap();
        let grads = tape.backward(root).unwrap().param_grads();
        (tape.value(root).data()[0], grads)
    };
    let (l0, g0) = loss_with(&teacher);
    let bumped = perturbed(&teacher, 1e-3, 63);
    let (l1, g1) = loss_with(&bumped);
    // The teacher shapes the loss value ...
    assert_ne!(l0, l1);
    // ... but gradients exist only for student slots, one per tensor.
    assert!(g0.iter().all(|(slot, _)| *slot < student.len()));
    let mut slots: Vec<usize> = g1.iter().map(|g| g.0).collect();
    slots.dedup();
    assert_eq!(slots.len(), g1.len());
    assert!(model.heads.keys().contains(&RepKey::SelfCell));
}
