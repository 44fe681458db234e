//! Hot-path benchmarks: forward pass, the two backward modes, one training
//! attack step, NMS, and dataset generation.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use robdet_bench::{bench_images, bench_model};
use robdet_core::anchors::match_anchors;
use robdet_core::attack::{self, AttackDomain, AttackSpec, MATCH_THRESHOLD};
use robdet_core::detect::{self, DetectConfig};
use robdet_core::loss::multibox_loss;
use robdet_core::tape::Tape;

fn forward(c: &mut Criterion) {
    let model = bench_model(1);
    let images = bench_images(2, 7);
    let img = &images[0];
    c.bench_function("forward_64x64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let x = tape.leaf_req(&img.image, false).unwrap();
            let out = model.forward(&mut tape, x, false).unwrap();
            black_box(tape.value(out.logits)[0]);
        })
    });
}

fn backward_params(c: &mut Criterion) {
    let model = bench_model(1);
    let images = bench_images(2, 7);
    let img = &images[0];
    let assignments = match_anchors(&img.annotations, model.anchors(), MATCH_THRESHOLD).unwrap();
    c.bench_function("train_step_grad", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let x = tape.leaf_req(&img.image, false).unwrap();
            let out = model.forward(&mut tape, x, true).unwrap();
            let bundle = multibox_loss(&mut tape, &out, &assignments).unwrap();
            let total = tape.add(bundle.loss_cls, bundle.loss_loc).unwrap();
            let grads = tape.backward(total).unwrap();
            black_box(grads.get(out.params.conv1_w).unwrap()[0]);
        })
    });
}

fn attack_step(c: &mut Criterion) {
    let model = bench_model(1);
    let images = bench_images(2, 7);
    let img = &images[0];
    let spec = AttackSpec::for_training(AttackDomain::Cls, 8.0, 3);
    c.bench_function("fgsm_training_attack", |b| {
        b.iter(|| {
            let adv = attack::pgd_attack(&model, &img.into(), &spec).unwrap();
            black_box(adv.image.values()[0]);
        })
    });
}

fn nms(c: &mut Criterion) {
    let model = bench_model(1);
    let images = bench_images(2, 7);
    let raw = detect::raw_detections(&model, &images[0].image).unwrap();
    let cfg = DetectConfig::default();
    c.bench_function("nms_960_anchors", |b| {
        b.iter(|| black_box(detect::nms(&raw, &cfg).len()))
    });
}

fn datagen(c: &mut Criterion) {
    c.bench_function("generate_16_images", |b| {
        b.iter(|| black_box(bench_images(16, 99).len()))
    });
}

criterion_group!(benches, forward, backward_params, attack_step, nms, datagen);
criterion_main!(benches);
