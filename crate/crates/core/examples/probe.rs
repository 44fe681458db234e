//! Scratch probe for convergence and throughput tuning. Not part of the
//! test suite; run with `cargo run --release -p robdet-core --example probe`.

use std::time::Instant;

use robdet_core::data::{self, DatasetSpec};
use robdet_core::detect::DetectConfig;
use robdet_core::eval::{self, EvalAttack};
use robdet_core::model::ModelConfig;
use robdet_core::train::{self, EpochStats, TrainConfig, TrainSink, TrainVariant};

struct Printer;

impl TrainSink for Printer {
    fn on_epoch(&mut self, s: &EpochStats) {
        if s.epoch % 5 == 0 || s.epoch < 3 {
            println!(
                "epoch {:3}  cls {:.4}  loc {:.4}  rate {:?}  {:.2}s",
                s.epoch, s.mean_loss_cls, s.mean_loss_loc, s.cls_selection_rate, s.wall_secs
            );
        }
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(400);
    let epochs: usize = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(20);
    let lr: f32 = args.get(3).and_then(|v| v.parse().ok()).unwrap_or(5e-3);
    let variant = args
        .get(4)
        .map(|v| TrainVariant::from_str(v).unwrap())
        .unwrap_or(TrainVariant::Std);

    let train_spec = DatasetSpec {
        count: n_train,
        seed: 101,
        ..DatasetSpec::default()
    };
    let test_spec = DatasetSpec {
        count: 100,
        seed: 202,
        ..DatasetSpec::default()
    };
    let t0 = Instant::now();
    let (train_data, _) = data::generate(&train_spec).unwrap();
    let (test_data, _) = data::generate(&test_spec).unwrap();
    println!("data: {:.2}s", t0.elapsed().as_secs_f64());

    let mut cfg = TrainConfig::new(variant, 11);
    cfg.epochs = epochs;
    cfg.lr = lr;
    let t0 = Instant::now();
    let (model, report) =
        train::train_with_sink(&train_data, &ModelConfig::default(), &cfg, &mut Printer).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    println!(
        "train: {train_secs:.1}s ({:.1} img-steps/s), skipped {}",
        (n_train * epochs) as f64 / train_secs,
        report.skipped_steps
    );

    let det = DetectConfig::default();
    let t0 = Instant::now();
    let clean = eval::map50(&model, &test_data, &EvalAttack::None, &det).unwrap();
    println!("clean mAP {:.4}  ({:.2}s)", clean, t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let atk = EvalAttack::battery(8.0, 20, 7);
    for a in &atk[1..] {
        let v = eval::map50(&model, &test_data, a, &det).unwrap();
        println!("{} mAP {:.4}  ({:.0}s)", a.id(), v, t0.elapsed().as_secs_f64());
    }
    let (acc, iou) = eval::candidate_metrics(&model, &test_data, &EvalAttack::None).unwrap();
    println!("clean cand_acc {acc:.4} cand_iou {iou:.4}");
    for a in &eval::EvalAttack::battery(8.0, 1, 7)[1..3] {
        let (acc, iou) = eval::candidate_metrics(&model, &test_data, a).unwrap();
        println!("{} 1-step cand_acc {acc:.4} cand_iou {iou:.4}", a.id());
    }
    let align = eval::gradient_alignment(&model, &test_data[..100.min(test_data.len())]).unwrap();
    println!(
        "alignment: median cos {:.4} median ratio {:.4} skipped {}",
        align.median_cos(),
        align.median_ratio(),
        align.skipped
    );
    println!("attack eval: {:.1}s", t0.elapsed().as_secs_f64());
}
