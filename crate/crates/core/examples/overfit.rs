//! Overfit a tiny detector on eight synthetic images and print its history.
//!
//! `cargo run --release -p xraydet --example overfit -- yolo 300`

use std::time::Instant;

use candle_core::Device;
use xraydet::assembly::{build_detector, DetectorConfig, HeadKind};
use xraydet::backbone::BackboneKind;
use xraydet::data::{generate_synthetic, SynthSpec};
use xraydet::harness::{evaluate, train, OptimizerKind, TrainConfig};

fn main() -> xraydet::error::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let head = match args.get(1).map(String::as_str) {
        Some("rtdetr") => HeadKind::Rtdetr,
        _ => HeadKind::Yolo,
    };
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(50);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let queries: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(30);

    let data = generate_synthetic(&SynthSpec::default());
    let mut cfg = DetectorConfig::new(head, BackboneKind::NextvitS, data.taxonomy.len(), 128).with_width(0.25);
    cfg.rtdetr.num_queries = queries;
    let detector = build_detector(&cfg, 0, &Device::Cpu)?;
    let tc = TrainConfig {
        optimizer: OptimizerKind::Adamw,
        learning_rate: lr,
        batch_size: 8,
        max_epochs: epochs,
        early_stop_patience: epochs,
        val_interval: 10,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let run = train(&detector, &data, &data, &tc, None)?;
    for r in &run.history {
        if let Some(m) = r.val_map50 {
            println!(
                "epoch {:4} total {:.4} mAP50 {:.4} mAP50:95 {:.4}",
                r.epoch,
                r.losses["total"],
                m,
                r.val_map50_95.unwrap_or(0.0)
            );
        }
    }
    let eval = evaluate(&detector, &data, &tc.decode, 8)?;
    println!(
        "{}: params {} final mAP50 {:.4} in {:.1}s",
        cfg.name(),
        detector.parameter_count(),
        eval.report.map50,
        t.elapsed().as_secs_f64()
    );
    Ok(())
}
