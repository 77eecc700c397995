//! Trains a variant on generated clips and reports held-out IoU.
//!
//! Usage: `synthetic_benchmark [variant] [train_clips] [epochs] [lr] [refine_threshold|soft]`
//!
//! Defaults reproduce the acceptance recipe: G, 64 clips, 12 epochs, lr 1e-4,
//! refinement threshold 0.1.

use std::time::Instant;

use mvgd_core::dataset::synthetic_videos;
use mvgd_core::eval::metrics;
use mvgd_core::train::build_samples;
use mvgd_core::{ModelConfig, MvgdNet, OptimConfig, Trainer, Variant};

fn main() -> mvgd_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let variant: Variant = args
        .get(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(Variant::G);
    let n_train: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(64);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(12);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let threshold: Option<f64> = match args.get(5).map(String::as_str) {
        Some("soft") => None,
        Some(s) => s.parse().ok(),
        None => Some(0.1),
    };
    let cfg = ModelConfig {
        refine_threshold: threshold,
        ..ModelConfig::tiny().with_variant(variant)
    };
    let net = MvgdNet::new(cfg, 7)?;
    let need_flow = net.needs_flow();
    let train = build_samples(
        &synthetic_videos(n_train, 64, 3, 0.5, 1000)?,
        None,
        need_flow,
    )?;
    let test = build_samples(&synthetic_videos(16, 64, 3, 0.5, 900_000)?, None, need_flow)?;
    let optim = OptimConfig {
        lr,
        epochs,
        seed: 7,
        ..OptimConfig::default()
    };
    let mut trainer = Trainer::new(net, optim)?;
    let start = Instant::now();
    let per_epoch = trainer.total_steps(train.len()) / epochs as u64;
    for e in 0..epochs {
        let logs = trainer.run(&train, per_epoch, None)?;
        let mean = logs.iter().map(|l| l.loss.total).sum::<f64>() / logs.len() as f64;
        let (m, pm) = score(&trainer, &test)?;
        let (mt, pt) = score(&trainer, &train[..16])?;
        println!(
            "epoch {e}: loss {mean:.4} held-out iou {:.4} P {:.4} | train iou {:.4} P {:.4} ({:.1}s)",
            m,
            pm,
            mt,
            pt,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn score(
    trainer: &Trainer,
    set: &[mvgd_core::train::TrainSample],
) -> mvgd_core::Result<(f64, f64)> {
    let mut preds = vec![];
    let mut prim = vec![];
    let mut gts = vec![];
    let mut gp = vec![];
    for s in set {
        let out = trainer
            .net
            .forward_clip_with_flows(&s.clip, s.flows.as_ref())?;
        preds.push(out.masks[2].clone());
        prim.push(out.primary.clone());
        let g = s.clip.gt_masks.as_ref().unwrap();
        gts.push(g[2].clone());
        gp.push(g[1].clone());
    }
    Ok((metrics(&preds, &gts)?.iou, metrics(&prim, &gp)?.iou))
}
