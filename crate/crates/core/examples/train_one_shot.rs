//! Trains a 1-shot model on the shapes dataset and scores it on unseen classes.
//!
//! Usage: `cargo run --release --example train_one_shot -- [key=value ...]`
//! where keys are run-config keys such as `train.epochs=20`.

use std::time::Instant;

use fewseg::config::RunConfig;
use fewseg::episodes::ShapeDataset;
use fewseg::evaluation::{all_foreground_baseline, evaluate_episodes, evaluation_episodes, EvalConfig};
use fewseg::model::Model;
use fewseg::training::{train, TrainProgress};

fn main() -> fewseg::Result<()> {
    let mut run = RunConfig::default();
    run.train.epochs = 20;
    run.train.validation_episodes = 100;
    run.eval.episodes = 300;
    for kv in std::env::args().skip(1) {
        run.apply_override(&kv)?;
    }
    run.validate()?;

    let dataset = ShapeDataset::new(run.dataset.clone())?;
    let mut model = Model::new(run.model.clone(), run.train.seed)?;
    let mut progress = TrainProgress::new(&run.train);
    let start = Instant::now();
    let summary = train(&run.train, &dataset, &mut model, &mut progress, |_, p| {
        if let Some(last) = p.loss_curve.last() {
            let epoch: Vec<f64> = p.loss_curve.iter().filter(|r| r.epoch == last.epoch).map(|r| r.loss).collect();
            let mean = epoch.iter().sum::<f64>() / epoch.len() as f64;
            println!("epoch {:>3}  loss {mean:.4}  ({:.1}s)", last.epoch, start.elapsed().as_secs_f64());
        }
        Ok(())
    })?;
    if let (Some(a), Some(b)) = (summary.warmup_losses.first(), summary.warmup_losses.last()) {
        println!("warm-up loss {a:.4} -> {b:.4}");
    }
    if let Some((miou, base)) = summary.validation {
        println!("validation meanIoU {:.2}% (all-foreground {:.2}%)", miou * 100.0, base * 100.0);
    }

    let episodes = evaluation_episodes(&dataset, &run.eval)?;
    println!("test all-foreground baseline {:.2}%", all_foreground_baseline(&episodes) * 100.0);
    for t in [0, 1, 4] {
        let opts = EvalConfig { iterations: t, ..run.eval.clone() }.inference_options();
        let r = evaluate_episodes(&model, &episodes, &opts, String::new())?;
        println!("test iterations={t}: meanIoU {:.2}%  FB-IoU {:.2}%", r.mean_iou * 100.0, r.fb_iou * 100.0);
    }
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
