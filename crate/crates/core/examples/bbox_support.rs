//! Scores the same episodes with pixel-accurate and bounding-box support
//! masks, and shows what a box annotation looks like.
//!
//! Usage: `cargo run --release --example bbox_support -- [MODEL.ck | key=value ...]`

use fewseg::episodes::{annotate, Annotation, ShapeDataset};
use fewseg::evaluation::{all_foreground_baseline, evaluate_episodes, evaluation_episodes, EvalConfig};

mod common;

fn main() -> fewseg::Result<()> {
    let (run, model) = common::model_from_args()?;
    let dataset = ShapeDataset::new(run.dataset.clone())?;
    let cfg = EvalConfig {
        episodes: 300,
        ..run.eval.clone()
    };
    let pixel = evaluation_episodes(&dataset, &cfg)?;
    let boxed = pixel
        .iter()
        .map(|ep| annotate(ep, Annotation::BoundingBox))
        .collect::<fewseg::Result<Vec<_>>>()?;

    let (p, b) = (&pixel[0].support[0].mask, &boxed[0].support[0].mask);
    println!("pixel support ({} px)            box support ({} px)", p.count(), b.count());
    for (l, r) in common::ascii(p, 2).lines().zip(common::ascii(b, 2).lines()) {
        println!("{l}  {r}");
    }

    let opts = cfg.inference_options();
    let rp = evaluate_episodes(&model, &pixel, &opts, String::new())?;
    let rb = evaluate_episodes(&model, &boxed, &opts, String::new())?;
    println!("\npixel supports   meanIoU {:.2}%", rp.mean_iou * 100.0);
    println!("box supports     meanIoU {:.2}%", rb.mean_iou * 100.0);
    println!("all-foreground   meanIoU {:.2}%", all_foreground_baseline(&pixel) * 100.0);
    Ok(())
}
