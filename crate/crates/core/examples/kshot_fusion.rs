//! Compares the four k-shot fusion modes on the same 5-shot test episodes.
//!
//! Usage: `cargo run --release --example kshot_fusion -- [MODEL.ck | key=value ...]`

use fewseg::episodes::{Phase, ShapeDataset};
use fewseg::evaluation::{evaluate_episodes, evaluation_episodes, EvalConfig};
use fewseg::fusion::Fusion;

mod common;

fn main() -> fewseg::Result<()> {
    let (run, model) = common::model_from_args()?;
    let dataset = ShapeDataset::new(run.dataset.clone())?;
    let base = EvalConfig {
        phase: Phase::Test,
        episodes: 200,
        ..run.eval.clone()
    };

    let one = evaluation_episodes(&dataset, &EvalConfig { k: 1, ..base.clone() })?;
    let r = evaluate_episodes(&model, &one, &base.inference_options(), String::new())?;
    println!("1-shot               meanIoU {:.2}%", r.mean_iou * 100.0);

    let five = evaluation_episodes(&dataset, &EvalConfig { k: 5, ..base.clone() })?;
    for fusion in Fusion::ALL {
        let opts = EvalConfig { fusion, ..base.clone() }.inference_options();
        let r = evaluate_episodes(&model, &five, &opts, String::new())?;
        println!("5-shot {fusion:<13} meanIoU {:.2}%", r.mean_iou * 100.0);
    }
    Ok(())
}
