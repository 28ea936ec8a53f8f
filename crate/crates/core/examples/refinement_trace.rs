//! Follows one query through the refinement loop: IoU after every iteration
//! and the foreground probability map at feature resolution.
//!
//! Usage: `cargo run --release --example refinement_trace -- [MODEL.ck | key=value ...]`

use fewseg::episodes::{Phase, ShapeDataset};
use fewseg::metrics::iou;
use fewseg::model::InferenceOptions;
use fewseg::refinement::predict_mask;

mod common;

fn main() -> fewseg::Result<()> {
    let (run, model) = common::model_from_args()?;
    let dataset = ShapeDataset::new(run.dataset.clone())?;
    let opts = InferenceOptions {
        iterations: 6,
        ..InferenceOptions::default()
    };
    for index in 0..3 {
        let ep = dataset.episode_at(Phase::Test, 1, 7, index)?;
        let seg = model.segment(&ep.support, &ep.query_image, &opts)?;
        let (h, w) = (ep.query_mask.height(), ep.query_mask.width());
        println!("episode {index} (class {})", ep.class_id);
        for (t, map) in seg.steps.iter().enumerate() {
            let score = iou(&predict_mask(map, h, w)?, &ep.query_mask)?;
            println!("  t={t}  IoU {:.3}", score);
        }
        let last = seg.steps.last().expect("at least the initial map");
        for y in 0..last.height() {
            let row: Vec<String> = (0..last.width())
                .map(|x| format!("{:.2}", last.foreground()[y * last.width() + x]))
                .collect();
            println!("    {}", row.join(" "));
        }
    }
    Ok(())
}
