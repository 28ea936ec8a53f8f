//! Single-scale against multi-scale inference: the query is also segmented at
//! 0.7x and 1.3x and the confidence maps are averaged at full resolution.
//!
//! Usage: `cargo run --release --example multi_scale -- [MODEL.ck | key=value ...]`

use fewseg::episodes::ShapeDataset;
use fewseg::evaluation::{evaluate_episodes, evaluation_episodes, EvalConfig};
use fewseg::model::scaled_dims;

mod common;

fn main() -> fewseg::Result<()> {
    let (run, model) = common::model_from_args()?;
    let dataset = ShapeDataset::new(run.dataset.clone())?;
    let cfg = EvalConfig {
        episodes: 300,
        ..run.eval.clone()
    };
    let episodes = evaluation_episodes(&dataset, &cfg)?;
    let size = run.dataset.image_size;
    for scales in [vec![1.0], vec![0.7, 1.0, 1.3]] {
        let dims: Vec<String> = scales
            .iter()
            .map(|&s| scaled_dims(size, size, s).map(|(h, w)| format!("{h}x{w}")))
            .collect::<fewseg::Result<_>>()?;
        let opts = EvalConfig { scales: scales.clone(), ..cfg.clone() }.inference_options();
        let r = evaluate_episodes(&model, &episodes, &opts, String::new())?;
        println!("scales {scales:?} (queries {}): meanIoU {:.2}%", dims.join(", "), r.mean_iou * 100.0);
    }
    Ok(())
}
