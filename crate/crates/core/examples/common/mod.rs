//! Model loading shared by the examples.
#![allow(dead_code)]

use fewseg::cli::load_model;
use fewseg::config::RunConfig;
use fewseg::episodes::ShapeDataset;
use fewseg::model::Model;
use fewseg::training::{train, TrainProgress};

/// Loads `path.ck` when the first argument is a checkpoint, otherwise trains a small model.
pub fn model_from_args() -> fewseg::Result<(RunConfig, Model)> {
    let mut run = RunConfig::default();
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let Some(path) = args.first().filter(|a| a.ends_with(".ck")) {
        let model = load_model(path.as_ref(), &run)?;
        return Ok((run, model));
    }
    run.train.epochs = 12;
    run.train.episodes_per_epoch = 400;
    for kv in &args {
        run.apply_override(kv)?;
    }
    run.validate()?;
    eprintln!("no checkpoint given; training {} epochs x {} episodes", run.train.epochs, run.train.episodes_per_epoch);
    let dataset = ShapeDataset::new(run.dataset.clone())?;
    let mut model = Model::new(run.model.clone(), run.train.seed)?;
    let mut progress = TrainProgress::new(&run.train);
    train(&run.train, &dataset, &mut model, &mut progress, |_, _| Ok(()))?;
    Ok((run, model))
}

/// Coarse text rendering of a mask, one character per `step` pixels.
pub fn ascii(mask: &fewseg::tensor::BinaryMask, step: usize) -> String {
    let mut s = String::new();
    for y in (0..mask.height()).step_by(step) {
        for x in (0..mask.width()).step_by(step) {
            s.push(if mask.get(y, x) { '#' } else { '.' });
        }
        s.push('\n');
    }
    s
}
