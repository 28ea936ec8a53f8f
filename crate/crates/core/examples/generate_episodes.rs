//! Samples a few test-split episodes, prints the class split and the masks,
//! and writes the images as PPM/PGM files.
//!
//! Usage: `cargo run --release --example generate_episodes -- [OUT_DIR]`

use std::path::PathBuf;

use fewseg::episodes::{DatasetConfig, Phase, ShapeDataset};
use fewseg::pnm::{image_to_pnm, mask_to_pnm};

mod common;

fn main() -> fewseg::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "episodes".into()));
    let dataset = ShapeDataset::new(DatasetConfig::default())?;
    println!("train classes {:?}", dataset.split.classes(Phase::Train));
    println!("test classes  {:?}", dataset.split.classes(Phase::Test));

    std::fs::create_dir_all(&out).map_err(|e| fewseg::Error::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    for i in 0..3 {
        let ep = dataset.episode_at(Phase::Test, 1, 0, i)?;
        let class = &dataset.classes[ep.class_id];
        println!("\nepisode {i}: class {} ({:?}, {:?})", ep.class_id, class.family, class.texture);
        println!("support mask ({} px)            query mask ({} px)", ep.support[0].mask.count(), ep.query_mask.count());
        let (a, b) = (common::ascii(&ep.support[0].mask, 2), common::ascii(&ep.query_mask, 2));
        for (l, r) in a.lines().zip(b.lines()) {
            println!("{l}  {r}");
        }
        image_to_pnm(&ep.support[0].image, None)?.save(&out.join(format!("ep{i}_support.ppm")))?;
        mask_to_pnm(&ep.support[0].mask, None).save(&out.join(format!("ep{i}_support_mask.pgm")))?;
        image_to_pnm(&ep.query_image, None)?.save(&out.join(format!("ep{i}_query.ppm")))?;
        mask_to_pnm(&ep.query_mask, None).save(&out.join(format!("ep{i}_query_mask.pgm")))?;
    }
    println!("\nwrote {}", out.display());
    Ok(())
}
