//! Trains a small interpretable classifier on the synthetic planted-patch
//! dataset and writes explanation visualizations (PGM/PPM) for a few
//! validation images into ./explained/.
//!
//! Run with `cargo run --release --example explain_image`.

use bla::data::resolve_dataset;
use bla::pnm;
use bla::train::{explain_input, train, ExperimentConfig, Mode};
use std::path::Path;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (train_ds, val_ds) = resolve_dataset("synthetic", 1000)?;
    let cfg = ExperimentConfig {
        epochs: 1,
        ..ExperimentConfig::new(Mode::Bla, 0)
    };
    println!("training 1 epoch on {} synthetic images...", train_ds.len());
    let (net, result) = train(&cfg, &train_ds, &val_ds, None)?;
    println!(
        "validation accuracy {:.4}, mean explanation size {:.1}",
        result.accuracy, result.size_mean
    );

    let out = Path::new("explained");
    std::fs::create_dir_all(out)?;
    let model = net.as_standard()?;
    for index in 0..3 {
        let e = explain_input(model, &val_ds, index)?;
        let img = &val_ds.images[index];
        let (h, w) = (img.shape()[0], img.shape()[1]);
        pnm::write_pgm(
            &out.join(format!("input-{index}.pgm")),
            w,
            h,
            &pnm::image_bytes(img)?,
        )?;
        pnm::write_overlay_ppm(
            &out.join(format!("overlay-{index}.ppm")),
            img,
            &e.soft.q,
            e.soft.grid,
        )?;
        println!(
            "image {index}: label {} prediction {:.3} explanation size {}",
            e.label,
            e.prediction,
            e.hard.size()
        );
    }
    println!("wrote PGM/PPM files under {}", out.display());
    Ok(())
}
