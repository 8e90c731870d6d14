//! Trains a small mixture model, then triples the training split with
//! sampled deformations of the class templates and writes PNG previews.
//!
//! `cargo run --release --example augment [out_dir]`

use mgaug::augment::{augment_dataset, AugmentationRequest};
use mgaug::data::{export_png, generate_synthetic, Origin, Shape, Split, SyntheticSpec};
use mgaug::latent::{train_mgaug, MixtureConfig, MixtureLatentModel, TrainConfig, TrainExample};
use mgaug::registration::{register_one, OptimizerSettings};

fn main() -> mgaug::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "augment_preview".into());
    let mut spec = SyntheticSpec::two_mode(vec![Shape::Disk, Shape::Cross], 12, 4);
    spec.size = 20;
    let data = generate_synthetic(&spec)?;
    let grid = spec.grid()?;
    let op = spec.shooting.operator(&grid)?;

    let examples = data
        .set
        .samples()
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| {
            let template = data.templates.images[s.class].clone();
            let fit = register_one(&template, &s.image, &op, 0.02, 10, &OptimizerSettings::default())?;
            Ok(TrainExample { image: s.image.clone(), velocity: fit.v0, template })
        })
        .collect::<mgaug::Result<Vec<_>>>()?;

    let cfg = MixtureConfig { components: 2, hidden: 32, latent_dim: 8, ..Default::default() };
    let mut model = MixtureLatentModel::new(cfg, grid, 4)?;
    train_mgaug(&mut model, &examples, &TrainConfig { epochs: 30, ..Default::default() }, None)?;

    let request = AugmentationRequest::new(&model, &data.templates, 3.0, 4);
    let augmented = augment_dataset(&request, &data.set)?;
    std::fs::create_dir_all(&out).map_err(|e| mgaug::Error::io(&out, e))?;
    let mut per_component = [0usize; 2];
    for (i, s) in augmented.samples().iter().enumerate() {
        if let Origin::Augmented { component, .. } = s.origin {
            per_component[component] += 1;
            if per_component[component] <= 4 {
                export_png(&s.image, format!("{out}/class{}_comp{component}_{i}.png", s.class))?;
            }
        }
    }
    println!("originals {} -> total {}", data.set.len(), augmented.len());
    println!("generated per component {per_component:?}; previews in {out}/");
    Ok(())
}
