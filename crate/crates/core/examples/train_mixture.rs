//! Fits the mixture latent model to registered velocities of the two-mode
//! synthetic benchmark and checks how well its components match the modes.
//!
//! `cargo run --release --example train_mixture [epochs]`

use mgaug::data::{generate_synthetic, Shape, Split, SyntheticSpec};
use mgaug::latent::{train_mgaug, MixtureConfig, MixtureLatentModel, TrainConfig, TrainExample};
use mgaug::registration::{register_one, OptimizerSettings};
use mgaug::tasks::adjusted_rand_index;

fn main() -> mgaug::Result<()> {
    let epochs = std::env::args().nth(1).map_or(60, |s| s.parse().expect("epochs"));
    let spec = SyntheticSpec::two_mode(vec![Shape::Disk, Shape::Cross], 20, 1);
    let data = generate_synthetic(&spec)?;
    let grid = spec.grid()?;
    let op = spec.shooting.operator(&grid)?;

    let mut examples = Vec::new();
    let mut modes = Vec::new();
    for (s, &mode) in data.set.samples().iter().zip(&data.modes) {
        if s.split != Split::Train {
            continue;
        }
        let template = data.templates.images[s.class].clone();
        let fit = register_one(&template, &s.image, &op, 0.02, 10, &OptimizerSettings::default())?;
        examples.push(TrainExample { image: s.image.clone(), velocity: fit.v0, template });
        modes.push(mode);
    }
    println!("registered {} training images", examples.len());

    let cfg = MixtureConfig { components: 2, hidden: 64, ..Default::default() };
    let mut model = MixtureLatentModel::new(cfg, grid, 1)?;
    let history = train_mgaug(&mut model, &examples, &TrainConfig { epochs, ..Default::default() }, None)?;
    let first = history[0].total;
    let last = history[history.len() - 1].total;
    println!("loss per sample      {first:.1} -> {last:.1}");

    let items: Vec<_> = examples.iter().map(TrainExample::input).collect();
    let assigned = model.assign_components(&items)?;
    println!("ARI vs true modes    {:.3}", adjusted_rand_index(&assigned, &modes)?);
    Ok(())
}
