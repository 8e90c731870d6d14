//! Alternating training of augmenter and classifier until the combined
//! loss stops moving.

use mgaug::data::{generate_synthetic, Shape, Split, SyntheticSpec};
use mgaug::latent::{MixtureConfig, MixtureLatentModel, TrainConfig, TrainExample};
use mgaug::registration::{register_one, OptimizerSettings};
use mgaug::tasks::{joint_train, ClassifierModel, JointConfig, TaskModel, TaskTrainConfig};

fn main() -> mgaug::Result<()> {
    let mut spec = SyntheticSpec::two_mode(vec![Shape::Disk, Shape::Cross], 12, 8);
    spec.size = 16;
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

    let cfg = MixtureConfig { components: 2, hidden: 32, latent_dim: 4, eps_dim: 2, ..Default::default() };
    let mut augmenter = MixtureLatentModel::new(cfg, grid.clone(), 8)?;
    let mut task = TaskModel::Classifier(ClassifierModel::new(grid, 2, 32, 1.0, 8)?);
    let joint = JointConfig {
        inner_iters: 5,
        max_rounds: 8,
        mgaug: TrainConfig { seed: 8, ..Default::default() },
        task: TaskTrainConfig { lr: 1e-2, seed: 8, ..Default::default() },
        ..Default::default()
    };
    let outcome = joint_train(&data.set, &data.templates, &examples, &mut augmenter, &mut task, &joint)?;
    for (i, l) in outcome.loss_history().iter().enumerate() {
        println!("round {i:2}  loss {l:.4}");
    }
    println!("converged {}  test accuracy {:.3}", outcome.converged, outcome.test.score());
    Ok(())
}
