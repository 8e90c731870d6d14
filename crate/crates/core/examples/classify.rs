//! Trains the classifier on a small synthetic training split, with and
//! without mixture-model geometric augmentation, and compares test accuracy.

use mgaug::augment::{augment_dataset, AugmentationRequest};
use mgaug::data::{generate_synthetic, Shape, Split, SyntheticSpec};
use mgaug::latent::{train_mgaug, MixtureConfig, MixtureLatentModel, TrainConfig, TrainExample};
use mgaug::registration::{register_one, OptimizerSettings};
use mgaug::tasks::{train_task, ClassifierModel, TaskModel, TaskTrainConfig};

fn main() -> mgaug::Result<()> {
    let mut spec = SyntheticSpec::two_mode(vec![Shape::Disk, Shape::Ring, Shape::Cross], 16, 2);
    spec.size = 20;
    let data = generate_synthetic(&spec)?;
    let grid = spec.grid()?;
    let op = spec.shooting.operator(&grid)?;
    let task_cfg = TaskTrainConfig { epochs: 60, seed: 2, ..Default::default() };

    let mut plain = TaskModel::Classifier(ClassifierModel::new(grid.clone(), 3, 64, 1.0, 2)?);
    let baseline = train_task(&data.set, &mut plain, &task_cfg)?;

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
    let mut aug_model = MixtureLatentModel::new(cfg, grid.clone(), 2)?;
    train_mgaug(&mut aug_model, &examples, &TrainConfig { epochs: 30, ..Default::default() }, None)?;
    let augmented = augment_dataset(&AugmentationRequest::new(&aug_model, &data.templates, 3.0, 2), &data.set)?;

    let mut boosted = TaskModel::Classifier(ClassifierModel::new(grid, 3, 64, 1.0, 2)?);
    let with_aug = train_task(&augmented, &mut boosted, &task_cfg)?;
    println!("test accuracy, originals only   {:.3}", baseline.test.score());
    println!("test accuracy, augmented 3x     {:.3}", with_aug.test.score());
    Ok(())
}
