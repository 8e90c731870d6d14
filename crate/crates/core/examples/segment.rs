//! Segmentation: trains the per-voxel segmenter and checks that label maps
//! carried through a deformation keep their label set.

use mgaug::augment::propagate_labels;
use mgaug::data::{generate_synthetic, Shape, SyntheticSpec};
use mgaug::field::SpectralOperator;
use mgaug::geodesic::{integrate_flow, shoot};
use mgaug::tasks::{dice_per_label, train_task, SegmenterModel, TaskModel, TaskTrainConfig};
use rand::SeedableRng;

fn main() -> mgaug::Result<()> {
    let mut spec = SyntheticSpec::two_mode(vec![Shape::Disk, Shape::Cross], 10, 6);
    spec.size = 20;
    let data = generate_synthetic(&spec)?;
    let grid = spec.grid()?;

    let mut model = TaskModel::Segmenter(SegmenterModel::new(grid.clone(), 3, 2, 32, 1.0, 6)?);
    let outcome = train_task(&data.set, &mut model, &TaskTrainConfig { epochs: 200, lr: 1e-2, seed: 6, ..Default::default() })?;
    println!("test mean foreground Dice  {:.3}", outcome.test.score());

    let op = SpectralOperator::new(&grid, 3.0)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
    let mut v0 = op.apply_k(&op.sample_gaussian(&mut rng))?;
    v0.scale(1.5 / v0.max_magnitude());
    let phi = integrate_flow(&shoot(&v0, &op, 10)?)?;
    let labels = Shape::Cross.labels(&grid);
    let moved = propagate_labels(&labels, &phi)?;
    println!("label set {:?} -> {:?}", labels.label_set(), moved.label_set());
    println!("Dice of moved vs original  {:?}", dice_per_label(moved.labels(), labels.labels(), 3));
    Ok(())
}
