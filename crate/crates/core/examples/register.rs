//! Registers a stretched disk back to the round template and shows how
//! much of the mismatch the optimized initial velocity explains.

use mgaug::data::Shape;
use mgaug::field::{Grid, SpectralOperator};
use mgaug::geodesic::{det_jacobian, integrate_flow, shoot, warp_image};
use mgaug::registration::{register_one, OptimizerSettings};

fn main() -> mgaug::Result<()> {
    let grid = Grid::new(&[28, 28])?;
    let op = SpectralOperator::new(&grid, 3.0)?;
    let template = Shape::Disk.render(&grid);

    // Target: the template pushed along a smooth horizontal stretch.
    let stretch = mgaug::field::VectorField::from_fn(grid.clone(), |x, out| {
        out[0] = 1.5 * (2.0 * std::f64::consts::PI * x[0] / 28.0).sin();
        out[1] = 0.0;
    });
    let mut truth = op.apply_k(&stretch)?;
    truth.scale(2.0 / truth.max_magnitude());
    let target = warp_image(&template, &integrate_flow(&shoot(&truth, &op, 10)?)?)?;

    let fit = register_one(&template, &target, &op, 0.02, 10, &OptimizerSettings::default())?;
    let phi = integrate_flow(&shoot(&fit.v0, &op, 10)?)?;
    let before = template.ssd(&target);
    let after = warp_image(&template, &phi)?.ssd(&target);
    println!("iterations accepted  {}", fit.energies.len() - 1);
    println!("energy               {:.2} -> {:.2}", fit.energies[0], fit.energies[fit.energies.len() - 1]);
    println!("SSD                  {before:.3} -> {after:.3} ({:.1}% removed)", 100.0 * (1.0 - after / before));
    println!("min DetJac           {:.3}", det_jacobian(&phi).min());
    Ok(())
}
