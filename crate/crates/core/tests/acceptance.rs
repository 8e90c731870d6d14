//! End-to-end acceptance checks, one per criterion, each printing a single
//! PASS/FAIL line. Runs as a plain binary (`harness = false`) so the lines
//! always reach the terminal:
//!
//! ```text
//! cargo test --release --test acceptance            # all ten
//! cargo test --release --test acceptance -- 1 2 5   # a subset
//! ```

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mgaug::augment::{augment_dataset, propagate_labels, AugmentationRequest};
use mgaug::data::{generate_synthetic, LabeledImageSet, Shape, Split, SyntheticSpec};
use mgaug::field::{Grid, ScalarField, SpectralOperator, VectorField};
use mgaug::geodesic::{
    det_jacobian, epdiff_rhs, integrate_flow, shoot, warp_image, ShootingConfig, VelocityTrajectory,
};
use mgaug::latent::{
    train_mgaug, LatentNoise, MixtureConfig, MixtureLatentModel, ModelInput, TrainConfig, TrainExample,
};
use mgaug::registration::{energy, energy_gradient, register_one, OptimizerSettings};
use mgaug::tasks::{
    adjusted_rand_index, dice, paired_t_test, train_task, ClassifierModel, TaskModel, TaskTrainConfig,
};

const ALPHA: f64 = 3.0;
const STEPS: usize = 10;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `|g - fd| / max(|g|, |fd|, floor)` where the floor (1e-6 of the largest
/// gradient entry) only guards exactly-vanishing components.
fn worst_relative(g: &[f64], fd: &[f64]) -> f64 {
    let floor = 1e-6 * max_abs(g);
    g.iter()
        .zip(fd)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn random_vector(grid: &Grid, r: &mut ChaCha8Rng) -> VectorField {
    let data = (0..grid.ndim() * grid.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
    VectorField::new(grid.clone(), data).unwrap()
}

/// Periodic neighbour of `flat` shifted by `delta` along `axis`.
fn neighbour(grid: &Grid, flat: usize, axis: usize, delta: isize) -> usize {
    let mut idx = grid.unravel(flat);
    let d = grid.dims()[axis] as isize;
    idx[axis] = ((idx[axis] as isize + delta).rem_euclid(d)) as usize;
    grid.flat_index(&idx[..grid.ndim()])
}

/// `(I - alpha * Laplacian)` with the periodic second-difference stencil, as a dense matrix.
fn dense_l(grid: &Grid, alpha: f64) -> DMatrix<f64> {
    let n = grid.len();
    let mut m = DMatrix::identity(n, n);
    for x in 0..n {
        for a in 0..grid.ndim() {
            let w = alpha / grid.spacing()[a].powi(2);
            m[(x, x)] += 2.0 * w;
            m[(x, neighbour(grid, x, a, 1))] -= w;
            m[(x, neighbour(grid, x, a, -1))] -= w;
        }
    }
    m
}

/// The same stencil applied matrix-free, for grids too large for a dense matrix.
fn stencil_l(grid: &Grid, alpha: f64, f: &[f64]) -> Vec<f64> {
    (0..grid.len())
        .map(|x| {
            let mut out = f[x];
            for a in 0..grid.ndim() {
                let w = alpha / grid.spacing()[a].powi(2);
                out += w * (2.0 * f[x] - f[neighbour(grid, x, a, 1)] - f[neighbour(grid, x, a, -1)]);
            }
            out
        })
        .collect()
}

// ---------------------------------------------------------------------------

fn operator_oracle() -> Verdict {
    let mut r = rng(1);
    let mut worst_roundtrip: f64 = 0.0;
    let mut worst_symbol: f64 = 0.0;
    let mut worst_stencil: f64 = 0.0;
    for dims in [vec![8, 8], vec![28, 28], vec![16, 16, 16]] {
        let grid = Grid::new(&dims).unwrap();
        let op = SpectralOperator::new(&grid, ALPHA).unwrap();
        for _ in 0..100 {
            let v = random_vector(&grid, &mut r);
            let back = op.apply_k(&op.apply_l(&v).unwrap()).unwrap();
            worst_roundtrip = worst_roundtrip.max(rel_l2(back.data(), v.data()));
        }
        for (flat, &l) in op.l_symbol().iter().enumerate() {
            let idx = grid.unravel(flat);
            let eig: f64 = (0..grid.ndim())
                .map(|a| {
                    let w = 2.0 * std::f64::consts::PI * idx[a] as f64 / grid.dims()[a] as f64;
                    (2.0 - 2.0 * w.cos()) / grid.spacing()[a].powi(2)
                })
                .sum();
            worst_symbol = worst_symbol.max(((1.0 + ALPHA * eig) - l).abs() / l);
        }
        let v = random_vector(&grid, &mut r);
        let lv = op.apply_l(&v).unwrap();
        for a in 0..grid.ndim() {
            let expect = stencil_l(&grid, ALPHA, v.component(a));
            worst_stencil = worst_stencil.max(rel_l2(lv.component(a), &expect));
        }
    }
    // The symbol must be the spectrum of the dense periodic stencil matrix.
    let grid = Grid::new(&[8, 8]).unwrap();
    let op = SpectralOperator::new(&grid, ALPHA).unwrap();
    let mut eig: Vec<f64> = dense_l(&grid, ALPHA).symmetric_eigen().eigenvalues.iter().copied().collect();
    let mut sym = op.l_symbol().to_vec();
    eig.sort_by(f64::total_cmp);
    sym.sort_by(f64::total_cmp);
    let worst_spectrum = eig.iter().zip(&sym).map(|(a, b)| (a - b).abs() / b).fold(0.0, f64::max);

    verdict(
        worst_roundtrip < 1e-5 && worst_symbol < 1e-14 && worst_spectrum < 1e-10 && worst_stencil < 1e-10,
        format!(
            "K(L v) rel err {worst_roundtrip:.1e}, symbol vs formula {worst_symbol:.1e}, \
             vs dense spectrum {worst_spectrum:.1e}, L vs stencil {worst_stencil:.1e}"
        ),
    )
}

// ---------------------------------------------------------------------------

/// Central difference along `axis`, wrapping around like the metric.
fn oracle_diff(grid: &Grid, f: &[f64], axis: usize) -> Vec<f64> {
    let h = grid.spacing()[axis];
    (0..grid.len())
        .map(|x| (f[neighbour(grid, x, axis, 1)] - f[neighbour(grid, x, axis, -1)]) / (2.0 * h))
        .collect()
}

/// `-K[(Dv)^T m + (Dm) v + m div v]`, with `K` realized as a dense solve.
fn oracle_rhs(grid: &Grid, l: &DMatrix<f64>, v: &VectorField) -> Vec<f64> {
    let nd = grid.ndim();
    let n = grid.len();
    let comp = |a: usize| DVector::from_column_slice(v.component(a));
    let m: Vec<Vec<f64>> = (0..nd).map(|a| (l * comp(a)).iter().copied().collect()).collect();
    let dv: Vec<Vec<Vec<f64>>> = (0..nd)
        .map(|i| (0..nd).map(|j| oracle_diff(grid, v.component(i), j)).collect())
        .collect();
    let dm: Vec<Vec<Vec<f64>>> = (0..nd)
        .map(|i| (0..nd).map(|j| oracle_diff(grid, &m[i], j)).collect())
        .collect();
    let lu = l.clone().lu();
    let mut out = Vec::with_capacity(nd * n);
    for i in 0..nd {
        let u: Vec<f64> = (0..n)
            .map(|x| {
                let div: f64 = (0..nd).map(|j| dv[j][j][x]).sum();
                let mut s = m[i][x] * div;
                for j in 0..nd {
                    s += dv[j][i][x] * m[j][x] + dm[i][j][x] * v.component(j)[x];
                }
                s
            })
            .collect();
        let k = lu.solve(&DVector::from_vec(u)).unwrap();
        out.extend(k.iter().map(|x| -x));
    }
    out
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn epdiff_correctness() -> Verdict {
    let grid = Grid::new(&[16, 16]).unwrap();
    let op = SpectralOperator::new(&grid, ALPHA).unwrap();
    let l = dense_l(&grid, ALPHA);
    let mut r = rng(2);
    let mut worst_rhs: f64 = 0.0;
    for _ in 0..5 {
        let mut v = op.sample_gaussian(&mut r);
        v.scale(1.5 / v.max_magnitude());
        let got = epdiff_rhs(&v, &op).unwrap();
        let want = oracle_rhs(&grid, &l, &v);
        worst_rhs = worst_rhs.max(diff_norm(got.data(), &want) / diff_norm(&want, &vec![0.0; want.len()]));
    }

    // First order: differences between successive step halvings shrink by 2.
    // A smooth initial velocity; rough draws steepen into peakons and the
    // asymptotic regime is never reached at these step counts.
    let mut v0 = op.apply_k(&op.sample_gaussian(&mut r)).unwrap();
    v0.scale(1.0 / v0.max_magnitude());
    let runs: Vec<(VectorField, VectorField)> = [10, 20, 40]
        .iter()
        .map(|&n| {
            let traj = shoot(&v0, &op, n).unwrap();
            let phi = integrate_flow(&traj).unwrap().into_coords();
            (traj.velocities()[n].clone(), phi)
        })
        .collect();
    let ratio = |get: &dyn Fn(&(VectorField, VectorField)) -> Vec<f64>| {
        diff_norm(&get(&runs[0]), &get(&runs[1])) / diff_norm(&get(&runs[1]), &get(&runs[2]))
    };
    let shoot_ratio = ratio(&|r| r.0.data().to_vec());
    let flow_ratio = ratio(&|r| r.1.data().to_vec());
    let first_order = |x: f64| (x - 2.0).abs() <= 0.2;
    verdict(
        worst_rhs < 1e-10 && first_order(shoot_ratio) && first_order(flow_ratio),
        format!(
            "rhs vs dense oracle rel err {worst_rhs:.1e}; halving ratios shoot {shoot_ratio:.3}, flow {flow_ratio:.3}"
        ),
    )
}

// ---------------------------------------------------------------------------

/// Rescales `v` until the largest per-step displacement of its geodesic is `cap`.
/// Rescales `v` to the largest amplitude whose whole trajectory keeps every
/// step within `cap` voxels. Bisection rather than a fixed point, because
/// the step size is not linear in the amplitude and large draws can diverge.
fn scale_to_step(v: &mut VectorField, op: &SpectralOperator, cap: f64) {
    let step = |a: f64| {
        let mut w = v.clone();
        w.scale(a);
        shoot(&w, op, STEPS).map(|t| t.max_step_displacement()).unwrap_or(f64::INFINITY)
    };
    let (mut lo, mut hi) = (0.0, cap * STEPS as f64 / v.max_magnitude());
    while step(hi) <= cap {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if step(mid) <= cap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    v.scale(lo);
}

fn diffeomorphism() -> Verdict {
    let grid = Grid::new(&[28, 28]).unwrap();
    let op = SpectralOperator::new(&grid, ALPHA).unwrap();
    let mut r = rng(3);
    let mut worst = f64::INFINITY;
    let mut biggest_step: f64 = 0.0;
    for _ in 0..100 {
        let mut v = op.sample_gaussian(&mut r);
        scale_to_step(&mut v, &op, 0.3);
        let traj = shoot(&v, &op, STEPS).unwrap();
        biggest_step = biggest_step.max(traj.max_step_displacement());
        worst = worst.min(det_jacobian(&integrate_flow(&traj).unwrap()).min());
    }
    verdict(
        worst > 0.0,
        format!("100 draws, max step {biggest_step:.4} voxel, min DetJac {worst:.4}"),
    )
}

// ---------------------------------------------------------------------------

fn blob(grid: &Grid, c0: f64, c1: f64, width: f64) -> ScalarField {
    ScalarField::from_fn(grid.clone(), |p| (-((p[0] - c0).powi(2) + (p[1] - c1).powi(2)) / (2.0 * width * width)).exp())
}

fn registration() -> Verdict {
    let grid = Grid::new(&[12, 12]).unwrap();
    let cfg = ShootingConfig {
        alpha: ALPHA,
        num_steps: STEPS,
    };
    let op = cfg.operator(&grid).unwrap();
    let template = blob(&grid, 5.5, 5.5, 2.0);
    let target = blob(&grid, 6.3, 5.0, 2.2);
    let sigma = 0.1;
    let mut r = rng(4);
    let mut v0 = op.sample_gaussian(&mut r);
    v0.scale(0.6 / v0.max_magnitude());

    let g = energy_gradient(&template, &v0, &target, sigma, &cfg).unwrap();
    let h = 1e-5;
    let fd: Vec<f64> = (0..v0.data().len())
        .map(|i| {
            let mut plus = v0.clone();
            plus.data_mut()[i] += h;
            let mut minus = v0.clone();
            minus.data_mut()[i] -= h;
            (energy(&template, &plus, &target, sigma, &cfg).unwrap()
                - energy(&template, &minus, &target, sigma, &cfg).unwrap())
                / (2.0 * h)
        })
        .collect();
    let grad_err = worst_relative(g.data(), &fd);

    let spec = SyntheticSpec::two_mode(vec![Shape::Disk, Shape::Cross], 10, 4);
    let data = generate_synthetic(&spec).unwrap();
    let op28 = spec.shooting.operator(&spec.grid().unwrap()).unwrap();
    let mut reductions: Vec<f64> = data
        .set
        .samples()
        .iter()
        .map(|s| {
            let res = register_one(
                &data.templates.images[s.class],
                &s.image,
                &op28,
                0.02,
                STEPS,
                &OptimizerSettings::default(),
            )
            .unwrap();
            1.0 - res.final_data / res.initial_data
        })
        .collect();
    reductions.sort_by(f64::total_cmp);
    let median = 0.5 * (reductions[9] + reductions[10]);
    verdict(
        grad_err < 1e-4 && median >= 0.8,
        format!(
            "gradient vs central differences worst rel err {grad_err:.1e}; \
             20 pairs data-term reduction median {:.1}% (min {:.1}%)",
            100.0 * median,
            100.0 * reductions[0]
        ),
    )
}

// ---------------------------------------------------------------------------

fn perturb(model: &mut MixtureLatentModel, scale: f64, r: &mut ChaCha8Rng) {
    let p: Vec<f64> = model.params_flat().iter().map(|p| p + scale * normal(r)).collect();
    model.set_params_flat(&p);
}

struct Fixture {
    images: Vec<ScalarField>,
    velocities: Vec<VectorField>,
    templates: Vec<ScalarField>,
}

impl Fixture {
    fn new(grid: &Grid, op: &SpectralOperator, n: usize, r: &mut ChaCha8Rng) -> Self {
        let c = 0.5 * (grid.dims()[0] - 1) as f64;
        let mut f = Fixture {
            images: vec![],
            velocities: vec![],
            templates: vec![],
        };
        for _ in 0..n {
            f.templates.push(blob(grid, c, c, 1.5));
            f.images
                .push(blob(grid, c + r.gen_range(-1.0..1.0), c + r.gen_range(-1.0..1.0), r.gen_range(1.2..2.0)));
            let mut v = op.sample_gaussian(r);
            v.scale(0.5 / v.max_magnitude());
            f.velocities.push(v);
        }
        f
    }

    fn items(&self) -> Vec<ModelInput<'_>> {
        (0..self.images.len())
            .map(|i| ModelInput {
                image: &self.images[i],
                velocity: &self.velocities[i],
                template: &self.templates[i],
            })
            .collect()
    }
}

/// Plain single-Gaussian-prior VAE bound, written out term by term.
fn unimodal_elbo(model: &MixtureLatentModel, items: &[ModelInput], noise: &[LatentNoise]) -> f64 {
    let lambda = model.config().lambda;
    let m = model.grid().len() as f64;
    let mut total = 0.0;
    for (it, n) in items.iter().zip(noise) {
        let (qx, qe) = model.encode(it.image, it.velocity).unwrap();
        let draw = |g: &mgaug::latent::DiagGaussian, z: &[f64]| -> Vec<f64> {
            (0..z.len()).map(|i| g.mean[i] + (0.5 * g.log_var[i]).exp() * z[i]).collect()
        };
        let x = draw(&qx, &n.x);
        let eps = draw(&qe, &n.eps);
        let prior = model.prior_components(&eps).unwrap();
        assert_eq!(prior.len(), 1);
        let p = &prior[0];

        let v = model.decode(&x).unwrap();
        let traj = shoot(&v, model.operator(), model.config().shooting.num_steps).unwrap();
        let warped = warp_image(it.template, &integrate_flow(&traj).unwrap()).unwrap();
        let sq: f64 = warped.values().iter().zip(it.image.values()).map(|(a, b)| (a - b).powi(2)).sum();
        let log_lik = -sq / (2.0 * lambda * lambda) - 0.5 * m * (2.0 * std::f64::consts::PI * lambda * lambda).ln();

        let mut kl_x = 0.0;
        for i in 0..x.len() {
            let (mq, vq) = (qx.mean[i], qx.log_var[i].exp());
            let (mp, vp) = (p.mean[i], p.log_var[i].exp());
            kl_x += 0.5 * ((vp / vq).ln() + (vq + (mq - mp).powi(2)) / vp - 1.0);
        }
        let mut kl_eps = 0.0;
        for i in 0..eps.len() {
            let (mq, vq) = (qe.mean[i], qe.log_var[i].exp());
            kl_eps += 0.5 * (vq + mq * mq - 1.0 - vq.ln());
        }
        total += log_lik - kl_x - kl_eps;
    }
    total / items.len() as f64
}

fn small_mixture(grid: &Grid, components: usize, latent_dim: usize, eps_dim: usize, seed: u64) -> MixtureLatentModel {
    let cfg = MixtureConfig {
        components,
        latent_dim,
        eps_dim,
        hidden: 12,
        ..Default::default()
    };
    MixtureLatentModel::new(cfg, grid.clone(), seed).unwrap()
}

fn elbo_correctness() -> Verdict {
    let grid = Grid::new(&[8, 8]).unwrap();
    let op = SpectralOperator::new(&grid, ALPHA).unwrap();
    let mut r = rng(5);

    let mut worst_match: f64 = 0.0;
    let mut worst_kl_z: f64 = 0.0;
    for seed in 0..5 {
        let mut model = small_mixture(&grid, 1, 4, 3, seed);
        perturb(&mut model, 0.1, &mut r);
        let fx = Fixture::new(&grid, &op, 3, &mut r);
        let items = fx.items();
        let noise: Vec<LatentNoise> = items.iter().map(|_| LatentNoise::draw(4, 3, &mut r)).collect();
        let got = model.elbo_with_noise(&items, &noise).unwrap();
        let want = unimodal_elbo(&model, &items, &noise);
        worst_match = worst_match.max((got.total - want).abs() / want.abs().max(1.0));
        worst_kl_z = worst_kl_z.max(got.kl_z.abs());
    }

    let mut min_kl = f64::INFINITY;
    let mut worst_sum: f64 = 0.0;
    let mut out_of_range = 0;
    for k in 0..1000u64 {
        let mut model = small_mixture(&grid, 2 + (k % 3) as usize, 4, 3, k);
        perturb(&mut model, 0.3, &mut r);
        let fx = Fixture::new(&grid, &op, 1, &mut r);
        let noise = vec![LatentNoise::draw(4, 3, &mut r)];
        let e = model.elbo_with_noise(&fx.items(), &noise).unwrap();
        min_kl = min_kl.min(e.kl_x).min(e.kl_eps).min(e.kl_z);
        let x: Vec<f64> = (0..4).map(|_| 3.0 * normal(&mut r)).collect();
        let eps: Vec<f64> = (0..3).map(|_| 3.0 * normal(&mut r)).collect();
        let resp = model.responsibilities(&x, &eps).unwrap();
        worst_sum = worst_sum.max((resp.iter().sum::<f64>() - 1.0).abs());
        out_of_range += resp.iter().filter(|p| !(0.0..=1.0).contains(*p)).count();
    }
    verdict(
        worst_match < 1e-10 && worst_kl_z == 0.0 && min_kl >= -1e-9 && worst_sum < 1e-12 && out_of_range == 0,
        format!(
            "C=1 vs plain VAE rel diff {worst_match:.1e}, |kl_z| {worst_kl_z:.1e}; 1000 evals: min KL {min_kl:.2e}, \
             responsibility sum err {worst_sum:.1e}"
        ),
    )
}

// ---------------------------------------------------------------------------

fn loss_gradient() -> Verdict {
    let grid = Grid::new(&[8, 8]).unwrap();
    let op = SpectralOperator::new(&grid, ALPHA).unwrap();
    let mut r = rng(6);
    let mut model = small_mixture(&grid, 2, 4, 3, 6);
    perturb(&mut model, 0.1, &mut r);
    let fx = Fixture::new(&grid, &op, 2, &mut r);
    let items = fx.items();
    let noise: Vec<LatentNoise> = items.iter().map(|_| LatentNoise::draw(4, 3, &mut r)).collect();

    let (_, grads) = model.loss_and_grad(&items, &noise).unwrap();
    let g = grads.flatten();
    let base = model.params_flat();
    assert_eq!(g.len(), base.len());
    let h = 1e-5;
    let mut probe = model.clone();
    let fd: Vec<f64> = (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] = base[i] + h;
            probe.set_params_flat(&p);
            let up = probe.loss(&items, &noise).unwrap().total;
            p[i] = base[i] - h;
            probe.set_params_flat(&p);
            let down = probe.loss(&items, &noise).unwrap().total;
            (up - down) / (2.0 * h)
        })
        .collect();
    let err = worst_relative(&g, &fd);
    verdict(err < 1e-3, format!("{} parameters, worst rel err {err:.1e}", g.len()))
}

// ---------------------------------------------------------------------------

fn register_all(set: &LabeledImageSet, templates: &[ScalarField], op: &SpectralOperator) -> Vec<VectorField> {
    set.samples()
        .iter()
        .map(|s| {
            register_one(&templates[s.class], &s.image, op, 0.02, STEPS, &OptimizerSettings::default())
                .unwrap()
                .v0
        })
        .collect()
}

fn mode_recovery() -> Verdict {
    let spec = SyntheticSpec::two_mode(vec![Shape::Disk, Shape::Cross], 40, 0);
    let data = generate_synthetic(&spec).unwrap();
    let grid = spec.grid().unwrap();
    let op = spec.shooting.operator(&grid).unwrap();
    let velocities = register_all(&data.set, &data.templates.images, &op);
    let examples: Vec<TrainExample> = data
        .set
        .samples()
        .iter()
        .zip(&velocities)
        .map(|(s, v)| TrainExample {
            image: s.image.clone(),
            velocity: v.clone(),
            template: data.templates.images[s.class].clone(),
        })
        .collect();
    let is_train = |i: &usize| data.set.samples()[*i].split == Split::Train;
    let train: Vec<TrainExample> = (0..examples.len()).filter(is_train).map(|i| examples[i].clone()).collect();
    let held: Vec<ModelInput> = (0..examples.len())
        .filter(|i| !is_train(i))
        .map(|i| examples[i].input())
        .collect();
    let all: Vec<ModelInput> = examples.iter().map(TrainExample::input).collect();

    let mut elbos = Vec::new();
    let mut ari2 = 0.0;
    for c in 1..=4 {
        let cfg = MixtureConfig {
            components: c,
            ..Default::default()
        };
        let mut model = MixtureLatentModel::new(cfg, grid.clone(), 1).unwrap();
        let train_cfg = TrainConfig {
            epochs: 300,
            batch: 16,
            lr: 1e-3,
            seed: 3,
        };
        train_mgaug(&mut model, &train, &train_cfg, None).unwrap();
        let e = model.elbo(&held, 16, &mut rng(11)).unwrap();
        elbos.push(e.total);
        if c == 2 {
            ari2 = adjusted_rand_index(&model.assign_components(&all).unwrap(), &data.modes).unwrap();
        }
    }
    let best = 1 + (0..4).max_by(|&a, &b| elbos[a].total_cmp(&elbos[b])).unwrap();
    verdict(
        ari2 > 0.8 && elbos[1] > elbos[0] && best == 2,
        format!(
            "ARI(C=2) {ari2:.3}; held-out ELBO C=1..4: {}; peak at C={best}",
            elbos.iter().map(|e| format!("{e:.1}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------

/// Keeps the first `per_class` training images of every class; held-out
/// splits are kept whole.
fn limit_train(set: &LabeledImageSet, per_class: usize) -> LabeledImageSet {
    let mut seen = vec![0; set.num_classes()];
    let mut out = LabeledImageSet::new(set.grid().clone(), set.num_classes());
    for s in set.samples() {
        if s.split == Split::Train {
            if seen[s.class] == per_class {
                continue;
            }
            seen[s.class] += 1;
        }
        out.push(s.clone()).unwrap();
    }
    out
}

/// Three shapes, two opposite stretch modes with a wide spread inside each
/// mode; 200 images per class so the held-out splits are large, of which
/// only 15 training images per class are used.
fn benefit_spec(seed: u64) -> SyntheticSpec {
    let mut spec = SyntheticSpec::two_mode(vec![Shape::Disk, Shape::Ring, Shape::Cross], 200, seed);
    spec.max_step_displacement = 1.0;
    for m in &mut spec.modes {
        m.std = [1.0; 8];
    }
    spec
}

fn augmentation_benefit() -> Verdict {
    let mut acc = [Vec::new(), Vec::new(), Vec::new()];
    for seed in 0..5u64 {
        let spec = benefit_spec(seed);
        let data = generate_synthetic(&spec).unwrap();
        let set = limit_train(&data.set, 15);
        let grid = spec.grid().unwrap();
        let op = spec.shooting.operator(&grid).unwrap();
        let train = set.filtered(|s| s.split == Split::Train);
        let examples: Vec<TrainExample> = train
            .samples()
            .iter()
            .zip(register_all(&train, &data.templates.images, &op))
            .map(|(s, v)| TrainExample {
                image: s.image.clone(),
                velocity: v,
                template: data.templates.images[s.class].clone(),
            })
            .collect();
        let task_cfg = TaskTrainConfig {
            seed,
            ..Default::default()
        };
        let classify = |d: &LabeledImageSet| {
            let mut m = TaskModel::Classifier(ClassifierModel::new(grid.clone(), 3, 128, 1.0, seed).unwrap());
            train_task(d, &mut m, &task_cfg).unwrap().test.score()
        };
        acc[0].push(classify(&set));
        for (slot, c) in [(1, 1), (2, 2)] {
            let cfg = MixtureConfig {
                components: c,
                ..Default::default()
            };
            let mut model = MixtureLatentModel::new(cfg, grid.clone(), seed).unwrap();
            let train_cfg = TrainConfig {
                epochs: 300,
                batch: 16,
                lr: 1e-3,
                seed,
            };
            train_mgaug(&mut model, &examples, &train_cfg, None).unwrap();
            let request = AugmentationRequest {
                max_step_displacement: spec.max_step_displacement,
                ..AugmentationRequest::new(&model, &data.templates, 3.0, seed)
            };
            acc[slot].push(classify(&augment_dataset(&request, &set).unwrap()));
        }
    }
    let mean = |v: &Vec<f64>| 100.0 * v.iter().sum::<f64>() / v.len() as f64;
    let (none, uni, multi) = (mean(&acc[0]), mean(&acc[1]), mean(&acc[2]));
    let t = paired_t_test(&acc[2], &acc[1]).unwrap();
    verdict(
        multi > uni && uni > none && multi - none >= 5.0 && multi - uni >= 1.0 && t.p_value < 0.1,
        format!(
            "test accuracy over 5 seeds: none {none:.1}%, C=1 {uni:.1}%, C=2 {multi:.1}%; \
             paired t-test C=2 vs C=1 p = {:.3}",
            t.p_value
        ),
    )
}

// ---------------------------------------------------------------------------

/// Flow of the reversed, negated velocity path: the inverse of the forward flow.
fn inverse_map(traj: &VelocityTrajectory) -> mgaug::geodesic::DeformationMap {
    let n = traj.num_steps();
    let vs = traj.velocities();
    // The forward flow uses v_0..v_{n-1}; walking back uses them in reverse.
    let mut back: Vec<VectorField> = (0..n).rev().map(|k| vs[k].scaled(-1.0)).collect();
    back.push(vs[0].scaled(-1.0));
    integrate_flow(&VelocityTrajectory::new(back).unwrap()).unwrap()
}

fn label_propagation() -> Verdict {
    let grid = Grid::new(&[28, 28]).unwrap();
    let op = SpectralOperator::new(&grid, ALPHA).unwrap();
    let mut r = rng(9);
    let mut worst_dice = f64::INFINITY;
    let mut sets_preserved = true;
    for (i, shape) in [Shape::Disk, Shape::Cross, Shape::Ring, Shape::Bar].iter().cycle().take(40).enumerate() {
        let seg = shape.labels(&grid);
        let mut v = op.sample_gaussian(&mut r);
        scale_to_step(&mut v, &op, if i % 2 == 0 { 0.1 } else { 0.2 });
        let traj = shoot(&v, &op, STEPS).unwrap();
        let phi = integrate_flow(&traj).unwrap();
        let moved = propagate_labels(&seg, &phi).unwrap();
        let back = propagate_labels(&moved, &inverse_map(&traj)).unwrap();
        sets_preserved &= moved.label_set().is_subset(&seg.label_set());
        for q in seg.label_set() {
            worst_dice = worst_dice.min(dice(back.labels(), seg.labels(), q));
        }
    }
    verdict(
        sets_preserved && worst_dice > 0.9,
        format!("40 deformations, label sets preserved: {sets_preserved}, worst per-label Dice {worst_dice:.3}"),
    )
}

// ---------------------------------------------------------------------------

fn cli(args: &[&str]) -> i32 {
    mgaug::cli::run(std::iter::once("mgaug").chain(args.iter().copied()))
}

fn pipeline(root: &Path) -> Result<(), String> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let cfg = p("run.cfg");
    std::fs::write(
        &cfg,
        "size = 16\nn_per_class = 8\nshapes = disk,cross\nreg_iters = 40\nhidden = 32\nlatent_dim = 4\n\
         eps_dim = 2\nepochs = 4\nbatch = 8\ntask_hidden = 16\ninner_iters = 1\nmax_rounds = 2\n\
         count_per_class = 3\nseed = 5\n",
    )
    .map_err(|e| e.to_string())?;
    let steps: Vec<Vec<String>> = vec![
        vec!["synth".into(), "--out".into(), p("synth")],
        vec!["register".into(), "--data".into(), p("synth/data"), "--templates".into(), p("synth/templates"), "--out".into(), p("reg")],
        vec!["train-aug".into(), "--data".into(), p("synth/data"), "--templates".into(), p("synth/templates"), "--velocities".into(), p("reg/velocities"), "--modes".into(), p("synth/modes.csv"), "--out".into(), p("aug")],
        vec!["sample".into(), "--model".into(), p("aug/model"), "--templates".into(), p("synth/templates"), "--data".into(), p("synth/data"), "--out".into(), p("samples")],
        vec!["train-task".into(), "--data".into(), p("samples/dataset"), "--out".into(), p("task")],
        vec!["eval".into(), "--data".into(), p("synth/data"), "--task-model".into(), p("task/task_model"), "--out".into(), p("eval")],
        vec!["joint".into(), "--data".into(), p("synth/data"), "--templates".into(), p("synth/templates"), "--velocities".into(), p("reg/velocities"), "--out".into(), p("joint")],
    ];
    for step in steps {
        let mut args: Vec<&str> = step.iter().map(String::as_str).collect();
        args.extend(["--config", cfg.as_str()]);
        let code = cli(&args);
        if code != 0 {
            return Err(format!("`mgaug {}` exited with {code}", step[0]));
        }
    }
    Ok(())
}

fn csv_files(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        if let Err(e) = pipeline(d.path()) {
            return verdict(false, e);
        }
    }
    let files = csv_files(a.path());
    let differing: Vec<String> = files
        .iter()
        .filter(|f| std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    verdict(
        !files.is_empty() && differing.is_empty() && csv_files(b.path()) == files,
        format!(
            "7 commands run twice, {} metric CSVs compared, {} differ{}",
            files.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------------------

type Criterion = (u32, &'static str, u64, fn() -> Verdict);

const CRITERIA: &[Criterion] = &[
    (1, "spectral operator oracle", 5, operator_oracle),
    (2, "EPDiff correctness", 30, epdiff_correctness),
    (3, "diffeomorphic sampling", 60, diffeomorphism),
    (4, "registration gradient and convergence", 120, registration),
    (5, "ELBO correctness", 60, elbo_correctness),
    (6, "mixture loss gradient", 120, loss_gradient),
    (7, "mode recovery and C sweep", 900, mode_recovery),
    (8, "augmentation benefit", 1800, augmentation_benefit),
    (9, "label propagation", 120, label_propagation),
    (10, "CLI determinism", 600, determinism),
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for &(id, name, budget, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let took = start.elapsed();
        let in_time = took <= Duration::from_secs(budget);
        let pass = v.pass && in_time;
        failed += usize::from(!pass);
        println!(
            "criterion {id:>2} {}: {name} -- {} [{:.1}s of {budget}s]",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
