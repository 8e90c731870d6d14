//! Sampling deformations from a trained mixture model and synthesizing
//! augmented training sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::{LabelMap, LabeledImageSet, Origin, Sample, Split, Templates};
use crate::error::{Error, Result};
use crate::field::{ScalarField, SpectralOperator, VectorField};
use crate::geodesic::{det_jacobian, integrate_flow, shoot, warp_image, DeformationMap};
use crate::latent::MixtureLatentModel;

/// Default cap on the displacement of any voxel in one flow step, in units of the smallest spacing.
pub const DEFAULT_MAX_STEP_DISPLACEMENT: f64 = 0.4;

/// Nearest-neighbour lookup of `seg` at `phi(x)`; coordinates outside the
/// domain clamp to the border, so no new labels can appear.
pub fn propagate_labels(seg: &LabelMap, phi: &DeformationMap) -> Result<LabelMap> {
    let grid = seg.grid();
    grid.check_same(phi.grid(), "label propagation")?;
    let n = grid.len();
    let nd = grid.ndim();
    let coords = phi.coords();
    let labels = (0..n)
        .map(|x| {
            let mut idx = [0usize; 3];
            for a in 0..nd {
                let u = (coords.component(a)[x] / grid.spacing()[a]).round();
                idx[a] = u.clamp(0.0, (grid.dims()[a] - 1) as f64) as usize;
            }
            seg.labels()[grid.flat_index(&idx[..nd])]
        })
        .collect();
    LabelMap::new(grid.clone(), labels)
}

/// Outcome of shooting a candidate velocity through the diffeomorphism gate.
#[derive(Debug, Clone)]
pub struct GatedDeformation {
    pub map: DeformationMap,
    pub min_detjac: f64,
}

/// Shoots `v0` and accepts it only if no flow step moves a voxel by more
/// than `max_step_displacement * min_spacing` and the Jacobian determinant
/// stays positive. Returns `None` on rejection.
pub fn gate_velocity(
    v0: &VectorField,
    op: &SpectralOperator,
    num_steps: usize,
    max_step_displacement: f64,
) -> Result<Option<GatedDeformation>> {
    let traj = match shoot(v0, op, num_steps) {
        Ok(t) => t,
        Err(crate::Error::Divergence { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    if traj.max_step_displacement() > max_step_displacement * v0.grid().min_spacing() {
        return Ok(None);
    }
    let map = match integrate_flow(&traj) {
        Ok(m) => m,
        Err(crate::Error::Divergence { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let min_detjac = det_jacobian(&map).min();
    Ok((min_detjac > 0.0).then_some(GatedDeformation { map, min_detjac }))
}

/// Consecutive gate rejections after which sampling gives up.
pub const MAX_CONSECUTIVE_REJECTIONS: usize = 20;

/// Latent draw behind one sampled deformation.
#[derive(Debug, Clone)]
pub struct LatentSample {
    pub eps: Vec<f64>,
    pub component: usize,
    pub x: Vec<f64>,
    pub v0: VectorField,
}

#[derive(Debug, Clone)]
pub struct SampledDeformation {
    pub latent: LatentSample,
    pub map: DeformationMap,
    pub min_detjac: f64,
    /// Draws rejected by the gate before this one was accepted.
    pub rejected: usize,
}

/// Draws `eps ~ N(0, I)`, `z` uniformly (restricted to `components` when
/// given), `x ~ N(mu_z(eps), Sigma_z(eps))` and decodes `x` into a velocity.
pub fn sample_latent<R: Rng>(
    model: &MixtureLatentModel,
    components: Option<&[usize]>,
    rng: &mut R,
) -> Result<LatentSample> {
    let cfg = model.config();
    let eps: Vec<f64> = (0..cfg.eps_dim).map(|_| rng.sample(StandardNormal)).collect();
    let component = match components {
        Some(set) => set[rng.gen_range(0..set.len())],
        None => rng.gen_range(0..model.components()),
    };
    let prior = model.prior_components(&eps)?;
    let g = &prior[component];
    let x: Vec<f64> = g
        .mean
        .iter()
        .zip(&g.log_var)
        .map(|(&m, &lv)| m + (0.5 * lv).exp() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let v0 = model.decode(&x)?;
    Ok(LatentSample { eps, component, x, v0 })
}

/// Samples latents until one passes [`gate_velocity`].
pub fn sample_deformation<R: Rng>(
    model: &MixtureLatentModel,
    components: Option<&[usize]>,
    max_step_displacement: f64,
    rng: &mut R,
) -> Result<SampledDeformation> {
    if let Some(set) = components {
        if set.is_empty() || set.iter().any(|&c| c >= model.components()) {
            return Err(Error::Config(format!(
                "component filter {set:?} is not a non-empty subset of 0..{}",
                model.components()
            )));
        }
    }
    let steps = model.config().shooting.num_steps;
    for rejected in 0..MAX_CONSECUTIVE_REJECTIONS {
        let latent = sample_latent(model, components, rng)?;
        if let Some(g) = gate_velocity(&latent.v0, model.operator(), steps, max_step_displacement)? {
            return Ok(SampledDeformation {
                latent,
                map: g.map,
                min_detjac: g.min_detjac,
                rejected,
            });
        }
    }
    Err(Error::Sampling(format!(
        "{MAX_CONSECUTIVE_REJECTIONS} consecutive draws failed the diffeomorphism gate"
    )))
}

/// What to generate and from which model.
#[derive(Debug, Clone)]
pub struct AugmentationRequest<'a> {
    pub model: &'a MixtureLatentModel,
    pub templates: &'a Templates,
    /// Augmented-to-original ratio.
    pub multiplier: f64,
    pub seed: u64,
    pub component_filter: Option<Vec<usize>>,
    pub max_step_displacement: f64,
    /// Adds `N(0, lambda^2)` intensity noise to generated images. Off by default.
    pub observation_noise: bool,
}

impl<'a> AugmentationRequest<'a> {
    pub fn new(model: &'a MixtureLatentModel, templates: &'a Templates, multiplier: f64, seed: u64) -> Self {
        AugmentationRequest {
            model,
            templates,
            multiplier,
            seed,
            component_filter: None,
            max_step_displacement: DEFAULT_MAX_STEP_DISPLACEMENT,
            observation_noise: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.multiplier > 0.0 && self.multiplier.is_finite()) {
            return Err(Error::Config(format!("multiplier must be positive, got {}", self.multiplier)));
        }
        if self.templates.images.is_empty() {
            return Err(Error::Config("no class templates".into()));
        }
        if !(self.max_step_displacement > 0.0) {
            return Err(Error::Config("max_step_displacement must be positive".into()));
        }
        for t in &self.templates.images {
            self.model.grid().check_same(t.grid(), "template")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AugmentedSample {
    pub image: ScalarField,
    pub class: usize,
    pub seg: Option<LabelMap>,
    pub component: usize,
    pub template: usize,
    pub v0: VectorField,
    pub min_detjac: f64,
}

/// Splits `ceil(multiplier * sum(counts))` samples over classes in
/// proportion to `counts`; each class gets within one of its exact share.
pub fn allocate_per_class(counts: &[usize], multiplier: f64) -> Vec<usize> {
    let total_orig: usize = counts.iter().sum();
    let total = (multiplier * total_orig as f64 - 1e-9).ceil().max(0.0) as usize;
    let exact: Vec<f64> = counts.iter().map(|&c| multiplier * c as f64).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - alloc[a] as f64;
        let fb = exact[b] - alloc[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(alloc.iter().sum());
    for &k in order.iter().cycle().take(left.min(counts.len() * 2)) {
        if left == 0 {
            break;
        }
        alloc[k] += 1;
        left -= 1;
    }
    alloc
}

/// Generates `per_class[k]` warped copies of template `k`. Sample `i` (in
/// class-major order) draws from its own stream `(seed, i)`, so the result
/// does not depend on the thread schedule.
pub fn generate(request: &AugmentationRequest, per_class: &[usize]) -> Result<Vec<AugmentedSample>> {
    request.validate()?;
    if per_class.len() > request.templates.images.len() {
        return Err(Error::Config(format!(
            "{} classes requested but only {} templates",
            per_class.len(),
            request.templates.images.len()
        )));
    }
    let jobs: Vec<usize> = per_class
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| std::iter::repeat(k).take(n))
        .collect();
    let lambda = request.model.config().lambda;
    jobs.par_iter()
        .enumerate()
        .map(|(i, &class)| {
            let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
            rng.set_stream(i as u64);
            let d = sample_deformation(
                request.model,
                request.component_filter.as_deref(),
                request.max_step_displacement,
                &mut rng,
            )?;
            let mut image = warp_image(&request.templates.images[class], &d.map)?;
            if request.observation_noise {
                for p in image.values_mut() {
                    *p += lambda * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let seg = match &request.templates.labels {
                Some(labels) => Some(propagate_labels(&labels[class], &d.map)?),
                None => None,
            };
            Ok(AugmentedSample {
                image,
                class,
                seg,
                component: d.latent.component,
                template: class,
                v0: d.latent.v0,
                min_detjac: d.min_detjac,
            })
        })
        .collect()
}

/// Originals plus `ceil(multiplier * n_train)` augmented training samples,
/// class-balanced after the training split's class histogram.
pub fn augment_dataset(request: &AugmentationRequest, original: &LabeledImageSet) -> Result<LabeledImageSet> {
    let generated = generate(request, &allocate_for(original, request.multiplier))?;
    merge_augmented(original, generated)
}

/// Per-class sample counts [`augment_dataset`] generates for `original`.
pub fn allocate_for(original: &LabeledImageSet, multiplier: f64) -> Vec<usize> {
    let mut counts = original.subset(Split::Train).class_histogram();
    counts.resize(original.num_classes(), 0);
    allocate_per_class(&counts, multiplier)
}

/// Appends generated samples to a copy of `original` as augmented training data.
pub fn merge_augmented(original: &LabeledImageSet, generated: Vec<AugmentedSample>) -> Result<LabeledImageSet> {
    let mut out = original.clone();
    for s in generated {
        out.push(Sample {
            image: s.image,
            class: s.class,
            seg: if original.has_segmentations() { s.seg } else { None },
            split: Split::Train,
            origin: Origin::Augmented {
                component: s.component,
                template: s.template,
            },
        })?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Shape, SyntheticSpec};
    use crate::field::Grid;
    use crate::latent::MixtureConfig;

    fn model(grid: &Grid, spread: f64) -> MixtureLatentModel {
        let cfg = MixtureConfig {
            latent_dim: 4,
            eps_dim: 3,
            hidden: 16,
            prior_init_spread: spread,
            ..Default::default()
        };
        MixtureLatentModel::new(cfg, grid.clone(), 5).unwrap()
    }

    fn perturb(m: &mut MixtureLatentModel, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = m.params_flat();
        for v in &mut p {
            *v += scale * rng.gen_range(-1.0..1.0);
        }
        m.set_params_flat(&p);
    }

    #[test]
    fn identity_map_keeps_labels() {
        let g = Grid::new(&[6, 5]).unwrap();
        let seg = LabelMap::new(g.clone(), (0..30).map(|i| (i % 3) as u8).collect()).unwrap();
        assert_eq!(propagate_labels(&seg, &DeformationMap::identity(&g)).unwrap(), seg);
    }

    #[test]
    fn integer_translation_shifts_labels() {
        let g = Grid::new(&[6, 6]).unwrap();
        let seg = LabelMap::new(g.clone(), (0..36).map(|i| (i % 5) as u8).collect()).unwrap();
        let mut c = DeformationMap::identity(&g).into_coords();
        for v in c.component_mut(1) {
            *v += 1.0;
        }
        let out = propagate_labels(&seg, &DeformationMap::from_coords(c)).unwrap();
        for i in 0..6 {
            for j in 0..5 {
                assert_eq!(out.labels()[g.flat_index(&[i, j])], seg.labels()[g.flat_index(&[i, j + 1])]);
            }
        }
    }

    #[test]
    fn zero_decoder_gives_identity() {
        let g = Grid::new(&[8, 8]).unwrap();
        let m = model(&g, 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let d = sample_deformation(&m, None, DEFAULT_MAX_STEP_DISPLACEMENT, &mut rng).unwrap();
            assert_eq!(d.map, DeformationMap::identity(&g));
            assert_eq!(d.min_detjac, 1.0);
        }
    }

    #[test]
    fn unstable_model_reports_sampling_error() {
        let g = Grid::new(&[8, 8]).unwrap();
        let mut m = model(&g, 0.0);
        for b in m.dec.output_bias_mut() {
            *b = 1e4;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_deformation(&m, None, DEFAULT_MAX_STEP_DISPLACEMENT, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Sampling(_)));
    }

    #[test]
    fn allocation_is_balanced() {
        assert_eq!(allocate_per_class(&[5, 5], 1.0), vec![5, 5]);
        assert_eq!(allocate_per_class(&[3, 3, 4], 0.5), vec![2, 1, 2]);
        let a = allocate_per_class(&[7, 2, 9], 2.3);
        assert_eq!(a.iter().sum::<usize>(), (2.3f64 * 18.0).ceil() as usize);
        for (k, &c) in [7, 2, 9].iter().enumerate() {
            assert!((a[k] as f64 - 2.3 * c as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn augmentation_counts_determinism_and_ranges() {
        let spec = SyntheticSpec::two_mode(vec![Shape::Disk, Shape::Ring], 5, 1);
        let data = generate_synthetic(&spec).unwrap();
        let grid = spec.grid().unwrap();
        let mut m = model(&grid, 0.01);
        perturb(&mut m, 0.02, 3);
        let mut orig = data.set.clone();
        for s in orig.samples_mut() {
            s.split = Split::Train;
        }
        let req = AugmentationRequest::new(&m, &data.templates, 1.0, 7);
        let a = augment_dataset(&req, &orig).unwrap();
        assert_eq!(a.len(), 20);
        let b = augment_dataset(&req, &orig).unwrap();
        assert_eq!(a, b);
        for s in &a.samples()[10..] {
            let t = &data.templates.images[s.class];
            let (lo, hi) = (t.min(), t.max());
            assert!(s.image.values().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
            let labels = s.seg.as_ref().unwrap().label_set();
            assert!(labels.is_subset(&data.templates.labels.as_ref().unwrap()[s.class].label_set()));
        }
        let hist = a.filtered(|s| s.origin != Origin::Original).class_histogram();
        assert_eq!(hist, vec![5, 5]);
    }
}
