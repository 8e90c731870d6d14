//! One function per subcommand; each reads its inputs, runs the pipeline
//! stage and writes outputs plus a run record under `out`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{allocate_for, generate, merge_augmented, AugmentationRequest};
use crate::cli::record::write_record;
use crate::cli::settings::{RunConfig, TaskKind};
use crate::data::{
    export_png, generate_synthetic, load_mgt, save_mgt, DType, LabeledImageSet, Split, SyntheticSpec, Templates,
    Tensor,
};
use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::latent::{train_mgaug, MixtureConfig, MixtureLatentModel, ModelInput, TrainConfig, TrainExample};
use crate::registration::{register_one, OptimizerSettings};
use crate::tasks::{
    adjusted_rand_index, joint_train, train_task, ClassifierModel, JointConfig, SegmenterModel, TaskMetrics,
    TaskModel, TaskTrainConfig,
};

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn make_dir(dir: PathBuf) -> Result<PathBuf> {
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    make_dir(cfg.require("out")?.clone())
}

fn input<'a>(cfg: &'a RunConfig, key: &str) -> Result<&'a PathBuf> {
    let p = cfg.require(key)?;
    if !p.exists() {
        return Err(Error::io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("input `{key}` does not exist")),
        ));
    }
    Ok(p)
}

fn velocity_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("v_{i:05}.mgt"))
}

fn load_velocities(dir: &Path, data: &LabeledImageSet) -> Result<Vec<VectorField>> {
    (0..data.len())
        .map(|i| {
            let v = load_mgt(velocity_file(dir, i))?.to_vector_field()?;
            data.grid().check_same(v.grid(), "velocity")?;
            Ok(v)
        })
        .collect()
}

fn train_examples(data: &LabeledImageSet, templates: &Templates, vs: &[VectorField]) -> Result<Vec<TrainExample>> {
    data.samples()
        .iter()
        .zip(vs)
        .filter(|(s, _)| s.split == Split::Train)
        .map(|(s, v)| {
            let template = templates
                .images
                .get(s.class)
                .ok_or_else(|| Error::Input(format!("no template for class {}", s.class)))?;
            Ok(TrainExample {
                image: s.image.clone(),
                velocity: v.clone(),
                template: template.clone(),
            })
        })
        .collect()
}

fn mixture_config(cfg: &RunConfig) -> MixtureConfig {
    MixtureConfig {
        components: cfg.components,
        latent_dim: cfg.latent_dim,
        eps_dim: cfg.eps_dim,
        hidden: cfg.hidden,
        shooting: cfg.shooting(),
        lambda: cfg.lambda,
        prior_init_spread: cfg.prior_init_spread,
        ..MixtureConfig::default()
    }
}

fn mgaug_train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.epochs,
        batch: cfg.batch,
        lr: cfg.lr,
        seed: cfg.seed,
    }
}

fn task_train_config(cfg: &RunConfig) -> TaskTrainConfig {
    TaskTrainConfig {
        epochs: cfg.epochs,
        batch: cfg.batch,
        lr: cfg.lr,
        seed: cfg.seed,
    }
}

fn new_task_model(cfg: &RunConfig, data: &LabeledImageSet) -> Result<TaskModel> {
    let grid = data.grid().clone();
    Ok(match cfg.task {
        TaskKind::Classification => TaskModel::Classifier(ClassifierModel::new(
            grid,
            data.num_classes(),
            cfg.task_hidden,
            cfg.gamma,
            cfg.seed,
        )?),
        TaskKind::Segmentation => {
            if !data.has_segmentations() {
                return Err(Error::Config("segmentation task needs label maps on every sample".into()));
            }
            let labels = data
                .samples()
                .iter()
                .flat_map(|s| s.seg.as_ref().expect("checked").labels().iter().copied())
                .max()
                .unwrap_or(0) as usize
                + 1;
            TaskModel::Segmenter(SegmenterModel::new(
                grid,
                labels.max(2),
                cfg.seg_radius,
                cfg.task_hidden,
                cfg.tau,
                cfg.seed,
            )?)
        }
    })
}

fn metrics_csv(rows: &[(&str, &TaskMetrics)]) -> String {
    let mut s = String::from("split,metric,value\n");
    for (split, m) in rows {
        match m {
            TaskMetrics::Classification(c) => {
                for (name, v) in [
                    ("accuracy", c.accuracy),
                    ("precision", c.precision),
                    ("recall", c.recall),
                    ("f1", c.f1),
                ] {
                    let _ = writeln!(s, "{split},{name},{v}");
                }
            }
            TaskMetrics::Segmentation { dice } => {
                for (q, d) in dice.iter().enumerate() {
                    let _ = writeln!(s, "{split},dice_label_{q},{d}");
                }
                let _ = writeln!(s, "{split},mean_foreground_dice,{}", m.score());
            }
        }
    }
    s
}

fn summary_text(rows: &[(&str, &TaskMetrics)]) -> String {
    let mut s = String::new();
    for (split, m) in rows {
        match m {
            TaskMetrics::Classification(c) => {
                let _ = writeln!(
                    s,
                    "{split}: accuracy = {:.4}, precision = {:.4}, recall = {:.4}, f1 = {:.4}",
                    c.accuracy, c.precision, c.recall, c.f1
                );
            }
            TaskMetrics::Segmentation { dice } => {
                let per: Vec<String> = dice.iter().map(|d| format!("{d:.4}")).collect();
                let _ = writeln!(s, "{split}: dice per label = [{}]", per.join(", "));
            }
        }
    }
    s
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let spec = SyntheticSpec {
        size: cfg.size,
        shooting: cfg.shooting(),
        max_step_displacement: cfg.max_step_displacement,
        ..SyntheticSpec::two_mode(cfg.shapes.clone(), cfg.n_per_class, cfg.seed)
    };
    let data = generate_synthetic(&spec)?;
    data.set.save_dir(out.join("data"))?;
    data.templates.save_dir(out.join("templates"))?;
    let mut modes = String::from("index,class,mode\n");
    for (i, (s, m)) in data.set.samples().iter().zip(&data.modes).enumerate() {
        let _ = writeln!(modes, "{i},{},{m}", s.class);
    }
    write_file(&out.join("modes.csv"), &modes)?;
    if cfg.png {
        let png_dir = make_dir(out.join("png"))?;
        for (i, s) in data.set.samples().iter().enumerate() {
            export_png(&s.image, png_dir.join(format!("img_{i:05}.png")))?;
        }
    }
    write_record(&out, "synth", &cfg.resolved, &[])
}

pub fn register(cfg: &RunConfig) -> Result<()> {
    let data_dir = input(cfg, "data")?;
    let tpl_dir = input(cfg, "templates")?;
    let out = out_dir(cfg)?;
    let data = LabeledImageSet::load_dir(data_dir)?;
    let templates = Templates::load_dir(tpl_dir)?;
    let op = cfg.shooting().operator(data.grid())?;
    let opt = OptimizerSettings {
        lr: cfg.reg_lr,
        max_iters: cfg.reg_iters,
        rel_tol: cfg.reg_tol,
    };
    let results = data
        .samples()
        .par_iter()
        .map(|s| {
            let t = templates
                .images
                .get(s.class)
                .ok_or_else(|| Error::Input(format!("no template for class {}", s.class)))?;
            register_one(t, &s.image, &op, cfg.sigma, cfg.steps, &opt)
        })
        .collect::<Result<Vec<_>>>()?;
    let vdir = make_dir(out.join("velocities"))?;
    let mut csv = String::from("index,class,split,iterations,initial_data,final_data,min_detjac,diverged\n");
    for (i, (r, s)) in results.iter().zip(data.samples()).enumerate() {
        save_mgt(velocity_file(&vdir, i), &Tensor::from_vector_field(&r.v0, DType::F64))?;
        let _ = writeln!(
            csv,
            "{i},{},{},{},{},{},{},{}",
            s.class,
            s.split.name(),
            r.iterations,
            r.initial_data,
            r.final_data,
            r.min_detjac,
            r.diverged
        );
    }
    write_file(&out.join("registration.csv"), &csv)?;
    write_record(&out, "register", &cfg.resolved, &[("data", data_dir), ("templates", tpl_dir)])
}

fn read_modes(path: &Path, n: usize) -> Result<Vec<usize>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut modes = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let m = rec
            .get(2)
            .and_then(|m| m.parse().ok())
            .ok_or_else(|| Error::Input(format!("{}: malformed row", path.display())))?;
        modes.push(m);
    }
    if modes.len() != n {
        return Err(Error::Input(format!("{}: {} modes for {n} samples", path.display(), modes.len())));
    }
    Ok(modes)
}

pub fn train_aug(cfg: &RunConfig) -> Result<()> {
    let data_dir = input(cfg, "data")?;
    let tpl_dir = input(cfg, "templates")?;
    let vel_dir = input(cfg, "velocities")?;
    let modes_path = match &cfg.modes {
        Some(_) => Some(input(cfg, "modes")?),
        None => None,
    };
    let out = out_dir(cfg)?;
    let data = LabeledImageSet::load_dir(data_dir)?;
    let templates = Templates::load_dir(tpl_dir)?;
    let vs = load_velocities(vel_dir, &data)?;
    let train = train_examples(&data, &templates, &vs)?;
    let mut model = MixtureLatentModel::new(mixture_config(cfg), data.grid().clone(), cfg.seed)?;
    let history = train_mgaug(&mut model, &train, &mgaug_train_config(cfg), Some(&out.join("model")))?;

    let mut hist = String::from("epoch,total,recon,kl_x,kl_eps,kl_z,regularity,weight_decay\n");
    for (e, h) in history.iter().enumerate() {
        let _ = writeln!(
            hist,
            "{e},{},{},{},{},{},{},{}",
            h.total, h.recon, h.kl_x, h.kl_eps, h.kl_z, h.regularity, h.weight_decay
        );
    }
    write_file(&out.join("train_history.csv"), &hist)?;

    let all: Vec<ModelInput> = data
        .samples()
        .iter()
        .zip(&vs)
        .map(|(s, v)| ModelInput {
            image: &s.image,
            velocity: v,
            template: &templates.images[s.class],
        })
        .collect();
    let held: Vec<ModelInput> = data
        .samples()
        .iter()
        .zip(&all)
        .filter(|(s, _)| s.split != Split::Train)
        .map(|(_, m)| *m)
        .collect();
    let mut metrics = String::from("metric,value\n");
    if !held.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX);
        let e = model.elbo(&held, cfg.mc_samples, &mut rng)?;
        for (name, v) in [
            ("heldout_elbo", e.total),
            ("heldout_recon", e.recon),
            ("heldout_kl_x", e.kl_x),
            ("heldout_kl_eps", e.kl_eps),
            ("heldout_kl_z", e.kl_z),
        ] {
            let _ = writeln!(metrics, "{name},{v}");
        }
    }
    let assignments = model.assign_components(&all)?;
    let mut assign = String::from("index,component\n");
    for (i, c) in assignments.iter().enumerate() {
        let _ = writeln!(assign, "{i},{c}");
    }
    write_file(&out.join("assignments.csv"), &assign)?;
    if let Some(p) = modes_path {
        let ari = adjusted_rand_index(&assignments, &read_modes(p, data.len())?)?;
        let _ = writeln!(metrics, "ari,{ari}");
    }
    write_file(&out.join("metrics.csv"), &metrics)?;
    let mut inputs: Vec<(&str, &Path)> = vec![
        ("data", data_dir.as_path()),
        ("templates", tpl_dir.as_path()),
        ("velocities", vel_dir.as_path()),
    ];
    if let Some(p) = modes_path {
        inputs.push(("modes", p.as_path()));
    }
    write_record(&out, "train-aug", &cfg.resolved, &inputs)
}

pub fn sample(cfg: &RunConfig) -> Result<()> {
    let model_dir = input(cfg, "model")?;
    let tpl_dir = input(cfg, "templates")?;
    let data_dir = match &cfg.data {
        Some(_) => Some(input(cfg, "data")?),
        None => None,
    };
    let out = out_dir(cfg)?;
    let model = MixtureLatentModel::load_checkpoint(model_dir)?;
    let templates = Templates::load_dir(tpl_dir)?;
    if !(cfg.multiplier > 0.0) {
        return Err(Error::Config("sample needs multiplier > 0".into()));
    }
    let data = data_dir.map(LabeledImageSet::load_dir).transpose()?;
    let per_class = match &data {
        Some(d) => allocate_for(d, cfg.multiplier),
        None => crate::augment::allocate_per_class(
            &vec![cfg.count_per_class; templates.num_classes()],
            cfg.multiplier,
        ),
    };
    let request = AugmentationRequest {
        max_step_displacement: cfg.max_step_displacement,
        observation_noise: cfg.noise,
        ..AugmentationRequest::new(&model, &templates, cfg.multiplier, cfg.seed)
    };
    let generated = generate(&request, &per_class)?;
    let images = make_dir(out.join("images"))?;
    let png_dir = if cfg.png { make_dir(out.join("png"))? } else { out.clone() };
    let mut manifest = String::from("filename,class,component,template,min_detjac\n");
    for (i, s) in generated.iter().enumerate() {
        let file = format!("aug_{i:05}.mgt");
        save_mgt(images.join(&file), &Tensor::from_scalar_field(&s.image, DType::F64))?;
        if let Some(seg) = &s.seg {
            save_mgt(images.join(format!("aug_{i:05}_labels.mgt")), &seg.to_tensor())?;
        }
        if cfg.png {
            export_png(&s.image, png_dir.join(format!("aug_{i:05}.png")))?;
        }
        let _ = writeln!(manifest, "{file},{},{},{},{}", s.class, s.component, s.template, s.min_detjac);
    }
    write_file(&out.join("samples.csv"), &manifest)?;
    if let Some(d) = &data {
        merge_augmented(d, generated)?.save_dir(out.join("dataset"))?;
    }
    let mut inputs: Vec<(&str, &Path)> = vec![("model", model_dir.as_path()), ("templates", tpl_dir.as_path())];
    if let Some(p) = data_dir {
        inputs.push(("data", p.as_path()));
    }
    write_record(&out, "sample", &cfg.resolved, &inputs)
}

pub fn train_task_cmd(cfg: &RunConfig) -> Result<()> {
    let data_dir = input(cfg, "data")?;
    let out = out_dir(cfg)?;
    let data = LabeledImageSet::load_dir(data_dir)?;
    let mut model = new_task_model(cfg, &data)?;
    let outcome = train_task(&data, &mut model, &task_train_config(cfg))?;
    model.save(out.join("task_model"))?;
    let mut epochs = String::from("epoch,train_loss,val_score\n");
    for r in &outcome.history {
        let _ = writeln!(epochs, "{},{},{}", r.epoch, r.train_loss, r.val_score);
    }
    write_file(&out.join("epochs.csv"), &epochs)?;
    let rows = [("val", &outcome.val), ("test", &outcome.test)];
    write_file(&out.join("metrics.csv"), &metrics_csv(&rows))?;
    write_file(
        &out.join("summary.txt"),
        &format!("best_epoch = {}\n{}", outcome.best_epoch, summary_text(&rows)),
    )?;
    write_record(&out, "train-task", &cfg.resolved, &[("data", data_dir)])
}

pub fn joint(cfg: &RunConfig) -> Result<()> {
    let data_dir = input(cfg, "data")?;
    let tpl_dir = input(cfg, "templates")?;
    let vel_dir = input(cfg, "velocities")?;
    let out = out_dir(cfg)?;
    let data = LabeledImageSet::load_dir(data_dir)?;
    let templates = Templates::load_dir(tpl_dir)?;
    let vs = load_velocities(vel_dir, &data)?;
    let train = train_examples(&data, &templates, &vs)?;
    let mut mgaug = MixtureLatentModel::new(mixture_config(cfg), data.grid().clone(), cfg.seed)?;
    let mut task = new_task_model(cfg, &data)?;
    let jcfg = JointConfig {
        inner_iters: cfg.inner_iters,
        convergence_eps: cfg.convergence_eps,
        max_rounds: cfg.max_rounds,
        multiplier: cfg.multiplier,
        aug_seed: cfg.seed,
        max_step_displacement: cfg.max_step_displacement,
        mgaug: mgaug_train_config(cfg),
        task: task_train_config(cfg),
    };
    let result = joint_train(&data, &templates, &train, &mut mgaug, &mut task, &jcfg);
    // Checkpoints hold the last good parameters even when a round diverged.
    mgaug.save_checkpoint(out.join("model"))?;
    task.save(out.join("task_model"))?;
    let outcome = result?;
    let mut rounds = String::from("round,mgaug_loss,task_loss,total,val_score,augmented\n");
    let _ = writeln!(rounds, "initial,,,{},,", outcome.initial_loss);
    for r in &outcome.rounds {
        let _ = writeln!(
            rounds,
            "{},{},{},{},{},{}",
            r.round, r.mgaug_loss, r.task_loss, r.total, r.val_score, r.augmented
        );
    }
    write_file(&out.join("rounds.csv"), &rounds)?;
    let rows = [("val", &outcome.val), ("test", &outcome.test)];
    write_file(&out.join("metrics.csv"), &metrics_csv(&rows))?;
    write_file(
        &out.join("summary.txt"),
        &format!("rounds = {}\nconverged = {}\n{}", outcome.rounds.len(), outcome.converged, summary_text(&rows)),
    )?;
    write_record(
        &out,
        "joint",
        &cfg.resolved,
        &[("data", data_dir), ("templates", tpl_dir), ("velocities", vel_dir)],
    )
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let model_dir = input(cfg, "task_model")?;
    let data_dir = input(cfg, "data")?;
    let out = out_dir(cfg)?;
    let model = TaskModel::load(model_dir)?;
    let data = LabeledImageSet::load_dir(data_dir)?;
    let samples: Vec<_> = data.samples().iter().filter(|s| s.split == cfg.eval_split).collect();
    let m = model.evaluate(&samples)?;
    let rows = [(cfg.eval_split.name(), &m)];
    write_file(&out.join("metrics.csv"), &metrics_csv(&rows))?;
    write_file(&out.join("summary.txt"), &summary_text(&rows))?;
    write_record(&out, "eval", &cfg.resolved, &[("task_model", model_dir), ("data", data_dir)])
}
