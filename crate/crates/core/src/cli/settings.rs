//! Resolved run settings: defaults, config file, then command-line overrides.

use std::path::PathBuf;

use crate::config::KvMap;
use crate::data::Shape;
use crate::error::{Error, Result};

/// Every accepted key with its default (`None` for unset paths).
const KEYS: &[(&str, Option<&str>)] = &[
    ("alpha", Some("3.0")),
    ("sigma", Some("0.02")),
    ("lambda", Some("0.02")),
    ("steps", Some("10")),
    ("C", Some("2")),
    ("latent_dim", Some("16")),
    ("eps_dim", Some("8")),
    ("hidden", Some("256")),
    ("prior_init_spread", Some("0.01")),
    ("lr", Some("0.001")),
    ("batch", Some("16")),
    ("epochs", Some("100")),
    ("seed", Some("0")),
    ("multiplier", Some("3.0")),
    ("max_step_displacement", Some("0.4")),
    ("noise", Some("false")),
    ("mc_samples", Some("16")),
    ("count_per_class", Some("10")),
    ("png", Some("false")),
    ("task", Some("classification")),
    ("gamma", Some("1.0")),
    ("tau", Some("1.0")),
    ("task_hidden", Some("128")),
    ("seg_radius", Some("2")),
    ("eval_split", Some("test")),
    ("inner_iters", Some("5")),
    ("convergence_eps", Some("0.001")),
    ("max_rounds", Some("20")),
    ("reg_lr", Some("0.05")),
    ("reg_iters", Some("300")),
    ("reg_tol", Some("1e-6")),
    ("size", Some("28")),
    ("n_per_class", Some("40")),
    ("shapes", Some("disk,cross")),
    ("data", None),
    ("templates", None),
    ("velocities", None),
    ("model", None),
    ("task_model", None),
    ("modes", None),
    ("out", None),
];

pub fn allowed_keys() -> Vec<&'static str> {
    KEYS.iter().map(|(k, _)| *k).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Segmentation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub alpha: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub steps: usize,
    pub components: usize,
    pub latent_dim: usize,
    pub eps_dim: usize,
    pub hidden: usize,
    pub prior_init_spread: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub multiplier: f64,
    pub max_step_displacement: f64,
    pub noise: bool,
    pub mc_samples: usize,
    pub count_per_class: usize,
    pub png: bool,
    pub task: TaskKind,
    pub gamma: f64,
    pub tau: f64,
    pub task_hidden: usize,
    pub seg_radius: usize,
    pub eval_split: crate::data::Split,
    pub inner_iters: usize,
    pub convergence_eps: f64,
    pub max_rounds: usize,
    pub reg_lr: f64,
    pub reg_iters: usize,
    pub reg_tol: f64,
    pub size: usize,
    pub n_per_class: usize,
    pub shapes: Vec<Shape>,
    pub data: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub velocities: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub task_model: Option<PathBuf>,
    pub modes: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Every key with its final textual value.
    pub resolved: KvMap,
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

fn at_least_one(name: &str, v: usize) -> Result<usize> {
    if v >= 1 {
        Ok(v)
    } else {
        Err(Error::Config(format!("{name} must be >= 1")))
    }
}

impl RunConfig {
    /// Layers `overrides` over `file` over the defaults. Unknown keys in
    /// either layer are rejected.
    pub fn resolve(file: &KvMap, overrides: &KvMap) -> Result<Self> {
        let allowed = allowed_keys();
        file.check_keys(&allowed)?;
        overrides.check_keys(&allowed)?;
        let mut kv = KvMap::default();
        for (k, d) in KEYS {
            if let Some(d) = d {
                kv.insert(*k, *d);
            }
        }
        for (k, v) in file.iter().chain(overrides.iter()) {
            kv.insert(k, v);
        }
        let path = |k: &str| -> Option<PathBuf> { kv.get_str(k).ok().map(PathBuf::from) };
        let bool_key = |k: &str| -> Result<bool> {
            match kv.get_str(k)? {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                other => Err(Error::Config(format!("key {k:?}: expected a boolean, got {other:?}"))),
            }
        };
        let task = match kv.get_str("task")? {
            "classification" => TaskKind::Classification,
            "segmentation" => TaskKind::Segmentation,
            other => return Err(Error::Config(format!("task must be classification or segmentation, got {other:?}"))),
        };
        let shapes = kv
            .get_str("shapes")?
            .split(',')
            .map(|s| Shape::parse(s.trim()))
            .collect::<Result<Vec<_>>>()?;
        let cfg = RunConfig {
            alpha: positive("alpha", kv.get("alpha")?)?,
            sigma: positive("sigma", kv.get("sigma")?)?,
            lambda: positive("lambda", kv.get("lambda")?)?,
            steps: at_least_one("steps", kv.get("steps")?)?,
            components: at_least_one("C", kv.get("C")?)?,
            latent_dim: at_least_one("latent_dim", kv.get("latent_dim")?)?,
            eps_dim: at_least_one("eps_dim", kv.get("eps_dim")?)?,
            hidden: at_least_one("hidden", kv.get("hidden")?)?,
            prior_init_spread: kv.get("prior_init_spread")?,
            lr: positive("lr", kv.get("lr")?)?,
            batch: at_least_one("batch", kv.get("batch")?)?,
            epochs: at_least_one("epochs", kv.get("epochs")?)?,
            seed: kv.get("seed")?,
            multiplier: kv.get("multiplier")?,
            max_step_displacement: positive("max_step_displacement", kv.get("max_step_displacement")?)?,
            noise: bool_key("noise")?,
            mc_samples: at_least_one("mc_samples", kv.get("mc_samples")?)?,
            count_per_class: at_least_one("count_per_class", kv.get("count_per_class")?)?,
            png: bool_key("png")?,
            task,
            gamma: positive("gamma", kv.get("gamma")?)?,
            tau: positive("tau", kv.get("tau")?)?,
            task_hidden: at_least_one("task_hidden", kv.get("task_hidden")?)?,
            seg_radius: kv.get("seg_radius")?,
            eval_split: crate::data::Split::parse(kv.get_str("eval_split")?)?,
            inner_iters: at_least_one("inner_iters", kv.get("inner_iters")?)?,
            convergence_eps: positive("convergence_eps", kv.get("convergence_eps")?)?,
            max_rounds: at_least_one("max_rounds", kv.get("max_rounds")?)?,
            reg_lr: positive("reg_lr", kv.get("reg_lr")?)?,
            reg_iters: kv.get("reg_iters")?,
            reg_tol: kv.get("reg_tol")?,
            size: kv.get("size")?,
            n_per_class: at_least_one("n_per_class", kv.get("n_per_class")?)?,
            shapes,
            data: path("data"),
            templates: path("templates"),
            velocities: path("velocities"),
            model: path("model"),
            task_model: path("task_model"),
            modes: path("modes"),
            out: path("out"),
            resolved: kv.clone(),
        };
        if !(cfg.multiplier >= 0.0 && cfg.multiplier.is_finite()) {
            return Err(Error::Config("multiplier must be finite and >= 0".into()));
        }
        if !(cfg.prior_init_spread >= 0.0) {
            return Err(Error::Config("prior_init_spread must be >= 0".into()));
        }
        if cfg.size < 4 {
            return Err(Error::Config("size must be >= 4".into()));
        }
        Ok(cfg)
    }

    pub fn require(&self, key: &str) -> Result<&PathBuf> {
        let p = match key {
            "data" => &self.data,
            "templates" => &self.templates,
            "velocities" => &self.velocities,
            "model" => &self.model,
            "task_model" => &self.task_model,
            "out" => &self.out,
            "modes" => &self.modes,
            _ => unreachable!("not a path key: {key}"),
        };
        p.as_ref()
            .ok_or_else(|| Error::Config(format!("missing required path `{key}` (flag or config key)")))
    }

    pub fn shooting(&self) -> crate::geodesic::ShootingConfig {
        crate::geodesic::ShootingConfig {
            alpha: self.alpha,
            num_steps: self.steps,
        }
    }
}
