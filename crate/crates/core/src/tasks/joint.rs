//! Alternating training of the augmenter and a task network.
//!
//! Each outer round runs `r` epochs of mixture-model training, regenerates
//! the augmented set from the updated model (replacing the previous one),
//! then runs `r` task epochs on originals plus augmentations. Rounds stop
//! once the combined loss changes by less than `convergence_eps`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_dataset, AugmentationRequest, DEFAULT_MAX_STEP_DISPLACEMENT};
use crate::data::{LabeledImageSet, Sample, Split, Templates};
use crate::error::{Error, Result};
use crate::latent::{LatentNoise, MixtureLatentModel, MixtureTrainer, ModelInput, TrainConfig, TrainExample};
use crate::tasks::models::{TaskMetrics, TaskModel};
use crate::tasks::train::{split_refs, TaskTrainConfig, TaskTrainer};

#[derive(Debug, Clone, PartialEq)]
pub struct JointConfig {
    /// Epochs of each model per outer round.
    pub inner_iters: usize,
    pub convergence_eps: f64,
    pub max_rounds: usize,
    /// Augmented-to-original ratio; 0 passes the originals through untouched
    /// and skips the augmenter entirely.
    pub multiplier: f64,
    pub aug_seed: u64,
    pub max_step_displacement: f64,
    /// Batch, learning rate and seed of the augmenter (its epoch count is
    /// `inner_iters * max_rounds`).
    pub mgaug: TrainConfig,
    pub task: TaskTrainConfig,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            inner_iters: 5,
            convergence_eps: 1e-3,
            max_rounds: 20,
            multiplier: 3.0,
            aug_seed: 0,
            max_step_displacement: DEFAULT_MAX_STEP_DISPLACEMENT,
            mgaug: TrainConfig::default(),
            task: TaskTrainConfig::default(),
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_iters == 0 || self.max_rounds == 0 {
            return Err(Error::Config("inner_iters and max_rounds must be >= 1".into()));
        }
        if !(self.convergence_eps > 0.0) {
            return Err(Error::Config("convergence_eps must be positive".into()));
        }
        if !(self.multiplier >= 0.0 && self.multiplier.is_finite()) {
            return Err(Error::Config("multiplier must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn total_epochs(&self) -> usize {
        self.inner_iters * self.max_rounds
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointRound {
    pub round: usize,
    pub mgaug_loss: f64,
    pub task_loss: f64,
    pub total: f64,
    pub val_score: f64,
    pub augmented: usize,
}

#[derive(Debug, Clone)]
pub struct JointOutcome {
    /// Combined loss of the untrained pair.
    pub initial_loss: f64,
    pub rounds: Vec<JointRound>,
    pub converged: bool,
    pub val: TaskMetrics,
    pub test: TaskMetrics,
}

impl JointOutcome {
    pub fn loss_history(&self) -> Vec<f64> {
        std::iter::once(self.initial_loss)
            .chain(self.rounds.iter().map(|r| r.total))
            .collect()
    }
}

fn mgaug_loss(model: &MixtureLatentModel, data: &[TrainExample], batch: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for chunk in data.chunks(batch.max(1)) {
        let items: Vec<ModelInput> = chunk.iter().map(TrainExample::input).collect();
        let noise: Vec<LatentNoise> = chunk
            .iter()
            .map(|_| LatentNoise::draw(model.config().latent_dim, model.config().eps_dim, &mut rng))
            .collect();
        total += chunk.len() as f64 * model.loss(&items, &noise)?.total;
    }
    Ok(total / data.len() as f64)
}

fn task_loss(model: &TaskModel, samples: &[&Sample], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        total += model.loss_and_grad(chunk)?.0;
    }
    Ok(total / samples.len() as f64)
}

/// Runs the alternating loop. `mgaug_data` pairs each training original
/// with its registered velocity. On error both models hold their last
/// good parameters.
pub fn joint_train(
    data: &LabeledImageSet,
    templates: &Templates,
    mgaug_data: &[TrainExample],
    mgaug: &mut MixtureLatentModel,
    task: &mut TaskModel,
    cfg: &JointConfig,
) -> Result<JointOutcome> {
    cfg.validate()?;
    let pass_through = cfg.multiplier == 0.0;
    let originals = split_refs(data, Split::Train);
    let val = split_refs(data, Split::Val);
    let test = split_refs(data, Split::Test);
    for (name, s) in [("train", &originals), ("validation", &val), ("test", &test)] {
        if s.is_empty() {
            return Err(Error::Config(format!("{name} split is empty")));
        }
    }
    if !pass_through && mgaug_data.is_empty() {
        return Err(Error::Config("no registered training examples for the augmenter".into()));
    }

    let mgaug_cfg = TrainConfig {
        epochs: cfg.total_epochs(),
        ..cfg.mgaug.clone()
    };
    let task_cfg = TaskTrainConfig {
        epochs: cfg.total_epochs(),
        ..cfg.task.clone()
    };
    let mut mgaug_trainer = MixtureTrainer::new(mgaug, mgaug_cfg.clone());
    let mut task_trainer = TaskTrainer::new(task, task_cfg.clone())?;

    let initial_mgaug = if pass_through {
        0.0
    } else {
        mgaug_loss(mgaug, mgaug_data, mgaug_cfg.batch, mgaug_cfg.seed)?
    };
    let initial_loss = initial_mgaug + task_loss(task, &originals, task_cfg.batch)?;

    let mut rounds = Vec::new();
    let mut prev = initial_loss;
    let mut converged = false;
    for round in 0..cfg.max_rounds {
        let mut mgaug_epoch_loss = 0.0;
        let mut mixed: Option<LabeledImageSet> = None;
        if !pass_through {
            for _ in 0..cfg.inner_iters {
                mgaug_epoch_loss = mgaug_trainer.run_epoch(mgaug, mgaug_data)?.total;
            }
            let request = AugmentationRequest {
                max_step_displacement: cfg.max_step_displacement,
                ..AugmentationRequest::new(
                    mgaug,
                    templates,
                    cfg.multiplier,
                    cfg.aug_seed ^ (round as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                )
            };
            let train_only = data.filtered(|s| s.split == Split::Train);
            mixed = Some(augment_dataset(&request, &train_only)?);
        }
        let train: Vec<&Sample> = match &mixed {
            Some(set) => set.samples().iter().collect(),
            None => originals.clone(),
        };
        let mut rec = None;
        for _ in 0..cfg.inner_iters {
            rec = Some(task_trainer.run_epoch(task, &train, &val)?);
        }
        let rec = rec.expect("inner_iters >= 1");
        let total = mgaug_epoch_loss + rec.train_loss;
        rounds.push(JointRound {
            round,
            mgaug_loss: mgaug_epoch_loss,
            task_loss: rec.train_loss,
            total,
            val_score: rec.val_score,
            augmented: train.len() - originals.len(),
        });
        if (total - prev).abs() < cfg.convergence_eps {
            converged = true;
            break;
        }
        prev = total;
    }
    task_trainer.restore_best(task);
    Ok(JointOutcome {
        initial_loss,
        rounds,
        converged,
        val: task.evaluate(&val)?,
        test: task.evaluate(&test)?,
    })
}
