//! Supervised training with validation-based model selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{LabeledImageSet, Sample, Split};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, Adam};
use crate::tasks::models::{TaskMetrics, TaskModel};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TaskTrainConfig {
    fn default() -> Self {
        TaskTrainConfig {
            epochs: 100,
            batch: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl TaskTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("task training needs epochs, batch and lr > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss per sample.
    pub train_loss: f64,
    pub val_score: f64,
}

/// Resumable training state: optimizer moments, epoch counter and the best
/// validation snapshot so far.
#[derive(Debug, Clone)]
pub struct TaskTrainer {
    pub cfg: TaskTrainConfig,
    adam: Adam,
    epoch: usize,
    best: Option<(f64, usize, Vec<f64>)>,
    pub history: Vec<EpochRecord>,
}

impl TaskTrainer {
    pub fn new(model: &TaskModel, cfg: TaskTrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(TaskTrainer {
            adam: Adam::new(model.num_params(), cfg.lr),
            cfg,
            epoch: 0,
            best: None,
            history: Vec::new(),
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// Epoch and validation score of the best snapshot.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best.as_ref().map(|(s, e, _)| (*e, *s))
    }

    /// One pass over `train` in a shuffled order drawn from `(seed, epoch)`,
    /// followed by validation. The model keeps its latest parameters; on
    /// error both model and optimizer are left as they were before the epoch.
    pub fn run_epoch(&mut self, model: &mut TaskModel, train: &[&Sample], val: &[&Sample]) -> Result<EpochRecord> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config("train and validation splits must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch as u64 + 1);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let lr = cosine_lr(self.cfg.lr, self.epoch, self.cfg.epochs);
        let snapshot = (model.params().to_vec(), self.adam.clone());
        let mut total = 0.0;
        for (b, chunk) in order.chunks(self.cfg.batch).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
            match model.loss_and_grad(&batch) {
                Ok((loss, grad)) => {
                    self.adam.step_with_lr(model.params_mut(), &grad, lr);
                    total += loss;
                }
                Err(e) => {
                    model.params_mut().copy_from_slice(&snapshot.0);
                    self.adam = snapshot.1;
                    return Err(match e {
                        Error::Training { what, .. } => Error::Training { batch: b, what },
                        other => other,
                    });
                }
            }
        }
        let val_score = model.evaluate(val)?.score();
        // Ties go to the later, longer-trained epoch.
        if self.best.as_ref().map_or(true, |(s, _, _)| val_score >= *s) {
            self.best = Some((val_score, self.epoch, model.params().to_vec()));
        }
        let rec = EpochRecord {
            epoch: self.epoch,
            train_loss: total / train.len() as f64,
            val_score,
        };
        self.epoch += 1;
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Loads the best validation snapshot into `model`.
    pub fn restore_best(&self, model: &mut TaskModel) {
        if let Some((_, _, p)) = &self.best {
            model.params_mut().copy_from_slice(p);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub val: TaskMetrics,
    pub test: TaskMetrics,
}

pub(crate) fn split_refs(data: &LabeledImageSet, split: Split) -> Vec<&Sample> {
    data.samples().iter().filter(|s| s.split == split).collect()
}

/// Trains on the `Train` split, keeps the parameters with the best
/// validation score, and reports validation and test metrics.
pub fn train_task(data: &LabeledImageSet, model: &mut TaskModel, cfg: &TaskTrainConfig) -> Result<TaskOutcome> {
    let (train, val, test) = (
        split_refs(data, Split::Train),
        split_refs(data, Split::Val),
        split_refs(data, Split::Test),
    );
    for (name, s) in [("train", &train), ("validation", &val), ("test", &test)] {
        if s.is_empty() {
            return Err(Error::Config(format!("{name} split is empty")));
        }
    }
    let mut trainer = TaskTrainer::new(model, cfg.clone())?;
    while trainer.epochs_done() < cfg.epochs {
        trainer.run_epoch(model, &train, &val)?;
    }
    trainer.restore_best(model);
    Ok(TaskOutcome {
        best_epoch: trainer.best().map_or(0, |b| b.0),
        val: model.evaluate(&val)?,
        test: model.evaluate(&test)?,
        history: trainer.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabeledImageSet, Origin};
    use crate::field::{Grid, ScalarField};
    use crate::tasks::models::ClassifierModel;
    use rand::Rng;

    fn toy(seed: u64) -> LabeledImageSet {
        let g = Grid::new(&[4, 4]).unwrap();
        let mut set = LabeledImageSet::new(g.clone(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..40 {
            let class = i % 2;
            let shift = if class == 0 { -0.5 } else { 0.5 };
            let values = (0..g.len())
                .map(|v| shift * (g.position(v)[0] - 1.5) + rng.gen_range(-0.3..0.3))
                .collect();
            let image = ScalarField::new(g.clone(), values).unwrap();
            let split = match i % 10 {
                0 | 1 => Split::Val,
                2 | 3 => Split::Test,
                _ => Split::Train,
            };
            set.push(Sample {
                image,
                class,
                seg: None,
                split,
                origin: Origin::Original,
            })
            .unwrap();
        }
        set
    }

    #[test]
    fn separable_toy_is_learned() {
        let data = toy(0);
        let mut m = TaskModel::Classifier(ClassifierModel::new(data.grid().clone(), 2, 16, 1.0, 0).unwrap());
        let cfg = TaskTrainConfig {
            epochs: 200,
            batch: 8,
            ..Default::default()
        };
        let out = train_task(&data, &mut m, &cfg).unwrap();
        let train = split_refs(&data, Split::Train);
        let acc = m.evaluate(&train).unwrap().score();
        assert!(acc >= 0.99, "train accuracy {acc}");
        assert!(out.test.score() >= 0.9);
    }

    #[test]
    fn deterministic_under_seed() {
        let data = toy(1);
        let cfg = TaskTrainConfig {
            epochs: 5,
            batch: 4,
            seed: 9,
            ..Default::default()
        };
        let run = || {
            let mut m = TaskModel::Classifier(ClassifierModel::new(data.grid().clone(), 2, 8, 1.0, 2).unwrap());
            let out = train_task(&data, &mut m, &cfg).unwrap();
            (m, out.history)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_split_is_a_config_error() {
        let mut data = toy(2);
        for s in data.samples_mut() {
            s.split = Split::Train;
        }
        let mut m = TaskModel::Classifier(ClassifierModel::new(data.grid().clone(), 2, 4, 1.0, 0).unwrap());
        let err = train_task(&data, &mut m, &TaskTrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
