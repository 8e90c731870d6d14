//! Image classifier and patch-based voxel labeler.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{insert_grid, parse_kv, read_grid, KvMap};
use crate::data::{load_mgt, save_mgt, DType, LabelMap, Sample, Tensor};
use crate::error::{Error, Result};
use crate::field::{Grid, ScalarField};
use crate::nn::Mlp;
use crate::tasks::loss::{clf_loss, seg_terms, weight_decay, WEIGHT_DECAY};
use crate::tasks::metrics::{dice_per_label, ClassificationMetrics, ConfusionMatrix};

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|z| (z - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

fn argmax_row(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn add_weight_decay_grad(params: &[f64], grad: &mut [f64]) {
    for (g, p) in grad.iter_mut().zip(params) {
        *g += 2.0 * WEIGHT_DECAY * p;
    }
}

fn check_finite(loss: f64, grad: &[f64]) -> Result<()> {
    if loss.is_finite() && grad.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::Training {
            batch: 0,
            what: "task loss or gradient is not finite".into(),
        })
    }
}

/// Softmax MLP on raw intensities: `n -> hidden -> hidden -> classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub net: Mlp,
    pub gamma: f64,
    grid: Grid,
    num_classes: usize,
    hidden: usize,
}

impl ClassifierModel {
    pub fn new(grid: Grid, num_classes: usize, hidden: usize, gamma: f64, seed: u64) -> Result<Self> {
        if num_classes < 2 || hidden == 0 {
            return Err(Error::Config("classifier needs >= 2 classes and a positive width".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(&[grid.len(), hidden, hidden, num_classes], &mut rng);
        Ok(ClassifierModel {
            net,
            gamma,
            grid,
            num_classes,
            hidden,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn inputs(&self, images: &[&ScalarField]) -> Result<Array2<f64>> {
        let n = self.grid.len();
        let mut x = Array2::zeros((images.len(), n));
        for (mut row, img) in x.rows_mut().into_iter().zip(images) {
            self.grid.check_same(img.grid(), "classifier input")?;
            row.assign(&ndarray::ArrayView1::from(img.values()));
        }
        Ok(x)
    }

    pub fn predict_proba(&self, images: &[&ScalarField]) -> Result<Vec<Vec<f64>>> {
        let p = softmax_rows(&self.net.infer(self.inputs(images)?.view()));
        Ok(p.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    pub fn predict(&self, images: &[&ScalarField]) -> Result<Vec<usize>> {
        let p = softmax_rows(&self.net.infer(self.inputs(images)?.view()));
        Ok(p.rows().into_iter().map(argmax_row).collect())
    }

    /// [`clf_loss`] of the batch and its parameter gradient.
    pub fn loss_and_grad(&self, images: &[&ScalarField], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let (logits, cache) = self.net.forward(self.inputs(images)?.view());
        let p = softmax_rows(&logits);
        let rows: Vec<Vec<f64>> = p.rows().into_iter().map(|r| r.to_vec()).collect();
        let loss = clf_loss(&rows, labels, self.gamma, self.net.params());
        let mut dy = p;
        for (i, &y) in labels.iter().enumerate() {
            if y >= self.num_classes {
                return Err(Error::Input(format!("class {y} outside 0..{}", self.num_classes)));
            }
            dy[[i, y]] -= 1.0;
        }
        dy *= self.gamma;
        let mut grad = vec![0.0; self.net.num_params()];
        self.net.backward(&cache, dy.view(), &mut grad, false);
        add_weight_decay_grad(self.net.params(), &mut grad);
        check_finite(loss, &grad)?;
        Ok((loss, grad))
    }
}

/// Per-voxel labeler: an MLP over the `(2r+1)^d` intensity patch around a
/// voxel (clamped at the border) plus its normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterModel {
    pub net: Mlp,
    pub tau: f64,
    grid: Grid,
    num_labels: usize,
    radius: usize,
    hidden: usize,
}

impl SegmenterModel {
    pub fn new(grid: Grid, num_labels: usize, radius: usize, hidden: usize, tau: f64, seed: u64) -> Result<Self> {
        if num_labels < 2 || num_labels > 256 || hidden == 0 {
            return Err(Error::Config("segmenter needs 2..=256 labels and a positive width".into()));
        }
        let features = (2 * radius + 1).pow(grid.ndim() as u32) + grid.ndim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(&[features, hidden, hidden, num_labels], &mut rng);
        Ok(SegmenterModel {
            net,
            tau,
            grid,
            num_labels,
            radius,
            hidden,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    fn features(&self, image: &ScalarField) -> Result<Array2<f64>> {
        self.grid.check_same(image.grid(), "segmenter input")?;
        let g = &self.grid;
        let nd = g.ndim();
        let r = self.radius as isize;
        let w = 2 * self.radius + 1;
        let patch = w.pow(nd as u32);
        let mut x = Array2::zeros((g.len(), patch + nd));
        let vals = image.values();
        for v in 0..g.len() {
            let idx = g.unravel(v);
            for o in 0..patch {
                let mut q = [0usize; 3];
                let mut rem = o;
                for a in (0..nd).rev() {
                    let off = (rem % w) as isize - r;
                    rem /= w;
                    q[a] = (idx[a] as isize + off).clamp(0, g.dims()[a] as isize - 1) as usize;
                }
                x[[v, o]] = vals[g.flat_index(&q[..nd])];
            }
            for a in 0..nd {
                let d = g.dims()[a];
                x[[v, patch + a]] = if d > 1 { 2.0 * idx[a] as f64 / (d - 1) as f64 - 1.0 } else { 0.0 };
            }
        }
        Ok(x)
    }

    /// Voxel-major label probabilities.
    pub fn predict_proba(&self, image: &ScalarField) -> Result<Vec<f64>> {
        let p = softmax_rows(&self.net.infer(self.features(image)?.view()));
        Ok(p.into_raw_vec_and_offset().0)
    }

    pub fn predict(&self, image: &ScalarField) -> Result<LabelMap> {
        let p = softmax_rows(&self.net.infer(self.features(image)?.view()));
        LabelMap::new(self.grid.clone(), p.rows().into_iter().map(|r| argmax_row(r) as u8).collect())
    }

    /// Segmentation loss of the batch. The Dice term is evaluated on hard
    /// predictions and is piecewise constant, so only cross-entropy and
    /// weight decay contribute to the gradient.
    pub fn loss_and_grad(&self, images: &[&ScalarField], truths: &[&LabelMap]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.net.num_params()];
        let mut data = 0.0;
        let q = self.num_labels;
        for (img, truth) in images.iter().zip(truths) {
            let t = truth.labels();
            if t.iter().any(|&l| l as usize >= q) {
                return Err(Error::Input(format!("label outside 0..{q}")));
            }
            let (logits, cache) = self.net.forward(self.features(img)?.view());
            let p = softmax_rows(&logits);
            let hard: Vec<u8> = p.rows().into_iter().map(|r| argmax_row(r) as u8).collect();
            let flat = p.as_slice().expect("standard layout");
            data += seg_terms(flat, &hard, t, q).total();
            let m = t.len() as f64;
            let mut dy = p.clone();
            for (x, &l) in t.iter().enumerate() {
                dy[[x, l as usize]] -= 1.0;
            }
            dy *= self.tau / m;
            self.net.backward(&cache, dy.view(), &mut grad, false);
        }
        let loss = self.tau * data + weight_decay(self.net.params());
        add_weight_decay_grad(self.net.params(), &mut grad);
        check_finite(loss, &grad)?;
        Ok((loss, grad))
    }
}

/// Evaluation results of either task.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskMetrics {
    Classification(ClassificationMetrics),
    /// Mean Dice per label over the evaluated images.
    Segmentation { dice: Vec<f64> },
}

impl TaskMetrics {
    /// Model-selection score: accuracy, or mean foreground Dice.
    pub fn score(&self) -> f64 {
        match self {
            TaskMetrics::Classification(m) => m.accuracy,
            TaskMetrics::Segmentation { dice } => {
                let fg = if dice.len() > 1 { &dice[1..] } else { &dice[..] };
                fg.iter().sum::<f64>() / fg.len() as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskModel {
    Classifier(ClassifierModel),
    Segmenter(SegmenterModel),
}

impl TaskModel {
    fn net(&self) -> &Mlp {
        match self {
            TaskModel::Classifier(m) => &m.net,
            TaskModel::Segmenter(m) => &m.net,
        }
    }

    pub fn num_params(&self) -> usize {
        self.net().num_params()
    }

    pub fn params(&self) -> &[f64] {
        self.net().params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            TaskModel::Classifier(m) => m.net.params_mut(),
            TaskModel::Segmenter(m) => m.net.params_mut(),
        }
    }

    pub fn grid(&self) -> &Grid {
        match self {
            TaskModel::Classifier(m) => &m.grid,
            TaskModel::Segmenter(m) => &m.grid,
        }
    }

    pub fn loss_and_grad(&self, batch: &[&Sample]) -> Result<(f64, Vec<f64>)> {
        let images: Vec<&ScalarField> = batch.iter().map(|s| &s.image).collect();
        match self {
            TaskModel::Classifier(m) => {
                let labels: Vec<usize> = batch.iter().map(|s| s.class).collect();
                m.loss_and_grad(&images, &labels)
            }
            TaskModel::Segmenter(m) => {
                let truths = batch
                    .iter()
                    .map(|s| s.seg.as_ref().ok_or_else(|| Error::Input("sample lacks a label map".into())))
                    .collect::<Result<Vec<_>>>()?;
                m.loss_and_grad(&images, &truths)
            }
        }
    }

    pub fn evaluate(&self, samples: &[&Sample]) -> Result<TaskMetrics> {
        if samples.is_empty() {
            return Err(Error::Config("cannot evaluate on an empty split".into()));
        }
        match self {
            TaskModel::Classifier(m) => {
                let images: Vec<&ScalarField> = samples.iter().map(|s| &s.image).collect();
                let pred = m.predict(&images)?;
                let truth: Vec<usize> = samples.iter().map(|s| s.class).collect();
                Ok(TaskMetrics::Classification(
                    ConfusionMatrix::new(&truth, &pred, m.num_classes)?.metrics(),
                ))
            }
            TaskModel::Segmenter(m) => {
                let mut sum = vec![0.0; m.num_labels];
                for s in samples {
                    let truth = s.seg.as_ref().ok_or_else(|| Error::Input("sample lacks a label map".into()))?;
                    let pred = m.predict(&s.image)?;
                    for (acc, d) in sum.iter_mut().zip(dice_per_label(pred.labels(), truth.labels(), m.num_labels)) {
                        *acc += d;
                    }
                }
                Ok(TaskMetrics::Segmentation {
                    dice: sum.iter().map(|d| d / samples.len() as f64).collect(),
                })
            }
        }
    }

    /// Writes `task.cfg` and the parameters as one f64 MGT1 tensor.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut kv = KvMap::default();
        insert_grid(&mut kv, self.grid());
        match self {
            TaskModel::Classifier(m) => {
                kv.insert("kind", "classification");
                kv.insert("classes", m.num_classes.to_string());
                kv.insert("hidden", m.hidden.to_string());
                kv.insert("gamma", m.gamma.to_string());
            }
            TaskModel::Segmenter(m) => {
                kv.insert("kind", "segmentation");
                kv.insert("labels", m.num_labels.to_string());
                kv.insert("radius", m.radius.to_string());
                kv.insert("hidden", m.hidden.to_string());
                kv.insert("tau", m.tau.to_string());
            }
        }
        let p = dir.join("task.cfg");
        std::fs::write(&p, kv.to_text()).map_err(|e| Error::io(&p, e))?;
        save_mgt(
            dir.join("params.mgt"),
            &Tensor::from_f64(vec![self.num_params()], self.params(), DType::F64)?,
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join("task.cfg");
        let kv = parse_kv(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
        let grid = read_grid(&kv)?;
        let mut model = match kv.get_str("kind")? {
            "classification" => TaskModel::Classifier(ClassifierModel::new(
                grid,
                kv.get("classes")?,
                kv.get("hidden")?,
                kv.get("gamma")?,
                0,
            )?),
            "segmentation" => TaskModel::Segmenter(SegmenterModel::new(
                grid,
                kv.get("labels")?,
                kv.get("radius")?,
                kv.get("hidden")?,
                kv.get("tau")?,
                0,
            )?),
            other => return Err(Error::Config(format!("unknown task kind {other:?}"))),
        };
        let t = load_mgt(dir.join("params.mgt"))?;
        let values = t.to_f64();
        if values.len() != model.num_params() {
            return Err(Error::Dimension(format!(
                "checkpoint has {} parameters, model needs {}",
                values.len(),
                model.num_params()
            )));
        }
        model.params_mut().copy_from_slice(&values);
        Ok(model)
    }
}
