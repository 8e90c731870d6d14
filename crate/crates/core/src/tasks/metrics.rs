//! Evaluation metrics and the paired t-test.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

fn choose2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!("labelings of length {} and {}", a.len(), b.len())));
    }
    let ka = a.iter().copied().max().map_or(0, |m| m + 1);
    let kb = b.iter().copied().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&i, &j) in a.iter().zip(b) {
        table[i][j] += 1;
    }
    let index: f64 = table.iter().flatten().map(|&n| choose2(n)).sum();
    let rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| choose2(table.iter().map(|r| r[j]).sum())).sum();
    let total = choose2(a.len());
    let expected = if total > 0.0 { rows * cols / total } else { 0.0 };
    let max = 0.5 * (rows + cols);
    if (max - expected).abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

/// Accuracy plus macro-averaged precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ConfusionMatrix {
    pub fn new(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Input("truth and prediction lengths differ".into()));
        }
        let mut counts = vec![vec![0; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::Input(format!("label outside 0..{num_classes}")));
            }
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    /// Classes never predicted get precision 0; classes absent from the
    /// truth get recall 0. Both still count in the macro average.
    pub fn metrics(&self) -> ClassificationMetrics {
        let k = self.counts.len();
        let total: usize = self.counts.iter().flatten().sum();
        let correct: usize = (0..k).map(|i| self.counts[i][i]).sum();
        let mut p_sum = 0.0;
        let mut r_sum = 0.0;
        let mut f_sum = 0.0;
        for c in 0..k {
            let tp = self.counts[c][c] as f64;
            let predicted: usize = (0..k).map(|t| self.counts[t][c]).sum();
            let actual: usize = self.counts[c].iter().sum();
            let p = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
            let r = if actual > 0 { tp / actual as f64 } else { 0.0 };
            p_sum += p;
            r_sum += r;
            f_sum += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        }
        let k = k.max(1) as f64;
        ClassificationMetrics {
            accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
            precision: p_sum / k,
            recall: r_sum / k,
            f1: f_sum / k,
        }
    }
}

pub const DICE_SMOOTH: f64 = 1e-6;

/// Smoothed Dice overlap of label `q` between two hard label maps.
pub fn dice(pred: &[u8], truth: &[u8], q: u8) -> f64 {
    let mut inter = 0usize;
    let mut sp = 0usize;
    let mut st = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        let (a, b) = (p == q, t == q);
        inter += (a && b) as usize;
        sp += a as usize;
        st += b as usize;
    }
    (2.0 * inter as f64 + DICE_SMOOTH) / ((sp + st) as f64 + DICE_SMOOTH)
}

/// Dice of every label `0..num_labels`.
pub fn dice_per_label(pred: &[u8], truth: &[u8], num_labels: usize) -> Vec<f64> {
    (0..num_labels).map(|q| dice(pred, truth, q as u8)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub mean_difference: f64,
    pub t: f64,
    pub dof: usize,
    /// Two-sided p-value.
    pub p_value: f64,
}

/// Paired two-sided t-test of `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Input("paired t-test needs two equal-length samples of size >= 2".into()));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let dof = a.len() - 1;
    if var == 0.0 {
        let (t, p) = if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) };
        return Ok(TTest {
            mean_difference: mean,
            t,
            dof,
            p_value: p,
        });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::Input(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTest {
        mean_difference: mean,
        t,
        dof,
        p_value: p,
    })
}
