//! Classification and segmentation objectives.

use crate::tasks::metrics::dice;

pub const PROB_FLOOR: f64 = 1e-12;
pub const WEIGHT_DECAY: f64 = 1e-5;

pub fn weight_decay(params: &[f64]) -> f64 {
    WEIGHT_DECAY * params.iter().map(|p| p * p).sum::<f64>()
}

/// `-gamma * sum_n log p_n[y_n]` plus weight decay; `probs` holds one row per sample.
pub fn clf_loss(probs: &[Vec<f64>], labels: &[usize], gamma: f64, params: &[f64]) -> f64 {
    assert_eq!(probs.len(), labels.len());
    let ce: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| -p[y].max(PROB_FLOOR).ln())
        .sum();
    gamma * ce + weight_decay(params)
}

/// Per-label segmentation terms for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SegTerms {
    /// `1 - Dice(S_q, R_q)` on hard predictions.
    pub dice_loss: Vec<f64>,
    /// `-(1/M) sum_{x in R_q} log p_q(x)`; summing over `q` gives the voxel-mean cross-entropy.
    pub ce: Vec<f64>,
}

impl SegTerms {
    pub fn total(&self) -> f64 {
        self.dice_loss.iter().sum::<f64>() + self.ce.iter().sum::<f64>()
    }
}

/// `probs` is voxel-major (`probs[x * q + label]`).
pub fn seg_terms(probs: &[f64], hard: &[u8], truth: &[u8], num_labels: usize) -> SegTerms {
    let m = truth.len();
    assert_eq!(probs.len(), m * num_labels);
    assert_eq!(hard.len(), m);
    let mut ce = vec![0.0; num_labels];
    for (x, &t) in truth.iter().enumerate() {
        let t = t as usize;
        ce[t] -= probs[x * num_labels + t].max(PROB_FLOOR).ln();
    }
    for c in &mut ce {
        *c /= m as f64;
    }
    let dice_loss = (0..num_labels).map(|q| 1.0 - dice(hard, truth, q as u8)).collect();
    SegTerms { dice_loss, ce }
}

/// `tau * sum_q [1 - Dice + CE]` over images plus weight decay.
pub fn seg_loss(
    prob_maps: &[Vec<f64>],
    hard_maps: &[Vec<u8>],
    gt: &[Vec<u8>],
    num_labels: usize,
    tau: f64,
    params: &[f64],
) -> f64 {
    let data: f64 = prob_maps
        .iter()
        .zip(hard_maps)
        .zip(gt)
        .map(|((p, h), t)| seg_terms(p, h, t, num_labels).total())
        .sum();
    tau * data + weight_decay(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_leave_weight_decay() {
        let probs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let params = [0.5, -2.0];
        let l = clf_loss(&probs, &[0, 1], 1.0, &params);
        assert!((l - WEIGHT_DECAY * 4.25).abs() < 1e-18);
    }

    #[test]
    fn uniform_predictions_cost_log_k() {
        let k = 4;
        let probs = vec![vec![0.25; k]; 6];
        let l = clf_loss(&probs, &[0, 1, 2, 3, 0, 1], 2.0, &[]);
        assert!((l - 2.0 * 6.0 * (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_floored() {
        let l = clf_loss(&[vec![0.0, 1.0]], &[0], 1.0, &[]);
        assert!((l - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn matching_segmentation_has_no_dice_loss() {
        let truth = vec![0u8, 1, 1, 2];
        let probs: Vec<f64> = truth
            .iter()
            .flat_map(|&t| (0..3).map(move |q| if q == t { 1.0 } else { 0.0 }))
            .collect();
        let t = seg_terms(&probs, &truth, &truth, 3);
        assert!(t.dice_loss.iter().all(|d| d.abs() < 1e-12));
        assert!(t.ce.iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn disjoint_label_costs_about_one_plus_ce() {
        let truth = vec![1u8, 1, 0, 0];
        let hard = vec![0u8, 0, 1, 1];
        let probs = vec![0.9, 0.1, 0.9, 0.1, 0.1, 0.9, 0.1, 0.9];
        let t = seg_terms(&probs, &hard, &truth, 2);
        assert!((t.dice_loss[1] - 1.0).abs() < 1e-6);
        assert!((t.ce[1] - 2.0 * -(0.1f64.ln()) / 4.0).abs() < 1e-12);
        let l = seg_loss(&[probs], &[hard], &[truth], 2, 0.5, &[]);
        assert!((l - 0.5 * t.total()).abs() < 1e-12);
    }
}
