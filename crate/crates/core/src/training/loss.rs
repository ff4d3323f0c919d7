//! Detection loss: Huber localization, positive cross-entropy and
//! hard-negative cross-entropy.

use serde::Serialize;

use crate::geometry::MatchResult;
use crate::network::NetworkOutput;
use crate::scalar::Scalar;

pub fn huber(r: f64) -> f64 {
    if r.abs() < 1.0 {
        0.5 * r * r
    } else {
        r.abs() - 0.5
    }
}

pub fn huber_grad(r: f64) -> f64 {
    r.clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub loc: f64,
    pub plus: f64,
    pub minus: f64,
    pub total: f64,
    pub num_positive: usize,
    /// Window indices of the selected hard negatives.
    #[serde(skip)]
    pub hard_negatives: Vec<usize>,
}

/// Loss values with gradients w.r.t. logits (`N_d x K`) and localization
/// (`N_d x 2`).
#[derive(Debug, Clone)]
pub struct LossGrad<S> {
    pub breakdown: LossBreakdown,
    pub d_logits: Vec<S>,
    pub d_loc: Vec<S>,
}

/// Mean Huber loss summed over the two coordinates, over positive windows.
pub fn localization_loss(y: &[[f64; 2]], t: &[[f64; 2]]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let sum: f64 = y
        .iter()
        .zip(t)
        .map(|(a, b)| huber(a[0] - b[0]) + huber(a[1] - b[1]))
        .sum();
    sum / y.len() as f64
}

/// `-log softmax(s)[k]`.
pub fn neg_log_softmax(s: &[f64], k: usize) -> f64 {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - s[k]
}

/// Mean cross-entropy of logit rows against their true labels.
pub fn positive_class_loss(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    logits
        .iter()
        .zip(labels)
        .map(|(s, &k)| neg_log_softmax(s, k))
        .sum::<f64>()
        / logits.len() as f64
}

/// The `min(ratio * n_positive, candidates)` candidates with the lowest
/// negative-class probability, ties broken by window index. Returned in
/// selection order.
pub fn select_hard_negatives(candidates: &[usize], p_neg: &[f64], n_positive: usize, ratio: usize) -> Vec<usize> {
    let count = (ratio * n_positive).min(candidates.len());
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| p_neg[a].total_cmp(&p_neg[b]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

/// Mean negative-class cross-entropy over the hard negatives of
/// `unmatched` (logit rows indexed by window).
pub fn hard_negative_loss(
    logits: &[Vec<f64>],
    unmatched: &[usize],
    n_positive: usize,
    ratio: usize,
) -> (f64, Vec<usize>) {
    let p_neg: Vec<f64> = logits.iter().map(|s| (-neg_log_softmax(s, 0)).exp()).collect();
    let selected = select_hard_negatives(unmatched, &p_neg, n_positive, ratio);
    if selected.is_empty() {
        return (0.0, selected);
    }
    let loss = selected.iter().map(|&j| neg_log_softmax(&logits[j], 0)).sum::<f64>() / selected.len() as f64;
    (loss, selected)
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Full segment loss and its gradients. Segments without positive windows
/// contribute zero loss.
pub fn detection_loss<S: Scalar>(out: &NetworkOutput<S>, matches: &MatchResult, ratio: usize) -> LossGrad<S> {
    let (n_d, k) = (out.num_windows, out.num_labels);
    let mut d_logits = vec![S::zero(); n_d * k];
    let mut d_loc = vec![S::zero(); n_d * 2];
    let n_pos = matches.num_positive();
    if n_pos == 0 {
        return LossGrad {
            breakdown: LossBreakdown {
                loc: 0.0,
                plus: 0.0,
                minus: 0.0,
                total: 0.0,
                num_positive: 0,
                hard_negatives: Vec::new(),
            },
            d_logits,
            d_loc,
        };
    }
    let logits: Vec<Vec<f64>> = (0..n_d)
        .map(|j| out.logit_row(j).iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    let inv_pos = 1.0 / n_pos as f64;

    let mut loc = 0.0;
    let mut plus = 0.0;
    for p in &matches.pairs {
        let y = out.loc_row(p.window);
        for c in 0..2 {
            let r = y[c].to_f64_lossy() - p.target[c];
            loc += huber(r);
            d_loc[2 * p.window + c] = S::of(huber_grad(r) * inv_pos);
        }
        plus += neg_log_softmax(&logits[p.window], p.label);
        let probs = softmax(&logits[p.window]);
        for (c, pc) in probs.iter().enumerate() {
            let target = if c == p.label { 1.0 } else { 0.0 };
            d_logits[p.window * k + c] += S::of((pc - target) * inv_pos);
        }
    }
    loc *= inv_pos;
    plus *= inv_pos;

    let (minus, selected) = hard_negative_loss(&logits, &matches.unmatched, n_pos, ratio);
    if !selected.is_empty() {
        let inv_neg = 1.0 / selected.len() as f64;
        for &j in &selected {
            let probs = softmax(&logits[j]);
            for (c, pc) in probs.iter().enumerate() {
                let target = if c == 0 { 1.0 } else { 0.0 };
                d_logits[j * k + c] += S::of((pc - target) * inv_neg);
            }
        }
    }
    LossGrad {
        breakdown: LossBreakdown {
            loc,
            plus,
            minus,
            total: loc + plus + minus,
            num_positive: n_pos,
            hard_negatives: selected,
        },
        d_logits,
        d_loc,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::MatchedPair;
    use crate::network::softmax_rows;

    fn output(logits: Vec<f64>, loc: Vec<f64>, k: usize) -> NetworkOutput<f64> {
        NetworkOutput {
            num_windows: logits.len() / k,
            num_labels: k,
            probs: softmax_rows(&logits, k),
            logits,
            loc,
        }
    }

    #[test]
    fn huber_values_and_slope() {
        assert_eq!(huber(0.0), 0.0);
        assert_eq!(huber(0.5), 0.125);
        assert_eq!(huber(2.0), 1.5);
        assert_eq!(huber(-2.0), 1.5);
        let h = 1e-7;
        for r in [1.0, -1.0] {
            let left = (huber(r) - huber(r - h)) / h;
            let right = (huber(r + h) - huber(r)) / h;
            assert!((left - right).abs() < 1e-6);
            assert_eq!(huber_grad(r), r);
        }
    }

    #[test]
    fn component_examples() {
        assert_eq!(localization_loss(&[[1.0, 2.0]], &[[1.0, 2.0]]), 0.0);
        assert_eq!(localization_loss(&[[0.5, 0.0]], &[[0.0, 0.0]]), 0.125);
        assert_eq!(localization_loss(&[], &[]), 0.0);
        assert!((positive_class_loss(&[vec![0.0; 4]], &[2]) - 4f64.ln()).abs() < 1e-15);
        assert!(positive_class_loss(&[vec![0.0, 20.0, 0.0, 0.0]], &[1]) < 1e-8);
        let two = positive_class_loss(&[vec![0.0; 4], vec![0.0, 20.0, 0.0, 0.0]], &[0, 1]);
        let each = (neg_log_softmax(&[0.0; 4], 0) + neg_log_softmax(&[0.0, 20.0, 0.0, 0.0], 1)) / 2.0;
        assert_eq!(two, each);
    }

    #[test]
    fn hard_negative_examples() {
        let logits: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * 0.3, 0.0, 0.1, -0.2]).collect();
        let unmatched: Vec<usize> = (0..10).collect();
        let (_, sel) = hard_negative_loss(&logits, &unmatched, 2, 3);
        assert_eq!(sel, vec![0, 1, 2, 3, 4, 5]);
        let (l, sel) = hard_negative_loss(&logits, &unmatched, 0, 3);
        assert_eq!((l, sel.len()), (0.0, 0));
        let easy: Vec<Vec<f64>> = (0..5).map(|_| vec![30.0, 0.0, 0.0, 0.0]).collect();
        assert!(hard_negative_loss(&easy, &[0, 1, 2, 3, 4], 1, 3).0 < 1e-10);
        let more = hard_negative_loss(&logits, &unmatched, 2, 6).1.len();
        assert!(more >= 6);
    }

    fn single_positive() -> MatchResult {
        MatchResult {
            pairs: vec![MatchedPair {
                window: 1,
                event: 0,
                label: 2,
                iou: 0.8,
                target: [0.25, -0.5],
            }],
            unmatched: vec![0, 2, 3, 4],
        }
    }

    #[test]
    fn perfect_prediction_has_tiny_loss() {
        let k = 3;
        let mut logits = vec![0.0; 5 * k];
        for j in 0..5 {
            logits[j * k] = 30.0;
        }
        logits[k] = 0.0;
        logits[k + 2] = 30.0;
        let mut loc = vec![0.0; 10];
        loc[2] = 0.25;
        loc[3] = -0.5;
        let g = detection_loss(&output(logits, loc, k), &single_positive(), 3);
        assert!(g.breakdown.total < 1e-6);
        assert_eq!(
            g.breakdown.total,
            g.breakdown.loc + g.breakdown.plus + g.breakdown.minus
        );
        assert_eq!(g.breakdown.hard_negatives.len(), 3);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let k = 3;
        let logits: Vec<f64> = (0..15).map(|i| ((i * 5 % 13) as f64 - 6.0) * 0.37).collect();
        let loc: Vec<f64> = (0..10).map(|i| (i as f64 - 4.0) * 0.4).collect();
        let m = single_positive();
        let g = detection_loss(&output(logits.clone(), loc.clone(), k), &m, 3);
        let f = |s: &[f64], y: &[f64]| {
            detection_loss(&output(s.to_vec(), y.to_vec(), k), &m, 3)
                .breakdown
                .total
        };
        let h = 1e-6;
        for i in 0..logits.len() {
            let (mut a, mut b) = (logits.clone(), logits.clone());
            a[i] += h;
            b[i] -= h;
            let num = (f(&a, &loc) - f(&b, &loc)) / (2.0 * h);
            assert!((num - g.d_logits[i]).abs() < 1e-7, "logit {i}");
        }
        for i in 0..loc.len() {
            let (mut a, mut b) = (loc.clone(), loc.clone());
            a[i] += h;
            b[i] -= h;
            let num = (f(&logits, &a) - f(&logits, &b)) / (2.0 * h);
            assert!((num - g.d_loc[i]).abs() < 1e-7, "loc {i}");
        }
    }

    #[test]
    fn no_positives_means_no_loss() {
        let m = MatchResult {
            pairs: vec![],
            unmatched: vec![0, 1],
        };
        let g = detection_loss(&output(vec![1.0, 2.0, 3.0, 4.0], vec![0.0; 4], 2), &m, 3);
        assert_eq!(g.breakdown.total, 0.0);
        assert!(g.d_logits.iter().all(|&v| v == 0.0));
    }
}
