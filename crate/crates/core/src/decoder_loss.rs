//! Candidate scoring and the sampled cross-entropy objective.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{self, softmax, softmax_backward, Tensor};

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidates {
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
}

/// `score_i = s_u · e_i`, normalized by a softmax over the candidate set.
pub fn score_candidates(interest: &[f64], candidates: &[usize], items: &Tensor) -> Result<ScoredCandidates> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let scores: Vec<f64> = candidates
        .iter()
        .map(|&v| numerics::dot(interest, items.row(v)))
        .collect();
    let probs = softmax(&scores);
    Ok(ScoredCandidates {
        items: candidates.to_vec(),
        scores,
        probs,
    })
}

/// Mean binary cross-entropy over the entries, and its gradient with
/// respect to each probability (zero where the clamp is active).
pub fn bce_loss(labels: &[f64], probs: &[f64]) -> (f64, Vec<f64>) {
    let n = probs.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (&y, &p) in labels.iter().zip(probs) {
        let q = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        loss -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        let inside = p > PROB_EPS && p < 1.0 - PROB_EPS;
        grad.push(if inside { -(y / q - (1.0 - y) / (1.0 - q)) / n } else { 0.0 });
    }
    (loss / n, grad)
}

/// Gradients of an instance loss with respect to the interest vector and
/// the candidate embeddings.
#[derive(Debug, Clone, Default)]
pub struct DecoderGrads {
    pub interest: Vec<f64>,
    pub items: BTreeMap<usize, Vec<f64>>,
}

/// Scores `positives ‖ negatives` jointly, applies [`bce_loss`] with labels
/// 1 for positives and 0 for negatives, and backpropagates to the scores'
/// inputs. `scale` multiplies every gradient (batch averaging).
pub fn instance_loss(
    interest: &[f64],
    positives: &[usize],
    negatives: &[usize],
    items: &Tensor,
    scale: f64,
) -> Result<(f64, DecoderGrads)> {
    let candidates: Vec<usize> = positives.iter().chain(negatives).copied().collect();
    let scored = score_candidates(interest, &candidates, items)?;
    let labels: Vec<f64> = (0..candidates.len())
        .map(|i| if i < positives.len() { 1.0 } else { 0.0 })
        .collect();
    let (loss, g_probs) = bce_loss(&labels, &scored.probs);
    let g_scores = softmax_backward(&scored.probs, &g_probs);
    let mut grads = DecoderGrads {
        interest: vec![0.0; interest.len()],
        items: BTreeMap::new(),
    };
    for (&v, &g) in candidates.iter().zip(&g_scores) {
        let (gs, ge) = numerics::dot_backward(interest, items.row(v), g * scale);
        numerics::add_into(&mut grads.interest, &gs);
        match grads.items.get_mut(&v) {
            Some(row) => numerics::add_into(row, &ge),
            None => {
                grads.items.insert(v, ge);
            }
        }
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::seed;
    use rand::Rng;

    #[test]
    fn aligned_interest_wins() {
        let items = Tensor::identity(4);
        let s = items.row(2).to_vec();
        let sc = score_candidates(&s, &[0, 1, 2, 3], &items).unwrap();
        let best = (0..4).max_by(|&a, &b| sc.probs[a].total_cmp(&sc.probs[b])).unwrap();
        assert_eq!(best, 2);
    }

    #[test]
    fn single_candidate_and_empty_set() {
        let items = Tensor::identity(2);
        assert_eq!(score_candidates(&[1.0, 0.0], &[1], &items).unwrap().probs, [1.0]);
        assert!(matches!(
            score_candidates(&[1.0, 0.0], &[], &items),
            Err(Error::EmptyCandidates)
        ));
    }

    #[test]
    fn hand_softmax() {
        // e_i = [score_i], s = [1]
        let items = Tensor::from_vec(&[3, 1], vec![0.0, 2f64.ln(), 4f64.ln()]).unwrap();
        let sc = score_candidates(&[1.0], &[0, 1, 2], &items).unwrap();
        for (p, e) in sc.probs.iter().zip([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]) {
            assert!((p - e).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_values() {
        let (l, _) = bce_loss(&[1.0, 0.0], &[1.0, 0.0]);
        assert!(l < 1e-6);
        let (l, _) = bce_loss(&[1.0, 0.0, 1.0], &[0.5, 0.5, 0.5]);
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_gradient() {
        let labels = [1.0, 0.0, 0.0, 1.0];
        let p = [0.3, 0.6, 0.2, 0.9];
        let f = |x: &[f64]| bce_loss(&labels, x);
        assert!(grad_check(f, &p, 1e-6) < 1e-4);
    }

    #[test]
    fn instance_loss_gradient_four_candidates() {
        let dim = 3;
        let mut rng = seed::rng(4, &[]);
        let items = Tensor::uniform(&[5, dim], 1.0, &mut rng);
        let s: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut theta = s.clone();
        theta.extend(&items.data);
        let f = |x: &[f64]| {
            let t = Tensor::from_vec(&[5, dim], x[dim..].to_vec()).unwrap();
            let (l, g) = instance_loss(&x[..dim], &[1, 3], &[0, 4], &t, 1.0).unwrap();
            let mut grad = g.interest.clone();
            let mut gi = vec![0.0; 5 * dim];
            for (v, row) in g.items {
                gi[v * dim..(v + 1) * dim].copy_from_slice(&row);
            }
            grad.extend(gi);
            (l, grad)
        };
        assert!(grad_check(f, &theta, 1e-5) < 1e-4);
    }

    #[test]
    fn shift_invariance_of_probabilities() {
        // adding a constant to every score: append a coordinate that contributes c to each
        let items = Tensor::from_vec(&[3, 2], vec![0.1, 1.0, 0.7, 1.0, -0.4, 1.0]).unwrap();
        let a = score_candidates(&[2.0, 0.0], &[0, 1, 2], &items).unwrap();
        let b = score_candidates(&[2.0, 5.0], &[0, 1, 2], &items).unwrap();
        for (x, y) in a.probs.iter().zip(&b.probs) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
