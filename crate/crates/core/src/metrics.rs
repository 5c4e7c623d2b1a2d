//! Top-k ranking metrics over the full catalogue.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{Segment, SplitDataset, TrainingInstance};
use crate::error::{Error, Result};
use crate::model::{Graphs, Model};
use crate::numerics::{self, Tensor};

pub const DEFAULT_KS: [usize; 2] = [5, 10];

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricValues {
    pub recall: f64,
    pub ndcg: f64,
    pub hit_rate: f64,
    pub mrr: f64,
}

impl MetricValues {
    fn add(&mut self, o: &MetricValues) {
        self.recall += o.recall;
        self.ndcg += o.ndcg;
        self.hit_rate += o.hit_rate;
        self.mrr += o.mrr;
    }

    fn scale(&mut self, s: f64) {
        self.recall *= s;
        self.ndcg *= s;
        self.hit_rate *= s;
        self.mrr *= s;
    }
}

/// Items ranked by descending score, ties broken by ascending id, with
/// `exclusions` (sorted) removed. Only the first `k` are returned.
pub fn top_k(scores: &[f64], exclusions: &[usize], k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..scores.len())
        .filter(|i| exclusions.binary_search(i).is_err())
        .collect();
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if pool.len() > k && k > 0 {
        pool.select_nth_unstable_by(k - 1, order);
        pool.truncate(k);
    }
    pool.sort_unstable_by(order);
    pool.truncate(k);
    pool
}

fn discount(rank: usize) -> f64 {
    // rank is 1-based
    1.0 / ((rank + 1) as f64).log2()
}

/// Metrics of one ranked list against the target set.
pub fn metrics_from_ranking(ranked: &[usize], targets: &[usize], k: usize) -> MetricValues {
    let mut distinct: Vec<usize> = targets.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let top = &ranked[..ranked.len().min(k)];
    let mut hits = 0usize;
    let mut dcg = 0.0;
    let mut first_hit = None;
    for (i, v) in top.iter().enumerate() {
        if distinct.binary_search(v).is_ok() {
            hits += 1;
            dcg += discount(i + 1);
            first_hit.get_or_insert(i + 1);
        }
    }
    let ideal: f64 = (1..=distinct.len().min(k)).map(discount).sum();
    MetricValues {
        recall: hits as f64 / distinct.len() as f64,
        ndcg: if ideal > 0.0 { dcg / ideal } else { 0.0 },
        hit_rate: if hits > 0 { 1.0 } else { 0.0 },
        mrr: first_hit.map(|r| 1.0 / r as f64).unwrap_or(0.0),
    }
}

/// Ranks raw catalogue `scores` (minus `exclusions`) and scores the top `k`.
pub fn rank_scores(scores: &[f64], targets: &[usize], exclusions: &[usize], k: usize) -> Option<MetricValues> {
    if targets.is_empty() {
        return None;
    }
    Some(metrics_from_ranking(&top_k(scores, exclusions, k), targets, k))
}

/// Scores every item by `interest · e_v`, then [`rank_scores`].
pub fn rank_and_score(
    interest: &[f64],
    targets: &[usize],
    exclusions: &[usize],
    items: &Tensor,
    k: usize,
) -> Option<MetricValues> {
    let scores = numerics::matvec(items, interest);
    rank_scores(&scores, targets, exclusions, k)
}

/// Macro-averaged metrics per cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub cutoffs: Vec<(usize, MetricValues)>,
    pub instances: usize,
}

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<&MetricValues> {
        self.cutoffs.iter().find(|(c, _)| *c == k).map(|(_, m)| m)
    }

    pub fn recall_at(&self, k: usize) -> f64 {
        self.at(k).map(|m| m.recall).unwrap_or(0.0)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.at(k).map(|m| m.ndcg).unwrap_or(0.0)
    }

    /// Header row plus one row per metric, one column per cutoff.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric");
        for (k, _) in &self.cutoffs {
            let _ = write!(s, "\t@{k}");
        }
        s.push('\n');
        let rows: [(&str, fn(&MetricValues) -> f64); 4] = [
            ("recall", |m| m.recall),
            ("ndcg", |m| m.ndcg),
            ("hr", |m| m.hit_rate),
            ("mrr", |m| m.mrr),
        ];
        for (name, get) in rows {
            s.push_str(name);
            for (_, m) in &self.cutoffs {
                let _ = write!(s, "\t{:.6}", get(m));
            }
            s.push('\n');
        }
        s
    }

    /// `name@k=value` lines followed by `instances=N`.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, m) in &self.cutoffs {
            let _ = writeln!(s, "recall@{k}={:.6}", m.recall);
            let _ = writeln!(s, "ndcg@{k}={:.6}", m.ndcg);
            let _ = writeln!(s, "hr@{k}={:.6}", m.hit_rate);
            let _ = writeln!(s, "mrr@{k}={:.6}", m.mrr);
        }
        let _ = writeln!(s, "instances={}", self.instances);
        s
    }
}

/// Averages per-instance metrics produced by `scorer` (full-catalogue raw
/// scores for an instance). Instances without targets are skipped.
pub fn evaluate_scorer<F>(
    instances: &[TrainingInstance],
    split: &SplitDataset,
    segment: Segment,
    ks: &[usize],
    scorer: F,
) -> Result<MetricsReport>
where
    F: Fn(usize, &TrainingInstance) -> Vec<f64> + Sync,
{
    let kmax = ks.iter().copied().max().unwrap_or(0);
    let per: Vec<Option<Vec<MetricValues>>> = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            if inst.positives.is_empty() {
                log::warn!("skipping instance {i} of user {}: no targets", inst.user);
                return None;
            }
            let scores = scorer(i, inst);
            let ex = split.exclusions(inst.user, segment, &inst.positives);
            let ranked = top_k(&scores, &ex, kmax);
            Some(ks.iter().map(|&k| metrics_from_ranking(&ranked, &inst.positives, k)).collect())
        })
        .collect();
    let mut sums = vec![MetricValues::default(); ks.len()];
    let mut n = 0usize;
    for m in per.into_iter().flatten() {
        n += 1;
        for (s, v) in sums.iter_mut().zip(&m) {
            s.add(v);
        }
    }
    if n == 0 {
        return Err(Error::NoEvalInstances);
    }
    for s in &mut sums {
        s.scale(1.0 / n as f64);
    }
    Ok(MetricsReport {
        cutoffs: ks.iter().copied().zip(sums).collect(),
        instances: n,
    })
}

/// Model evaluation with neighborhood sampling pinned to `eval_seed`.
pub fn evaluate(
    model: &Model,
    graphs: &Graphs,
    split: &SplitDataset,
    instances: &[TrainingInstance],
    segment: Segment,
    eval_seed: u64,
) -> Result<MetricsReport> {
    if instances.is_empty() {
        return Err(Error::NoEvalInstances);
    }
    let interests = model.interests(graphs, instances, eval_seed);
    evaluate_scorer(instances, split, segment, &DEFAULT_KS, |i, _| model.score_all(&interests[i]))
}

/// Ranks by train-split popularity; the same for every user.
pub fn popularity_baseline(split: &SplitDataset, instances: &[TrainingInstance], segment: Segment) -> Result<MetricsReport> {
    let pop: Vec<f64> = split.train_popularity().into_iter().map(|c| c as f64).collect();
    evaluate_scorer(instances, split, segment, &DEFAULT_KS, |_, _| pop.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking() {
        let scores = [0.1, 0.9, 0.8, 0.7, 0.0, 0.2];
        let m = rank_scores(&scores, &[1, 2, 3], &[], 5).unwrap();
        assert_eq!(m, MetricValues { recall: 1.0, ndcg: 1.0, hit_rate: 1.0, mrr: 1.0 });
    }

    #[test]
    fn single_hit_at_rank_two() {
        // 12 items, target 7 ranked second, other targets outside top-10
        let mut scores: Vec<f64> = (0..12).map(|i| 100.0 - i as f64).collect();
        scores.swap(1, 7);
        let m = rank_scores(&scores, &[7, 10, 11], &[], 10).unwrap();
        let l3 = 3f64.log2();
        assert!((m.recall - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.hit_rate, 1.0);
        assert_eq!(m.mrr, 0.5);
        let expect = (1.0 / l3) / (1.0 + 1.0 / l3 + 0.5);
        assert!((m.ndcg - expect).abs() < 1e-12);
    }

    #[test]
    fn no_hits() {
        let scores: Vec<f64> = (0..20).map(|i| -(i as f64)).collect();
        let m = rank_scores(&scores, &[15, 19], &[], 10).unwrap();
        assert_eq!(m, MetricValues::default());
    }

    #[test]
    fn exclusions_and_ties() {
        let scores = [1.0, 1.0, 1.0, 0.5];
        assert_eq!(top_k(&scores, &[], 2), [0, 1]);
        assert_eq!(top_k(&scores, &[0], 2), [1, 2]);
        assert_eq!(top_k(&scores, &[0, 1, 2], 5), [3]);
        assert!(rank_scores(&scores, &[], &[], 2).is_none());
    }

    #[test]
    fn full_depth_recall_is_one() {
        let scores = [0.3, -1.0, 2.0, 0.0, 0.5];
        let m = rank_scores(&scores, &[1, 3], &[], scores.len()).unwrap();
        assert_eq!(m.recall, 1.0);
    }

    #[test]
    fn report_formats() {
        let r = MetricsReport {
            cutoffs: vec![(5, MetricValues { recall: 0.5, ndcg: 0.25, hit_rate: 1.0, mrr: 0.125 })],
            instances: 3,
        };
        assert_eq!(r.to_tsv(), "metric\t@5\nrecall\t0.500000\nndcg\t0.250000\nhr\t1.000000\nmrr\t0.125000\n");
        assert!(r.to_key_values().contains("mrr@5=0.125000\ninstances=3\n"));
    }
}
