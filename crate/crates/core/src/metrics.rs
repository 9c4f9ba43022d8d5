//! Top-k ranking metrics and per-snapshot evaluation reports.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::graph::DynamicGraph;

/// Mean metric over users with nonempty ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub users: usize,
    /// Users dropped for having no ground truth.
    pub skipped: usize,
}

fn mean_over(ground_truth: &[BTreeSet<u32>], per_user: impl Fn(usize) -> f64) -> MetricValue {
    let mut sum = 0.0;
    let mut users = 0;
    for (u, gt) in ground_truth.iter().enumerate() {
        if gt.is_empty() {
            continue;
        }
        sum += per_user(u);
        users += 1;
    }
    MetricValue {
        value: if users == 0 { 0.0 } else { sum / users as f64 },
        users,
        skipped: ground_truth.len() - users,
    }
}

/// Hits in the top `k` over ground-truth size, averaged over users.
pub fn recall_at_k(predictions: &[Vec<u32>], ground_truth: &[BTreeSet<u32>], k: usize) -> MetricValue {
    mean_over(ground_truth, |u| {
        let hits = predictions[u].iter().take(k).filter(|i| ground_truth[u].contains(i)).count();
        hits as f64 / ground_truth[u].len() as f64
    })
}

/// `DCG / IDCG` with binary relevance and `log2(rank + 1)` discounts.
pub fn ndcg_at_k(predictions: &[Vec<u32>], ground_truth: &[BTreeSet<u32>], k: usize) -> MetricValue {
    mean_over(ground_truth, |u| {
        let gt = &ground_truth[u];
        let dcg: f64 = predictions[u]
            .iter()
            .take(k)
            .enumerate()
            .filter(|(_, i)| gt.contains(i))
            .map(|(j, _)| 1.0 / (j as f64 + 2.0).log2())
            .sum();
        let idcg: f64 = (0..k.min(gt.len())).map(|j| 1.0 / (j as f64 + 2.0).log2()).sum();
        dcg / idcg
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotMetrics {
    pub snapshot: usize,
    pub time_index: i64,
    pub users: usize,
    pub skipped_users: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub label: String,
    pub k: usize,
    pub seed: u64,
    pub users: usize,
    pub mean_recall: f64,
    pub mean_ndcg: f64,
    /// Test snapshots without a single evaluable user.
    #[serde(default)]
    pub empty_snapshots: Vec<usize>,
    /// Upstream artifact name to sha256.
    #[serde(default)]
    pub lineage: BTreeMap<String, String>,
    #[serde(default)]
    pub snapshots: Vec<SnapshotMetrics>,
}

impl EvalReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report is plain data")
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

/// Ground truth for test snapshot `t`: each user's items in `G_t` that
/// were not seen in snapshots `0..t`.
pub fn ground_truth(graph: &DynamicGraph, t: usize) -> Vec<BTreeSet<u32>> {
    let seen = graph.history(t - 1);
    let snap = graph.snapshot(t);
    (0..graph.user_count() as u32)
        .map(|u| {
            let prior = seen.items_of(u);
            snap.items_of(u)
                .iter()
                .copied()
                .filter(|i| prior.binary_search(i).is_err())
                .collect()
        })
        .collect()
}

/// Scores every test snapshot in `tests` (each > 0). `rank(t, user)` must
/// return the user's ranked items for snapshot `t`; it is called only for
/// users with nonempty ground truth.
pub fn evaluate_snapshots<E>(
    graph: &DynamicGraph,
    tests: &[usize],
    k: usize,
    seed: u64,
    label: &str,
    mut rank: impl FnMut(usize, u32) -> Result<Vec<u32>, E>,
) -> Result<EvalReport, E> {
    let mut snapshots = Vec::new();
    let mut empty = Vec::new();
    let mut users = 0;
    for &t in tests {
        let gt = ground_truth(graph, t);
        let mut preds = Vec::with_capacity(gt.len());
        for (u, g) in gt.iter().enumerate() {
            preds.push(if g.is_empty() { Vec::new() } else { rank(t, u as u32)? });
        }
        let recall = recall_at_k(&preds, &gt, k);
        if recall.users == 0 {
            log::warn!("test snapshot {t} has no evaluable users");
            empty.push(t);
            continue;
        }
        let ndcg = ndcg_at_k(&preds, &gt, k);
        users += recall.users;
        snapshots.push(SnapshotMetrics {
            snapshot: t,
            time_index: graph.snapshot(t).time_index,
            users: recall.users,
            skipped_users: recall.skipped,
            recall: recall.value,
            ndcg: ndcg.value,
        });
    }
    let n = snapshots.len().max(1) as f64;
    Ok(EvalReport {
        label: label.to_string(),
        k,
        seed,
        users,
        mean_recall: snapshots.iter().map(|s| s.recall).sum::<f64>() / n,
        mean_ndcg: snapshots.iter().map(|s| s.ndcg).sum::<f64>() / n,
        empty_snapshots: empty,
        lineage: BTreeMap::new(),
        snapshots,
    })
}
