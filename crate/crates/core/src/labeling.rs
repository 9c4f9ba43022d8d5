//! Automatic relevance labels: how much fusing a candidate subgraph into a
//! query subgraph moves the query toward its positives.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{encode_subgraph, EmbeddingTable};
use crate::graph::{extract_khop, fuse_subgraphs, BipartiteGraph, DynamicGraph, GraphError, Node, Subgraph};
use crate::library::{l2_topk, LibraryConfig, LibraryError, SubgraphLibrary};
use crate::seed;
use crate::tensor::cosine;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("positive set for {0} is empty")]
    NoPositives(Node),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no query centers available in the pretraining window")]
    NoQueries,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Beneficial,
    Irrelevant,
    Harmful,
}

impl Label {
    pub fn classify(c_r: f64, epsilon: f64) -> Label {
        if c_r > epsilon {
            Label::Beneficial
        } else if c_r < -epsilon {
            Label::Harmful
        } else {
            Label::Irrelevant
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Beneficial => "beneficial",
            Label::Irrelevant => "irrelevant",
            Label::Harmful => "harmful",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "beneficial" => Ok(Label::Beneficial),
            "irrelevant" => Ok(Label::Irrelevant),
            "harmful" => Ok(Label::Harmful),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskTriple {
    pub query_center: Node,
    pub candidate_center: Node,
    pub c_r: f64,
    pub label: Label,
}

/// Historical subgraphs the query should move toward.
#[derive(Clone, Debug, PartialEq)]
pub struct PositiveSet {
    pub query_center: Node,
    pub positives: Vec<Subgraph>,
}

impl PositiveSet {
    pub fn new(query_center: Node, positives: Vec<Subgraph>) -> Result<Self, LabelError> {
        let positives: Vec<Subgraph> = positives.into_iter().filter(|p| p.central() != query_center).collect();
        if positives.is_empty() {
            return Err(LabelError::NoPositives(query_center));
        }
        Ok(Self { query_center, positives })
    }

    /// Subgraphs of the query's neighbors in `window`, at most `cap_count`
    /// of them (sampled per query when there are more).
    #[allow(clippy::too_many_arguments)]
    pub fn from_window(
        query_center: Node,
        window: &BipartiteGraph,
        library: Option<&SubgraphLibrary>,
        cap_count: usize,
        hop: usize,
        cap: usize,
        run_seed: u64,
    ) -> Result<Self, LabelError> {
        let mut neighbors: Vec<Node> = window.neighbors(query_center).collect();
        if neighbors.len() > cap_count {
            let mut rng = seed::rng_keyed(run_seed, "positives", query_center.index(window.user_count()) as u64);
            let mut keep = sample(&mut rng, neighbors.len(), cap_count).into_vec();
            keep.sort_unstable();
            neighbors = keep.into_iter().map(|i| neighbors[i]).collect();
        }
        let positives = neighbors
            .into_iter()
            .map(|n| match library.and_then(|l| l.find(n)) {
                Some(idx) => Ok(library.expect("found above").value(idx).clone()),
                None => extract_khop(window, n, hop, cap, run_seed),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(query_center, positives)
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn encode(&self, table: &EmbeddingTable) -> Vec<Vec<f64>> {
        self.positives.iter().map(|p| encode_subgraph(table, p)).collect()
    }

    pub fn centers(&self) -> BTreeSet<Node> {
        self.positives.iter().map(Subgraph::central).collect()
    }
}

/// Mean cosine between `emb` and precomputed positive encodings.
pub fn mean_cosine(emb: &[f64], positives: &[Vec<f64>]) -> f64 {
    if emb.iter().all(|&x| x == 0.0) {
        log::debug!("zero-norm embedding in similarity; contributions set to 0");
    }
    positives.iter().map(|p| cosine(emb, p)).sum::<f64>() / positives.len() as f64
}

/// Mean cosine similarity of `emb` to the encoded positives.
pub fn sim_to_positives(emb: &[f64], positives: &PositiveSet, table: &EmbeddingTable) -> f64 {
    mean_cosine(emb, &positives.encode(table))
}

fn shift(q: &Subgraph, r: &Subgraph, pos: &[Vec<f64>], table: &EmbeddingTable) -> f64 {
    let before = mean_cosine(&encode_subgraph(table, q), pos);
    let after = mean_cosine(&encode_subgraph(table, &fuse_subgraphs(q, r)), pos);
    after - before
}

/// Similarity shift from fusing `r` into `q`, with its label.
pub fn delta_rel(q: &Subgraph, r: &Subgraph, positives: &PositiveSet, table: &EmbeddingTable, epsilon: f64) -> TaskTriple {
    let c_r = shift(q, r, &positives.encode(table), table);
    TaskTriple {
        query_center: q.central(),
        candidate_center: r.central(),
        c_r,
        label: Label::classify(c_r, epsilon),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    /// Query centers sampled (N_Q).
    pub queries: usize,
    /// Candidates per query (R_sample), half nearest and half uniform.
    pub candidates: usize,
    pub epsilon: f64,
    /// Cap on the positive set size (N⁺).
    pub positives: usize,
    /// Allow positives to appear as candidates.
    pub include_positives: bool,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            queries: 64,
            candidates: 8,
            epsilon: 1e-3,
            positives: 8,
            include_positives: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub seed: u64,
    pub epsilon: f64,
    pub positives: usize,
    pub checkpoint_hash: String,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub header: DatasetHeader,
    pub rows: Vec<TaskTriple>,
}

impl TaskDataset {
    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        let h = &self.header;
        writeln!(w, "# seed={}", h.seed)?;
        writeln!(w, "# epsilon={}", h.epsilon)?;
        writeln!(w, "# positives={}", h.positives)?;
        writeln!(w, "# checkpoint={}", h.checkpoint_hash)?;
        writeln!(w, "# skipped={}", h.skipped)?;
        writeln!(w, "query_center,candidate_center,C_r,label")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.query_center, r.candidate_center, r.c_r, r.label)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read(reader: impl BufRead) -> Result<Self, LabelError> {
        let mut header = DatasetHeader {
            seed: 0,
            epsilon: 0.0,
            positives: 0,
            checkpoint_hash: String::new(),
            skipped: 0,
        };
        let mut rows = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let err = |message: String| LabelError::Parse { line: n + 1, message };
            if let Some(kv) = line.strip_prefix("# ") {
                let (k, v) = kv.split_once('=').ok_or_else(|| err("header needs key=value".into()))?;
                let bad = |_| err(format!("bad value for {k}"));
                match k {
                    "seed" => header.seed = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                    "epsilon" => header.epsilon = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                    "positives" => header.positives = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                    "checkpoint" => header.checkpoint_hash = v.to_string(),
                    "skipped" => header.skipped = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                    _ => return Err(err(format!("unknown header key `{k}`"))),
                }
                continue;
            }
            if line.trim().is_empty() || line.starts_with("query_center") {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", f.len())));
            }
            rows.push(TaskTriple {
                query_center: f[0].parse().map_err(err)?,
                candidate_center: f[1].parse().map_err(err)?,
                c_r: f[2].parse().map_err(|_| err(format!("bad C_r `{}`", f[2])))?,
                label: f[3].parse().map_err(err)?,
            });
        }
        Ok(Self { header, rows })
    }
}

/// Candidate entries for one query: half nearest by key, half uniform.
fn pick_candidates(
    library: &SubgraphLibrary,
    query_idx: usize,
    excluded: &BTreeSet<Node>,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, LibraryError> {
    let eligible = |i: usize| i != query_idx && !excluded.contains(&library.value(i).central());
    let pool: Vec<usize> = (0..library.len()).filter(|&i| eligible(i)).collect();
    if pool.len() <= count {
        return Ok(pool);
    }
    let near_n = count / 2;
    let mut chosen: Vec<usize> = Vec::with_capacity(count);
    if near_n > 0 {
        let ranked = l2_topk(library, library.key(query_idx), library.len())?;
        chosen.extend(ranked.into_iter().map(|(i, _)| i).filter(|&i| eligible(i)).take(near_n));
    }
    let rest: Vec<usize> = pool.into_iter().filter(|i| !chosen.contains(i)).collect();
    let mut extra = sample(rng, rest.len(), count - chosen.len()).into_vec();
    extra.sort_unstable();
    chosen.extend(extra.into_iter().map(|i| rest[i]));
    Ok(chosen)
}

/// Labels `cfg.queries` sampled users against `cfg.candidates` library
/// entries each. Rows are ordered by query center, then candidate order.
pub fn build_task_dataset(
    graph: &DynamicGraph,
    library: &SubgraphLibrary,
    lib_cfg: &LibraryConfig,
    table: &EmbeddingTable,
    cfg: &LabelConfig,
    run_seed: u64,
    checkpoint_hash: &str,
) -> Result<TaskDataset, LabelError> {
    let window = graph.pretrain_window();
    let pool: Vec<Node> = window.active_nodes().into_iter().filter(|n| n.is_user()).collect();
    if pool.is_empty() {
        return Err(LabelError::NoQueries);
    }
    let mut rng = seed::rng(run_seed, "label");
    let mut picks = sample(&mut rng, pool.len(), cfg.queries.min(pool.len())).into_vec();
    picks.sort_unstable();
    let user_count = graph.user_count();
    let (hop, cap) = (lib_cfg.hop, lib_cfg.cap);
    let mut rows = Vec::new();
    let mut skipped = 0;
    for q in picks.into_iter().map(|i| pool[i]) {
        let positives = match PositiveSet::from_window(q, &window, Some(library), cfg.positives, hop, cap, run_seed) {
            Ok(p) => p,
            Err(LabelError::NoPositives(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let Some(q_idx) = library.find(q) else {
            skipped += 1;
            continue;
        };
        let excluded = if cfg.include_positives { BTreeSet::new() } else { positives.centers() };
        let mut crng = seed::rng_keyed(run_seed, "candidates", q.index(user_count) as u64);
        let cands = pick_candidates(library, q_idx, &excluded, cfg.candidates, &mut crng)?;
        let pos_enc = positives.encode(table);
        let query = library.value(q_idx);
        for c in cands {
            let r = library.value(c);
            let c_r = shift(query, r, &pos_enc, table);
            rows.push(TaskTriple {
                query_center: q,
                candidate_center: r.central(),
                c_r,
                label: Label::classify(c_r, cfg.epsilon),
            });
        }
    }
    if skipped > 0 {
        log::info!("labeling skipped {skipped} queries without positives");
    }
    Ok(TaskDataset {
        header: DatasetHeader {
            seed: run_seed,
            epsilon: cfg.epsilon,
            positives: cfg.positives,
            checkpoint_hash: checkpoint_hash.to_string(),
            skipped,
        },
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    fn table(nu: usize, ni: usize, rows: &[[f32; 2]]) -> EmbeddingTable {
        let data = rows.iter().flatten().copied().collect();
        EmbeddingTable::new(nu, ni, 1, Tensor::new(vec![nu + ni, 2], data).unwrap()).unwrap()
    }

    #[test]
    fn labels_follow_threshold() {
        assert_eq!(Label::classify(0.01, 1e-3), Label::Beneficial);
        assert_eq!(Label::classify(-0.01, 1e-3), Label::Harmful);
        assert_eq!(Label::classify(1e-3, 1e-3), Label::Irrelevant);
        assert_eq!(Label::classify(-1e-3, 1e-3), Label::Irrelevant);
    }

    #[test]
    fn similarity_hand_cases() {
        // items i0 = (1,0), i1 = (0,1), i2 = (1,1); singletons encode to 2x row
        let t = table(1, 3, &[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let single = |n| Subgraph::singleton(n, 1);
        let same = PositiveSet::new(Node::User(0), vec![single(Node::Item(0))]).unwrap();
        assert_abs_diff_eq!(sim_to_positives(&[3.0, 0.0], &same, &t), 1.0, epsilon = 1e-12);
        let orth = PositiveSet::new(Node::User(0), vec![single(Node::Item(1))]).unwrap();
        assert_abs_diff_eq!(sim_to_positives(&[3.0, 0.0], &orth, &t), 0.0, epsilon = 1e-12);
        let three = PositiveSet::new(Node::User(0), (0..3).map(|i| single(Node::Item(i))).collect()).unwrap();
        let expect = (1.0 + 0.0 + std::f64::consts::FRAC_1_SQRT_2) / 3.0;
        assert_abs_diff_eq!(sim_to_positives(&[1.0, 0.0], &three, &t), expect, epsilon = 1e-12);
    }

    #[test]
    fn positives_exclude_query_itself() {
        let q = Subgraph::singleton(Node::User(0), 1);
        assert!(matches!(PositiveSet::new(Node::User(0), vec![q]), Err(LabelError::NoPositives(_))));
    }

    #[test]
    fn self_fusion_is_irrelevant() {
        let t = table(1, 2, &[[1.0, 0.2], [0.3, 1.0], [0.5, 0.5]]);
        let q = Subgraph::new(Node::User(0), vec![Node::User(0), Node::Item(0)], [(0, 1)], 1).unwrap();
        let pos = PositiveSet::new(Node::User(0), vec![Subgraph::singleton(Node::Item(1), 1)]).unwrap();
        let trip = delta_rel(&q, &q, &pos, &t, 1e-3);
        assert_eq!(trip.c_r, 0.0);
        assert_eq!(trip.label, Label::Irrelevant);
    }

    #[test]
    fn dataset_file_round_trips() {
        let ds = TaskDataset {
            header: DatasetHeader {
                seed: 3,
                epsilon: 1e-3,
                positives: 8,
                checkpoint_hash: "ab".into(),
                skipped: 1,
            },
            rows: vec![TaskTriple {
                query_center: Node::User(1),
                candidate_center: Node::Item(4),
                c_r: -0.012345678901234,
                label: Label::Harmful,
            }],
        };
        let back = TaskDataset::read(ds.to_bytes().as_slice()).unwrap();
        assert_eq!(back, ds);
    }
}
