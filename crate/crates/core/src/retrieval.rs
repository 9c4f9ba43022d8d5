//! Retrieval-augmented fine-tuning and inference.
//!
//! Per user: a k-hop query subgraph over the accumulated history is keyed
//! with the pretrained table, the `K` nearest library entries are scored by
//! the relevance model, and the top `M` are pooled over the current
//! propagated embeddings, weighted by `α` and gated into the user vector.
//! `M = 0` bypasses the relevance model entirely.

use std::ops::Range;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::encoder::{
    encode_subgraph, encode_subgraph_intra, gather_triplets, graph_operator, layer_weights, propagate_mean, bpr_loss,
    reg_loss, sample_triplets, temporal_forward, EmbeddingTable, EncoderError, Triplet, EMBEDDINGS,
};
use crate::graph::{edge_perturb, extract_khop, BipartiteGraph, DynamicGraph, GraphError, Node, Subgraph};
use crate::library::{l2_topk, LibraryError, SubgraphLibrary};
use crate::seed;
use crate::tam::{self, PairBatch, TamError, TamForward, TamParams, SCORE_HEAD};
use crate::tensor::{OptimError, Optimizer, OptimizerKind, ParamSet, SparseMatrix, Tape, Tensor, TensorError, Var};

pub const BETA: &str = "beta";

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("invalid fusion config: {0}")]
    Config(String),
    #[error("unknown user {0}")]
    UnknownUser(u32),
    #[error("need at least one fine-tune snapshot followed by a test snapshot ({snapshots} snapshots, split {split})")]
    NoTestSnapshots { snapshots: usize, split: usize },
    #[error("no fine-tune state for snapshot {0}")]
    MissingStep(usize),
    #[error("embedding width {table} does not match relevance model width {model}")]
    Width { table: usize, model: usize },
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error(transparent)]
    Tam(#[from] TamError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    Uniform,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub top_k: usize,
    /// 0 disables retrieval.
    pub top_m: usize,
    pub alpha: AlphaMode,
    pub temperature: f64,
    /// Initial pre-sigmoid gate.
    pub beta_init: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub mu: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            top_m: 3,
            alpha: AlphaMode::Softmax,
            temperature: 1.0,
            beta_init: 0.0,
            gamma: 1.0,
            lambda: 0.1,
            mu: 1e-4,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let bad = |m: String| Err(RetrievalError::Config(m));
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if self.top_m > self.top_k {
            return bad(format!("top_m {} exceeds top_k {}", self.top_m, self.top_k));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.lambda >= 0.0) || !(self.mu >= 0.0) {
            return bad(format!("lambda and mu must be non-negative, got {} and {}", self.lambda, self.mu));
        }
        if !self.gamma.is_finite() || !self.beta_init.is_finite() {
            return bad("gamma and beta_init must be finite".into());
        }
        Ok(())
    }

    pub fn enabled(&self) -> bool {
        self.top_m > 0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Positions of the `m` highest scores, descending; ties by position.
pub fn select_topm(scores: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

/// `α` over the selected scores.
pub fn alpha_weights(scores: &[f64], mode: AlphaMode, temperature: f64) -> Vec<f64> {
    let m = scores.len();
    match mode {
        AlphaMode::Uniform => vec![1.0 / m as f64; m],
        AlphaMode::Softmax => {
            let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| ((s - top) / temperature).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        }
    }
}

/// Scores every `(query, candidate)` pair with the relevance model and
/// keeps the best `m` as `(candidate position, score)`.
pub fn rerank_topm(
    query: &Subgraph,
    candidates: &[&Subgraph],
    tam: &TamParams,
    table: &EmbeddingTable,
    m: usize,
) -> Result<Vec<(usize, f64)>, RetrievalError> {
    if m > candidates.len() {
        return Err(RetrievalError::Config(format!("top_m {m} exceeds {} candidates", candidates.len())));
    }
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let zq: Vec<f32> = encode_subgraph(table, query).into_iter().map(|v| v as f32).collect();
    let zr: Vec<Vec<f32>> = candidates
        .iter()
        .map(|c| encode_subgraph(table, c).into_iter().map(|v| v as f32).collect())
        .collect();
    let pairs: Vec<(&[f32], &[f32])> = zr.iter().map(|r| (zq.as_slice(), r.as_slice())).collect();
    let scores = tam::score(&PairBatch::from_rows(&pairs, vec![])?, tam)?;
    Ok(select_topm(&scores, m).into_iter().map(|i| (i, scores[i])).collect())
}

/// `H_rag = Σ α_i h_m^i` with `h_m` pooled over layers `1..=L`.
pub fn aggregate_retrieved(
    selected: &[&Subgraph],
    scores: &[f64],
    table: &EmbeddingTable,
    cfg: &FusionConfig,
) -> Result<Vec<f64>, RetrievalError> {
    if selected.is_empty() || selected.len() != scores.len() {
        return Err(RetrievalError::Config(format!(
            "aggregation needs matching nonempty subgraphs and scores ({} vs {})",
            selected.len(),
            scores.len()
        )));
    }
    let alpha = alpha_weights(scores, cfg.alpha, cfg.temperature);
    let mut out = vec![0.0; table.dim()];
    for (sg, a) in selected.iter().zip(alpha) {
        for (o, h) in out.iter_mut().zip(encode_subgraph_intra(table, sg)) {
            *o += a * h;
        }
    }
    Ok(out)
}

/// `σ(β)·h_q + (1 − σ(β))·H_rag`.
pub fn fuse_query(h_q: &[f64], h_rag: &[f64], beta_param: f64) -> Result<Vec<f64>, RetrievalError> {
    if h_q.len() != h_rag.len() {
        return Err(RetrievalError::Config(format!("fusion widths differ: {} vs {}", h_q.len(), h_rag.len())));
    }
    let b = sigmoid(beta_param);
    Ok(h_q.iter().zip(h_rag).map(|(q, r)| b * q + (1.0 - b) * r).collect())
}

/// Tape version of [`fuse_query`] for `[B x d]` rows and a `[1 x 1]` gate.
pub fn fuse_on_tape(tape: &mut Tape, h_q: Var, h_rag: Var, beta: Var) -> Result<Var, TensorError> {
    let (b, d) = tape.shape(h_q);
    let gate = tape.sigmoid(beta)?;
    let col = tape.leaf(b, 1, vec![1.0; b], false);
    let row = tape.leaf(1, d, vec![1.0; d], false);
    let g = tape.matmul(col, gate)?;
    let g = tape.matmul(g, row)?;
    let keep = tape.mul(g, h_q)?;
    let inv = tape.scale(g, -1.0)?;
    let inv = tape.add_scalar(inv, 1.0)?;
    let take = tape.mul(inv, h_rag)?;
    tape.add(keep, take)
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub bpr: Var,
    pub mrl: Option<Var>,
    pub reg: Var,
}

/// `L_bpr + λ·L_mrl + μ·L_reg` for one batch. `fused` holds the (fused)
/// user rows, `x` the propagated table and `e` the raw table. The margin
/// term is built only when `tam` is given and `λ > 0`.
#[allow(clippy::too_many_arguments)]
pub fn finetune_losses(
    tape: &mut Tape,
    fused: Var,
    x: Var,
    e: Var,
    user_count: usize,
    batch: &[Triplet],
    tam: Option<&TamForward<'_>>,
    cfg: &FusionConfig,
) -> Result<LossTerms, TensorError> {
    let (_, p, n) = gather_triplets(tape, x, user_count, batch)?;
    let bpr = bpr_loss(tape, fused, p, n)?;
    let reg = reg_loss(tape, e, user_count, batch)?;
    let weighted = tape.scale(reg, cfg.mu)?;
    let mut total = tape.add(bpr, weighted)?;
    let mut mrl = None;
    if let Some(fwd) = tam.filter(|_| cfg.lambda > 0.0) {
        let b = batch.len();
        let q = tape.concat_rows(&[fused, fused])?;
        let c = tape.concat_rows(&[p, n])?;
        let s = fwd.score(tape, q, c)?;
        let sp = tape.gather_rows(s, (0..b).collect())?;
        let sn = tape.gather_rows(s, (b..2 * b).collect())?;
        let diff = tape.sub(sn, sp)?;
        let hinge = tape.add_scalar(diff, cfg.gamma)?;
        let hinge = tape.relu(hinge)?;
        let m = tape.mean(hinge)?;
        let w = tape.scale(m, cfg.lambda)?;
        total = tape.add(total, w)?;
        mrl = Some(m);
    }
    Ok(LossTerms { total, bpr, mrl, reg })
}

/// Per-entry `(node index, weight)` pooling rows over layers `1..=L`.
pub fn intra_pools(library: &SubgraphLibrary, layers: usize) -> Vec<Vec<(usize, f64)>> {
    let uc = library.user_count();
    library
        .values()
        .iter()
        .map(|sg| {
            sg.nodes()
                .iter()
                .zip(layer_weights(sg, 1, layers))
                .filter(|(_, w)| *w != 0.0)
                .map(|(n, w)| (n.index(uc), w))
                .collect()
        })
        .collect()
}

/// Retrieval results of every user for one history horizon.
#[derive(Clone, Debug)]
pub struct QueryContext {
    pub t: usize,
    per_user: usize,
    hits: Vec<usize>,
    keys: Vec<f32>,
    task: Vec<f64>,
    width: usize,
    cold: Vec<bool>,
}

impl QueryContext {
    /// Query subgraphs are extracted from snapshots `0..=t`.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        graph: &DynamicGraph,
        t: usize,
        library: &SubgraphLibrary,
        e0: &EmbeddingTable,
        tam: &TamParams,
        fusion: &FusionConfig,
        hop: usize,
        cap: usize,
        run_seed: u64,
    ) -> Result<Self, RetrievalError> {
        let history = graph.history(t);
        let k = fusion.top_k.min(library.len());
        let d = e0.dim();
        let users = graph.user_count();
        let mut hits = Vec::with_capacity(users * k);
        let mut keys = Vec::with_capacity(users * d);
        let mut cold = Vec::with_capacity(users);
        for u in 0..users as u32 {
            let node = Node::User(u);
            cold.push(history.degree(node) == 0);
            let sg = extract_khop(&history, node, hop, cap, run_seed)?;
            let key: Vec<f32> = encode_subgraph(e0, &sg).into_iter().map(|v| v as f32).collect();
            hits.extend(l2_topk(library, &key, k)?.into_iter().map(|(i, _)| i));
            keys.extend(key);
        }
        let mut ctx = Self {
            t,
            per_user: k,
            hits,
            keys,
            task: Vec::new(),
            width: tam.config.task_width(),
            cold,
        };
        ctx.refresh(library, tam)?;
        Ok(ctx)
    }

    /// Recomputes the pair features after the relevance model changed.
    pub fn refresh(&mut self, library: &SubgraphLibrary, tam: &TamParams) -> Result<(), RetrievalError> {
        let d = library.dim();
        if d != tam.config.dim {
            return Err(RetrievalError::Width {
                table: d,
                model: tam.config.dim,
            });
        }
        self.task.clear();
        if self.per_user == 0 {
            return Ok(());
        }
        let users = self.cold.len();
        for chunk in (0..users).collect::<Vec<_>>().chunks(256) {
            let pairs: Vec<(&[f32], &[f32])> = chunk
                .iter()
                .flat_map(|&u| {
                    let key = &self.keys[u * d..(u + 1) * d];
                    self.hits[u * self.per_user..(u + 1) * self.per_user]
                        .iter()
                        .map(move |&h| (key, library.key(h)))
                })
                .collect();
            self.task.extend(tam::task_features(&PairBatch::from_rows(&pairs, vec![])?, tam)?);
        }
        Ok(())
    }

    pub fn user_count(&self) -> usize {
        self.cold.len()
    }

    pub fn per_user(&self) -> usize {
        self.per_user
    }

    fn rows(&self, user: u32) -> Range<usize> {
        let u = user as usize;
        u * self.per_user..(u + 1) * self.per_user
    }

    /// Library entries retrieved for `user`, nearest first.
    pub fn hits(&self, user: u32) -> &[usize] {
        &self.hits[self.rows(user)]
    }

    pub fn is_cold(&self, user: u32) -> bool {
        self.cold[user as usize]
    }

    fn task_row(&self, row: usize) -> &[f64] {
        &self.task[row * self.width..(row + 1) * self.width]
    }

    /// Relevance scores of every retrieved pair under `tam`'s head.
    pub fn scores(&self, tam: &TamParams) -> Result<Vec<f64>, RetrievalError> {
        if self.task.is_empty() {
            return Ok(Vec::new());
        }
        let rows = self.task.len() / self.width;
        let mut tape = Tape::new();
        let bound = tam.params.bind(&mut tape, Some(&[]))?;
        let fwd = TamForward {
            config: &tam.config,
            bound: &bound,
        };
        let h = tape.leaf(rows, self.width, self.task.clone(), false);
        let s = fwd.head(&mut tape, h)?;
        Ok(tape.value(s).to_vec())
    }

    /// Per user: the top-`m` `(row, score)` pairs.
    pub fn selections(&self, tam: &TamParams, m: usize) -> Result<Vec<Vec<(usize, f64)>>, RetrievalError> {
        let scores = self.scores(tam)?;
        let m = m.min(self.per_user);
        Ok((0..self.user_count() as u32)
            .map(|u| {
                let r = self.rows(u);
                select_topm(&scores[r.clone()], m)
                    .into_iter()
                    .map(|j| (r.start + j, scores[r.start + j]))
                    .collect()
            })
            .collect())
    }

    pub fn entry_of_row(&self, row: usize) -> usize {
        self.hits[row]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub drop_rate: f64,
    pub hop: usize,
    pub cap: usize,
    /// Train every relevance-model parameter instead of the scoring head only.
    pub unfreeze_tam: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            drop_rate: 0.5,
            hop: 2,
            cap: 256,
            unfreeze_tam: false,
        }
    }
}

/// Model state after fine-tuning on snapshot `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepState {
    pub t: usize,
    pub embeddings: Tensor,
    pub beta: f64,
    pub tam: TamParams,
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOutcome {
    pub steps: Vec<StepState>,
}

impl FinetuneOutcome {
    pub fn step(&self, t: usize) -> Result<&StepState, RetrievalError> {
        self.steps.iter().find(|s| s.t == t).ok_or(RetrievalError::MissingStep(t))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let ts: Vec<String> = self.steps.iter().map(|s| s.t.to_string()).collect();
        let mut ck = Checkpoint::new("finetune").with_meta("steps", ts.join(","));
        if let Some(s) = self.steps.first() {
            ck = ck.with_meta("tam_config", toml::to_string(&s.tam.config).expect("plain config"));
        }
        for s in &self.steps {
            let p = format!("step{}", s.t);
            ck.meta.insert(format!("{p}.beta"), format!("{:?}", s.beta));
            ck.meta.insert(
                format!("{p}.losses"),
                s.epoch_losses.iter().map(|l| format!("{l:?}")).collect::<Vec<_>>().join(","),
            );
            ck.push_array(format!("{p}.{EMBEDDINGS}"), s.embeddings.clone());
            for (name, t) in s.tam.params.iter() {
                ck.push_array(format!("{p}.tam.{name}"), t.clone());
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, RetrievalError> {
        ck.expect_kind("finetune")?;
        let bad = |key: &str, message: String| CheckpointError::BadMeta {
            key: key.to_string(),
            message,
        };
        let list = ck.meta_str("steps")?;
        let mut steps = Vec::new();
        if list.is_empty() {
            return Ok(Self { steps });
        }
        let config: tam::TamConfig =
            toml::from_str(ck.meta_str("tam_config")?).map_err(|e| bad("tam_config", e.to_string()))?;
        for t in list.split(',') {
            let t: usize = t.parse().map_err(|e: std::num::ParseIntError| bad("steps", e.to_string()))?;
            let p = format!("step{t}");
            let prefix = format!("{p}.tam.");
            let mut params = ParamSet::new();
            for (name, tensor) in &ck.arrays {
                if let Some(rest) = name.strip_prefix(&prefix) {
                    params.insert(rest, tensor.clone());
                }
            }
            let losses = ck.meta_str(&format!("{p}.losses"))?;
            let epoch_losses = if losses.is_empty() {
                Vec::new()
            } else {
                losses
                    .split(',')
                    .map(|v| v.parse().map_err(|e: std::num::ParseFloatError| bad("losses", e.to_string())))
                    .collect::<Result<_, _>>()?
            };
            steps.push(StepState {
                t,
                embeddings: ck.array(&format!("{p}.{EMBEDDINGS}"))?.clone(),
                beta: ck.meta_parse(&format!("{p}.beta"))?,
                tam: TamParams {
                    config: config.clone(),
                    params,
                },
                epoch_losses,
            });
        }
        Ok(Self { steps })
    }
}

/// Sparse `[rows x N]` pooling matrix for the selected library entries.
fn selection_pool(entries: &[usize], pools: &[Vec<(usize, f64)>], node_count: usize) -> SparseMatrix {
    let t = entries
        .iter()
        .enumerate()
        .flat_map(|(r, &e)| pools[e].iter().map(move |&(c, w)| (r, c, w)))
        .collect();
    SparseMatrix::from_triplets(entries.len(), node_count, t)
}

/// Inputs shared by every batch of one epoch.
struct EpochInputs<'a> {
    ctx: &'a QueryContext,
    selections: &'a [Vec<(usize, f64)>],
    pools: &'a [Vec<(usize, f64)>],
    fusion: &'a FusionConfig,
}

/// Fused `[B x d]` user rows for the batch's users.
fn fused_rows(
    tape: &mut Tape,
    x: Var,
    users: Var,
    beta: Var,
    fwd: &TamForward<'_>,
    batch: &[Triplet],
    inp: &EpochInputs<'_>,
) -> Result<Var, TensorError> {
    let (n, d) = tape.shape(x);
    let m = inp.selections.first().map_or(0, Vec::len);
    let b = batch.len();
    let mut rows = Vec::with_capacity(b * m);
    for t in batch {
        rows.extend(inp.selections[t.user as usize].iter().map(|&(r, _)| r));
    }
    let width = inp.ctx.width;
    let task: Vec<f64> = rows.iter().flat_map(|&r| inp.ctx.task_row(r).iter().copied()).collect();
    let task = tape.leaf(rows.len(), width, task, false);
    let entries: Vec<usize> = rows.iter().map(|&r| inp.ctx.entry_of_row(r)).collect();
    let hm = tape.spmm(Rc::new(selection_pool(&entries, inp.pools, n)), x)?;
    let alpha = match inp.fusion.alpha {
        AlphaMode::Uniform => tape.leaf(b, m, vec![1.0 / m as f64; b * m], false),
        AlphaMode::Softmax => {
            let s = fwd.head(tape, task)?;
            let cols = (0..m)
                .map(|j| tape.gather_rows(s, (0..b).map(|i| i * m + j).collect()))
                .collect::<Result<Vec<_>, _>>()?;
            let logits = tape.concat_cols(&cols)?;
            let logits = tape.scale(logits, 1.0 / inp.fusion.temperature)?;
            tape.softmax_rows(logits)?
        }
    };
    let ones = tape.leaf(1, d, vec![1.0; d], false);
    let mut h_rag = None;
    for j in 0..m {
        let a = tape.slice_cols(alpha, j, j + 1)?;
        let a = tape.matmul(a, ones)?;
        let h = tape.gather_rows(hm, (0..b).map(|i| i * m + j).collect())?;
        let term = tape.mul(a, h)?;
        h_rag = Some(match h_rag {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    match h_rag {
        Some(h) => fuse_on_tape(tape, users, h, beta),
        None => Ok(users),
    }
}

/// Sequential fine-tuning over snapshots `split..T−1`, each step training on
/// `G_t` and leaving a state to be tested on `G_{t+1}`. Embeddings, the
/// gate and the trainable relevance parameters carry over between steps.
pub fn finetune(
    graph: &DynamicGraph,
    pretrained: &EmbeddingTable,
    library: &SubgraphLibrary,
    tam: &TamParams,
    fusion: &FusionConfig,
    cfg: &FinetuneConfig,
    run_seed: u64,
) -> Result<FinetuneOutcome, RetrievalError> {
    fusion.validate()?;
    let split = graph.pretrain_split();
    if graph.len() < split + 2 {
        return Err(RetrievalError::NoTestSnapshots {
            snapshots: graph.len(),
            split,
        });
    }
    let enabled = fusion.enabled();
    if enabled && pretrained.dim() != tam.config.dim {
        return Err(RetrievalError::Width {
            table: pretrained.dim(),
            model: tam.config.dim,
        });
    }
    let layers = pretrained.layers();
    let user_count = graph.user_count();
    let mut main = ParamSet::new();
    main.insert(EMBEDDINGS, pretrained.data().clone());
    main.insert(BETA, Tensor::from_f64(vec![1, 1], &[fusion.beta_init])?);
    let mut tam = tam.clone();
    let mut opt_main = Optimizer::new(cfg.optimizer, cfg.lr, 0.0);
    let mut opt_tam = Optimizer::new(cfg.optimizer, cfg.lr, 0.0);
    let main_trainable: &[&str] = if enabled { &[EMBEDDINGS, BETA] } else { &[EMBEDDINGS] };
    let tam_trainable: Option<&[&str]> = if cfg.unfreeze_tam { None } else { Some(&SCORE_HEAD) };
    let pools = if enabled { intra_pools(library, layers) } else { Vec::new() };
    let mut steps = Vec::new();
    for t in split..graph.len() - 1 {
        let g_t = graph.snapshot(t);
        let key = seed::mix(run_seed, t as u64);
        let mut ctx = if enabled {
            Some(QueryContext::build(graph, t, library, pretrained, &tam, fusion, cfg.hop, cfg.cap, run_seed)?)
        } else {
            None
        };
        let mut losses = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let perturbed = edge_perturb(g_t, cfg.drop_rate, seed::mix(key, epoch as u64))?;
            let op = graph_operator(&perturbed);
            let mut rng = seed::rng_keyed(key, "sampling", epoch as u64);
            if cfg.unfreeze_tam && epoch > 0 {
                if let Some(c) = ctx.as_mut() {
                    c.refresh(library, &tam)?;
                }
            }
            let selections = match &ctx {
                Some(c) => c.selections(&tam, fusion.top_m)?,
                None => Vec::new(),
            };
            let triplets = sample_triplets(g_t, g_t, &mut rng);
            if triplets.is_empty() {
                continue;
            }
            let mut total = 0.0;
            for batch in triplets.chunks(cfg.batch_size.max(1)) {
                let mut tape = Tape::new();
                let bm = main.bind(&mut tape, Some(main_trainable))?;
                let bt = if enabled { Some(tam.params.bind(&mut tape, tam_trainable)?) } else { None };
                let fwd = bt.as_ref().map(|bound| TamForward {
                    config: &tam.config,
                    bound,
                });
                let e = bm.var(EMBEDDINGS);
                let x = propagate_mean(&mut tape, &op, e, layers)?;
                let (u, _, _) = gather_triplets(&mut tape, x, user_count, batch)?;
                let fused = match (&ctx, &fwd) {
                    (Some(c), Some(f)) => {
                        let inp = EpochInputs {
                            ctx: c,
                            selections: &selections,
                            pools: &pools,
                            fusion,
                        };
                        fused_rows(&mut tape, x, u, bm.var(BETA), f, batch, &inp)?
                    }
                    _ => u,
                };
                let terms = finetune_losses(&mut tape, fused, x, e, user_count, batch, fwd.as_ref(), fusion)?;
                total += tape.scalar(terms.total);
                let grads = tape.backward(terms.total)?;
                opt_main.step(&mut main, &bm.gradients(&grads))?;
                if let Some(bound) = &bt {
                    opt_tam.step(&mut tam.params, &bound.gradients(&grads))?;
                }
            }
            let mean = total / triplets.len() as f64;
            log::debug!("finetune t={t} epoch {epoch}: loss {mean:.6}");
            losses.push(mean);
        }
        steps.push(StepState {
            t,
            embeddings: main.get(EMBEDDINGS).expect("inserted").clone(),
            beta: main.get(BETA).expect("inserted").data()[0] as f64,
            tam: tam.clone(),
            epoch_losses: losses,
        });
    }
    Ok(FinetuneOutcome { steps })
}

/// Ranked items for one user.
#[derive(Clone, Debug, PartialEq)]
pub struct Recommendation {
    pub user: u32,
    pub items: Vec<(u32, f64)>,
    /// Popularity fallback for a user without history.
    pub cold: bool,
}

/// Everything needed to rank items after fine-tuning step `t`.
pub struct Recommender {
    pub t: usize,
    history: BipartiteGraph,
    users: Vec<f64>,
    items: Vec<f64>,
    dim: usize,
    popularity: Vec<u32>,
}

impl Recommender {
    /// Propagates the step's embeddings over `G_t` and fuses every user.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        graph: &DynamicGraph,
        state: &StepState,
        pretrained: &EmbeddingTable,
        library: &SubgraphLibrary,
        fusion: &FusionConfig,
        hop: usize,
        cap: usize,
        run_seed: u64,
    ) -> Result<Self, RetrievalError> {
        let t = state.t;
        let (nu, ni) = (graph.user_count(), graph.item_count());
        let table = EmbeddingTable::new(nu, ni, pretrained.layers(), state.embeddings.clone())?;
        let x = temporal_forward(&table, graph.snapshot(t))?;
        let d = x.dim();
        let mut users: Vec<f64> = x.user_embeddings().to_f64();
        if fusion.enabled() {
            let ctx = QueryContext::build(graph, t, library, pretrained, &state.tam, fusion, hop, cap, run_seed)?;
            for (u, sel) in ctx.selections(&state.tam, fusion.top_m)?.into_iter().enumerate() {
                let sgs: Vec<&Subgraph> = sel.iter().map(|&(r, _)| library.value(ctx.entry_of_row(r))).collect();
                let scores: Vec<f64> = sel.iter().map(|&(_, s)| s).collect();
                let h_rag = aggregate_retrieved(&sgs, &scores, &x, fusion)?;
                let row = &mut users[u * d..(u + 1) * d];
                let fused = fuse_query(row, &h_rag, state.beta)?;
                row.copy_from_slice(&fused);
            }
        }
        let history = graph.history(t);
        let mut popularity: Vec<u32> = (0..ni as u32).collect();
        popularity.sort_by_key(|&i| (std::cmp::Reverse(history.users_of(i).len()), i));
        Ok(Self {
            t,
            history,
            users,
            items: x.item_embeddings().to_f64(),
            dim: d,
            popularity,
        })
    }

    pub fn user_vector(&self, user: u32) -> &[f64] {
        let u = user as usize;
        &self.users[u * self.dim..(u + 1) * self.dim]
    }

    /// Top `k` items by dot product, excluding items seen up to `t`;
    /// ties by item index.
    pub fn recommend(&self, user: u32, k: usize) -> Result<Recommendation, RetrievalError> {
        if user as usize >= self.history.user_count() {
            return Err(RetrievalError::UnknownUser(user));
        }
        let seen = self.history.items_of(user);
        if seen.is_empty() {
            let items = self
                .popularity
                .iter()
                .take(k)
                .map(|&i| (i, self.history.users_of(i).len() as f64))
                .collect();
            return Ok(Recommendation { user, items, cold: true });
        }
        let q = self.user_vector(user);
        let mut scored: Vec<(u32, f64)> = (0..self.history.item_count() as u32)
            .filter(|i| seen.binary_search(i).is_err())
            .map(|i| {
                let row = &self.items[i as usize * self.dim..(i as usize + 1) * self.dim];
                (i, q.iter().zip(row).map(|(a, b)| a * b).sum())
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(Recommendation { user, items: scored, cold: false })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn topm_orders_by_score_then_position() {
        assert_eq!(select_topm(&[0.1, 0.9, 0.5, 0.9], 3), vec![1, 3, 2]);
        assert_eq!(select_topm(&[0.3, 0.2], 2), vec![0, 1]);
    }

    #[test]
    fn softmax_alpha_hand_case() {
        let a = alpha_weights(&[2.0, 0.0], AlphaMode::Softmax, 1.0);
        assert_abs_diff_eq!(a[0], 0.880_797_077_977_882_3, epsilon = 1e-12);
        assert_abs_diff_eq!(a[1], 0.119_202_922_022_117_7, epsilon = 1e-12);
        assert_eq!(alpha_weights(&[5.0, -1.0], AlphaMode::Uniform, 1.0), vec![0.5, 0.5]);
    }

    #[test]
    fn gate_limits() {
        let (q, r) = ([1.0, -2.0], [3.0, 4.0]);
        assert_eq!(fuse_query(&q, &r, 0.0).unwrap(), vec![2.0, 1.0]);
        assert_eq!(fuse_query(&q, &r, 800.0).unwrap(), q.to_vec());
        assert_eq!(fuse_query(&q, &r, -800.0).unwrap(), r.to_vec());
        assert!(fuse_query(&q, &[1.0], 0.0).is_err());
    }

    #[test]
    fn tape_fusion_matches_plain() {
        let mut tape = Tape::new();
        let q = tape.leaf(2, 2, vec![1.0, -2.0, 0.5, 0.0], false);
        let r = tape.leaf(2, 2, vec![3.0, 4.0, -1.0, 2.0], false);
        let b = tape.leaf(1, 1, vec![0.7], false);
        let f = fuse_on_tape(&mut tape, q, r, b).unwrap();
        let out = tape.value(f).to_vec();
        let row0 = fuse_query(&[1.0, -2.0], &[3.0, 4.0], 0.7).unwrap();
        let row1 = fuse_query(&[0.5, 0.0], &[-1.0, 2.0], 0.7).unwrap();
        for (a, b) in out.iter().zip(row0.iter().chain(&row1)) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn config_bounds() {
        assert!(FusionConfig::default().validate().is_ok());
        let bad = FusionConfig {
            top_m: 6,
            ..FusionConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = FusionConfig {
            temperature: 0.0,
            ..FusionConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_embeddings_give_log2_per_triplet() {
        let mut tape = Tape::new();
        let x = tape.leaf(4, 3, vec![0.0; 12], true);
        let batch = [Triplet { user: 0, pos: 0, neg: 1 }, Triplet { user: 1, pos: 1, neg: 0 }];
        let (u, _, _) = gather_triplets(&mut tape, x, 2, &batch).unwrap();
        let terms = finetune_losses(&mut tape, u, x, x, 2, &batch, None, &FusionConfig::default()).unwrap();
        assert_abs_diff_eq!(tape.scalar(terms.bpr), 2.0 * std::f64::consts::LN_2, epsilon = 1e-12);
        assert_eq!(tape.scalar(terms.reg), 0.0);
        assert!(terms.mrl.is_none());
    }
}
