//! Pair relevance model: a semantic path (multi-head attention over the
//! query and candidate tokens), a structure path (projection, attention
//! layers with residual layer-norm, FFN, normalized pair propagation) and a
//! one-hidden-layer scoring head, trained with the bi-level loss.
//!
//! A batch of `B` pairs is laid out as `2B` token rows: rows `0..B` are
//! query tokens and rows `B..2B` the matching candidate tokens.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::labeling::TaskDataset;
use crate::library::SubgraphLibrary;
use crate::seed;
use crate::tensor::{BoundParams, OptimError, Optimizer, OptimizerKind, ParamSet, SparseMatrix, Tape, Tensor, TensorError, Var};

pub const SCORE_HEAD: [&str; 3] = ["score.w", "score.b", "score.v"];

#[derive(Debug, Error)]
pub enum TamError {
    #[error("head count {heads} does not divide width {width}")]
    Heads { heads: usize, width: usize },
    #[error("token width {got} does not match model width {expected}")]
    Width { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("rho must be in [0, 1] and tau positive (rho {rho}, tau {tau})")]
    LossParams { rho: f64, tau: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TamConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_hid: usize,
    pub ffn: usize,
    pub score_hidden: usize,
    pub disable_semantic: bool,
    pub disable_structure: bool,
}

impl Default for TamConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            layers: 2,
            d_hid: 32,
            ffn: 64,
            score_hidden: 64,
            disable_semantic: false,
            disable_structure: false,
        }
    }
}

impl TamConfig {
    pub fn validate(&self) -> Result<(), TamError> {
        for width in [self.dim, self.d_hid] {
            if self.heads == 0 || width % self.heads != 0 {
                return Err(TamError::Heads { heads: self.heads, width });
            }
        }
        Ok(())
    }

    /// Width of the concatenated semantic and structure encodings.
    pub fn task_width(&self) -> usize {
        3 * self.dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TamParams {
    pub config: TamConfig,
    pub params: ParamSet,
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt() as f32;
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect()).expect("sized")
}

fn attention_params(p: &mut ParamSet, rng: &mut impl Rng, prefix: &str, width: usize, heads: usize) {
    let dk = width / heads;
    for h in 0..heads {
        for m in ["wq", "wk", "wv"] {
            p.insert(format!("{prefix}.h{h}.{m}"), glorot(rng, width, dk));
        }
    }
    p.insert(format!("{prefix}.wo"), glorot(rng, width, width));
}

impl TamParams {
    pub fn init(config: TamConfig, run_seed: u64) -> Result<Self, TamError> {
        config.validate()?;
        let mut rng = seed::rng(run_seed, "init-tam");
        let (d, dh) = (config.dim, config.d_hid);
        let mut p = ParamSet::new();
        p.insert("pos", Tensor::new(vec![2, d], (0..2 * d).map(|_| rng.gen_range(-0.1f32..0.1)).collect())?);
        attention_params(&mut p, &mut rng, "sem", d, config.heads);
        p.insert("str.w_in", glorot(&mut rng, d, dh));
        p.insert("str.b_in", Tensor::zeros(vec![1, dh]));
        for l in 0..config.layers {
            attention_params(&mut p, &mut rng, &format!("str.l{l}"), dh, config.heads);
        }
        p.insert("str.ffn.w1", glorot(&mut rng, dh, config.ffn));
        p.insert("str.ffn.b1", Tensor::zeros(vec![1, config.ffn]));
        p.insert("str.ffn.w2", glorot(&mut rng, config.ffn, dh));
        p.insert("str.ffn.b2", Tensor::zeros(vec![1, dh]));
        p.insert("str.w_out", glorot(&mut rng, dh, d));
        p.insert("score.w", glorot(&mut rng, config.task_width(), config.score_hidden));
        p.insert("score.b", Tensor::zeros(vec![1, config.score_hidden]));
        p.insert("score.v", glorot(&mut rng, config.score_hidden, 1));
        Ok(Self { config, params: p })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new("tam")
            .with_meta("dim", c.dim)
            .with_meta("heads", c.heads)
            .with_meta("layers", c.layers)
            .with_meta("d_hid", c.d_hid)
            .with_meta("ffn", c.ffn)
            .with_meta("score_hidden", c.score_hidden)
            .with_meta("disable_semantic", c.disable_semantic)
            .with_meta("disable_structure", c.disable_structure);
        for (name, t) in self.params.iter() {
            ck.push_array(name, t.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TamError> {
        ck.expect_kind("tam")?;
        let config = TamConfig {
            dim: ck.meta_parse("dim")?,
            heads: ck.meta_parse("heads")?,
            layers: ck.meta_parse("layers")?,
            d_hid: ck.meta_parse("d_hid")?,
            ffn: ck.meta_parse("ffn")?,
            score_hidden: ck.meta_parse("score_hidden")?,
            disable_semantic: ck.meta_parse("disable_semantic")?,
            disable_structure: ck.meta_parse("disable_structure")?,
        };
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, t) in &ck.arrays {
            params.insert(name.clone(), t.clone());
        }
        Ok(Self { config, params })
    }
}

/// Query and candidate tokens with relevance targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub query: Tensor,
    pub candidate: Tensor,
    pub targets: Vec<f64>,
}

impl PairBatch {
    pub fn new(query: Tensor, candidate: Tensor, targets: Vec<f64>) -> Result<Self, TamError> {
        let (bq, dq) = query.matrix_dims()?;
        let (bc, dc) = candidate.matrix_dims()?;
        if bq != bc || dq != dc || (!targets.is_empty() && targets.len() != bq) {
            return Err(TamError::Tensor(TensorError::ShapeMismatch {
                op: "pair_batch",
                detail: format!("query {bq}x{dq}, candidate {bc}x{dc}, {} targets", targets.len()),
            }));
        }
        if bq == 0 {
            return Err(TamError::EmptyBatch);
        }
        Ok(Self { query, candidate, targets })
    }

    /// Builds a batch from row slices.
    pub fn from_rows(pairs: &[(&[f32], &[f32])], targets: Vec<f64>) -> Result<Self, TamError> {
        let d = pairs.first().map(|p| p.0.len()).ok_or(TamError::EmptyBatch)?;
        let q: Vec<f32> = pairs.iter().flat_map(|p| p.0.iter().copied()).collect();
        let c: Vec<f32> = pairs.iter().flat_map(|p| p.1.iter().copied()).collect();
        Self::new(Tensor::new(vec![pairs.len(), d], q)?, Tensor::new(vec![pairs.len(), d], c)?, targets)
    }

    pub fn len(&self) -> usize {
        self.query.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `D⁻¹(A_s + I)` for the complete two-token adjacency, block-diagonal over
/// `b` pairs: every token averages itself with its partner.
pub fn pair_propagation(b: usize) -> SparseMatrix {
    let mut t = Vec::with_capacity(4 * b);
    for i in 0..b {
        for (r, c) in [(i, i), (i, b + i), (b + i, i), (b + i, b + i)] {
            t.push((r, c, 0.5));
        }
    }
    SparseMatrix::from_triplets(2 * b, 2 * b, t)
}

fn token_pool(b: usize) -> SparseMatrix {
    let t = (0..b).flat_map(|i| [(i, i, 0.5), (i, b + i, 0.5)]).collect();
    SparseMatrix::from_triplets(b, 2 * b, t)
}

/// Tape-level forward pass.
pub struct TamForward<'a> {
    pub config: &'a TamConfig,
    pub bound: &'a BoundParams,
}

impl TamForward<'_> {
    /// `h_pos` rows: query tokens plus `P[0]`, candidate tokens plus `P[1]`.
    pub fn tokens(&self, tape: &mut Tape, zq: Var, zr: Var) -> Result<Var, TensorError> {
        let p = self.bound.var("pos");
        let p0 = tape.gather_rows(p, vec![0])?;
        let p1 = tape.gather_rows(p, vec![1])?;
        let q = tape.add_bias(zq, p0)?;
        let r = tape.add_bias(zr, p1)?;
        tape.concat_rows(&[q, r])
    }

    /// Multi-head attention of each token over its own pair.
    fn attention(&self, tape: &mut Tape, x: Var, prefix: &str, width: usize, b: usize) -> Result<Var, TensorError> {
        let heads = self.config.heads;
        let dk = width / heads;
        let query_rows: Vec<usize> = (0..2 * b).map(|i| i % b).collect();
        let cand_rows: Vec<usize> = (0..2 * b).map(|i| b + i % b).collect();
        let ones = tape.leaf(1, dk, vec![1.0; dk], false);
        let inv = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = tape.matmul(x, self.bound.var(&format!("{prefix}.h{h}.wq")))?;
            let k = tape.matmul(x, self.bound.var(&format!("{prefix}.h{h}.wk")))?;
            let v = tape.matmul(x, self.bound.var(&format!("{prefix}.h{h}.wv")))?;
            let kq = tape.gather_rows(k, query_rows.clone())?;
            let kc = tape.gather_rows(k, cand_rows.clone())?;
            let vq = tape.gather_rows(v, query_rows.clone())?;
            let vc = tape.gather_rows(v, cand_rows.clone())?;
            let l0 = tape.mul(q, kq)?;
            let l0 = tape.row_sum(l0)?;
            let l1 = tape.mul(q, kc)?;
            let l1 = tape.row_sum(l1)?;
            let logits = tape.concat_cols(&[l0, l1])?;
            let logits = tape.scale(logits, inv)?;
            let a = tape.softmax_rows(logits)?;
            let a0 = tape.slice_cols(a, 0, 1)?;
            let a1 = tape.slice_cols(a, 1, 2)?;
            let a0 = tape.matmul(a0, ones)?;
            let a1 = tape.matmul(a1, ones)?;
            let o0 = tape.mul(a0, vq)?;
            let o1 = tape.mul(a1, vc)?;
            outs.push(tape.add(o0, o1)?);
        }
        let cat = tape.concat_cols(&outs)?;
        tape.matmul(cat, self.bound.var(&format!("{prefix}.wo")))
    }

    /// `[B x 2d]`: attended query and candidate tokens side by side.
    pub fn semantic(&self, tape: &mut Tape, tokens: Var, b: usize) -> Result<Var, TensorError> {
        let att = self.attention(tape, tokens, "sem", self.config.dim, b)?;
        let q = tape.gather_rows(att, (0..b).collect())?;
        let r = tape.gather_rows(att, (b..2 * b).collect())?;
        tape.concat_cols(&[q, r])
    }

    /// `[B x d]`: propagated FFN output, mean-pooled over the two tokens.
    pub fn structure(&self, tape: &mut Tape, tokens: Var, b: usize) -> Result<Var, TensorError> {
        let bp = self.bound;
        let h = tape.matmul(tokens, bp.var("str.w_in"))?;
        let mut h = tape.add_bias(h, bp.var("str.b_in"))?;
        for l in 0..self.config.layers {
            let att = self.attention(tape, h, &format!("str.l{l}"), self.config.d_hid, b)?;
            let res = tape.add(h, att)?;
            h = tape.layer_norm(res)?;
        }
        let f = tape.matmul(h, bp.var("str.ffn.w1"))?;
        let f = tape.add_bias(f, bp.var("str.ffn.b1"))?;
        let f = tape.relu(f)?;
        let f = tape.matmul(f, bp.var("str.ffn.w2"))?;
        let f = tape.add_bias(f, bp.var("str.ffn.b2"))?;
        let prop = tape.spmm(Rc::new(pair_propagation(b)), f)?;
        let out = tape.matmul(prop, bp.var("str.w_out"))?;
        tape.spmm(Rc::new(token_pool(b)), out)
    }

    /// `[B x 3d]` task features; a disabled path contributes zeros.
    pub fn task_features(&self, tape: &mut Tape, zq: Var, zr: Var) -> Result<Var, TensorError> {
        let b = tape.shape(zq).0;
        let d = self.config.dim;
        let tokens = self.tokens(tape, zq, zr)?;
        let sem = if self.config.disable_semantic {
            tape.leaf(b, 2 * d, vec![0.0; b * 2 * d], false)
        } else {
            self.semantic(tape, tokens, b)?
        };
        let st = if self.config.disable_structure {
            tape.leaf(b, d, vec![0.0; b * d], false)
        } else {
            self.structure(tape, tokens, b)?
        };
        tape.concat_cols(&[sem, st])
    }

    /// `wᵀ ReLU(W h_task + b)` per row, `[B x 1]`.
    pub fn head(&self, tape: &mut Tape, task: Var) -> Result<Var, TensorError> {
        let bp = self.bound;
        let h = tape.matmul(task, bp.var("score.w"))?;
        let h = tape.add_bias(h, bp.var("score.b"))?;
        let h = tape.relu(h)?;
        tape.matmul(h, bp.var("score.v"))
    }

    pub fn score(&self, tape: &mut Tape, zq: Var, zr: Var) -> Result<Var, TensorError> {
        let task = self.task_features(tape, zq, zr)?;
        self.head(tape, task)
    }
}

fn check_width(batch: &PairBatch, params: &TamParams) -> Result<(), TamError> {
    let got = batch.query.shape()[1];
    if got != params.config.dim {
        return Err(TamError::Width {
            expected: params.config.dim,
            got,
        });
    }
    Ok(())
}

fn run<T>(batch: &PairBatch, params: &TamParams, f: impl FnOnce(&mut Tape, &TamForward<'_>, Var, Var) -> Result<T, TensorError>) -> Result<T, TamError> {
    check_width(batch, params)?;
    let mut tape = Tape::new();
    let bound = params.params.bind(&mut tape, Some(&[]))?;
    let fwd = TamForward {
        config: &params.config,
        bound: &bound,
    };
    let zq = tape.constant(&batch.query)?;
    let zr = tape.constant(&batch.candidate)?;
    Ok(f(&mut tape, &fwd, zq, zr)?)
}

pub fn semantic_encode(batch: &PairBatch, params: &TamParams) -> Result<Tensor, TamError> {
    run(batch, params, |tape, fwd, zq, zr| {
        let t = fwd.tokens(tape, zq, zr)?;
        let s = fwd.semantic(tape, t, batch.len())?;
        Ok(tape.to_tensor(s))
    })
}

pub fn structure_encode(batch: &PairBatch, params: &TamParams) -> Result<Tensor, TamError> {
    run(batch, params, |tape, fwd, zq, zr| {
        let t = fwd.tokens(tape, zq, zr)?;
        let s = fwd.structure(tape, t, batch.len())?;
        Ok(tape.to_tensor(s))
    })
}

/// Task features `[h_sem ‖ h_str]` per pair, in `f64`.
pub fn task_features(batch: &PairBatch, params: &TamParams) -> Result<Vec<f64>, TamError> {
    run(batch, params, |tape, fwd, zq, zr| {
        let v = fwd.task_features(tape, zq, zr)?;
        Ok(tape.value(v).to_vec())
    })
}

/// Relevance score per pair.
pub fn score(batch: &PairBatch, params: &TamParams) -> Result<Vec<f64>, TamError> {
    run(batch, params, |tape, fwd, zq, zr| {
        let s = fwd.score(tape, zq, zr)?;
        Ok(tape.value(s).to_vec())
    })
}

/// The three loss terms as tape values.
#[derive(Clone, Copy, Debug)]
pub struct BisclTerms {
    pub total: Var,
    pub mtl: Var,
    pub ocl: Var,
}

/// `ρ·L_ocl + (1−ρ)·L_mtl` with `L_mtl` the mean squared error and
/// `L_ocl = log(1 + Σ_{C_k > C_l} exp((s_l − s_k)/τ))`.
pub fn biscl_loss(tape: &mut Tape, scores: Var, targets: &[f64], rho: f64, tau: f64) -> Result<BisclTerms, TamError> {
    if !(0.0..=1.0).contains(&rho) || tau <= 0.0 {
        return Err(TamError::LossParams { rho, tau });
    }
    let b = targets.len();
    if b == 0 {
        return Err(TamError::EmptyBatch);
    }
    let c = tape.leaf(b, 1, targets.to_vec(), false);
    let mtl = tape.squared_error(scores, c)?;
    let (mut ks, mut ls) = (Vec::new(), Vec::new());
    for k in 0..b {
        for l in 0..b {
            if targets[k] > targets[l] {
                ks.push(k);
                ls.push(l);
            }
        }
    }
    let ocl = if ks.is_empty() {
        tape.leaf(1, 1, vec![0.0], false)
    } else {
        let sk = tape.gather_rows(scores, ks)?;
        let sl = tape.gather_rows(scores, ls)?;
        let diff = tape.sub(sl, sk)?;
        let diff = tape.scale(diff, 1.0 / tau)?;
        let e = tape.exp(diff)?;
        let s = tape.sum(e)?;
        let s = tape.add_scalar(s, 1.0)?;
        tape.log(s)?
    };
    let a = tape.scale(ocl, rho)?;
    let m = tape.scale(mtl, 1.0 - rho)?;
    let total = tape.add(a, m)?;
    Ok(BisclTerms { total, mtl, ocl })
}

/// Loss value for plain score and target lists.
pub fn biscl_value(scores: &[f64], targets: &[f64], rho: f64, tau: f64) -> Result<f64, TamError> {
    let mut tape = Tape::new();
    let s = tape.leaf(scores.len(), 1, scores.to_vec(), false);
    let terms = biscl_loss(&mut tape, s, targets, rho, tau)?;
    Ok(tape.scalar(terms.total))
}

/// One resolved `(z_q, z_r, C)` training row.
#[derive(Clone, Debug, PartialEq)]
pub struct PairExample {
    pub query: Vec<f32>,
    pub candidate: Vec<f32>,
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TamTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub rho: f64,
    pub tau: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TamTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            rho: 0.6,
            tau: 1.0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TamEpochLog {
    pub epoch: usize,
    pub mtl: f64,
    pub ocl: f64,
    pub total: f64,
}

/// Loss of `params` on one batch, built on `tape`.
pub fn batch_loss(
    tape: &mut Tape,
    params: &TamParams,
    bound: &BoundParams,
    rows: &[&PairExample],
    rho: f64,
    tau: f64,
) -> Result<BisclTerms, TamError> {
    let d = params.config.dim;
    let b = rows.len();
    for r in rows {
        if r.query.len() != d || r.candidate.len() != d {
            return Err(TamError::Width {
                expected: d,
                got: r.query.len().max(r.candidate.len()),
            });
        }
    }
    let zq = tape.leaf(b, d, rows.iter().flat_map(|r| r.query.iter().map(|&x| x as f64)).collect(), false);
    let zr = tape.leaf(b, d, rows.iter().flat_map(|r| r.candidate.iter().map(|&x| x as f64)).collect(), false);
    let fwd = TamForward {
        config: &params.config,
        bound,
    };
    let s = fwd.score(tape, zq, zr)?;
    let targets: Vec<f64> = rows.iter().map(|r| r.target).collect();
    biscl_loss(tape, s, &targets, rho, tau)
}

/// Minibatch training of every model parameter against the bi-level loss.
pub fn pretrain_tam(
    examples: &[PairExample],
    config: &TamConfig,
    train: &TamTrainConfig,
    run_seed: u64,
) -> Result<(TamParams, Vec<TamEpochLog>), TamError> {
    if examples.is_empty() {
        return Err(TamError::EmptyBatch);
    }
    let mut params = TamParams::init(config.clone(), run_seed)?;
    let mut opt = Optimizer::new(train.optimizer, train.lr, 0.0);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log_rows = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let mut rng = seed::rng_keyed(run_seed, "tam-batches", epoch as u64);
        order.shuffle(&mut rng);
        let (mut mtl, mut ocl, mut total, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(train.batch_size.max(1)) {
            let rows: Vec<&PairExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut tape = Tape::new();
            let bound = params.params.bind(&mut tape, None)?;
            let terms = batch_loss(&mut tape, &params, &bound, &rows, train.rho, train.tau)?;
            mtl += tape.scalar(terms.mtl);
            ocl += tape.scalar(terms.ocl);
            total += tape.scalar(terms.total);
            batches += 1;
            let grads = tape.backward(terms.total)?;
            opt.step(&mut params.params, &bound.gradients(&grads))?;
        }
        let n = batches as f64;
        let row = TamEpochLog {
            epoch,
            mtl: mtl / n,
            ocl: ocl / n,
            total: total / n,
        };
        log::debug!("tam epoch {epoch}: mtl {:.6} ocl {:.6} total {:.6}", row.mtl, row.ocl, row.total);
        log_rows.push(row);
    }
    Ok((params, log_rows))
}

/// Resolves dataset rows into library keys. Rows whose query or candidate
/// center has no library entry are skipped and counted.
pub fn pair_examples(dataset: &TaskDataset, library: &SubgraphLibrary) -> (Vec<PairExample>, usize) {
    let mut out = Vec::with_capacity(dataset.rows.len());
    let mut skipped = 0;
    for row in &dataset.rows {
        match (library.find(row.query_center), library.find(row.candidate_center)) {
            (Some(q), Some(r)) => out.push(PairExample {
                query: library.key(q).to_vec(),
                candidate: library.key(r).to_vec(),
                target: row.c_r,
            }),
            _ => skipped += 1,
        }
    }
    (out, skipped)
}

/// `epoch,l_mtl,l_ocl,l_biscl` lines.
pub fn write_training_log(mut w: impl std::io::Write, rows: &[TamEpochLog]) -> std::io::Result<()> {
    writeln!(w, "epoch,l_mtl,l_ocl,l_biscl")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.epoch, r.mtl, r.ocl, r.total)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small() -> TamConfig {
        TamConfig {
            dim: 4,
            heads: 2,
            layers: 1,
            d_hid: 4,
            ffn: 6,
            score_hidden: 5,
            ..TamConfig::default()
        }
    }

    fn batch(b: usize, d: usize, seed: u64) -> PairBatch {
        let mut rng = seed::rng(seed, "batch");
        let mut draw = || Tensor::new(vec![b, d], (0..b * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let q = draw();
        let c = draw();
        PairBatch::new(q, c, vec![]).unwrap()
    }

    #[test]
    fn pair_propagation_averages() {
        let m = pair_propagation(1).to_dense();
        assert_eq!(m, vec![0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn output_widths() {
        let p = TamParams::init(small(), 0).unwrap();
        let b = batch(3, 4, 1);
        assert_eq!(semantic_encode(&b, &p).unwrap().shape(), &[3, 8]);
        assert_eq!(structure_encode(&b, &p).unwrap().shape(), &[3, 4]);
        assert_eq!(score(&b, &p).unwrap().len(), 3);
    }

    #[test]
    fn identical_tokens_attend_identically() {
        let mut p = TamParams::init(small(), 0).unwrap();
        *p.params.get_mut("pos").unwrap() = Tensor::zeros(vec![2, 4]);
        let row = [0.3f32, -0.2, 0.5, 0.1];
        let b = PairBatch::from_rows(&[(&row, &row)], vec![]).unwrap();
        let s = semantic_encode(&b, &p).unwrap();
        assert_eq!(&s.data()[..4], &s.data()[4..]);
    }

    #[test]
    fn null_head_scores_zero() {
        let mut p = TamParams::init(small(), 0).unwrap();
        *p.params.get_mut("score.v").unwrap() = Tensor::zeros(vec![5, 1]);
        assert!(score(&batch(4, 4, 2), &p).unwrap().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn dead_relu_scores_zero() {
        let mut p = TamParams::init(small(), 0).unwrap();
        *p.params.get_mut("score.w").unwrap() = Tensor::zeros(vec![12, 5]);
        *p.params.get_mut("score.b").unwrap() = Tensor::new(vec![1, 5], vec![-1.0; 5]).unwrap();
        assert!(score(&batch(4, 4, 2), &p).unwrap().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn zero_ffn_gives_zero_structure() {
        let mut p = TamParams::init(small(), 0).unwrap();
        *p.params.get_mut("str.ffn.w2").unwrap() = Tensor::zeros(vec![6, 4]);
        let s = structure_encode(&batch(2, 4, 3), &p).unwrap();
        assert!(s.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_ordered_pair_with_equal_scores() {
        let v = biscl_value(&[0.5, 0.5], &[1.0, 0.0], 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(v, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn no_ordered_pairs_gives_zero_ocl() {
        let v = biscl_value(&[0.1, 0.9], &[0.3, 0.3], 1.0, 1.0).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn perfect_fit_limit() {
        let c = [30.0, 20.0, 10.0];
        let v = biscl_value(&c, &c, 0.5, 1.0).unwrap();
        assert!(v > 0.0 && v < 1e-4, "{v}");
    }

    #[test]
    fn bad_loss_params_rejected() {
        assert!(biscl_value(&[0.0], &[0.0], 1.5, 1.0).is_err());
        assert!(biscl_value(&[0.0], &[0.0], 0.5, 0.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_scores() {
        let p = TamParams::init(small(), 4).unwrap();
        let back = TamParams::from_checkpoint(&Checkpoint::from_bytes(&p.to_checkpoint().to_bytes()).unwrap()).unwrap();
        let b = batch(3, 4, 9);
        assert_eq!(score(&b, &p).unwrap(), score(&b, &back).unwrap());
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = TamConfig {
            heads: 3,
            ..TamConfig::default()
        };
        assert!(matches!(TamParams::init(cfg, 0), Err(TamError::Heads { .. })));
    }
}
