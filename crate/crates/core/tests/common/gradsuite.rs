//! Finite-difference checks for every tape operation and every composite
//! training loss. Each entry is `(name, worst relative error)`.

use std::rc::Rc;

use dgrec::encoder::{bpr_loss, gather_triplets, pooling_matrix, propagate_mean, reg_loss, gconv_operator, Triplet};
use dgrec::graph::{BipartiteGraph, Node, Subgraph};
use dgrec::retrieval::{finetune_losses, fuse_on_tape, AlphaMode, FusionConfig, BETA};
use dgrec::tam::{batch_loss, biscl_loss, PairExample, TamConfig, TamForward, TamParams, SCORE_HEAD};
use dgrec::tensor::{grad_check, grad_check_params, ParamSet, SparseMatrix, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// `Σ out ⊙ W` with fixed random `W`, so every output coordinate matters.
fn project(t: &mut Tape, out: Var, salt: u64) -> Result<Var, TensorError> {
    let (r, c) = t.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + salt);
    let w = t.leaf(r, c, randn(&mut rng, r * c), false);
    let p = t.mul(out, w)?;
    t.sum(p)
}

type Unary = fn(&mut Tape, Var) -> Result<Var, TensorError>;

fn op_checks(out: &mut Vec<(String, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = randn(&mut rng, 12);
    let b34 = randn(&mut rng, 12);
    let b43 = randn(&mut rng, 12);
    let row = randn(&mut rng, 4);
    let positive: Vec<f64> = a.iter().map(|x| x.abs() + 0.2).collect();

    let mut check = |name: &str, shape: (usize, usize), point: &[f64], f: &dyn Fn(&mut Tape, Var) -> Result<Var, TensorError>| {
        let salt = out.len() as u64;
        let err = grad_check(|t, x| { let y = f(t, x)?; project(t, y, salt) }, shape, point, STEP).unwrap();
        out.push((name.to_string(), err));
    };

    let konst = |t: &mut Tape, r: usize, c: usize, v: &[f64]| t.leaf(r, c, v.to_vec(), true);
    check("matmul.lhs", (3, 4), &a, &|t, x| { let b = konst(t, 4, 3, &b43); t.matmul(x, b) });
    check("matmul.rhs", (4, 3), &a, &|t, x| { let b = konst(t, 3, 4, &b34); t.matmul(b, x) });
    check("add", (3, 4), &a, &|t, x| { let b = konst(t, 3, 4, &b34); t.add(b, x) });
    check("sub.lhs", (3, 4), &a, &|t, x| { let b = konst(t, 3, 4, &b34); t.sub(x, b) });
    check("sub.rhs", (3, 4), &a, &|t, x| { let b = konst(t, 3, 4, &b34); t.sub(b, x) });
    check("mul", (3, 4), &a, &|t, x| { let b = konst(t, 3, 4, &b34); t.mul(b, x) });
    check("mul.self", (3, 4), &a, &|t, x| t.mul(x, x));
    check("add_bias.input", (3, 4), &a, &|t, x| { let b = konst(t, 1, 4, &row); t.add_bias(x, b) });
    check("add_bias.bias", (1, 4), &row, &|t, x| { let m = konst(t, 3, 4, &b34); t.add_bias(m, x) });
    check("cosine_rows.lhs", (3, 4), &a, &|t, x| { let b = konst(t, 3, 4, &b34); t.cosine_rows(x, b) });
    check("cosine_rows.rhs", (3, 4), &a, &|t, x| { let b = konst(t, 3, 4, &b34); t.cosine_rows(b, x) });
    check("squared_error.lhs", (3, 4), &a, &|t, x| { let b = konst(t, 3, 4, &b34); t.squared_error(x, b) });
    check("squared_error.rhs", (3, 4), &a, &|t, x| { let b = konst(t, 3, 4, &b34); t.squared_error(b, x) });
    let unary: [(&str, Unary); 11] = [
        ("transpose", |t, x| t.transpose(x)),
        ("softmax_rows", |t, x| t.softmax_rows(x)),
        ("relu", |t, x| t.relu(x)),
        ("sigmoid", |t, x| t.sigmoid(x)),
        ("log_sigmoid", |t, x| t.log_sigmoid(x)),
        ("exp", |t, x| t.exp(x)),
        ("layer_norm", |t, x| t.layer_norm(x)),
        ("sum", |t, x| t.sum(x)),
        ("mean", |t, x| t.mean(x)),
        ("row_sum", |t, x| t.row_sum(x)),
        ("scale", |t, x| t.scale(x, -2.5)),
    ];
    for (name, f) in unary {
        check(name, (3, 4), &a, &f);
    }
    check("log", (3, 4), &positive, &|t, x| t.log(x));
    check("add_scalar", (3, 4), &a, &|t, x| t.add_scalar(x, 0.75));
    check("concat_cols", (3, 4), &a, &|t, x| { let b = konst(t, 3, 4, &b34); t.concat_cols(&[b, x, x]) });
    check("concat_rows", (3, 4), &a, &|t, x| { let b = konst(t, 3, 4, &b34); t.concat_rows(&[x, b, x]) });
    check("slice_cols", (3, 4), &a, &|t, x| t.slice_cols(x, 1, 3));
    check("gather_rows", (3, 4), &a, &|t, x| t.gather_rows(x, vec![2, 0, 2, 1]));
    let s = Rc::new(SparseMatrix::from_triplets(
        4,
        3,
        vec![(0, 0, 0.5), (0, 2, -1.0), (1, 1, 2.0), (3, 0, 0.25), (3, 2, 1.5)],
    ));
    check("spmm", (3, 4), &a, &|t, x| t.spmm(Rc::clone(&s), x));
}

fn small_graph() -> BipartiteGraph {
    BipartiteGraph::from_edges(4, 5, [(0, 0), (0, 1), (1, 1), (1, 2), (2, 3), (3, 3), (3, 4), (2, 0)]).unwrap()
}

fn triplets() -> Vec<Triplet> {
    vec![
        Triplet { user: 0, pos: 1, neg: 3 },
        Triplet { user: 1, pos: 2, neg: 4 },
        Triplet { user: 2, pos: 0, neg: 1 },
        Triplet { user: 3, pos: 4, neg: 2 },
    ]
}

fn record(out: &mut Vec<(String, f64)>, prefix: &str, errs: std::collections::BTreeMap<String, f64>) {
    out.extend(errs.into_iter().map(|(k, v)| (format!("{prefix}[{k}]"), v)));
}

fn small_tam() -> TamParams {
    let cfg = TamConfig { dim: 8, heads: 2, layers: 2, d_hid: 4, ffn: 8, score_hidden: 6, ..Default::default() };
    TamParams::init(cfg, 3).unwrap()
}

fn loss_checks(out: &mut Vec<(String, f64)>) {
    let g = small_graph();
    let (nu, d) = (g.user_count(), 8);
    let n = g.node_count();
    let op = Rc::new(gconv_operator(&g.adjacency_matrix()));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut emb = ParamSet::new();
    emb.insert("e", Tensor::from_f64(vec![n, d], &randn(&mut rng, n * d)).unwrap());
    let batch = triplets();

    let errs = grad_check_params(
        |t, b| {
            let x = propagate_mean(t, &op, b.var("e"), 3)?;
            let (u, p, ng) = gather_triplets(t, x, nu, &batch)?;
            let l = bpr_loss(t, u, p, ng)?;
            let r = reg_loss(t, b.var("e"), nu, &batch)?;
            let r = t.scale(r, 0.1)?;
            t.add(l, r)
        },
        &emb,
        &["e"],
        STEP,
        usize::MAX,
    )
    .unwrap();
    record(out, "bpr+reg", errs);

    // Relevance-model objective over every parameter group.
    let tam = small_tam();
    let examples: Vec<PairExample> = (0..6)
        .map(|i| PairExample {
            query: randn(&mut rng, 8).into_iter().map(|x| x as f32).collect(),
            candidate: randn(&mut rng, 8).into_iter().map(|x| x as f32).collect(),
            target: [0.3, -0.1, 0.8, 0.3, -0.6, 0.05][i],
        })
        .collect();
    let rows: Vec<&PairExample> = examples.iter().collect();
    let groups: Vec<String> = tam.params.names().map(str::to_string).collect();
    let groups: Vec<&str> = groups.iter().map(String::as_str).collect();
    for (label, rho) in [("biscl", 0.6), ("ocl", 1.0), ("mtl", 0.0)] {
        let errs = grad_check_params(
            |t, b| {
                batch_loss(t, &tam, b, &rows, rho, 0.7).map(|terms| terms.total).map_err(|e| TensorError::ShapeMismatch {
                    op: "batch_loss",
                    detail: e.to_string(),
                })
            },
            &tam.params,
            &groups,
            STEP,
            24,
        )
        .unwrap();
        record(out, label, errs);
    }

    // Bi-level loss directly against the scores.
    let scores = randn(&mut rng, 6);
    let targets = [0.3, -0.1, 0.8, 0.3, -0.6, 0.05];
    let err = grad_check(
        |t, s| biscl_loss(t, s, &targets, 0.6, 0.5).map(|x| x.total).map_err(|e| TensorError::ShapeMismatch { op: "biscl", detail: e.to_string() }),
        (6, 1),
        &scores,
        STEP,
    )
    .unwrap();
    out.push(("biscl[scores]".into(), err));

    // Fine-tuning objective: fusion, gate, margin term and the score head.
    let mut params = tam.params.clone();
    params.insert("e", emb.get("e").unwrap().clone());
    params.insert(BETA, Tensor::from_f64(vec![1, 1], &[0.3]).unwrap());
    let sgs: Vec<Subgraph> = [Node::User(1), Node::Item(3), Node::User(3)]
        .into_iter()
        .map(|c| dgrec::graph::extract_khop(&g, c, 2, 256, 0).unwrap())
        .collect();
    let pool = Rc::new(pooling_matrix(&sgs, nu, n, 1, 3));
    let task = randn(&mut rng, batch.len() * 2 * tam.config.task_width());
    let fusion = FusionConfig { top_m: 2, lambda: 0.5, mu: 0.01, alpha: AlphaMode::Softmax, temperature: 0.8, gamma: 1.0, ..Default::default() };
    let mut groups: Vec<&str> = vec!["e", BETA];
    groups.extend(SCORE_HEAD);
    let errs = grad_check_params(
        |t, b| {
            let fwd = TamForward { config: &tam.config, bound: b };
            let e = b.var("e");
            let x = propagate_mean(t, &op, e, 3)?;
            let (u, _, _) = gather_triplets(t, x, nu, &batch)?;
            let bsz = batch.len();
            let task = t.leaf(bsz * 2, tam.config.task_width(), task.clone(), false);
            let s = fwd.head(t, task)?;
            let c0 = t.gather_rows(s, (0..bsz).map(|i| 2 * i).collect())?;
            let c1 = t.gather_rows(s, (0..bsz).map(|i| 2 * i + 1).collect())?;
            let logits = t.concat_cols(&[c0, c1])?;
            let logits = t.scale(logits, 1.0 / fusion.temperature)?;
            let alpha = t.softmax_rows(logits)?;
            let hm = t.spmm(Rc::clone(&pool), x)?;
            let ones = t.leaf(1, d, vec![1.0; d], false);
            let mut h_rag = None;
            for j in 0..2 {
                let a = t.slice_cols(alpha, j, j + 1)?;
                let a = t.matmul(a, ones)?;
                let h = t.gather_rows(hm, (0..bsz).map(|i| (i + j) % 3).collect())?;
                let term = t.mul(a, h)?;
                h_rag = Some(match h_rag { None => term, Some(acc) => t.add(acc, term)? });
            }
            let fused = fuse_on_tape(t, u, h_rag.unwrap(), b.var(BETA))?;
            Ok(finetune_losses(t, fused, x, e, nu, &batch, Some(&fwd), &fusion)?.total)
        },
        &params,
        &groups,
        STEP,
        usize::MAX,
    )
    .unwrap();
    record(out, "finetune", errs);
}

/// Worst relative error per checked operation or loss parameter group.
pub fn run() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    op_checks(&mut out);
    loss_checks(&mut out);
    out
}
