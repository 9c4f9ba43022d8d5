mod common;

use std::collections::BTreeSet;

use common::*;
use dgrec::encoder::{encode_subgraph, encode_subgraph_intra, gconv_operator, temporal_forward, EmbeddingTable};
use dgrec::graph::{extract_khop, BipartiteGraph, Node, Subgraph};
use dgrec::library::{l2_topk, SubgraphLibrary};
use dgrec::metrics::{ndcg_at_k, recall_at_k};
use dgrec::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(rng: &mut ChaCha8Rng, users: usize, items: usize, p: f64) -> BipartiteGraph {
    let mut edges = Vec::new();
    for u in 0..users as u32 {
        for i in 0..items as u32 {
            if rng.gen_bool(p) {
                edges.push((u, i));
            }
        }
    }
    BipartiteGraph::from_edges(users, items, edges).unwrap()
}

#[test]
fn khop_matches_breadth_first_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..40 {
        let g = random_graph(&mut rng, 12, 15, 0.12);
        for k in 1..=3 {
            for center in [Node::User(rng.gen_range(0..12)), Node::Item(rng.gen_range(0..15))] {
                let sg = extract_khop(&g, center, k, usize::MAX, 0).unwrap();
                let got: BTreeSet<Node> = sg.nodes().iter().copied().collect();
                let ball = bfs_ball(&g, center, k);
                assert_eq!(got, ball);
                let induced: BTreeSet<(Node, Node)> = g
                    .edges()
                    .map(|(u, i)| (Node::User(u), Node::Item(i)))
                    .filter(|(a, b)| ball.contains(a) && ball.contains(b))
                    .map(|(a, b)| (a.min(b), a.max(b)))
                    .collect();
                let edges: BTreeSet<(Node, Node)> = sg.global_edges().into_iter().map(|(a, b)| (a.min(b), a.max(b))).collect();
                assert_eq!(edges, induced);
            }
        }
    }
}

#[test]
fn capped_khop_stays_inside_the_ball() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..40 {
        let g = random_graph(&mut rng, 20, 20, 0.2);
        let c = Node::User(rng.gen_range(0..20));
        let sg = extract_khop(&g, c, 2, 6, 9).unwrap();
        assert!(sg.node_count() <= 7);
        assert!(sg.nodes().iter().all(|n| bfs_ball(&g, c, 2).contains(n)));
        assert_eq!(sg.central(), c);
    }
}

pub fn random_library(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (SubgraphLibrary, Vec<Vec<f32>>) {
    let keys: Vec<Vec<f32>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect();
    let flat: Vec<f32> = keys.iter().flatten().copied().collect();
    let values = (0..n).map(|i| Subgraph::singleton(Node::Item(i as u32), 2)).collect();
    let lib = SubgraphLibrary::new(Tensor::new(vec![n, d], flat).unwrap(), values, String::new(), 0).unwrap();
    (lib, keys)
}

#[test]
fn l2_topk_equals_full_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (lib, keys) = random_library(&mut rng, 1000, 32);
    for _ in 0..50 {
        let q: Vec<f32> = (0..32).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let k = rng.gen_range(1..=20);
        let got = l2_topk(&lib, &q, k).unwrap();
        let want = full_scan(&keys, &q, k);
        assert_eq!(got.iter().map(|g| g.0).collect::<Vec<_>>(), want.iter().map(|w| w.0).collect::<Vec<_>>());
        for (g, w) in got.iter().zip(&want) {
            assert!((g.1 - w.1).abs() <= 1e-9 * w.1.max(1.0));
        }
    }
}

#[test]
fn metrics_match_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let items: Vec<u32> = (0..30).collect();
        let users = rng.gen_range(1..6);
        let k = rng.gen_range(1..25);
        let mut preds = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..users {
            let mut p = items.clone();
            p.shuffle(&mut rng);
            p.truncate(rng.gen_range(0..30));
            preds.push(p);
            let n = rng.gen_range(0..8);
            truth.push(items.choose_multiple(&mut rng, n).copied().collect::<BTreeSet<u32>>());
        }
        let (mut r_sum, mut n_sum, mut m) = (0.0, 0.0, 0);
        for (p, t) in preds.iter().zip(&truth) {
            if t.is_empty() {
                continue;
            }
            let (r, n) = reference_user_metrics(p, t, k);
            r_sum += r;
            n_sum += n;
            m += 1;
        }
        let recall = recall_at_k(&preds, &truth, k);
        let ndcg = ndcg_at_k(&preds, &truth, k);
        assert_eq!(recall.users, m);
        let (wr, wn) = if m == 0 { (0.0, 0.0) } else { (r_sum / m as f64, n_sum / m as f64) };
        assert_eq!(recall.value, wr);
        assert_eq!(ndcg.value, wn);
    }
}

#[test]
fn metric_hand_cases() {
    let t = |v: &[u32]| v.iter().copied().collect::<BTreeSet<u32>>();
    assert_eq!(recall_at_k(&[vec![4, 1, 8]], &[t(&[1, 2])], 3).value, 0.5);
    let n = ndcg_at_k(&[vec![9, 2]], &[t(&[2])], 2).value;
    assert_eq!(n, 1.0 / 3f64.log2());
    assert!((n - 0.6309).abs() < 1e-4);
}

fn random_table(rng: &mut ChaCha8Rng, users: usize, items: usize, d: usize, layers: usize) -> EmbeddingTable {
    let n = users + items;
    let data: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    EmbeddingTable::new(users, items, layers, Tensor::new(vec![n, d], data).unwrap()).unwrap()
}

#[test]
fn subgraph_encoding_matches_dense_propagation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..30 {
        let g = random_graph(&mut rng, 8, 9, 0.25);
        let table = random_table(&mut rng, 8, 9, 6, 3);
        let sg = extract_khop(&g, Node::User(rng.gen_range(0..8)), 2, usize::MAX, 0).unwrap();
        let edges = sg.global_edges();
        for (got, want) in [
            (encode_subgraph(&table, &sg), dense_encode(&table, sg.central(), &edges, 0)),
            (encode_subgraph_intra(&table, &sg), dense_encode(&table, sg.central(), &edges, 1)),
        ] {
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn temporal_forward_matches_dense_layer_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (nu, ni, d, layers) = (5, 6, 4, 3);
    let g = random_graph(&mut rng, nu, ni, 0.3);
    let table = random_table(&mut rng, nu, ni, d, layers);
    let n = nu + ni;
    let dense = gconv_operator(&g.adjacency_matrix()).to_dense();
    let mut cur: Vec<f64> = table.data().to_f64();
    let mut acc = cur.clone();
    for _ in 0..layers {
        let mut next = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..n {
                for j in 0..d {
                    next[r * d + j] += dense[r * n + c] * cur[c * d + j];
                }
            }
        }
        acc.iter_mut().zip(&next).for_each(|(a, b)| *a += b);
        cur = next;
    }
    let got = temporal_forward(&table, &g).unwrap();
    for (a, b) in got.data().to_f64().iter().zip(&acc) {
        assert!((a - b / (layers + 1) as f64).abs() < 1e-5);
    }
}
