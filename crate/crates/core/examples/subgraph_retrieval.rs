//! Builds the k-hop subgraph library and runs exact nearest-neighbor
//! lookups against it.

use dgrec::encoder::{encode_subgraph, pretrain_bpr, BprConfig};
use dgrec::graph::{build_dynamic, extract_khop, Node};
use dgrec::library::{build_library, l2_topk, LibraryConfig};
use dgrec::synth::{generate_synthetic, SyntheticSpec};

fn main() -> anyhow::Result<()> {
    let spec = SyntheticSpec { users: 30, items: 30, blocks: 3, seed: 2, ..Default::default() };
    let data = generate_synthetic(&spec)?;
    let (graph, maps) = build_dynamic(&data.interactions, spec.granularity, 2)?;
    let pre = pretrain_bpr(&graph, &BprConfig { epochs: 40, lr: 0.01, ..Default::default() }, 2)?;
    let cfg = LibraryConfig::default();
    let library = build_library(&graph, &pre.table, &cfg, 2, "example")?;
    println!("library: {} entries of width {}", library.len(), library.dim());

    let window = graph.pretrain_window();
    let query = extract_khop(&window, Node::User(0), cfg.hop, cfg.cap, 2)?;
    let key: Vec<f32> = encode_subgraph(&pre.table, &query).iter().map(|&x| x as f32).collect();
    let block = |n: Node| match n {
        Node::User(u) => spec.user_block(maps.users[u as usize]),
        Node::Item(i) => spec.item_block(maps.items[i as usize]),
    };
    println!("query: user 0 (block {}), {} nodes, {} edges", block(Node::User(0)), query.node_count(), query.edge_count());
    for (rank, (idx, d2)) in l2_topk(&library, &key, 8)?.into_iter().enumerate() {
        let sg = library.value(idx);
        println!("{:>2}. {:?} block {} dist² {d2:.4} ({} nodes)", rank + 1, sg.central(), block(sg.central()), sg.node_count());
    }
    Ok(())
}
