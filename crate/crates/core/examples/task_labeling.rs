//! Labels query/candidate subgraph pairs by the change in similarity to
//! the query's future positives.

use dgrec::encoder::{pretrain_bpr, BprConfig};
use dgrec::graph::{build_dynamic, Node};
use dgrec::labeling::{build_task_dataset, Label, LabelConfig};
use dgrec::library::{build_library, LibraryConfig};
use dgrec::synth::{generate_synthetic, SyntheticSpec};

fn main() -> anyhow::Result<()> {
    let spec = SyntheticSpec { blocks: 2, within_prob: 0.95, seed: 3, ..Default::default() };
    let data = generate_synthetic(&spec)?;
    let (graph, maps) = build_dynamic(&data.interactions, spec.granularity, 2)?;
    let pre = pretrain_bpr(&graph, &BprConfig { epochs: 60, lr: 0.01, ..Default::default() }, 3)?;
    let lib_cfg = LibraryConfig::default();
    let library = build_library(&graph, &pre.table, &lib_cfg, 3, "example")?;
    let cfg = LabelConfig { queries: 20, candidates: 10, ..Default::default() };
    let ds = build_task_dataset(&graph, &library, &lib_cfg, &pre.table, &cfg, 3, "example")?;

    let block = |n: Node| match n {
        Node::User(u) => spec.user_block(maps.users[u as usize]),
        Node::Item(i) => spec.item_block(maps.items[i as usize]),
    };
    let mut counts = [[0usize; 3]; 2];
    for row in &ds.rows {
        let same = usize::from(block(row.query_center) != block(row.candidate_center));
        let col = match row.label {
            Label::Beneficial => 0,
            Label::Irrelevant => 1,
            Label::Harmful => 2,
        };
        counts[same][col] += 1;
    }
    println!("{} rows ({} queries skipped)", ds.rows.len(), ds.header.skipped);
    println!("               beneficial irrelevant harmful");
    for (name, c) in ["same block ", "cross block"].iter().zip(counts) {
        println!("{name}    {:>10} {:>10} {:>7}", c[0], c[1], c[2]);
    }
    Ok(())
}
