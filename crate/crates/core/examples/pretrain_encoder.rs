//! BPR pretraining of the propagation encoder on the historical window.

use dgrec::encoder::{pretrain_bpr, BprConfig};
use dgrec::graph::{build_dynamic, Node};
use dgrec::synth::{generate_synthetic, SyntheticSpec};
use dgrec::tensor::cosine;

fn main() -> anyhow::Result<()> {
    let spec = SyntheticSpec { users: 30, items: 30, blocks: 3, seed: 1, ..Default::default() };
    let data = generate_synthetic(&spec)?;
    let (graph, maps) = build_dynamic(&data.interactions, spec.granularity, 2)?;
    let cfg = BprConfig { epochs: 60, lr: 0.01, ..Default::default() };
    let out = pretrain_bpr(&graph, &cfg, 1)?;
    for (e, l) in out.epoch_losses.iter().enumerate().step_by(10) {
        println!("epoch {e:>3}  bpr {l:.4}");
    }

    let vec = |n: Node| out.table.row(n).iter().map(|&x| x as f64).collect::<Vec<_>>();
    let (mut same, mut cross) = (Vec::new(), Vec::new());
    for a in 0..graph.user_count() as u32 {
        for b in a + 1..graph.user_count() as u32 {
            let c = cosine(&vec(Node::User(a)), &vec(Node::User(b)));
            let ba = spec.user_block(maps.users[a as usize]);
            let bb = spec.user_block(maps.users[b as usize]);
            if ba == bb { same.push(c) } else { cross.push(c) }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("mean user cosine: same block {:.3}, different block {:.3}", mean(&same), mean(&cross));
    Ok(())
}
