//! Generates a drifting block-structured stream and buckets it into
//! snapshots.

use dgrec::graph::build_dynamic;
use dgrec::synth::{generate_synthetic, SyntheticSpec};

fn main() -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        users: 40,
        items: 40,
        blocks: 4,
        within_prob: 0.9,
        snapshots: 6,
        drift_start: 3,
        drift_every: 100,
        seed: 7,
        ..Default::default()
    };
    let data = generate_synthetic(&spec)?;
    let (graph, maps) = build_dynamic(&data.interactions, spec.granularity, 3)?;
    println!(
        "{} interactions -> {} snapshots, {} users, {} items (user checksum {})",
        data.interactions.len(),
        graph.len(),
        graph.user_count(),
        graph.item_count(),
        &maps.user_checksum()[..12]
    );
    for (t, snap) in graph.snapshots().iter().enumerate() {
        let within = snap
            .edges()
            .filter(|&(u, i)| {
                let (u, i) = (maps.users[u as usize], maps.items[i as usize]);
                spec.item_block(i) == spec.preferred_block(u, t)
            })
            .count();
        println!(
            "snapshot {t}: {:>3} edges, {:>5.1}% in the preferred block, rotation {}",
            snap.edge_count(),
            100.0 * within as f64 / snap.edge_count() as f64,
            spec.rotation(t)
        );
    }
    Ok(())
}
