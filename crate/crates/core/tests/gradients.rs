mod common;

#[test]
fn every_op_and_loss_matches_finite_differences() {
    let results = common::gradsuite::run();
    for (name, err) in &results {
        println!("{name:<28} {err:.2e}");
    }
    assert!(results.len() > 40, "only {} checks", results.len());
    let bad: Vec<_> = results.iter().filter(|(_, e)| !(*e < 1e-3)).collect();
    assert!(bad.is_empty(), "{bad:?}");
}
