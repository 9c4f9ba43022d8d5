//! Runs every stage against an output directory, then serves
//! recommendations from the written artifacts.

use dgrec::config::RunConfig;
use dgrec::pipeline::{recommend, run_all, synth_stage};

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join(format!("dgrec-example-{}", std::process::id()));
    let overrides = [
        format!("paths.out_dir={:?}", dir.join("out").display().to_string()),
        format!("paths.interactions={:?}", dir.join("interactions.csv").display().to_string()),
        "train.bpr_epochs=30".to_string(),
        "train.bpr_lr=0.01".to_string(),
        "train.tam_epochs=10".to_string(),
        "train.finetune_epochs=5".to_string(),
        "eval.k=5".to_string(),
    ];
    let cfg = RunConfig::from_toml_str("seed = 11", &overrides)?;
    synth_stage(&cfg)?;
    for out in run_all(&cfg)? {
        for (name, sha) in out.artifacts {
            println!("{:<14} {name:<14} {}", out.stage, &sha[..16]);
        }
    }
    print!("{}", std::fs::read_to_string(dir.join("out/report.toml"))?.lines().take(6).collect::<Vec<_>>().join("\n"));
    println!();
    recommend(&cfg, 0, None, 5)?.write(std::io::stdout().lock())?;
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
