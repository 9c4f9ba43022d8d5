//! Pretrains the task-aware relevance model on labeled pairs and reports
//! how well its scores rank held-out pairs.

use dgrec::tam::{pretrain_tam, score, PairBatch, PairExample, TamConfig, TamParams, TamTrainConfig};
use rand::{Rng, SeedableRng};

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        idx.iter().enumerate().for_each(|(k, &i)| r[i] = k as f64);
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    1.0 - 6.0 * ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / (n * (n * n - 1.0))
}

fn main() -> anyhow::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let config = TamConfig::default();
    let mut make = |n: usize| -> Vec<PairExample> {
        (0..n)
            .map(|_| {
                let mut draw = || (0..config.dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>();
                let (query, candidate) = (draw(), draw());
                let target = candidate[0] as f64;
                PairExample { query, candidate, target }
            })
            .collect()
    };
    let (train, held_out) = (make(2000), make(200));
    let cfg = TamTrainConfig { epochs: 60, ..Default::default() };
    let (params, log): (TamParams, _) = pretrain_tam(&train, &config, &cfg, 4)?;
    for e in log.iter().step_by(10) {
        println!("epoch {:>3}  mtl {:.4}  ocl {:.4}  total {:.4}", e.epoch, e.mtl, e.ocl, e.total);
    }
    let rows: Vec<(&[f32], &[f32])> = held_out.iter().map(|p| (p.query.as_slice(), p.candidate.as_slice())).collect();
    let targets: Vec<f64> = held_out.iter().map(|p| p.target).collect();
    let batch = PairBatch::from_rows(&rows, targets.clone())?;
    let scores = score(&batch, &params)?;
    println!("held-out Spearman {:.3}", spearman(&scores, &targets));
    Ok(())
}
