//! Reverse-mode gradients on a tiny two-layer network, checked against
//! central differences.

use dgrec::tensor::{grad_check, Tape};

fn main() -> anyhow::Result<()> {
    let mut tape = Tape::new();
    let x = tape.leaf(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5], false);
    let w1 = tape.leaf(3, 4, (0..12).map(|i| (i as f64 - 6.0) / 10.0).collect(), true);
    let w2 = tape.leaf(4, 1, vec![0.3, -0.2, 0.7, 0.1], true);
    let h = tape.matmul(x, w1)?;
    let h = tape.relu(h)?;
    let y = tape.matmul(h, w2)?;
    let loss = tape.mean(y)?;
    let grads = tape.backward(loss)?;
    println!("loss = {:.6}", tape.scalar(loss));
    println!("dL/dw2 = {:?}", grads.get(w2));

    let point: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.7).collect();
    let err = grad_check(
        |t, v| {
            let s = t.softmax_rows(v)?;
            let l = t.layer_norm(v)?;
            let p = t.mul(s, l)?;
            t.sum(p)
        },
        (2, 3),
        &point,
        1e-6,
    )?;
    println!("softmax * layer_norm: max relative error {err:.2e}");
    Ok(())
}
