//! Checks reverse-mode gradients against central differences for a few
//! composite expressions built on the tape.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use aclam::tensor::{finite_diff_check, finite_diff_check_many, Graph, Result, Tensor, Var};
use rand::Rng;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = aclam::rng::stream(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

fn layer(g: &mut Graph<f64>, v: &[Var]) -> Result<Var> {
    let h = g.matmul(v[0], v[1])?;
    let h = g.tanh(h);
    let sq = g.mul(h, h)?;
    g.mean(sq)
}

fn main() -> Result<()> {
    let x = random(4, 3, 1);
    let w = random(3, 5, 2);
    let err = finite_diff_check_many(layer, &[x.clone(), w], 1e-6)?;
    println!("mean(tanh(x w)^2)        max rel error {err:.2e}");

    let err = finite_diff_check(
        |g, a| {
            let s = g.sigmoid(a);
            let c = g.concat(&[a, s])?;
            g.sum(c)
        },
        &x,
        1e-6,
    )?;
    println!("sum(concat(x, sigmoid x)) max rel error {err:.2e}");

    let y = random(4, 3, 3);
    let err = finite_diff_check_many(
        |g, v| {
            let d = g.sub(v[0], v[1])?;
            let r = g.relu(d);
            let m = g.mse(r, v[1])?;
            Ok(g.scale(m, 0.5))
        },
        &[x, y],
        1e-6,
    )?;
    println!("0.5 mse(relu(x - y), y)  max rel error {err:.2e}");
    Ok(())
}
