//! Builds a small graph (matmul, layer norm, softmax, a stop-gradient branch)
//! and compares its reverse-mode gradients with central differences.

use mqvtg::autodiff::{compare_gradients, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[4, 6], &mut rng);
    let w = Tensor::randn(&[6, 3], &mut rng);

    let cmp = compare_gradients(
        |t: &mut Tape, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.layer_norm(h)?;
            let p = t.softmax(h, 1)?;
            // the frozen copy pulls p toward itself without receiving gradient
            let target = t.stop_gradient(p)?;
            let d = t.sq_dist(h, target)?;
            let a = t.mean(p);
            let b = t.mean(d);
            t.add(a, b)
        },
        &[x, w],
        1e-6,
    )?;
    for (i, (a, n)) in cmp.analytic.iter().zip(&cmp.numeric).enumerate() {
        println!("input {i}: analytic {:?}", &a.data()[..3]);
        println!("input {i}: numeric  {:?}", &n.data()[..3]);
    }
    println!("max relative error {:.3e}", cmp.max_relative_error());
    Ok(())
}
