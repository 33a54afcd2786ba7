//! Initializes a codebook with k-means, quantizes fresh features, and reports
//! the codebook and commitment losses and utilization.

use mqvtg::autodiff::{Tape, Tensor};
use mqvtg::codebook::{codebook_loss, commitment_loss, histogram, kmeans_init, lookup, utilization, Codebook};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let prior = Tensor::randn(&[256, 16], &mut rng);
    let codebook = Codebook::new(kmeans_init(&prior, 32, 25, 1)?)?;

    let z = Tensor::randn(&[40, 16], &mut rng);
    let projected = codebook.project();
    let assignment = lookup(&z, &projected)?;
    println!("first assignments {:?}", &assignment.indices[..10]);

    let mut tape = Tape::new();
    let zv = tape.param(z);
    let cv = tape.param(projected);
    let l_cb = codebook_loss(&mut tape, zv, cv, &assignment)?;
    let l_cmt = commitment_loss(&mut tape, zv, cv, &assignment)?;
    println!("codebook loss {:.4}, commitment loss {:.4}", tape.value(l_cb).item(), tape.value(l_cmt).item());

    let counts = histogram(&assignment.indices, codebook.k());
    println!("utilization {:.3} ({} of {} codewords used)", utilization(&counts), counts.iter().filter(|&&c| c > 0).count(), codebook.k());
    Ok(())
}
