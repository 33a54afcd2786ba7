//! Generates the synthetic grounding benchmark, saves it, and prints a few
//! statistics about the planted moments.

use mqvtg::data::{generate_synthetic, Dataset, SyntheticSpec};

fn main() -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        num_videos: 40,
        val_videos: 10,
        ..SyntheticSpec::default()
    };
    let syn = generate_synthetic(&spec)?;
    let ds = &syn.dataset;
    println!("{} train / {} val videos, {} clips each", ds.train.len(), ds.val.len(), spec.clips);

    let windows: usize = ds.train.iter().map(|s| s.gt_windows.len()).sum();
    let fg: f64 = ds.train.iter().flat_map(|s| &s.saliency_labels).filter(|&&l| l > 0.0).count() as f64;
    let clips = (ds.train.len() * spec.clips) as f64;
    println!("{windows} moments, {:.1}% foreground clips", 100.0 * fg / clips);

    let s = &ds.train[0];
    println!("{}: windows {:?}, foreground prototype {}", s.vid, s.gt_windows, syn.truth.foreground[0]);

    let dir = std::env::temp_dir().join("mqvtg-synthetic-example");
    ds.save(&dir)?;
    let back = Dataset::load(&dir)?;
    println!("saved to {} and reloaded identically: {}", dir.display(), &back == ds);
    Ok(())
}
