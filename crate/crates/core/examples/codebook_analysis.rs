//! Trains briefly, then inspects the encoder's foreground/background
//! separation, a 2-D map of features and codewords, and codebook evolution.

use mqvtg::analysis::{embedding_map, evolution_report, separation_stats, PointLabel};
use mqvtg::cli::encoder_features;
use mqvtg::data::{generate_synthetic, SyntheticSpec};
use mqvtg::trainer::{train, TrainConfig};

fn main() -> anyhow::Result<()> {
    let data = generate_synthetic(&SyntheticSpec {
        num_videos: 60,
        val_videos: 15,
        ..SyntheticSpec::default()
    })?
    .dataset;
    let config = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };
    let outcome = train(&config, &data.train, &data.val)?;
    let model = &outcome.best.model;

    let (fg, bg) = encoder_features(model, &data.val)?;
    let stats = separation_stats(&fg, &bg)?;
    println!(
        "silhouette {:.4}, centroid gap {:.4}, linear probe {:.3}",
        stats.silhouette, stats.centroid_gap, stats.linear_probe_accuracy
    );

    let codewords = model.codebook().expect("quantized model").project();
    let map = embedding_map(&fg, &bg, &codewords)?;
    let n_code = map.labels.iter().filter(|&&l| l == PointLabel::Codeword).count();
    println!("map of {} points ({n_code} codewords), explained {:.3?}", map.labels.len(), map.explained);

    for p in evolution_report(&outcome.snapshots) {
        println!("epoch {}: {} effective codewords, dispersion {:.4}", p.epoch, p.effective_count, p.dispersion);
    }
    Ok(())
}
