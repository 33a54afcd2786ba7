//! Trains the soft moment-quantization model on a small synthetic split and
//! evaluates the best checkpoint.

use mqvtg::data::{generate_synthetic, SyntheticSpec};
use mqvtg::model::{ModelConfig, Placement};
use mqvtg::trainer::{evaluate, train, TrainConfig};

fn main() -> anyhow::Result<()> {
    let data = generate_synthetic(&SyntheticSpec {
        num_videos: 250,
        val_videos: 50,
        ..SyntheticSpec::default()
    })?
    .dataset;
    let config = TrainConfig {
        model: ModelConfig {
            placement: Placement::Moment,
            codebook_size: 64,
            ..ModelConfig::default()
        },
        epochs: 20,
        ..TrainConfig::default()
    };
    let outcome = train(&config, &data.train, &data.val)?;
    for rec in &outcome.log {
        let val = rec.val.expect("validation split present");
        println!(
            "epoch {:>2}: loss {:.4}, train util {:.3}, val map_avg {:.4}",
            rec.epoch, rec.loss.total, rec.train_utilization, val.map_avg
        );
    }
    let ev = evaluate(&outcome.best.model, &data.val, &config.decode)?;
    println!("best epoch {}: {:?}", outcome.best.epoch, ev.report);
    Ok(())
}
