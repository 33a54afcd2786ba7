//! Compares fusion variants over two seeds on a small synthetic benchmark and
//! prints the ablation CSV.

use mqvtg::cli::{ablation_variants, run_ablation, worker_threads, write_ablation_csv, AblationData, Axis};
use mqvtg::data::SyntheticSpec;
use mqvtg::trainer::TrainConfig;

fn main() -> anyhow::Result<()> {
    let base = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let spec = SyntheticSpec {
        num_videos: 60,
        val_videos: 20,
        ..SyntheticSpec::default()
    };
    let variants = ablation_variants(Axis::Fusion, &base);
    let rows = run_ablation(&variants, &[0, 1], &AblationData::Synthetic(spec), worker_threads())?;
    write_ablation_csv(&rows, &mut std::io::stdout().lock())?;
    Ok(())
}
