//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so the lines always print.

mod common;

use std::time::Instant;

use common::Outcome;
use mqvtg::cli::{ablation_variants, run_ablation, worker_threads, AblationData, AblationRow, Axis};
use mqvtg::data::SyntheticSpec;
use mqvtg::trainer::TrainConfig;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn mean_of(rows: &[AblationRow], variant: &str, f: impl Fn(&AblationRow) -> f64) -> f64 {
    let picked: Vec<f64> = rows.iter().filter(|r| r.variant == variant).map(f).collect();
    picked.iter().sum::<f64>() / picked.len() as f64
}

/// Baseline versus soft moment quantization (k-means prior, projected
/// codebook) on the default synthetic benchmark.
fn directional() -> (Outcome, Outcome) {
    let spec = SyntheticSpec::default();
    let base = TrainConfig::default();
    let variants: Vec<_> = ablation_variants(Axis::Components, &base)
        .into_iter()
        .filter(|(name, _)| name == "baseline" || name == "qatm+sq+mc")
        .collect();
    let start = Instant::now();
    let rows = match run_ablation(&variants, &SEEDS, &AblationData::Synthetic(spec.clone()), worker_threads()) {
        Ok(rows) => rows,
        Err(e) => {
            let fail = Outcome::new(false, format!("ablation failed: {e}"));
            return (fail.clone(), fail);
        }
    };
    let secs = start.elapsed().as_secs_f64();
    let map_base = mean_of(&rows, "baseline", |r| r.report.map_avg);
    let map_mq = mean_of(&rows, "qatm+sq+mc", |r| r.report.map_avg);
    let sil_base = mean_of(&rows, "baseline", |r| r.silhouette);
    let sil_mq = mean_of(&rows, "qatm+sq+mc", |r| r.silhouette);
    let setup = format!(
        "{} train / {} val, T={}, d={}, K={}",
        spec.num_videos - spec.val_videos,
        spec.val_videos,
        spec.clips,
        spec.dim,
        base.model.codebook_size
    );
    (
        Outcome::new(
            map_mq > map_base,
            format!("mean map_avg {map_mq:.4} (quantized) vs {map_base:.4} (baseline); {setup}; {secs:.0}s"),
        ),
        Outcome::new(
            sil_mq > sil_base,
            format!("mean silhouette {sil_mq:.4} (quantized) vs {sil_base:.4} (baseline)"),
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} {:<28} {} {}", name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    let t = Instant::now();
    let mut grads = common::gradient_suite(10);
    let secs = t.elapsed().as_secs_f64();
    grads.pass &= secs < 60.0;
    grads.detail = format!("{}; {secs:.1}s", grads.detail);
    report(1, "gradient suite", grads);
    report(2, "stop-gradient partition", common::stop_gradient_partition(5));
    report(3, "soft forward invariance", common::soft_invariance(20));
    report(4, "lookup oracle", common::lookup_oracle(100));
    report(5, "metric oracle", common::metric_oracle(200));
    report(6, "k-means properties", common::kmeans_properties(50));
    let (ablation, separation) = directional();
    report(7, "directional ablation", ablation);
    report(8, "directional separation", separation);
    report(9, "utilization reporting", common::utilization_reporting());
    report(10, "determinism/persistence", common::determinism_and_persistence());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", results.len());
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
