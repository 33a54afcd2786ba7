//! Scores hand-made predictions with the moment and highlight metrics.

use mqvtg::metrics::{MetricsReport, ScoredSpan};

fn main() {
    let gts = vec![vec![[10.0, 20.0]], vec![[0.0, 6.0], [30.0, 40.0]]];
    let preds = vec![
        vec![ScoredSpan::new(11.0, 21.0, 0.9), ScoredSpan::new(40.0, 50.0, 0.2)],
        vec![ScoredSpan::new(50.0, 56.0, 0.8), ScoredSpan::new(0.0, 6.0, 0.7), ScoredSpan::new(31.0, 39.0, 0.6)],
    ];
    let saliency = vec![vec![0.1, 0.9, 0.8, 0.2], vec![0.7, 0.3, 0.2, 0.6]];
    let labels = vec![vec![0.0, 1.0, 1.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]];

    let report = MetricsReport::compute(&preds, &gts, &saliency, &labels, 0.0);
    for (name, value) in MetricsReport::CSV_COLUMNS.iter().zip(report.values()) {
        println!("{name:>12} {value:.4}");
    }
}
