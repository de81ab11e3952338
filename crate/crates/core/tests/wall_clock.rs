//! Timing shape of the scaling sweep. Needs an otherwise idle machine; the
//! bounds are loose on purpose.

use std::time::Duration;

use gsa::bench::{run_scaling_benchmark, BenchConfig, BenchMechanism};
use gsa::model::ModelConfig;

#[test]
fn doubling_costs_follow_linear_and_quadratic_shapes() {
    let cfg = BenchConfig {
        model: ModelConfig {
            d: 8,
            heads: 1,
            e_l: 1,
            d_l: 0,
            ffn_hidden: 8,
            n_features_in: 1,
            n_features_out: 1,
            ..ModelConfig::default()
        },
        min_time: Duration::from_millis(300),
        ..BenchConfig::default()
    };
    let lengths = [1024, 2048];
    let report = run_scaling_benchmark(&lengths, &[BenchMechanism::Grouped, BenchMechanism::Canonical], &cfg).unwrap();
    let ms = |m, l| report.row(m, l).unwrap().wall_ms_per_iter.unwrap();
    let grouped = ms(BenchMechanism::Grouped, 2048) / ms(BenchMechanism::Grouped, 1024);
    let canonical = ms(BenchMechanism::Canonical, 2048) / ms(BenchMechanism::Canonical, 1024);
    eprintln!("wall-clock doubling ratio: grouped {grouped:.2}, canonical {canonical:.2}");
    assert!(grouped < 3.0, "grouped ratio {grouped}");
    assert!(canonical > 3.0, "canonical ratio {canonical}");
}
