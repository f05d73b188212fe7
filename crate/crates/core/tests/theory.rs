use smope::theory::{non_increasing_steps, rate_experiment, FitSettings, RateConfig};

#[test]
fn median_loss_trends_down_along_the_grid() {
    let cfg = RateConfig {
        sample_sizes: vec![128, 512, 2048, 8192],
        seeds: 5,
        fit: FitSettings {
            restarts: 4,
            max_steps: 100,
            ..FitSettings::default()
        },
        ..RateConfig::default()
    };
    let result = rate_experiment(&cfg).unwrap();
    let m = &result.summary.medians;
    assert!(non_increasing_steps(m) >= m.len() - 2, "{:?}", m);
    assert!(m[m.len() - 1] < m[0], "{:?}", m);
    assert_eq!(result.runs.len() + result.summary.failures, 20);
}
