mod common;

use common::{conv_oracle_max_diff, masked_pool_oracle_max_diff, metric_oracle_failures, CONV_TOL};

#[test]
fn conv2d_matches_nested_loops() {
    let d = conv_oracle_max_diff(100, 7);
    assert!(d <= CONV_TOL, "max diff {d:e}");
}

#[test]
fn masked_pool_matches_resample_then_average() {
    let d = masked_pool_oracle_max_diff(100, 8);
    assert!(d <= 1e-12, "max diff {d:e}");
}

#[test]
fn metrics_match_hand_counts() {
    let fails = metric_oracle_failures();
    assert!(fails.is_empty(), "{fails:#?}");
}
