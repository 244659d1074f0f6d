#[path = "support/oracle.rs"]
mod oracle;

use std::time::Instant;

use oracle::{oracle_emd_exhaustive, oracle_emd_greedy, run_metric_oracles, Q};

#[test]
fn metrics_match_brute_force_on_200_instances() {
    let start = Instant::now();
    let errors = run_metric_oracles(2024, 200, 32);
    assert!(errors.is_empty(), "{} mismatches:\n{}", errors.len(), errors.join("\n"));
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn transport_oracles_agree_on_hand_cases() {
    // Point mass at bin 0 against point mass at bin 2.
    assert_eq!(oracle_emd_exhaustive(&[1, 0, 0], &[0, 0, 1]), Q::from_integer(2));
    // Half of the mass moves one bin.
    assert_eq!(oracle_emd_exhaustive(&[2, 0], &[1, 1]), Q::new(1, 2));
    let a = [Q::new(1, 2), Q::new(1, 2), Q::from_integer(0)];
    let b = [Q::from_integer(0), Q::new(1, 4), Q::new(3, 4)];
    assert_eq!(oracle_emd_greedy(&a, &b), Q::new(5, 4));
    assert_eq!(oracle_emd_exhaustive(&[2, 2, 0], &[0, 1, 3]), Q::new(5, 4));
}
