use mdtrack_core::verify::{isolation_trials, run, Check, Suite};

fn assert_all(checks: &[Check]) {
    for c in checks {
        println!("{c}");
    }
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    assert!(failed.is_empty(), "failed: {failed:#?}");
}

#[test]
fn temporal_suite_passes() {
    assert_all(&run(Suite::Temporal));
}

#[test]
fn fusion_suite_passes() {
    assert_all(&run(Suite::Fusion));
}

#[test]
fn head_suite_passes() {
    assert_all(&run(Suite::Head));
}

#[test]
fn cross_stream_leak_is_detected() {
    // with the cross path enabled, perturbing X must reach the RGB memory
    assert!(isolation_trials(false, 1, 3, 5).unwrap() > 0);
    assert_eq!(isolation_trials(true, 1, 3, 5).unwrap(), 0);
}

#[test]
fn suite_names_parse() {
    for s in ["all", "numerics", "temporal", "fusion", "head"] {
        assert!(s.parse::<Suite>().is_ok());
    }
    assert!("model".parse::<Suite>().is_err());
}
