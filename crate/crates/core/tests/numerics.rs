use mdtrack_core::verify::numerics_suite;

#[test]
fn every_primitive_passes_its_gradient_check() {
    let checks = numerics_suite();
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

