use dger_core::diagnostics::{run, COMPONENTS};

#[test]
fn every_component_passes_finite_difference_checks() {
    let results = run(None, None).unwrap();
    for r in &results {
        println!("{}", r.line());
    }
    for c in COMPONENTS {
        assert!(results.iter().any(|r| r.component == c), "{c} missing");
    }
    assert!(results.iter().all(|r| r.passed()));
}
