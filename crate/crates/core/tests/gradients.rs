use botaclip::gradcheck::{run_all, run_check, CHECKS, TOLERANCE};

#[test]
fn every_gradient_matches_finite_differences() {
    let outcomes = run_all(20).unwrap();
    for o in &outcomes {
        println!("{:<22} worst relative error {:.3e} ({} redrawn)", o.name, o.worst, o.redrawn);
    }
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed()).map(|o| &o.name).collect();
    assert!(failed.is_empty(), "relative error ≥ {TOLERANCE:e} in {failed:?}");
}

#[test]
fn unknown_check_is_rejected() {
    assert!(run_check("nope", 1).is_err());
    assert!(CHECKS.len() >= 10);
}

#[test]
#[ignore]
fn wide_sweep() {
    let n = std::env::var("GC_N").ok().and_then(|v| v.parse().ok()).unwrap_or(500);
    for o in run_all(n).unwrap() {
        println!("{:<22} worst relative error {:.3e} ({} redrawn)", o.name, o.worst, o.redrawn);
    }
}
