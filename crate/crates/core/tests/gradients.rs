use bsbseg_core::checks::{self, CaseResult};

fn assert_all_pass(cases: &[CaseResult]) {
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} (max rel err {:.2e})", c.name, c.report.max_rel_err()))
        .collect();
    assert!(failed.is_empty(), "failed cases: {failed:?}");
}

#[test]
fn scan_gradients_at_block_tolerance() {
    assert_all_pass(&checks::ssm_suite(checks::SCAN_TOLERANCE).unwrap());
}

#[test]
fn block_gradients_for_every_variant() {
    let cases = checks::bsb_suite(checks::BLOCK_TOLERANCE).unwrap();
    assert_eq!(cases.len(), 5);
    assert_all_pass(&cases);
}

#[test]
fn toy_model_gradients_for_every_variant() {
    let start = std::time::Instant::now();
    let cases = checks::model_suite(checks::MODEL_TOLERANCE).unwrap();
    assert_eq!(cases.len(), 5);
    assert_all_pass(&cases);
    assert!(start.elapsed().as_secs() < 300);
}
