use dcc::gradcheck::GradCheckConfig;
use dcc::gradsuite::run_suite;

#[test]
fn every_op_and_loss_matches_finite_differences() {
    let cfg = GradCheckConfig::default();
    let seeds: Vec<u64> = (0..20).collect();
    let cases = run_suite(&seeds, &cfg).unwrap();
    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0, 0);
    for c in &cases {
        assert!(c.report.passed(cfg.tolerance), "{} seed {}: {:?}", c.name, c.seed, c.report);
        worst = worst.max(c.report.max_rel_error);
        checked += c.report.checked;
        skipped += c.report.skipped_kinks;
    }
    eprintln!("{} cases, {checked} coords, {skipped} kinks skipped, worst rel err {worst:.2e}", cases.len());
}
