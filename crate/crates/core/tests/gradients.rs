use metaseg::gradsuite::{self, Check};

#[test]
fn every_check_passes_on_ten_seeds() {
    let outcomes = gradsuite::run(&Check::ALL, 0..10).unwrap();
    for o in &outcomes {
        println!(
            "{:<24} seed {:>2}: max rel err {:.3e} coords {} refined {} skipped {} worst {:?}",
            o.check.name(),
            o.seed,
            o.report.max_rel_error,
            o.report.coords,
            o.report.refined,
            o.report.skipped,
            o.report.worst
        );
    }
    for o in &outcomes {
        assert!(o.report.max_rel_error < 1e-5, "{} seed {}: {:e}", o.check.name(), o.seed, o.report.max_rel_error);
    }
}
