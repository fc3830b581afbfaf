use latentlight::selfcheck::composite_suite;

#[test]
fn composites_match_finite_differences() {
    let checks = composite_suite(3, 1e-5).unwrap();
    for c in &checks {
        println!("{:<24} {:.3e}", c.name, c.max_rel_error);
    }
    for c in &checks {
        assert!(c.max_rel_error < 1e-4, "{}: {:e}", c.name, c.max_rel_error);
    }
}
