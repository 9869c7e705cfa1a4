use soboq_core::diagnostics::plateau;
use soboq_core::experiment::{run_experiment, ExperimentConfig};
use soboq_core::solver::Mode;
use soboq_core::Parallelism;

fn value_errors(mode: Mode) -> Vec<f64> {
    let mut c = ExperimentConfig::default();
    c.data.n = 8000;
    c.solver.mode = mode;
    let (_, out) = run_experiment(&c, Parallelism::default()).unwrap();
    out.fit.log.value_errors().unwrap()
}

#[test]
fn sobolev_error_decreases_then_plateaus() {
    let e = value_errors(Mode::Sobolev);
    assert_eq!(e.len(), 31);
    for w in e.windows(2) {
        assert!(w[1] <= 1.1 * w[0], "{} -> {}", w[0], w[1]);
    }
    let floor = plateau(&e, 0.2);
    assert!(floor <= 0.5 * e[0], "plateau {floor} vs initial {}", e[0]);
}

#[test]
fn feasibility_holds_along_the_path() {
    let mut c = ExperimentConfig::default();
    c.data.n = 2000;
    c.funcspace.radius_v = Some(0.3);
    c.funcspace.radius_q = Some(0.2);
    let (_, out) = run_experiment(&c, Parallelism::default()).unwrap();
    for (theta, eta) in &out.fit.history {
        assert!(theta.norm() <= 0.3 && eta.norm() <= 0.2);
    }
    assert!(out.summary.value_projections > 0);
}
