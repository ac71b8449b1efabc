use nuisance_eig::allocation::{self, PilotConstants};
use nuisance_eig::estimators::{self, ProposalKind};
use nuisance_eig::models::{
    example1_eig, make_example1, make_example1_no_nuisance, InformationAbout, LinearGaussianSpec,
};
use nuisance_eig::{EstimatorKind, SolverConfig, Substreams};

fn within(estimate: f64, exact: f64, se: f64, slack: f64) -> bool {
    (estimate - exact).abs() <= 4.0 * se + slack
}

#[test]
fn all_estimators_reach_the_oracle() {
    let (m, p) = make_example1();
    let cfg = SolverConfig::default();
    let s = Substreams::new(41);
    for xi in [0.25, 0.5, 1.0] {
        let exact = example1_eig(xi);
        let r = estimators::dlmc(&m, &p, &[xi], 2000, 300, 300, &s).unwrap();
        // Prior sampling leaves an O(1/M) bias on top of the noise.
        assert!(
            within(r.estimate, exact, r.std_error(), 0.05),
            "dlmc {xi}: {} vs {exact}",
            r.estimate
        );
        let r = estimators::dlmc2is(&m, &p, &[xi], 4000, 1, 1, &s, &cfg, ProposalKind::Laplace)
            .unwrap();
        assert!(
            within(r.estimate, exact, r.std_error(), 0.0),
            "dlmc2is {xi}: {} vs {exact}",
            r.estimate
        );
        let r = estimators::mc2la(&m, &p, &[xi], 4000, &s, &cfg).unwrap();
        assert!(
            within(r.estimate, exact, r.std_error(), 0.0),
            "mc2la {xi}: {} vs {exact}",
            r.estimate
        );
    }
}

#[test]
fn no_nuisance_matches_joint_closed_form() {
    let (m, p) = make_example1_no_nuisance();
    let cfg = SolverConfig::default();
    let r = estimators::mc2la(&m, &p, &[0.5], 4000, &Substreams::new(3), &cfg).unwrap();
    let mut spec = LinearGaussianSpec::example1(0.5);
    spec.b = nalgebra::DMatrix::zeros(2, 0);
    spec.phi_mean = nalgebra::DVector::zeros(0);
    spec.phi_cov = nalgebra::DMatrix::zeros(0, 0);
    let exact = spec.analytic_eig(InformationAbout::Theta).unwrap();
    assert!(
        within(r.estimate, exact, r.std_error(), 0.0),
        "{} vs {exact}",
        r.estimate
    );
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let (m, p) = make_example1();
    let cfg = SolverConfig::default();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            let s = Substreams::new(5);
            let a = estimators::dlmc(&m, &p, &[0.4], 300, 20, 20, &s)
                .unwrap()
                .estimate;
            let b = estimators::dlmc2is(&m, &p, &[0.4], 300, 3, 3, &s, &cfg, ProposalKind::Laplace)
                .unwrap()
                .estimate;
            let c = estimators::mc2la(&m, &p, &[0.4], 300, &s, &cfg)
                .unwrap()
                .estimate;
            [a.to_bits(), b.to_bits(), c.to_bits()]
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn run_to_tolerance_meets_tolerance_on_gaussian_model() {
    let (m, p) = make_example1();
    let cfg = SolverConfig::default();
    let s = Substreams::new(8);
    let mut c = allocation::estimate_constants_pilot(
        &m,
        &p,
        &[0.5],
        100,
        10,
        10,
        ProposalKind::Laplace,
        &cfg,
        &s.child("pilot", 0),
    )
    .unwrap();
    c.mc2la_variance = Some(
        allocation::estimate_variance_pilot_mc2la(&m, &p, &[0.5], 100, &cfg, &s.child("pilot", 1))
            .unwrap(),
    );
    for kind in [EstimatorKind::Dlmc2is, EstimatorKind::Mc2la] {
        let r =
            estimators::run_to_tolerance(kind, &m, &p, &[0.5], 0.05, 0.05, &c, &s, &cfg).unwrap();
        let a = r.allocation.as_ref().unwrap();
        assert_eq!((r.n_outer, a.m1_inner), (a.n_outer, 1));
        assert!(
            (r.estimate - example1_eig(0.5)).abs() < 0.05,
            "{kind:?}: {}",
            r.estimate
        );
    }
}

#[test]
fn mc2la_pilot_without_variance_is_rejected() {
    let (m, p) = make_example1();
    let c = PilotConstants::new(0.0, 0.0, 1.0).unwrap();
    let r = estimators::run_to_tolerance(
        EstimatorKind::Mc2la,
        &m,
        &p,
        &[0.5],
        0.1,
        0.05,
        &c,
        &Substreams::new(1),
        &SolverConfig::default(),
    );
    assert!(r.is_err());
}
