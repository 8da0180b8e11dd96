use mot_bridge::fokker_planck::{simulate, Sampling, SimulationSetup};
use mot_bridge::hamiltonian::{legendre, symmetric_a_grid, Hamiltonian, Lagrangian, LagrangianSpec};
use mot_bridge::hj_solver::{solve_hj_mot, solve_hj_sb_with, Generator2D, Grid2D, TimeGrid, Coordinates};
use mot_bridge::measures::{breeden_litzenberger, call_prices, convex_order, wasserstein2, CallCurve, Grid1D, GridMeasure};
use mot_bridge::mot_dual::{ascend, dual_objective, AscentConfig, DualState, MotProblem};
use mot_bridge::primal_oracle::{solve_discrete_mot, DiscreteMotInstance};
use mot_bridge::sb_dual::{jump_y_gradient_gap, optimal_density_report, sb_dual_objective, SbProblem};
use mot_bridge::svm_models::{check_assumptions, make_heston, Assumption, SampleGrid, SvmModel, SvmSpec};
use mot_bridge::vix::{vix_dual_value, ConvexPiecewise, VixGrids, VixInstance};
use proptest::prelude::*;

fn line() -> Grid1D {
    Grid1D::uniform(-2.0, 2.0, 9).unwrap()
}

fn measure(g: &Grid1D, raw: &[f64]) -> GridMeasure {
    GridMeasure::normalized(g.clone(), raw.to_vec()).unwrap()
}

/// Moves the fraction `f[i]` of each interior atom to its two neighbours,
/// mean-preservingly on a uniform grid.
fn spread(m: &GridMeasure, f: &[f64]) -> GridMeasure {
    let w = m.weights();
    let mut out = w.to_vec();
    for i in 1..w.len() - 1 {
        let d = f[i] * w[i];
        out[i] -= d;
        out[i - 1] += d / 2.0;
        out[i + 1] += d / 2.0;
    }
    GridMeasure::normalized(m.grid().clone(), out).unwrap()
}

fn quadratic_h() -> Hamiltonian {
    let spec = LagrangianSpec::new(Lagrangian::Quadratic { gamma: 1.0 }, 2.0, 20.0, 1001).unwrap();
    legendre(&spec, &symmetric_a_grid(15.0, 601), 20.0, 2001).unwrap()
}

fn weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 9).prop_filter("some mass", |w| w.iter().sum::<f64>() > 0.1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn convex_order_is_transitive(
        w in weights(),
        f1 in prop::collection::vec(0.0f64..1.0, 9),
        f2 in prop::collection::vec(0.0f64..1.0, 9),
        other in weights(),
        use_other in any::<bool>(),
    ) {
        let g = line();
        let mu = measure(&g, &w);
        let nu = spread(&mu, &f1);
        let rho = if use_other { measure(&g, &other) } else { spread(&nu, &f2) };
        if convex_order(&mu, &nu).holds && convex_order(&nu, &rho).holds {
            prop_assert!(convex_order(&mu, &rho).holds);
        }
        prop_assert!(convex_order(&mu, &nu).holds);
    }

    #[test]
    fn wasserstein_triangle(a in weights(), b in weights(), c in weights()) {
        let g = line();
        let (a, b, c) = (measure(&g, &a), measure(&g, &b), measure(&g, &c));
        prop_assert!(wasserstein2(&a, &c) <= wasserstein2(&a, &b) + wasserstein2(&b, &c) + 1e-9);
        prop_assert!(wasserstein2(&a, &a).abs() <= 1e-12);
    }

    #[test]
    fn call_synthesis_inverts_breeden_litzenberger(inner in prop::collection::vec(0.0f64..1.0, 7)) {
        prop_assume!(inner.iter().sum::<f64>() > 0.1);
        let g = Grid1D::uniform(0.5, 1.5, 9).unwrap();
        let mut w = vec![0.0];
        w.extend(&inner);
        w.push(0.0);
        let mu = measure(&g, &w);
        let curve = CallCurve::new(1.0, g.nodes().to_vec(), call_prices(&mu, g.nodes()));
        let back = breeden_litzenberger(&curve, &g).unwrap();
        for (a, b) in mu.weights().iter().zip(back.weights()) {
            prop_assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn hamiltonian_is_nonincreasing_and_convex(p in 2.0f64..4.0, gamma in 0.5f64..2.0, power in any::<bool>()) {
        let cost = if power { Lagrangian::Power { p } } else { Lagrangian::Quadratic { gamma } };
        let spec = LagrangianSpec::new(cost.clone(), p.max(2.0), 10.0, 1001).unwrap();
        let h = legendre(&spec, &symmetric_a_grid(3.0, 301), 10.0, 1001).unwrap();
        let v = h.values();
        for i in 1..v.len() {
            prop_assert!(v[i] <= v[i - 1] + 1e-12);
        }
        for i in 1..v.len() - 1 {
            prop_assert!(v[i] <= 0.5 * (v[i - 1] + v[i + 1]) + 1e-10);
        }
        // equality in Fenchel-Young at the tabulated maximiser
        for (i, &a) in h.a_grid().iter().enumerate() {
            let b = h.maximisers()[i];
            prop_assert!((v[i] + a * b + cost.eval(b)).abs() <= 1e-9 * (1.0 + v[i].abs()));
            prop_assert!(b >= 0.0);
        }
    }

    #[test]
    fn mot_maximum_principle_and_positive_control(
        u1 in prop::collection::vec(-0.1f64..0.1, 21),
        u2 in prop::collection::vec(-0.1f64..0.1, 21),
    ) {
        let h = quadratic_h();
        let g = Grid1D::uniform(-2.0, 2.0, 21).unwrap();
        let tg = TimeGrid::with_max_step(0.0, 0.5, 1.0, 0.9 * mot_bridge::hj_solver::mot_stable_dt(&g, h.max_control())).unwrap();
        let sol = solve_hj_mot(&h, &u1, &u2, &g, &tg).unwrap();
        let lo = u2.iter().cloned().fold(f64::INFINITY, f64::min) + u1.iter().cloned().fold(0.0, f64::min);
        let hi = u2.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + u1.iter().cloned().fold(0.0, f64::max);
        for layer in &sol.layers {
            for &v in layer {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
        for c in &sol.controls {
            prop_assert!(c.iter().all(|&b| b >= 0.0));
        }
    }
}

fn small_mot(t0: f64, mu1: &GridMeasure) -> MotProblem {
    let g = mu1.grid().clone();
    let mu0 = GridMeasure::from_atoms(g.clone(), &[(0.0, 1.0)]).unwrap();
    let mu2 = spread(&spread(mu1, &[0.5; 9]), &[0.5; 9]);
    MotProblem::new(mu0, mu1.clone(), mu2, (t0, 1.0, 2.0), quadratic_h(), 0.9).unwrap()
}

fn centred(g: &Grid1D, half: &[f64]) -> GridMeasure {
    // symmetric weights around 0 keep the mean at 0
    let n = g.len();
    let mut w = vec![0.0; n];
    for (k, &v) in half.iter().enumerate() {
        w[n / 2 + k] += v;
        w[n / 2 - k] += v;
    }
    measure(g, &w)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dual_is_invariant_to_constant_jump(
        u1 in prop::collection::vec(-1.0f64..1.0, 9),
        u2 in prop::collection::vec(-1.0f64..1.0, 9),
        c in -2.0f64..2.0,
        half in prop::collection::vec(0.0f64..1.0, 3),
    ) {
        let p = small_mot(0.0, &centred(&line(), &[half[0] + 0.1, half[1], half[2]]));
        let shifted: Vec<f64> = u1.iter().map(|v| v + c).collect();
        let (a, _) = dual_objective(&p, &u1, &u2).unwrap();
        let (b, _) = dual_objective(&p, &shifted, &u2).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn late_start_ignores_mu1(
        u1 in prop::collection::vec(-1.0f64..1.0, 9),
        u2 in prop::collection::vec(-1.0f64..1.0, 9),
        a in prop::collection::vec(0.0f64..1.0, 3),
        b in prop::collection::vec(0.0f64..1.0, 3),
    ) {
        let g = line();
        let p = small_mot(1.5, &centred(&g, &[a[0] + 0.1, a[1], a[2]]));
        let q = small_mot(1.5, &centred(&g, &[b[0] + 0.1, b[1], b[2]]));
        let q = MotProblem { mu2: p.mu2.clone(), ..q };
        prop_assert_eq!(dual_objective(&p, &u1, &u2).unwrap().0, dual_objective(&q, &u1, &u2).unwrap().0);
    }

    #[test]
    fn accepted_ascent_steps_never_decrease(half in prop::collection::vec(0.0f64..1.0, 3)) {
        let p = small_mot(0.0, &centred(&line(), &[half[0] + 0.1, half[1], half[2]]));
        let cfg = AscentConfig { max_iters: 25, ..AscentConfig::default() };
        let st = ascend(DualState::zero(9), &p, &cfg).unwrap();
        let accepted: Vec<f64> = st.history.iter().filter(|r| r.accepted).map(|r| r.value).collect();
        for w in accepted.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12);
        }
    }

    #[test]
    fn oracle_solutions_are_certified(half in prop::collection::vec(0.0f64..1.0, 3), f in 0.2f64..0.9) {
        let g = line();
        let mu1 = centred(&g, &[half[0] + 0.1, half[1], half[2]]);
        let mu2 = spread(&mu1, &[f; 9]);
        let inst = DiscreteMotInstance {
            grid: g.clone(),
            t0: 0.0,
            t1: 1.0,
            t2: 2.0,
            steps: (1, 1),
            mu0: GridMeasure::from_atoms(g.clone(), &[(0.0, 1.0)]).unwrap(),
            mu1,
            mu2,
            cost: Lagrangian::Quadratic { gamma: 1.0 },
        };
        let r = solve_discrete_mot(&inst).unwrap();
        prop_assert!(r.min_reduced_cost >= -1e-9);
        prop_assert!(r.primal_residual <= 1e-8);
        prop_assert!(r.value >= 0.0);
    }
}

fn heston() -> SvmModel {
    make_heston(1.5, 0.04, 0.3, -0.3, (0.01, 1.0)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn bridge_y_gradient_is_continuous_at_t1(
        u1 in prop::collection::vec(-1.0f64..1.0, 21),
        u2 in prop::collection::vec(-1.0f64..1.0, 21),
    ) {
        let g = Grid2D::new(Grid1D::uniform(0.5, 1.5, 21).unwrap(), Grid1D::uniform(0.01, 0.13, 7).unwrap()).unwrap();
        let gen = Generator2D::new(&heston(), &g, Coordinates::Price).unwrap();
        let tg = TimeGrid::with_max_step(0.0, 0.25, 0.5, 0.5 / gen.max_rate()).unwrap();
        let sol = solve_hj_sb_with(&gen, &u1, &u2, &tg).unwrap();
        prop_assert!(jump_y_gradient_gap(&sol) <= 1e-9);
    }

    #[test]
    fn bridge_entropy_is_nonnegative(
        amp1 in -0.5f64..0.5,
        amp2 in -0.5f64..0.5,
        seed in 0u64..1000,
    ) {
        let g = Grid1D::uniform(0.5, 1.5, 21).unwrap();
        let flat = GridMeasure::from_atoms(g.clone(), &[(1.0, 1.0)]).unwrap();
        let spec = SvmSpec { model: heston(), x0: 1.0, y0: 0.04 };
        let p = SbProblem::new(spec, flat.clone(), flat, (0.0, 0.25, 0.5), Grid1D::uniform(0.01, 0.13, 7).unwrap(), 0.5).unwrap();
        let u1 = g.map(|x| amp1 * (x - 1.0).powi(2));
        let u2 = g.map(|x| amp2 * (x - 1.0).abs());
        let (_, sol) = sb_dual_objective(&p, &u1, &u2).unwrap();
        let r = optimal_density_report(&p, &sol, 2000, seed).unwrap();
        prop_assert!(r.entropy_weights >= -3.0 * r.entropy_weights_se);
    }

    #[test]
    fn simulated_prices_stay_positive(
        sigma in 0.1f64..1.5,
        xi in 0.1f64..0.8,
        heston_model in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let model = if heston_model {
            make_heston(1.0, 0.09, xi, -0.5, (0.01, 2.0)).unwrap()
        } else {
            SvmModel::Constant { sigma_tilde: sigma, b: 0.0, tau1: 0.0, tau2: 0.1 }
        };
        let tg = TimeGrid::new(0.0, 0.5, 1.0, (20, 20)).unwrap();
        let setup = SimulationSetup {
            model: &model,
            x0: 1.0,
            y0: 0.09,
            time: &tg,
            control: None,
            sampling: Sampling::Reference,
            record: (0..=tg.n_steps()).collect(),
        };
        let ens = simulate(&setup, 500, seed).unwrap();
        for row in &ens.x {
            prop_assert!(row.iter().all(|&x| x > 0.0 && x.is_finite()));
        }
    }
}

fn constant_vix(sigma: f64) -> (VixInstance, VixGrids) {
    let model = SvmModel::Constant { sigma_tilde: sigma, b: 0.0, tau1: 0.0, tau2: 0.2 };
    let g = Grid1D::uniform(0.5, 1.5, 21).unwrap();
    let inst = VixInstance {
        spec: SvmSpec { model, x0: 1.0, y0: 1.0 },
        mu1: GridMeasure::from_atoms(g.clone(), &[(0.9, 0.5), (1.1, 0.5)]).unwrap(),
        mu2: GridMeasure::from_atoms(g, &[(0.8, 0.5), (1.2, 0.5)]).unwrap(),
        mu3: GridMeasure::from_atoms(Grid1D::uniform(0.0, 0.02, 11).unwrap(), &[(0.004, 1.0)]).unwrap(),
        t0: 0.0,
        t1: 0.1,
        t2: 0.2,
    };
    let grids = VixGrids::new(&inst, Grid1D::uniform(-0.8, 0.8, 17).unwrap(), Grid1D::uniform(0.5, 1.5, 3).unwrap(), 2.0, 11, 21, 0.5).unwrap();
    (inst, grids)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn heston_draws_satisfy_a3(
        kappa in 0.2f64..5.0,
        theta in 0.005f64..0.5,
        xi in 0.05f64..1.5,
        rho in -0.95f64..0.95,
        lo in 0.001f64..0.05,
        width in 0.5f64..4.0,
    ) {
        let m = make_heston(kappa, theta, xi, rho, (lo, lo + width)).unwrap();
        let r = check_assumptions(&m, Assumption::A3, SampleGrid { x: (0.5, 1.5), y: (0.0, 5.0), n: 41 });
        prop_assert!(r.pass, "{:?}", r.clauses);
    }

    #[test]
    fn vix_dual_shift_and_bounds(
        sigma in 0.5f64..1.5,
        amp1 in -0.3f64..0.3,
        amp2 in -0.3f64..0.3,
        s0 in -3.0f64..0.0,
        s1 in 0.0f64..3.0,
        c in -1.0f64..1.0,
    ) {
        let (inst, grids) = constant_vix(sigma);
        let u1 = inst.mu1.grid().map(|x| amp1 * (x - 1.0).abs());
        let u2 = inst.mu2.grid().map(|x| amp2 * (x - 1.0).powi(2));
        let u3 = ConvexPiecewise::new(vec![0.0, 0.004, 0.01], 0.02, vec![s0, 0.5 * (s0 + s1), s1]).unwrap();
        let a = vix_dual_value(&inst, &u1, &u2, &u3, &grids).unwrap();
        let b = vix_dual_value(&inst, &u1, &u2, &u3.shifted(c), &grids).unwrap();
        prop_assert!((a.dual_value - b.dual_value).abs() <= 1e-9);
        prop_assert_eq!(a.phi_bound_violation, 0.0);
        prop_assert!(a.concavity_violation <= 1e-9);
    }
}
