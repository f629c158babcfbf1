use nalgebra::{DMatrix, DVector};
use platoon_core::fixtures::{random_instance, Instance};
use platoon_core::solvers::{relative_error, warmup_initial_guess, Exec, StopRule, WarmStart};
use platoon_core::{
    build_qcqp, decompose_pd, solve, solve_centralized, solve_with_warm_start, stage_blocks, AugmentedVar, DeltaRule,
    DistributedProblem, PlatoonConfig, PlatoonState, QcqpProblem, SolverParams, Variant, WeightSchedule,
};

fn distributed(prob: &QcqpProblem, cfg: &PlatoonConfig, w: &WeightSchedule) -> DistributedProblem {
    let dec = decompose_pd(&stage_blocks(w, cfg).unwrap(), DeltaRule::default()).unwrap();
    DistributedProblem::new(prob, &dec).unwrap()
}

fn tight(variant: Variant) -> SolverParams {
    SolverParams {
        tol: 1e-10,
        stop: StopRule::Global,
        max_iters: 200_000,
        warm_start: WarmStart::Zero,
        ..SolverParams::reference(1).with_variant(variant)
    }
}

fn instance_dp(inst: &Instance) -> DistributedProblem {
    distributed(&inst.prob, &inst.cfg, &inst.weights)
}

#[test]
fn steady_platoon_stays_put() {
    for p in [1, 3] {
        let cfg = PlatoonConfig::reference(p);
        let w = WeightSchedule::reference(p);
        let prob = build_qcqp(&PlatoonState::steady(&cfg, 25.0), &cfg, &w).unwrap();
        let dp = distributed(&prob, &cfg, &w);
        for v in [Variant::Dr, Variant::ThreeOp, Variant::ThreeOpAccel] {
            let rep = solve_with_warm_start(&dp, &SolverParams::reference(p).with_variant(v), None).unwrap();
            assert!(rep.converged);
            assert!(rep.u_star.iter().all(|u| u.abs() < 1e-12), "{v:?}: {:?}", rep.u_star);
        }
    }
}

#[test]
fn variants_agree_with_centralized() {
    for seed in 0..6 {
        let (n, p) = (2 + seed as usize % 5, 1 + seed as usize % 3);
        let inst = random_instance(seed, n, p, 0.6);
        let oracle = solve_centralized(&inst.prob, 1e-11).unwrap().u;
        let dp = instance_dp(&inst);
        for v in [Variant::Dr, Variant::ThreeOp, Variant::ThreeOpAccel] {
            let rep = solve(&dp, &tight(v), &AugmentedVar::zeros(&dp.layout)).unwrap();
            assert!(rep.converged, "seed {seed} {v:?}");
            let err = relative_error(&rep.u_star, &oracle);
            assert!(err <= 1e-5, "seed {seed} {v:?}: relative error {err:e} after {} iterations", rep.iterations);
        }
    }
}

#[test]
fn dr_on_four_vehicles_two_stages() {
    let inst = random_instance(42, 4, 2, 0.8);
    let oracle = solve_centralized(&inst.prob, 1e-11).unwrap().u;
    let params = SolverParams { tol: 1e-7, ..tight(Variant::Dr) };
    let rep = solve(&instance_dp(&inst), &params, &AugmentedVar::zeros(&instance_dp(&inst).layout)).unwrap();
    assert!(relative_error(&rep.u_star, &oracle) <= 1e-5);
}

#[test]
fn sequential_and_parallel_are_bit_identical() {
    let inst = random_instance(3, 6, 3, 0.6);
    let dp = instance_dp(&inst);
    for v in [Variant::Dr, Variant::ThreeOp, Variant::ThreeOpAccel] {
        let seq = SolverParams { exec: Exec::Sequential, trace: true, ..SolverParams::reference(3).with_variant(v) };
        let par = SolverParams { exec: Exec::Parallel, ..seq.clone() };
        let a = solve_with_warm_start(&dp, &seq, None).unwrap();
        let b = solve_with_warm_start(&dp, &par, None).unwrap();
        assert_eq!(a.u_star, b.u_star);
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.trace, b.trace);
    }
}

#[test]
fn three_op_step_size_is_validated() {
    let inst = random_instance(1, 3, 1, 0.5);
    let dp = instance_dp(&inst);
    let z0 = AugmentedVar::zeros(&dp.layout);
    let at_bound = SolverParams { gamma: Some(2.0 / dp.lipschitz), ..tight(Variant::ThreeOp) };
    assert!(solve(&dp, &at_bound, &z0).is_err());
    let accel_bound = SolverParams { gamma: Some(2.0 / (dp.lipschitz * 0.8)), eta: 0.2, ..tight(Variant::ThreeOpAccel) };
    assert!(solve(&dp, &accel_bound, &z0).is_err());
}

#[test]
fn local_rule_stops_every_agent_together() {
    let inst = random_instance(8, 5, 2, 0.6);
    let dp = instance_dp(&inst);
    let params = SolverParams { trace: true, ..SolverParams::reference(2) };
    let rep = solve_with_warm_start(&dp, &params, None).unwrap();
    assert!(rep.converged);
    assert_eq!(rep.trace.len(), rep.iterations);
    // Every iteration spends two projection rounds plus a flag flood of diameter rounds.
    assert_eq!(rep.comm_rounds, 2 + rep.iterations * (2 + dp.layout.graph.diameter()));
    assert!(*rep.trace.last().unwrap() <= params.tol);
}

#[test]
fn dr_output_is_feasible() {
    for seed in 10..16 {
        let inst = random_instance(seed, 5, 3, 0.9);
        let rep = solve_with_warm_start(&instance_dp(&inst), &SolverParams::reference(3), None).unwrap();
        let m = inst.prob.check_membership(&rep.u_star, 1e-6);
        // Own blocks come from prox outputs, which satisfy each vehicle's own
        // box rows exactly.
        for v in &m.vehicles {
            assert!(v.accel.iter().chain(&v.speed).all(|&s| s >= -1e-9));
        }
    }
}

// Centralized reference ------------------------------------------------------

#[test]
fn centralized_unconstrained_is_newton_step() {
    let cfg = PlatoonConfig::reference(2);
    let w = WeightSchedule::reference(2);
    let mut st = PlatoonState::steady(&cfg, 22.0);
    st.x[0] += 0.4;
    st.v[3] -= 0.2;
    let prob = build_qcqp(&st, &cfg, &w).unwrap();
    let newton = -prob.dense_hessian().cholesky().unwrap().solve(&prob.dense_c());
    let got = solve_centralized(&prob, 1e-12).unwrap();
    assert!(prob.check_membership(newton.as_slice(), 0.0).feasible);
    assert!((DVector::from_vec(got.u) - newton).amax() < 1e-12);
}

/// Minimize the two-vehicle single-stage objective with every bound pattern
/// fixed in turn (free, at `a_min`, at `a_max` for each vehicle).
fn box_enumeration(prob: &QcqpProblem, lo: f64, hi: f64) -> (Vec<f64>, f64) {
    let w = prob.dense_hessian();
    let c = prob.dense_c();
    let mut best = (Vec::new(), f64::INFINITY);
    for pattern in 0..9 {
        let fix = [pattern % 3, pattern / 3].map(|k| [None, Some(lo), Some(hi)][k]);
        let free: Vec<usize> = (0..2).filter(|&i| fix[i].is_none()).collect();
        let mut u = [fix[0].unwrap_or(0.0), fix[1].unwrap_or(0.0)];
        if !free.is_empty() {
            let k = free.len();
            let a = DMatrix::from_fn(k, k, |r, s| w[(free[r], free[s])]);
            let rhs = DVector::from_fn(k, |r, _| {
                -c[free[r]] - (0..2).filter(|j| fix[*j].is_some()).map(|j| w[(free[r], j)] * u[j]).sum::<f64>()
            });
            let x = a.cholesky().unwrap().solve(&rhs);
            for (r, &i) in free.iter().enumerate() {
                u[i] = x[r];
            }
        }
        if u.iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12) {
            let f = prob.eval_objective(&u);
            if f < best.1 {
                best = (u.to_vec(), f);
            }
        }
    }
    best
}

#[test]
fn centralized_matches_box_enumeration() {
    let cfg = PlatoonConfig { n: 2, ..PlatoonConfig::reference(1) };
    let w = WeightSchedule::uniform(2, 1, 4.0, 1.0, 0.3);
    for (gap0, gap1) in [(70.0, 50.0), (62.0, 61.0), (50.0, 75.0), (75.0, 40.0)] {
        let st = PlatoonState { x: vec![0.0, -gap0, -gap0 - gap1], v: vec![20.0; 3], u0: 0.0, k: 0 };
        let prob = build_qcqp(&st, &cfg, &w).unwrap();
        let (u, f) = box_enumeration(&prob, cfg.a_min, cfg.a_max);
        let m = prob.check_membership(&u, 0.0);
        assert!(m.vehicles.iter().all(|v| v.safety[0] > 1.0 && v.speed[0] > 1.0), "only boxes may bind");
        let got = solve_centralized(&prob, 1e-12).unwrap().u;
        // A bound can be weakly active, where the interior point iterate only
        // approaches it at the square root of the complementarity gap.
        assert!((got[0] - u[0]).abs() < 1e-5 && (got[1] - u[1]).abs() < 1e-5, "{got:?} vs {u:?}");
        assert!((prob.eval_objective(&got) - f).abs() <= 1e-9 * f.abs().max(1.0));
    }
    // The first pattern really does saturate.
    let st = PlatoonState { x: vec![0.0, -70.0, -120.0], v: vec![20.0; 3], u0: 0.0, k: 0 };
    let prob = build_qcqp(&st, &cfg, &w).unwrap();
    assert!((solve_centralized(&prob, 1e-12).unwrap().u[0] - cfg.a_max).abs() < 1e-8);
}

// Local proximal step ----------------------------------------------------------

#[test]
fn prox_without_active_rows_is_closed_form() {
    let inst = random_instance(2, 4, 2, 0.2);
    let dp = instance_dp(&inst);
    let rho = 0.3;
    for a in &dp.agents {
        let point = DVector::from_element(a.dim(), 0.05);
        let s = a.prox(&point, rho).unwrap();
        let h = &a.hess * rho + DMatrix::identity(a.dim(), a.dim());
        let closed = -h.cholesky().unwrap().solve(&(&a.lin * rho - &point));
        if a.constraint_values(&closed).iter().all(|&g| g < -1e-6) {
            assert_eq!(s.iterations, 0);
            assert!((&s.x - closed).amax() < 1e-12);
        }
    }
}

/// A last-vehicle agent at `p = 1` (two variables) squeezed against its predecessor.
fn squeezed_agent() -> (DistributedProblem, usize) {
    let cfg = PlatoonConfig { n: 3, ..PlatoonConfig::reference(1) };
    let w = WeightSchedule::uniform(3, 1, 2.0, 1.0, 0.5);
    let st = PlatoonState { x: vec![0.0, -50.0, -100.0, -137.0], v: vec![20.0, 20.0, 20.0, 22.0], u0: 0.0, k: 0 };
    let prob = build_qcqp(&st, &cfg, &w).unwrap();
    (distributed(&prob, &cfg, &w), 2)
}

#[test]
fn prox_matches_grid_search_with_active_safety() {
    let (dp, i) = squeezed_agent();
    let a = &dp.agents[i];
    assert_eq!(a.dim(), 2);
    // A small rho makes the prox nearly the projection of an unsafe point.
    let rho = 0.01;
    let point = DVector::from_vec(vec![0.0, 1.0]);
    let s = a.prox(&point, rho).unwrap();
    assert!(s.iterations > 0, "the safety row should bind");
    let f = |x: &DVector<f64>| a.objective(x) + (x - &point).norm_squared() / (2.0 * rho);
    let feasible = |x: &DVector<f64>| a.constraint_values(x).iter().all(|&g| g <= 0.0);

    // Coarse grid over the box, then two zoomed refinements.
    let (mut center, mut half, mut best) = (DVector::from_vec(vec![-3.3, -3.3]), 4.7, f64::INFINITY);
    for _ in 0..3 {
        let mut arg = center.clone();
        for r in 0..=400 {
            for c in 0..=400 {
                let x = DVector::from_vec(vec![
                    center[0] - half + 2.0 * half * r as f64 / 400.0,
                    center[1] - half + 2.0 * half * c as f64 / 400.0,
                ]);
                if feasible(&x) && f(&x) < best {
                    best = f(&x);
                    arg = x;
                }
            }
        }
        center = arg;
        half /= 50.0;
    }
    assert!(a.constraint_values(&s.x).max() <= 1e-9);
    assert!(f(&s.x) <= best + 1e-9, "prox {} vs grid {}", f(&s.x), best);

    // Polish the grid point by Newton on the KKT system of the binding row.
    let vals = a.constraint_values(&center);
    let row = vals.argmax().0;
    let g = |x: &DVector<f64>| a.constraint_values(x)[row];
    let h = 1e-3;
    let e = |k: usize| DVector::from_fn(2, |r, _| if r == k { h } else { 0.0 });
    let hf = &a.hess + DMatrix::identity(2, 2) / rho;
    let mut x = center.clone();
    let mut lam = 0.0;
    for _ in 0..30 {
        // g is quadratic, so central differences are exact up to rounding.
        let dg = DVector::from_fn(2, |k, _| (g(&(&x + e(k))) - g(&(&x - e(k)))) / (2.0 * h));
        let hg = DMatrix::from_fn(2, 2, |r, c| {
            (g(&(&x + e(r) + e(c))) - g(&(&x + e(r) - e(c))) - g(&(&x - e(r) + e(c))) + g(&(&x - e(r) - e(c))))
                / (4.0 * h * h)
        });
        let grad_f = &a.hess * &x + &a.lin + (&x - &point) / rho;
        let kkt = DMatrix::from_fn(3, 3, |r, c| match (r, c) {
            (2, 2) => 0.0,
            (2, c) => dg[c],
            (r, 2) => dg[r],
            (r, c) => hf[(r, c)] + lam * hg[(r, c)],
        });
        let rhs = DVector::from_vec(vec![-(grad_f[0] + lam * dg[0]), -(grad_f[1] + lam * dg[1]), -g(&x)]);
        let d = kkt.lu().solve(&rhs).unwrap();
        x += d.rows(0, 2);
        lam += d[2];
    }
    assert!(lam > 0.0, "binding row has a positive multiplier");
    assert!((&s.x - &x).norm() < 1e-7, "{:?} vs {:?}", s.x, x);
    assert!(g(&s.x).abs() < 1e-8, "an active row sits at zero");
}

#[test]
fn prox_output_is_stationary() {
    let (dp, i) = squeezed_agent();
    let a = &dp.agents[i];
    let rho = 0.01;
    let point = DVector::from_vec(vec![0.0, 1.0]);
    let x = a.prox(&point, rho).unwrap().x;
    let f = |y: &DVector<f64>| a.objective(y) + (y - &point).norm_squared() / (2.0 * rho);
    let h = 1e-6;
    let grad = DVector::from_fn(2, |k, _| {
        let mut e = DVector::zeros(2);
        e[k] = h;
        (f(&(&x + &e)) - f(&(&x - &e))) / (2.0 * h)
    });
    for t in [1e-3, 1e-2, 0.1] {
        let back = a.project(&(&x - &grad * t)).unwrap().x;
        assert!((back - &x).norm() <= 1e-7, "step {t}");
    }
}

// Warm start -------------------------------------------------------------------

#[test]
fn warmup_from_zero_state_is_zero() {
    let cfg = PlatoonConfig::reference(3);
    let w = WeightSchedule::reference(3);
    let prob = build_qcqp(&PlatoonState::steady(&cfg, 20.0), &cfg, &w).unwrap();
    let (z, iters) = warmup_initial_guess(&distributed(&prob, &cfg, &w), &SolverParams::reference(3)).unwrap();
    assert_eq!(iters, 1);
    assert!(z.flatten().iter().all(|x| *x == 0.0));
}

#[test]
fn warmup_is_nearly_optimal_when_nothing_binds() {
    let cfg = PlatoonConfig::reference(2);
    let w = WeightSchedule::reference(2);
    let mut st = PlatoonState::steady(&cfg, 22.0);
    st.x[0] += 0.5;
    let prob = build_qcqp(&st, &cfg, &w).unwrap();
    let dp = distributed(&prob, &cfg, &w);
    let warm = SolverParams { warm_start: WarmStart::WarmupProjection, ..SolverParams::reference(2) };
    let cold = SolverParams { warm_start: WarmStart::Zero, ..warm.clone() };
    let a = solve_with_warm_start(&dp, &warm, None).unwrap();
    let b = solve_with_warm_start(&dp, &cold, None).unwrap();
    assert!(a.warmup_iterations > 0);
    assert!(a.iterations <= 5, "{} iterations after warm-up", a.iterations);
    assert!(a.iterations < b.iterations);
}
