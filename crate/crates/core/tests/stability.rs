use nalgebra::DVector;
use platoon_core::platoon::{error_coords, step_dynamics};
use platoon_core::stability::{
    e_tilde, eigen_bounds_check, gen_weight_schedule, schur_margin, two_stage_reduction, ScheduleSpec,
};
use platoon_core::{build_closed_loop, build_qcqp, PlatoonConfig, PlatoonState, WeightSchedule};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn reference_spectral_radii() {
    let rho = |p| build_closed_loop(&PlatoonConfig::reference(p), &WeightSchedule::reference(p)).unwrap().rho;
    assert!((rho(1) - 0.8498).abs() <= 1e-3, "{}", rho(1));
    for p in 2..=5 {
        assert!((rho(p) - 0.8376).abs() <= 1e-3, "p = {p}: {}", rho(p));
    }
}

#[test]
fn alternative_spacing_decay_is_less_damped() {
    let w = gen_weight_schedule(&ScheduleSpec::alt(), 5).unwrap();
    let rho = build_closed_loop(&PlatoonConfig::reference(5), &w).unwrap().rho;
    assert!((rho - 0.8462).abs() < 5e-4, "{rho}");
}

#[test]
fn blocks_decouple_the_loop() {
    for p in 1..=5 {
        let m = build_closed_loop(&PlatoonConfig::reference(p), &WeightSchedule::reference(p)).unwrap();
        let e = e_tilde(m.n);
        let b = e.transpose() * &m.a_c * &e;
        for r in 0..2 * m.n {
            for c in 0..2 * m.n {
                if r / 2 != c / 2 {
                    assert!(b[(r, c)].abs() <= 1e-12);
                }
            }
        }
        for (i, v) in m.vehicles.iter().enumerate() {
            for r in 0..2 {
                for c in 0..2 {
                    assert!((b[(2 * i + r, 2 * i + c)] - v.block[(r, c)]).abs() <= 1e-12);
                }
            }
        }
        assert!((m.rho_dense() - m.rho).abs() <= 1e-10, "p = {p}");
    }
}

/// Apply the unconstrained minimizer each step and compare the realized errors
/// with the linear closed-loop recursion.
#[test]
fn rollout_follows_closed_loop_matrix() {
    for p in [1, 3, 5] {
        let cfg = PlatoonConfig::reference(p);
        let w = WeightSchedule::reference(p);
        let model = build_closed_loop(&cfg, &w).unwrap();
        let mut st = PlatoonState::steady(&cfg, 22.0);
        st.x[3] -= 1.5;
        st.v[6] += 0.4;
        let u0 = |k: usize| if (20..24).contains(&k) { -1.0 } else if (60..64).contains(&k) { 1.0 } else { 0.0 };
        st.u0 = u0(0);
        let e0 = error_coords(&st, &cfg);
        let (mut z, mut zp) = (e0.z, e0.zp);
        for k in 0..200 {
            let prob = build_qcqp(&st, &cfg, &w).unwrap();
            let u = prob.dense_hessian().cholesky().unwrap().solve(&(-prob.dense_c()));
            let first: Vec<f64> = (0..cfg.n).map(|i| u[i * p]).collect();
            (z, zp) = model.step(&z, &zp, st.u0);
            st = step_dynamics(&st, cfg.tau, &first, u0(k + 1));
            let e = error_coords(&st, &cfg);
            let dev = DVector::from_vec(e.z.iter().chain(&e.zp).zip(z.iter().chain(&zp)).map(|(a, b)| a - b).collect());
            assert!(dev.amax() <= 1e-8, "p = {p}, step {k}: {}", dev.amax());
        }
    }
}

#[test]
fn two_stage_identity_and_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let tau = rng.random_range(0.2..2.0);
        let s1 = [0; 3].map(|_| rng.random_range(0.01..10.0));
        let s2 = [0; 3].map(|_| rng.random_range(0.0..10.0));
        let [a, b, g, d] = two_stage_reduction(tau, s1, s2);
        assert!(a > 0.0 && b > 0.0 && g > 0.0);
        assert!((tau * tau / 4.0 * a + b + g - d).abs() <= 1e-10 * d);

        // The two-stage loop of one vehicle equals the one-stage loop with
        // the reduced weights.
        let cfg2 = PlatoonConfig { n: 2, tau, reaction: tau, ..PlatoonConfig::reference(2) };
        let w2 = WeightSchedule {
            alpha: vec![vec![s1[0]; 2], vec![s2[0]; 2]],
            beta: vec![vec![s1[1]; 2], vec![s2[1]; 2]],
            zeta: vec![vec![s1[2]; 2], vec![s2[2].max(1e-9); 2]],
        };
        let cfg1 = PlatoonConfig { p: 1, ..cfg2.clone() };
        let w1 = WeightSchedule::uniform(2, 1, a, b, g);
        let m2 = build_closed_loop(&cfg2, &w2).unwrap();
        let m1 = build_closed_loop(&cfg1, &w1).unwrap();
        assert!(m2.rho < 1.0);
        let diff = (m2.vehicles[0].block - m1.vehicles[0].block).abs().max();
        assert!(diff <= 1e-10, "{diff}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn single_stage_eigenvalue_formulas(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=10);
        let tau = rng.random_range(0.2..2.0);
        let mut draw = |lo: f64| vec![(0..n).map(|_| 10f64.powf(rng.random_range(-2.0..2.0)) + lo).collect::<Vec<_>>()];
        let w = WeightSchedule { alpha: draw(0.0), beta: draw(0.0), zeta: draw(0.0) };
        let cfg = PlatoonConfig { n, tau, reaction: tau, ..PlatoonConfig::reference(1) };
        let m = build_closed_loop(&cfg, &w).unwrap();
        for b in eigen_bounds_check(&m, &w, 1e-10).unwrap() {
            prop_assert!(b.holds, "vehicle {}: error {:e}", b.vehicle, b.error);
        }
    }
}

#[test]
fn tail_margin_starts_from_two_stage_loop() {
    let cfg = PlatoonConfig::reference(4);
    let w = WeightSchedule::reference(4);
    let margin = schur_margin(&cfg, &w, 1e3).unwrap();
    let two = build_closed_loop(&PlatoonConfig::reference(2), &WeightSchedule::reference(2)).unwrap();
    let truncated = WeightSchedule {
        alpha: w.alpha.iter().take(2).cloned().collect(),
        beta: w.beta.iter().take(2).cloned().collect(),
        zeta: w.zeta.iter().take(2).cloned().collect(),
    };
    assert_eq!(truncated, WeightSchedule::reference(2));
    // Without tail spacing weights the later controls only cost comfort and
    // drop out, leaving the two-stage loop.
    assert!((margin.rho_at_zero - two.rho).abs() <= 1e-10, "{} vs {}", margin.rho_at_zero, two.rho);
    assert!(build_closed_loop(&cfg, &w).unwrap().rho < 1.0);
}
