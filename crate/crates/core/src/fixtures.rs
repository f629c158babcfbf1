//! Seeded random instances for tests and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mpc::{build_qcqp, QcqpProblem, WeightSchedule};
use crate::platoon::{PlatoonConfig, PlatoonState};
use crate::solvers::solve_centralized;

#[derive(Debug, Clone)]
pub struct Instance {
    pub cfg: PlatoonConfig,
    pub weights: WeightSchedule,
    pub state: PlatoonState,
    pub prob: QcqpProblem,
}

/// Perturb the steady platoon at 22 m/s by up to `spread` (scaled to 5 m of
/// position and 4 m/s of speed).
pub fn perturbed_state<R: Rng>(cfg: &PlatoonConfig, rng: &mut R, spread: f64) -> PlatoonState {
    let mut st = PlatoonState::steady(cfg, 22.0);
    for i in 0..=cfg.n {
        st.x[i] += rng.random_range(-spread..=spread) * 5.0;
        st.v[i] = (st.v[i] + rng.random_range(-spread..=spread) * 4.0).clamp(cfg.v_min + 1.0, cfg.v_max - 0.5);
    }
    st.u0 = rng.random_range(-spread..=spread);
    st
}

/// Random instance with a nonempty feasible set, found by rejection through
/// the centralized solver. Uses the reference weights when `n == 10`.
pub fn random_instance(seed: u64, n: usize, p: usize, spread: f64) -> Instance {
    let cfg = PlatoonConfig { n, ..PlatoonConfig::reference(p) };
    let weights = if n == 10 { WeightSchedule::reference(p) } else { WeightSchedule::uniform(n, p, 1.0, 0.5, 0.2) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..200 {
        let state = perturbed_state(&cfg, &mut rng, spread);
        if state.validate(&cfg).is_err() {
            continue;
        }
        let Ok(prob) = build_qcqp(&state, &cfg, &weights) else { continue };
        if solve_centralized(&prob, 1e-9).is_ok() {
            return Instance { cfg, weights, state, prob };
        }
    }
    panic!("no feasible instance found for seed {seed}");
}
