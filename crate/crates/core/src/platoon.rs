//! Physical platoon model: configuration, state, leader profiles, the
//! double-integrator dynamics and the spacing-error coordinates.
//!
//! Vehicles are indexed `0..=n` with index 0 the uncontrolled leader. Controlled
//! vehicles are `1..=n`; vectors over controlled vehicles (`u`, `z`, `zp`, `w`)
//! are stored 0-based, so entry `i` belongs to vehicle `i + 1`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical and horizon parameters shared by every module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlatoonConfig {
    /// Number of controlled vehicles.
    pub n: usize,
    /// MPC horizon in stages.
    pub p: usize,
    /// Sample time [s].
    pub tau: f64,
    /// Desired spacing [m].
    pub delta: f64,
    /// Length constant of the safety distance [m].
    pub veh_len: f64,
    /// Reaction time [s].
    pub reaction: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for PlatoonConfig {
    fn default() -> Self {
        Self::reference(1)
    }
}

impl PlatoonConfig {
    /// Ten CAVs with the physical limits of the reference experiments.
    pub fn reference(p: usize) -> Self {
        Self {
            n: 10,
            p,
            tau: 1.0,
            delta: 50.0,
            veh_len: 5.0,
            reaction: 1.0,
            a_min: -8.0,
            a_max: 1.35,
            v_min: 10.0,
            v_max: 27.78,
        }
    }

    pub fn with_horizon(mut self, p: usize) -> Self {
        self.p = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        let finite = [
            self.tau,
            self.delta,
            self.veh_len,
            self.reaction,
            self.a_min,
            self.a_max,
            self.v_min,
            self.v_max,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite {
            return bad("non-finite parameter");
        }
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if self.p < 1 {
            return bad("horizon p must be at least 1");
        }
        if self.tau <= 0.0 {
            return bad("tau must be positive");
        }
        if !(self.a_min < 0.0 && 0.0 < self.a_max) {
            return bad("need a_min < 0 < a_max");
        }
        if !(0.0 <= self.v_min && self.v_min < self.v_max) {
            return bad("need 0 <= v_min < v_max");
        }
        if self.reaction < self.tau {
            return bad("reaction time must be >= tau");
        }
        Ok(())
    }
}

/// Positions and speeds of the leader (index 0) and the `n` CAVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatoonState {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    /// Leader acceleration at time `k`.
    pub u0: f64,
    pub k: usize,
}

impl PlatoonState {
    /// Equally spaced platoon at the desired spacing, everyone at `speed`.
    pub fn steady(cfg: &PlatoonConfig, speed: f64) -> Self {
        let x = (0..=cfg.n).map(|i| -(i as f64) * cfg.delta).collect();
        Self {
            x,
            v: vec![speed; cfg.n + 1],
            u0: 0.0,
            k: 0,
        }
    }

    /// Number of controlled vehicles.
    pub fn n(&self) -> usize {
        self.x.len().saturating_sub(1)
    }

    pub fn validate(&self, cfg: &PlatoonConfig) -> Result<()> {
        if self.x.len() != cfg.n + 1 || self.v.len() != cfg.n + 1 {
            return Err(Error::InvalidState(format!(
                "expected {} positions and speeds, got {} and {}",
                cfg.n + 1,
                self.x.len(),
                self.v.len()
            )));
        }
        if !self.x.iter().chain(&self.v).all(|x| x.is_finite()) || !self.u0.is_finite() {
            return Err(Error::InvalidState("non-finite entry".into()));
        }
        if self.x.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidState(
                "positions must be strictly decreasing from the leader".into(),
            ));
        }
        Ok(())
    }
}

/// Spacing errors and relative speeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorState {
    pub z: Vec<f64>,
    pub zp: Vec<f64>,
}

/// Advance the platoon one sample: the leader moves with `state.u0`, CAV `i`
/// with `u[i]`. `u0_next` becomes the leader acceleration of the new state.
pub fn step_dynamics(state: &PlatoonState, tau: f64, u: &[f64], u0_next: f64) -> PlatoonState {
    assert_eq!(u.len() + 1, state.x.len(), "control length mismatch");
    let accel = |i: usize| if i == 0 { state.u0 } else { u[i - 1] };
    let x = (0..state.x.len())
        .map(|i| state.x[i] + tau * state.v[i] + 0.5 * tau * tau * accel(i))
        .collect();
    let v = (0..state.v.len()).map(|i| state.v[i] + tau * accel(i)).collect();
    PlatoonState {
        x,
        v,
        u0: u0_next,
        k: state.k + 1,
    }
}

pub fn error_coords(state: &PlatoonState, cfg: &PlatoonConfig) -> ErrorState {
    let n = state.n();
    let z = (1..=n)
        .map(|i| state.x[i - 1] - state.x[i] - cfg.delta)
        .collect();
    let zp = (1..=n).map(|i| state.v[i - 1] - state.v[i]).collect();
    ErrorState { z, zp }
}

/// Multiply by the lower-triangular all-ones matrix (prefix sums).
pub fn s_apply(v: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    v.iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect()
}

/// Multiply by the inverse of [`s_apply`] (first differences).
pub fn s_inv_apply(v: &[f64]) -> Vec<f64> {
    (0..v.len())
        .map(|i| if i == 0 { v[0] } else { v[i] - v[i - 1] })
        .collect()
}

/// Transpose of [`s_inv_apply`]: `y_i - y_{i+1}`, last entry unchanged.
pub fn s_inv_t_apply(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| if i + 1 < n { v[i] - v[i + 1] } else { v[i] })
        .collect()
}

/// Control differences `w_i = u_{i-1} - u_i` with `u_0` the leader acceleration.
pub fn control_to_w(u: &[f64], u0: f64) -> Vec<f64> {
    (0..u.len())
        .map(|i| if i == 0 { u0 - u[0] } else { u[i - 1] - u[i] })
        .collect()
}

/// Inverse of [`control_to_w`]: `u = -S w + u0 * 1`.
pub fn w_to_control(w: &[f64], u0: f64) -> Vec<f64> {
    s_apply(w).into_iter().map(|s| u0 - s).collect()
}

/// Leader acceleration profile sampled on the `tau` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LeaderProfile {
    /// Constant acceleration over inclusive step ranges, zero elsewhere.
    PiecewiseConstantAccel { segments: Vec<AccelSegment> },
    /// Square wave on `[start, end]`: `+amplitude` on the first and last
    /// quarter of each period and `-amplitude` in between, so that the leader
    /// speed returns to its initial value after every full period.
    PeriodicAccel {
        start: usize,
        end: usize,
        period: usize,
        amplitude: f64,
    },
    /// One acceleration sample per step, zero after the last sample.
    TrajectoryFile { samples: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelSegment {
    pub start: usize,
    pub end: usize,
    pub accel: f64,
}

impl LeaderProfile {
    pub fn accel(&self, k: usize) -> f64 {
        match self {
            LeaderProfile::PiecewiseConstantAccel { segments } => segments
                .iter()
                .find(|s| s.start <= k && k <= s.end)
                .map_or(0.0, |s| s.accel),
            LeaderProfile::PeriodicAccel {
                start,
                end,
                period,
                amplitude,
            } => {
                if k < *start || k > *end || *period == 0 {
                    return 0.0;
                }
                let phase = (k - start) % period;
                let quarter = (*period).div_ceil(4);
                if phase < quarter || phase >= period - quarter {
                    *amplitude
                } else {
                    -*amplitude
                }
            }
            LeaderProfile::TrajectoryFile { samples } => samples.get(k).copied().unwrap_or(0.0),
        }
    }

    /// Last step with a nonzero acceleration, if any, up to `horizon`.
    pub fn last_active_step(&self, horizon: usize) -> Option<usize> {
        (0..=horizon).rev().find(|&k| self.accel(k) != 0.0)
    }

    /// Leader speeds `v_0(0..=steps)` starting from `v_init`.
    pub fn speeds(&self, v_init: f64, tau: f64, steps: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(steps + 1);
        v.push(v_init);
        for k in 0..steps {
            v.push(v[k] + tau * self.accel(k));
        }
        v
    }

    /// Check that the leader stays within the speed band and strictly above
    /// `v_min`, which is what keeps the MPC constraint sets nonempty.
    pub fn validate(&self, cfg: &PlatoonConfig, v_init: f64, steps: usize) -> Result<()> {
        for (k, v) in self.speeds(v_init, cfg.tau, steps).into_iter().enumerate() {
            if v <= cfg.v_min || v > cfg.v_max {
                return Err(Error::InvalidProfile(format!(
                    "leader speed {v:.4} at k = {k} leaves ({}, {}]",
                    cfg.v_min, cfg.v_max
                )));
            }
        }
        Ok(())
    }

    /// Load a `t,accel` CSV and resample it to the `tau` grid by zero-order hold.
    pub fn from_csv(path: impl AsRef<Path>, tau: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut rows: Vec<(f64, f64)> = Vec::new();
        for rec in rdr.deserialize() {
            let row: TrajectoryRow = rec?;
            rows.push((row.t, row.accel));
        }
        Self::resample(&rows, tau)
    }

    fn resample(rows: &[(f64, f64)], tau: f64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidProfile("trajectory file has no rows".into()));
        }
        if rows.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidProfile("time column must increase".into()));
        }
        let t0 = rows[0].0;
        let t_end = rows[rows.len() - 1].0;
        let steps = ((t_end - t0) / tau + 1e-9).floor() as usize + 1;
        let mut samples = Vec::with_capacity(steps);
        let mut j = 0;
        for k in 0..steps {
            let t = t0 + k as f64 * tau;
            while j + 1 < rows.len() && rows[j + 1].0 <= t + 1e-9 {
                j += 1;
            }
            samples.push(rows[j].1);
        }
        Ok(LeaderProfile::TrajectoryFile { samples })
    }
}

#[derive(Debug, Deserialize)]
struct TrajectoryRow {
    t: f64,
    accel: f64,
}
