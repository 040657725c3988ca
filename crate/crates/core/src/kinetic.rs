//! Discrete-velocity reference solver for
//! `f_t + v f_x = sigma (M(v) rho - f)` on a periodic interval.
//!
//! Velocities are Gauss-Hermite nodes. One time step is a first-order Lie
//! splitting: upwind transport of every velocity slice followed by the exact
//! relaxation `f <- e^{-sigma dt} f + (1 - e^{-sigma dt}) M rho`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, invalid, Result};
use crate::hermite::maxwellian;
use crate::quadrature::{gauss_rule, QuadratureKind, QuadratureRule};

pub const DEFAULT_NX: usize = 100;
pub const DEFAULT_NV: usize = 8;
pub const DEFAULT_CFL: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct KineticGrid {
    pub nx: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub nv: usize,
    /// `dt = cfl * dx`.
    pub cfl: f64,
    pub velocity_rule: QuadratureRule,
    /// `w_q e^{v_q^2}`: integrates raw distribution samples over velocity.
    mass_weights: Vec<f64>,
}

impl KineticGrid {
    pub fn new(nx: usize, x_min: f64, x_max: f64, nv: usize) -> Result<Self> {
        if nx < 4 {
            return Err(invalid!("kinetic grid needs nx >= 4, got {nx}"));
        }
        if nv < 2 {
            return Err(invalid!("kinetic grid needs nv >= 2, got {nv}"));
        }
        if !(x_max > x_min) {
            return Err(invalid!("empty spatial interval [{x_min}, {x_max}]"));
        }
        let velocity_rule = gauss_rule(QuadratureKind::GaussHermite, nv)?;
        let mass_weights = velocity_rule
            .nodes
            .iter()
            .zip(&velocity_rule.weights)
            .map(|(&v, &w)| w * (v * v).exp())
            .collect();
        Ok(KineticGrid {
            nx,
            x_min,
            x_max,
            nv,
            cfl: DEFAULT_CFL,
            velocity_rule,
            mass_weights,
        })
    }

    pub fn with_cfl(mut self, cfl: f64) -> Result<Self> {
        if !(cfl > 0.0) {
            return Err(invalid!("cfl factor must be positive, got {cfl}"));
        }
        self.cfl = cfl;
        Ok(self)
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    pub fn dt(&self) -> f64 {
        self.cfl * self.dx()
    }

    pub fn x(&self, j: usize) -> f64 {
        self.x_min + j as f64 * self.dx()
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|j| self.x(j)).collect()
    }

    pub fn velocities(&self) -> &[f64] {
        &self.velocity_rule.nodes
    }

    pub fn mass_weights(&self) -> &[f64] {
        &self.mass_weights
    }
}

impl Default for KineticGrid {
    fn default() -> Self {
        KineticGrid::new(DEFAULT_NX, 0.0, 1.0, DEFAULT_NV).expect("default grid is valid")
    }
}

/// Initial data families. Each is `M(v) g(x)` for a spatial factor `g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialCondition {
    /// `1 + a0 sin(2 pi x)`
    DetSine { a0: f64 },
    /// `3 + (1 + z) sin(2 pi x)`
    UqAmpSine { z: f64 },
    /// `2 + sin(2 pi x (1 + z))`
    UqFreqSine { z: f64 },
}

impl InitialCondition {
    pub fn validate(&self) -> Result<()> {
        match *self {
            InitialCondition::DetSine { a0 } if !(0.0..=1.0).contains(&a0) => {
                Err(invalid!("amplitude a0 = {a0} outside [0, 1]"))
            }
            InitialCondition::UqAmpSine { z } | InitialCondition::UqFreqSine { z }
                if !z.is_finite() =>
            {
                Err(invalid!("random parameter z = {z} is not finite"))
            }
            _ => Ok(()),
        }
    }

    pub fn spatial_factor(&self, x: f64) -> f64 {
        let s = |arg: f64| (2.0 * PI * arg).sin();
        match *self {
            InitialCondition::DetSine { a0 } => 1.0 + a0 * s(x),
            InitialCondition::UqAmpSine { z } => 3.0 + (1.0 + z) * s(x),
            InitialCondition::UqFreqSine { z } => 2.0 + s(x * (1.0 + z)),
        }
    }

    pub fn with_z(&self, z: f64) -> Self {
        match *self {
            InitialCondition::DetSine { a0 } => InitialCondition::DetSine { a0 },
            InitialCondition::UqAmpSine { .. } => InitialCondition::UqAmpSine { z },
            InitialCondition::UqFreqSine { .. } => InitialCondition::UqFreqSine { z },
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            InitialCondition::DetSine { .. } => "det-sine",
            InitialCondition::UqAmpSine { .. } => "uq-amp-sine",
            InitialCondition::UqFreqSine { .. } => "uq-freq-sine",
        }
    }

    /// Parses `det-sine`, `uq-amp-sine` or `uq-freq-sine` with its parameter.
    pub fn from_family(name: &str, param: f64) -> Result<Self> {
        match name {
            "det-sine" => Ok(InitialCondition::DetSine { a0: param }),
            "uq-amp-sine" => Ok(InitialCondition::UqAmpSine { z: param }),
            "uq-freq-sine" => Ok(InitialCondition::UqFreqSine { z: param }),
            other => Err(invalid!("unknown initial condition kind '{other}'")),
        }
    }
}

/// Distribution samples `f[j * nv + q] = f(t, x_j, v_q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KineticState {
    pub t: f64,
    pub nx: usize,
    pub nv: usize,
    pub f: Vec<f64>,
}

impl KineticState {
    pub fn at(&self, j: usize, q: usize) -> f64 {
        self.f[j * self.nv + q]
    }

    pub fn slice(&self, j: usize) -> &[f64] {
        &self.f[j * self.nv..(j + 1) * self.nv]
    }

    /// `sum_j sum_q w_q e^{v_q^2} f_{jq} dx`.
    pub fn total_mass(&self, grid: &KineticGrid) -> f64 {
        let w = grid.mass_weights();
        self.f
            .chunks_exact(self.nv)
            .map(|row| row.iter().zip(w).map(|(f, w)| f * w).sum::<f64>())
            .sum::<f64>()
            * grid.dx()
    }
}

pub fn initial_condition(init: InitialCondition, grid: &KineticGrid) -> Result<KineticState> {
    init.validate()?;
    let mut f = Vec::with_capacity(grid.nx * grid.nv);
    for j in 0..grid.nx {
        let g = init.spatial_factor(grid.x(j));
        f.extend(grid.velocities().iter().map(|&v| maxwellian(v) * g));
    }
    Ok(KineticState {
        t: 0.0,
        nx: grid.nx,
        nv: grid.nv,
        f,
    })
}

/// Exact relaxation toward the local Maxwellian over `dt`.
pub fn collision_step(state: &KineticState, grid: &KineticGrid, sigma: f64, dt: f64) -> KineticState {
    let mut out = state.clone();
    collide_in_place(&mut out, grid, sigma, dt);
    out
}

fn collide_in_place(state: &mut KineticState, grid: &KineticGrid, sigma: f64, dt: f64) {
    if sigma == 0.0 || dt == 0.0 {
        return;
    }
    let decay = (-sigma * dt).exp();
    let gain = 1.0 - decay;
    let w = grid.mass_weights();
    let eq: Vec<f64> = grid.velocities().iter().map(|&v| maxwellian(v)).collect();
    for row in state.f.chunks_exact_mut(state.nv) {
        let rho: f64 = row.iter().zip(w).map(|(f, w)| f * w).sum();
        for (f, m) in row.iter_mut().zip(&eq) {
            *f = decay * *f + gain * m * rho;
        }
    }
}

/// First-order upwind advection of each velocity slice on the periodic grid.
pub fn transport_step(state: &KineticState, grid: &KineticGrid, dt: f64) -> Result<KineticState> {
    let mut out = state.clone();
    transport_in_place(&mut out, grid, dt, &mut Vec::new())?;
    Ok(out)
}

fn transport_in_place(
    state: &mut KineticState,
    grid: &KineticGrid,
    dt: f64,
    scratch: &mut Vec<f64>,
) -> Result<()> {
    let dx = grid.dx();
    let vmax = grid.velocities().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let courant = dt * vmax / dx;
    if courant > 1.0 + 1e-12 {
        return Err(config_err!(
            "upwind transport violates CFL: dt * max|v| / dx = {courant:.4} > 1"
        ));
    }
    if dt == 0.0 {
        return Ok(());
    }
    let (nx, nv) = (state.nx, state.nv);
    scratch.resize(nx, 0.0);
    for (q, &v) in grid.velocities().iter().enumerate() {
        let nu = v * dt / dx;
        for j in 0..nx {
            scratch[j] = state.f[j * nv + q];
        }
        for j in 0..nx {
            let here = scratch[j];
            let update = if v > 0.0 {
                here - scratch[(j + nx - 1) % nx]
            } else {
                scratch[(j + 1) % nx] - here
            };
            state.f[j * nv + q] = here - nu * update;
        }
    }
    Ok(())
}

/// Number of fixed steps needed to reach `t_final`, the last one possibly shortened.
pub(crate) fn step_count(t_final: f64, dt: f64) -> usize {
    let n = (t_final / dt - 1e-9).ceil();
    n.max(1.0) as usize
}

/// Runs the splitting scheme to `t_final`, handing every `snapshot_every`-th
/// state (always including `t = 0` and `t_final`) to `on_snapshot`.
pub fn solve_kinetic_with<F>(
    grid: &KineticGrid,
    sigma: f64,
    init: InitialCondition,
    t_final: f64,
    snapshot_every: usize,
    mut on_snapshot: F,
) -> Result<()>
where
    F: FnMut(usize, &KineticState),
{
    if !(t_final > 0.0) {
        return Err(invalid!("t_final must be positive, got {t_final}"));
    }
    if !(sigma >= 0.0) {
        return Err(invalid!("collision frequency must be non-negative, got {sigma}"));
    }
    let every = snapshot_every.max(1);
    let dt = grid.dt();
    let n_steps = step_count(t_final, dt);
    let mut state = initial_condition(init, grid)?;
    let mut scratch = Vec::new();
    on_snapshot(0, &state);
    for step in 1..=n_steps {
        let h = if step == n_steps {
            t_final - (n_steps - 1) as f64 * dt
        } else {
            dt
        };
        transport_in_place(&mut state, grid, h, &mut scratch)?;
        collide_in_place(&mut state, grid, sigma, h);
        state.t = if step == n_steps {
            t_final
        } else {
            step as f64 * dt
        };
        if step % every == 0 || step == n_steps {
            on_snapshot(step, &state);
        }
    }
    Ok(())
}

pub fn solve_kinetic(
    grid: &KineticGrid,
    sigma: f64,
    init: InitialCondition,
    t_final: f64,
    snapshot_every: usize,
) -> Result<Vec<(f64, KineticState)>> {
    let mut out = Vec::new();
    solve_kinetic_with(grid, sigma, init, t_final, snapshot_every, |_, s| {
        out.push((s.t, s.clone()))
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hermite::MomentProjector;
    use approx::assert_abs_diff_eq;

    fn grid() -> KineticGrid {
        KineticGrid::default()
    }

    #[test]
    fn initial_condition_values() {
        let g = grid();
        let q0 = |s: &KineticState, j: usize| {
            // node closest to v = 0 does not exist for even nv; use the formula directly
            s.at(j, 0) / maxwellian(g.velocities()[0])
        };
        let s = initial_condition(InitialCondition::DetSine { a0: 0.0 }, &g).unwrap();
        for j in 0..g.nx {
            assert_abs_diff_eq!(q0(&s, j), 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(maxwellian(0.0), 0.564_189_583_547_756_3, epsilon = 1e-15);
        let s = initial_condition(InitialCondition::DetSine { a0: 0.9 }, &g).unwrap();
        assert_abs_diff_eq!(q0(&s, 25) * maxwellian(0.0), 1.071_960_208_740_736_9, epsilon = 1e-12);
        let s = initial_condition(InitialCondition::UqAmpSine { z: -1.0 }, &g).unwrap();
        for j in 0..g.nx {
            assert_abs_diff_eq!(q0(&s, j), 3.0, epsilon = 1e-12);
        }
        assert!(initial_condition(InitialCondition::DetSine { a0: 1.5 }, &g).is_err());
        assert!(InitialCondition::from_family("bogus", 0.0).is_err());
    }

    #[test]
    fn collision_fixed_points() {
        let g = grid();
        let s = initial_condition(InitialCondition::DetSine { a0: 0.7 }, &g).unwrap();
        assert_eq!(collision_step(&s, &g, 0.0, 0.01), s);
        // Maxwellian times rho(x) is invariant
        let c = collision_step(&s, &g, 5.0, 0.3);
        for (a, b) in c.f.iter().zip(&s.f) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    fn generic_state(g: &KineticGrid) -> KineticState {
        let mut f = Vec::new();
        for j in 0..g.nx {
            let x = g.x(j);
            for &v in g.velocities() {
                f.push(maxwellian(v) * (1.0 + 0.5 * (2.0 * PI * x).cos() * v + 0.2 * v * v));
            }
        }
        KineticState {
            t: 0.0,
            nx: g.nx,
            nv: g.nv,
            f,
        }
    }

    #[test]
    fn collision_matches_explicit_euler_oracle() {
        let g = grid();
        let s = generic_state(&g);
        let (sigma, dt) = (2.0, 0.01);
        let exact = collision_step(&s, &g, sigma, dt);
        // brute-force substepping of f' = sigma (M rho - f)
        let mut f = s.f.clone();
        let sub = 100_000;
        let h = dt / sub as f64;
        let w = g.mass_weights().to_vec();
        let eq: Vec<f64> = g.velocities().iter().map(|&v| maxwellian(v)).collect();
        for _ in 0..sub {
            for row in f.chunks_exact_mut(g.nv) {
                let rho: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
                for (x, m) in row.iter_mut().zip(&eq) {
                    *x += h * sigma * (m * rho - *x);
                }
            }
        }
        let err = f.iter().zip(&exact.f).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(err < 1e-6, "err = {err}");
        assert_abs_diff_eq!(exact.total_mass(&g), s.total_mass(&g), epsilon = 1e-13);
    }

    #[test]
    fn transport_properties() {
        let g = grid();
        let s = initial_condition(InitialCondition::DetSine { a0: 0.0 }, &g).unwrap();
        let moved = transport_step(&s, &g, g.dt()).unwrap();
        for (a, b) in moved.f.iter().zip(&s.f) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        let s = generic_state(&g);
        assert_eq!(transport_step(&s, &g, 0.0).unwrap(), s);
        assert!(transport_step(&s, &g, 0.01).is_err());
    }

    #[test]
    fn sine_advected_one_period_returns_with_damping() {
        // choose dt so that one slice travels exactly one period in an integer number of steps
        let g = KineticGrid::new(100, 0.0, 1.0, 8).unwrap();
        let q = g.nv - 2;
        let v = g.velocities()[q];
        let n_steps = (1.0 / (v * g.dt())).ceil() as usize;
        let dt = 1.0 / (v * n_steps as f64);
        let mut s = KineticState {
            t: 0.0,
            nx: g.nx,
            nv: g.nv,
            f: (0..g.nx * g.nv)
                .map(|i| (2.0 * PI * g.x(i / g.nv)).sin())
                .collect(),
        };
        for _ in 0..n_steps {
            s = transport_step(&s, &g, dt).unwrap();
        }
        let profile: Vec<f64> = (0..g.nx).map(|j| s.at(j, q)).collect();
        let amp = profile.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        assert!(amp < 1.0 && amp > 0.5, "amplitude {amp}");
        // phase: peak location within one cell of the original peak at x = 0.25
        let peak = (0..g.nx)
            .max_by(|&a, &b| profile[a].partial_cmp(&profile[b]).unwrap())
            .unwrap();
        assert!((g.x(peak) - 0.25).abs() <= g.dx() + 1e-12);
    }

    #[test]
    fn single_step_solve_is_one_transport_step() {
        let g = grid();
        let init = InitialCondition::DetSine { a0: 0.4 };
        let snaps = solve_kinetic(&g, 0.0, init, g.dt(), 1).unwrap();
        assert_eq!(snaps.len(), 2);
        let s0 = initial_condition(init, &g).unwrap();
        let one = transport_step(&s0, &g, g.dt()).unwrap();
        for (a, b) in snaps[1].1.f.iter().zip(&one.f) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn conserves_mass_and_positivity_and_relaxes_moments() {
        let g = grid();
        let proj = MomentProjector::new(&g.velocity_rule, 5).unwrap();
        let snaps = solve_kinetic(&g, 10.0, InitialCondition::DetSine { a0: 0.9 }, 0.5, 50).unwrap();
        assert_eq!(snaps.first().unwrap().0, 0.0);
        assert_eq!(snaps.last().unwrap().0, 0.5);
        let mass0 = snaps[0].1.total_mass(&g);
        let max_m = |s: &KineticState, k: usize| {
            (0..g.nx)
                .map(|j| proj.project(s.slice(j)).unwrap()[k].abs())
                .fold(0.0f64, f64::max)
        };
        for (_, s) in &snaps {
            assert!(((s.total_mass(&g) - mass0) / mass0).abs() < 1e-10);
            assert!(s.f.iter().all(|&x| x >= 0.0));
        }
        // m_k (k >= 1) start at zero; once the initial layer has passed (t ~ 0.3) they decay with m_0
        let last = &snaps.last().unwrap().1;
        let early = &snaps.iter().find(|(t, _)| *t >= 0.3 - 1e-12).unwrap().1;
        for k in 1..=5 {
            assert!(max_m(&snaps[0].1, k) < 1e-14);
        }
        for k in 1..=3 {
            assert!(max_m(last, k) < max_m(early, k), "k={k}: {} vs {}", max_m(last, k), max_m(early, k));
        }
        // spatial variance of m_0 decays
        let var = |s: &KineticState| {
            let m0: Vec<f64> = (0..g.nx).map(|j| proj.project(s.slice(j)).unwrap()[0]).collect();
            let mean = m0.iter().sum::<f64>() / m0.len() as f64;
            m0.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
        };
        assert!(var(last) < var(&snaps[0].1));
    }

    #[test]
    fn snapshot_count_for_training_horizon() {
        let g = grid();
        let mut count = 0;
        solve_kinetic_with(&g, 2.0, InitialCondition::DetSine { a0: 0.3 }, 0.4, 1, |_, _| count += 1)
            .unwrap();
        assert_eq!(count, 401);
    }
}
