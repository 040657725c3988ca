//! Closed moment systems and their time integration.
//!
//! Every linear flux term goes through a global Lax-Friedrichs splitting
//! `f± = (f ± alpha m) / 2`, each half differenced by upwind-biased WENO5.
//! Gradient closures add `sqrt((N+1)/2) sum_i c_i d_x m_i` to row `N`, with
//! the coefficients frozen pointwise and `d_x m_i` taken as the average of
//! the two biased WENO5 derivatives. Row 0 stays in pure flux-difference form,
//! so `sum_j m_0 dx` is conserved to rounding.

use nalgebra::DMatrix;
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::closure::{ClosureKind, ClosureModel};
use crate::data::{GridSpec, InitFamily};
use crate::error::{config_err, invalid, Result};
use crate::gpc::{BasisKind, CollocationTable, GpcBasis, SgSourceMatrix};
use crate::hyperbolicity::pn_matrix;
use crate::kinetic::step_count;
use crate::quadrature::gauss_rule;

pub const DEFAULT_ALPHA_LF: f64 = 5.0;
pub const WENO_EPS: f64 = 1e-6;
/// States with any `|value|` above this count as blown up.
pub const BLOW_UP_LIMIT: f64 = 1e10;

const LINEAR_WEIGHTS: [f64; 3] = [0.1, 0.6, 0.3];

/// `A` of the P_N system (`m_{N+1} = 0`).
pub fn build_pn_matrix(n: usize) -> Result<DMatrix<f64>> {
    if n < 1 {
        return Err(invalid!("the moment system needs N >= 1"));
    }
    Ok(pn_matrix(n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WenoWeights {
    /// Jiang-Shu smoothness-weighted combination.
    #[default]
    Nonlinear,
    /// Linear weights frozen at `(0.1, 0.6, 0.3)`; the scheme becomes linear.
    Linear,
}

/// Direction of the stencil bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upwind {
    /// For positive wave speed: stencils lean left.
    Left,
    /// For negative wave speed.
    Right,
}

/// Fifth-order reconstruction of `h_{j+1/2}` from `(a, b, c, d, e)` ordered
/// from far upwind to far downwind.
#[inline]
fn reconstruct(a: f64, b: f64, c: f64, d: f64, e: f64, weights: WenoWeights) -> f64 {
    let q0 = (2.0 * a - 7.0 * b + 11.0 * c) / 6.0;
    let q1 = (-b + 5.0 * c + 2.0 * d) / 6.0;
    let q2 = (2.0 * c + 5.0 * d - e) / 6.0;
    let [d0, d1, d2] = LINEAR_WEIGHTS;
    match weights {
        WenoWeights::Linear => d0 * q0 + d1 * q1 + d2 * q2,
        WenoWeights::Nonlinear => {
            let sq = |v: f64| v * v;
            let b0 = 13.0 / 12.0 * sq(a - 2.0 * b + c) + 0.25 * sq(a - 4.0 * b + 3.0 * c);
            let b1 = 13.0 / 12.0 * sq(b - 2.0 * c + d) + 0.25 * sq(b - d);
            let b2 = 13.0 / 12.0 * sq(c - 2.0 * d + e) + 0.25 * sq(3.0 * c - 4.0 * d + e);
            let a0 = d0 / sq(WENO_EPS + b0);
            let a1 = d1 / sq(WENO_EPS + b1);
            let a2 = d2 / sq(WENO_EPS + b2);
            (a0 * q0 + a1 * q1 + a2 * q2) / (a0 + a1 + a2)
        }
    }
}

/// Adds `scale * d_x f` to `out` using a periodic WENO5 flux difference.
/// `faces` is scratch of any size.
fn weno5_accumulate(f: &[f64], dx: f64, upwind: Upwind, weights: WenoWeights, scale: f64, faces: &mut Vec<f64>, out: &mut [f64]) {
    let n = f.len();
    let at = |j: usize, off: isize| f[(j as isize + off).rem_euclid(n as isize) as usize];
    faces.clear();
    faces.extend((0..n).map(|j| match upwind {
        Upwind::Left => reconstruct(at(j, -2), at(j, -1), at(j, 0), at(j, 1), at(j, 2), weights),
        Upwind::Right => reconstruct(at(j, 3), at(j, 2), at(j, 1), at(j, 0), at(j, -1), weights),
    }));
    let s = scale / dx;
    for j in 0..n {
        let left = if j == 0 { faces[n - 1] } else { faces[j - 1] };
        out[j] += s * (faces[j] - left);
    }
}

/// Periodic WENO5 approximation of `d_x f`.
pub fn weno5_derivative(values: &[f64], dx: f64, upwind: Upwind, weights: WenoWeights) -> Result<Vec<f64>> {
    if values.len() < 7 {
        return Err(invalid!("WENO5 needs at least 7 points, got {}", values.len()));
    }
    if !(dx > 0.0) {
        return Err(invalid!("grid spacing must be positive, got {dx}"));
    }
    let mut out = vec![0.0; values.len()];
    weno5_accumulate(values, dx, upwind, weights, 1.0, &mut Vec::new(), &mut out);
    Ok(out)
}

/// Moment coefficients `m_k^i` on the grid, stored `[x][k (K+1) + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentField {
    pub t: f64,
    pub nx: usize,
    pub n: usize,
    pub k: usize,
    pub data: Vec<f64>,
}

impl MomentField {
    pub fn zeros(nx: usize, n: usize, k: usize) -> Self {
        MomentField {
            t: 0.0,
            nx,
            n,
            k,
            data: vec![0.0; nx * (n + 1) * (k + 1)],
        }
    }

    /// Values per grid point, `(N+1)(K+1)`.
    pub fn width(&self) -> usize {
        (self.n + 1) * (self.k + 1)
    }

    pub fn get(&self, x: usize, order: usize, i: usize) -> f64 {
        self.data[x * self.width() + order * (self.k + 1) + i]
    }

    pub fn set(&mut self, x: usize, order: usize, i: usize, v: f64) {
        let w = self.width();
        self.data[x * w + order * (self.k + 1) + i] = v;
    }

    /// Profile of `m_order^i` over the grid.
    pub fn profile(&self, order: usize, i: usize) -> Vec<f64> {
        (0..self.nx).map(|x| self.get(x, order, i)).collect()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.nx, self.width()), &self.data).expect("field shape")
    }

    /// `sum_j m_0^i(x_j) dx`.
    pub fn mass(&self, i: usize, dx: f64) -> f64 {
        (0..self.nx).map(|x| self.get(x, 0, i)).sum::<f64>() * dx
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sum of squares over all entries times `dx`.
    pub fn energy(&self, dx: f64) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>() * dx
    }

    /// Keeps orders `0..=n`.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n > self.n {
            return Err(invalid!("cannot truncate order {} field to order {n}", self.n));
        }
        let mut out = MomentField::zeros(self.nx, n, self.k);
        out.t = self.t;
        for x in 0..self.nx {
            for order in 0..=n {
                for i in 0..=self.k {
                    out.set(x, order, i, self.get(x, order, i));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    /// `-sigma m_k` for `k >= 1`.
    Constant(f64),
    /// Galerkin matrix applied to every block `k >= 1`.
    Galerkin(SgSourceMatrix),
}

#[derive(Debug, Clone)]
pub struct SystemSpec {
    pub closure: ClosureModel,
    pub source: Source,
    pub alpha_lf: f64,
    pub cfl: f64,
    pub weno: WenoWeights,
}

impl SystemSpec {
    pub fn new(closure: ClosureModel, source: Source) -> Result<Self> {
        if closure.n < 1 {
            return Err(config_err!("the moment system needs N >= 1"));
        }
        match &source {
            Source::Constant(s) if !(s.is_finite() && *s >= 0.0) => {
                return Err(config_err!("collision frequency must be finite and non-negative, got {s}"))
            }
            Source::Galerkin(m) if m.dim() != closure.k + 1 => {
                return Err(config_err!(
                    "source matrix has dimension {}, closure has K + 1 = {}",
                    m.dim(),
                    closure.k + 1
                ))
            }
            _ => {}
        }
        let spec = SystemSpec {
            closure,
            source,
            alpha_lf: DEFAULT_ALPHA_LF,
            cfl: crate::kinetic::DEFAULT_CFL,
            weno: WenoWeights::Nonlinear,
        };
        spec.check_alpha();
        Ok(spec)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(config_err!("alpha_lf must be positive, got {alpha}"));
        }
        self.alpha_lf = alpha;
        self.check_alpha();
        Ok(self)
    }

    pub fn with_cfl(mut self, cfl: f64) -> Result<Self> {
        if !(cfl > 0.0 && cfl.is_finite()) {
            return Err(config_err!("cfl must be positive, got {cfl}"));
        }
        self.cfl = cfl;
        Ok(self)
    }

    pub fn with_weno(mut self, weno: WenoWeights) -> Self {
        self.weno = weno;
        self
    }

    pub fn n(&self) -> usize {
        self.closure.n
    }

    pub fn k(&self) -> usize {
        self.closure.k
    }

    pub fn width(&self) -> usize {
        (self.n() + 1) * (self.k() + 1)
    }

    /// Largest `|eigenvalue|` of the P_N matrix.
    pub fn pn_spectral_radius(&self) -> f64 {
        pn_matrix(self.n()).symmetric_eigenvalues().iter().fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    fn check_alpha(&self) {
        let r = self.pn_spectral_radius();
        if r > self.alpha_lf {
            log::warn!("alpha_lf = {} is below the P_N spectral radius {r:.4}", self.alpha_lf);
        }
    }

    /// Largest spectral radius of the closed transport matrix over the grid
    /// points of `field`. `None` for `lm`, whose flux is nonlinear.
    pub fn sampled_spectral_radius(&self, field: &MomentField) -> Result<Option<f64>> {
        let (n, block) = (self.n(), self.k() + 1);
        let coeffs = match self.closure.kind {
            ClosureKind::Lm => return Ok(None),
            ClosureKind::Pn => return Ok(Some(self.pn_spectral_radius())),
            _ => self.closure.gradient_coefficients(field.view())?,
        };
        let base = pn_matrix(n);
        let r = ((n + 1) as f64 / 2.0).sqrt();
        let mut worst: f64 = 0.0;
        for row in coeffs.rows() {
            for i in 0..block {
                let mut a = base.clone();
                for order in 0..=n {
                    a[(n, order)] += r * row[order * block + i];
                }
                worst = worst.max(spectral_radius(&a));
            }
        }
        Ok(Some(worst))
    }

    fn check_field(&self, field: &MomentField) -> Result<()> {
        if field.n != self.n() || field.k != self.k() {
            return Err(config_err!(
                "field has N = {}, K = {} but the closure expects N = {}, K = {}",
                field.n,
                field.k,
                self.n(),
                self.k()
            ));
        }
        if field.nx < 7 {
            return Err(invalid!("WENO5 needs at least 7 grid points, got {}", field.nx));
        }
        Ok(())
    }
}

/// Falls back to the max-row-sum bound if the Schur iteration stalls.
fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    match nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, 10_000) {
        Some(schur) => schur.complex_eigenvalues().iter().fold(0.0, |m: f64, z| m.max(z.norm())),
        None => a.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max),
    }
}

/// `sqrt(j / 2)`, the Hermite recurrence coefficient.
fn rc(j: usize) -> f64 {
    (j as f64 / 2.0).sqrt()
}

/// Semi-discrete right-hand side `L(m)`, same layout as `field.data`.
pub fn rhs(field: &MomentField, spec: &SystemSpec, dx: f64) -> Result<Vec<f64>> {
    spec.check_field(field)?;
    let (nx, n, block, width) = (field.nx, spec.n(), spec.k() + 1, spec.width());
    let m = &field.data;
    let alpha = spec.alpha_lf;
    let lm_closure = match spec.closure.kind {
        ClosureKind::Lm => Some(spec.closure.predict_moment_batch(field.view())?),
        _ => None,
    };

    let mut out = vec![0.0; nx * width];
    let mut col = vec![0.0; nx];
    let (mut plus, mut minus) = (vec![0.0; nx], vec![0.0; nx]);
    let mut faces = Vec::with_capacity(nx);
    for c in 0..width {
        let (order, i) = (c / block, c % block);
        for x in 0..nx {
            let row = &m[x * width..(x + 1) * width];
            let mut f = 0.0;
            if order < n {
                f += rc(order + 1) * row[(order + 1) * block + i];
            }
            if order >= 1 {
                f += rc(order) * row[(order - 1) * block + i];
            }
            if let (true, Some(extra)) = (order == n, &lm_closure) {
                f += rc(n + 1) * extra[(x, i)];
            }
            plus[x] = 0.5 * (f + alpha * row[c]);
            minus[x] = 0.5 * (f - alpha * row[c]);
        }
        col.iter_mut().for_each(|v| *v = 0.0);
        weno5_accumulate(&plus, dx, Upwind::Left, spec.weno, -1.0, &mut faces, &mut col);
        weno5_accumulate(&minus, dx, Upwind::Right, spec.weno, -1.0, &mut faces, &mut col);
        for x in 0..nx {
            out[x * width + c] = col[x];
        }
    }

    if matches!(spec.closure.kind, ClosureKind::Lg | ClosureKind::LgHyper) {
        let coeffs = spec.closure.gradient_coefficients(field.view())?;
        let r = rc(n + 1);
        for c in 0..width {
            for x in 0..nx {
                plus[x] = m[x * width + c];
            }
            col.iter_mut().for_each(|v| *v = 0.0);
            weno5_accumulate(&plus, dx, Upwind::Left, spec.weno, 0.5, &mut faces, &mut col);
            weno5_accumulate(&plus, dx, Upwind::Right, spec.weno, 0.5, &mut faces, &mut col);
            let i = c % block;
            for x in 0..nx {
                out[x * width + n * block + i] -= r * coeffs[(x, c)] * col[x];
            }
        }
    }

    match &spec.source {
        Source::Constant(sigma) => {
            for x in 0..nx {
                for c in block..width {
                    out[x * width + c] -= sigma * m[x * width + c];
                }
            }
        }
        Source::Galerkin(s) => {
            let mut tmp = vec![0.0; block];
            for x in 0..nx {
                for order in 1..=n {
                    let at = x * width + order * block;
                    s.apply(&m[at..at + block], &mut tmp);
                    for (o, v) in out[at..at + block].iter_mut().zip(&tmp) {
                        *o += v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// One Shu-Osher SSP-RK3 step of `u' = L(u)`.
pub fn ssp_rk3<F>(u: &[f64], dt: f64, mut l: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let l0 = l(u)?;
    let u1: Vec<f64> = u.iter().zip(&l0).map(|(a, b)| a + dt * b).collect();
    let l1 = l(&u1)?;
    let u2: Vec<f64> = u
        .iter()
        .zip(u1.iter().zip(&l1))
        .map(|(a, (b, c))| 0.75 * a + 0.25 * (b + dt * c))
        .collect();
    let l2 = l(&u2)?;
    Ok(u
        .iter()
        .zip(u2.iter().zip(&l2))
        .map(|(a, (b, c))| a / 3.0 + 2.0 / 3.0 * (b + dt * c))
        .collect())
}

pub fn ssp_rk3_step(field: &MomentField, spec: &SystemSpec, dx: f64, dt: f64) -> Result<MomentField> {
    let mut stage = field.clone();
    let data = ssp_rk3(&field.data, dt, |u| {
        stage.data.clear();
        stage.data.extend_from_slice(u);
        rhs(&stage, spec, dx)
    })?;
    Ok(MomentField {
        t: field.t + dt,
        data,
        ..field.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    /// The state left the finite range; `t` is the time of the failed step.
    BlowUp { t: f64, step: usize },
}

#[derive(Debug, Clone)]
pub struct MomentRun {
    pub snapshots: Vec<MomentField>,
    pub status: RunStatus,
    pub steps: usize,
    /// Largest relative change of `sum_j m_0^i dx` over all `i` and snapshots.
    pub mass_drift: f64,
    /// Spectral radius of the closed transport matrix sampled on the initial state.
    pub sampled_speed: Option<f64>,
}

impl MomentRun {
    pub fn last(&self) -> &MomentField {
        self.snapshots.last().expect("runs keep the initial snapshot")
    }
}

/// Advances `initial` to `t_final` with `dt = cfl dx` (the last step is
/// shortened). Keeps every `snapshot_every`-th state plus the first and last.
/// A state with a NaN or a value above [`BLOW_UP_LIMIT`] ends the run with
/// [`RunStatus::BlowUp`]; the snapshots collected so far are kept.
pub fn solve_moment_system(
    initial: &MomentField,
    spec: &SystemSpec,
    dx: f64,
    t_final: f64,
    snapshot_every: usize,
) -> Result<MomentRun> {
    spec.check_field(initial)?;
    if !(t_final > 0.0) {
        return Err(invalid!("t_final must be positive, got {t_final}"));
    }
    if !(dx > 0.0) {
        return Err(invalid!("grid spacing must be positive, got {dx}"));
    }
    let sampled_speed = spec.sampled_spectral_radius(initial)?;
    if let Some(s) = sampled_speed {
        if s > spec.alpha_lf {
            log::warn!("sampled closure wave speed {s:.4} exceeds alpha_lf = {}", spec.alpha_lf);
        }
    }
    let every = snapshot_every.max(1);
    let dt = spec.cfl * dx;
    let n_steps = step_count(t_final, dt);
    let blocks = spec.k() + 1;
    let mass0: Vec<f64> = (0..blocks).map(|i| initial.mass(i, dx)).collect();
    let scale = mass0.iter().map(|v| v.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
    let drift = |f: &MomentField| -> f64 {
        (0..blocks).fold(0.0, |d: f64, i| d.max((f.mass(i, dx) - mass0[i]).abs() / scale))
    };

    let mut state = MomentField {
        t: 0.0,
        ..initial.clone()
    };
    let mut run = MomentRun {
        snapshots: vec![state.clone()],
        status: RunStatus::Completed,
        steps: 0,
        mass_drift: 0.0,
        sampled_speed,
    };
    for step in 1..=n_steps {
        let h = if step == n_steps {
            t_final - (n_steps - 1) as f64 * dt
        } else {
            dt
        };
        let mut next = ssp_rk3_step(&state, spec, dx, h)?;
        next.t = if step == n_steps { t_final } else { step as f64 * dt };
        run.steps = step;
        if next.data.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP_LIMIT) {
            run.status = RunStatus::BlowUp { t: next.t, step };
            return Ok(run);
        }
        run.mass_drift = run.mass_drift.max(drift(&next));
        state = next;
        if step % every == 0 || step == n_steps {
            run.snapshots.push(state.clone());
        }
    }
    Ok(run)
}

/// Random-input setup: gPC basis family and collocation node count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stochastic {
    pub basis: BasisKind,
    pub nodes: usize,
}

/// Moments of `M(v) g(x)`: `m_0 = pi^{-1/4} g`, higher orders vanish. With a
/// basis, `m_0^i` is the collocation projection of `g(x; z)`.
pub fn initial_moments(
    family: InitFamily,
    a0: f64,
    grid: &GridSpec,
    n: usize,
    k: usize,
    stochastic: Option<Stochastic>,
) -> Result<MomentField> {
    let kgrid = grid.build()?;
    let scale = std::f64::consts::PI.powf(-0.25);
    let mut field = MomentField::zeros(kgrid.nx, n, k);
    match stochastic {
        None => {
            if k > 0 || family.is_random() {
                return Err(config_err!("K > 0 and random initial data need a gPC basis"));
            }
            let init = family.condition(a0, 0.0);
            init.validate()?;
            for x in 0..kgrid.nx {
                field.set(x, 0, 0, scale * init.spatial_factor(kgrid.x(x)));
            }
        }
        Some(st) => {
            let basis = GpcBasis::new(st.basis, k);
            let rule = gauss_rule(st.basis.quadrature_kind(), st.nodes)?;
            let table = CollocationTable::new(&basis, &rule)?;
            let mut samples = vec![0.0; table.len()];
            let mut coeffs = vec![0.0; k + 1];
            let inits: Vec<_> = table.nodes.iter().map(|&z| family.condition(a0, z)).collect();
            for init in &inits {
                init.validate()?;
            }
            for x in 0..kgrid.nx {
                for (s, init) in samples.iter_mut().zip(&inits) {
                    *s = scale * init.spatial_factor(kgrid.x(x));
                }
                table.project_into(&samples, &mut coeffs);
                for (i, c) in coeffs.iter().enumerate() {
                    field.set(x, 0, i, *c);
                }
            }
        }
    }
    Ok(field)
}
