//! Hyperbolicity of the learned-gradient closure.
//!
//! With the closure `d_x m_{N+1} = sum_{i=N-2}^{N} c_i d_x m_i` the moment
//! matrix is the P_N matrix with its last row replaced by the tail
//! `(a_{N-2}, a_{N-1}, a_N)`. Whenever
//!
//! `sqrt((N-1)/2) a_{N-1} + a_N a_{N-2} - sqrt(N/2) a_{N-2}^2 > 0`
//!
//! the block-diagonal `A_0 = diag(I_{N-1}, B)` with a closed-form 2x2 block `B`
//! is SPD and `A_0 A` is symmetric, so `A` has real eigenvalues and a complete
//! set of eigenvectors. For `N = 1` the condition reduces to `a_0 > 0`.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default lower bound enforced on the hyperbolicity margin by the output head.
pub const DEFAULT_MARGIN: f64 = 1e-6;

fn half_sqrt(k: usize) -> f64 {
    (k as f64 / 2.0).sqrt()
}

/// The non-trivial entries of the closure row.
///
/// For `N >= 3`, `a = [a_{N-2}, a_{N-1}, a_N]`; for `N = 1`, `a = [a_0, a_1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosureTail {
    pub n: usize,
    pub a: Vec<f64>,
}

impl ClosureTail {
    pub fn new(n: usize, a: Vec<f64>) -> Result<Self> {
        let expected = tail_len(n)?;
        if a.len() != expected {
            return Err(invalid!("N = {n} needs {expected} tail coefficients, got {}", a.len()));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("closure tail has non-finite entries: {a:?}"));
        }
        Ok(ClosureTail { n, a })
    }

    /// The closed P_N row (network output identically zero).
    pub fn pn(n: usize) -> Result<Self> {
        let net = vec![0.0; tail_len(n)?];
        coeffs_from_network(&net, n)
    }

    /// Left-hand side of the hyperbolicity inequality (or `a_0` when `N = 1`).
    pub fn margin(&self) -> f64 {
        if self.n == 1 {
            return self.a[0];
        }
        let n = self.n;
        let (lo, mid, hi) = (self.a[0], self.a[1], self.a[2]);
        half_sqrt(n - 1) * mid + hi * lo - half_sqrt(n) * lo * lo
    }

    /// Full `(N+1) x (N+1)` coefficient matrix with this tail as last row.
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut a = pn_matrix(n);
        for j in 0..=n {
            a[(n, j)] = 0.0;
        }
        let first = n + 1 - self.a.len();
        for (offset, &v) in self.a.iter().enumerate() {
            a[(n, first + offset)] = v;
        }
        a
    }
}

/// Number of learned coefficients in the hyperbolic head.
pub fn tail_len(n: usize) -> Result<usize> {
    match n {
        1 => Ok(2),
        0 | 2 => Err(invalid!(
            "the hyperbolic closure is defined for N = 1 or N >= 3, got N = {n}"
        )),
        _ => Ok(3),
    }
}

/// The symmetric tridiagonal P_N matrix with off-diagonal `sqrt((k+1)/2)`.
pub fn pn_matrix(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n + 1, n + 1, |i, j| {
        if j == i + 1 {
            half_sqrt(j)
        } else if i == j + 1 {
            half_sqrt(i)
        } else {
            0.0
        }
    })
}

/// Maps network coefficients `(c_{N-2}, c_{N-1}, c_N)` (or `(c_0, c_1)` when
/// `N = 1`) to the closure row.
pub fn coeffs_from_network(net: &[f64], n: usize) -> Result<ClosureTail> {
    let len = tail_len(n)?;
    if net.len() != len {
        return Err(invalid!("expected {len} network coefficients, got {}", net.len()));
    }
    let scale = half_sqrt(n + 1);
    let mut a: Vec<f64> = net.iter().map(|c| scale * c).collect();
    // entry for index N-1 picks up the P_N coupling
    let idx_n_minus_1 = len - 2;
    a[idx_n_minus_1] += half_sqrt(n);
    ClosureTail::new(n, a)
}

pub fn is_hyperbolic(tail: &ClosureTail) -> bool {
    tail.margin() > 0.0
}

/// The 2x2 block `B = [[b1, b2], [b2, b3]]` of the symmetrizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Symmetrizer {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
}

impl Symmetrizer {
    pub fn is_spd(&self) -> bool {
        self.b1 > 0.0 && self.b1 * self.b3 - self.b2 * self.b2 > 0.0
    }

    /// `A_0 = diag(I_{N-1}, B)`.
    pub fn assemble(&self, n: usize) -> DMatrix<f64> {
        let mut a0 = DMatrix::identity(n + 1, n + 1);
        a0[(n - 1, n - 1)] = self.b1;
        a0[(n - 1, n)] = self.b2;
        a0[(n, n - 1)] = self.b2;
        a0[(n, n)] = self.b3;
        a0
    }
}

/// Closed-form solution of the 3x3 symmetry conditions by Cramer's rule.
///
/// With `r1 = sqrt((N-1)/2)`, `r2 = sqrt(N/2)` and
/// `D = r1 (-r1 a_{N-1} - a_N a_{N-2}) + r2 a_{N-2}^2`:
/// `b1 = r1 (-r1 a_{N-1} - a_N a_{N-2}) / D`, `b2 = r1 r2 a_{N-2} / D`,
/// `b3 = -r1^2 r2 / D`. Since `r1 >= 1` for `N >= 3`, the hyperbolicity
/// inequality implies `D <= -r1 * margin < 0`, hence `B` is SPD.
pub fn symmetrizer(tail: &ClosureTail) -> Result<Symmetrizer> {
    if tail.n < 3 {
        return Err(Error::Precondition(format!(
            "symmetrizer is defined for N >= 3, got N = {}",
            tail.n
        )));
    }
    if !is_hyperbolic(tail) {
        return Err(Error::Precondition(format!(
            "closure tail {:?} violates the hyperbolicity inequality (margin {:e})",
            tail.a,
            tail.margin()
        )));
    }
    let n = tail.n;
    let (lo, mid, hi) = (tail.a[0], tail.a[1], tail.a[2]);
    let r1 = half_sqrt(n - 1);
    let r2 = half_sqrt(n);
    let inner = -r1 * mid - hi * lo;
    let denominator = r1 * inner + r2 * lo * lo;
    if denominator.abs() < 1e-14 {
        return Err(Error::DegenerateSymmetrizer { denominator });
    }
    Ok(Symmetrizer {
        b1: r1 * inner / denominator,
        b2: r1 * r2 * lo / denominator,
        // exact third Cramer minor is -r1^2 r2
        b3: -r1 * r1 * r2 / denominator,
    })
}

/// The linear system `M b = c` solved in closed form by [`symmetrizer`].
pub fn symmetrizer_system(tail: &ClosureTail) -> (Matrix3<f64>, Vector3<f64>) {
    let n = tail.n;
    let (lo, mid, hi) = (tail.a[0], tail.a[1], tail.a[2]);
    let r1 = half_sqrt(n - 1);
    let r2 = half_sqrt(n);
    let m = Matrix3::new(r1, lo, 0.0, 0.0, r1, lo, r2, hi, -mid);
    (m, Vector3::new(r1, 0.0, 0.0))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output head that maps unconstrained network outputs to coefficients
/// satisfying the hyperbolicity inequality with left-hand side `>= eps`.
///
/// For `N >= 3` the middle coefficient is written as the exact lower bound
/// implied by the other two plus `softplus(raw[1]) + eps / c`. For `N = 1`,
/// `c_0 = -sqrt(1/2) + softplus(raw[0]) + eps` and `c_1 = raw[1]`.
pub fn constrain_outputs(raw: &[f64], n: usize, eps: f64) -> Result<Vec<f64>> {
    Ok(constrain_with_jacobian(raw, n, eps)?.0)
}

/// [`constrain_outputs`] together with its row-major Jacobian `d out / d raw`.
pub fn constrain_with_jacobian(raw: &[f64], n: usize, eps: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let len = tail_len(n)?;
    if raw.len() != len {
        return Err(invalid!("constrained head expects {len} raw outputs, got {}", raw.len()));
    }
    if n == 1 {
        let out = vec![-half_sqrt(1) + softplus(raw[0]) + eps, raw[1]];
        let jac = vec![sigmoid(raw[0]), 0.0, 0.0, 1.0];
        return Ok((out, jac));
    }
    let half_np1 = (n as f64 + 1.0) / 2.0;
    let r_nm1 = half_sqrt(n - 1);
    let r_n = half_sqrt(n);
    let c = r_nm1 * half_sqrt(n + 1);
    let (lo, hi) = (raw[0], raw[2]);
    let lower = -(half_np1 * (lo * hi - r_n * lo * lo) + r_nm1 * r_n) / c;
    let mid = lower + softplus(raw[1]) + eps / c;
    let d_lo = -half_np1 * (hi - 2.0 * r_n * lo) / c;
    let d_hi = -half_np1 * lo / c;
    let jac = vec![
        1.0, 0.0, 0.0, //
        d_lo, sigmoid(raw[1]), d_hi, //
        0.0, 0.0, 1.0,
    ];
    Ok((vec![lo, mid, hi], jac))
}

/// Spectral diagnostics of a closure matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenReport {
    /// Largest `|Im lambda|` over the eigenvalues of `A`.
    pub max_imag: f64,
    /// Largest `|Re lambda|`.
    pub spectral_radius: f64,
    /// Frobenius norm of `A_0 A - (A_0 A)^T` when a symmetrizer was supplied.
    pub symmetry_residual: Option<f64>,
}

pub fn eigen_check(a: &DMatrix<f64>, a0: Option<&DMatrix<f64>>) -> Result<EigenReport> {
    if !a.is_square() {
        return Err(invalid!("eigen_check needs a square matrix, got {}x{}", a.nrows(), a.ncols()));
    }
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), 1e-15, 10_000)
        .ok_or_else(|| Error::Numerical("Schur decomposition did not converge".into()))?;
    let eig = schur.complex_eigenvalues();
    let max_imag = eig.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
    let spectral_radius = eig.iter().fold(0.0f64, |m, z| m.max(z.norm()));
    let symmetry_residual = a0.map(|a0| {
        let p = a0 * a;
        (&p - p.transpose()).norm()
    });
    Ok(EigenReport {
        max_imag,
        spectral_radius,
        symmetry_residual,
    })
}
