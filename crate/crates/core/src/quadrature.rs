//! Gaussian quadrature rules for the three weight families used in the
//! pipeline: Hermite (`e^{-v^2}` on the real line), Legendre (`1` on
//! `[-1, 1]`) and Laguerre (`e^{-z}` on `[0, inf)`).
//!
//! Nodes come from the eigenvalues of the symmetric Jacobi matrix
//! (Golub-Welsch). Each node is then polished with a couple of Newton steps on
//! the orthonormal recurrence and the weights are taken from the Christoffel
//! formula `w_i = 1 / sum_k p_k(x_i)^2`, which keeps the tiny outer weights of
//! the Laguerre rule accurate in the relative sense.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureKind {
    GaussHermite,
    GaussLegendre,
    GaussLaguerre,
}

impl QuadratureKind {
    /// Integral of the family weight function over its support.
    pub fn total_mass(self) -> f64 {
        match self {
            QuadratureKind::GaussHermite => std::f64::consts::PI.sqrt(),
            QuadratureKind::GaussLegendre => 2.0,
            QuadratureKind::GaussLaguerre => 1.0,
        }
    }

    /// Diagonal entry `a_k` of the Jacobi matrix.
    fn alpha(self, k: usize) -> f64 {
        match self {
            QuadratureKind::GaussHermite | QuadratureKind::GaussLegendre => 0.0,
            QuadratureKind::GaussLaguerre => (2 * k + 1) as f64,
        }
    }

    /// Off-diagonal entry `b_k`, coupling degrees `k - 1` and `k` (k >= 1).
    fn beta(self, k: usize) -> f64 {
        let k = k as f64;
        match self {
            QuadratureKind::GaussHermite => (k / 2.0).sqrt(),
            QuadratureKind::GaussLegendre => k / (4.0 * k * k - 1.0).sqrt(),
            QuadratureKind::GaussLaguerre => k,
        }
    }

    /// Evaluates the orthonormal polynomials `p_0..p_{n}` of this family at `x`
    /// together with the derivative of `p_n`.
    fn orthonormal_with_derivative(self, n: usize, x: f64, out: &mut Vec<f64>) -> f64 {
        out.clear();
        let p0 = 1.0 / self.total_mass().sqrt();
        out.push(p0);
        let (mut p_prev, mut p) = (0.0, p0);
        let (mut d_prev, mut d) = (0.0, 0.0);
        for k in 0..n {
            let b_next = self.beta(k + 1);
            let b_k = if k == 0 { 0.0 } else { self.beta(k) };
            let shifted = x - self.alpha(k);
            let p_next = (shifted * p - b_k * p_prev) / b_next;
            let d_next = (p + shifted * d - b_k * d_prev) / b_next;
            p_prev = p;
            p = p_next;
            d_prev = d;
            d = d_next;
            out.push(p);
        }
        d
    }
}

/// Nodes and weights of a Gauss rule. Weights include the family weight
/// function, so `sum_i w_i g(x_i)` approximates `int g(x) w(x) dx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub kind: QuadratureKind,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// Largest degree integrated exactly.
    pub fn exact_degree(&self) -> usize {
        2 * self.len() - 1
    }
}

/// Builds the `n`-point Gauss rule of the given family.
pub fn gauss_rule(kind: QuadratureKind, n: usize) -> Result<QuadratureRule> {
    if n == 0 {
        return Err(invalid!("quadrature rule needs at least one node"));
    }
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            kind.alpha(i)
        } else if i + 1 == j {
            kind.beta(j)
        } else if j + 1 == i {
            kind.beta(i)
        } else {
            0.0
        }
    });
    let eigen = SymmetricEigen::new(jacobi);
    let mut nodes: Vec<f64> = eigen.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).expect("finite Jacobi eigenvalues"));

    let mut scratch = Vec::with_capacity(n + 1);
    let mut weights = Vec::with_capacity(n);
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let deriv = kind.orthonormal_with_derivative(n, *x, &mut scratch);
            let value = scratch[n];
            if deriv == 0.0 || !deriv.is_finite() {
                break;
            }
            let step = value / deriv;
            *x -= step;
            if step.abs() <= 4.0 * f64::EPSILON * x.abs().max(1.0) {
                break;
            }
        }
        kind.orthonormal_with_derivative(n - 1, *x, &mut scratch);
        let norm: f64 = scratch.iter().map(|p| p * p).sum();
        weights.push(1.0 / norm);
    }
    if kind == QuadratureKind::GaussHermite || kind == QuadratureKind::GaussLegendre {
        symmetrize(&mut nodes, &mut weights);
    }
    Ok(QuadratureRule {
        kind,
        nodes,
        weights,
    })
}

/// Removes the last-bit asymmetry between mirrored nodes of even weights.
fn symmetrize(nodes: &mut [f64], weights: &mut [f64]) {
    let n = nodes.len();
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        let w = 0.5 * (weights[i] + weights[j]);
        nodes[i] = -x;
        nodes[j] = x;
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
}
