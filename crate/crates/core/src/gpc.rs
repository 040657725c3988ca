//! Orthonormal generalized polynomial chaos bases, stochastic Galerkin source
//! matrices and collocation projection.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, invalid, Result};
use crate::quadrature::{QuadratureKind, QuadratureRule};
#[cfg(test)]
use crate::quadrature::gauss_rule;

/// Number of collocation nodes used by default for both families.
pub const DEFAULT_COLLOCATION_NODES: usize = 16;
pub const DEFAULT_TRUNCATION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    /// Legendre polynomials, `z ~ U[-1, 1]` with density 1/2.
    LegendreUniform,
    /// Laguerre polynomials, `z ~ Exp(1)` with density `e^{-z}`.
    LaguerreExponential,
}

impl BasisKind {
    pub fn quadrature_kind(self) -> QuadratureKind {
        match self {
            BasisKind::LegendreUniform => QuadratureKind::GaussLegendre,
            BasisKind::LaguerreExponential => QuadratureKind::GaussLaguerre,
        }
    }

    /// Factor turning Gauss weights of the matching family into probability
    /// weights.
    pub fn density_factor(self) -> f64 {
        match self {
            BasisKind::LegendreUniform => 0.5,
            BasisKind::LaguerreExponential => 1.0,
        }
    }

    pub fn contains(self, z: f64) -> bool {
        match self {
            BasisKind::LegendreUniform => (-1.0..=1.0).contains(&z),
            BasisKind::LaguerreExponential => z >= 0.0 && z.is_finite(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpcBasis {
    pub kind: BasisKind,
    /// Truncation order `K`; the basis has `K + 1` functions.
    pub order: usize,
}

impl GpcBasis {
    pub fn new(kind: BasisKind, order: usize) -> Self {
        GpcBasis { kind, order }
    }

    pub fn len(&self) -> usize {
        self.order + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Scale factors applied to the raw recurrence output to make it orthonormal.
    pub fn normalization(&self) -> Vec<f64> {
        (0..=self.order)
            .map(|i| match self.kind {
                BasisKind::LegendreUniform => (2 * i + 1) as f64,
                BasisKind::LaguerreExponential => 1.0,
            })
            .map(f64::sqrt)
            .collect()
    }

    fn check_rule(&self, quad: &QuadratureRule) -> Result<()> {
        if quad.kind != self.kind.quadrature_kind() {
            return Err(config_err!(
                "{:?} basis needs {:?} quadrature, got {:?}",
                self.kind,
                self.kind.quadrature_kind(),
                quad.kind
            ));
        }
        Ok(())
    }

    fn eval_into(&self, z: f64, out: &mut [f64]) {
        let up_to = out.len() - 1;
        out[0] = 1.0;
        if up_to >= 1 {
            out[1] = match self.kind {
                BasisKind::LegendreUniform => z,
                BasisKind::LaguerreExponential => 1.0 - z,
            };
        }
        for i in 1..up_to {
            let fi = i as f64;
            out[i + 1] = match self.kind {
                BasisKind::LegendreUniform => {
                    ((2.0 * fi + 1.0) * z * out[i] - fi * out[i - 1]) / (fi + 1.0)
                }
                BasisKind::LaguerreExponential => {
                    ((2.0 * fi + 1.0 - z) * out[i] - fi * out[i - 1]) / (fi + 1.0)
                }
            };
        }
        if self.kind == BasisKind::LegendreUniform {
            for (i, v) in out.iter_mut().enumerate() {
                *v *= ((2 * i + 1) as f64).sqrt();
            }
        }
    }
}

/// Orthonormal basis values `phi_0(z)..phi_up_to(z)`.
pub fn eval_basis(basis: &GpcBasis, z: f64, up_to: usize) -> Result<Vec<f64>> {
    if !basis.kind.contains(z) {
        return Err(invalid!("z = {z} lies outside the support of {:?}", basis.kind));
    }
    if up_to > basis.order {
        return Err(invalid!(
            "requested phi_{up_to} but the basis is truncated at K = {}",
            basis.order
        ));
    }
    let mut out = vec![0.0; up_to + 1];
    basis.eval_into(z, &mut out);
    Ok(out)
}

/// Symmetric Galerkin matrix `S_ij = -E[sigma(z) phi_i phi_j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgSourceMatrix {
    pub entries: Vec<Vec<f64>>,
}

impl SgSourceMatrix {
    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    /// `-sigma I`, the deterministic limit.
    pub fn constant(sigma: f64, dim: usize) -> Self {
        let entries = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { -sigma } else { 0.0 }).collect())
            .collect();
        SgSourceMatrix { entries }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.entries) {
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    pub fn to_matrix(&self) -> nalgebra::DMatrix<f64> {
        let n = self.dim();
        nalgebra::DMatrix::from_fn(n, n, |i, j| self.entries[i][j])
    }
}

pub fn build_source_matrix<F>(sigma: F, basis: &GpcBasis, quad: &QuadratureRule) -> Result<SgSourceMatrix>
where
    F: Fn(f64) -> f64,
{
    basis.check_rule(quad)?;
    let n = basis.len();
    let factor = basis.kind.density_factor();
    let mut entries = vec![vec![0.0; n]; n];
    let mut phi = vec![0.0; n];
    for (&z, &w) in quad.nodes.iter().zip(&quad.weights) {
        basis.eval_into(z, &mut phi);
        let s = sigma(z) * w * factor;
        for i in 0..n {
            for j in 0..=i {
                entries[i][j] -= s * phi[i] * phi[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            entries[j][i] = entries[i][j];
        }
    }
    Ok(SgSourceMatrix { entries })
}

/// Galerkin coefficients `c_i = sum_j samples_j phi_i(z_j) w_j` from samples at
/// the nodes of a Gauss rule of the basis family. Weights are the raw family
/// weights; the probability density is applied here.
pub fn collocation_project(samples: &[f64], basis: &GpcBasis, quad: &QuadratureRule) -> Result<Vec<f64>> {
    basis.check_rule(quad)?;
    if samples.len() != quad.len() {
        return Err(invalid!(
            "{} samples for a {}-node collocation rule",
            samples.len(),
            quad.len()
        ));
    }
    let table = CollocationTable::new(basis, quad)?;
    let mut out = vec![0.0; basis.len()];
    table.project_into(samples, &mut out);
    Ok(out)
}

/// `phi_i(z_j) w_j pi-factor` for repeated projections on a fixed node set.
#[derive(Debug, Clone)]
pub struct CollocationTable {
    pub nodes: Vec<f64>,
    weights: Vec<Vec<f64>>,
}

impl CollocationTable {
    pub fn new(basis: &GpcBasis, quad: &QuadratureRule) -> Result<Self> {
        basis.check_rule(quad)?;
        let factor = basis.kind.density_factor();
        let mut phi = vec![0.0; basis.len()];
        let mut weights = vec![vec![0.0; quad.len()]; basis.len()];
        for (j, (&z, &w)) in quad.nodes.iter().zip(&quad.weights).enumerate() {
            basis.eval_into(z, &mut phi);
            for i in 0..basis.len() {
                weights[i][j] = phi[i] * w * factor;
            }
        }
        Ok(CollocationTable {
            nodes: quad.nodes.clone(),
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `phi_i(z_j) w_j` including the density factor.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i][j]
    }

    pub fn project_into(&self, samples: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.weights) {
            *o = row.iter().zip(samples).map(|(a, b)| a * b).sum();
        }
    }
}

/// Mean and standard deviation of a random field from its Galerkin coefficients.
pub fn mean_and_std(coeffs: &[f64]) -> (f64, f64) {
    let mean = coeffs.first().copied().unwrap_or(0.0);
    let var: f64 = coeffs.iter().skip(1).map(|c| c * c).sum();
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn legendre() -> GpcBasis {
        GpcBasis::new(BasisKind::LegendreUniform, 4)
    }

    fn laguerre() -> GpcBasis {
        GpcBasis::new(BasisKind::LaguerreExponential, 4)
    }

    #[test]
    fn basis_values() {
        let b = legendre();
        for z in [-1.0, -0.3, 0.0, 0.7, 1.0] {
            let p = eval_basis(&b, z, 4).unwrap();
            assert_eq!(p[0], 1.0);
            assert_abs_diff_eq!(p[1], 3f64.sqrt() * z, epsilon = 1e-15);
        }
        let l = laguerre();
        assert!(eval_basis(&l, 0.0, 4).unwrap().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert_eq!(eval_basis(&l, 1.0, 1).unwrap()[1], 0.0);
        assert!(eval_basis(&b, 1.5, 2).is_err());
        assert!(eval_basis(&l, -0.1, 2).is_err());
        assert!(eval_basis(&l, 0.5, 5).is_err());
    }

    #[test]
    fn bases_are_orthonormal() {
        for basis in [legendre(), laguerre()] {
            let quad = gauss_rule(basis.kind.quadrature_kind(), 20).unwrap();
            let mut gram = vec![vec![0.0; 5]; 5];
            for (&z, &w) in quad.nodes.iter().zip(&quad.weights) {
                let p = eval_basis(&basis, z, 4).unwrap();
                for i in 0..5 {
                    for j in 0..5 {
                        gram[i][j] += w * basis.kind.density_factor() * p[i] * p[j];
                    }
                }
            }
            for i in 0..5 {
                for j in 0..5 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(gram[i][j], e, epsilon = 1e-10);
                }
            }
        }
    }

    /// Independent route: `z L_i = -(i+1) L_{i+1} + (2i+1) L_i - i L_{i-1}` makes
    /// the `2 + z` Galerkin matrix tridiagonal.
    fn laguerre_two_plus_z(k: usize) -> Vec<Vec<f64>> {
        let mut s = vec![vec![0.0; k + 1]; k + 1];
        for i in 0..=k {
            s[i][i] = -(2.0 + (2 * i + 1) as f64);
            if i < k {
                s[i][i + 1] = (i + 1) as f64;
                s[i + 1][i] = (i + 1) as f64;
            }
        }
        s
    }

    #[test]
    fn source_matrix_for_two_plus_z() {
        let quad = gauss_rule(QuadratureKind::GaussLaguerre, 16).unwrap();
        let s1 = build_source_matrix(|z| 2.0 + z, &GpcBasis::new(BasisKind::LaguerreExponential, 1), &quad)
            .unwrap();
        let expect = [[-3.0, 1.0], [1.0, -5.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(s1.entries[i][j], expect[i][j], epsilon = 1e-12);
            }
        }
        let s4 = build_source_matrix(|z| 2.0 + z, &laguerre(), &quad).unwrap();
        let oracle = laguerre_two_plus_z(4);
        for i in 0..5 {
            for j in 0..5 {
                assert_abs_diff_eq!(s4.entries[i][j], oracle[i][j], epsilon = 1e-12);
            }
        }
        let eig = s4.to_matrix().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l < 0.0));
    }

    #[test]
    fn constant_sigma_gives_scaled_identity() {
        for basis in [legendre(), laguerre()] {
            let quad = gauss_rule(basis.kind.quadrature_kind(), 16).unwrap();
            let s = build_source_matrix(|_| 3.5, &basis, &quad).unwrap();
            let c = SgSourceMatrix::constant(3.5, 5);
            for i in 0..5 {
                for j in 0..5 {
                    assert_abs_diff_eq!(s.entries[i][j], c.entries[i][j], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn quadrature_order_does_not_matter_for_cubic_sigma() {
        let basis = legendre();
        let sigma = |z: f64| 2.0 + 0.5 * z - 0.3 * z * z + 0.1 * z * z * z;
        let a = build_source_matrix(sigma, &basis, &gauss_rule(QuadratureKind::GaussLegendre, 16).unwrap()).unwrap();
        let b = build_source_matrix(sigma, &basis, &gauss_rule(QuadratureKind::GaussLegendre, 20).unwrap()).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_abs_diff_eq!(a.entries[i][j], b.entries[i][j], epsilon = 1e-12);
                assert_abs_diff_eq!(a.entries[i][j], a.entries[j][i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn family_mismatch_is_a_config_error() {
        let quad = gauss_rule(QuadratureKind::GaussHermite, 8).unwrap();
        assert!(build_source_matrix(|_| 1.0, &legendre(), &quad).is_err());
        assert!(collocation_project(&[0.0; 8], &legendre(), &quad).is_err());
    }

    #[test]
    fn collocation_examples() {
        let basis = legendre();
        let quad = gauss_rule(QuadratureKind::GaussLegendre, 16).unwrap();
        let samples: Vec<f64> = quad.nodes.iter().map(|&z| eval_basis(&basis, z, 4).unwrap()[2]).collect();
        let c = collocation_project(&samples, &basis, &quad).unwrap();
        for (i, ci) in c.iter().enumerate() {
            assert_abs_diff_eq!(*ci, if i == 2 { 1.0 } else { 0.0 }, epsilon = 1e-12);
        }
        let c = collocation_project(&[2.5; 16], &basis, &quad).unwrap();
        assert_abs_diff_eq!(c[0], 2.5, epsilon = 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));

        let lag1 = GpcBasis::new(BasisKind::LaguerreExponential, 1);
        let lq = gauss_rule(QuadratureKind::GaussLaguerre, 16).unwrap();
        let samples: Vec<f64> = lq.nodes.iter().map(|z| 1.0 + z).collect();
        let c = collocation_project(&samples, &lag1, &lq).unwrap();
        assert_abs_diff_eq!(c[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[1], -1.0, epsilon = 1e-12);
        assert!(collocation_project(&samples[..15], &lag1, &lq).is_err());
    }

    #[test]
    fn statistics() {
        assert_eq!(mean_and_std(&[5.0, 0.0, 0.0, 0.0, 0.0]), (5.0, 0.0));
        assert_eq!(mean_and_std(&[2.0, -1.0]), (2.0, 1.0));
        assert_eq!(mean_and_std(&[0.0, 3.0, 4.0]), (0.0, 5.0));
    }

    proptest! {
        #[test]
        fn projection_reproduces_low_degree_polynomials(
            coeffs in proptest::collection::vec(-2.0f64..2.0, 5),
            laguerre_family in proptest::bool::ANY,
        ) {
            let basis = if laguerre_family { laguerre() } else { legendre() };
            let quad = gauss_rule(basis.kind.quadrature_kind(), 16).unwrap();
            let samples: Vec<f64> = quad
                .nodes
                .iter()
                .map(|&z| coeffs.iter().enumerate().map(|(k, c)| c * z.powi(k as i32)).sum())
                .collect();
            let c = collocation_project(&samples, &basis, &quad).unwrap();
            for (j, &z) in quad.nodes.iter().enumerate() {
                let phi = eval_basis(&basis, z, 4).unwrap();
                let synth: f64 = c.iter().zip(&phi).map(|(a, b)| a * b).sum();
                prop_assert!((synth - samples[j]).abs() <= 1e-10 * samples[j].abs().max(1.0));
            }
        }

        #[test]
        fn std_ignores_signs(coeffs in proptest::collection::vec(-5.0f64..5.0, 1..6), flips in proptest::collection::vec(proptest::bool::ANY, 6)) {
            let flipped: Vec<f64> = coeffs
                .iter()
                .enumerate()
                .map(|(i, &c)| if i > 0 && flips[i] { -c } else { c })
                .collect();
            prop_assert_eq!(mean_and_std(&coeffs), mean_and_std(&flipped));
        }
    }
}
