//! Normalized Hermite functions and the projection of velocity samples onto
//! Hermite moments `m_k = int f(v) H_k(v) dv`.
//!
//! `H_k` is orthonormal against `e^{-v^2}`. Distributions are stored as raw
//! values at the Gauss-Hermite nodes; the `e^{v^2}` factor needed to undo the
//! quadrature weight lives in the projection weights.

use std::f64::consts::PI;

use crate::error::{invalid, Result};
use crate::quadrature::{QuadratureKind, QuadratureRule};

/// Equilibrium profile `pi^{-1/2} e^{-v^2}`, normalized to unit mass.
pub fn maxwellian(v: f64) -> f64 {
    (-v * v).exp() / PI.sqrt()
}

/// `H_k` sampled at a fixed set of points, row `k` holding `H_k(points)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HermiteTable {
    pub max_order: usize,
    pub points: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl HermiteTable {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k]
    }
}

/// Tabulates `H_0..H_max_order` at `points` with the three-term recurrence
/// `H_{k+1} = sqrt(2/(k+1)) v H_k - sqrt(k/(k+1)) H_{k-1}`.
pub fn build_hermite_table(max_order: usize, points: &[f64]) -> HermiteTable {
    let h0 = PI.powf(-0.25);
    let mut values = Vec::with_capacity(max_order + 1);
    values.push(vec![h0; points.len()]);
    if max_order >= 1 {
        values.push(points.iter().map(|&v| 2f64.sqrt() * h0 * v).collect());
    }
    for k in 1..max_order {
        let kf = k as f64;
        let a = (2.0 / (kf + 1.0)).sqrt();
        let b = (kf / (kf + 1.0)).sqrt();
        let next = points
            .iter()
            .enumerate()
            .map(|(q, &v)| a * v * values[k][q] - b * values[k - 1][q])
            .collect();
        values.push(next);
    }
    HermiteTable {
        max_order,
        points: points.to_vec(),
        values,
    }
}

/// Precomputed `w_q e^{v_q^2} H_k(v_q)` so that `m_k = sum_q P[k][q] f_q`.
#[derive(Debug, Clone)]
pub struct MomentProjector {
    k_max: usize,
    rows: Vec<Vec<f64>>,
    mass_weights: Vec<f64>,
}

impl MomentProjector {
    pub fn new(rule: &QuadratureRule, k_max: usize) -> Result<Self> {
        let table = build_hermite_table(k_max, &rule.nodes);
        Self::from_table(rule, &table, k_max)
    }

    pub fn from_table(rule: &QuadratureRule, table: &HermiteTable, k_max: usize) -> Result<Self> {
        if rule.kind != QuadratureKind::GaussHermite {
            return Err(invalid!(
                "moment projection requires a Gauss-Hermite rule, got {:?}",
                rule.kind
            ));
        }
        if k_max > table.max_order {
            return Err(invalid!(
                "k_max = {k_max} exceeds the tabulated order {}",
                table.max_order
            ));
        }
        if table.points.len() != rule.len() {
            return Err(invalid!(
                "table has {} points but the rule has {} nodes",
                table.points.len(),
                rule.len()
            ));
        }
        if k_max >= rule.len() {
            log::warn!(
                "moment order {k_max} is not resolved by {} velocity nodes (H_{} vanishes there)",
                rule.len(),
                rule.len()
            );
        }
        let mass_weights: Vec<f64> = rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .map(|(&v, &w)| w * (v * v).exp())
            .collect();
        let rows = (0..=k_max)
            .map(|k| {
                table.values[k]
                    .iter()
                    .zip(&mass_weights)
                    .map(|(h, w)| h * w)
                    .collect()
            })
            .collect();
        Ok(MomentProjector {
            k_max,
            rows,
            mass_weights,
        })
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    /// Modified weights `w_q e^{v_q^2}`; `sum_q mass_weights[q] f_q` is the density.
    pub fn mass_weights(&self) -> &[f64] {
        &self.mass_weights
    }

    pub fn project_into(&self, f: &[f64], out: &mut [f64]) {
        for (m, row) in out.iter_mut().zip(&self.rows) {
            *m = row.iter().zip(f).map(|(p, v)| p * v).sum();
        }
    }

    pub fn project(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.mass_weights.len() {
            return Err(invalid!(
                "distribution has {} samples, expected {}",
                f.len(),
                self.mass_weights.len()
            ));
        }
        let mut out = vec![0.0; self.k_max + 1];
        self.project_into(f, &mut out);
        Ok(out)
    }
}

/// Hermite moments `m_0..m_{k_max}` of a distribution sampled at the nodes of
/// a Gauss-Hermite rule.
pub fn moments_from_distribution(
    f_at_nodes: &[f64],
    rule: &QuadratureRule,
    table: &HermiteTable,
    k_max: usize,
) -> Result<Vec<f64>> {
    MomentProjector::from_table(rule, table, k_max)?.project(f_at_nodes)
}
