//! Snapshot files of moment runs and relative-L2 error tables.
//!
//! A snapshot file is a CSV with columns `t, x, m_k^i` (k-major) followed, for
//! runs with a gPC basis, by `mean_k, std_k`. The sidecar `<path>.meta.json`
//! records how the run was produced.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::closure::relative_l2;
use crate::data::{csv_error, fmt_f64, sidecar_path, ConfigEcho, GridSpec, InitFamily, GENERATOR, SCHEMA_VERSION};
use crate::error::{config_err, Error, Result};
use crate::gpc::mean_and_std;
use crate::moment_system::{MomentField, RunStatus, Stochastic};
use crate::sigma::SigmaSpec;

pub const SNAPSHOT_FORMAT: &str = "moment-closure-snapshots";
pub const ERROR_TABLE_FORMAT: &str = "moment-closure-errors";

/// Times closer than this (relative to `max(1, t)`) are matched by `compare`.
const TIME_MATCH: f64 = 1e-9;

pub fn snapshot_column(order: usize, i: usize) -> String {
    format!("m_{order}^{i}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotMetadata {
    pub format: String,
    pub schema_version: u32,
    pub generator: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    /// `kinetic` for reference runs, otherwise the closure kind.
    pub closure: String,
    pub sigma: SigmaSpec,
    pub init: InitFamily,
    pub a0: f64,
    pub stochastic: Option<Stochastic>,
    pub grid: GridSpec,
    pub alpha_lf: Option<f64>,
    pub seed: Option<u64>,
    pub checkpoint: Option<String>,
    pub t_final: f64,
    pub status: RunStatus,
    pub mass_drift: Option<f64>,
    pub rows: usize,
    pub columns: Vec<String>,
    pub config: Option<ConfigEcho>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotFile {
    pub meta: SnapshotMetadata,
    pub snapshots: Vec<MomentField>,
}

/// Provenance of a run, everything in [`SnapshotMetadata`] that is not
/// derived from the snapshots themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct RunInfo {
    pub closure: String,
    pub sigma: SigmaSpec,
    pub init: InitFamily,
    pub a0: f64,
    pub stochastic: Option<Stochastic>,
    pub grid: GridSpec,
    pub alpha_lf: Option<f64>,
    pub seed: Option<u64>,
    pub checkpoint: Option<String>,
    pub t_final: f64,
    pub status: RunStatus,
    pub mass_drift: Option<f64>,
    pub config: Option<ConfigEcho>,
}

fn columns(n: usize, k: usize, stochastic: bool) -> Vec<String> {
    let mut cols = vec!["t".to_string(), "x".to_string()];
    for order in 0..=n {
        for i in 0..=k {
            cols.push(snapshot_column(order, i));
        }
    }
    if stochastic {
        for order in 0..=n {
            cols.push(format!("mean_{order}"));
            cols.push(format!("std_{order}"));
        }
    }
    cols
}

impl SnapshotFile {
    pub fn new(info: RunInfo, snapshots: Vec<MomentField>) -> Result<Self> {
        let first = snapshots
            .first()
            .ok_or_else(|| crate::error::invalid!("a snapshot file needs at least one snapshot"))?;
        let (n, k, nx) = (first.n, first.k, first.nx);
        if snapshots.iter().any(|s| s.n != n || s.k != k || s.nx != nx) {
            return Err(crate::error::invalid!("snapshots of one run must share N, K and Nx"));
        }
        if nx != info.grid.nx {
            return Err(config_err!("snapshots have {nx} points, grid has {}", info.grid.nx));
        }
        let meta = SnapshotMetadata {
            format: SNAPSHOT_FORMAT.into(),
            schema_version: SCHEMA_VERSION,
            generator: GENERATOR.into(),
            n,
            k,
            closure: info.closure,
            sigma: info.sigma,
            init: info.init,
            a0: info.a0,
            stochastic: info.stochastic,
            grid: info.grid,
            alpha_lf: info.alpha_lf,
            seed: info.seed,
            checkpoint: info.checkpoint,
            t_final: info.t_final,
            status: info.status,
            mass_drift: info.mass_drift,
            rows: snapshots.len() * nx,
            columns: columns(n, k, info.stochastic.is_some()),
            config: info.config,
        };
        Ok(SnapshotFile { meta, snapshots })
    }

    pub fn n(&self) -> usize {
        self.meta.n
    }

    pub fn k(&self) -> usize {
        self.meta.k
    }

    pub fn last(&self) -> &MomentField {
        self.snapshots.last().expect("nonempty by construction")
    }

    /// Snapshot whose time matches `t`.
    pub fn at_time(&self, t: f64) -> Option<&MomentField> {
        self.snapshots
            .iter()
            .find(|s| (s.t - t).abs() <= TIME_MATCH * t.abs().max(1.0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(&self.meta.columns).map_err(|e| csv_error(path, e))?;
        let g = &self.meta.grid;
        let stochastic = self.meta.stochastic.is_some();
        let mut record = Vec::with_capacity(self.meta.columns.len());
        for snap in &self.snapshots {
            for x in 0..snap.nx {
                record.clear();
                record.push(fmt_f64(snap.t));
                record.push(fmt_f64(g.x_min + x as f64 * g.dx()));
                let row = &snap.data[x * snap.width()..(x + 1) * snap.width()];
                record.extend(row.iter().map(|&v| fmt_f64(v)));
                if stochastic {
                    for order in 0..=snap.n {
                        let (mean, std) = mean_and_std(&row[order * (snap.k + 1)..(order + 1) * (snap.k + 1)]);
                        record.push(fmt_f64(mean));
                        record.push(fmt_f64(std));
                    }
                }
                w.write_record(&record).map_err(|e| csv_error(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let meta = serde_json::to_string_pretty(&self.meta).expect("metadata serializes");
        std::fs::write(&side, meta).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: SnapshotMetadata =
            serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        if meta.format != SNAPSHOT_FORMAT || meta.schema_version != SCHEMA_VERSION {
            return Err(Error::format(
                &side,
                format!("not a version {SCHEMA_VERSION} snapshot sidecar"),
            ));
        }
        let nx = meta.grid.nx;
        if nx == 0 || meta.rows % nx != 0 {
            return Err(Error::format(&side, "row count is not a multiple of nx"));
        }
        let mut rd = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let header: Vec<String> = rd
            .headers()
            .map_err(|e| csv_error(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        if header != meta.columns || header != columns(meta.n, meta.k, meta.stochastic.is_some()) {
            return Err(Error::format(path, "CSV header does not match the sidecar"));
        }
        let width = (meta.n + 1) * (meta.k + 1);
        let mut snapshots: Vec<MomentField> = Vec::with_capacity(meta.rows / nx);
        for (r, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let parse = |c: usize| -> Result<f64> {
                rec.get(c)
                    .ok_or_else(|| Error::format(path, format!("row {r} is short")))?
                    .parse::<f64>()
                    .map_err(|e| Error::format(path, format!("row {r}, column {c}: {e}")))
            };
            let x = r % nx;
            if x == 0 {
                let mut f = MomentField::zeros(nx, meta.n, meta.k);
                f.t = parse(0)?;
                snapshots.push(f);
            }
            let snap = snapshots.last_mut().expect("pushed above");
            for c in 0..width {
                snap.data[x * width + c] = parse(2 + c)?;
            }
        }
        if snapshots.len() * nx != meta.rows {
            return Err(Error::format(path, format!("expected {} rows", meta.rows)));
        }
        Ok(SnapshotFile { meta, snapshots })
    }
}

/// One entry of an error table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub candidate: String,
    pub closure: String,
    pub t: f64,
    /// `m_k^i` for a single coefficient, `m_k` for all gPC coefficients of order k.
    pub field: String,
    pub rel_l2: f64,
}

/// Relative L2 errors of `candidate` against `reference` over `x`, for every
/// shared time, order and gPC index. Refuses mismatched grids.
pub fn compare(reference: &SnapshotFile, candidate: &SnapshotFile, label: &str) -> Result<Vec<ErrorRow>> {
    let (rg, cg) = (&reference.meta.grid, &candidate.meta.grid);
    if rg.nx != cg.nx || rg.x_min != cg.x_min || rg.x_max != cg.x_max {
        return Err(config_err!(
            "grid mismatch: reference has nx = {} on [{}, {}], {label} has nx = {} on [{}, {}]",
            rg.nx,
            rg.x_min,
            rg.x_max,
            cg.nx,
            cg.x_min,
            cg.x_max
        ));
    }
    let n = reference.n().min(candidate.n());
    let k = reference.k().min(candidate.k());
    let mut rows = Vec::new();
    for snap in &candidate.snapshots {
        let Some(refsnap) = reference.at_time(snap.t) else { continue };
        let row = |field: String, rel_l2: f64| ErrorRow {
            candidate: label.to_string(),
            closure: candidate.meta.closure.clone(),
            t: snap.t,
            field,
            rel_l2,
        };
        for order in 0..=n {
            let (mut all_p, mut all_r) = (Vec::new(), Vec::new());
            for i in 0..=k {
                let p = snap.profile(order, i);
                let r = refsnap.profile(order, i);
                rows.push(row(snapshot_column(order, i), relative_l2(&p, &r)?));
                all_p.extend(p);
                all_r.extend(r);
            }
            if k > 0 {
                rows.push(row(format!("m_{order}"), relative_l2(&all_p, &all_r)?));
            }
        }
    }
    Ok(rows)
}

pub fn write_error_table(path: &Path, rows: &[ErrorRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["candidate", "closure", "t", "field", "rel_l2"])
        .map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([r.candidate.clone(), r.closure.clone(), fmt_f64(r.t), r.field.clone(), fmt_f64(r.rel_l2)])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_error_table(path: &Path) -> Result<Vec<ErrorRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    rd.deserialize()
        .map(|r| r.map_err(|e| csv_error(path, e)))
        .collect()
}

/// Sidecar of an error table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorTableMetadata {
    pub format: String,
    pub schema_version: u32,
    pub generator: String,
    pub reference: String,
    pub candidates: Vec<String>,
    /// Config hashes of the compared files, reference first.
    pub input_hashes: Vec<Option<String>>,
    pub config: Option<ConfigEcho>,
}
