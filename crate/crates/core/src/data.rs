//! Training data from kinetic reference runs.
//!
//! Each run solves the kinetic equation, extracts the Hermite moments
//! `m_0..m_{N+1}` at every stored snapshot and, for random inputs, projects them
//! onto the gPC basis by collocation. Rows are ordered by
//! `(run_id, snapshot, x_index)`.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, invalid, Error, Result};
use crate::gpc::{BasisKind, CollocationTable, GpcBasis, DEFAULT_COLLOCATION_NODES};
use crate::hermite::MomentProjector;
use crate::kinetic::{solve_kinetic_with, InitialCondition, KineticGrid, DEFAULT_CFL, DEFAULT_NV, DEFAULT_NX};
use crate::mlp::Normalizer;
use crate::moment_system::MomentField;
use crate::quadrature::gauss_rule;
use crate::sigma::SigmaSpec;

pub const SCHEMA_VERSION: u32 = 1;
pub const GENERATOR: &str = concat!("moment-closure ", env!("CARGO_PKG_VERSION"));

/// Fourth-order central difference on a periodic grid.
pub fn spatial_gradient(values: &[f64], dx: f64) -> Result<Vec<f64>> {
    let n = values.len();
    if n < 5 {
        return Err(invalid!("fourth-order gradient needs at least 5 points, got {n}"));
    }
    let at = |j: isize| values[j.rem_euclid(n as isize) as usize];
    Ok((0..n as isize)
        .map(|j| (-at(j + 2) + 8.0 * at(j + 1) - 8.0 * at(j - 1) + at(j - 2)) / (12.0 * dx))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub nv: usize,
    pub cfl: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            nx: DEFAULT_NX,
            x_min: 0.0,
            x_max: 1.0,
            nv: DEFAULT_NV,
            cfl: DEFAULT_CFL,
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<KineticGrid> {
        KineticGrid::new(self.nx, self.x_min, self.x_max, self.nv)
            .and_then(|g| g.with_cfl(self.cfl))
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitFamily {
    DetSine,
    UqAmpSine,
    UqFreqSine,
}

impl InitFamily {
    pub fn condition(self, a0: f64, z: f64) -> InitialCondition {
        match self {
            InitFamily::DetSine => InitialCondition::DetSine { a0 },
            InitFamily::UqAmpSine => InitialCondition::UqAmpSine { z },
            InitFamily::UqFreqSine => InitialCondition::UqFreqSine { z },
        }
    }

    pub fn is_random(self) -> bool {
        self != InitFamily::DetSine
    }
}

/// Everything needed to (re)generate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub grid: GridSpec,
    pub sigma: SigmaSpec,
    pub init: InitFamily,
    /// Explicit amplitudes for `det-sine`; drawn from `U[0, 1)` when absent.
    pub amplitudes: Option<Vec<f64>>,
    pub n_runs: usize,
    pub basis: Option<BasisKind>,
    pub collocation_nodes: usize,
    pub t_max: f64,
    pub snapshot_stride: usize,
    pub include_initial: bool,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            n: 3,
            k: 0,
            grid: GridSpec::default(),
            sigma: SigmaSpec::default(),
            init: InitFamily::DetSine,
            amplitudes: None,
            n_runs: 10,
            basis: None,
            collocation_nodes: DEFAULT_COLLOCATION_NODES,
            t_max: 0.4,
            snapshot_stride: 1,
            include_initial: true,
            seed: 0,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(config_err!("N must be at least 1"));
        }
        if !(self.t_max > 0.0) {
            return Err(config_err!("t_max must be positive, got {}", self.t_max));
        }
        if self.snapshot_stride == 0 {
            return Err(config_err!("snapshot_stride must be positive"));
        }
        let sigma = self.sigma.compile()?;
        match self.basis {
            None => {
                if self.k > 0 {
                    return Err(config_err!("K = {} needs a gPC basis", self.k));
                }
                if self.init.is_random() {
                    return Err(config_err!("initial family {:?} is random and needs a gPC basis", self.init));
                }
                if sigma.depends_on_z() {
                    return Err(config_err!("sigma '{}' depends on z and needs a gPC basis", self.sigma));
                }
            }
            Some(_) => {
                if self.collocation_nodes == 0 {
                    return Err(config_err!("collocation_nodes must be positive"));
                }
            }
        }
        if self.init == InitFamily::DetSine {
            match &self.amplitudes {
                Some(a) if a.is_empty() => return Err(config_err!("amplitudes must not be empty")),
                Some(a) => {
                    if let Some(bad) = a.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                        return Err(config_err!("amplitude {bad} outside [0, 1]"));
                    }
                }
                None if self.n_runs == 0 => return Err(config_err!("n_runs must be positive")),
                None => {}
            }
        }
        self.grid.build()?;
        Ok(())
    }

    /// Amplitudes of the `det-sine` runs (a single dummy run for random families).
    pub fn resolved_amplitudes(&self) -> Vec<f64> {
        if self.init.is_random() {
            return vec![0.0];
        }
        if let Some(a) = &self.amplitudes {
            return a.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_runs).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    /// Number of stored moment orders per gPC index (`N + 2`, including the label order).
    pub fn orders(&self) -> usize {
        self.n + 2
    }
}

/// Config file text and its hash, echoed into every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub sha256: String,
    pub text: String,
}

/// Moment coefficients `m_k^i` at one time, laid out `[x][k][i]`.
#[derive(Debug, Clone)]
struct Snapshot {
    t: f64,
    values: Vec<f64>,
}

/// Runs the kinetic solver for every collocation node of one run and returns
/// the projected snapshots.
fn run_one(spec: &DataSpec, grid: &KineticGrid, a0: f64) -> Result<Vec<Snapshot>> {
    let sigma = spec.sigma.compile()?;
    let projector = MomentProjector::new(&grid.velocity_rule, spec.n + 1)?;
    let block = spec.k + 1;
    let width = spec.orders() * block;
    // (node, per-coefficient collocation weights)
    let nodes: Vec<(f64, Vec<f64>)> = match spec.basis {
        None => vec![(0.0, vec![1.0])],
        Some(kind) => {
            let basis = GpcBasis::new(kind, spec.k);
            let rule = gauss_rule(kind.quadrature_kind(), spec.collocation_nodes)?;
            let table = CollocationTable::new(&basis, &rule)?;
            (0..table.len())
                .map(|j| (table.nodes[j], (0..block).map(|i| table.weight(i, j)).collect()))
                .collect()
        }
    };
    let mut snaps: Vec<Snapshot> = Vec::new();
    let mut moments = vec![0.0; spec.orders()];
    for (j, (z, weights)) in nodes.iter().enumerate() {
        let s = sigma.eval(*z)?;
        let init = spec.init.condition(a0, *z);
        let mut idx = 0;
        solve_kinetic_with(grid, s, init, spec.t_max, spec.snapshot_stride, |_, state| {
            if j == 0 {
                snaps.push(Snapshot {
                    t: state.t,
                    values: vec![0.0; grid.nx * width],
                });
            }
            let snap = &mut snaps[idx];
            for x in 0..grid.nx {
                projector.project_into(state.slice(x), &mut moments);
                let row = &mut snap.values[x * width..(x + 1) * width];
                for (k, m) in moments.iter().enumerate() {
                    for (i, w) in weights.iter().enumerate() {
                        row[k * block + i] += w * m;
                    }
                }
            }
            idx += 1;
        })?;
    }
    Ok(snaps)
}

/// Inputs and labels for closure training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub n: usize,
    pub k: usize,
    /// `m_0..m_N`, `(K+1)(N+1)` columns.
    pub moments: Array2<f64>,
    /// `d_x m_0..d_x m_N`, same layout.
    pub gradients: Array2<f64>,
    /// `d_x m_{N+1}`, `K+1` columns.
    pub target_gradient: Array2<f64>,
    /// `m_{N+1}`, `K+1` columns.
    pub target_moment: Array2<f64>,
}

impl TrainingSet {
    pub fn new(
        n: usize,
        k: usize,
        moments: Array2<f64>,
        gradients: Array2<f64>,
        target_gradient: Array2<f64>,
        target_moment: Array2<f64>,
    ) -> Result<Self> {
        let d = (n + 1) * (k + 1);
        let rows = moments.nrows();
        let ok = moments.dim() == (rows, d)
            && gradients.dim() == (rows, d)
            && target_gradient.dim() == (rows, k + 1)
            && target_moment.dim() == (rows, k + 1);
        if !ok {
            return Err(invalid!(
                "training arrays have inconsistent shapes for N = {n}, K = {k}: {:?} {:?} {:?} {:?}",
                moments.dim(),
                gradients.dim(),
                target_gradient.dim(),
                target_moment.dim()
            ));
        }
        Ok(TrainingSet {
            n,
            k,
            moments,
            gradients,
            target_gradient,
            target_moment,
        })
    }

    pub fn len(&self) -> usize {
        self.moments.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        TrainingSet {
            n: self.n,
            k: self.k,
            moments: self.moments.select(Axis(0), rows),
            gradients: self.gradients.select(Axis(0), rows),
            target_gradient: self.target_gradient.select(Axis(0), rows),
            target_moment: self.target_moment.select(Axis(0), rows),
        }
    }
}

/// Uniformly shuffled train/validation split and a normalizer fit on the
/// training moments only.
pub fn split_and_normalize(
    data: &TrainingSet,
    val_fraction: f64,
    seed: u64,
) -> Result<(TrainingSet, TrainingSet, Normalizer)> {
    let rows = data.len();
    if rows < 2 {
        return Err(invalid!("need at least 2 rows to split, got {rows}"));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(invalid!("val_fraction must lie in (0, 1), got {val_fraction}"));
    }
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((rows as f64 * val_fraction).round() as usize).clamp(1, rows - 1);
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    let train = data.select(&train);
    let val = data.select(&val);
    let normalizer = Normalizer::fit(train.moments.view())?;
    Ok((train, val, normalizer))
}

/// Columnar dataset. `m` and `dxm` hold `(N+2)(K+1)` columns in k-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DataSpec,
    pub amplitudes: Vec<f64>,
    pub run_id: Vec<usize>,
    pub t: Vec<f64>,
    pub x_index: Vec<usize>,
    pub m: Array2<f64>,
    pub dxm: Array2<f64>,
    pub config: Option<ConfigEcho>,
}

/// Contents of the `.meta.json` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMetadata {
    pub schema_version: u32,
    pub generator: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub rows: usize,
    pub columns: Vec<String>,
    pub amplitudes: Vec<f64>,
    pub spec: DataSpec,
    pub config: Option<ConfigEcho>,
}

/// Sidecar path `<path>.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn moment_column(prefix: &str, k: usize, i: usize) -> String {
    format!("{prefix}_{k}[{i}]")
}

/// Generates the dataset described by `spec`. Runs execute on the rayon pool
/// and are merged in run order, so the result does not depend on thread count.
pub fn generate(spec: &DataSpec) -> Result<Dataset> {
    spec.validate()?;
    let grid = spec.grid.build()?;
    let amplitudes = spec.resolved_amplitudes();
    let runs: Vec<Vec<Snapshot>> = amplitudes
        .par_iter()
        .map(|&a0| run_one(spec, &grid, a0))
        .collect::<Result<_>>()?;

    let width = spec.orders() * (spec.k + 1);
    let nx = grid.nx;
    let dx = grid.dx();
    let kept: usize = runs
        .iter()
        .map(|r| r.iter().filter(|s| spec.include_initial || s.t > 0.0).count())
        .sum();
    let rows = kept * nx;
    let mut m = Array2::zeros((rows, width));
    let mut dxm = Array2::zeros((rows, width));
    let (mut run_id, mut t, mut x_index) = (Vec::with_capacity(rows), Vec::with_capacity(rows), Vec::with_capacity(rows));
    let mut r0 = 0;
    let mut field = vec![0.0; nx];
    for (rid, snaps) in runs.iter().enumerate() {
        for snap in snaps.iter().filter(|s| spec.include_initial || s.t > 0.0) {
            let values = Array2::from_shape_vec((nx, width), snap.values.clone()).expect("snapshot shape");
            m.slice_mut(s![r0..r0 + nx, ..]).assign(&values);
            for c in 0..width {
                for (x, f) in field.iter_mut().enumerate() {
                    *f = values[(x, c)];
                }
                let g = spatial_gradient(&field, dx)?;
                for (x, gv) in g.into_iter().enumerate() {
                    dxm[(r0 + x, c)] = gv;
                }
            }
            for x in 0..nx {
                run_id.push(rid);
                t.push(snap.t);
                x_index.push(x);
            }
            r0 += nx;
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        amplitudes,
        run_id,
        t,
        x_index,
        m,
        dxm,
        config: None,
    })
}

/// Kinetic reference moments `m_0..m_{N+1}` of the run with amplitude `a0`,
/// projected onto the gPC basis when `spec` has one. Uses `t_max` and
/// `snapshot_stride` of `spec`.
pub fn reference_moments(spec: &DataSpec, a0: f64) -> Result<Vec<MomentField>> {
    spec.validate()?;
    let grid = spec.grid.build()?;
    Ok(run_one(spec, &grid, a0)?
        .into_iter()
        .map(|s| MomentField {
            t: s.t,
            nx: grid.nx,
            n: spec.n + 1,
            k: spec.k,
            data: s.values,
        })
        .collect())
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.spec.n
    }

    pub fn k(&self) -> usize {
        self.spec.k
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = ["run_id", "t", "x_index"].iter().map(|s| s.to_string()).collect();
        for prefix in ["m", "dxm"] {
            for k in 0..self.spec.orders() {
                for i in 0..=self.spec.k {
                    cols.push(moment_column(prefix, k, i));
                }
            }
        }
        cols
    }

    /// Network inputs `m_0..m_N`, `d_x m_0..d_x m_N` and labels of order `N+1`.
    pub fn training_set(&self) -> Result<TrainingSet> {
        let d = (self.n() + 1) * (self.k() + 1);
        TrainingSet::new(
            self.n(),
            self.k(),
            self.m.slice(s![.., ..d]).to_owned(),
            self.dxm.slice(s![.., ..d]).to_owned(),
            self.dxm.slice(s![.., d..]).to_owned(),
            self.m.slice(s![.., d..]).to_owned(),
        )
    }

    pub fn metadata(&self) -> DatasetMetadata {
        DatasetMetadata {
            schema_version: SCHEMA_VERSION,
            generator: GENERATOR.into(),
            n: self.n(),
            k: self.k(),
            rows: self.len(),
            columns: self.columns(),
            amplitudes: self.amplitudes.clone(),
            spec: self.spec.clone(),
            config: self.config.clone(),
        }
    }

    /// Writes the CSV at `path` and the sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(self.columns()).map_err(|e| csv_error(path, e))?;
        let mut record: Vec<String> = Vec::with_capacity(3 + 2 * self.m.ncols());
        for r in 0..self.len() {
            record.clear();
            record.push(self.run_id[r].to_string());
            record.push(fmt_f64(self.t[r]));
            record.push(self.x_index[r].to_string());
            record.extend(self.m.row(r).iter().map(|&v| fmt_f64(v)));
            record.extend(self.dxm.row(r).iter().map(|&v| fmt_f64(v)));
            w.write_record(&record).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let meta = serde_json::to_string_pretty(&self.metadata()).expect("metadata serializes");
        let side = sidecar_path(path);
        std::fs::write(&side, meta).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: DatasetMetadata = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        if meta.schema_version != SCHEMA_VERSION {
            return Err(Error::format(&side, format!("unsupported schema_version {}", meta.schema_version)));
        }
        let width = meta.spec.orders() * (meta.spec.k + 1);
        let mut rd = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let header: Vec<String> = rd
            .headers()
            .map_err(|e| csv_error(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        if header != meta.columns {
            return Err(Error::format(path, "CSV header does not match the sidecar column list"));
        }
        let mut ds = Dataset {
            spec: meta.spec,
            amplitudes: meta.amplitudes,
            run_id: Vec::with_capacity(meta.rows),
            t: Vec::with_capacity(meta.rows),
            x_index: Vec::with_capacity(meta.rows),
            m: Array2::zeros((meta.rows, width)),
            dxm: Array2::zeros((meta.rows, width)),
            config: meta.config,
        };
        let mut r = 0;
        for rec in rd.records() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            if r >= meta.rows {
                return Err(Error::format(path, "more rows than recorded in the sidecar"));
            }
            let parse = |c: usize| -> Result<f64> {
                rec[c]
                    .parse::<f64>()
                    .map_err(|e| Error::format(path, format!("row {r}, column {c}: {e}")))
            };
            let parse_int = |c: usize| -> Result<usize> {
                rec[c]
                    .parse::<usize>()
                    .map_err(|e| Error::format(path, format!("row {r}, column {c}: {e}")))
            };
            ds.run_id.push(parse_int(0)?);
            ds.t.push(parse(1)?);
            ds.x_index.push(parse_int(2)?);
            for c in 0..width {
                ds.m[(r, c)] = parse(3 + c)?;
                ds.dxm[(r, c)] = parse(3 + width + c)?;
            }
            r += 1;
        }
        if r != meta.rows {
            return Err(Error::format(path, format!("expected {} rows, found {r}", meta.rows)));
        }
        Ok(ds)
    }

    /// Regenerates a dataset from its own provenance.
    pub fn regenerate(&self) -> Result<Self> {
        let mut spec = self.spec.clone();
        if spec.init == InitFamily::DetSine {
            spec.amplitudes = Some(self.amplitudes.clone());
        }
        let mut out = generate(&spec)?;
        out.spec = self.spec.clone();
        out.config = self.config.clone();
        Ok(out)
    }
}

/// 17 significant digits, enough for an exact round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}
