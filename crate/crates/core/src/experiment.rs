//! Experiment configuration and the pipeline steps run by the command line.
//!
//! A config is a TOML file with the sections `grid`, `kinetic`, `closure`,
//! `training`, `sg` and `experiment`. Every key is optional and unknown keys
//! are rejected. Leaving out `[sg]` selects a deterministic run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::closure::{train, ClosureKind, ClosureModel, EpochRecord, TrainConfig, TrainOutcome};
use crate::data::{
    csv_error, fmt_f64, generate, reference_moments, sidecar_path, ConfigEcho, DataSpec, Dataset, GridSpec,
    InitFamily,
};
use crate::error::{config_err, Error, Result};
use crate::gpc::{build_source_matrix, BasisKind, GpcBasis, DEFAULT_COLLOCATION_NODES, DEFAULT_TRUNCATION};
use crate::moment_system::{
    initial_moments, solve_moment_system, MomentField, RunStatus, Source, Stochastic, SystemSpec, WenoWeights,
    DEFAULT_ALPHA_LF,
};
use crate::quadrature::gauss_rule;
use crate::sigma::SigmaSpec;
use crate::snapshots::{compare, write_error_table, ErrorRow, RunInfo, SnapshotFile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KineticSection {
    pub sigma: SigmaSpec,
    pub init: InitFamily,
    /// Amplitude of the test run.
    pub a0: f64,
    pub t_final: f64,
}

impl Default for KineticSection {
    fn default() -> Self {
        KineticSection {
            sigma: SigmaSpec::default(),
            init: InitFamily::DetSine,
            a0: 0.9,
            t_final: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosureSection {
    pub kind: ClosureKind,
    #[serde(rename = "N")]
    pub n: usize,
    pub alpha_lf: f64,
    pub weno: WenoWeights,
    pub checkpoint: Option<PathBuf>,
    /// Steps between stored snapshots of a solve.
    pub snapshot_every: usize,
}

impl Default for ClosureSection {
    fn default() -> Self {
        ClosureSection {
            kind: ClosureKind::Lg,
            n: 3,
            alpha_lf: DEFAULT_ALPHA_LF,
            weno: WenoWeights::Nonlinear,
            checkpoint: None,
            snapshot_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgSection {
    #[serde(rename = "K")]
    pub k: usize,
    pub basis: BasisKind,
    pub collocation_nodes: usize,
}

impl Default for SgSection {
    fn default() -> Self {
        SgSection {
            k: DEFAULT_TRUNCATION,
            basis: BasisKind::LegendreUniform,
            collocation_nodes: DEFAULT_COLLOCATION_NODES,
        }
    }
}

/// Training-data generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub n_runs: usize,
    pub amplitudes: Option<Vec<f64>>,
    pub t_max: f64,
    pub snapshot_stride: usize,
    pub include_initial: bool,
    pub seed: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let d = DataSpec::default();
        ExperimentSection {
            n_runs: d.n_runs,
            amplitudes: None,
            t_max: d.t_max,
            snapshot_stride: d.snapshot_stride,
            include_initial: d.include_initial,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridSpec,
    pub kinetic: KineticSection,
    pub closure: ClosureSection,
    pub training: TrainConfig,
    pub sg: Option<SgSection>,
    pub experiment: ExperimentSection,
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub closure: Option<ClosureKind>,
    pub sigma: Option<SigmaSpec>,
    pub n: Option<usize>,
    pub k: Option<usize>,
}

impl Overrides {
    fn describe(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(s) = self.seed {
            out.push(format!("--seed {s}"));
        }
        if let Some(c) = self.closure {
            out.push(format!("--closure {c}"));
        }
        if let Some(s) = &self.sigma {
            out.push(format!("--sigma {s}"));
        }
        if let Some(n) = self.n {
            out.push(format!("--N {n}"));
        }
        if let Some(k) = self.k {
            out.push(format!("--K {k}"));
        }
        out
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err!("{}", e.to_string().trim_end()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.experiment.seed = s;
            self.training.seed = s;
        }
        if let Some(c) = o.closure {
            self.closure.kind = c;
        }
        if let Some(s) = &o.sigma {
            s.compile()?;
            self.kinetic.sigma = s.clone();
        }
        if let Some(n) = o.n {
            self.closure.n = n;
        }
        if let Some(k) = o.k {
            match &mut self.sg {
                Some(sg) => sg.k = k,
                None if k == 0 => {}
                None => return Err(config_err!("--K {k} needs an [sg] section")),
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.closure.n
    }

    pub fn k(&self) -> usize {
        self.sg.as_ref().map_or(0, |s| s.k)
    }

    pub fn stochastic(&self) -> Option<Stochastic> {
        self.sg.as_ref().map(|s| Stochastic {
            basis: s.basis,
            nodes: s.collocation_nodes,
        })
    }

    /// Training-data spec.
    pub fn data_spec(&self) -> DataSpec {
        DataSpec {
            n: self.n(),
            k: self.k(),
            grid: self.grid.clone(),
            sigma: self.kinetic.sigma.clone(),
            init: self.kinetic.init,
            amplitudes: self.experiment.amplitudes.clone(),
            n_runs: self.experiment.n_runs,
            basis: self.sg.as_ref().map(|s| s.basis),
            collocation_nodes: self.sg.as_ref().map_or(DEFAULT_COLLOCATION_NODES, |s| s.collocation_nodes),
            t_max: self.experiment.t_max,
            snapshot_stride: self.experiment.snapshot_stride,
            include_initial: self.experiment.include_initial,
            seed: self.experiment.seed,
        }
    }

    /// Spec of the single kinetic test run at `kinetic.a0` up to `kinetic.t_final`.
    pub fn reference_spec(&self) -> DataSpec {
        DataSpec {
            amplitudes: Some(vec![self.kinetic.a0]),
            n_runs: 1,
            t_max: self.kinetic.t_final,
            snapshot_stride: self.closure.snapshot_every.max(1),
            ..self.data_spec()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data_spec().validate()?;
        self.reference_spec().validate()?;
        self.training.validate()?;
        if self.closure.snapshot_every == 0 {
            return Err(config_err!("closure.snapshot_every must be positive"));
        }
        if !(self.closure.alpha_lf > 0.0) {
            return Err(config_err!("closure.alpha_lf must be positive"));
        }
        if self.closure.n == 2 && self.closure.kind == ClosureKind::LgHyper {
            return Err(config_err!("lg-hyper is not defined for N = 2"));
        }
        self.closure.kind.output_dim(self.n(), self.k())?;
        Ok(())
    }

    pub fn source(&self) -> Result<Source> {
        let sigma = self.kinetic.sigma.compile()?;
        match &self.sg {
            None => Ok(Source::Constant(sigma.eval(0.0)?)),
            Some(sg) => {
                let basis = GpcBasis::new(sg.basis, sg.k);
                let rule = gauss_rule(sg.basis.quadrature_kind(), sg.collocation_nodes)?;
                for &z in &rule.nodes {
                    sigma.eval(z)?;
                }
                let m = build_source_matrix(|z| sigma.eval(z).unwrap_or(f64::NAN), &basis, &rule)?;
                Ok(Source::Galerkin(m))
            }
        }
    }

    pub fn system_spec(&self, model: ClosureModel) -> Result<SystemSpec> {
        Ok(SystemSpec::new(model, self.source()?)?
            .with_alpha(self.closure.alpha_lf)?
            .with_cfl(self.grid.cfl)?
            .with_weno(self.closure.weno))
    }
}

pub fn config_echo(text: &str) -> ConfigEcho {
    ConfigEcho {
        sha256: hex::encode(Sha256::digest(text.as_bytes())),
        text: text.to_string(),
    }
}

/// A parsed config with overrides applied and the echo that goes into outputs.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub echo: ConfigEcho,
}

impl LoadedConfig {
    /// Parses `text` (empty means all defaults). Overrides are appended to the
    /// echoed text as comments so the hash covers them.
    pub fn from_text(text: &str, overrides: &Overrides) -> Result<Self> {
        let mut config = ExperimentConfig::parse(text)?;
        config.apply(overrides)?;
        config.validate()?;
        let mut echoed = text.to_string();
        for o in overrides.describe() {
            if !echoed.is_empty() && !echoed.ends_with('\n') {
                echoed.push('\n');
            }
            echoed.push_str(&format!("# override: {o}\n"));
        }
        Ok(LoadedConfig {
            config,
            echo: config_echo(&echoed),
        })
    }

    pub fn from_path(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        LoadedConfig::from_text(&text, overrides)
    }

    pub fn generate_dataset(&self) -> Result<Dataset> {
        let mut ds = generate(&self.config.data_spec())?;
        ds.config = Some(self.echo.clone());
        Ok(ds)
    }

    /// Trains `closure.kind` on `data`, which must match the config's `N` and `K`.
    pub fn train(&self, data: &Dataset) -> Result<TrainOutcome> {
        let cfg = &self.config;
        if data.n() != cfg.n() || data.k() != cfg.k() {
            return Err(config_err!(
                "dataset has N = {}, K = {} but the config asks for N = {}, K = {}",
                data.n(),
                data.k(),
                cfg.n(),
                cfg.k()
            ));
        }
        let mut out = train(cfg.closure.kind, &data.training_set()?, &cfg.training)?;
        out.model.config = Some(self.echo.clone());
        Ok(out)
    }

    /// The model for `kind`: P_N needs nothing, learned kinds load `checkpoint`
    /// (falling back to `closure.checkpoint`) and must match `kind`, `N` and `K`.
    pub fn load_model(&self, kind: ClosureKind, checkpoint: Option<&Path>) -> Result<ClosureModel> {
        let cfg = &self.config;
        if kind == ClosureKind::Pn {
            return Ok(ClosureModel::pn(cfg.n(), cfg.k()));
        }
        let path = checkpoint
            .map(Path::to_path_buf)
            .or_else(|| cfg.closure.checkpoint.clone())
            .ok_or_else(|| config_err!("the {kind} closure needs a checkpoint"))?;
        let model = ClosureModel::load(&path)?;
        if model.kind != kind || model.n != cfg.n() || model.k != cfg.k() {
            return Err(config_err!(
                "checkpoint {} holds a {} closure with N = {}, K = {}; expected {kind} with N = {}, K = {}",
                path.display(),
                model.kind,
                model.n,
                model.k,
                cfg.n(),
                cfg.k()
            ));
        }
        Ok(model)
    }

    fn run_info(&self, closure: &str, status: RunStatus, mass_drift: Option<f64>) -> RunInfo {
        let cfg = &self.config;
        RunInfo {
            closure: closure.to_string(),
            sigma: cfg.kinetic.sigma.clone(),
            init: cfg.kinetic.init,
            a0: cfg.kinetic.a0,
            stochastic: cfg.stochastic(),
            grid: cfg.grid.clone(),
            alpha_lf: None,
            seed: None,
            checkpoint: None,
            t_final: cfg.kinetic.t_final,
            status,
            mass_drift,
            config: Some(self.echo.clone()),
        }
    }

    /// Kinetic reference moments `m_0..m_N` of the test run.
    pub fn solve_reference(&self) -> Result<SnapshotFile> {
        let cfg = &self.config;
        let snaps: Vec<MomentField> = reference_moments(&cfg.reference_spec(), cfg.kinetic.a0)?
            .iter()
            .map(|s| s.truncated(cfg.n()))
            .collect::<Result<_>>()?;
        let dx = cfg.grid.dx();
        let blocks = cfg.k() + 1;
        let first = &snaps[0];
        let scale = (0..blocks).map(|i| first.mass(i, dx).abs()).sum::<f64>().max(f64::MIN_POSITIVE);
        let drift = snaps
            .iter()
            .flat_map(|s| (0..blocks).map(move |i| (s.mass(i, dx) - first.mass(i, dx)).abs() / scale))
            .fold(0.0, f64::max);
        SnapshotFile::new(self.run_info("kinetic", RunStatus::Completed, Some(drift)), snaps)
    }

    /// Closed moment system for `model` from the test initial data. A blow-up
    /// is recorded in the metadata, not returned as an error.
    pub fn solve_closure(&self, model: ClosureModel, checkpoint: Option<&Path>) -> Result<SnapshotFile> {
        let cfg = &self.config;
        let kind = model.kind;
        let seed = model.train_config.as_ref().map(|t| t.seed);
        let init = initial_moments(
            cfg.kinetic.init,
            cfg.kinetic.a0,
            &cfg.grid,
            cfg.n(),
            cfg.k(),
            cfg.stochastic(),
        )?;
        let spec = cfg.system_spec(model)?;
        let run = solve_moment_system(
            &init,
            &spec,
            cfg.grid.dx(),
            cfg.kinetic.t_final,
            cfg.closure.snapshot_every,
        )?;
        let mut info = self.run_info(kind.as_str(), run.status, Some(run.mass_drift));
        info.alpha_lf = Some(spec.alpha_lf);
        info.seed = seed;
        info.checkpoint = checkpoint.map(|p| p.display().to_string());
        SnapshotFile::new(info, run.snapshots)
    }
}

/// Writes the training history CSV and its sidecar (config echo).
pub fn write_history(path: &Path, history: &[EpochRecord], echo: Option<&ConfigEcho>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["epoch", "lr", "train_loss", "train_rel_l2", "val_rel_l2"])
        .map_err(|e| csv_error(path, e))?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            fmt_f64(r.lr),
            fmt_f64(r.train_loss),
            fmt_f64(r.train_rel_l2),
            fmt_f64(r.val_rel_l2),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let meta = serde_json::json!({ "format": "moment-closure-history", "config": echo });
    std::fs::write(&side, serde_json::to_string_pretty(&meta).expect("json")).map_err(|e| Error::io(&side, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    rd.deserialize().map(|r| r.map_err(|e| csv_error(path, e))).collect()
}

/// Files written by [`uq_run`].
#[derive(Debug, Clone)]
pub struct UqRunOutput {
    pub errors: Vec<ErrorRow>,
    /// Status of the learned-closure solve.
    pub status: RunStatus,
}

/// Dataset, training, kinetic/P_N/learned solves and the error table, all
/// written into `dir`.
pub fn uq_run(loaded: &LoadedConfig, dir: &Path) -> Result<UqRunOutput> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let kind = loaded.config.closure.kind;
    let data = loaded.generate_dataset()?;
    data.save(&dir.join("data.csv"))?;
    let reference = loaded.solve_reference()?;
    reference.save(&dir.join("kinetic.csv"))?;
    let pn = loaded.solve_closure(ClosureModel::pn(loaded.config.n(), loaded.config.k()), None)?;
    pn.save(&dir.join("pn.csv"))?;
    let mut errors = compare(&reference, &pn, "pn.csv")?;
    let mut status = pn.meta.status;
    if kind != ClosureKind::Pn {
        let outcome = loaded.train(&data)?;
        let ckpt = dir.join("model.json");
        outcome.model.save(&ckpt)?;
        write_history(&dir.join("history.csv"), &outcome.history, Some(&loaded.echo))?;
        let learned = loaded.solve_closure(outcome.model, Some(&ckpt))?;
        let name = format!("{}.csv", kind.as_str());
        learned.save(&dir.join(&name))?;
        errors.extend(compare(&reference, &learned, &name)?);
        status = learned.meta.status;
    }
    write_error_table(&dir.join("errors.csv"), &errors)?;
    Ok(UqRunOutput { errors, status })
}
