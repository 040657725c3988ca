//! Closure models for the truncated moment hierarchy and their training.
//!
//! * `Pn`: `m_{N+1} = 0`.
//! * `Lm`: a network maps `m_0..m_N` to `m_{N+1}`.
//! * `Lg`: a network maps `m_0..m_N` to coefficients `c_i` with
//!   `d_x m_{N+1} = sum_i c_i d_x m_i`.
//! * `LgHyper`: as `Lg`, but only `c_{N-2}, c_{N-1}, c_N` (or `c_0, c_1` for
//!   `N = 1`) are learned and they pass through the hyperbolicity head.
//!
//! Features use the k-major layout `index = k (K+1) + i` for moment order `k`
//! and gPC index `i`; with `K > 0` the coefficients act componentwise.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split_and_normalize, ConfigEcho, TrainingSet};
use crate::error::{config_err, invalid, Error, Result};
use crate::hyperbolicity::{constrain_with_jacobian, tail_len, DEFAULT_MARGIN};
use crate::mlp::{Adam, AdamConfig, Dense, Mlp, Normalizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClosureKind {
    Pn,
    Lm,
    Lg,
    LgHyper,
}

impl ClosureKind {
    pub const ALL: [ClosureKind; 4] = [ClosureKind::Pn, ClosureKind::Lm, ClosureKind::Lg, ClosureKind::LgHyper];

    pub fn as_str(self) -> &'static str {
        match self {
            ClosureKind::Pn => "pn",
            ClosureKind::Lm => "lm",
            ClosureKind::Lg => "lg",
            ClosureKind::LgHyper => "lg-hyper",
        }
    }

    pub fn is_learned(self) -> bool {
        self != ClosureKind::Pn
    }

    /// Network output width for moment order `n` and truncation `k`.
    pub fn output_dim(self, n: usize, k: usize) -> Result<usize> {
        match self {
            ClosureKind::Pn => Ok(0),
            ClosureKind::Lm => Ok(k + 1),
            ClosureKind::Lg => Ok(feature_dim(n, k)),
            ClosureKind::LgHyper => {
                if k > 0 {
                    return Err(config_err!(
                        "lg-hyper is only defined for the deterministic system (K = 0), got K = {k}"
                    ));
                }
                tail_len(n).map_err(|e| Error::Config(e.to_string()))
            }
        }
    }
}

impl fmt::Display for ClosureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClosureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "pn" => Ok(ClosureKind::Pn),
            "lm" => Ok(ClosureKind::Lm),
            "lg" => Ok(ClosureKind::Lg),
            "lg-hyper" => Ok(ClosureKind::LgHyper),
            other => Err(config_err!("unknown closure '{other}' (expected pn, lm, lg or lg-hyper)")),
        }
    }
}

/// Number of features `(K+1)(N+1)` fed to the networks.
pub fn feature_dim(n: usize, k: usize) -> usize {
    (k + 1) * (n + 1)
}

/// Training hyperparameters. Defaults are the full-scale protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            epochs: 1000,
            lr_decay_factor: 0.35,
            lr_decay_every: 100,
            batch_size: 1024,
            val_fraction: 0.10,
            seed: 0,
            hidden: vec![256; 5],
            epsilon: DEFAULT_MARGIN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(config_err!("training.lr0 must be positive, got {}", self.lr0));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(config_err!(
                "training.epochs, training.batch_size and training.lr_decay_every must be positive"
            ));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(config_err!(
                "training.lr_decay_factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(config_err!(
                "training.val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            ));
        }
        if self.hidden.contains(&0) {
            return Err(config_err!("training.hidden widths must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(config_err!("training.epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// A closure for the `N`-th order moment system with truncation `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosureModel {
    pub kind: ClosureKind,
    pub n: usize,
    pub k: usize,
    pub epsilon: f64,
    mlp: Option<Mlp>,
    input: Normalizer,
    target: Option<Normalizer>,
    pub train_config: Option<TrainConfig>,
    /// Config of the run that produced this model.
    pub config: Option<ConfigEcho>,
}

impl ClosureModel {
    pub fn pn(n: usize, k: usize) -> Self {
        ClosureModel {
            kind: ClosureKind::Pn,
            n,
            k,
            epsilon: DEFAULT_MARGIN,
            mlp: None,
            input: Normalizer::identity(feature_dim(n, k)),
            target: None,
            train_config: None,
            config: None,
        }
    }

    /// Assembles a learned model from explicit parts, checking every dimension.
    pub fn from_parts(
        kind: ClosureKind,
        n: usize,
        k: usize,
        epsilon: f64,
        mlp: Mlp,
        input: Normalizer,
        target: Option<Normalizer>,
    ) -> Result<Self> {
        if kind == ClosureKind::Pn {
            return Err(invalid!("the P_N closure carries no network"));
        }
        let d_in = feature_dim(n, k);
        let d_out = kind.output_dim(n, k)?;
        if mlp.input_dim() != d_in || mlp.output_dim() != d_out {
            return Err(config_err!(
                "{kind} closure with N = {n}, K = {k} needs a {d_in} -> {d_out} network, got {} -> {}",
                mlp.input_dim(),
                mlp.output_dim()
            ));
        }
        if input.dim() != d_in {
            return Err(config_err!("input normalizer has dimension {}, expected {d_in}", input.dim()));
        }
        match (&target, kind) {
            (Some(t), ClosureKind::Lm) if t.dim() == k + 1 => {}
            (None, ClosureKind::Lg | ClosureKind::LgHyper) => {}
            _ => {
                return Err(config_err!(
                    "target normalizer must be present (dim K+1) for lm and absent otherwise"
                ))
            }
        }
        if kind == ClosureKind::LgHyper && !(epsilon > 0.0) {
            return Err(config_err!("lg-hyper margin must be positive, got {epsilon}"));
        }
        Ok(ClosureModel {
            kind,
            n,
            k,
            epsilon,
            mlp: Some(mlp),
            input,
            target,
            train_config: None,
            config: None,
        })
    }

    /// Freshly initialized (untrained) network with identity normalizers.
    pub fn initialized(kind: ClosureKind, n: usize, k: usize, hidden: &[usize], epsilon: f64, seed: u64) -> Result<Self> {
        if kind == ClosureKind::Pn {
            return Ok(ClosureModel::pn(n, k));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::new(&layer_dims(kind, n, k, hidden)?, &mut rng)?;
        let target = (kind == ClosureKind::Lm).then(|| Normalizer::identity(k + 1));
        ClosureModel::from_parts(kind, n, k, epsilon, mlp, Normalizer::identity(feature_dim(n, k)), target)
    }

    pub fn feature_dim(&self) -> usize {
        feature_dim(self.n, self.k)
    }

    pub fn mlp(&self) -> Option<&Mlp> {
        self.mlp.as_ref()
    }

    pub fn input_normalizer(&self) -> &Normalizer {
        &self.input
    }

    pub fn target_normalizer(&self) -> Option<&Normalizer> {
        self.target.as_ref()
    }

    fn check_rows(&self, m: &ArrayView2<f64>) -> Result<()> {
        if m.ncols() != self.feature_dim() {
            return Err(invalid!(
                "closure expects {} features per point, got {}",
                self.feature_dim(),
                m.ncols()
            ));
        }
        Ok(())
    }

    fn raw_outputs(&self, m: ArrayView2<f64>) -> Array2<f64> {
        let mlp = self.mlp.as_ref().expect("learned closure has a network");
        mlp.forward_batch(self.input.normalize(m).view())
    }

    /// Per-point coefficients `c` of `d_x m_{N+1} = sum c ⊙ d_x m`, one row per
    /// point with `(K+1)(N+1)` columns. Zero for `Pn`.
    pub fn gradient_coefficients(&self, m: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_rows(&m)?;
        let d = self.feature_dim();
        match self.kind {
            ClosureKind::Pn => Ok(Array2::zeros((m.nrows(), d))),
            ClosureKind::Lg => Ok(self.raw_outputs(m)),
            ClosureKind::LgHyper => {
                let raw = self.raw_outputs(m);
                let first = d - raw.ncols();
                let mut out = Array2::zeros((m.nrows(), d));
                for (raw_row, mut row) in raw.rows().into_iter().zip(out.rows_mut()) {
                    let (c, _) = constrain_with_jacobian(raw_row.as_slice().expect("row"), self.n, self.epsilon)?;
                    row.slice_mut(s![first..]).assign(&ndarray::ArrayView1::from(&c));
                }
                Ok(out)
            }
            ClosureKind::Lm => Err(invalid!("the lm closure predicts m_{{N+1}}, not gradient coefficients")),
        }
    }

    /// Predicted `d_x m_{N+1}` (`K+1` values per point).
    pub fn predict_gradient_batch(&self, m: ArrayView2<f64>, dxm: ArrayView2<f64>) -> Result<Array2<f64>> {
        if dxm.dim() != m.dim() {
            return Err(invalid!("moment block {:?} and gradient block {:?} differ", m.dim(), dxm.dim()));
        }
        let coeffs = self.gradient_coefficients(m)?;
        Ok(contract(&coeffs.view(), &dxm, self.k + 1))
    }

    pub fn predict_closure_gradient(&self, m: &[f64], dxm: &[f64]) -> Result<Vec<f64>> {
        let d = self.feature_dim();
        if m.len() != d || dxm.len() != d {
            return Err(invalid!(
                "expected {d} moments and {d} gradients, got {} and {}",
                m.len(),
                dxm.len()
            ));
        }
        let mv = ArrayView2::from_shape((1, d), m).expect("row");
        let gv = ArrayView2::from_shape((1, d), dxm).expect("row");
        Ok(self.predict_gradient_batch(mv, gv)?.into_raw_vec_and_offset().0)
    }

    /// Predicted `m_{N+1}` for the `Lm` closure (zero for `Pn`).
    pub fn predict_moment_batch(&self, m: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_rows(&m)?;
        match self.kind {
            ClosureKind::Pn => Ok(Array2::zeros((m.nrows(), self.k + 1))),
            ClosureKind::Lm => {
                let z = self.raw_outputs(m);
                Ok(self.target.as_ref().expect("lm target stats").denormalize(z.view()))
            }
            _ => Err(invalid!("the {} closure predicts gradients, not m_{{N+1}}", self.kind)),
        }
    }

    /// Relative L2 error of this model's prediction target on a data set.
    pub fn evaluate(&self, data: &TrainingSet) -> Result<f64> {
        let (pred, truth) = if self.kind == ClosureKind::Lm {
            (self.predict_moment_batch(data.moments.view())?, &data.target_moment)
        } else {
            (
                self.predict_gradient_batch(data.moments.view(), data.gradients.view())?,
                &data.target_gradient,
            )
        };
        relative_l2(
            pred.as_slice().expect("standard layout"),
            truth.as_standard_layout().as_slice().expect("standard layout"),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&Checkpoint::from_model(self))
            .map_err(|e| Error::Numerical(format!("checkpoint serialization failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| config_err!("invalid checkpoint: {e}"))?;
        ckpt.into_model()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        ckpt.into_model()
    }
}

fn layer_dims(kind: ClosureKind, n: usize, k: usize, hidden: &[usize]) -> Result<Vec<usize>> {
    let mut dims = vec![feature_dim(n, k)];
    dims.extend_from_slice(hidden);
    dims.push(kind.output_dim(n, k)?);
    Ok(dims)
}

/// `out[r, i] = sum_k c[r, k (K+1) + i] * g[r, k (K+1) + i]`.
fn contract(c: &ArrayView2<f64>, g: &ArrayView2<f64>, block: usize) -> Array2<f64> {
    let mut out = Array2::zeros((c.nrows(), block));
    for ((c_row, g_row), mut o) in c.rows().into_iter().zip(g.rows()).zip(out.rows_mut()) {
        for (f, (cv, gv)) in c_row.iter().zip(g_row.iter()).enumerate() {
            o[f % block] += cv * gv;
        }
    }
    out
}

/// `sqrt(sum |truth - pred|^2 / sum |truth|^2)`; the plain norm of `pred`
/// when `truth` vanishes.
pub fn relative_l2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(invalid!("prediction has {} entries, truth has {}", pred.len(), truth.len()));
    }
    let num: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p) * (t - p)).sum();
    let den: f64 = truth.iter().map(|t| t * t).sum();
    Ok(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() })
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Relative L2 accumulated over the epoch's mini-batches (before each update).
    pub train_rel_l2: f64,
    pub val_rel_l2: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ClosureModel,
    pub history: Vec<EpochRecord>,
}

/// Fits a learned closure by mini-batch Adam on the mean-squared loss.
///
/// The data are split by [`split_and_normalize`] with `config.seed`; initial
/// weights and batch order come from a separate stream of the same seed, so the
/// run is bitwise reproducible.
pub fn train(kind: ClosureKind, data: &TrainingSet, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if !kind.is_learned() {
        return Err(config_err!("the pn closure has nothing to train"));
    }
    let (n, k) = (data.n, data.k);
    kind.output_dim(n, k)?;
    let (train_set, val_set, input) = split_and_normalize(data, config.val_fraction, config.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mlp = Mlp::new(&layer_dims(kind, n, k, &config.hidden)?, &mut rng)?;
    let target = if kind == ClosureKind::Lm {
        Some(Normalizer::fit(train_set.target_moment.view())?)
    } else {
        None
    };
    let mut model = ClosureModel::from_parts(kind, n, k, config.epsilon, mlp, input, target)?;
    model.train_config = Some(config.clone());

    let x_all = model.input.normalize(train_set.moments.view());
    let y_all = match (&model.target, kind) {
        (Some(t), _) => t.normalize(train_set.target_moment.view()),
        _ => train_set.target_gradient.clone(),
    };
    let rows = x_all.nrows();
    let mut order: Vec<usize> = (0..rows).collect();
    let mut adam = Adam::new(model.mlp.as_ref().expect("network"), AdamConfig::default());
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let (mut err_sq, mut truth_sq) = (0.0, 0.0);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let x = x_all.select(Axis(0), idx);
            let y = y_all.select(Axis(0), idx);
            let dxm = match kind {
                ClosureKind::Lm => None,
                _ => Some(train_set.gradients.select(Axis(0), idx)),
            };
            let mlp = model.mlp.as_ref().expect("network");
            let cache = mlp.forward_cached(x.view());
            let step = head_loss(&model, &cache.output, dxm.as_ref(), &y)?;
            let batch_loss = step.sq_error / idx.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, lr });
            }
            loss_sum += batch_loss;
            batches += 1;
            err_sq += step.sq_error_raw;
            truth_sq += step.truth_sq_raw;
            let grads: Vec<Dense> = mlp.backward(&cache, step.upstream.view());
            adam.step(model.mlp.as_mut().expect("network"), &grads, lr);
        }
        let train_rel_l2 = if truth_sq > 0.0 { (err_sq / truth_sq).sqrt() } else { err_sq.sqrt() };
        let val_rel_l2 = model.evaluate(&val_set)?;
        log::debug!("epoch {epoch} lr {lr:.3e} loss {:.4e} val {val_rel_l2:.4e}", loss_sum / batches as f64);
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            train_rel_l2,
            val_rel_l2,
        });
    }
    Ok(TrainOutcome { model, history })
}

struct HeadStep {
    /// Sum of squared residuals in training units.
    sq_error: f64,
    /// Squared residuals and squared truth in physical units.
    sq_error_raw: f64,
    truth_sq_raw: f64,
    /// d(loss)/d(network output), loss = sq_error / batch.
    upstream: Array2<f64>,
}

fn head_loss(model: &ClosureModel, out: &Array2<f64>, dxm: Option<&Array2<f64>>, y: &Array2<f64>) -> Result<HeadStep> {
    let rows = out.nrows();
    let scale = 2.0 / rows as f64;
    let block = model.k + 1;
    let mut upstream = Array2::zeros(out.dim());
    let (mut sq, mut sq_raw, mut truth_raw) = (0.0, 0.0, 0.0);
    match model.kind {
        ClosureKind::Lm => {
            let t = model.target.as_ref().expect("lm target stats");
            for r in 0..rows {
                for i in 0..block {
                    let resid = out[(r, i)] - y[(r, i)];
                    sq += resid * resid;
                    let raw = resid * t.std[i];
                    let truth = y[(r, i)] * t.std[i] + t.mean[i];
                    sq_raw += raw * raw;
                    truth_raw += truth * truth;
                    upstream[(r, i)] = scale * resid;
                }
            }
        }
        ClosureKind::Lg => {
            let g = dxm.expect("gradients");
            let pred = contract(&out.view(), &g.view(), block);
            for r in 0..rows {
                for f in 0..out.ncols() {
                    let i = f % block;
                    upstream[(r, f)] = scale * (pred[(r, i)] - y[(r, i)]) * g[(r, f)];
                }
                for i in 0..block {
                    let resid = pred[(r, i)] - y[(r, i)];
                    sq += resid * resid;
                    truth_raw += y[(r, i)] * y[(r, i)];
                }
            }
            sq_raw = sq;
        }
        ClosureKind::LgHyper => {
            let g = dxm.expect("gradients");
            let len = out.ncols();
            let first = g.ncols() - len;
            for r in 0..rows {
                let raw = out.row(r);
                let (c, jac) = constrain_with_jacobian(raw.as_slice().expect("row"), model.n, model.epsilon)?;
                let pred: f64 = (0..len).map(|t| c[t] * g[(r, first + t)]).sum();
                let resid = pred - y[(r, 0)];
                sq += resid * resid;
                truth_raw += y[(r, 0)] * y[(r, 0)];
                for col in 0..len {
                    // chain rule through the head: sum_t dL/dc_t * dc_t/draw_col
                    upstream[(r, col)] = (0..len)
                        .map(|t| scale * resid * g[(r, first + t)] * jac[t * len + col])
                        .sum();
                }
            }
            sq_raw = sq;
        }
        ClosureKind::Pn => unreachable!("pn is rejected before training"),
    }
    Ok(HeadStep {
        sq_error: sq,
        sq_error_raw: sq_raw,
        truth_sq_raw: truth_raw,
        upstream,
    })
}

const CHECKPOINT_FORMAT: &str = "moment-closure-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    /// `weight[i][j]` couples input `i` to output `j`.
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    kind: ClosureKind,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "K")]
    k: usize,
    epsilon: f64,
    layer_dims: Vec<usize>,
    input_normalizer: Normalizer,
    target_normalizer: Option<Normalizer>,
    layers: Vec<LayerRecord>,
    training: Option<TrainConfig>,
    #[serde(default)]
    config: Option<ConfigEcho>,
}

impl Checkpoint {
    fn from_model(model: &ClosureModel) -> Self {
        let layers = model
            .mlp
            .iter()
            .flat_map(|m| m.layers())
            .map(|l| LayerRecord {
                weight: l.weight.rows().into_iter().map(|r| r.to_vec()).collect(),
                bias: l.bias.to_vec(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: model.kind,
            n: model.n,
            k: model.k,
            epsilon: model.epsilon,
            layer_dims: model.mlp.as_ref().map(Mlp::layer_dims).unwrap_or_default(),
            input_normalizer: model.input.clone(),
            target_normalizer: model.target.clone(),
            layers,
            training: model.train_config.clone(),
            config: model.config.clone(),
        }
    }

    fn into_model(self) -> Result<ClosureModel> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(config_err!(
                "unsupported checkpoint format {} v{}",
                self.format,
                self.version
            ));
        }
        if self.kind == ClosureKind::Pn {
            let mut model = ClosureModel::pn(self.n, self.k);
            model.epsilon = self.epsilon;
            model.config = self.config;
            return Ok(model);
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, rec) in self.layers.into_iter().enumerate() {
            let fan_in = rec.weight.len();
            let fan_out = rec.weight.first().map_or(0, Vec::len);
            if rec.weight.iter().any(|r| r.len() != fan_out) {
                return Err(config_err!("checkpoint layer {l} has ragged weight rows"));
            }
            let flat: Vec<f64> = rec.weight.into_iter().flatten().collect();
            layers.push(Dense {
                weight: Array2::from_shape_vec((fan_in, fan_out), flat).expect("checked shape"),
                bias: rec.bias.into(),
            });
        }
        let mlp = Mlp::from_layers(layers)?;
        if mlp.layer_dims() != self.layer_dims {
            return Err(config_err!(
                "checkpoint layer_dims {:?} disagree with stored layers {:?}",
                self.layer_dims,
                mlp.layer_dims()
            ));
        }
        let mut model = ClosureModel::from_parts(
            self.kind,
            self.n,
            self.k,
            self.epsilon,
            mlp,
            self.input_normalizer,
            self.target_normalizer,
        )?;
        model.train_config = self.training;
        model.config = self.config;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyperbolicity::{coeffs_from_network, is_hyperbolic};
    use ndarray::Array1;
    use rand::Rng;

    /// Network whose output is the constant `bias` regardless of input.
    fn constant_model(kind: ClosureKind, n: usize, k: usize, bias: Vec<f64>) -> ClosureModel {
        let d = feature_dim(n, k);
        let mut layer = Dense::zeros(d, bias.len());
        layer.bias = Array1::from(bias);
        let target = (kind == ClosureKind::Lm).then(|| Normalizer::identity(k + 1));
        let mlp = Mlp::from_layers(vec![layer]).unwrap();
        ClosureModel::from_parts(kind, n, k, 1e-6, mlp, Normalizer::identity(d), target).unwrap()
    }

    fn planted(n: usize, k: usize, rows: usize, seed: u64) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = feature_dim(n, k);
        let moments = Array2::from_shape_fn((rows, d), |_| rng.gen_range(-1.0..1.0));
        let gradients = Array2::from_shape_fn((rows, d), |_| rng.gen_range(-1.0..1.0));
        // d_x m_{N+1} = 2 d_x m_N
        let target_gradient = gradients.slice(s![.., n * (k + 1)..]).mapv(|g| 2.0 * g);
        let target_moment = moments.slice(s![.., n * (k + 1)..]).mapv(|m| 0.5 * m);
        TrainingSet::new(n, k, moments, gradients, target_gradient, target_moment).unwrap()
    }

    fn small_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 64,
            hidden: vec![16, 16],
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in ClosureKind::ALL {
            assert_eq!(kind.as_str().parse::<ClosureKind>().unwrap(), kind);
        }
        assert_eq!("LG_HYPER".parse::<ClosureKind>().unwrap(), ClosureKind::LgHyper);
        assert!("pm".parse::<ClosureKind>().is_err());
    }

    #[test]
    fn output_dims() {
        assert_eq!(ClosureKind::Lg.output_dim(3, 4).unwrap(), 20);
        assert_eq!(ClosureKind::Lm.output_dim(3, 4).unwrap(), 5);
        assert_eq!(ClosureKind::LgHyper.output_dim(5, 0).unwrap(), 3);
        assert_eq!(ClosureKind::LgHyper.output_dim(1, 0).unwrap(), 2);
        assert!(matches!(ClosureKind::LgHyper.output_dim(2, 0), Err(Error::Config(_))));
        assert!(matches!(ClosureKind::LgHyper.output_dim(3, 4), Err(Error::Config(_))));
    }

    #[test]
    fn lr_schedule_is_multiplicative() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert_eq!(cfg.lr_at(99), 1e-3);
        assert!((cfg.lr_at(100) - 3.5e-4).abs() < 1e-18);
        assert!((cfg.lr_at(250) - 1e-3 * 0.35 * 0.35).abs() < 1e-18);
    }

    #[test]
    fn relative_l2_examples() {
        let t = [1.0, -2.0, 0.5];
        assert_eq!(relative_l2(&t, &t).unwrap(), 0.0);
        assert_eq!(relative_l2(&[0.0; 3], &t).unwrap(), 1.0);
        let p: Vec<f64> = t.iter().map(|v| 1.1 * v).collect();
        assert!((relative_l2(&p, &t).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(relative_l2(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert!(relative_l2(&[1.0], &t).is_err());
    }

    #[test]
    fn lg_prediction_is_an_inner_product() {
        let n = 3;
        let mut e_n = vec![0.0; 4];
        e_n[n] = 1.0;
        let model = constant_model(ClosureKind::Lg, n, 0, e_n);
        let m = [0.3, -0.1, 0.2, 0.05];
        let g = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(model.predict_closure_gradient(&m, &g).unwrap(), vec![4.0]);
        assert_eq!(model.predict_closure_gradient(&m, &[0.0; 4]).unwrap(), vec![0.0]);
        assert!(model.predict_closure_gradient(&m[..3], &g).is_err());
    }

    #[test]
    fn sg_prediction_is_componentwise() {
        let (n, k) = (1, 2);
        let coeffs = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let model = constant_model(ClosureKind::Lg, n, k, coeffs.clone());
        let g = [1.0, 1.0, 1.0, 10.0, 10.0, 10.0];
        let out = model.predict_closure_gradient(&[0.0; 6], &g).unwrap();
        assert_eq!(out, vec![1.0 + 40.0, 2.0 + 50.0, 3.0 + 60.0]);
    }

    #[test]
    fn lg_prediction_linear_in_gradients() {
        let model = ClosureModel::initialized(ClosureKind::Lg, 3, 0, &[8, 8], 1e-6, 9).unwrap();
        let m = [0.7, 0.1, -0.2, 0.05];
        let u = [0.3, -1.0, 2.0, 0.4];
        let w = [-0.5, 0.25, 1.5, -2.0];
        let (a, b) = (1.7, -0.3);
        let combo: Vec<f64> = u.iter().zip(&w).map(|(x, y)| a * x + b * y).collect();
        let pu = model.predict_closure_gradient(&m, &u).unwrap()[0];
        let pw = model.predict_closure_gradient(&m, &w).unwrap()[0];
        let pc = model.predict_closure_gradient(&m, &combo).unwrap()[0];
        assert!((pc - (a * pu + b * pw)).abs() < 1e-12);
    }

    #[test]
    fn lg_hyper_zero_raw_is_hyperbolic() {
        let model = constant_model(ClosureKind::LgHyper, 3, 0, vec![0.0; 3]);
        let c = model.gradient_coefficients(Array2::zeros((1, 4)).view()).unwrap();
        assert_eq!(c[(0, 0)], 0.0);
        let tail = coeffs_from_network(&c.row(0).to_vec()[1..], 3).unwrap();
        assert!(is_hyperbolic(&tail));
        assert!(tail.margin() >= 1e-6 * (1.0 - 1e-9));
    }

    #[test]
    fn dimension_checks() {
        let mlp = Mlp::zeros(&[4, 3]).unwrap();
        let err = ClosureModel::from_parts(ClosureKind::Lg, 3, 0, 1e-6, mlp, Normalizer::identity(4), None);
        assert!(matches!(err, Err(Error::Config(_))));
        let pn = ClosureModel::pn(3, 0);
        assert!(pn.gradient_coefficients(Array2::zeros((2, 3)).view()).is_err());
        assert_eq!(
            pn.predict_gradient_batch(Array2::zeros((2, 4)).view(), Array2::ones((2, 4)).view())
                .unwrap(),
            Array2::<f64>::zeros((2, 1))
        );
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        for kind in [ClosureKind::Lg, ClosureKind::LgHyper, ClosureKind::Lm] {
            let data = planted(3, 0, 12, 5);
            let model = ClosureModel::initialized(kind, 3, 0, &[6], 1e-6, 1).unwrap();
            let mlp = model.mlp().unwrap();
            let x = model.input_normalizer().normalize(data.moments.view());
            let y = match kind {
                ClosureKind::Lm => data.target_moment.clone(),
                _ => data.target_gradient.clone(),
            };
            let dxm = (kind != ClosureKind::Lm).then(|| data.gradients.clone());
            let out = mlp.forward_batch(x.view());
            let step = head_loss(&model, &out, dxm.as_ref(), &y).unwrap();
            let h = 1e-6;
            for r in 0..out.nrows() {
                for c in 0..out.ncols() {
                    let mut plus = out.clone();
                    plus[(r, c)] += h;
                    let mut minus = out.clone();
                    minus[(r, c)] -= h;
                    let lp = head_loss(&model, &plus, dxm.as_ref(), &y).unwrap().sq_error;
                    let lm = head_loss(&model, &minus, dxm.as_ref(), &y).unwrap().sq_error;
                    let fd = (lp - lm) / (2.0 * h) / out.nrows() as f64;
                    let an = step.upstream[(r, c)];
                    assert!((fd - an).abs() < 1e-6 * an.abs().max(1e-3), "{kind} ({r},{c}) {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn planted_linear_closure_is_learned() {
        let data = planted(3, 0, 4000, 11);
        let cfg = TrainConfig {
            batch_size: 32,
            ..small_config(200)
        };
        let out = train(ClosureKind::Lg, &data, &cfg).unwrap();
        let last = out.history.last().unwrap();
        assert!(last.val_rel_l2 < 1e-2, "val {}", last.val_rel_l2);
    }

    #[test]
    fn single_sample_is_memorized() {
        let one = planted(1, 0, 1, 2);
        let rows = 20;
        let rep = |a: &Array2<f64>| {
            let v: Vec<_> = (0..rows).map(|_| a.view()).collect();
            ndarray::concatenate(Axis(0), &v).unwrap()
        };
        let data = TrainingSet::new(
            1,
            0,
            rep(&one.moments),
            rep(&one.gradients),
            rep(&one.target_gradient),
            rep(&one.target_moment),
        )
        .unwrap();
        let out = train(ClosureKind::Lm, &data, &small_config(200)).unwrap();
        let first = out.history[0].train_loss;
        let last = out.history.last().unwrap().train_loss;
        assert!(last < 1e-8 * first.max(1.0), "{first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = planted(3, 1, 300, 4);
        let a = train(ClosureKind::Lg, &data, &small_config(5)).unwrap();
        let b = train(ClosureKind::Lg, &data, &small_config(5)).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn training_invariant_under_power_of_two_input_scaling() {
        let data = planted(3, 0, 300, 4);
        let mut scaled = data.clone();
        scaled.moments.mapv_inplace(|v| 8.0 * v);
        let a = train(ClosureKind::Lg, &data, &small_config(4)).unwrap();
        let b = train(ClosureKind::Lg, &scaled, &small_config(4)).unwrap();
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut data = planted(3, 0, 100, 4);
        data.target_gradient[(0, 0)] = f64::NAN;
        let cfg = TrainConfig {
            batch_size: 100,
            val_fraction: 0.01,
            ..small_config(2)
        };
        match train(ClosureKind::Lg, &data, &cfg) {
            Err(Error::NonFiniteLoss { epoch, .. }) => assert_eq!(epoch, 0),
            // the poisoned row may land in validation; then validation error is NaN
            Ok(out) => assert!(out.history[0].val_rel_l2.is_nan()),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn pn_cannot_be_trained() {
        let data = planted(3, 0, 20, 4);
        assert!(matches!(train(ClosureKind::Pn, &data, &small_config(1)), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let data = planted(3, 0, 200, 8);
        for kind in [ClosureKind::Lg, ClosureKind::LgHyper, ClosureKind::Lm] {
            let model = train(kind, &data, &small_config(2)).unwrap().model;
            let back = ClosureModel::from_json(&model.to_json().unwrap()).unwrap();
            assert_eq!(back, model);
        }
        let pn = ClosureModel::pn(5, 0);
        assert_eq!(ClosureModel::from_json(&pn.to_json().unwrap()).unwrap(), pn);
        assert!(ClosureModel::from_json("{\"format\": \"x\"}").is_err());
    }
}
