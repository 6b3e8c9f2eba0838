//! Federated unlearning by projected gradient ascent.
//!
//! Opt-out devices push the model up their (bounded) forget loss, but only
//! along directions orthogonal to the gradients of the devices that stay. The
//! server projects before dissemination, optionally clips and noises the
//! exchanged gradient, and unicasts a personalized model to each device.
//! Opt-out devices never contribute to the retained subspace again.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedft::SoftmaxLinear;
use crate::numerics::{dot, gram_schmidt, softmax, Matrix, ProbVector, Vector, DEFAULT_DROP_TOL};
use crate::rng::{streams, SimRng};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub feature: Vector,
    pub label: usize,
}

/// `−ln((p_label + δ) / (1 + δ))`: zero at a perfect prediction and never
/// above `ln((1 + δ) / δ)`.
pub fn bounded_cross_entropy(p: &ProbVector, label: usize, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    let p_label = *p
        .as_slice()
        .get(label)
        .ok_or_else(|| Error::Input(format!("label {label} out of range for {} classes", p.len())))?;
    Ok(bounded_ce_value(p_label, delta))
}

/// Upper bound of [`bounded_cross_entropy`] for a given `delta`.
pub fn bounded_ce_bound(delta: f64) -> f64 {
    ((1.0 + delta) / delta).ln()
}

/// Derivative of the bounded loss with respect to `p_label`.
pub fn bounded_ce_dp(p_label: f64, delta: f64) -> f64 {
    -1.0 / (p_label + delta)
}

fn bounded_ce_value(p_label: f64, delta: f64) -> f64 {
    (-((p_label + delta) / (1.0 + delta)).ln()).max(0.0)
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1], got {delta}")));
    }
    Ok(())
}

/// Mean bounded loss of a softmax-linear model over `data`.
pub fn bounded_loss(model: &SoftmaxLinear, data: &[LabeledSample], delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in data {
        total += bounded_cross_entropy(&model.predict(&s.feature)?, s.label, delta)?;
    }
    Ok(total / data.len() as f64)
}

/// Gradient of [`bounded_loss`] with respect to the weights, flattened
/// row-major (classes × features).
pub fn bounded_loss_gradient(model: &SoftmaxLinear, data: &[LabeledSample], delta: f64) -> Result<Vector> {
    check_delta(delta)?;
    let (c, f_dim) = model.weights().shape();
    let mut grad = vec![0.0; c * f_dim];
    if data.is_empty() {
        return Ok(Vector(grad));
    }
    let inv_n = 1.0 / data.len() as f64;
    for s in data {
        if s.label >= c {
            return Err(Error::Input(format!("label {} out of range for {c} classes", s.label)));
        }
        let p = softmax(&model.logits(&s.feature)?);
        let p = p.as_slice();
        // dL/dz_j = dL/dp_y · p_y (1[j = y] − p_j)
        let outer = bounded_ce_dp(p[s.label], delta) * p[s.label] * inv_n;
        for j in 0..c {
            let indicator = if j == s.label { 1.0 } else { 0.0 };
            let dz = outer * (indicator - p[j]);
            for (k, fk) in s.feature.as_slice().iter().enumerate() {
                grad[j * f_dim + k] += dz * fk;
            }
        }
    }
    Ok(Vector(grad))
}

pub fn accuracy(model: &SoftmaxLinear, data: &[LabeledSample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(1.0);
    }
    let mut hits = 0usize;
    for s in data {
        let z = model.logits(&s.feature)?;
        let best = z
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        hits += usize::from(best == s.label);
    }
    Ok(hits as f64 / data.len() as f64)
}

fn params_of(model: &SoftmaxLinear) -> Vector {
    Vector(model.weights().data().to_vec())
}

fn model_from(params: Vector, classes: usize, features: usize) -> Result<SoftmaxLinear> {
    Ok(SoftmaxLinear::new(Matrix::new(classes, features, params.0)?))
}

/// Orthonormal basis of the span of the retained devices' gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct RetainedSubspace {
    basis: Vec<Vector>,
    dim: usize,
}

impl RetainedSubspace {
    pub fn basis(&self) -> &[Vector] {
        &self.basis
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    /// Largest `|⟨v, u⟩|` over basis vectors `u`.
    pub fn max_overlap(&self, v: &Vector) -> f64 {
        self.basis.iter().map(|u| v.dot(u).abs()).fold(0.0, f64::max)
    }
}

pub fn retained_subspace(retained_gradients: &[Vector], tol: f64) -> Result<RetainedSubspace> {
    let dim = retained_gradients.first().map_or(0, Vector::len);
    let basis = gram_schmidt(retained_gradients, tol)?;
    Ok(RetainedSubspace { basis, dim })
}

/// `g − Σ ⟨g, u⟩ u`, applied twice so the result is orthogonal to every basis
/// vector to working precision.
pub fn orthogonal_project(g: &Vector, s: &RetainedSubspace) -> Result<Vector> {
    if s.basis.is_empty() {
        return Ok(g.clone());
    }
    if g.len() != s.dim {
        return Err(Error::Shape(format!("gradient of length {} vs subspace in R^{}", g.len(), s.dim)));
    }
    let mut out = g.clone();
    for _pass in 0..2 {
        for u in &s.basis {
            let c = out.dot(u);
            out.axpy(-c, u);
        }
    }
    Ok(out)
}

/// Clips `g` to norm at most `clip_norm`, then adds i.i.d. `N(0, σ²C²)` noise.
pub fn add_dp_noise(g: &Vector, clip_norm: f64, sigma: f64, rng: &mut SimRng) -> Result<Vector> {
    if !(clip_norm > 0.0) {
        return Err(Error::Domain(format!("clip norm must be positive, got {clip_norm}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("noise multiplier must be nonnegative, got {sigma}")));
    }
    let norm = g.norm();
    let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };
    let mut out = g.scale(scale);
    if sigma > 0.0 {
        let std = sigma * clip_norm;
        for v in out.0.iter_mut() {
            *v += std * rng.gaussian();
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnConfig {
    /// Step size of the retained devices' descent.
    pub lr: f64,
    /// Step size of the projected forget-loss ascent.
    pub unlearn_lr: f64,
    pub delta: f64,
    #[serde(default)]
    pub dp: Option<DpConfig>,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_tol() -> f64 {
    DEFAULT_DROP_TOL
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.unlearn_lr >= 0.0) {
            return Err(Error::Config("unlearn learning rates must be nonnegative".into()));
        }
        check_delta(self.delta).map_err(|e| Error::Config(format!("unlearn.delta: {e}")))?;
        if let Some(dp) = &self.dp {
            if !(dp.clip_norm > 0.0) || !(dp.sigma >= 0.0) {
                return Err(Error::Config("unlearn.dp needs clip_norm > 0 and sigma >= 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlearnState {
    pub round: usize,
    pub global: SoftmaxLinear,
    /// Model most recently unicast to each device.
    pub device_models: Vec<SoftmaxLinear>,
    pub device_ids: Vec<u32>,
    pub datasets: Vec<Vec<LabeledSample>>,
    /// Devices that have left; excluded from every later retained subspace.
    pub opted_out: BTreeSet<u32>,
}

impl UnlearnState {
    pub fn new(global: SoftmaxLinear, device_ids: Vec<u32>, datasets: Vec<Vec<LabeledSample>>) -> Result<Self> {
        if device_ids.len() != datasets.len() {
            return Err(Error::Input("one dataset per device required".into()));
        }
        let unique: BTreeSet<u32> = device_ids.iter().copied().collect();
        if unique.len() != device_ids.len() {
            return Err(Error::Input("duplicate device ids".into()));
        }
        Ok(Self {
            round: 0,
            device_models: vec![global.clone(); device_ids.len()],
            global,
            device_ids,
            datasets,
            opted_out: BTreeSet::new(),
        })
    }

    fn index_of(&self, id: u32) -> Option<usize> {
        self.device_ids.iter().position(|&d| d == id)
    }

    fn retained_indices(&self, extra_out: &BTreeSet<u32>) -> Vec<usize> {
        (0..self.device_ids.len())
            .filter(|&i| {
                let id = self.device_ids[i];
                !self.opted_out.contains(&id) && !extra_out.contains(&id)
            })
            .collect()
    }

    fn union(&self, idx: &[usize]) -> Vec<LabeledSample> {
        idx.iter().flat_map(|&i| self.datasets[i].iter().cloned()).collect()
    }

    pub fn loss_on(&self, ids: &[u32], delta: f64) -> Result<f64> {
        let idx: Vec<usize> = ids.iter().filter_map(|&id| self.index_of(id)).collect();
        bounded_loss(&self.global, &self.union(&idx), delta)
    }
}

/// Opt-out request with the forget data it refers to.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlearnRequest {
    pub opt_out_ids: BTreeSet<u32>,
    pub forget_batches: Vec<(u32, Vec<LabeledSample>)>,
}

impl UnlearnRequest {
    /// Request for `ids`, using the devices' own datasets as forget data.
    pub fn from_state(state: &UnlearnState, ids: &[u32]) -> Result<Self> {
        let opt_out_ids: BTreeSet<u32> = ids.iter().copied().collect();
        let mut forget_batches = Vec::new();
        for &id in &opt_out_ids {
            let i = state
                .index_of(id)
                .ok_or_else(|| Error::Input(format!("device {id} is not a participant")))?;
            forget_batches.push((id, state.datasets[i].clone()));
        }
        let req = Self { opt_out_ids, forget_batches };
        req.validate(state)?;
        Ok(req)
    }

    pub fn validate(&self, state: &UnlearnState) -> Result<()> {
        if self.opt_out_ids.is_empty() {
            return Err(Error::Input("unlearning request names no devices".into()));
        }
        if let Some(id) = self.opt_out_ids.iter().find(|id| state.index_of(**id).is_none()) {
            return Err(Error::Input(format!("device {id} is not a participant")));
        }
        if self.forget_batches.iter().any(|(id, _)| !self.opt_out_ids.contains(id)) {
            return Err(Error::Input("forget data supplied for a device that is not opting out".into()));
        }
        Ok(())
    }

    fn forget_data(&self) -> Vec<LabeledSample> {
        self.forget_batches.iter().flat_map(|(_, d)| d.iter().cloned()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnlearnRecord {
    pub round: usize,
    pub forget_loss: f64,
    pub retained_loss: f64,
    /// Norm of the projected ascent gradient (before any DP noise).
    pub projection_residual_norm: f64,
    /// Largest overlap of the projected gradient with the retained basis.
    pub max_overlap: f64,
    pub sigma: f64,
}

fn weighted_mean_gradient(grads: &[Vector], sizes: &[f64], dim: usize) -> Vector {
    let total: f64 = sizes.iter().sum();
    let mut acc = Vector::zeros(dim);
    if total > 0.0 {
        for (g, n) in grads.iter().zip(sizes) {
            acc.axpy(n / total, g);
        }
    }
    acc
}

/// One unlearning round.
///
/// Retained devices send descent gradients of the bounded loss at the current
/// global model; opt-out devices send ascent gradients on their forget data.
/// The pooled ascent gradient is projected off the retained span (and
/// optionally clipped + noised). Retained device `i` receives
/// `w − lr·gᵢ + unlearn_lr·u`, opt-out devices receive `w + unlearn_lr·u`, and
/// the new global model is the size-weighted mean of the retained models.
pub fn unlearning_round(
    state: &UnlearnState,
    request: &UnlearnRequest,
    cfg: &UnlearnConfig,
) -> Result<(UnlearnState, UnlearnRecord)> {
    cfg.validate()?;
    request.validate(state)?;
    let (c, f_dim) = state.global.weights().shape();
    let dim = c * f_dim;
    let w = params_of(&state.global);

    let retained = state.retained_indices(&request.opt_out_ids);
    let mut retained_grads = Vec::with_capacity(retained.len());
    let mut sizes = Vec::with_capacity(retained.len());
    for &i in &retained {
        retained_grads.push(bounded_loss_gradient(&state.global, &state.datasets[i], cfg.delta)?);
        sizes.push(state.datasets[i].len() as f64);
    }
    let subspace = retained_subspace(&retained_grads, cfg.tol)?;

    let forget = request.forget_data();
    let ascent = bounded_loss_gradient(&state.global, &forget, cfg.delta)?;
    let projected = orthogonal_project(&ascent, &subspace)?;
    let residual_norm = projected.norm();
    let max_overlap = subspace.max_overlap(&projected);

    let (update, sigma) = match &cfg.dp {
        Some(dp) => {
            let mut rng = SimRng::new(dp.seed, streams::UNLEARN_DP_BASE + state.round as u64);
            (add_dp_noise(&projected, dp.clip_norm, dp.sigma, &mut rng)?, dp.sigma)
        }
        None => (projected, 0.0),
    };

    let mut unlearned = w.clone();
    unlearned.axpy(cfg.unlearn_lr, &update);

    let mut device_models = state.device_models.clone();
    for (&i, g) in retained.iter().zip(&retained_grads) {
        let mut personal = unlearned.clone();
        personal.axpy(-cfg.lr, g);
        device_models[i] = model_from(personal, c, f_dim)?;
    }
    for &id in &request.opt_out_ids {
        let i = state.index_of(id).expect("validated");
        device_models[i] = model_from(unlearned.clone(), c, f_dim)?;
    }

    let mut next_global = unlearned;
    if !retained.is_empty() {
        next_global.axpy(-cfg.lr, &weighted_mean_gradient(&retained_grads, &sizes, dim));
    }

    let mut opted_out = state.opted_out.clone();
    opted_out.extend(request.opt_out_ids.iter().copied());
    let next = UnlearnState {
        round: state.round + 1,
        global: model_from(next_global, c, f_dim)?,
        device_models,
        device_ids: state.device_ids.clone(),
        datasets: state.datasets.clone(),
        opted_out,
    };
    let record = UnlearnRecord {
        round: next.round,
        forget_loss: bounded_loss(&next.global, &forget, cfg.delta)?,
        retained_loss: bounded_loss(&next.global, &next.union(&retained), cfg.delta)?,
        projection_residual_norm: residual_norm,
        max_overlap,
        sigma,
    };
    Ok((next, record))
}

/// Plain federated descent over the devices that have not opted out (and are
/// not in `exclude`). Used for pre-training and as the no-unlearning baseline.
pub fn descent_round(state: &UnlearnState, exclude: &BTreeSet<u32>, lr: f64, delta: f64) -> Result<UnlearnState> {
    let (c, f_dim) = state.global.weights().shape();
    let idx = state.retained_indices(exclude);
    let mut grads = Vec::with_capacity(idx.len());
    let mut sizes = Vec::with_capacity(idx.len());
    for &i in &idx {
        grads.push(bounded_loss_gradient(&state.global, &state.datasets[i], delta)?);
        sizes.push(state.datasets[i].len() as f64);
    }
    let mut w = params_of(&state.global);
    let mut device_models = state.device_models.clone();
    for (&i, g) in idx.iter().zip(&grads) {
        let mut personal = w.clone();
        personal.axpy(-lr, g);
        device_models[i] = model_from(personal, c, f_dim)?;
    }
    w.axpy(-lr, &weighted_mean_gradient(&grads, &sizes, c * f_dim));
    let mut next = state.clone();
    next.round += 1;
    next.global = model_from(w, c, f_dim)?;
    next.device_models = device_models;
    Ok(next)
}

/// Synthetic non-IID classification task.
///
/// Device `i` draws features around its own center (plus a constant bias
/// feature) and labels from `softmax(W* x)` for a hidden `W*`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnTask {
    pub classes: usize,
    /// Feature dimension including the trailing bias feature.
    pub features: usize,
    pub samples_per_device: Vec<usize>,
    /// Spread of the per-device feature centers.
    #[serde(default = "default_center_spread")]
    pub center_spread: f64,
    /// Scale of the hidden labeling weights.
    #[serde(default = "default_teacher_scale")]
    pub teacher_scale: f64,
}

fn default_center_spread() -> f64 {
    2.0
}

fn default_teacher_scale() -> f64 {
    3.0
}

impl UnlearnTask {
    pub fn generate(&self, seed: u64) -> Result<Vec<Vec<LabeledSample>>> {
        if self.classes < 2 || self.features < 2 {
            return Err(Error::Config("unlearn task needs >= 2 classes and >= 2 features".into()));
        }
        let mut rng = SimRng::new(seed, streams::UNLEARN_DATA);
        let teacher = SoftmaxLinear::new(Matrix::from_fn(self.classes, self.features, |_, _| {
            self.teacher_scale * rng.gaussian() / (self.features as f64).sqrt()
        }));
        let raw = self.features - 1;
        self.samples_per_device
            .iter()
            .map(|&n| {
                let center: Vec<f64> = (0..raw).map(|_| self.center_spread * rng.gaussian()).collect();
                (0..n)
                    .map(|_| {
                        let mut x: Vec<f64> = center.iter().map(|m| m + rng.gaussian()).collect();
                        x.push(1.0);
                        let feature = Vector(x);
                        let p = teacher.predict(&feature)?;
                        let u = rng.uniform();
                        let mut acc = 0.0;
                        let mut label = self.classes - 1;
                        for (j, pj) in p.as_slice().iter().enumerate() {
                            acc += pj;
                            if u < acc {
                                label = j;
                                break;
                            }
                        }
                        Ok(LabeledSample { feature, label })
                    })
                    .collect()
            })
            .collect()
    }
}

/// Pre-train, unlearn, and compare against retained-only training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnExperiment {
    pub task: UnlearnTask,
    pub pretrain_rounds: usize,
    pub rounds: usize,
    pub opt_out_ids: Vec<u32>,
    pub config: UnlearnConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnlearnOutcome {
    pub pre_forget_loss: f64,
    pub pre_retained_loss: f64,
    pub records: Vec<UnlearnRecord>,
    /// Retained loss of the baseline that keeps training without the
    /// opt-out devices and never unlearns.
    pub baseline_retained_loss: f64,
    pub baseline_forget_loss: f64,
    pub final_forget_loss: f64,
    pub final_retained_loss: f64,
}

impl UnlearnOutcome {
    pub fn forget_ratio(&self) -> f64 {
        self.final_forget_loss / self.pre_forget_loss
    }

    /// `|retained − baseline| / baseline`
    pub fn retained_gap(&self) -> f64 {
        (self.final_retained_loss - self.baseline_retained_loss).abs() / self.baseline_retained_loss
    }

    pub fn max_overlap(&self) -> f64 {
        self.records.iter().map(|r| r.max_overlap).fold(0.0, f64::max)
    }
}

pub fn run_unlearn_experiment(exp: &UnlearnExperiment, seed: u64) -> Result<UnlearnOutcome> {
    exp.config.validate()?;
    let data = exp.task.generate(seed)?;
    let ids: Vec<u32> = (0..data.len() as u32).collect();
    let global = SoftmaxLinear::new(Matrix::zeros(exp.task.classes, exp.task.features));
    let mut state = UnlearnState::new(global, ids, data)?;
    let request = UnlearnRequest::from_state(&state, &exp.opt_out_ids)?;
    let cfg = &exp.config;
    for _ in 0..exp.pretrain_rounds {
        state = descent_round(&state, &BTreeSet::new(), cfg.lr, cfg.delta)?;
    }
    let forget = request.forget_data();
    let retained_ids: Vec<u32> =
        state.device_ids.iter().copied().filter(|id| !request.opt_out_ids.contains(id)).collect();
    let pre_forget_loss = bounded_loss(&state.global, &forget, cfg.delta)?;
    let pre_retained_loss = state.loss_on(&retained_ids, cfg.delta)?;

    let mut baseline = state.clone();
    for _ in 0..exp.rounds {
        baseline = descent_round(&baseline, &request.opt_out_ids, cfg.lr, cfg.delta)?;
    }

    let mut records = Vec::with_capacity(exp.rounds);
    for _ in 0..exp.rounds {
        let (next, rec) = unlearning_round(&state, &request, cfg)?;
        state = next;
        records.push(rec);
    }
    Ok(UnlearnOutcome {
        pre_forget_loss,
        pre_retained_loss,
        records,
        baseline_retained_loss: baseline.loss_on(&retained_ids, cfg.delta)?,
        baseline_forget_loss: bounded_loss(&baseline.global, &forget, cfg.delta)?,
        final_forget_loss: bounded_loss(&state.global, &forget, cfg.delta)?,
        final_retained_loss: state.loss_on(&retained_ids, cfg.delta)?,
    })
}

/// Header: `round,forget_loss,retained_loss,projection_residual_norm,sigma`.
pub fn write_unlearn_csv<W: Write>(out: &mut W, records: &[UnlearnRecord]) -> std::io::Result<()> {
    writeln!(out, "round,forget_loss,retained_loss,projection_residual_norm,sigma")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.round, r.forget_loss, r.retained_loss, r.projection_residual_norm, r.sigma
        )?;
    }
    Ok(())
}

/// Explicit projector `(I − UUᵀ) g`, for cross-checking [`orthogonal_project`].
pub fn explicit_projector_apply(g: &Vector, basis: &[Vector]) -> Vector {
    let n = g.len();
    (0..n)
        .map(|i| {
            let mut row_dot = g.as_slice()[i];
            for u in basis {
                row_dot -= u.as_slice()[i] * dot(u.as_slice(), g.as_slice());
            }
            row_dot
        })
        .collect::<Vec<_>>()
        .into()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_vec(rng: &mut SimRng, n: usize) -> Vector {
        Vector((0..n).map(|_| rng.range(-1.0, 1.0)).collect())
    }

    #[test]
    fn subspace_examples() {
        let g = Vector(vec![3.0, 4.0]);
        let s = retained_subspace(std::slice::from_ref(&g), 1e-8).unwrap();
        assert_eq!(s.rank(), 1);
        let u = s.basis()[0].as_slice();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
        let s = retained_subspace(&[g.clone(), g.scale(-2.5)], 1e-8).unwrap();
        assert_eq!(s.rank(), 1);
    }

    #[test]
    fn subspace_projector_matches_least_squares() {
        let mut rng = SimRng::new(21, 0);
        let gs: Vec<Vector> = (0..3).map(|_| rand_vec(&mut rng, 8)).collect();
        let s = retained_subspace(&gs, 1e-8).unwrap();
        let x = rand_vec(&mut rng, 8);
        // least squares: minimize ||G c - x|| via normal equations on 3x3
        let mut gram = [[0.0; 4]; 3];
        for i in 0..3 {
            for j in 0..3 {
                gram[i][j] = gs[i].dot(&gs[j]);
            }
            gram[i][3] = gs[i].dot(&x);
        }
        for col in 0..3 {
            for r in 0..3 {
                if r != col {
                    let f = gram[r][col] / gram[col][col];
                    for cc in col..4 {
                        gram[r][cc] -= f * gram[col][cc];
                    }
                }
            }
        }
        let mut want = Vector::zeros(8);
        for i in 0..3 {
            want.axpy(gram[i][3] / gram[i][i], &gs[i]);
        }
        let got = x.sub(&orthogonal_project(&x, &s).unwrap());
        for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn projection_examples() {
        let mut rng = SimRng::new(22, 0);
        let gs: Vec<Vector> = (0..2).map(|_| rand_vec(&mut rng, 6)).collect();
        let s = retained_subspace(&gs, 1e-8).unwrap();

        let mut inside = gs[0].scale(0.7);
        inside.axpy(-1.3, &gs[1]);
        assert!(orthogonal_project(&inside, &s).unwrap().norm() <= 1e-10);

        let g = rand_vec(&mut rng, 6);
        let perp = orthogonal_project(&g, &s).unwrap();
        let again = orthogonal_project(&perp, &s).unwrap();
        for (a, b) in again.as_slice().iter().zip(perp.as_slice()) {
            assert!((a - b).abs() <= 1e-12);
        }

        let oracle = explicit_projector_apply(&g, s.basis());
        for (a, b) in perp.as_slice().iter().zip(oracle.as_slice()) {
            assert!((a - b).abs() <= 1e-10);
        }
        assert!(s.max_overlap(&perp) <= 1e-10);
        assert!(matches!(orthogonal_project(&Vector::zeros(5), &s), Err(Error::Shape(_))));
    }

    #[test]
    fn projection_with_empty_subspace_is_identity() {
        let s = retained_subspace(&[], 1e-8).unwrap();
        let g = Vector(vec![1.0, -2.0]);
        assert_eq!(orthogonal_project(&g, &s).unwrap(), g);
    }

    #[test]
    fn bounded_ce_examples() {
        let perfect = ProbVector::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(bounded_cross_entropy(&perfect, 1, 0.01).unwrap(), 0.0);
        let worst = bounded_cross_entropy(&perfect, 0, 0.01).unwrap();
        assert!((worst - 101f64.ln()).abs() < 1e-12);
        assert!((worst - 4.61512).abs() < 1e-5);
        assert!((bounded_ce_bound(0.01) - 101f64.ln()).abs() < 1e-12);
        assert!(bounded_cross_entropy(&perfect, 2, 0.01).is_err());
        assert!(bounded_cross_entropy(&perfect, 0, 0.0).is_err());
        assert!(bounded_cross_entropy(&perfect, 0, 1.5).is_err());
    }

    #[test]
    fn bounded_ce_derivative_matches_finite_difference() {
        let (p, delta, h) = (0.5, 0.01, 1e-6);
        let fd = (bounded_ce_value(p + h, delta) - bounded_ce_value(p - h, delta)) / (2.0 * h);
        let an = bounded_ce_dp(p, delta);
        assert!(((fd - an) / an).abs() <= 1e-6);
    }

    #[test]
    fn bounded_ce_never_exceeds_bound() {
        for delta in [1e-3, 0.01, 0.5, 1.0] {
            let bound = bounded_ce_bound(delta);
            for i in 0..=10_000 {
                let p = i as f64 / 10_000.0;
                let v = bounded_ce_value(p, delta);
                assert!((0.0..=bound).contains(&v), "p={p} delta={delta} v={v}");
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = SimRng::new(23, 0);
        let model = SoftmaxLinear::new(Matrix::from_fn(3, 4, |_, _| rng.range(-1.0, 1.0)));
        let data: Vec<LabeledSample> = (0..8)
            .map(|i| LabeledSample { feature: rand_vec(&mut rng, 4), label: i % 3 })
            .collect();
        let g = bounded_loss_gradient(&model, &data, 0.05).unwrap();
        let h = 1e-6;
        for idx in 0..12 {
            let mut plus = model.weights().data().to_vec();
            plus[idx] += h;
            let mut minus = model.weights().data().to_vec();
            minus[idx] -= h;
            let lp = bounded_loss(&model_from(Vector(plus), 3, 4).unwrap(), &data, 0.05).unwrap();
            let lm = bounded_loss(&model_from(Vector(minus), 3, 4).unwrap(), &data, 0.05).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g.as_slice()[idx]).abs() <= 1e-8);
        }
    }

    #[test]
    fn dp_noise_examples() {
        let mut rng = SimRng::new(1, 0);
        let g = Vector(vec![0.3, 0.4]);
        assert_eq!(add_dp_noise(&g, 1.0, 0.0, &mut rng).unwrap(), g);
        let big = Vector(vec![1.2, 1.6]);
        let clipped = add_dp_noise(&big, 1.0, 0.0, &mut rng).unwrap();
        assert!((clipped.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((clipped.as_slice()[1] - 0.8).abs() < 1e-15);

        let zero = Vector::zeros(1000);
        let noisy = add_dp_noise(&zero, 1.0, 1.0, &mut SimRng::new(77, 0)).unwrap();
        let mean = noisy.as_slice().iter().sum::<f64>() / 1000.0;
        let std = (noisy.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 999.0).sqrt();
        assert!((0.9..=1.1).contains(&std), "{std}");

        let again = add_dp_noise(&zero, 1.0, 1.0, &mut SimRng::new(77, 0)).unwrap();
        assert!(noisy.as_slice().iter().zip(again.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(add_dp_noise(&g, 0.0, 1.0, &mut rng).is_err());
        assert!(add_dp_noise(&g, 1.0, -1.0, &mut rng).is_err());
    }

    fn toy_state(seed: u64, n_devices: usize) -> UnlearnState {
        let task = UnlearnTask {
            classes: 2,
            features: 4,
            samples_per_device: vec![30; n_devices],
            center_spread: 2.0,
            teacher_scale: 3.0,
        };
        let data = task.generate(seed).unwrap();
        let ids = (0..n_devices as u32).collect();
        UnlearnState::new(SoftmaxLinear::new(Matrix::zeros(2, 4)), ids, data).unwrap()
    }

    fn cfg() -> UnlearnConfig {
        UnlearnConfig { lr: 0.5, unlearn_lr: 0.5, delta: 0.01, dp: None, tol: 1e-8 }
    }

    #[test]
    fn request_validation() {
        let st = toy_state(1, 3);
        assert!(UnlearnRequest::from_state(&st, &[]).is_err());
        assert!(UnlearnRequest::from_state(&st, &[9]).is_err());
        assert!(UnlearnRequest::from_state(&st, &[1]).is_ok());
    }

    #[test]
    fn empty_retained_set_is_plain_ascent() {
        let st = toy_state(2, 1);
        let req = UnlearnRequest::from_state(&st, &[0]).unwrap();
        let (next, rec) = unlearning_round(&st, &req, &cfg()).unwrap();
        let g = bounded_loss_gradient(&st.global, &st.datasets[0], 0.01).unwrap();
        let mut want = params_of(&st.global);
        want.axpy(0.5, &g);
        assert_eq!(next.global.weights().data(), want.as_slice());
        assert!((rec.projection_residual_norm - g.norm()).abs() <= 1e-15);
    }

    #[test]
    fn parallel_forget_gradient_yields_no_update() {
        let mut st = toy_state(3, 2);
        st.datasets[1] = st.datasets[0].clone();
        for _ in 0..5 {
            st = descent_round(&st, &BTreeSet::new(), 0.5, 0.01).unwrap();
        }
        let req = UnlearnRequest::from_state(&st, &[1]).unwrap();
        let (unl, rec) = unlearning_round(&st, &req, &cfg()).unwrap();
        let baseline = descent_round(&st, &req.opt_out_ids, 0.5, 0.01).unwrap();
        assert!(rec.projection_residual_norm <= 1e-10);
        let retained = &st.datasets[0];
        let a = bounded_loss(&unl.global, retained, 0.01).unwrap();
        let b = bounded_loss(&baseline.global, retained, 0.01).unwrap();
        assert!((a - b).abs() <= 1e-9);
        assert_eq!(accuracy(&unl.global, retained).unwrap(), accuracy(&baseline.global, retained).unwrap());
    }

    #[test]
    fn personalized_models_differ_by_device() {
        let st = toy_state(4, 3);
        let req = UnlearnRequest::from_state(&st, &[2]).unwrap();
        let (next, rec) = unlearning_round(&st, &req, &cfg()).unwrap();
        assert_ne!(next.device_models[0], next.device_models[1]);
        assert!(rec.max_overlap <= 1e-10);
        assert!(next.opted_out.contains(&2));
        // the opt-out device stays out of the subspace in later rounds
        assert_eq!(next.retained_indices(&BTreeSet::new()), vec![0, 1]);
    }

    #[test]
    fn dp_round_is_deterministic() {
        let st = toy_state(5, 3);
        let req = UnlearnRequest::from_state(&st, &[0]).unwrap();
        let mut c = cfg();
        c.dp = Some(DpConfig { clip_norm: 0.5, sigma: 0.3, seed: 8 });
        let (a, ra) = unlearning_round(&st, &req, &c).unwrap();
        let (b, rb) = unlearning_round(&st, &req, &c).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.sigma, 0.3);
    }

    #[test]
    fn csv_layout() {
        let rec = UnlearnRecord {
            round: 3,
            forget_loss: 1.5,
            retained_loss: 0.25,
            projection_residual_norm: 0.125,
            max_overlap: 0.0,
            sigma: 0.0,
        };
        let mut buf = Vec::new();
        write_unlearn_csv(&mut buf, &[rec]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "round,forget_loss,retained_loss,projection_residual_norm,sigma\n3,1.5,0.25,0.125,0\n"
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn projection_idempotent_and_pythagorean(seed in any::<u64>(), k in 1usize..5) {
                let mut rng = SimRng::new(seed, 0);
                let gs: Vec<Vector> = (0..k).map(|_| rand_vec(&mut rng, 7)).collect();
                let s = retained_subspace(&gs, 1e-8).unwrap();
                let g = rand_vec(&mut rng, 7);
                let perp = orthogonal_project(&g, &s).unwrap();
                let twice = orthogonal_project(&perp, &s).unwrap();
                for (a, b) in perp.as_slice().iter().zip(twice.as_slice()) {
                    prop_assert!((a - b).abs() <= 1e-10);
                }
                let along = g.sub(&perp);
                let lhs = g.dot(&g);
                let rhs = along.dot(&along) + perp.dot(&perp);
                prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.max(1e-300));
            }
        }
    }
}
