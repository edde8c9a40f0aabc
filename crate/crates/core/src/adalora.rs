//! Skill adapters: per-matrix low-rank weight deltas trained with an
//! orthogonality penalty and importance-driven rank pruning on a cubic
//! budget schedule. The base model stays frozen throughout.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::data::{encode_example, EncodedExample, InstructionExample};
use crate::error::{Error, Result};
use crate::model::{
    forward, nll_loss, AdapterHooks, BoundAdapter, BoundBase, BoundTriplet, MixEntry, Mode,
    ModelConfig, TargetMatrix, TransformerWeights, TARGETS_PER_LAYER,
};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Initialization spread for the left/right factors. Singular values start
/// at zero so a fresh adapter is an exact no-op.
pub const FACTOR_INIT_STD: f64 = 0.02;

/// One low-rank delta `left * diag(singular) * right` for a single
/// (layer, target) pair. `alive[p]` marks which rank-one components are
/// still in the budget; a pruned component keeps its singular value at
/// exactly zero and never comes back.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterTriplet<T> {
    /// d1 x r.
    pub left: Tensor<T>,
    /// 1 x r.
    pub singular: Tensor<T>,
    /// r x d2.
    pub right: Tensor<T>,
    pub alive: Vec<bool>,
}

impl<T: Scalar> AdapterTriplet<T> {
    pub fn init(d1: usize, d2: usize, r: usize, rng: &mut SeedRng) -> Self {
        AdapterTriplet {
            left: Tensor::randn(d1, r, FACTOR_INIT_STD, rng),
            singular: Tensor::zeros(1, r),
            right: Tensor::randn(r, d2, FACTOR_INIT_STD, rng),
            alive: vec![true; r],
        }
    }

    pub fn rank(&self) -> usize {
        self.singular.cols()
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    /// Materialize the dense d1 x d2 delta.
    pub fn delta(&self) -> Tensor<T> {
        let (d1, r) = self.left.shape();
        let d2 = self.right.cols();
        let mut out = Tensor::zeros(d1, d2);
        for p in 0..r {
            if !self.alive[p] {
                continue;
            }
            let lam = self.singular.get(0, p);
            if lam == T::zero() {
                continue;
            }
            for i in 0..d1 {
                let lu = self.left.get(i, p) * lam;
                for j in 0..d2 {
                    let v = out.get(i, j) + lu * self.right.get(p, j);
                    out.set(i, j, v);
                }
            }
        }
        out
    }

    fn cast<U: Scalar>(&self) -> AdapterTriplet<U> {
        let conv = |t: &Tensor<T>| {
            Tensor::from_fn(t.rows(), t.cols(), |i, j| U::from_f64(t.get(i, j).to_f64()))
        };
        AdapterTriplet {
            left: conv(&self.left),
            singular: conv(&self.singular),
            right: conv(&self.right),
            alive: self.alive.clone(),
        }
    }
}

/// All triplets for one skill, layer-major in [`TargetMatrix::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct SkillAdapter<T> {
    pub skill_id: String,
    pub config: ModelConfig,
    pub dropout_p: f64,
    pub triplets: Vec<AdapterTriplet<T>>,
}

impl<T: Scalar> SkillAdapter<T> {
    /// Fresh adapter at rank `r`: Gaussian factors, zero singular values,
    /// everything alive. The delta starts as an exact zero.
    pub fn init(
        skill_id: &str,
        config: &ModelConfig,
        r: usize,
        dropout_p: f64,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        config.validate("")?;
        let min_dim = config.d_model.min(config.d_ffn);
        if r == 0 || 2 * r > min_dim {
            return Err(Error::ConfigValidation {
                path: "rank".into(),
                reason: format!(
                    "rank {r} must be between 1 and {} (half the smallest projection side)",
                    min_dim / 2
                ),
            });
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::ConfigValidation {
                path: "dropout_p".into(),
                reason: format!("{dropout_p} outside [0, 1)"),
            });
        }
        let mut triplets = Vec::with_capacity(config.n_layers * TARGETS_PER_LAYER);
        for _layer in 0..config.n_layers {
            for target in TargetMatrix::ALL {
                let (d1, d2) = target.shape(config);
                triplets.push(AdapterTriplet::init(d1, d2, r, rng));
            }
        }
        Ok(SkillAdapter {
            skill_id: skill_id.to_string(),
            config: config.clone(),
            dropout_p,
            triplets,
        })
    }

    pub fn n_triplets(&self) -> usize {
        self.triplets.len()
    }

    pub fn triplet(&self, layer: usize, target: TargetMatrix) -> &AdapterTriplet<T> {
        &self.triplets[layer * TARGETS_PER_LAYER + target.index()]
    }

    pub fn triplet_mut(&mut self, layer: usize, target: TargetMatrix) -> &mut AdapterTriplet<T> {
        &mut self.triplets[layer * TARGETS_PER_LAYER + target.index()]
    }

    /// Alive rank-one components across all triplets.
    pub fn alive_total(&self) -> usize {
        self.triplets.iter().map(AdapterTriplet::alive_count).sum()
    }

    /// Stored trainable scalars: d1*r + r + r*d2 per triplet. Pruning masks
    /// components but does not shrink storage.
    pub fn param_count(&self) -> usize {
        self.triplets
            .iter()
            .map(|t| {
                let (d1, r) = t.left.shape();
                d1 * r + r + r * t.right.cols()
            })
            .sum()
    }

    /// Register every factor on `tape`. Trainable while the skill trains;
    /// frozen for routing and fusion.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> BoundAdapter {
        BoundAdapter {
            triplets: self
                .triplets
                .iter()
                .map(|t| BoundTriplet {
                    left: tape.leaf(&t.left, trainable),
                    singular: tape.leaf(&t.singular, trainable),
                    right: tape.leaf(&t.right, trainable),
                })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> SkillAdapter<U> {
        SkillAdapter {
            skill_id: self.skill_id.clone(),
            config: self.config.clone(),
            dropout_p: self.dropout_p,
            triplets: self.triplets.iter().map(AdapterTriplet::cast).collect(),
        }
    }

    /// Tensors in a fixed order for the checkpoint container. The alive
    /// mask rides along as a 0/1 row so the container stays tensors-only.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(self.triplets.len() * 4);
        for (idx, t) in self.triplets.iter().enumerate() {
            let layer = idx / TARGETS_PER_LAYER;
            let tag = TargetMatrix::ALL[idx % TARGETS_PER_LAYER].tag();
            let prefix = format!("layers.{layer}.{tag}");
            out.push((format!("{prefix}.left"), t.left.clone()));
            out.push((format!("{prefix}.singular"), t.singular.clone()));
            out.push((format!("{prefix}.right"), t.right.clone()));
            let mask = Tensor::from_fn(1, t.rank(), |_, p| {
                if t.alive[p] {
                    T::one()
                } else {
                    T::zero()
                }
            });
            out.push((format!("{prefix}.alive"), mask));
        }
        out
    }

    /// Inverse of [`named_tensors`]. Rejects missing, extra, or
    /// inconsistently shaped entries, and any dead component whose singular
    /// value is not exactly zero.
    pub fn from_named(
        skill_id: &str,
        config: &ModelConfig,
        dropout_p: f64,
        tensors: &mut BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        config.validate("")?;
        let mut take = |name: String| {
            tensors
                .remove(&name)
                .ok_or_else(|| Error::Contract(format!("adapter tensor `{name}` missing")))
        };
        let mut triplets = Vec::with_capacity(config.n_layers * TARGETS_PER_LAYER);
        let mut rank: Option<usize> = None;
        for layer in 0..config.n_layers {
            for target in TargetMatrix::ALL {
                let (d1, d2) = target.shape(config);
                let prefix = format!("layers.{layer}.{}", target.tag());
                let left = take(format!("{prefix}.left"))?;
                let singular = take(format!("{prefix}.singular"))?;
                let right = take(format!("{prefix}.right"))?;
                let mask = take(format!("{prefix}.alive"))?;
                let r = left.cols();
                if *rank.get_or_insert(r) != r {
                    return Err(Error::Contract(format!(
                        "adapter tensor `{prefix}.left` has rank {r}, expected {}",
                        rank.unwrap()
                    )));
                }
                for (name, t, shape) in [
                    ("left", &left, (d1, r)),
                    ("singular", &singular, (1, r)),
                    ("right", &right, (r, d2)),
                    ("alive", &mask, (1, r)),
                ] {
                    if t.shape() != shape {
                        return Err(Error::Contract(format!(
                            "adapter tensor `{prefix}.{name}` has shape {:?}, expected {shape:?}",
                            t.shape()
                        )));
                    }
                }
                let alive: Vec<bool> = (0..r).map(|p| mask.get(0, p) != T::zero()).collect();
                for (p, &a) in alive.iter().enumerate() {
                    if !a && singular.get(0, p) != T::zero() {
                        return Err(Error::Contract(format!(
                            "adapter tensor `{prefix}.singular` has a nonzero dead component at {p}"
                        )));
                    }
                }
                triplets.push(AdapterTriplet {
                    left,
                    singular,
                    right,
                    alive,
                });
            }
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Contract(format!(
                "unexpected adapter tensor `{extra}`"
            )));
        }
        Ok(SkillAdapter {
            skill_id: skill_id.to_string(),
            config: config.clone(),
            dropout_p,
            triplets,
        })
    }
}

/// Training schedule for one skill adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkillTrainConfig {
    /// Starting rank per triplet.
    pub r_init: usize,
    /// Rank per triplet once pruning finishes.
    pub r_target: usize,
    /// Orthogonality penalty weight.
    pub gamma: f64,
    /// Pruning starts after this step.
    pub t0: usize,
    /// Pruning reaches the final budget at this step.
    pub t1: usize,
    pub total_steps: usize,
    /// Steps between prunes inside the [t0, t1] window.
    pub prune_interval: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout_p: f64,
    /// Smooth importance scores across steps before pruning.
    pub importance_ema: bool,
    pub ema_beta: f64,
    pub seed: u64,
}

impl SkillTrainConfig {
    pub fn desk_default() -> Self {
        SkillTrainConfig {
            r_init: 6,
            r_target: 2,
            gamma: 0.5,
            t0: 200,
            t1: 1000,
            total_steps: 1000,
            prune_interval: 10,
            lr: 0.05,
            batch_size: 8,
            dropout_p: 0.1,
            importance_ema: false,
            ema_beta: 0.85,
            seed: 0,
        }
    }

    /// Larger preset: rank 12 pruned to 4 over the same window.
    pub fn full_scale() -> Self {
        SkillTrainConfig {
            r_init: 12,
            r_target: 4,
            ..Self::desk_default()
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let fail = |path: &str, reason: String| {
            Err(Error::ConfigValidation {
                path: path.into(),
                reason,
            })
        };
        if self.r_target == 0 || self.r_target > self.r_init {
            return fail(
                "r_target",
                format!("{} outside 1..={}", self.r_target, self.r_init),
            );
        }
        let min_dim = model.d_model.min(model.d_ffn);
        if 2 * self.r_init > min_dim {
            return fail(
                "r_init",
                format!(
                    "{} too large for projection side {min_dim}; need r <= {}",
                    self.r_init,
                    min_dim / 2
                ),
            );
        }
        if self.t0 >= self.t1 {
            return fail("t0", format!("{} not below t1 = {}", self.t0, self.t1));
        }
        if self.t1 > self.total_steps {
            return fail(
                "t1",
                format!("{} beyond total_steps = {}", self.t1, self.total_steps),
            );
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return fail("gamma", format!("{} not a finite non-negative value", self.gamma));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr", format!("{} not a finite positive value", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size", "zero".into());
        }
        if self.prune_interval == 0 {
            return fail("prune_interval", "zero".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail("dropout_p", format!("{} outside [0, 1)", self.dropout_p));
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return fail("ema_beta", format!("{} outside [0, 1)", self.ema_beta));
        }
        Ok(())
    }
}

/// Per-component importance, optionally smoothed across steps with an
/// exponential moving average. Dead components are pinned at -inf.
#[derive(Clone, Debug)]
pub struct ImportanceState {
    pub enabled: bool,
    pub beta: f64,
    smoothed: Option<Vec<Vec<f64>>>,
}

impl ImportanceState {
    pub fn new(enabled: bool, beta: f64) -> Self {
        ImportanceState {
            enabled,
            beta,
            smoothed: None,
        }
    }

    /// Fold in this step's raw scores; returns the scores pruning should
    /// use. Without smoothing that is just the raw input.
    pub fn update(&mut self, raw: Vec<Vec<f64>>) -> &[Vec<f64>] {
        match (&mut self.smoothed, self.enabled) {
            (slot, false) => *slot = Some(raw),
            (slot @ None, true) => *slot = Some(raw),
            (Some(s), true) => {
                for (sv, rv) in s.iter_mut().zip(&raw) {
                    for (a, &b) in sv.iter_mut().zip(rv) {
                        if b == f64::NEG_INFINITY || *a == f64::NEG_INFINITY {
                            *a = f64::NEG_INFINITY;
                        } else {
                            *a = self.beta * *a + (1.0 - self.beta) * b;
                        }
                    }
                }
            }
        }
        self.smoothed.as_deref().unwrap()
    }
}

/// `‖LᵀL − I‖²_F + ‖R Rᵀ − I‖²_F`, both grams r x r. Zero exactly when the
/// columns of `left` and the rows of `right` are orthonormal.
pub fn ortho_penalty<T: Scalar>(tape: &Tape<T>, left: Var, right: Var) -> Result<Var> {
    let r = left.cols();
    if right.rows() != r {
        return Err(Error::ShapeMismatch {
            op: "ortho_penalty",
            lhs: format!("{:?}", left.shape()),
            rhs: format!("{:?}", right.shape()),
        });
    }
    let eye = tape.constant(Tensor::eye(r));
    let gram_l = tape.matmul(tape.transpose(left), left)?;
    let gram_r = tape.matmul(right, tape.transpose(right))?;
    let dl = tape.sub(gram_l, eye)?;
    let dr = tape.sub(gram_r, eye)?;
    let sl = tape.sum_all(tape.mul(dl, dl)?);
    let sr = tape.sum_all(tape.mul(dr, dr)?);
    tape.add(sl, sr)
}

/// The three faces of one training objective evaluation.
pub struct SkillLossParts {
    /// task + gamma * penalty; the quantity backward runs on.
    pub total: Var,
    /// Mean over the batch of per-example answer negative log-likelihood.
    pub task: Var,
    /// Summed orthogonality penalty over every triplet.
    pub penalty: Var,
}

/// Batch objective for one skill: answer NLL averaged over the batch plus
/// `gamma` times the orthogonality penalty. `dropout_rng` should be a
/// fresh per-step stream.
#[allow(clippy::too_many_arguments)]
pub fn skill_loss<T: Scalar>(
    tape: &Tape<T>,
    cfg: &ModelConfig,
    base: &BoundBase,
    adapter: &BoundAdapter,
    dropout_p: f64,
    dropout_rng: SeedRng,
    gamma: f64,
    batch: &[EncodedExample],
    mode: Mode,
) -> Result<SkillLossParts> {
    if batch.is_empty() {
        return Err(Error::Contract("skill_loss on an empty batch".into()));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Contract(format!(
            "skill_loss gamma {gamma} not a finite non-negative value"
        )));
    }
    let mut hooks = AdapterHooks {
        entries: vec![MixEntry {
            weight: None,
            adapter: adapter.clone(),
        }],
        dropout_p,
        rng: dropout_rng,
    };
    let mut task_sum: Option<Var> = None;
    for ex in batch {
        let logits = forward(tape, cfg, base, &ex.input_ids, Some(&mut hooks), mode)?;
        let l = nll_loss(tape, logits, &ex.targets, &ex.mask)?;
        task_sum = Some(match task_sum {
            None => l,
            Some(s) => tape.add(s, l)?,
        });
    }
    let task = tape.scale(task_sum.unwrap(), T::from_f64(1.0 / batch.len() as f64));
    let mut pen: Option<Var> = None;
    for t in &adapter.triplets {
        let p = ortho_penalty(tape, t.left, t.right)?;
        pen = Some(match pen {
            None => p,
            Some(s) => tape.add(s, p)?,
        });
    }
    let penalty = pen.ok_or_else(|| Error::Contract("adapter with no triplets".into()))?;
    let total = tape.add(task, tape.scale(penalty, T::from_f64(gamma)))?;
    Ok(SkillLossParts {
        total,
        task,
        penalty,
    })
}

fn sensitivity(w: f64, g: f64) -> f64 {
    (w * g).abs()
}

/// Per-component importance after a backward pass: the singular value's
/// own sensitivity |w * dw| plus the column mean over its left factor and
/// the row mean over its right factor. Dead components score -inf. Call
/// before any update so values and gradients pair up.
pub fn importance_scores<T: Scalar>(
    tape: &Tape<T>,
    adapter: &SkillAdapter<T>,
    bound: &BoundAdapter,
) -> Result<Vec<Vec<f64>>> {
    if adapter.triplets.len() != bound.triplets.len() {
        return Err(Error::Contract(format!(
            "adapter has {} triplets but its binding has {}",
            adapter.triplets.len(),
            bound.triplets.len()
        )));
    }
    let mut out = Vec::with_capacity(adapter.triplets.len());
    for (t, b) in adapter.triplets.iter().zip(&bound.triplets) {
        let r = t.rank();
        let (d1, d2) = (t.left.rows(), t.right.cols());
        let gl = tape.grad(b.left);
        let gs = tape.grad(b.singular);
        let gr = tape.grad(b.right);
        let grad_at = |g: &Option<Tensor<T>>, i: usize, j: usize| -> f64 {
            g.as_ref().map_or(0.0, |g| g.get(i, j).to_f64())
        };
        let mut scores = vec![f64::NEG_INFINITY; r];
        for (p, s) in scores.iter_mut().enumerate() {
            if !t.alive[p] {
                continue;
            }
            let mut left_mean = 0.0;
            for i in 0..d1 {
                left_mean += sensitivity(t.left.get(i, p).to_f64(), grad_at(&gl, i, p));
            }
            left_mean /= d1 as f64;
            let mut right_mean = 0.0;
            for q in 0..d2 {
                right_mean += sensitivity(t.right.get(p, q).to_f64(), grad_at(&gr, p, q));
            }
            right_mean /= d2 as f64;
            *s = sensitivity(t.singular.get(0, p).to_f64(), grad_at(&gs, 0, p))
                + left_mean
                + right_mean;
        }
        out.push(scores);
    }
    Ok(out)
}

/// Total alive components allowed at step `t`: flat at `r_init` per triplet
/// until `t0`, cubic decay down to `r_target` per triplet at `t1`, flat
/// after.
pub fn budget(cfg: &SkillTrainConfig, n_triplets: usize, t: usize) -> usize {
    let b_init = cfg.r_init * n_triplets;
    let b_final = cfg.r_target * n_triplets;
    if t <= cfg.t0 {
        return b_init;
    }
    if t >= cfg.t1 {
        return b_final;
    }
    let frac = 1.0 - (t - cfg.t0) as f64 / (cfg.t1 - cfg.t0) as f64;
    b_final + ((b_init - b_final) as f64 * frac.powi(3)).floor() as usize
}

/// Keep the `keep` highest-scoring alive components globally and kill the
/// rest: alive flag off, singular value set to exactly zero. Ties break
/// toward keeping the earlier (triplet, component) position. Dead
/// components never return. Returns the alive count after pruning.
pub fn prune<T: Scalar>(
    adapter: &mut SkillAdapter<T>,
    scores: &[Vec<f64>],
    keep: usize,
) -> Result<usize> {
    if scores.len() != adapter.triplets.len() {
        return Err(Error::Contract(format!(
            "{} score rows for {} triplets",
            scores.len(),
            adapter.triplets.len()
        )));
    }
    let mut ranked: Vec<(usize, usize, f64)> = Vec::new();
    for (j, (t, row)) in adapter.triplets.iter().zip(scores).enumerate() {
        if row.len() != t.rank() {
            return Err(Error::Contract(format!(
                "score row {j} has {} entries for rank {}",
                row.len(),
                t.rank()
            )));
        }
        for (p, &s) in row.iter().enumerate() {
            if !t.alive[p] {
                continue;
            }
            if s.is_nan() {
                return Err(Error::Contract(format!(
                    "NaN importance score at triplet {j} component {p}"
                )));
            }
            ranked.push((j, p, s));
        }
    }
    let keep_n = keep.min(ranked.len());
    ranked.sort_by(|a, b| {
        b.2.total_cmp(&a.2)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    for &(j, p, _) in &ranked[keep_n..] {
        let t = &mut adapter.triplets[j];
        t.alive[p] = false;
        t.singular.set(0, p, T::zero());
    }
    Ok(adapter.alive_total())
}

/// One gradient-descent update from the tape's accumulated gradients.
/// Gradients on dead singular components are masked so those values stay
/// exactly zero. All gradients are checked before anything is written, so
/// a non-finite gradient aborts without corrupting the adapter.
pub fn sgd_step<T: Scalar>(
    tape: &Tape<T>,
    adapter: &mut SkillAdapter<T>,
    bound: &BoundAdapter,
    lr: f64,
    step: usize,
) -> Result<()> {
    if adapter.triplets.len() != bound.triplets.len() {
        return Err(Error::Contract(format!(
            "adapter has {} triplets but its binding has {}",
            adapter.triplets.len(),
            bound.triplets.len()
        )));
    }
    let grads: Vec<[Option<Tensor<T>>; 3]> = bound
        .triplets
        .iter()
        .map(|b| [tape.grad(b.left), tape.grad(b.singular), tape.grad(b.right)])
        .collect();
    for (idx, g3) in grads.iter().enumerate() {
        for (name, g) in ["left", "singular", "right"].iter().zip(g3) {
            if g.as_ref().is_some_and(Tensor::has_non_finite) {
                let layer = idx / TARGETS_PER_LAYER;
                let tag = TargetMatrix::ALL[idx % TARGETS_PER_LAYER].tag();
                return Err(Error::Divergence {
                    step,
                    what: format!("non-finite gradient on layers.{layer}.{tag}.{name}"),
                });
            }
        }
    }
    let neg_lr = T::from_f64(-lr);
    for (t, [gl, gs, gr]) in adapter.triplets.iter_mut().zip(grads) {
        if let Some(g) = gl {
            t.left.add_scaled(&g, neg_lr)?;
        }
        if let Some(mut g) = gs {
            for (p, &a) in t.alive.iter().enumerate() {
                if !a {
                    g.set(0, p, T::zero());
                }
            }
            t.singular.add_scaled(&g, neg_lr)?;
        }
        if let Some(g) = gr {
            t.right.add_scaled(&g, neg_lr)?;
        }
        for (p, &a) in t.alive.iter().enumerate() {
            if !a {
                t.singular.set(0, p, T::zero());
            }
        }
    }
    Ok(())
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRow {
    pub step: usize,
    pub task_loss: f64,
    pub ortho_penalty: f64,
    pub alive_count: usize,
}

/// Render log rows as CSV with a header.
pub fn log_csv(rows: &[StepRow]) -> String {
    let mut out = String::from("step,task_loss,ortho_penalty,alive_count\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step, r.task_loss, r.ortho_penalty, r.alive_count
        ));
    }
    out
}

/// How a training run ended. A divergence keeps the last healthy adapter
/// so the caller can checkpoint it next to the diagnostic.
pub enum TrainOutcome<T> {
    Completed(SkillAdapter<T>),
    Diverged {
        step: usize,
        what: String,
        last_good: SkillAdapter<T>,
    },
}

impl<T> TrainOutcome<T> {
    /// Treat divergence as fatal.
    pub fn into_adapter(self) -> Result<SkillAdapter<T>> {
        match self {
            TrainOutcome::Completed(a) => Ok(a),
            TrainOutcome::Diverged { step, what, .. } => Err(Error::Divergence { step, what }),
        }
    }
}

/// Train one skill adapter against a frozen base. Per step: sample a
/// batch with replacement, evaluate the objective, backprop, read
/// importance from the pre-update values, update, and prune to the budget
/// on schedule. Returns the outcome plus the full per-step log.
pub fn train_skill<T: Scalar>(
    base: &TransformerWeights<T>,
    skill_id: &str,
    examples: &[InstructionExample],
    cfg: &SkillTrainConfig,
) -> Result<(TrainOutcome<T>, Vec<StepRow>)> {
    cfg.validate(&base.config)?;
    if examples.is_empty() {
        return Err(Error::Contract("train_skill with no examples".into()));
    }
    let encoded: Vec<EncodedExample> = examples
        .iter()
        .map(|e| encode_example(e, base.config.max_seq_len))
        .collect::<Result<_>>()?;

    let root = SeedRng::new(cfg.seed);
    let mut init_rng = root.derive("adapter-init");
    let mut adapter = SkillAdapter::init(
        skill_id,
        &base.config,
        cfg.r_init,
        cfg.dropout_p,
        &mut init_rng,
    )?;
    let n_triplets = adapter.n_triplets();
    let mut batch_rng = root.derive("batches");
    let mut importance = ImportanceState::new(cfg.importance_ema, cfg.ema_beta);
    let mut log = Vec::with_capacity(cfg.total_steps);

    for t in 1..=cfg.total_steps {
        let batch: Vec<EncodedExample> = (0..cfg.batch_size)
            .map(|_| encoded[batch_rng.below(encoded.len())].clone())
            .collect();
        let tape = Tape::new();
        let bound_base = base.bind(&tape, false);
        let bound = adapter.bind(&tape, true);
        let parts = skill_loss(
            &tape,
            &base.config,
            &bound_base,
            &bound,
            cfg.dropout_p,
            root.derive_indexed("dropout", t as u64),
            cfg.gamma,
            &batch,
            Mode::Train,
        )?;
        let task_loss = tape.scalar_value(parts.task).to_f64();
        let pen = tape.scalar_value(parts.penalty).to_f64();
        let total = tape.scalar_value(parts.total).to_f64();
        if !total.is_finite() {
            return Ok((
                TrainOutcome::Diverged {
                    step: t,
                    what: format!("non-finite loss {total}"),
                    last_good: adapter,
                },
                log,
            ));
        }
        tape.backward(parts.total)?;
        let raw = importance_scores(&tape, &adapter, &bound)?;
        let scores = importance.update(raw).to_vec();
        match sgd_step(&tape, &mut adapter, &bound, cfg.lr, t) {
            Ok(()) => {}
            Err(Error::Divergence { step, what }) => {
                return Ok((
                    TrainOutcome::Diverged {
                        step,
                        what,
                        last_good: adapter,
                    },
                    log,
                ));
            }
            Err(e) => return Err(e),
        }
        let due = t >= cfg.t0 && t <= cfg.t1 && ((t - cfg.t0) % cfg.prune_interval == 0 || t == cfg.t1);
        if due {
            prune(&mut adapter, &scores, budget(cfg, n_triplets, t))?;
        }
        log.push(StepRow {
            step: t,
            task_loss,
            ortho_penalty: pen,
            alive_count: adapter.alive_total(),
        });
    }
    Ok((TrainOutcome::Completed(adapter), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;

    fn micro_config() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            vocab_size: 260,
            max_seq_len: 32,
            tied_head: false,
        }
    }

    fn micro_adapter(r: usize, seed: u64) -> SkillAdapter<f64> {
        let mut rng = SeedRng::new(seed);
        SkillAdapter::init("t", &micro_config(), r, 0.0, &mut rng).unwrap()
    }

    fn tiny_examples() -> Vec<InstructionExample> {
        ["ab", "cd", "ef", "gh"]
            .iter()
            .map(|s| InstructionExample {
                context: String::new(),
                query: format!("echo {s}"),
                answer: s.to_string(),
                skill_tag: Some("echo".into()),
                meta: format!("echo-{s}"),
            })
            .collect()
    }

    #[test]
    fn delta_matches_component_sum() {
        let mut rng = SeedRng::new(5);
        let mut t = AdapterTriplet::<f64>::init(4, 6, 3, &mut rng);
        t.singular = Tensor::from_vec(1, 3, vec![0.5, -1.25, 2.0]).unwrap();
        t.alive[1] = false;
        t.singular.set(0, 1, 0.0);
        let d = t.delta();
        for i in 0..4 {
            for j in 0..6 {
                let mut want = 0.0;
                for p in [0usize, 2] {
                    want += t.left.get(i, p) * t.singular.get(0, p) * t.right.get(p, j);
                }
                assert!((d.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fresh_adapter_is_zero_delta() {
        let a = micro_adapter(2, 9);
        assert_eq!(a.n_triplets(), TARGETS_PER_LAYER);
        for t in &a.triplets {
            assert_eq!(t.delta().max_abs(), 0.0);
            assert_eq!(t.alive_count(), 2);
        }
    }

    #[test]
    fn param_count_matches_shapes() {
        let a = micro_adapter(3, 1);
        // Four 8x8 targets, one 8x16, one 16x8, each with rank 3 factors.
        let per_square = 8 * 3 + 3 + 3 * 8;
        let per_wide = 8 * 3 + 3 + 3 * 16;
        let per_tall = 16 * 3 + 3 + 3 * 8;
        assert_eq!(a.param_count(), 4 * per_square + per_wide + per_tall);
    }

    #[test]
    fn ortho_penalty_zero_for_orthonormal() {
        let tape = Tape::<f64>::new();
        let left = Tensor::from_fn(6, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let right = Tensor::from_fn(3, 6, |i, j| if i == j { 1.0 } else { 0.0 });
        let l = tape.leaf(&left, false);
        let r = tape.leaf(&right, false);
        let p = ortho_penalty(&tape, l, r).unwrap();
        assert!(tape.scalar_value(p).abs() < 1e-12);
    }

    #[test]
    fn ortho_penalty_scaled_identity() {
        // left = 2I with orthonormal right rows: the left gram is 4I, so the
        // penalty is (4-1)^2 * r = 9r.
        let r = 3;
        let tape = Tape::<f64>::new();
        let left = Tensor::from_fn(r, r, |i, j| if i == j { 2.0 } else { 0.0 });
        let right = Tensor::from_fn(r, 7, |i, j| if i == j { 1.0 } else { 0.0 });
        let l = tape.leaf(&left, false);
        let rt = tape.leaf(&right, false);
        let p = ortho_penalty(&tape, l, rt).unwrap();
        assert!((tape.scalar_value(p) - 9.0 * r as f64).abs() < 1e-9);
    }

    #[test]
    fn ortho_penalty_matches_scalar_oracle() {
        let mut rng = SeedRng::new(11);
        let left = Tensor::<f64>::randn(5, 3, 0.7, &mut rng);
        let right = Tensor::<f64>::randn(3, 4, 0.7, &mut rng);
        let mut want = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                let mut dot = 0.0;
                for i in 0..5 {
                    dot += left.get(i, a) * left.get(i, b);
                }
                let id = if a == b { 1.0 } else { 0.0 };
                want += (dot - id) * (dot - id);
                let mut dot_r = 0.0;
                for j in 0..4 {
                    dot_r += right.get(a, j) * right.get(b, j);
                }
                want += (dot_r - id) * (dot_r - id);
            }
        }
        let tape = Tape::<f64>::new();
        let l = tape.leaf(&left, false);
        let r = tape.leaf(&right, false);
        let p = ortho_penalty(&tape, l, r).unwrap();
        assert!((tape.scalar_value(p) - want).abs() < 1e-10);
    }

    #[test]
    fn budget_schedule_boundaries_and_monotone() {
        let cfg = SkillTrainConfig {
            r_init: 12,
            r_target: 4,
            t0: 200,
            t1: 1000,
            total_steps: 1000,
            ..SkillTrainConfig::desk_default()
        };
        let n = 12;
        assert_eq!(budget(&cfg, n, 0), 144);
        assert_eq!(budget(&cfg, n, 200), 144);
        assert_eq!(budget(&cfg, n, 1000), 48);
        assert_eq!(budget(&cfg, n, 5000), 48);
        // Halfway through the window the cubic sits at 1/8 of the drop.
        assert_eq!(budget(&cfg, n, 600), 48 + 96 / 8);
        let mut prev = budget(&cfg, n, 199);
        for t in 200..=1001 {
            let b = budget(&cfg, n, t);
            assert!(b <= prev, "budget rose at step {t}");
            prev = b;
        }
    }

    #[test]
    fn prune_matches_sort_oracle() {
        for seed in 0..30u64 {
            let mut rng = SeedRng::new(seed);
            let mut a = micro_adapter(4, seed + 100);
            // Random alive pattern with coarse scores so ties happen.
            let mut scores = Vec::new();
            for t in a.triplets.iter_mut() {
                let mut row = Vec::new();
                for p in 0..4 {
                    if rng.uniform() < 0.2 {
                        t.alive[p] = false;
                        t.singular.set(0, p, 0.0);
                    }
                    row.push((rng.uniform() * 4.0).floor());
                }
                scores.push(row);
            }
            let keep = rng.below(20);
            // Oracle: stable sort by score descending keeps earliest
            // positions among ties because enumeration order is ascending.
            let mut flat: Vec<(usize, usize, f64)> = Vec::new();
            for (j, t) in a.triplets.iter().enumerate() {
                for p in 0..t.rank() {
                    if t.alive[p] {
                        flat.push((j, p, scores[j][p]));
                    }
                }
            }
            flat.sort_by(|x, y| y.2.total_cmp(&x.2));
            let want: std::collections::BTreeSet<(usize, usize)> = flat
                .iter()
                .take(keep.min(flat.len()))
                .map(|&(j, p, _)| (j, p))
                .collect();

            let alive_after = prune(&mut a, &scores, keep).unwrap();
            assert_eq!(alive_after, want.len());
            for (j, t) in a.triplets.iter().enumerate() {
                for p in 0..t.rank() {
                    assert_eq!(t.alive[p], want.contains(&(j, p)), "seed {seed} at ({j},{p})");
                    if !t.alive[p] {
                        assert_eq!(t.singular.get(0, p), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn prune_tie_breaks_toward_earlier_positions() {
        let mut a = micro_adapter(2, 3);
        let scores = vec![vec![1.0, 1.0]; a.n_triplets()];
        prune(&mut a, &scores, 3).unwrap();
        assert_eq!(a.triplets[0].alive, vec![true, true]);
        assert_eq!(a.triplets[1].alive, vec![true, false]);
        for t in &a.triplets[2..] {
            assert_eq!(t.alive, vec![false, false]);
        }
    }

    #[test]
    fn prune_never_resurrects() {
        let mut a = micro_adapter(3, 4);
        let low_first = vec![vec![0.0, 5.0, 5.0]; a.n_triplets()];
        prune(&mut a, &low_first, 12).unwrap();
        for t in &a.triplets {
            assert_eq!(t.alive, vec![false, true, true]);
        }
        // Component 0 now scores best, but a dead slot stays dead.
        let high_first = vec![vec![9.0, 1.0, 1.0]; a.n_triplets()];
        let alive = prune(&mut a, &high_first, 100).unwrap();
        assert_eq!(alive, 12);
        for t in &a.triplets {
            assert_eq!(t.alive, vec![false, true, true]);
        }
    }

    #[test]
    fn prune_rejects_nan_scores() {
        let mut a = micro_adapter(2, 8);
        let mut scores = vec![vec![1.0, 1.0]; a.n_triplets()];
        scores[3][1] = f64::NAN;
        assert!(matches!(
            prune(&mut a, &scores, 4),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_init_adapter_leaves_logits_unchanged() {
        let cfg = micro_config();
        let mut rng = SeedRng::new(21);
        let base = TransformerWeights::<f64>::init(cfg.clone(), &mut rng).unwrap();
        let a = micro_adapter(2, 22);
        let ids = [256usize, 10, 20, 30];

        let tape = Tape::new();
        let bb = base.bind(&tape, false);
        let plain = forward(&tape, &cfg, &bb, &ids, None, Mode::Eval).unwrap();
        let mut hooks = AdapterHooks::eval(vec![MixEntry {
            weight: None,
            adapter: a.bind(&tape, false),
        }]);
        let adapted = forward(&tape, &cfg, &bb, &ids, Some(&mut hooks), Mode::Eval).unwrap();
        assert_eq!(tape.value(plain).max_abs_diff(&tape.value(adapted)), 0.0);
    }

    #[test]
    fn importance_matches_hand_recomputation() {
        let cfg = micro_config();
        let mut rng = SeedRng::new(31);
        let base = TransformerWeights::<f64>::init(cfg.clone(), &mut rng).unwrap();
        let mut a = micro_adapter(3, 32);
        let mut lam_rng = SeedRng::new(33);
        for t in a.triplets.iter_mut() {
            t.singular = Tensor::randn(1, 3, 0.1, &mut lam_rng);
        }
        a.triplets[2].alive[1] = false;
        a.triplets[2].singular.set(0, 1, 0.0);

        let ex = encode_example(&tiny_examples()[0], cfg.max_seq_len).unwrap();
        let tape = Tape::new();
        let bb = base.bind(&tape, false);
        let bound = a.bind(&tape, true);
        let parts = skill_loss(
            &tape,
            &cfg,
            &bb,
            &bound,
            0.0,
            SeedRng::new(0),
            0.25,
            &[ex],
            Mode::Train,
        )
        .unwrap();
        tape.backward(parts.total).unwrap();
        let scores = importance_scores(&tape, &a, &bound).unwrap();

        for (j, (t, b)) in a.triplets.iter().zip(&bound.triplets).enumerate() {
            let gl = tape.grad(b.left).unwrap();
            let gs = tape.grad(b.singular).unwrap();
            let gr = tape.grad(b.right).unwrap();
            for p in 0..3 {
                if !t.alive[p] {
                    assert_eq!(scores[j][p], f64::NEG_INFINITY);
                    continue;
                }
                let d1 = t.left.rows();
                let d2 = t.right.cols();
                let mut want = (t.singular.get(0, p) * gs.get(0, p)).abs();
                let mut acc = 0.0;
                for i in 0..d1 {
                    acc += (t.left.get(i, p) * gl.get(i, p)).abs();
                }
                want += acc / d1 as f64;
                acc = 0.0;
                for q in 0..d2 {
                    acc += (t.right.get(p, q) * gr.get(p, q)).abs();
                }
                want += acc / d2 as f64;
                assert!((scores[j][p] - want).abs() < 1e-12, "triplet {j} component {p}");
                assert!(scores[j][p].is_finite());
            }
        }
    }

    #[test]
    fn sgd_step_closed_form_and_masking() {
        let mut a = micro_adapter(2, 41);
        let t0 = &mut a.triplets[0];
        t0.singular = Tensor::from_vec(1, 2, vec![0.5, 0.7]).unwrap();
        t0.alive[1] = false;
        t0.singular.set(0, 1, 0.0);
        let left_before = a.triplets[0].left.clone();

        let tape = Tape::new();
        let bound = a.bind(&tape, true);
        // loss = sum(singular^2) + sum(left^2) on the first triplet only.
        let b = bound.triplets[0];
        let loss = tape
            .add(
                tape.sum_all(tape.mul(b.singular, b.singular).unwrap()),
                tape.sum_all(tape.mul(b.left, b.left).unwrap()),
            )
            .unwrap();
        tape.backward(loss).unwrap();
        sgd_step(&tape, &mut a, &bound, 0.1, 7).unwrap();

        // w' = w - lr * 2w for live entries.
        assert!((a.triplets[0].singular.get(0, 0) - 0.5 * 0.8).abs() < 1e-12);
        assert_eq!(a.triplets[0].singular.get(0, 1), 0.0);
        for i in 0..left_before.rows() {
            for j in 0..2 {
                let want = left_before.get(i, j) * 0.8;
                assert!((a.triplets[0].left.get(i, j) - want).abs() < 1e-12);
            }
        }
        // Untouched triplet: no gradient, no movement.
        assert_eq!(a.triplets[1].singular.get(0, 0), 0.0);
    }

    #[test]
    fn named_tensor_round_trip() {
        let cfg = micro_config();
        let mut a = micro_adapter(2, 51);
        let mut lam_rng = SeedRng::new(52);
        for t in a.triplets.iter_mut() {
            t.singular = Tensor::randn(1, 2, 0.3, &mut lam_rng);
        }
        a.triplets[1].alive[0] = false;
        a.triplets[1].singular.set(0, 0, 0.0);
        a.dropout_p = 0.1;

        let mut map: BTreeMap<String, Tensor<f64>> = a.named_tensors().into_iter().collect();
        let back = SkillAdapter::from_named("t", &cfg, 0.1, &mut map).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn from_named_rejects_dead_nonzero_singular() {
        let cfg = micro_config();
        let mut a = micro_adapter(2, 61);
        a.triplets[0].alive[1] = false;
        let mut map: BTreeMap<String, Tensor<f64>> = a
            .named_tensors()
            .into_iter()
            .map(|(n, mut t)| {
                if n == "layers.0.q.singular" {
                    t.set(0, 1, 0.4);
                }
                (n, t)
            })
            .collect();
        assert!(SkillAdapter::from_named("t", &cfg, 0.0, &mut map).is_err());
    }

    #[test]
    fn train_descends_on_tiny_task() {
        let cfg = micro_config();
        let mut rng = SeedRng::new(71);
        let base = TransformerWeights::<f64>::init(cfg, &mut rng).unwrap();
        let tc = SkillTrainConfig {
            r_init: 3,
            r_target: 2,
            gamma: 0.1,
            t0: 30,
            t1: 50,
            total_steps: 60,
            prune_interval: 5,
            lr: 0.2,
            batch_size: 4,
            dropout_p: 0.0,
            importance_ema: false,
            ema_beta: 0.85,
            seed: 7,
        };
        let (outcome, log) = train_skill(&base, "echo", &tiny_examples(), &tc).unwrap();
        let adapter = outcome.into_adapter().unwrap();
        assert_eq!(log.len(), 60);

        let head: f64 = log[..5].iter().map(|r| r.task_loss).sum::<f64>() / 5.0;
        let tail: f64 = log[55..].iter().map(|r| r.task_loss).sum::<f64>() / 5.0;
        assert!(
            tail < head,
            "no descent: first-5 mean {head}, last-5 mean {tail}"
        );

        // Budget replay: after each logged step the alive count can never
        // exceed the schedule, and pruning lands exactly on the target.
        let n = adapter.n_triplets();
        let mut alive = tc.r_init * n;
        for row in &log {
            let due = row.step >= tc.t0
                && row.step <= tc.t1
                && ((row.step - tc.t0) % tc.prune_interval == 0 || row.step == tc.t1);
            if due {
                alive = alive.min(budget(&tc, n, row.step));
            }
            assert_eq!(row.alive_count, alive, "at step {}", row.step);
        }
        assert_eq!(adapter.alive_total(), tc.r_target * n);
        for t in &adapter.triplets {
            for (p, &a) in t.alive.iter().enumerate() {
                if !a {
                    assert_eq!(t.singular.get(0, p), 0.0);
                }
            }
        }
    }

    #[test]
    fn train_reports_divergence_with_last_good_state() {
        let cfg = micro_config();
        let mut rng = SeedRng::new(81);
        let base = TransformerWeights::<f64>::init(cfg, &mut rng).unwrap();
        let tc = SkillTrainConfig {
            r_init: 3,
            r_target: 3,
            gamma: 0.5,
            t0: 8,
            t1: 9,
            total_steps: 10,
            prune_interval: 1,
            lr: 1e12,
            batch_size: 2,
            dropout_p: 0.0,
            importance_ema: false,
            ema_beta: 0.85,
            seed: 3,
        };
        let (outcome, log) = train_skill(&base, "echo", &tiny_examples(), &tc).unwrap();
        match outcome {
            TrainOutcome::Diverged {
                step, last_good, ..
            } => {
                assert!(step <= 10, "diverged at step {step}");
                assert_eq!(log.len(), step - 1);
                for t in &last_good.triplets {
                    assert!(!t.left.has_non_finite());
                    assert!(!t.singular.has_non_finite());
                    assert!(!t.right.has_non_finite());
                }
            }
            TrainOutcome::Completed(_) => panic!("expected divergence at lr 1e12"),
        }
    }

    #[test]
    fn ema_smoothing_mixes_scores() {
        let mut state = ImportanceState::new(true, 0.75);
        let first = state.update(vec![vec![4.0, f64::NEG_INFINITY]]).to_vec();
        assert_eq!(first[0][0], 4.0);
        let second = state.update(vec![vec![8.0, f64::NEG_INFINITY]]).to_vec();
        assert!((second[0][0] - (0.75 * 4.0 + 0.25 * 8.0)).abs() < 1e-12);
        assert_eq!(second[0][1], f64::NEG_INFINITY);
    }

    #[test]
    fn config_validation_rejects_bad_windows() {
        let model = micro_config();
        let mut c = SkillTrainConfig::desk_default();
        c.r_init = 3;
        c.r_target = 2;
        c.t0 = 50;
        c.t1 = 40;
        assert!(c.validate(&model).is_err());
        c.t1 = 2000;
        assert!(c.validate(&model).is_err());
        c.t0 = 10;
        c.t1 = 20;
        c.total_steps = 30;
        assert!(c.validate(&model).is_ok());
        c.r_init = 9;
        assert!(c.validate(&model).is_err(), "rank must fit the projections");
    }
}
