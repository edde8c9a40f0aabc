//! Skill routing: a temperature-softmax gate over the skill library and
//! gradient-descent adaptation of the gate parameters against a frozen
//! base and frozen adapters.

use serde::{Deserialize, Serialize};

use crate::adalora::SkillAdapter;
use crate::data::{encode_example, AdaptationSplit, EncodedExample};
use crate::error::{Error, Result};
use crate::model::{
    forward, nll_loss, AdapterHooks, BoundAdapter, BoundBase, MixEntry, Mode, ModelConfig,
    TransformerWeights,
};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Initialization spread for the gate parameters.
pub const GATE_INIT_STD: f64 = 0.01;

/// An ordered set of skill adapters sharing one base configuration.
#[derive(Clone, Debug)]
pub struct SkillLibrary<T> {
    skills: Vec<SkillAdapter<T>>,
}

impl<T: Scalar> SkillLibrary<T> {
    pub fn new(skills: Vec<SkillAdapter<T>>) -> Result<Self> {
        let first = skills
            .first()
            .ok_or_else(|| Error::Contract("skill library needs at least one adapter".into()))?;
        let config = first.config;
        for s in &skills {
            if s.config != config {
                return Err(Error::Contract(format!(
                    "adapter `{}` targets a different base configuration",
                    s.skill_id
                )));
            }
        }
        Ok(SkillLibrary { skills })
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn skills(&self) -> &[SkillAdapter<T>] {
        &self.skills
    }

    pub fn config(&self) -> &ModelConfig {
        &self.skills[0].config
    }

    pub fn skill_ids(&self) -> Vec<String> {
        self.skills.iter().map(|s| s.skill_id.clone()).collect()
    }

    /// Feature width: one entry per (layer, target) pair.
    pub fn feature_width(&self) -> usize {
        self.skills[0].n_triplets()
    }

    pub fn bind_all(&self, tape: &Tape<T>) -> Vec<BoundAdapter> {
        self.skills.iter().map(|s| s.bind(tape, false)).collect()
    }
}

/// Per-skill feature rows: the Frobenius norm of each triplet's dense
/// delta, K x F with F = layers x targets.
pub fn skill_features<T: Scalar>(lib: &SkillLibrary<T>) -> Tensor<T> {
    let f = lib.feature_width();
    let mut out = Tensor::zeros(lib.len(), f);
    for (i, skill) in lib.skills().iter().enumerate() {
        for (j, t) in skill.triplets.iter().enumerate() {
            out.set(i, j, T::from_f64(t.delta().frob_norm()));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterMode {
    /// One free logit per skill; the gate has exactly the capacity that a
    /// weight matrix against frozen skills can express.
    Static,
    /// Weight rows dotted against per-skill feature rows.
    Feature,
}

/// The trainable gate: skill weights, bias and temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams<T> {
    pub mode: RouterMode,
    /// 1 x K logits in static mode, K x F in feature mode.
    pub a: Tensor<T>,
    /// 1 x K.
    pub b: Tensor<T>,
    pub tau: f64,
}

impl<T: Scalar> RouterParams<T> {
    pub fn init(mode: RouterMode, k: usize, f: usize, tau: f64, rng: &mut SeedRng) -> Result<Self> {
        let a = match mode {
            RouterMode::Static => Tensor::randn(1, k, GATE_INIT_STD, rng),
            RouterMode::Feature => Tensor::randn(k, f, GATE_INIT_STD, rng),
        };
        let params = RouterParams {
            mode,
            a,
            b: Tensor::randn(1, k, GATE_INIT_STD, rng),
            tau,
        };
        params.validate(k, f)?;
        Ok(params)
    }

    pub fn k(&self) -> usize {
        self.b.cols()
    }

    pub fn validate(&self, k: usize, f: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::Contract("router over zero skills".into()));
        }
        let want_a = match self.mode {
            RouterMode::Static => (1, k),
            RouterMode::Feature => (k, f),
        };
        if self.a.shape() != want_a {
            return Err(Error::Contract(format!(
                "router weight shape {:?}, expected {want_a:?}",
                self.a.shape()
            )));
        }
        if self.b.shape() != (1, k) {
            return Err(Error::Contract(format!(
                "router bias shape {:?}, expected {:?}",
                self.b.shape(),
                (1, k)
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::ConfigValidation {
                path: "tau".into(),
                reason: format!("{} not a finite positive temperature", self.tau),
            });
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> RouterParams<U> {
        let conv = |t: &Tensor<T>| {
            Tensor::from_fn(t.rows(), t.cols(), |i, j| U::from_f64(t.get(i, j).to_f64()))
        };
        RouterParams {
            mode: self.mode,
            a: conv(&self.a),
            b: conv(&self.b),
            tau: self.tau,
        }
    }
}

/// Gate output: mixture weights on the simplex plus the raw logits.
#[derive(Clone, Debug)]
pub struct RouterOutput {
    /// Length K, non-negative, sums to 1.
    pub r: Vec<f64>,
    /// Length K.
    pub e: Vec<f64>,
}

impl RouterOutput {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &x) in self.r.iter().enumerate().skip(1) {
            if x > self.r[best] {
                best = i;
            }
        }
        best
    }

    /// Shannon entropy in nats, with 0 log 0 = 0.
    pub fn entropy(&self) -> f64 {
        self.r
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}

pub(crate) fn softmax_f64(e: &[f64], tau: f64) -> Vec<f64> {
    let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = e.iter().map(|&x| ((x - m) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&x| x / z).collect()
}

/// Raw logits for the given parameters: `a + b` in static mode,
/// rowwise `a . features + b` in feature mode.
pub fn logits<T: Scalar>(params: &RouterParams<T>, features: Option<&Tensor<T>>) -> Result<Vec<f64>> {
    let k = params.k();
    match params.mode {
        RouterMode::Static => Ok((0..k)
            .map(|i| params.a.get(0, i).to_f64() + params.b.get(0, i).to_f64())
            .collect()),
        RouterMode::Feature => {
            let phi = features.ok_or_else(|| {
                Error::Contract("feature-mode gate needs skill features".into())
            })?;
            if phi.shape() != params.a.shape() {
                return Err(Error::ShapeMismatch {
                    op: "router logits",
                    lhs: format!("{:?}", params.a.shape()),
                    rhs: format!("{:?}", phi.shape()),
                });
            }
            Ok((0..k)
                .map(|i| {
                    let mut dot = 0.0;
                    for j in 0..phi.cols() {
                        dot += params.a.get(i, j).to_f64() * phi.get(i, j).to_f64();
                    }
                    dot + params.b.get(0, i).to_f64()
                })
                .collect())
        }
    }
}

/// Temperature-softmax gate over the library.
pub fn gate<T: Scalar>(params: &RouterParams<T>, lib: &SkillLibrary<T>) -> Result<RouterOutput> {
    params.validate(lib.len(), lib.feature_width())?;
    let phi = match params.mode {
        RouterMode::Static => None,
        RouterMode::Feature => Some(skill_features(lib)),
    };
    let e = logits(params, phi.as_ref())?;
    let r = softmax_f64(&e, params.tau);
    Ok(RouterOutput { r, e })
}

/// Attach every skill with a fixed mixture weight for inference. The
/// weights ride along as constants, so nothing here is trainable.
pub fn routed_hooks<T: Scalar>(
    tape: &Tape<T>,
    lib: &SkillLibrary<T>,
    r: &[f64],
) -> Result<AdapterHooks> {
    if r.len() != lib.len() {
        return Err(Error::Contract(format!(
            "{} mixture weights for {} skills",
            r.len(),
            lib.len()
        )));
    }
    let entries = lib
        .skills()
        .iter()
        .zip(r)
        .map(|(s, &w)| MixEntry {
            weight: Some(tape.scalar(T::from_f64(w))),
            adapter: s.bind(tape, false),
        })
        .collect();
    Ok(AdapterHooks::eval(entries))
}

/// Gate parameters registered on a tape for training.
#[derive(Clone, Copy, Debug)]
pub struct BoundRouter {
    pub a: Var,
    pub b: Var,
}

impl<T: Scalar> RouterParams<T> {
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> BoundRouter {
        BoundRouter {
            a: tape.leaf(&self.a, trainable),
            b: tape.leaf(&self.b, trainable),
        }
    }
}

/// Differentiable gate: returns (R, E) as 1 x K variables.
pub fn gate_on_tape<T: Scalar>(
    tape: &Tape<T>,
    bound: &BoundRouter,
    mode: RouterMode,
    features: Option<&Tensor<T>>,
    tau: f64,
) -> Result<(Var, Var)> {
    let e = match mode {
        RouterMode::Static => tape.add(bound.a, bound.b)?,
        RouterMode::Feature => {
            let phi = features.ok_or_else(|| {
                Error::Contract("feature-mode gate needs skill features".into())
            })?;
            let prod = tape.mul(bound.a, tape.constant(phi.clone()))?;
            tape.add(tape.transpose(tape.row_sums(prod)), bound.b)?
        }
    };
    let r = tape.softmax_rows(tape.scale(e, T::from_f64(1.0 / tau)));
    Ok((r, e))
}

/// The faces of one adaptation objective evaluation.
pub struct AdaptLossParts {
    /// task + gamma1 * reg.
    pub total: Var,
    /// Mean routed answer NLL over the batch.
    pub task: Var,
    /// Squared Frobenius norm of the gate weights (bias excluded).
    pub reg: Var,
    /// 1 x K mixture weights variable.
    pub r: Var,
}

/// Routed batch objective, differentiable only through the gate: the base
/// and every adapter stay frozen on the tape.
#[allow(clippy::too_many_arguments)]
pub fn adaptation_loss<T: Scalar>(
    tape: &Tape<T>,
    cfg: &ModelConfig,
    base: &BoundBase,
    adapters: &[BoundAdapter],
    router: &BoundRouter,
    mode: RouterMode,
    features: Option<&Tensor<T>>,
    tau: f64,
    gamma1: f64,
    batch: &[EncodedExample],
) -> Result<AdaptLossParts> {
    if batch.is_empty() {
        return Err(Error::Contract("adaptation_loss on an empty batch".into()));
    }
    if !(gamma1 >= 0.0 && gamma1.is_finite()) {
        return Err(Error::Contract(format!(
            "adaptation_loss gamma1 {gamma1} not a finite non-negative value"
        )));
    }
    let (r, _e) = gate_on_tape(tape, router, mode, features, tau)?;
    let mut task_sum: Option<Var> = None;
    for ex in batch {
        let entries = adapters
            .iter()
            .enumerate()
            .map(|(i, a)| {
                Ok(MixEntry {
                    weight: Some(tape.slice_cols(r, i, 1)?),
                    adapter: a.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut hooks = AdapterHooks::eval(entries);
        let logits = forward(tape, cfg, base, &ex.input_ids, Some(&mut hooks), Mode::Eval)?;
        let l = nll_loss(tape, logits, &ex.targets, &ex.mask)?;
        task_sum = Some(match task_sum {
            None => l,
            Some(s) => tape.add(s, l)?,
        });
    }
    let task = tape.scale(task_sum.unwrap(), T::from_f64(1.0 / batch.len() as f64));
    let reg = tape.sum_all(tape.mul(router.a, router.a)?);
    let total = tape.add(task, tape.scale(reg, T::from_f64(gamma1)))?;
    Ok(AdaptLossParts { total, task, reg, r })
}

/// Mean routed answer NLL over `examples` with a fixed mixture, no
/// gradients anywhere. The few-shot fitness function.
pub fn routed_task_loss<T: Scalar>(
    base: &TransformerWeights<T>,
    lib: &SkillLibrary<T>,
    r: &[f64],
    examples: &[EncodedExample],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Contract("routed_task_loss on an empty set".into()));
    }
    let tape = Tape::new();
    let bb = base.bind(&tape, false);
    let mut hooks = routed_hooks(&tape, lib, r)?;
    let mut sum = 0.0;
    for ex in examples {
        let logits = forward(&tape, &base.config, &bb, &ex.input_ids, Some(&mut hooks), Mode::Eval)?;
        let l = nll_loss(&tape, logits, &ex.targets, &ex.mask)?;
        sum += tape.scalar_value(l).to_f64();
    }
    Ok(sum / examples.len() as f64)
}

/// Gradient-descent schedule for the gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterTrainConfig {
    pub mode: RouterMode,
    pub tau: f64,
    pub gamma1: f64,
    pub lr: f64,
    pub steps: usize,
    /// Use the whole adaptation set per step up to this size.
    pub full_batch_limit: usize,
    /// Mini-batch size beyond the full-batch limit.
    pub batch_size: usize,
    pub seed: u64,
}

impl RouterTrainConfig {
    pub fn desk_default() -> Self {
        RouterTrainConfig {
            mode: RouterMode::Static,
            tau: 1.0,
            gamma1: 0.01,
            lr: 0.05,
            steps: 500,
            full_batch_limit: 256,
            batch_size: 32,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, reason: String| {
            Err(Error::ConfigValidation {
                path: path.into(),
                reason,
            })
        };
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail("tau", format!("{} not a finite positive temperature", self.tau));
        }
        if !(self.gamma1 >= 0.0 && self.gamma1.is_finite()) {
            return fail("gamma1", format!("{} not finite and non-negative", self.gamma1));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr", format!("{} not a finite positive value", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size", "zero".into());
        }
        Ok(())
    }
}

/// One row of the adaptation log.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptStepRow {
    pub step: usize,
    pub task_loss: f64,
    pub reg: f64,
    pub entropy: f64,
    pub argmax: usize,
}

/// Render adaptation log rows as CSV with a header.
pub fn adapt_log_csv(rows: &[AdaptStepRow]) -> String {
    let mut out = String::from("step,task_loss,reg,entropy,argmax\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.task_loss, r.reg, r.entropy, r.argmax
        ));
    }
    out
}

/// Train the gate by gradient descent on the adaptation set, base and
/// adapters frozen. Full-batch while the set is small, sampled
/// mini-batches beyond `full_batch_limit`.
pub fn adapt_normal<T: Scalar>(
    base: &TransformerWeights<T>,
    lib: &SkillLibrary<T>,
    split: &AdaptationSplit,
    cfg: &RouterTrainConfig,
) -> Result<(RouterParams<T>, Vec<AdaptStepRow>)> {
    cfg.validate()?;
    if lib.config() != &base.config {
        return Err(Error::Contract(
            "skill library targets a different base configuration".into(),
        ));
    }
    let encoded: Vec<EncodedExample> = split
        .adaptation
        .iter()
        .map(|e| encode_example(e, base.config.max_seq_len))
        .collect::<Result<_>>()?;
    if encoded.is_empty() {
        return Err(Error::Contract("adapt_normal with an empty adaptation set".into()));
    }

    let k = lib.len();
    let f = lib.feature_width();
    let features = match cfg.mode {
        RouterMode::Static => None,
        RouterMode::Feature => Some(skill_features(lib)),
    };
    let root = SeedRng::new(cfg.seed);
    let mut init_rng = root.derive("router-init");
    let mut params = RouterParams::<T>::init(cfg.mode, k, f, cfg.tau, &mut init_rng)?;
    let mut batch_rng = root.derive("batches");
    let full_batch = encoded.len() <= cfg.full_batch_limit;
    let mut log = Vec::with_capacity(cfg.steps);

    for t in 1..=cfg.steps {
        let batch: Vec<EncodedExample> = if full_batch {
            encoded.clone()
        } else {
            (0..cfg.batch_size)
                .map(|_| encoded[batch_rng.below(encoded.len())].clone())
                .collect()
        };
        let tape = Tape::new();
        let bb = base.bind(&tape, false);
        let adapters = lib.bind_all(&tape);
        let bound = params.bind(&tape, true);
        let parts = adaptation_loss(
            &tape,
            &base.config,
            &bb,
            &adapters,
            &bound,
            cfg.mode,
            features.as_ref(),
            cfg.tau,
            cfg.gamma1,
            &batch,
        )?;
        let task_v = tape.scalar_value(parts.task).to_f64();
        let reg_v = tape.scalar_value(parts.reg).to_f64();
        let total_v = tape.scalar_value(parts.total).to_f64();
        if !total_v.is_finite() {
            return Err(Error::Divergence {
                step: t,
                what: format!("non-finite adaptation loss {total_v}"),
            });
        }
        let r_row = tape.value(parts.r);
        let out = RouterOutput {
            r: (0..k).map(|i| r_row.get(0, i).to_f64()).collect(),
            e: vec![0.0; k],
        };
        tape.backward(parts.total)?;
        let neg_lr = T::from_f64(-cfg.lr);
        for (var, tensor) in [(bound.a, &mut params.a), (bound.b, &mut params.b)] {
            if let Some(g) = tape.grad(var) {
                if g.has_non_finite() {
                    return Err(Error::Divergence {
                        step: t,
                        what: "non-finite gate gradient".into(),
                    });
                }
                tensor.add_scaled(&g, neg_lr)?;
            }
        }
        log.push(AdaptStepRow {
            step: t,
            task_loss: task_v,
            reg: reg_v,
            entropy: out.entropy(),
            argmax: out.argmax(),
        });
    }
    Ok((params, log))
}
