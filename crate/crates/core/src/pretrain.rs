//! Next-byte pretraining for the tiny base model. The result is frozen
//! for everything downstream; skills and the router never touch it again.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, nll_loss, BoundBase, Mode, ModelConfig, TransformerWeights};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::{TokenId, BOS, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Training window in tokens, markers included.
    pub seq_len: usize,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn desk_default() -> Self {
        PretrainConfig {
            steps: 300,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seq_len: 64,
            seed: 0,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let fail = |path: &str, reason: String| {
            Err(Error::ConfigValidation {
                path: path.into(),
                reason,
            })
        };
        if self.batch_size == 0 {
            return fail("batch_size", "zero".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr", format!("{} not a finite positive rate", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(name, format!("{b} outside [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return fail("eps", format!("{} not positive", self.eps));
        }
        if self.seq_len < 3 {
            return fail("seq_len", format!("{} leaves no room for content", self.seq_len));
        }
        if self.seq_len > model.max_seq_len {
            return fail(
                "seq_len",
                format!("{} beyond the model window {}", self.seq_len, model.max_seq_len),
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainRow {
    pub step: usize,
    pub loss: f64,
}

pub fn pretrain_log_csv(rows: &[PretrainRow]) -> String {
    let mut out = String::from("step,loss\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.step, r.loss));
    }
    out
}

/// Vars of a bound base in [`TransformerWeights::named_tensors`] order.
fn bound_vars(b: &BoundBase) -> Vec<Var> {
    let mut out = vec![b.token_embedding, b.pos_embedding];
    for l in &b.layers {
        out.extend([
            l.attn_norm_gain,
            l.attn_norm_bias,
            l.w_q,
            l.w_k,
            l.w_v,
            l.w_o,
            l.ffn_norm_gain,
            l.ffn_norm_bias,
            l.w_f1,
            l.w_f2,
        ]);
    }
    out.push(b.final_norm_gain);
    out.push(b.final_norm_bias);
    if let Some(h) = b.lm_head {
        out.push(h);
    }
    out
}

/// `BOS bytes EOS`, truncated to fit `seq_len` tokens.
fn encode_line(line: &str, seq_len: usize) -> Vec<TokenId> {
    let body = seq_len - 2;
    let bytes = line.as_bytes();
    let take = bytes.len().min(body);
    let mut ids = Vec::with_capacity(take + 2);
    ids.push(BOS);
    ids.extend(bytes[..take].iter().map(|&b| b as TokenId));
    ids.push(EOS);
    ids
}

/// Mean per-token next-byte loss of `weights` over `lines`, forward only.
pub fn corpus_loss<T: Scalar>(
    weights: &TransformerWeights<T>,
    lines: &[String],
    seq_len: usize,
) -> Result<f64> {
    if lines.is_empty() {
        return Err(Error::Contract("corpus_loss on an empty corpus".into()));
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for line in lines {
        let ids = encode_line(line, seq_len);
        let tape: Tape<T> = Tape::new();
        let bound = weights.bind(&tape, false);
        let logits = forward(&tape, &weights.config, &bound, &ids[..ids.len() - 1], None, Mode::Eval)?;
        let targets = &ids[1..];
        let mask = vec![true; targets.len()];
        let nll = nll_loss(&tape, logits, targets, &mask)?;
        total += tape.scalar_value(nll).to_f64();
        tokens += targets.len();
    }
    Ok(total / tokens as f64)
}

struct Adam<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
}

impl<T: Scalar> Adam<T> {
    fn new(shapes: &[(usize, usize)], cfg: &PretrainConfig) -> Self {
        Adam {
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            lr: cfg.lr,
        }
    }

    fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) {
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let mhat_scale = T::from_f64(1.0 / (1.0 - self.beta1.powi(self.t as i32)));
        let vhat_scale = T::from_f64(1.0 / (1.0 - self.beta2.powi(self.t as i32)));
        let eps = T::from_f64(self.eps);
        let lr = T::from_f64(self.lr);
        for ((w, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let wd = w.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..wd.len() {
                md[i] = b1 * md[i] + (one - b1) * gd[i];
                vd[i] = b2 * vd[i] + (one - b2) * gd[i] * gd[i];
                let mhat = md[i] * mhat_scale;
                let vhat = vd[i] * vhat_scale;
                wd[i] = wd[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Train from scratch on a line corpus. Divergence aborts with the step
/// and the offending quantity; `steps = 0` returns the seeded
/// initialization untouched.
pub fn pretrain_base<T: Scalar>(
    model: ModelConfig,
    corpus: &[String],
    cfg: &PretrainConfig,
) -> Result<(TransformerWeights<T>, Vec<PretrainRow>)> {
    cfg.validate(&model)?;
    let lines: Vec<&String> = corpus.iter().filter(|l| !l.is_empty()).collect();
    if lines.is_empty() {
        return Err(Error::Contract("pretraining corpus has no usable lines".into()));
    }
    let root = SeedRng::new(cfg.seed);
    let mut weights =
        TransformerWeights::<T>::init(model, &mut root.derive("base-init"))?;
    let shapes: Vec<(usize, usize)> = weights
        .named_tensors()
        .iter()
        .map(|(_, t)| t.shape())
        .collect();
    let names: Vec<String> = weights.named_tensors().iter().map(|(n, _)| n.clone()).collect();
    let mut adam = Adam::new(&shapes, cfg);
    let mut batch_rng = root.derive("batches");
    let mut rows = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let tape: Tape<T> = Tape::new();
        let bound = weights.bind(&tape, true);
        let mut batch_loss: Option<Var> = None;
        for _ in 0..cfg.batch_size {
            let line = lines[batch_rng.below(lines.len())];
            let ids = encode_line(line, cfg.seq_len);
            let logits = forward(&tape, &model, &bound, &ids[..ids.len() - 1], None, Mode::Train)?;
            let targets = &ids[1..];
            let mask = vec![true; targets.len()];
            let nll = nll_loss(&tape, logits, targets, &mask)?;
            let per_token = tape.scale(nll, T::from_f64(1.0 / targets.len() as f64));
            batch_loss = Some(match batch_loss {
                Some(acc) => tape.add(acc, per_token)?,
                None => per_token,
            });
        }
        let loss = tape.scale(
            batch_loss.expect("batch_size validated nonzero"),
            T::from_f64(1.0 / cfg.batch_size as f64),
        );
        let loss_value = tape.scalar_value(loss).to_f64();
        if !loss_value.is_finite() {
            return Err(Error::Divergence {
                step,
                what: "non-finite pretraining loss".into(),
            });
        }
        tape.backward(loss)?;

        let vars = bound_vars(&bound);
        let mut grads = Vec::with_capacity(vars.len());
        for (var, name) in vars.iter().zip(&names) {
            let g = tape
                .grad(*var)
                .ok_or_else(|| Error::Contract(format!("missing gradient for {name}")))?;
            if g.has_non_finite() {
                return Err(Error::Divergence {
                    step,
                    what: format!("non-finite gradient on {name}"),
                });
            }
            grads.push(g);
        }
        adam.step(weights.tensors_mut(), &grads);
        rows.push(PretrainRow {
            step,
            loss: loss_value,
        });
    }
    Ok((weights, rows))
}
