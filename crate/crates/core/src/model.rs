//! Decoder-only transformer with injection points for low-rank adapter
//! deltas on the six projection matrices of every layer.
//!
//! The base weights stay frozen everywhere except pretraining; adapters see
//! them only through [`AdapterHooks`], which adds each skill's delta (scaled
//! by an optional mixing weight) to the output of the matching projection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::{TokenId, EOS, VOCAB_SIZE};

/// The six matrices per layer that accept adapter deltas, in canonical
/// order. The order doubles as the pruning tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TargetMatrix {
    Query,
    Key,
    Value,
    FfnIn,
    FfnOut,
    AttnOut,
}

/// Number of adapter target matrices per layer.
pub const TARGETS_PER_LAYER: usize = 6;

impl TargetMatrix {
    pub const ALL: [TargetMatrix; TARGETS_PER_LAYER] = [
        TargetMatrix::Query,
        TargetMatrix::Key,
        TargetMatrix::Value,
        TargetMatrix::FfnIn,
        TargetMatrix::FfnOut,
        TargetMatrix::AttnOut,
    ];

    pub fn index(self) -> usize {
        match self {
            TargetMatrix::Query => 0,
            TargetMatrix::Key => 1,
            TargetMatrix::Value => 2,
            TargetMatrix::FfnIn => 3,
            TargetMatrix::FfnOut => 4,
            TargetMatrix::AttnOut => 5,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            TargetMatrix::Query => "q",
            TargetMatrix::Key => "k",
            TargetMatrix::Value => "v",
            TargetMatrix::FfnIn => "f1",
            TargetMatrix::FfnOut => "f2",
            TargetMatrix::AttnOut => "o",
        }
    }

    /// Shape of the base matrix this target wraps.
    pub fn shape(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            TargetMatrix::FfnIn => (cfg.d_model, cfg.d_ffn),
            TargetMatrix::FfnOut => (cfg.d_ffn, cfg.d_model),
            _ => (cfg.d_model, cfg.d_model),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Share the token embedding as the output head instead of a separate
    /// projection.
    pub tied_head: bool,
}

impl ModelConfig {
    /// Desk-scale default: small enough to train in minutes on one CPU core
    /// while still exercising every injection target.
    pub fn desk_default() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 256,
            tied_head: false,
        }
    }

    /// `prefix` locates this config inside a larger file for error messages
    /// (for example `"model."`).
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let fail = |field: &str, reason: String| {
            Err(Error::ConfigValidation {
                path: format!("{prefix}{field}"),
                reason,
            })
        };
        for (field, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return fail(field, "must be at least 1".into());
            }
        }
        if self.d_model % self.n_heads != 0 {
            return fail(
                "n_heads",
                format!("{} does not divide d_model {}", self.n_heads, self.d_model),
            );
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug)]
pub struct LayerWeights<T> {
    pub attn_norm_gain: Tensor<T>,
    pub attn_norm_bias: Tensor<T>,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub ffn_norm_gain: Tensor<T>,
    pub ffn_norm_bias: Tensor<T>,
    pub w_f1: Tensor<T>,
    pub w_f2: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct TransformerWeights<T> {
    pub config: ModelConfig,
    pub token_embedding: Tensor<T>,
    pub pos_embedding: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm_gain: Tensor<T>,
    pub final_norm_bias: Tensor<T>,
    /// Present exactly when the config is untied.
    pub lm_head: Option<Tensor<T>>,
}

const INIT_STD: f64 = 0.02;

impl<T: Scalar> TransformerWeights<T> {
    pub fn init(config: ModelConfig, rng: &mut SeedRng) -> Result<Self> {
        config.validate("")?;
        let d = config.d_model;
        let randn = |r: usize, c: usize, rng: &mut SeedRng| Tensor::randn(r, c, INIT_STD, rng);
        let token_embedding = randn(config.vocab_size, d, rng);
        let pos_embedding = randn(config.max_seq_len, d, rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm_gain: Tensor::filled(1, d, T::one()),
                attn_norm_bias: Tensor::zeros(1, d),
                w_q: randn(d, d, rng),
                w_k: randn(d, d, rng),
                w_v: randn(d, d, rng),
                w_o: randn(d, d, rng),
                ffn_norm_gain: Tensor::filled(1, d, T::one()),
                ffn_norm_bias: Tensor::zeros(1, d),
                w_f1: randn(d, config.d_ffn, rng),
                w_f2: randn(config.d_ffn, d, rng),
            })
            .collect();
        let lm_head = if config.tied_head {
            None
        } else {
            Some(randn(d, config.vocab_size, rng))
        };
        Ok(TransformerWeights {
            config,
            token_embedding,
            pos_embedding,
            layers,
            final_norm_gain: Tensor::filled(1, d, T::one()),
            final_norm_bias: Tensor::zeros(1, d),
            lm_head,
        })
    }

    /// All tensors with their checkpoint names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("pos_embedding".to_string(), &self.pos_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm.gain"), &l.attn_norm_gain));
            out.push((format!("layers.{i}.attn_norm.bias"), &l.attn_norm_bias));
            out.push((format!("layers.{i}.w_q"), &l.w_q));
            out.push((format!("layers.{i}.w_k"), &l.w_k));
            out.push((format!("layers.{i}.w_v"), &l.w_v));
            out.push((format!("layers.{i}.w_o"), &l.w_o));
            out.push((format!("layers.{i}.ffn_norm.gain"), &l.ffn_norm_gain));
            out.push((format!("layers.{i}.ffn_norm.bias"), &l.ffn_norm_bias));
            out.push((format!("layers.{i}.w_f1"), &l.w_f1));
            out.push((format!("layers.{i}.w_f2"), &l.w_f2));
        }
        out.push(("final_norm.gain".to_string(), &self.final_norm_gain));
        out.push(("final_norm.bias".to_string(), &self.final_norm_bias));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".to_string(), h));
        }
        out
    }

    /// Mutable view of every tensor, in [`TransformerWeights::named_tensors`]
    /// order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![&mut self.token_embedding, &mut self.pos_embedding];
        for l in self.layers.iter_mut() {
            out.push(&mut l.attn_norm_gain);
            out.push(&mut l.attn_norm_bias);
            out.push(&mut l.w_q);
            out.push(&mut l.w_k);
            out.push(&mut l.w_v);
            out.push(&mut l.w_o);
            out.push(&mut l.ffn_norm_gain);
            out.push(&mut l.ffn_norm_bias);
            out.push(&mut l.w_f1);
            out.push(&mut l.w_f2);
        }
        out.push(&mut self.final_norm_gain);
        out.push(&mut self.final_norm_bias);
        if let Some(h) = self.lm_head.as_mut() {
            out.push(h);
        }
        out
    }

    /// Rebuild from named tensors; the map must match the config exactly.
    pub fn from_named(config: ModelConfig, tensors: &mut BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate("")?;
        let mut take = |name: String, rows: usize, cols: usize| -> Result<Tensor<T>> {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Contract(format!("missing tensor {name}")))?;
            if t.shape() != (rows, cols) {
                return Err(Error::Contract(format!(
                    "tensor {name} has shape {:?}, expected ({rows}, {cols})",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let d = config.d_model;
        let token_embedding = take("token_embedding".into(), config.vocab_size, d)?;
        let pos_embedding = take("pos_embedding".into(), config.max_seq_len, d)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm_gain: take(format!("layers.{i}.attn_norm.gain"), 1, d)?,
                attn_norm_bias: take(format!("layers.{i}.attn_norm.bias"), 1, d)?,
                w_q: take(format!("layers.{i}.w_q"), d, d)?,
                w_k: take(format!("layers.{i}.w_k"), d, d)?,
                w_v: take(format!("layers.{i}.w_v"), d, d)?,
                w_o: take(format!("layers.{i}.w_o"), d, d)?,
                ffn_norm_gain: take(format!("layers.{i}.ffn_norm.gain"), 1, d)?,
                ffn_norm_bias: take(format!("layers.{i}.ffn_norm.bias"), 1, d)?,
                w_f1: take(format!("layers.{i}.w_f1"), d, config.d_ffn)?,
                w_f2: take(format!("layers.{i}.w_f2"), config.d_ffn, d)?,
            });
        }
        let final_norm_gain = take("final_norm.gain".into(), 1, d)?;
        let final_norm_bias = take("final_norm.bias".into(), 1, d)?;
        let lm_head = if config.tied_head {
            None
        } else {
            Some(take("lm_head".into(), d, config.vocab_size)?)
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Contract(format!("unexpected tensor {extra}")));
        }
        Ok(TransformerWeights {
            config,
            token_embedding,
            pos_embedding,
            layers,
            final_norm_gain,
            final_norm_bias,
            lm_head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Content hash of config plus every tensor, for provenance records.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            h.update(t.to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Convert precision, value by value.
    pub fn cast<U: Scalar>(&self) -> TransformerWeights<U> {
        let c = |t: &Tensor<T>| -> Tensor<U> {
            Tensor::from_vec(
                t.rows(),
                t.cols(),
                t.data().iter().map(|&x| U::from_f64(x.to_f64())).collect(),
            )
            .expect("same shape")
        };
        TransformerWeights {
            config: self.config,
            token_embedding: c(&self.token_embedding),
            pos_embedding: c(&self.pos_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm_gain: c(&l.attn_norm_gain),
                    attn_norm_bias: c(&l.attn_norm_bias),
                    w_q: c(&l.w_q),
                    w_k: c(&l.w_k),
                    w_v: c(&l.w_v),
                    w_o: c(&l.w_o),
                    ffn_norm_gain: c(&l.ffn_norm_gain),
                    ffn_norm_bias: c(&l.ffn_norm_bias),
                    w_f1: c(&l.w_f1),
                    w_f2: c(&l.w_f2),
                })
                .collect(),
            final_norm_gain: c(&self.final_norm_gain),
            final_norm_bias: c(&self.final_norm_bias),
            lm_head: self.lm_head.as_ref().map(c),
        }
    }

    /// Register every weight on `tape`. Pass `trainable = true` only while
    /// pretraining; adapters and routers must leave the base frozen.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> BoundBase {
        let leaf = |t: &Tensor<T>| tape.leaf(t, trainable);
        BoundBase {
            token_embedding: leaf(&self.token_embedding),
            pos_embedding: leaf(&self.pos_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| BoundLayer {
                    attn_norm_gain: leaf(&l.attn_norm_gain),
                    attn_norm_bias: leaf(&l.attn_norm_bias),
                    w_q: leaf(&l.w_q),
                    w_k: leaf(&l.w_k),
                    w_v: leaf(&l.w_v),
                    w_o: leaf(&l.w_o),
                    ffn_norm_gain: leaf(&l.ffn_norm_gain),
                    ffn_norm_bias: leaf(&l.ffn_norm_bias),
                    w_f1: leaf(&l.w_f1),
                    w_f2: leaf(&l.w_f2),
                })
                .collect(),
            final_norm_gain: leaf(&self.final_norm_gain),
            final_norm_bias: leaf(&self.final_norm_bias),
            lm_head: self.lm_head.as_ref().map(leaf),
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct BoundLayer {
    pub attn_norm_gain: Var,
    pub attn_norm_bias: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ffn_norm_gain: Var,
    pub ffn_norm_bias: Var,
    pub w_f1: Var,
    pub w_f2: Var,
}

impl BoundLayer {
    pub fn target(&self, t: TargetMatrix) -> Var {
        match t {
            TargetMatrix::Query => self.w_q,
            TargetMatrix::Key => self.w_k,
            TargetMatrix::Value => self.w_v,
            TargetMatrix::FfnIn => self.w_f1,
            TargetMatrix::FfnOut => self.w_f2,
            TargetMatrix::AttnOut => self.w_o,
        }
    }
}

pub struct BoundBase {
    pub token_embedding: Var,
    pub pos_embedding: Var,
    pub layers: Vec<BoundLayer>,
    pub final_norm_gain: Var,
    pub final_norm_bias: Var,
    pub lm_head: Option<Var>,
}

/// One adapter's factors for one (layer, target) pair, registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundTriplet {
    /// d1 x r.
    pub left: Var,
    /// 1 x r.
    pub singular: Var,
    /// r x d2.
    pub right: Var,
}

/// One adapter registered on a tape: a triplet for every (layer, target),
/// layer-major in [`TargetMatrix::ALL`] order.
#[derive(Clone, Debug)]
pub struct BoundAdapter {
    pub triplets: Vec<BoundTriplet>,
}

impl BoundAdapter {
    pub fn triplet(&self, layer: usize, target: TargetMatrix) -> BoundTriplet {
        self.triplets[layer * TARGETS_PER_LAYER + target.index()]
    }
}

/// One adapter plus its mixing weight; `weight = None` means 1.
pub struct MixEntry {
    pub weight: Option<Var>,
    pub adapter: BoundAdapter,
}

/// The adapter side of a forward pass: every projection adds
/// `weight_i * dropout(x) L_i diag(s_i) R_i` for each entry.
pub struct AdapterHooks {
    pub entries: Vec<MixEntry>,
    /// Dropout on the adapter input, active only in train mode.
    pub dropout_p: f64,
    pub rng: SeedRng,
}

impl AdapterHooks {
    pub fn eval(entries: Vec<MixEntry>) -> Self {
        AdapterHooks {
            entries,
            dropout_p: 0.0,
            rng: SeedRng::new(0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn adapted_linear<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    w: Var,
    layer: usize,
    target: TargetMatrix,
    hooks: Option<&mut AdapterHooks>,
    mode: Mode,
) -> Result<Var> {
    let mut y = tape.matmul(x, w)?;
    let Some(h) = hooks else { return Ok(y) };
    let train = mode == Mode::Train;
    let dropout_p = h.dropout_p;
    let rng = &mut h.rng;
    for entry in &h.entries {
        let t = entry.adapter.triplet(layer, target);
        let xd = tape.dropout(x, dropout_p, train, rng)?;
        let u = tape.matmul(xd, t.left)?;
        let us = tape.scale_cols(u, t.singular)?;
        let mut delta = tape.matmul(us, t.right)?;
        if let Some(wt) = entry.weight {
            delta = tape.mul_scalar(delta, wt)?;
        }
        y = tape.add(y, delta)?;
    }
    Ok(y)
}

const MASK_NEG: f64 = -1e30;

fn causal_mask<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::from_fn(n, n, |i, j| {
        if j <= i {
            T::zero()
        } else {
            T::from_f64(MASK_NEG)
        }
    })
}

/// Run the model over `ids`, returning per-position logits (seq x vocab).
/// Position `t` attends only to positions `<= t`.
pub fn forward<T: Scalar>(
    tape: &Tape<T>,
    cfg: &ModelConfig,
    base: &BoundBase,
    ids: &[TokenId],
    mut hooks: Option<&mut AdapterHooks>,
    mode: Mode,
) -> Result<Var> {
    let n = ids.len();
    if n == 0 {
        return Err(Error::Contract("forward on an empty sequence".into()));
    }
    if n > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: n,
            max: cfg.max_seq_len,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Contract(format!(
            "token id {bad} outside model vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let tok = tape.gather_rows(base.token_embedding, ids)?;
    let positions: Vec<usize> = (0..n).collect();
    let pos = tape.gather_rows(base.pos_embedding, &positions)?;
    let mut x = tape.add(tok, pos)?;

    let head_dim = cfg.head_dim();
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
    let mask = tape.constant(causal_mask::<T>(n));

    for (li, layer) in base.layers.iter().enumerate() {
        let h = tape.layer_norm_rows(x, layer.attn_norm_gain, layer.attn_norm_bias)?;
        let q = adapted_linear(tape, h, layer.w_q, li, TargetMatrix::Query, hooks.as_deref_mut(), mode)?;
        let k = adapted_linear(tape, h, layer.w_k, li, TargetMatrix::Key, hooks.as_deref_mut(), mode)?;
        let v = adapted_linear(tape, h, layer.w_v, li, TargetMatrix::Value, hooks.as_deref_mut(), mode)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hi in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, hi * head_dim, head_dim)?;
            let kh = tape.slice_cols(k, hi * head_dim, head_dim)?;
            let vh = tape.slice_cols(v, hi * head_dim, head_dim)?;
            let scores = tape.scale(tape.matmul(qh, tape.transpose(kh))?, scale);
            let att = tape.softmax_rows(tape.add(scores, mask)?);
            heads.push(tape.matmul(att, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let o = adapted_linear(tape, cat, layer.w_o, li, TargetMatrix::AttnOut, hooks.as_deref_mut(), mode)?;
        x = tape.add(x, o)?;

        let h2 = tape.layer_norm_rows(x, layer.ffn_norm_gain, layer.ffn_norm_bias)?;
        let f1 = adapted_linear(tape, h2, layer.w_f1, li, TargetMatrix::FfnIn, hooks.as_deref_mut(), mode)?;
        let f2 = adapted_linear(
            tape,
            tape.gelu(f1),
            layer.w_f2,
            li,
            TargetMatrix::FfnOut,
            hooks.as_deref_mut(),
            mode,
        )?;
        x = tape.add(x, f2)?;
    }
    let xf = tape.layer_norm_rows(x, base.final_norm_gain, base.final_norm_bias)?;
    match base.lm_head {
        Some(head) => tape.matmul(xf, head),
        None => tape.matmul(xf, tape.transpose(base.token_embedding)),
    }
}

/// Negative log-likelihood summed over the positions flagged by `mask`,
/// where `targets[t]` is the token position `t` should predict.
pub fn nll_loss<T: Scalar>(
    tape: &Tape<T>,
    logits: Var,
    targets: &[TokenId],
    mask: &[bool],
) -> Result<Var> {
    let lp = tape.log_softmax_rows(logits);
    let picked = tape.pick_sum(lp, targets, mask)?;
    Ok(tape.scale(picked, -T::one()))
}

fn argmax_first<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding: repeatedly append the argmax token (lowest id wins
/// ties) until EOS, `max_new` tokens, or the context window fills. Returns
/// only the continuation, EOS excluded. `make_hooks` registers adapters on
/// each step's fresh tape; return `None` for the pure base model.
pub fn generate<T, F>(
    weights: &TransformerWeights<T>,
    prompt: &[TokenId],
    max_new: usize,
    mut make_hooks: F,
) -> Result<Vec<TokenId>>
where
    T: Scalar,
    F: FnMut(&Tape<T>) -> Result<Option<AdapterHooks>>,
{
    if prompt.is_empty() {
        return Err(Error::Contract("generate from an empty prompt".into()));
    }
    let cfg = &weights.config;
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && ids.len() < cfg.max_seq_len {
        let tape: Tape<T> = Tape::new();
        let base = weights.bind(&tape, false);
        let mut hooks = make_hooks(&tape)?;
        let logits = forward(&tape, cfg, &base, &ids, hooks.as_mut(), Mode::Eval)?;
        let values = tape.value(logits);
        let next = argmax_first(values.row(values.rows() - 1));
        if next == EOS {
            break;
        }
        out.push(next);
        ids.push(next);
    }
    Ok(out)
}
