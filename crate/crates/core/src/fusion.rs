//! Materialize a routed mixture of skill deltas into plain base weights,
//! and evaluate any set of weights on a test split. After fusion no
//! adapter structures remain; the fused forward must agree with the
//! routed forward, which is what the integration suite checks at scale.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{encode_example, InstructionExample, Metric, TaskSpec};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auc, exact_match, f1_from_counts, normalize_answer, overlap_counts};
use crate::model::{forward, generate, nll_loss, Mode, TargetMatrix, TransformerWeights};
use crate::router::SkillLibrary;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tokenizer::TokenSequence;

/// Where a fused checkpoint came from: enough to rebuild it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Fingerprint of the base weights the deltas were added to.
    pub base_id: String,
    /// Skill ids in mixture order.
    pub skill_ids: Vec<String>,
    /// The gate output that weighted each skill's delta.
    pub mixture: Vec<f64>,
    /// Gate temperature that produced the mixture.
    pub tau: f64,
}

/// Base weights with every projection replaced by `W + sum_i r_i delta_i`.
#[derive(Clone, Debug)]
pub struct FusedModel<T> {
    pub weights: TransformerWeights<T>,
    pub provenance: Provenance,
}

const SIMPLEX_TOL: f64 = 1e-6;

fn check_mixture(r: &[f64], k: usize) -> Result<()> {
    if r.len() != k {
        return Err(Error::Contract(format!(
            "mixture has {} entries for {k} skills",
            r.len()
        )));
    }
    if r.iter().any(|x| !x.is_finite() || *x < -SIMPLEX_TOL) {
        return Err(Error::Contract(format!("mixture off the simplex: {r:?}")));
    }
    let sum: f64 = r.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Contract(format!(
            "mixture sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Add the routed deltas into a copy of the base weights. The base stays
/// untouched; the result carries provenance naming its exact inputs.
pub fn fuse<T: Scalar>(
    base: &TransformerWeights<T>,
    lib: &SkillLibrary<T>,
    r: &[f64],
    tau: f64,
) -> Result<FusedModel<T>> {
    if lib.config() != &base.config {
        return Err(Error::Contract(
            "skill library targets a different base configuration".into(),
        ));
    }
    check_mixture(r, lib.len())?;
    let mut weights = base.clone();
    for (layer_idx, layer) in weights.layers.iter_mut().enumerate() {
        for target in TargetMatrix::ALL {
            let w = match target {
                TargetMatrix::Query => &mut layer.w_q,
                TargetMatrix::Key => &mut layer.w_k,
                TargetMatrix::Value => &mut layer.w_v,
                TargetMatrix::FfnIn => &mut layer.w_f1,
                TargetMatrix::FfnOut => &mut layer.w_f2,
                TargetMatrix::AttnOut => &mut layer.w_o,
            };
            for (skill, &weight) in lib.skills().iter().zip(r) {
                let delta = skill.triplet(layer_idx, target).delta();
                w.add_scaled(&delta, T::from_f64(weight))?;
            }
        }
    }
    Ok(FusedModel {
        weights,
        provenance: Provenance {
            base_id: base.fingerprint(),
            skill_ids: lib.skill_ids(),
            mixture: r.to_vec(),
            tau,
        },
    })
}

/// Everything needed to re-derive the aggregate metrics for one example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub meta: String,
    pub gold: String,
    pub prediction: String,
    pub exact: bool,
    /// Token-overlap counts (matched, predicted, gold).
    pub matched: usize,
    pub predicted: usize,
    pub gold_tokens: usize,
    /// Log-probability of the positive label, present on AUC tasks.
    pub positive_score: Option<f64>,
    /// Whether the gold answer is the positive label, present on AUC tasks.
    pub positive_gold: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: String,
    /// The task's headline metric.
    pub metric: Metric,
    /// All computed metric values by name, each in [0, 1].
    pub values: BTreeMap<String, f64>,
    pub n_examples: usize,
    pub seed: u64,
    pub records: Vec<ExampleRecord>,
}

impl EvalReport {
    pub fn headline(&self) -> f64 {
        let name = metric_name(self.metric);
        self.values[name]
    }

    /// One summary line: task, metric, value, seed.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.task_id,
            metric_name(self.metric),
            self.headline(),
            self.seed
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

pub fn metric_name(metric: Metric) -> &'static str {
    match metric {
        Metric::Accuracy => "accuracy",
        Metric::ExactMatch => "exact_match",
        Metric::MicroF1 => "micro_f1",
        Metric::Auc => "auc",
    }
}

/// Longest continuation the decoder is allowed per test example.
pub const EVAL_MAX_NEW: usize = 48;

/// Greedy-decode every test example and score it against the gold answer.
/// Accuracy, exact match and micro-F1 are always reported; AUC is added
/// for binary tasks (two-entry label set, second entry positive), scored
/// by the log-probability of the positive label as the answer.
pub fn evaluate<T: Scalar>(
    weights: &TransformerWeights<T>,
    test_set: &[InstructionExample],
    spec: &TaskSpec,
    seed: u64,
) -> Result<EvalReport> {
    if test_set.is_empty() {
        return Err(Error::Contract(format!(
            "evaluate({}) on an empty test set",
            spec.task_id
        )));
    }
    let positive_label = match (spec.metric, &spec.label_set) {
        (Metric::Auc, Some(labels)) if labels.len() == 2 => Some(labels[1].clone()),
        (Metric::Auc, _) => {
            return Err(Error::Contract(format!(
                "auc task {} needs a two-entry label set",
                spec.task_id
            )))
        }
        _ => None,
    };

    let mut records = Vec::with_capacity(test_set.len());
    for ex in test_set {
        let encoded = encode_example(ex, weights.config.max_seq_len)?;
        let budget = EVAL_MAX_NEW.min(weights.config.max_seq_len - encoded.prompt.len());
        let continuation = generate(weights, &encoded.prompt, budget, |_| Ok(None))?;
        let prediction = TokenSequence::from_ids(continuation)?.to_text_lossy();
        let (matched, predicted, gold_tokens) = overlap_counts(&prediction, &ex.answer);
        let (positive_score, positive_gold) = match &positive_label {
            Some(label) => {
                let mut scored = ex.clone();
                scored.answer = label.clone();
                let enc = encode_example(&scored, weights.config.max_seq_len)?;
                let score = answer_log_prob(weights, &enc.input_ids, &enc.targets, &enc.mask)?;
                let gold_is_positive = normalize_answer(&ex.answer) == normalize_answer(label);
                (Some(score), Some(gold_is_positive))
            }
            None => (None, None),
        };
        records.push(ExampleRecord {
            meta: ex.meta.clone(),
            gold: ex.answer.clone(),
            prediction: prediction.clone(),
            exact: exact_match(&prediction, &ex.answer),
            matched,
            predicted,
            gold_tokens,
            positive_score,
            positive_gold,
        });
    }

    let mut values = BTreeMap::new();
    let exact_flags: Vec<bool> = records.iter().map(|r| r.exact).collect();
    let acc = accuracy(&exact_flags);
    values.insert("accuracy".to_string(), acc);
    values.insert("exact_match".to_string(), acc);
    let (tp, p, g) = records.iter().fold((0, 0, 0), |(a, b, c), r| {
        (a + r.matched, b + r.predicted, c + r.gold_tokens)
    });
    values.insert("micro_f1".to_string(), f1_from_counts(tp, p, g));
    if positive_label.is_some() {
        let scored: Vec<(f64, bool)> = records
            .iter()
            .map(|r| (r.positive_score.unwrap(), r.positive_gold.unwrap()))
            .collect();
        values.insert("auc".to_string(), auc(&scored)?);
    }

    Ok(EvalReport {
        task_id: spec.task_id.clone(),
        metric: spec.metric,
        values,
        n_examples: test_set.len(),
        seed,
        records,
    })
}

/// Joint log-probability of the masked (answer) positions under the model.
fn answer_log_prob<T: Scalar>(
    weights: &TransformerWeights<T>,
    input_ids: &[crate::tokenizer::TokenId],
    targets: &[crate::tokenizer::TokenId],
    mask: &[bool],
) -> Result<f64> {
    let tape: Tape<T> = Tape::new();
    let bound = weights.bind(&tape, false);
    let logits = forward(&tape, &weights.config, &bound, input_ids, None, Mode::Eval)?;
    let nll = nll_loss(&tape, logits, targets, mask)?;
    Ok(-tape.scalar_value(nll).to_f64())
}

/// Recompute every aggregate from the per-example records; used to prove
/// reports are self-consistent.
pub fn recompute_values(report: &EvalReport) -> Result<BTreeMap<String, f64>> {
    let mut values = BTreeMap::new();
    let flags: Vec<bool> = report.records.iter().map(|r| r.exact).collect();
    let acc = accuracy(&flags);
    values.insert("accuracy".to_string(), acc);
    values.insert("exact_match".to_string(), acc);
    let (tp, p, g) = report.records.iter().fold((0, 0, 0), |(a, b, c), r| {
        (a + r.matched, b + r.predicted, c + r.gold_tokens)
    });
    values.insert("micro_f1".to_string(), f1_from_counts(tp, p, g));
    if report.records.iter().any(|r| r.positive_score.is_some()) {
        let scored: Vec<(f64, bool)> = report
            .records
            .iter()
            .map(|r| {
                r.positive_score
                    .zip(r.positive_gold)
                    .ok_or_else(|| Error::Contract("record missing its auc fields".into()))
            })
            .collect::<Result<_>>()?;
        values.insert("auc".to_string(), auc(&scored)?);
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adalora::SkillAdapter;
    use crate::data::Setting;
    use crate::model::{AdapterHooks, MixEntry, ModelConfig};
    use crate::rng::SeedRng;
    use crate::tensor::Tensor;

    fn micro_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            vocab_size: 260,
            max_seq_len: 32,
            tied_head: false,
        }
    }

    fn micro_base(seed: u64) -> TransformerWeights<f64> {
        let mut rng = SeedRng::new(seed);
        TransformerWeights::init(micro_config(), &mut rng).unwrap()
    }

    fn random_adapter(id: &str, seed: u64) -> SkillAdapter<f64> {
        let mut rng = SeedRng::new(seed);
        let mut a = SkillAdapter::init(id, &micro_config(), 2, 0.0, &mut rng).unwrap();
        let mut lam = rng.derive("lam");
        for t in a.triplets.iter_mut() {
            t.singular = Tensor::randn(1, 2, 0.3, &mut lam);
        }
        a
    }

    fn micro_library(k: usize) -> SkillLibrary<f64> {
        SkillLibrary::new((0..k).map(|i| random_adapter(&format!("s{i}"), 50 + i as u64)).collect())
            .unwrap()
    }

    fn routed_logits(
        base: &TransformerWeights<f64>,
        lib: &SkillLibrary<f64>,
        r: &[f64],
        ids: &[crate::tokenizer::TokenId],
    ) -> Tensor<f64> {
        let tape = Tape::new();
        let bound = base.bind(&tape, false);
        let mut hooks = crate::router::routed_hooks(&tape, lib, r).unwrap();
        let logits = forward(&tape, &base.config, &bound, ids, Some(&mut hooks), Mode::Eval).unwrap();
        tape.value(logits)
    }

    fn fused_logits(fused: &FusedModel<f64>, ids: &[crate::tokenizer::TokenId]) -> Tensor<f64> {
        let tape = Tape::new();
        let bound = fused.weights.bind(&tape, false);
        let logits = forward(&tape, &fused.weights.config, &bound, ids, None, Mode::Eval).unwrap();
        tape.value(logits)
    }

    #[test]
    fn zero_adapters_fuse_to_the_exact_base() {
        let base = micro_base(1);
        let zero_lib = SkillLibrary::new(vec![
            SkillAdapter::init("z0", &micro_config(), 2, 0.0, &mut SeedRng::new(9)).unwrap(),
            SkillAdapter::init("z1", &micro_config(), 2, 0.0, &mut SeedRng::new(10)).unwrap(),
        ])
        .unwrap();
        let fused = fuse(&base, &zero_lib, &[0.5, 0.5], 1.0).unwrap();
        let ids = [256usize, 70, 71, 259, 72, 259];
        let a = fused_logits(&fused, &ids);
        let tape = Tape::new();
        let bound = base.bind(&tape, false);
        let logits = forward(&tape, &base.config, &bound, &ids, None, Mode::Eval).unwrap();
        assert!(a.bit_eq(&tape.value(logits)));
    }

    #[test]
    fn one_hot_mixture_matches_single_attachment() {
        let base = micro_base(2);
        let lib = micro_library(3);
        let fused = fuse(&base, &lib, &[0.0, 1.0, 0.0], 1.0).unwrap();
        let ids = [256usize, 65, 66, 67, 259, 68, 259];
        let want = {
            let tape = Tape::new();
            let bound = base.bind(&tape, false);
            let mut hooks = AdapterHooks::eval(vec![MixEntry {
                weight: None,
                adapter: lib.skills()[1].bind(&tape, false),
            }]);
            let logits =
                forward(&tape, &base.config, &bound, &ids, Some(&mut hooks), Mode::Eval).unwrap();
            tape.value(logits)
        };
        let got = fused_logits(&fused, &ids);
        assert!(got.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn fused_forward_matches_routed_forward() {
        let base = micro_base(3);
        let lib = micro_library(4);
        let r = [0.4, 0.3, 0.2, 0.1];
        let fused = fuse(&base, &lib, &r, 1.0).unwrap();
        let ids = [256usize, 100, 101, 259, 102, 103, 259];
        let diff = fused_logits(&fused, &ids).max_abs_diff(&routed_logits(&base, &lib, &r, &ids));
        assert!(diff < 1e-10, "fused vs routed diff {diff}");
    }

    #[test]
    fn fusion_leaves_the_base_untouched_and_is_idempotent() {
        let base = micro_base(4);
        let before: Vec<Vec<u8>> = base.named_tensors().iter().map(|(_, t)| t.to_le_bytes()).collect();
        let lib = micro_library(2);
        let first = fuse(&base, &lib, &[0.6, 0.4], 0.7).unwrap();
        let second = fuse(&base, &lib, &[0.6, 0.4], 0.7).unwrap();
        let after: Vec<Vec<u8>> = base.named_tensors().iter().map(|(_, t)| t.to_le_bytes()).collect();
        assert_eq!(before, after);
        assert_eq!(first.provenance, second.provenance);
        for ((na, ta), (nb, tb)) in first
            .weights
            .named_tensors()
            .iter()
            .zip(second.weights.named_tensors().iter())
        {
            assert_eq!(na, nb);
            assert!(ta.bit_eq(tb), "tensor {na} differs between identical fusions");
        }
    }

    #[test]
    fn provenance_names_the_exact_inputs() {
        let base = micro_base(5);
        let lib = micro_library(2);
        let fused = fuse(&base, &lib, &[0.25, 0.75], 0.5).unwrap();
        assert_eq!(fused.provenance.base_id, base.fingerprint());
        assert_eq!(fused.provenance.skill_ids, lib.skill_ids());
        assert_eq!(fused.provenance.mixture, vec![0.25, 0.75]);
        assert_eq!(fused.provenance.tau, 0.5);
    }

    #[test]
    fn fuse_rejects_off_simplex_mixtures() {
        let base = micro_base(6);
        let lib = micro_library(2);
        assert!(fuse(&base, &lib, &[0.7, 0.7], 1.0).is_err());
        assert!(fuse(&base, &lib, &[1.5, -0.5], 1.0).is_err());
        assert!(fuse(&base, &lib, &[1.0], 1.0).is_err());
        assert!(fuse(&base, &lib, &[f64::NAN, 1.0], 1.0).is_err());
    }

    fn spec(metric: Metric, labels: Option<Vec<&str>>) -> TaskSpec {
        TaskSpec {
            task_id: "t".into(),
            metric,
            setting: Setting::Normal,
            label_set: labels.map(|v| v.into_iter().map(String::from).collect()),
            template_id: "default".into(),
        }
    }

    fn example(query: &str, answer: &str, meta: &str) -> InstructionExample {
        InstructionExample {
            context: String::new(),
            query: query.into(),
            answer: answer.into(),
            skill_tag: None,
            meta: meta.into(),
        }
    }

    #[test]
    fn evaluate_rejects_an_empty_test_set() {
        let base = micro_base(7);
        let err = evaluate(&base, &[], &spec(Metric::Accuracy, None), 0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn agreeing_predictions_score_perfect_accuracy() {
        // Whatever the untrained model emits becomes the gold answer, so
        // the whole decode-normalize-compare path must land on 1.0. The
        // window is wide enough that the generation budget is EVAL_MAX_NEW
        // for probe and evaluation alike (greedy replay is then exact) and
        // that lossy-decoded answers re-encode even when every invalid
        // byte blows up into a three-byte replacement char.
        let cfg = ModelConfig {
            max_seq_len: 224,
            ..micro_config()
        };
        let base = TransformerWeights::<f64>::init(cfg, &mut SeedRng::new(8)).unwrap();
        let mut examples = Vec::new();
        for i in 0..8 {
            let q = format!("q {i}");
            let probe = example(&q, "placeholder", &format!("m{i}"));
            let enc = encode_example(&probe, base.config.max_seq_len).unwrap();
            assert!(enc.prompt.len() + EVAL_MAX_NEW < base.config.max_seq_len);
            let out = generate(&base, &enc.prompt, EVAL_MAX_NEW, |_| Ok(None)).unwrap();
            let text = TokenSequence::from_ids(out).unwrap().to_text_lossy();
            if !normalize_answer(&text).is_empty() {
                examples.push(example(&q, &text, &format!("m{i}")));
            }
        }
        assert!(!examples.is_empty(), "untrained model emitted nothing scoreable");
        let report = evaluate(&base, &examples, &spec(Metric::Accuracy, None), 3).unwrap();
        assert_eq!(report.headline(), 1.0);
        assert_eq!(report.values["micro_f1"], 1.0);
        assert_eq!(report.n_examples, examples.len());
    }

    #[test]
    fn report_aggregates_match_record_recomputation() {
        let base = micro_base(9);
        let examples = vec![
            example("is it warm", "yes", "a"),
            example("is it cold", "no", "b"),
            example("is it wet", "yes", "c"),
        ];
        let task = spec(Metric::Auc, Some(vec!["no", "yes"]));
        let report = evaluate(&base, &examples, &task, 11).unwrap();
        let recomputed = recompute_values(&report).unwrap();
        assert_eq!(report.values, recomputed);
        for v in report.values.values() {
            assert!((0.0..=1.0).contains(v), "metric out of range: {v}");
        }
        assert!(report.values.contains_key("auc"));
        for r in &report.records {
            assert!(r.positive_score.is_some() && r.positive_gold.is_some());
        }
        assert_eq!(report.records.iter().filter(|r| r.positive_gold.unwrap()).count(), 2);
    }

    #[test]
    fn auc_task_without_binary_labels_is_rejected() {
        let base = micro_base(10);
        let examples = vec![example("q", "yes", "a")];
        let three = spec(Metric::Auc, Some(vec!["a", "b", "c"]));
        assert!(evaluate(&base, &examples, &three, 0).is_err());
        let none = spec(Metric::Auc, None);
        assert!(evaluate(&base, &examples, &none, 0).is_err());
    }

    #[test]
    fn csv_row_and_json_round_trip() {
        let base = micro_base(11);
        let examples = vec![example("echo a", "a", "x"), example("echo b", "b", "y")];
        let report = evaluate(&base, &examples, &spec(Metric::ExactMatch, None), 7).unwrap();
        let row = report.csv_row();
        assert!(row.starts_with("t,exact_match,"));
        assert!(row.ends_with(",7"));
        let back: EvalReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}
