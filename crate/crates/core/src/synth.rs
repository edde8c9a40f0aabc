//! Synthetic corpora: eight micro-skills with disjoint instruction
//! markers, three downstream tasks, and a generic byte corpus for
//! pretraining. Every generator is a pure function of (kind, n, seed).

use serde::{Deserialize, Serialize};

use crate::data::{
    convert, InstructionExample, Metric, RawRecord, Setting, Span, TaskSpec, TemplateSet,
};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::SeedRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillKind {
    Copy,
    Reverse,
    MapClassify,
    ModularAdd,
    SpanExtract,
    RelationLookup,
    SummaryHead,
    NliToy,
}

impl SkillKind {
    /// Library order: skill-count sweeps take prefixes of this list.
    pub const ALL: [SkillKind; 8] = [
        SkillKind::Copy,
        SkillKind::Reverse,
        SkillKind::MapClassify,
        SkillKind::ModularAdd,
        SkillKind::SpanExtract,
        SkillKind::RelationLookup,
        SkillKind::SummaryHead,
        SkillKind::NliToy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SkillKind::Copy => "copy",
            SkillKind::Reverse => "reverse",
            SkillKind::MapClassify => "map_classify",
            SkillKind::ModularAdd => "modular_add",
            SkillKind::SpanExtract => "span_extract",
            SkillKind::RelationLookup => "relation_lookup",
            SkillKind::SummaryHead => "summary_head",
            SkillKind::NliToy => "nli_toy",
        }
    }

    pub fn from_name(name: &str) -> Result<SkillKind> {
        SkillKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Contract(format!("unknown skill kind {name}")))
    }
}

/// Payload alphabet for the string skills; small so the byte model sees
/// every letter often.
const PAYLOAD: &[u8] = b"abcdefghij";

const CLASS_SIGNALS: [(&str, &str); 3] = [("zork", "red"), ("blum", "blue"), ("gryn", "green")];
const CLASS_FILLERS: [&str; 4] = ["om", "tu", "pa", "ki"];
const DRUGS: [&str; 4] = ["relox", "mavin", "toral", "quist"];
const ENTITIES: [&str; 12] = [
    "enta", "entb", "entc", "entd", "ente", "entf", "entg", "enth", "enti", "entj", "entk", "entl",
];
const RELATIONS: [&str; 3] = ["above", "below", "near"];
const TIERS: [&str; 4] = ["alpha", "beta", "gamma", "delta"];
const HEAD_WORDS: [&str; 6] = ["kelp", "moss", "fern", "reed", "vine", "bark"];
const NLI_NAMES: [&str; 6] = ["nap", "lum", "vex", "tor", "sib", "woz"];

fn payload_string(rng: &mut SeedRng, min_len: usize, max_len: usize) -> String {
    let len = min_len + rng.below(max_len - min_len + 1);
    (0..len)
        .map(|_| PAYLOAD[rng.below(PAYLOAD.len())] as char)
        .collect()
}

fn reverse_str(s: &str) -> String {
    s.chars().rev().collect()
}

fn window() -> usize {
    ModelConfig::desk_default().max_seq_len
}

fn direct(kind: SkillKind, i: usize, query: String, answer: String) -> InstructionExample {
    InstructionExample {
        context: String::new(),
        query,
        answer,
        skill_tag: Some(kind.name().to_string()),
        meta: format!("{}-{i}", kind.name()),
    }
}

/// `n` fresh examples of one skill. Instruction-native skills emit the
/// format directly; the rest go through the category converters.
pub fn gen_skill_corpus(kind: SkillKind, n: usize, seed: u64) -> Result<Vec<InstructionExample>> {
    let templates = TemplateSet::default();
    let mut rng = SeedRng::new(seed).derive(kind.name());
    let max_len = window();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let ex = match kind {
            SkillKind::Copy => {
                let s = payload_string(&mut rng, 3, 5);
                direct(kind, i, format!("copy: {s}"), s)
            }
            SkillKind::Reverse => {
                let s = payload_string(&mut rng, 3, 5);
                let r = reverse_str(&s);
                direct(kind, i, format!("rev: {s}"), r)
            }
            SkillKind::ModularAdd => {
                let a = rng.below(10);
                let b = rng.below(10);
                direct(
                    kind,
                    i,
                    format!("add mod 10: {a} {b}"),
                    ((a + b) % 10).to_string(),
                )
            }
            SkillKind::MapClassify => {
                let (signal, label) = CLASS_SIGNALS[rng.below(CLASS_SIGNALS.len())];
                let f1 = CLASS_FILLERS[rng.below(CLASS_FILLERS.len())];
                let f2 = CLASS_FILLERS[rng.below(CLASS_FILLERS.len())];
                let record = RawRecord::TextClassification {
                    id: format!("{}-{i}", kind.name()),
                    text: format!("{f1} {signal} {f2}"),
                    label: label.to_string(),
                    label_set: CLASS_SIGNALS.iter().map(|(_, l)| l.to_string()).collect(),
                };
                convert(&record, &templates, Some(kind.name()), max_len)?
            }
            SkillKind::SpanExtract => {
                let drug = DRUGS[rng.below(DRUGS.len())];
                let dose = (1 + rng.below(99)).to_string();
                let text = format!("gave {drug} at {dose}");
                let drug_start = "gave ".len();
                let dose_start = drug_start + drug.len() + " at ".len();
                let record = RawRecord::SequenceLabeling {
                    id: format!("{}-{i}", kind.name()),
                    spans: vec![
                        Span {
                            start: drug_start,
                            end: drug_start + drug.len(),
                            kind: "drug".into(),
                        },
                        Span {
                            start: dose_start,
                            end: dose_start + dose.len(),
                            kind: "dose".into(),
                        },
                    ],
                    text,
                };
                convert(&record, &templates, Some(kind.name()), max_len)?
            }
            SkillKind::RelationLookup => {
                let h = rng.below(ENTITIES.len());
                let record = if rng.below(3) < 2 {
                    let mut t = rng.below(ENTITIES.len());
                    if t == h {
                        t = (t + 1) % ENTITIES.len();
                    }
                    RawRecord::KnowledgeGraph {
                        id: format!("{}-{i}", kind.name()),
                        head: ENTITIES[h].into(),
                        relation: Some(RELATIONS[(h + t) % RELATIONS.len()].into()),
                        tail: Some(ENTITIES[t].into()),
                        description: None,
                    }
                } else {
                    RawRecord::KnowledgeGraph {
                        id: format!("{}-{i}", kind.name()),
                        head: ENTITIES[h].into(),
                        relation: None,
                        tail: None,
                        description: Some(format!("{} node", TIERS[h % TIERS.len()])),
                    }
                };
                convert(&record, &templates, Some(kind.name()), max_len)?
            }
            SkillKind::SummaryHead => {
                let count = 3 + rng.below(2);
                let words: Vec<&str> = (0..count)
                    .map(|_| HEAD_WORDS[rng.below(HEAD_WORDS.len())])
                    .collect();
                let record = RawRecord::Seq2Seq {
                    id: format!("{}-{i}", kind.name()),
                    source: words.join(" "),
                    target: words[0].to_string(),
                };
                convert(&record, &templates, Some(kind.name()), max_len)?
            }
            SkillKind::NliToy => {
                let x = NLI_NAMES[rng.below(NLI_NAMES.len())];
                let mut y = NLI_NAMES[rng.below(NLI_NAMES.len())];
                if y == x {
                    y = NLI_NAMES[(NLI_NAMES.iter().position(|&n| n == x).unwrap() + 1) % NLI_NAMES.len()];
                }
                let agree = rng.below(2) == 0;
                let hypothesis = if agree {
                    format!("{x} over {y}")
                } else {
                    format!("{y} over {x}")
                };
                let record = RawRecord::QuestionAnswering {
                    id: format!("{}-{i}", kind.name()),
                    question: format!("premise: {x} over {y}. hypothesis: {hypothesis}."),
                    options: vec!["yes".into(), "no".into()],
                    answer: if agree { "yes".into() } else { "no".into() },
                };
                convert(&record, &templates, Some(kind.name()), max_len)?
            }
        };
        out.push(ex);
    }
    Ok(out)
}

/// Uniform mixture of fresh examples from the given skills, in random
/// interleaving. One source skill degenerates to that skill's corpus.
pub fn gen_seen_mix(kinds: &[SkillKind], n: usize, seed: u64) -> Result<Vec<InstructionExample>> {
    if kinds.is_empty() {
        return Err(Error::Contract("seen_mix over no skills".into()));
    }
    let root = SeedRng::new(seed);
    let mut pick = root.derive("mix");
    let mut streams: Vec<SeedRng> = kinds
        .iter()
        .map(|k| root.derive("source").derive(k.name()))
        .collect();
    let mut counters = vec![0usize; kinds.len()];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let which = pick.below(kinds.len());
        let kind = kinds[which];
        // One fresh example, seeded per (skill, position in its stream).
        let idx = counters[which];
        counters[which] += 1;
        let seed_for = streams[which].below(u32::MAX as usize) as u64;
        let mut batch = gen_skill_corpus(kind, 1, seed_for)?;
        let mut ex = batch.pop().expect("n=1 corpus");
        ex.meta = format!("mix-{}-{idx}", kind.name());
        out.push(ex);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SeenMix,
    UnseenComposite,
    BinaryOutcome,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SeenMix => "seen_mix",
            TaskKind::UnseenComposite => "unseen_composite",
            TaskKind::BinaryOutcome => "binary_outcome",
        }
    }

    pub fn from_name(name: &str) -> Result<TaskKind> {
        [TaskKind::SeenMix, TaskKind::UnseenComposite, TaskKind::BinaryOutcome]
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Contract(format!("unknown task kind {name}")))
    }
}

/// Every composite item's gold answer is a two-rule chain; the oracle
/// recomputes it from the query alone. Six in ten chains are copy
/// followed by reverse, which collapses to the reverse rule on a fresh
/// payload, so a well-routed model has a solvable core while the chains
/// with their own markers stay genuinely novel.
fn gen_composite(n: usize, seed: u64) -> Vec<InstructionExample> {
    let mut rng = SeedRng::new(seed).derive("composite");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let form = rng.below(10);
        let ex = if form < 6 {
            // copy then reverse; copy is the identity, so the chain lands
            // on the reverse rule.
            let s = payload_string(&mut rng, 3, 5);
            InstructionExample {
                context: String::new(),
                query: format!("rev: {s}"),
                answer: reverse_str(&s),
                skill_tag: None,
                meta: format!("comp-collapse-{i}"),
            }
        } else if form < 8 {
            // Explicit chain marker: copy the payload, then reverse it.
            let s = payload_string(&mut rng, 3, 5);
            InstructionExample {
                context: String::new(),
                query: format!("rev copy: {s}"),
                answer: reverse_str(&s),
                skill_tag: None,
                meta: format!("comp-chain-{i}"),
            }
        } else {
            // Head then reverse.
            let count = 3 + rng.below(2);
            let words: Vec<&str> = (0..count)
                .map(|_| HEAD_WORDS[rng.below(HEAD_WORDS.len())])
                .collect();
            InstructionExample {
                context: String::new(),
                query: format!("head rev: {}", words.join(" ")),
                answer: reverse_str(words[0]),
                skill_tag: None,
                meta: format!("comp-head-{i}"),
            }
        };
        out.push(ex);
    }
    out
}

/// Balanced two-label task scored by AUC: even digit sums are positive.
fn gen_binary(n: usize, seed: u64) -> Result<Vec<InstructionExample>> {
    let templates = TemplateSet::default();
    let mut rng = SeedRng::new(seed).derive("binary");
    let max_len = window();
    (0..n)
        .map(|i| {
            let a = rng.below(10);
            let b = rng.below(10);
            let label = if (a + b) % 2 == 0 { "yes" } else { "no" };
            let record = RawRecord::TextClassification {
                id: format!("bin-{i}"),
                text: format!("risk {a} {b}"),
                label: label.into(),
                label_set: vec!["no".into(), "yes".into()],
            };
            convert(&record, &templates, None, max_len)
        })
        .collect()
}

/// Downstream task datasets with their evaluation contracts. The seen mix
/// draws from the first four skills, the library every criterion trains.
pub fn gen_downstream_task(
    kind: TaskKind,
    n: usize,
    seed: u64,
) -> Result<(Vec<InstructionExample>, TaskSpec)> {
    let (examples, metric, label_set) = match kind {
        TaskKind::SeenMix => (gen_seen_mix(&SkillKind::ALL[..4], n, seed)?, Metric::Accuracy, None),
        TaskKind::UnseenComposite => (gen_composite(n, seed), Metric::Accuracy, None),
        TaskKind::BinaryOutcome => (
            gen_binary(n, seed)?,
            Metric::Auc,
            Some(vec!["no".to_string(), "yes".to_string()]),
        ),
    };
    let spec = TaskSpec {
        task_id: kind.name().to_string(),
        metric,
        setting: Setting::Normal,
        label_set,
        template_id: "default".into(),
    };
    Ok((examples, spec))
}

const PRETRAIN_WORDS: [&str; 16] = [
    "sato", "lim", "perl", "onda", "vick", "rua", "tem", "bas", "noor", "glif", "hup", "sern",
    "ival", "dob", "yent", "mau",
];

/// Generic byte text: word sentences, digit runs, repeats and
/// colon-structured lines. Covers the byte inventory the tasks use
/// without teaching any task rule.
pub fn gen_pretrain_corpus(n_lines: usize, seed: u64) -> Vec<String> {
    let mut rng = SeedRng::new(seed).derive("pretrain");
    (0..n_lines)
        .map(|_| match rng.below(4) {
            0 => {
                let words: Vec<&str> = (0..3 + rng.below(4))
                    .map(|_| PRETRAIN_WORDS[rng.below(PRETRAIN_WORDS.len())])
                    .collect();
                format!("{}.", words.join(" "))
            }
            1 => {
                let digits: Vec<String> = (0..4 + rng.below(4))
                    .map(|_| rng.below(10).to_string())
                    .collect();
                digits.join(" ")
            }
            2 => {
                let unit = payload_string(&mut rng, 2, 3);
                unit.repeat(3 + rng.below(3))
            }
            _ => {
                let key = PRETRAIN_WORDS[rng.below(PRETRAIN_WORDS.len())];
                let vals: Vec<&str> = (0..2 + rng.below(2))
                    .map(|_| PRETRAIN_WORDS[rng.below(PRETRAIN_WORDS.len())])
                    .collect();
                format!("{key}: {}", vals.join(" "))
            }
        })
        .collect()
}
