//! The unified instruction format, converters from the five raw-record
//! categories, deterministic splits, and token encoding for training.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tokenizer::{TokenId, TokenSequence, BOS, EOS, SEP};

/// Every task, whatever its source category, becomes context + query +
/// answer. The JSONL on-disk form uses exactly these field names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub context: String,
    pub query: String,
    pub answer: String,
    pub skill_tag: Option<String>,
    /// Source record id, for error messages and provenance.
    pub meta: String,
}

impl InstructionExample {
    pub fn validate(&self) -> Result<()> {
        if self.query.is_empty() {
            return Err(Error::BadRecord {
                id: self.meta.clone(),
                reason: "empty query".into(),
            });
        }
        if self.answer.is_empty() {
            return Err(Error::BadRecord {
                id: self.meta.clone(),
                reason: "empty answer".into(),
            });
        }
        Ok(())
    }
}

/// A labeled span inside a text, byte-offset based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: String,
}

/// The five raw data categories accepted by [`convert`].
#[derive(Clone, Debug)]
pub enum RawRecord {
    TextClassification {
        id: String,
        text: String,
        label: String,
        label_set: Vec<String>,
    },
    SequenceLabeling {
        id: String,
        text: String,
        spans: Vec<Span>,
    },
    Seq2Seq {
        id: String,
        source: String,
        target: String,
    },
    KnowledgeGraph {
        id: String,
        head: String,
        relation: Option<String>,
        tail: Option<String>,
        description: Option<String>,
    },
    QuestionAnswering {
        id: String,
        question: String,
        options: Vec<String>,
        answer: String,
    },
}

impl RawRecord {
    pub fn id(&self) -> &str {
        match self {
            RawRecord::TextClassification { id, .. }
            | RawRecord::SequenceLabeling { id, .. }
            | RawRecord::Seq2Seq { id, .. }
            | RawRecord::KnowledgeGraph { id, .. }
            | RawRecord::QuestionAnswering { id, .. } => id,
        }
    }
}

/// Plain-text template with `{placeholder}` substitution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    text: String,
}

impl Template {
    pub fn new(text: impl Into<String>) -> Self {
        Template { text: text.into() }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Substitute every `{name}`; unknown names are an error, unmatched
    /// braces pass through.
    pub fn apply(&self, vars: &BTreeMap<&str, String>) -> Result<String> {
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) => {
                    let name = &after[..close];
                    match vars.get(name) {
                        Some(v) => out.push_str(v),
                        None => {
                            return Err(Error::Contract(format!(
                                "template placeholder {{{name}}} has no value"
                            )))
                        }
                    }
                    rest = &after[close + 1..];
                }
                None => {
                    out.push_str(&rest[open..]);
                    rest = "";
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// Query templates for each record category. The knowledge-graph wordings
/// are part of the format contract; changing them changes the task.
#[derive(Clone, Debug)]
pub struct TemplateSet {
    pub template_id: String,
    pub classify_query: Template,
    pub spans_query: Template,
    pub seq2seq_query: Template,
    pub kg_describe_query: Template,
    pub kg_relation_query: Template,
    pub qa_options_query: Template,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            template_id: "default".into(),
            classify_query: Template::new("Which label applies? Options: {options}."),
            spans_query: Template::new("List each typed span in order."),
            seq2seq_query: Template::new("Transform the source text."),
            kg_describe_query: Template::new("Describe the entity {head}."),
            kg_relation_query: Template::new("What is the relation between {head} and {tail}?"),
            qa_options_query: Template::new("{question} Options: {options}."),
        }
    }
}

/// Canonical serialization for sequence-labeling answers: spans in text
/// order as `kind: text` joined by `; `.
pub fn serialize_spans(text: &str, spans: &[Span]) -> Result<String> {
    let mut ordered: Vec<&Span> = spans.iter().collect();
    ordered.sort_by_key(|s| (s.start, s.end));
    let mut parts = Vec::with_capacity(ordered.len());
    for s in ordered {
        if s.start >= s.end || s.end > text.len() || !text.is_char_boundary(s.start) || !text.is_char_boundary(s.end) {
            return Err(Error::Contract(format!(
                "span {}..{} out of bounds for text of {} bytes",
                s.start,
                s.end,
                text.len()
            )));
        }
        parts.push(format!("{}: {}", s.kind, &text[s.start..s.end]));
    }
    Ok(parts.join("; "))
}

fn enumerate_options(options: &[String]) -> String {
    options.join(", ")
}

/// Convert one raw record into the instruction format. Records whose
/// encoding would exceed `max_seq_len` are rejected with their id; nothing
/// is truncated silently.
pub fn convert(
    record: &RawRecord,
    templates: &TemplateSet,
    skill_tag: Option<&str>,
    max_seq_len: usize,
) -> Result<InstructionExample> {
    let bad = |reason: String| Error::BadRecord {
        id: record.id().to_string(),
        reason,
    };
    let ex = match record {
        RawRecord::TextClassification {
            id,
            text,
            label,
            label_set,
        } => {
            if !label_set.contains(label) {
                return Err(bad(format!("label {label} not in label set")));
            }
            let mut vars = BTreeMap::new();
            vars.insert("options", enumerate_options(label_set));
            vars.insert("text", text.clone());
            InstructionExample {
                context: text.clone(),
                query: templates.classify_query.apply(&vars)?,
                answer: label.clone(),
                skill_tag: skill_tag.map(String::from),
                meta: id.clone(),
            }
        }
        RawRecord::SequenceLabeling { id, text, spans } => {
            if spans.is_empty() {
                return Err(bad("sequence-labeling record with no spans".into()));
            }
            let answer = serialize_spans(text, spans).map_err(|e| bad(e.to_string()))?;
            let mut vars = BTreeMap::new();
            vars.insert("text", text.clone());
            InstructionExample {
                context: text.clone(),
                query: templates.spans_query.apply(&vars)?,
                answer,
                skill_tag: skill_tag.map(String::from),
                meta: id.clone(),
            }
        }
        RawRecord::Seq2Seq { id, source, target } => {
            let mut vars = BTreeMap::new();
            vars.insert("source", source.clone());
            InstructionExample {
                context: source.clone(),
                query: templates.seq2seq_query.apply(&vars)?,
                answer: target.clone(),
                skill_tag: skill_tag.map(String::from),
                meta: id.clone(),
            }
        }
        RawRecord::KnowledgeGraph {
            id,
            head,
            relation,
            tail,
            description,
        } => {
            let mut vars = BTreeMap::new();
            vars.insert("head", head.clone());
            match (relation, tail, description) {
                (None, None, Some(desc)) => InstructionExample {
                    context: String::new(),
                    query: templates.kg_describe_query.apply(&vars)?,
                    answer: desc.clone(),
                    skill_tag: skill_tag.map(String::from),
                    meta: id.clone(),
                },
                (Some(rel), Some(tail), None) => {
                    vars.insert("tail", tail.clone());
                    InstructionExample {
                        context: String::new(),
                        query: templates.kg_relation_query.apply(&vars)?,
                        answer: rel.clone(),
                        skill_tag: skill_tag.map(String::from),
                        meta: id.clone(),
                    }
                }
                _ => {
                    return Err(bad(
                        "knowledge-graph record needs exactly one of description or (relation, tail)"
                            .into(),
                    ))
                }
            }
        }
        RawRecord::QuestionAnswering {
            id,
            question,
            options,
            answer,
        } => {
            let query = if options.is_empty() {
                question.clone()
            } else {
                if !options.contains(answer) {
                    return Err(bad(format!("answer {answer} not among the options")));
                }
                let mut vars = BTreeMap::new();
                vars.insert("question", question.clone());
                vars.insert("options", enumerate_options(options));
                templates.qa_options_query.apply(&vars)?
            };
            InstructionExample {
                context: String::new(),
                query,
                answer: answer.clone(),
                skill_tag: skill_tag.map(String::from),
                meta: id.clone(),
            }
        }
    };
    ex.validate()?;
    let encoded_len = encoded_len(&ex);
    if encoded_len > max_seq_len {
        return Err(bad(format!(
            "encodes to {encoded_len} tokens, over the {max_seq_len} limit"
        )));
    }
    Ok(ex)
}

/// Token count of the full encoded sequence (markers included).
pub fn encoded_len(ex: &InstructionExample) -> usize {
    // BOS + context + SEP + query + SEP + answer + EOS
    4 + ex.context.len() + ex.query.len() + ex.answer.len()
}

/// One example encoded for next-token training and for generation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    /// What the model reads: the full sequence minus the final token.
    pub input_ids: Vec<TokenId>,
    /// `targets[t]` is the token position `t` must predict.
    pub targets: Vec<TokenId>,
    /// True exactly where the target is an answer token or the closing EOS.
    pub mask: Vec<bool>,
    /// BOS + context + SEP + query + SEP, the generation prompt.
    pub prompt: Vec<TokenId>,
}

/// Encode as `BOS context SEP query SEP answer EOS` with loss on the
/// answer span (EOS included).
pub fn encode_example(ex: &InstructionExample, max_seq_len: usize) -> Result<EncodedExample> {
    ex.validate()?;
    let full_len = encoded_len(ex);
    if full_len > max_seq_len {
        return Err(Error::SequenceTooLong {
            len: full_len,
            max: max_seq_len,
        });
    }
    let mut full: Vec<TokenId> = Vec::with_capacity(full_len);
    full.push(BOS);
    full.extend(TokenSequence::from_text(&ex.context).ids());
    full.push(SEP);
    full.extend(TokenSequence::from_text(&ex.query).ids());
    full.push(SEP);
    let prompt_len = full.len();
    full.extend(TokenSequence::from_text(&ex.answer).ids());
    full.push(EOS);

    let input_ids = full[..full.len() - 1].to_vec();
    let targets = full[1..].to_vec();
    let mask = (0..targets.len()).map(|t| t + 1 >= prompt_len).collect();
    Ok(EncodedExample {
        input_ids,
        targets,
        mask,
        prompt: full[..prompt_len].to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    ExactMatch,
    MicroF1,
    Auc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Normal,
    FewShot,
}

/// Fixed adaptation-set size in the few-shot setting.
pub const FEWSHOT_ADAPT: usize = 32;
/// Minimum dataset size for a normal 8:2 split.
pub const NORMAL_MIN: usize = 40;
/// Minimum dataset size for a few-shot split (32 + at least one test row).
pub const FEWSHOT_MIN: usize = FEWSHOT_ADAPT + 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub metric: Metric,
    pub setting: Setting,
    /// For classification-style tasks; also flags which label counts as
    /// positive for AUC (the first entry is negative, the second positive).
    pub label_set: Option<Vec<String>>,
    pub template_id: String,
}

#[derive(Clone, Debug)]
pub struct AdaptationSplit {
    pub adaptation: Vec<InstructionExample>,
    pub test: Vec<InstructionExample>,
}

/// Deterministic split. Normal: shuffled 8:2. Few-shot: exactly
/// [`FEWSHOT_ADAPT`] shuffled examples for adaptation, everything else as
/// test.
pub fn split(dataset: &[InstructionExample], setting: Setting, seed: u64) -> Result<AdaptationSplit> {
    let n = dataset.len();
    let need = match setting {
        Setting::Normal => NORMAL_MIN,
        Setting::FewShot => FEWSHOT_MIN,
    };
    if n < need {
        return Err(Error::DatasetTooSmall { have: n, need });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SeedRng::new(seed).derive("split");
    rng.shuffle(&mut order);
    let k = match setting {
        Setting::Normal => n * 4 / 5,
        Setting::FewShot => FEWSHOT_ADAPT,
    };
    let pick = |ids: &[usize]| ids.iter().map(|&i| dataset[i].clone()).collect();
    Ok(AdaptationSplit {
        adaptation: pick(&order[..k]),
        test: pick(&order[k..]),
    })
}

/// Write one JSON object per line.
pub fn write_jsonl(path: &Path, examples: &[InstructionExample]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut f, ex)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<InstructionExample>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: InstructionExample = serde_json::from_str(&line).map_err(|e| Error::BadRecord {
            id: format!("{}:{}", path.display(), lineno + 1),
            reason: e.to_string(),
        })?;
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}
