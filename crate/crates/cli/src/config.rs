//! One TOML file drives every command. Any leaf can be overridden on
//! the command line with `--set path.to.key=value`; a missing file or
//! section falls back to the desk defaults. The master seed under
//! `[run]` is the only entropy source: per-phase seeds are derived from
//! it by label, so sub-config seed fields in the file are inert.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use samdkif_core::adalora::SkillTrainConfig;
use samdkif_core::cmaes::FewShotConfig;
use samdkif_core::error::{Error, Result};
use samdkif_core::model::ModelConfig;
use samdkif_core::pretrain::PretrainConfig;
use samdkif_core::router::RouterTrainConfig;
use samdkif_core::scalar::Dtype;
use samdkif_core::synth::SkillKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DtypeChoice {
    F32,
    F64,
}

impl DtypeChoice {
    pub fn dtype(self) -> Dtype {
        match self {
            DtypeChoice::F32 => Dtype::F32,
            DtypeChoice::F64 => Dtype::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dtype: DtypeChoice,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            out_dir: PathBuf::from("out"),
            dtype: DtypeChoice::F32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Library order; skill-count sweeps take prefixes of this list.
    pub skills: Vec<String>,
    pub examples_per_skill: usize,
    pub pretrain_lines: usize,
    /// Downstream dataset size per task, split 8:2 for the normal setting.
    pub task_n: usize,
    /// Evaluation uses at most this many test examples per run.
    pub eval_n: usize,
    /// Downstream repetitions; seeds are derived per repetition.
    pub n_seeds: usize,
    /// Library sizes for the skill-count sweep, ascending.
    pub sweep_ks: Vec<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            skills: SkillKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            examples_per_skill: 384,
            pretrain_lines: 4000,
            task_n: 160,
            eval_n: 64,
            n_seeds: 5,
            sweep_ks: vec![1, 2, 4, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub skill_train: SkillTrainConfig,
    pub router: RouterTrainConfig,
    pub fewshot: FewShotConfig,
    pub data: DataSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        // The desk presets are sized for unit tests; full runs need the
        // longer schedules below to converge, with pruning finishing
        // early enough for the survivors to retrain.
        let skill_train = SkillTrainConfig {
            total_steps: 4000,
            t0: 800,
            t1: 2400,
            dropout_p: 0.0,
            ..SkillTrainConfig::desk_default()
        };
        let router = RouterTrainConfig {
            steps: 150,
            full_batch_limit: 32,
            batch_size: 32,
            ..RouterTrainConfig::desk_default()
        };
        let fewshot = FewShotConfig {
            max_evals: 600,
            ..FewShotConfig::desk_default()
        };
        RunConfig {
            run: RunSection::default(),
            model: ModelConfig::desk_default(),
            pretrain: PretrainConfig::desk_default(),
            skill_train,
            router,
            fewshot,
            data: DataSection::default(),
        }
    }
}

fn config_err(reason: impl Into<String>) -> Error {
    Error::ConfigValidation {
        path: String::new(),
        reason: reason.into(),
    }
}

impl RunConfig {
    /// Load from TOML (or defaults when `path` is None), apply `--set`
    /// overrides in order, then validate. The file and the overrides are
    /// deep-merged over the defaults, so partial sections are fine.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut value =
            toml::Value::try_from(RunConfig::default()).map_err(|e| config_err(e.to_string()))?;
        if let Some(p) = path {
            let text = fs::read_to_string(p)?;
            let file: toml::Value =
                toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            deep_merge(&mut value, file);
        }
        for spec in overrides {
            apply_override(&mut value, spec)?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, reason: String| {
            Err(Error::ConfigValidation {
                path: path.into(),
                reason,
            })
        };
        self.model.validate("model.")?;
        self.pretrain.validate(&self.model)?;
        self.skill_train.validate(&self.model)?;
        self.router.validate()?;
        if self.data.skills.is_empty() {
            return fail("data.skills", "empty skill list".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &self.data.skills {
            SkillKind::from_name(name)
                .map_err(|_| config_err(format!("data.skills: unknown skill `{name}`")))?;
            if !seen.insert(name) {
                return fail("data.skills", format!("duplicate skill `{name}`"));
            }
        }
        for (field, v) in [
            ("data.examples_per_skill", self.data.examples_per_skill),
            ("data.pretrain_lines", self.data.pretrain_lines),
            ("data.eval_n", self.data.eval_n),
            ("data.n_seeds", self.data.n_seeds),
        ] {
            if v == 0 {
                return fail(field, "must be at least 1".into());
            }
        }
        if self.data.task_n < samdkif_core::data::NORMAL_MIN {
            return fail(
                "data.task_n",
                format!(
                    "{} below the split minimum {}",
                    self.data.task_n,
                    samdkif_core::data::NORMAL_MIN
                ),
            );
        }
        if self.data.sweep_ks.is_empty() {
            return fail("data.sweep_ks", "empty sweep".into());
        }
        if self.data.sweep_ks.windows(2).any(|w| w[0] >= w[1]) {
            return fail(
                "data.sweep_ks",
                format!("{:?} not strictly ascending", self.data.sweep_ks),
            );
        }
        if *self.data.sweep_ks.last().unwrap() > self.data.skills.len() {
            return fail(
                "data.sweep_ks",
                format!(
                    "largest sweep size {} exceeds the {}-skill library",
                    self.data.sweep_ks.last().unwrap(),
                    self.data.skills.len()
                ),
            );
        }
        Ok(())
    }

    /// Canonical content hash of the effective configuration.
    pub fn sha256(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Deterministic per-phase seed derived from the master seed.
    pub fn derived_seed(&self, label: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.run.seed.to_le_bytes());
        h.update(label.as_bytes());
        let digest = h.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }

    pub fn skill_kinds(&self) -> Vec<SkillKind> {
        self.data
            .skills
            .iter()
            .map(|n| SkillKind::from_name(n).expect("validated"))
            .collect()
    }
}

/// Tables merge key by key; scalars and arrays replace wholesale.
fn deep_merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (dotted, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{spec}` is not key=value")))?;
    let dotted = dotted.trim();
    if dotted.is_empty() {
        return Err(config_err(format!("override `{spec}` has an empty key")));
    }
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("x = {raw}"))
        .map(|mut t| t.remove("x").expect("just inserted"))
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = dotted.split('.').collect();
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| config_err(format!("`{dotted}` crosses a non-table value")))?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| config_err(format!("`{dotted}` crosses a non-table value")))?;
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_replace_leaves_and_reject_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "[run]\nseed = 3\n").unwrap();
        let cfg = RunConfig::load(
            Some(&p),
            &[
                "run.seed=9".to_string(),
                "model.n_layers=1".to_string(),
                "run.out_dir=\"elsewhere\"".to_string(),
                "data.skills=[\"copy\",\"reverse\"]".to_string(),
                "data.sweep_ks=[1,2]".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.run.seed, 9);
        assert_eq!(cfg.model.n_layers, 1);
        assert_eq!(cfg.run.out_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.data.skills, vec!["copy", "reverse"]);
        assert!(matches!(
            RunConfig::load(Some(&p), &["no-equals-sign".to_string()]),
            Err(Error::ConfigValidation { .. })
        ));
    }

    #[test]
    fn validation_pins_the_field_path() {
        let err = RunConfig::load(None, &["data.sweep_ks=[4,2]".to_string()]).unwrap_err();
        match err {
            Error::ConfigValidation { path, .. } => assert_eq!(path, "data.sweep_ks"),
            other => panic!("wrong error: {other:?}"),
        }
        let err = RunConfig::load(None, &["data.skills=[\"nope\"]".to_string()]).unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
    }

    #[test]
    fn config_hash_tracks_content_not_formatting() {
        let a = RunConfig::load(None, &["run.seed=5".to_string()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "\n\n[run]\n\nseed    = 5\n").unwrap();
        let b = RunConfig::load(Some(&p), &[]).unwrap();
        assert_eq!(a.sha256(), b.sha256());
        let c = RunConfig::load(None, &["run.seed=6".to_string()]).unwrap();
        assert_ne!(a.sha256(), c.sha256());
    }

    #[test]
    fn derived_seeds_differ_by_label_and_master() {
        let a = RunConfig::load(None, &["run.seed=5".to_string()]).unwrap();
        let b = RunConfig::load(None, &["run.seed=6".to_string()]).unwrap();
        assert_ne!(a.derived_seed("pretrain"), a.derived_seed("skill:copy"));
        assert_ne!(a.derived_seed("pretrain"), b.derived_seed("pretrain"));
        assert_eq!(a.derived_seed("pretrain"), a.derived_seed("pretrain"));
    }

    #[test]
    fn unknown_toml_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "[run]\nseeed = 3\n").unwrap();
        assert!(matches!(
            RunConfig::load(Some(&p), &[]),
            Err(Error::ConfigValidation { .. })
        ));
    }
}
