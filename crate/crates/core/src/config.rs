//! Run configuration: one TOML file with sections `data`, `temporal`,
//! `augmentation`, `loss`, `model`, `pretrain` and `downstream`, plus a
//! mandatory top-level `seed`.
//!
//! Scalars can be overridden from the environment with
//! `EXPRCL_<SECTION>__<KEY>` (double underscore between path segments),
//! e.g. `EXPRCL_LOSS__TEMPERATURE=0.1` or `EXPRCL_SEED=3`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugConfig;
use crate::contrastive::LossConfig;
use crate::downstream::DownstreamConfig;
use crate::error::{Error, Result};
use crate::model::{EncoderSpec, MIN_INPUT};
use crate::pretrain::{PretrainConfig, PretrainSetup};
use crate::synth::CorpusSpec;
use crate::temporal::TemporalConfig;

pub const ENV_PREFIX: &str = "EXPRCL_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV or JSONL manifest; when absent the synthetic corpus is generated
    /// in memory from `synthetic`.
    pub manifest: Option<PathBuf>,
    /// Label sidecar (JSONL) or label CSV.
    pub labels: Option<PathBuf>,
    /// Base directory for relative image paths; defaults to the manifest's
    /// directory.
    pub image_root: Option<PathBuf>,
    pub synthetic: CorpusSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            labels: None,
            image_root: None,
            synthetic: CorpusSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub temporal: TemporalConfig,
    #[serde(default)]
    pub augmentation: AugConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub model: EncoderSpec,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub downstream: DownstreamConfig,
}

impl RunConfig {
    /// A config with every default and the given seed.
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            seed,
            data: DataConfig::default(),
            temporal: TemporalConfig::default(),
            augmentation: AugConfig::default(),
            loss: LossConfig::default(),
            model: EncoderSpec::default(),
            pretrain: PretrainConfig::default(),
            downstream: DownstreamConfig::default(),
        }
    }

    /// Section checks plus the cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        self.temporal.validate()?;
        self.augmentation.validate()?;
        self.loss.validate()?;
        self.model.validate("model")?;
        self.pretrain.validate()?;
        self.downstream.validate()?;
        self.loss.validate_for_batch(self.pretrain.batch_size)?;
        if self.augmentation.crop < MIN_INPUT {
            return Err(Error::config(
                "augmentation.crop",
                format!("encoder input must be at least {MIN_INPUT}px, got {}", self.augmentation.crop),
            ));
        }
        if self.data.synthetic.n_identities == 0 || self.data.synthetic.videos_per_id == 0 {
            return Err(Error::config("data.synthetic", "identity and video counts must be positive"));
        }
        Ok(())
    }

    /// SHA-256 (hex, 16 chars) of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(v.to_string().as_bytes());
        hex::encode(h.finalize())[..16].to_string()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn pretrain_setup(&self) -> PretrainSetup {
        PretrainSetup {
            pretrain: self.pretrain.clone(),
            temporal: self.temporal,
            aug: self.augmentation.clone(),
            loss: self.loss.clone(),
            encoder: self.model.clone(),
            seed: self.seed,
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.data.manifest);
        fix(&mut self.data.labels);
        fix(&mut self.data.image_root);
        fix(&mut self.model.weights_path);
    }
}

/// Parses a config file, applying `EXPRCL_*` overrides from the process
/// environment. Relative paths resolve against the file's directory.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config_str(&text, std::env::vars(), Some(&base))
}

/// Parses config text with explicit override variables.
pub fn parse_config_str(
    text: &str,
    vars: impl IntoIterator<Item = (String, String)>,
    base_dir: Option<&Path>,
) -> Result<RunConfig> {
    let mut value: toml::Value = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
    apply_env_overrides(&mut value, vars)?;
    let mut cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config {
        key: key_of(&e),
        message: e.message().to_string(),
    })?;
    if let Some(b) = base_dir {
        cfg.resolve_paths(b);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn toml_error(text: &str, e: &toml::de::Error) -> Error {
    let line = e
        .span()
        .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
        .unwrap_or(0);
    Error::Parse {
        line,
        message: e.message().to_string(),
    }
}

fn key_of(e: &toml::de::Error) -> String {
    let msg = e.message();
    if msg.contains("missing field `seed`") {
        return "seed".into();
    }
    // serde reports the offending field name in backticks.
    msg.split('`').nth(1).unwrap_or("<root>").to_string()
}

/// Applies `EXPRCL_A__B=value` variables to the parsed table. Values are
/// read as TOML scalars, falling back to plain strings.
pub fn apply_env_overrides(
    root: &mut toml::Value,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<Vec<String>> {
    let mut applied = Vec::new();
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (k, raw) in vars {
        let path: Vec<String> = k[ENV_PREFIX.len()..]
            .split("__")
            .map(str::to_ascii_lowercase)
            .collect();
        if path.iter().any(String::is_empty) {
            return Err(Error::config(k, "malformed override variable"));
        }
        let val = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.clone()));
        let mut node = &mut *root;
        for seg in &path[..path.len() - 1] {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::config(path.join("."), "override crosses a scalar"))?;
            node = table
                .entry(seg.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        node.as_table_mut()
            .ok_or_else(|| Error::config(path.join("."), "override crosses a scalar"))?
            .insert(path[path.len() - 1].clone(), val);
        applied.push(path.join("."));
    }
    Ok(applied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::temporal::PositivePdf;

    fn parse(text: &str) -> Result<RunConfig> {
        parse_config_str(text, Vec::new(), None)
    }

    #[test]
    fn seed_only_file_gives_defaults() {
        let c = parse("seed = 1\n").unwrap();
        assert_eq!(c.loss.temperature, 0.07);
        assert_eq!(c.loss.l2_weight, 0.5);
        assert_eq!(c.temporal.t1_seconds, 1.0);
        assert_eq!(c.temporal.t2_seconds, 3.0);
        assert_eq!(c.temporal.positive_pdf, PositivePdf::LinearDecreasing);
        assert_eq!(c.augmentation.face.faceswap_probability, 0.5);
        assert_eq!(c.pretrain.lr, 3e-4);
        assert_eq!(c.downstream.weight_decay, 5e-4);
    }

    #[test]
    fn seed_is_mandatory() {
        match parse("") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "seed"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn errors_name_the_key() {
        match parse("seed = 0\n[temporal]\nt1_seconds = 1.0\nt2_seconds = 0.5\n") {
            Err(Error::Config { key, .. }) => assert!(key.starts_with("temporal."), "{key}"),
            other => panic!("{other:?}"),
        }
        match parse("seed = 0\n[loss]\ntemprature = 0.1\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "temprature"),
            other => panic!("{other:?}"),
        }
        match parse("seed = 0\n[loss]\nn_fn = 2\n[pretrain]\nbatch_size = 8\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "loss.n_fn"),
            other => panic!("{other:?}"),
        }
        match parse("seed = 0\n[augmentation]\nresize = 64\ncrop = 96\n") {
            Err(Error::Config { key, .. }) => assert!(key.starts_with("augmentation."), "{key}"),
            other => panic!("{other:?}"),
        }
        assert!(parse("seed = \"x\"\n").unwrap_err().is_validation());
        assert!(matches!(parse("seed = \n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let text = "seed = 4\n[loss]\ntemperature = 0.1\n";
        let a = parse(text).unwrap();
        let b = parse(text).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = parse("seed = 5\n[loss]\ntemperature = 0.1\n").unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
        let back = parse(&a.to_toml()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.fingerprint(), a.fingerprint());
    }

    #[test]
    fn environment_overrides() {
        let vars = vec![
            ("EXPRCL_LOSS__TEMPERATURE".to_string(), "0.2".to_string()),
            ("EXPRCL_SEED".to_string(), "9".to_string()),
            ("EXPRCL_PRETRAIN__STRATEGIES__MASKFN".to_string(), "false".to_string()),
            ("EXPRCL_MODEL__BACKBONE".to_string(), "RESIDUAL18".to_string()),
            ("HOME".to_string(), "/x".to_string()),
        ];
        let c = parse_config_str("seed = 1\n", vars, None).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.loss.temperature, 0.2);
        assert!(!c.pretrain.strategies.maskfn);
        assert_eq!(c.model.backbone, crate::model::Backbone::Residual18);
        let bad = vec![("EXPRCL_LOSS__NOPE".to_string(), "1".to_string())];
        assert!(parse_config_str("seed = 1\n", bad, None).is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 0\n[data]\nmanifest = \"m.csv\"\n").unwrap();
        let c = parse_config(&p).unwrap();
        assert_eq!(c.data.manifest.unwrap(), dir.path().join("m.csv"));
    }
}
