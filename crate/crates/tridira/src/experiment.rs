//! Configuration files, fingerprints and dataset loading.
//!
//! A configuration is a TOML file or the name of a bundled preset written as
//! `preset:NAME`. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use tridira_core::config::{DatasetConfig, ExperimentConfig, Preset, ProbeConfig};
use tridira_core::data::{generate_synthetic, DataSplits, DatasetSchema, SyntheticDataset, UtteranceRecord};

use crate::error::{Error, IoContext, Result};
use crate::manifest::read_manifest;

pub const PRESET_PREFIX: &str = "preset:";

/// A validated configuration and the directory its relative paths refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

pub fn parse_config(text: &str, path: &Path) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config { path: path.into(), reason: e.to_string() })?;
    config.validate()?;
    Ok(config)
}

pub fn render_config(config: &ExperimentConfig) -> String {
    toml::to_string(config).expect("configuration serializes to TOML")
}

/// Reads `source` (a path or `preset:NAME`) and validates it.
pub fn load_config(source: &str) -> Result<LoadedConfig> {
    if let Some(name) = source.strip_prefix(PRESET_PREFIX) {
        let Some(preset) = Preset::from_name(name) else {
            let known: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
            return Err(Error::Config { path: source.into(), reason: format!("unknown preset; choose one of {known:?}") });
        };
        let config = preset.config();
        config.validate()?;
        return Ok(LoadedConfig { config, base_dir: PathBuf::from(".") });
    }
    let path = Path::new(source);
    let text = fs::read_to_string(path).at(path)?;
    let config = parse_config(&text, path)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(LoadedConfig { config, base_dir })
}

/// SHA-256 over the settings that determine a trained model: dataset,
/// architecture, losses and schedule. The second-stage seed list, probe
/// settings, sweep grid and output directory are excluded, so a checkpoint
/// stays usable when only those change.
pub fn fingerprint(config: &ExperimentConfig) -> String {
    let mut c = config.clone();
    c.output_dir.clear();
    c.probe = ProbeConfig::default();
    c.sweep = None;
    c.train.seeds.clear();
    let canonical = serde_json::to_string(&c).expect("configuration serializes to JSON");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Records of every split plus the schema they satisfy.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub schema: DatasetSchema,
    pub train: Vec<UtteranceRecord>,
    pub valid: Vec<UtteranceRecord>,
    pub test: Option<Vec<UtteranceRecord>>,
    /// The generator output when the dataset is synthetic.
    pub synthetic: Option<SyntheticDataset>,
}

impl Dataset {
    pub fn test(&self) -> Result<&[UtteranceRecord]> {
        match &self.test {
            Some(t) if !t.is_empty() => Ok(t),
            _ => Err(tridira_core::Error::Validation("the dataset has no test split".into()).into()),
        }
    }
}

/// Checks that every manifest the configuration names exists, without
/// reading feature files.
pub fn check_dataset_paths(loaded: &LoadedConfig) -> Result<()> {
    if let DatasetConfig::Manifest { train, valid, test } = &loaded.config.dataset {
        for p in [Some(train), Some(valid), test.as_ref()].into_iter().flatten() {
            let full = loaded.base_dir.join(p);
            if !full.is_file() {
                return Err(Error::Config { path: full, reason: "manifest not found".into() });
            }
        }
    }
    Ok(())
}

pub fn load_dataset(loaded: &LoadedConfig) -> Result<Dataset> {
    match &loaded.config.dataset {
        DatasetConfig::Synthetic { spec, splits } => {
            let generated = generate_synthetic(spec)?;
            let schema = spec.schema(generated.label_range());
            let s = DataSplits::from_sizes(generated.records.clone(), *splits)?;
            let test = (!s.test.is_empty()).then_some(s.test);
            Ok(Dataset { schema, train: s.train, valid: s.valid, test, synthetic: Some(generated) })
        }
        DatasetConfig::Manifest { train, valid, test } => {
            let read = |p: &String| read_manifest(&loaded.base_dir.join(p));
            let train_m = read(train)?;
            let valid_m = read(valid)?;
            let test_m = test.as_ref().map(read).transpose()?;
            for (name, m) in [("valid", Some(&valid_m)), ("test", test_m.as_ref())] {
                if let Some(m) = m {
                    if m.schema != train_m.schema {
                        return Err(tridira_core::Error::Schema(format!("{name} manifest header differs from the train manifest")).into());
                    }
                }
            }
            Ok(Dataset {
                schema: train_m.schema.clone(),
                train: train_m.load_records()?,
                valid: valid_m.load_records()?,
                test: test_m.map(|m| m.load_records()).transpose()?,
                synthetic: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for p in Preset::ALL {
            let c = p.config();
            assert_eq!(parse_config(&render_config(&c), Path::new("x")).unwrap(), c, "{}", p.name());
        }
    }

    #[test]
    fn unknown_keys_are_errors() {
        let mut text = render_config(&Preset::Synthetic.config());
        text = text.replace("[train]\n", "[train]\nwarmup = 3\n");
        assert!(matches!(parse_config(&text, Path::new("x")), Err(Error::Config { .. })));
    }

    #[test]
    fn fingerprint_ignores_output_and_seeds() {
        let a = Preset::Synthetic.config();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.train.seeds = vec![9];
        assert_eq!(fingerprint(&a), fingerprint(&b));
        b.model.losses.weights.sim = 0.3;
        assert_ne!(fingerprint(&a), fingerprint(&b));
        assert_eq!(fingerprint(&a).len(), 64);
    }
}
