//! Run configuration: a TOML file whose sections mirror the scenario and
//! training settings, with `section.key=value` overrides from the command
//! line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::ScenarioConfig;
use crate::hgnn::TrainConfig;
use crate::sysmodel::CaseMode;

use super::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Method {
    Gnn,
    Dnn,
    AoCase1,
    AoCase2,
    AoCase3,
    RandomPhase,
    BruteForce,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gnn => "gnn",
            Self::Dnn => "dnn",
            Self::AoCase1 => "ao_case1",
            Self::AoCase2 => "ao_case2",
            Self::AoCase3 => "ao_case3",
            Self::RandomPhase => "random_phase",
            Self::BruteForce => "brute_force",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Self::Gnn | Self::Dnn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    PMaxDbm,
    /// Elements per RIS; each value must be a perfect square.
    M,
    NT,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::PMaxDbm => "p_max_dbm",
            Self::M => "m",
            Self::NT => "n_t",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Required by every experiment command.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    /// Label association used for pre-training and the penalty.
    pub case: CaseMode,
    pub methods: Vec<Method>,
    /// Cap on validation samples used by `eval`, `sweep` and `oracle`.
    pub eval_samples: usize,
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
    pub sweep: Option<SweepConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out_dir: PathBuf::from("runs"),
            n_train: 10_000,
            n_val: 1_000,
            case: CaseMode::Nearest,
            methods: vec![
                Method::Gnn,
                Method::AoCase1,
                Method::AoCase2,
                Method::AoCase3,
                Method::RandomPhase,
                Method::BruteForce,
            ],
            eval_samples: 1_000,
            scenario: ScenarioConfig::default(),
            train: TrainConfig::default(),
            sweep: None,
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key {key:?}")));
    }
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        let entry = node.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// File values, then overrides, then an explicit seed.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| CliError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if seed.is_some() {
            cfg.seed = seed;
        }
        if let Some(s) = cfg.seed {
            cfg.train.seed = s;
        }
        cfg.scenario.validate()?;
        cfg.train.validate()?;
        if let Some(sw) = &cfg.sweep {
            if sw.values.is_empty() {
                return Err(CliError::Config("sweep.values is empty".into()));
            }
        }
        Ok(cfg)
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Config("a seed is required: pass --seed or set seed in the config".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_take_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 3\nn_train = 50\n[train]\nepochs = 7\n[scenario]\nk = 3\n").unwrap();
        let sets = vec!["train.epochs=9".to_string(), "scenario.noise_power_dbm=-80.0".to_string(), "case=\"farthest\"".into()];
        let c = RunConfig::load(Some(&p), &sets, None).unwrap();
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.train.seed, 3);
        assert_eq!(c.n_train, 50);
        assert_eq!(c.train.epochs, 9);
        assert_eq!(c.scenario.k, 3);
        assert_eq!(c.case, CaseMode::Farthest);
        let c = RunConfig::load(Some(&p), &[], Some(11)).unwrap();
        assert_eq!(c.train.seed, 11);
    }

    #[test]
    fn rejects_unknown_keys_and_missing_seed() {
        assert!(RunConfig::load(None, &["bogus=1".into()], None).is_err());
        assert!(RunConfig::load(None, &["train.nope=1".into()], None).is_err());
        assert!(RunConfig::load(None, &[], None).unwrap().require_seed().is_err());
    }

    #[test]
    fn sweep_section_parses() {
        let c = RunConfig::load(None, &["sweep.axis=\"m\"".into(), "sweep.values=[9, 16, 25]".into()], Some(1)).unwrap();
        let sw = c.sweep.unwrap();
        assert_eq!(sw.axis, SweepAxis::M);
        assert_eq!(sw.values, vec![9.0, 16.0, 25.0]);
    }
}
