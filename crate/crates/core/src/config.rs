//! Experiment configuration: one TOML file, schema-checked, with dotted
//! `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSpec;
use crate::diffusion::{DenoiserSpec, NoiseSchedule, RingSpec, TrainConfig};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::hash::fnv1a;
use crate::trajectory::TrajectorySpec;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: RingSpec,
    pub schedule: NoiseSchedule,
    pub model: DenoiserSpec,
    pub train: TrainConfig,
    pub trajectories: TrajectorySpec,
    pub adapter: AdapterSpec,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.distill.validate()?;
        self.eval.validate()?;
        let [lo, hi] = self.trajectories.omega_range;
        if !(lo.is_finite() && hi.is_finite() && 1.0 <= lo && lo <= hi) {
            return Err(Error::Config(format!("trajectory omega range [{lo}, {hi}]")));
        }
        if self.model.num_classes != self.dataset.classes || self.model.data_dim != 2 {
            return Err(Error::Config(format!(
                "model expects {}-d data with {} classes; the ring dataset is 2-d with {}",
                self.model.data_dim, self.model.num_classes, self.dataset.classes
            )));
        }
        Ok(())
    }

    /// Canonical TOML rendering; the hash is taken over these bytes.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> u64 {
        fnv1a(self.canonical().as_bytes())
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, else as a string.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key {path:?}")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?}: {k} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::Architecture;
    use crate::distill::LossKind;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml("", &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn canonical_form_round_trips() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&c.canonical(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let o = [
            "adapter.architecture=cross_attention".to_string(),
            "distill.steps = 7".to_string(),
            "distill.loss=l1".to_string(),
            "trajectories.omega_range=[2.0, 3.0]".to_string(),
            "seed=9".to_string(),
        ];
        let c = ExperimentConfig::from_toml("[distill]\nsteps = 100\n", &o).unwrap();
        assert_eq!(c.adapter.architecture, Architecture::CrossAttention);
        assert_eq!(c.distill.steps, 7);
        assert_eq!(c.distill.loss, LossKind::L1);
        assert_eq!(c.trajectories.omega_range, [2.0, 3.0]);
        assert_eq!(c.seed, 9);
        assert_ne!(c.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn rejects_unknown_and_invalid_keys() {
        for (text, o) in [
            ("bogus = 1", vec![]),
            ("[distill]\nstep = 1", vec![]),
            ("", vec!["adapter.architecture=mlp".to_string()]),
            ("", vec!["distill.peak_lr=-1".to_string()]),
            ("", vec!["noequals".to_string()]),
            ("", vec!["seed.x=1".to_string()]),
            ("[distill]\nseed = 3", vec![]),
            ("", vec!["trajectories.omega_range=[0.5, 2.0]".to_string()]),
            ("seed = ", vec![]),
        ] {
            assert!(matches!(ExperimentConfig::from_toml(text, &o), Err(Error::Config(_))), "{text} {o:?}");
        }
    }

    #[test]
    fn missing_file_names_the_path() {
        let e = ExperimentConfig::load(Path::new("/nonexistent/exp.toml"), &[]).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/exp.toml"));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let default = ExperimentConfig::load(&dir.join("default.toml"), &[]).unwrap();
        assert_eq!(default, ExperimentConfig::default());
        ExperimentConfig::load(&dir.join("smoke.toml"), &[]).unwrap();
    }
}
