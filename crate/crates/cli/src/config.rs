//! Run configuration: a training configuration plus run-level settings,
//! resolved from a preset, a flat JSON file with dotted keys and
//! `key=value` overrides.

use std::path::{Path, PathBuf};

use sacflow::envs::EnvKind;
use sacflow::sac::{Preset, TrainConfig};
use sacflow::velocity::VelocityKind;
use sacflow::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Everything a run needs; serialized as `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    /// Run directory; derived from preset, env, kind and seed when unset.
    pub out: Option<PathBuf>,
    /// Save a checkpoint and a replay snapshot every this many iterations;
    /// 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Demonstration file replacing generated demonstrations.
    pub demos_file: Option<PathBuf>,
    /// Updates of `pretrain-fm`.
    pub fm_steps: u64,
    #[serde(flatten)]
    pub train: TrainConfig,
}

/// Where overrides come from, for error messages.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    entries: Vec<(String, Value)>,
}

impl Overrides {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds every key of a JSON object; nested objects contribute dotted keys.
    pub fn push_file(&mut self, path: &Path) -> Result<()> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        let Value::Object(map) = value else {
            return Err(Error::config(
                "--config",
                format!("{} must hold a JSON object", path.display()),
            ));
        };
        let mut flat = Map::new();
        flatten("", map, &mut flat);
        self.entries.extend(flat);
        Ok(())
    }

    /// Adds `key=value`; the value is read as JSON and otherwise kept as a string.
    pub fn push_assignment(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "expected key=value"))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::config(assignment, "empty key"));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.push(key, value);
        Ok(())
    }

    pub fn push(&mut self, key: &str, value: Value) {
        self.entries.push((key.to_string(), value));
    }

    fn last_str(&self, key: &str) -> Result<Option<String>> {
        match self.entries.iter().rev().find(|(k, _)| k == key) {
            None => Ok(None),
            Some((_, Value::String(s))) => Ok(Some(s.clone())),
            Some((_, v)) => Err(Error::config(key, format!("expected a string, got {v}"))),
        }
    }

    fn has(&self, key: &str) -> bool {
        self.entries.iter().any(|(k, _)| k == key)
    }
}

/// Defaults of one subcommand before overrides.
#[derive(Clone, Copy, Debug)]
pub struct Defaults {
    pub preset: Preset,
    pub env: EnvKind,
    pub kind: VelocityKind,
}

impl RunConfig {
    pub fn defaults(preset: Preset, env: EnvKind, kind: VelocityKind) -> Self {
        Self {
            preset,
            out: None,
            checkpoint_every: 0,
            demos_file: None,
            fm_steps: 5000,
            train: TrainConfig::preset(preset, env, kind),
        }
    }

    /// Applies overrides on top of the defaults of the preset, environment
    /// and velocity kind they name. Unknown keys and ill-typed values are
    /// config errors naming the key.
    pub fn resolve(base: Defaults, overrides: &Overrides) -> Result<Self> {
        let preset = match overrides.last_str("preset")? {
            Some(p) => p.parse()?,
            None => base.preset,
        };
        let env = match overrides.last_str("env")? {
            Some(e) => e.parse().map_err(|e: Error| Error::config("env", e.to_string()))?,
            None => base.env,
        };
        let kind = match overrides.last_str("velocity.kind")? {
            Some(k) => k
                .parse()
                .map_err(|e: Error| Error::config("velocity.kind", e.to_string()))?,
            None => base.kind,
        };
        let defaults = Self::defaults(preset, env, kind).to_flat();
        let mut flat = defaults.clone();
        for (key, value) in &overrides.entries {
            match flat.get_mut(key) {
                Some(slot) => *slot = value.clone(),
                None => return Err(Error::config(key, "unknown key")),
            }
        }
        if preset == Preset::O2o && !overrides.has("steps") {
            let l = |k: &str| flat.get(k).and_then(Value::as_u64);
            if let (Some(off), Some(on)) = (l("l_off"), l("l_on")) {
                flat.insert("steps".into(), Value::from(off + on));
            }
        }
        let mut config: Self = match serde_json::from_value(unflatten(&flat)) {
            Ok(c) => c,
            Err(e) => return Err(blame(&defaults, overrides, e)),
        };
        config.train.sync_dims();
        Ok(config)
    }

    /// Dotted-key view of the configuration.
    pub fn to_flat(&self) -> Map<String, Value> {
        let Value::Object(map) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!("config serializes to an object")
        };
        let mut flat = Map::new();
        flatten("", map, &mut flat);
        flat
    }

    /// The run directory, derived when not configured.
    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            PathBuf::from("runs").join(format!(
                "{}-{}-{}-seed{}",
                self.preset.as_str(),
                self.train.env.as_str(),
                self.train.velocity.kind.as_str(),
                self.train.seed
            ))
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
    }
}

fn flatten(prefix: &str, map: Map<String, Value>, out: &mut Map<String, Value>) {
    for (k, v) in map {
        let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
        match v {
            Value::Object(inner) => flatten(&key, inner, out),
            leaf => {
                out.insert(key, leaf);
            }
        }
    }
}

fn unflatten(flat: &Map<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, value) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), value.clone());
            } else {
                node = node
                    .entry(part)
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("dotted keys never collide with leaves");
            }
        }
    }
    Value::Object(root)
}

/// Finds the override whose value alone fails to deserialize.
fn blame(defaults: &Map<String, Value>, overrides: &Overrides, fallback: serde_json::Error) -> Error {
    for (key, value) in overrides.entries.iter().rev() {
        let mut flat = defaults.clone();
        flat.insert(key.clone(), value.clone());
        if let Err(e) = serde_json::from_value::<RunConfig>(unflatten(&flat)) {
            return Error::config(key, e.to_string());
        }
    }
    Error::config("config", fallback.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scratch() -> Defaults {
        Defaults {
            preset: Preset::Scratch,
            env: EnvKind::PointMass,
            kind: VelocityKind::FlowG,
        }
    }

    fn with(sets: &[&str]) -> Result<RunConfig> {
        let mut o = Overrides::new();
        for s in sets {
            o.push_assignment(s)?;
        }
        RunConfig::resolve(scratch(), &o)
    }

    #[test]
    fn defaults_round_trip_through_dotted_keys() {
        let c = RunConfig::defaults(Preset::O2o, EnvKind::SparseReach, VelocityKind::FlowT);
        let flat = c.to_flat();
        assert!(flat.contains_key("velocity.noise.mode"));
        assert!(flat.contains_key("velocity.attention.model_dim"));
        let back: RunConfig = serde_json::from_value(unflatten(&flat)).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_apply_in_order() {
        let c = with(&["steps=10", "steps=20", "velocity.kind=flow_t", "critic_hidden=[8,8]"]).unwrap();
        assert_eq!(c.train.steps, 20);
        assert_eq!(c.train.velocity.kind, VelocityKind::FlowT);
        assert_eq!(c.train.critic_hidden, vec![8, 8]);
    }

    #[test]
    fn env_switch_rebuilds_dimensions() {
        let c = with(&["env=bandit"]).unwrap();
        assert_eq!((c.train.velocity.state_dim, c.train.velocity.action_dim), (1, 1));
        c.train.validate().unwrap();
    }

    #[test]
    fn errors_name_the_key() {
        let e = with(&["no_such_key=1"]).unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key == "no_such_key"), "{e}");
        let e = with(&["steps=10", "batch=lots"]).unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key == "batch"), "{e}");
        let e = with(&["env=mars"]).unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key == "env"), "{e}");
        let e = with(&["steps"]).unwrap_err();
        assert!(matches!(e, Error::Config { .. }));
    }

    #[test]
    fn o2o_steps_follow_phase_lengths() {
        let mut o = Overrides::new();
        o.push_assignment("preset=o2o").unwrap();
        o.push_assignment("env=sparse_reach").unwrap();
        o.push_assignment("l_off=30").unwrap();
        o.push_assignment("l_on=20").unwrap();
        let c = RunConfig::resolve(scratch(), &o).unwrap();
        assert_eq!(c.train.steps, 50);
        assert_eq!((c.train.beta_offline, c.train.beta_online), (10_000.0, 1_000.0));
        c.train.validate_o2o().unwrap();
    }

    #[test]
    fn nested_file_objects_become_dotted_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"velocity": {"noise.fixed_sigma": 0.2}, "seed": 4}"#).unwrap();
        let mut o = Overrides::new();
        o.push_file(&path).unwrap();
        let c = RunConfig::resolve(scratch(), &o).unwrap();
        assert_eq!(c.train.velocity.noise.fixed_sigma, 0.2);
        assert_eq!(c.train.seed, 4);
    }
}
