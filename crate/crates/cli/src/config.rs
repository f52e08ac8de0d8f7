//! The resolved run configuration and dotted-path overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use hota_core::opinion::OpinionConfig;
use hota_core::potentials::PRESETS;
use hota_core::{NetArch, Scenario, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Samples per evaluation rollout.
    pub n: usize,
    pub seeds: Vec<u64>,
    /// Control steps for evaluation; `train.steps` when unset.
    pub steps: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n: hota_core::eval::DEFAULT_EVAL_N,
            seeds: vec![0, 1, 2, 3, 4],
            steps: None,
        }
    }
}

/// Everything a run depends on; its hash identifies the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opinion: Option<OpinionConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub float32: bool,
}

impl RunConfig {
    pub fn from_problem(scenario: Option<Scenario>, opinion: Option<OpinionConfig>) -> Self {
        RunConfig {
            scenario,
            opinion,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            float32: false,
        }
    }

    pub fn dim(&self) -> usize {
        match (&self.scenario, &self.opinion) {
            (Some(s), _) => s.dim,
            (None, Some(o)) => o.dim,
            (None, None) => 0,
        }
    }

    pub fn arch(&self) -> Result<NetArch> {
        Ok(self.train.arch(self.dim())?)
    }

    pub fn eval_steps(&self) -> usize {
        self.eval.steps.unwrap_or(self.train.steps)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.scenario, &self.opinion) {
            (Some(s), None) => s.validate()?,
            (None, Some(o)) => o.validate()?,
            _ => bail!("config needs exactly one of [scenario] or [opinion]"),
        }
        self.train.validate()?;
        self.arch()?;
        if self.eval.n == 0 || self.eval.n > hota_core::eval::EXACT_OT_MAX_N {
            bail!("eval.n must lie in 1..={}", hota_core::eval::EXACT_OT_MAX_N);
        }
        if self.eval.seeds.is_empty() {
            bail!("eval.seeds must not be empty");
        }
        if self.eval.steps == Some(0) {
            bail!("eval.steps must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// SHA-256 of the canonical JSON form (object keys sorted).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&serde_json::to_value(self).expect("config serializes"))
            .expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Applies `key=value` with a dotted key; the value is parsed as TOML,
    /// falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{assignment}` is not key=value"))?;
        let value = parse_value(raw.trim());
        let mut tree = serde_json::to_value(&*self)?;
        set_path(&mut tree, key.trim(), value)?;
        *self = serde_json::from_value(tree).with_context(|| format!("override `{assignment}`"))?;
        Ok(())
    }
}

fn parse_value(raw: &str) -> Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("key v")).expect("toml to json"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let slot = match node {
            Value::Object(map) => map.get_mut(*part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|k| items.get_mut(k)),
            _ => None,
        };
        node = slot.ok_or_else(|| anyhow!("unknown config key `{}`", parts[..=i].join(".")))?;
    }
    *node = value;
    Ok(())
}

/// Resolves `--scenario`: a TOML file, `opinion`, or a preset name
/// optionally suffixed with `:dim`.
pub fn resolve_problem(spec: &str) -> Result<RunConfig> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {spec}"))?;
        let scn = Scenario::from_toml(&text).with_context(|| format!("parsing {spec}"))?;
        return Ok(RunConfig::from_problem(Some(scn), None));
    }
    let (name, dim) = match spec.split_once(':') {
        Some((n, d)) => (n, Some(d.parse::<usize>().with_context(|| format!("dimension in `{spec}`"))?)),
        None => (spec, None),
    };
    if name == "opinion" {
        let mut o = OpinionConfig::default();
        if let Some(d) = dim {
            o.dim = d;
        }
        return Ok(RunConfig::from_problem(None, Some(o)));
    }
    if !PRESETS.contains(&name) {
        bail!(
            "`{spec}` is neither a scenario file nor a preset ({}, opinion)",
            PRESETS.join(", ")
        );
    }
    let dim = dim.unwrap_or(if name == "sphere" { 3 } else { 2 });
    Ok(RunConfig::from_problem(Some(Scenario::preset(name, dim)?), None))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_follow_dotted_paths() {
        let mut c = resolve_problem("slit").unwrap();
        c.apply_override("train.batch=8").unwrap();
        c.apply_override("train.hidden=[16, 16]").unwrap();
        c.apply_override("scenario.sigma=0.1").unwrap();
        c.apply_override("scenario.alpha.mean.0=-2").unwrap();
        c.apply_override("train.accel=traj_fd").unwrap();
        assert_eq!(c.train.batch, 8);
        assert_eq!(c.train.hidden, vec![16, 16]);
        let s = c.scenario.as_ref().unwrap();
        assert_eq!(s.sigma, 0.1);
        assert_eq!(s.alpha.mean()[0], -2.0);
        assert!(c.apply_override("train.bogus=1").is_err());
        assert!(c.apply_override("train.batch").is_err());
        assert!(c.apply_override("train.batch=\"many\"").is_err());
        assert!(c.apply_override("opinion.dim=3").is_err());
    }

    #[test]
    fn hash_tracks_every_field() {
        let base = resolve_problem("slit").unwrap();
        let h = base.hash();
        assert_eq!(h, base.clone().hash());
        assert_eq!(h.len(), 64);
        for o in ["train.seed=1", "scenario.weight=31", "eval.n=10", "float32=true", "train.use_buffer=false"] {
            let mut c = base.clone();
            c.apply_override(o).unwrap();
            assert_ne!(c.hash(), h, "{o}");
        }
    }

    #[test]
    fn toml_round_trip() {
        for spec in ["stunnel", "sphere:5", "opinion:7"] {
            let c = resolve_problem(spec).unwrap();
            let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
            assert_eq!(back, c);
            assert!(back.validate().is_ok());
        }
        assert_eq!(resolve_problem("sphere:5").unwrap().dim(), 5);
        assert!(resolve_problem("nowhere").is_err());
        assert!(resolve_problem("slit:x").is_err());
    }

    #[test]
    fn preset_hyperparameters_load_without_overrides() {
        let rows = [
            ("stunnel", 0.3, 1.0, 1e-4, 25.0),
            ("vneck", 0.2, 2.0, 1e-3, 1000.0),
            ("gmm", 0.1, 0.7, 0.2, 25.0),
            ("babymaze", 0.03, 0.5, 0.05, 10.0),
            ("slit", 0.05, 2.0, 0.001, 30.0),
            ("box", 0.03, 0.3, 0.01, 700.0),
            ("sphere", 0.01, 0.4, 0.0, 10.0),
        ];
        for (name, sigma, lhjb, la, w) in rows {
            let c = resolve_problem(name).unwrap();
            let s = c.scenario.unwrap();
            assert_eq!((s.sigma, s.lambda_hjb, s.lambda_a, s.weight), (sigma, lhjb, la, w), "{name}");
            assert_eq!(c.train.steps, 30);
            assert_eq!(c.train.batch, 1024);
            assert_eq!(c.train.iterations, 70_000);
            assert_eq!(c.train.hidden, vec![512, 512, 512]);
            assert_eq!(c.train.frequencies, 20);
        }
    }
}
