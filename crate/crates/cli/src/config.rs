//! Run configuration: a TOML file, dotted-path overrides, and resolution
//! into the library's config types.

use std::path::{Path, PathBuf};

use maskscope::dataset::LeakageModel;
use maskscope::interp::{HwRecoveryConfig, LogitStat, PatchSpec, ProbeConfig};
use maskscope::nn::{Activation, Init, MlpSpec, TrainConfig};
use maskscope::rng::derive_seed;
use maskscope::sim::{KeyMode, LeakagePoint, SimConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Environment variable that replaces `paths.out`. `--out` wins over it.
pub const OUT_ENV: &str = "MASKSCOPE_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Hw,
    Bitwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

fn default_seed() -> u64 {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { out: default_out() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_preset")]
    pub preset: Preset,
    /// Defaults to 20000 for `hw` and 200000 for `bitwise`.
    pub profiling_traces: Option<usize>,
    /// Defaults to 10000 for `hw` and 50000 for `bitwise`.
    pub attack_traces: Option<usize>,
    pub noise_sigma: Option<f64>,
    pub trace_length: Option<usize>,
    pub order: Option<usize>,
    pub key_mode: Option<KeyMode>,
    /// Replaces the preset's points of interest.
    pub points: Option<Vec<LeakagePoint>>,
}

fn default_preset() -> Preset {
    Preset::Hw
}

impl Default for SimSection {
    fn default() -> Self {
        toml::from_str("").expect("empty section is valid")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Defaults to HW for the `hw` preset and ID for `bitwise`.
    pub leakage_model: Option<LeakageModel>,
    pub layer_widths: Option<Vec<usize>>,
    pub activation: Option<Activation>,
    pub init: Option<Init>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub l1_lambda: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    /// A checkpoint is kept every this many epochs; the last epoch always.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_checkpoint_every() -> usize {
    10
}

impl Default for TrainSection {
    fn default() -> Self {
        toml::from_str("").expect("empty section is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Checkpoint to analyze; defaults to the last epoch.
    pub epoch: Option<usize>,
    /// Hidden layer to analyze; defaults to 0 for HW models and the last
    /// hidden layer for ID models.
    pub layer: Option<usize>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_stat")]
    pub logit_stat: LogitStat,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub recovery: HwRecoveryConfig,
    #[serde(default)]
    pub bits: BitsSection,
    /// Extra patches for the `patch` stage, on top of the built-in corner
    /// patches.
    #[serde(default)]
    pub patches: Vec<PatchSpec>,
}

fn default_k() -> usize {
    4
}

fn default_stat() -> LogitStat {
    LogitStat::Median
}

impl Default for AnalysisSection {
    fn default() -> Self {
        toml::from_str("").expect("empty section is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    #[serde(default = "default_probe_steps")]
    pub steps: usize,
    #[serde(default = "default_probe_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_holdout")]
    pub holdout: f64,
}

fn default_probe_steps() -> usize {
    300
}

fn default_probe_lr() -> f64 {
    0.05
}

fn default_holdout() -> f64 {
    0.2
}

impl Default for ProbeSection {
    fn default() -> Self {
        toml::from_str("").expect("empty section is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitsSection {
    #[serde(default = "default_input_coords")]
    pub input_coords: Vec<usize>,
    #[serde(default = "default_output_coords")]
    pub output_coords: (usize, usize),
}

fn default_input_coords() -> Vec<usize> {
    vec![0, 1]
}

fn default_output_coords() -> (usize, usize) {
    (2, 3)
}

impl Default for BitsSection {
    fn default() -> Self {
        toml::from_str("").expect("empty section is valid")
    }
}

/// Parses `text` and applies `key.path=value` overrides before
/// deserializing, so overrides go through the same unknown-key check.
pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    for (path, raw) in overrides {
        set_dotted(&mut table, path, parse_value(raw))?;
    }
    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    // resolved so the hash does not depend on whether a default was spelled out
    cfg.sim.profiling_traces = Some(cfg.profiling_traces());
    cfg.sim.attack_traces = Some(cfg.attack_traces());
    cfg.check()?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| CliError::io(format!("reading config {}", p.display()), e))?,
        None => String::new(),
    };
    parse(&text, overrides)
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{path}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{path}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Splits a `--set key=value` argument.
pub fn split_override(arg: &str) -> std::result::Result<(String, String), String> {
    arg.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got `{arg}`"))
}

impl RunConfig {
    fn check(&self) -> Result<()> {
        if self.profiling_traces() == 0 || self.attack_traces() == 0 {
            return Err(CliError::Config("trace counts must be positive".into()));
        }
        if self.train.checkpoint_every == 0 {
            return Err(CliError::Config("train.checkpoint_every must be positive".into()));
        }
        if self.analysis.k < 2 {
            return Err(CliError::Config("analysis.k must be at least 2".into()));
        }
        if self.sim.points.is_some() && self.sim.trace_length.is_none() {
            return Err(CliError::Config(
                "sim.points needs an explicit sim.trace_length".into(),
            ));
        }
        self.sim_config(SimPart::Profiling).validate()?;
        self.mlp_spec().validate()?;
        self.train_config().validate(self.profiling_traces())?;
        self.analysis.recovery.validate(self.analysis.k)?;
        if let Some(e) = self.analysis.epoch {
            if e == 0 || e > self.epochs() {
                return Err(CliError::Config(format!(
                    "analysis.epoch {e} outside 1..={}",
                    self.epochs()
                )));
            }
        }
        if let Some(l) = self.analysis.layer {
            if l >= self.mlp_spec().n_hidden() {
                return Err(CliError::Config(format!(
                    "analysis.layer {l} outside the {} hidden layers",
                    self.mlp_spec().n_hidden()
                )));
            }
        }
        Ok(())
    }

    pub fn leakage_model(&self) -> LeakageModel {
        self.model.leakage_model.unwrap_or(match self.sim.preset {
            Preset::Hw => LeakageModel::Hw,
            Preset::Bitwise => LeakageModel::Id,
        })
    }

    pub fn profiling_traces(&self) -> usize {
        self.sim.profiling_traces.unwrap_or(match self.sim.preset {
            Preset::Hw => 20_000,
            Preset::Bitwise => 200_000,
        })
    }

    pub fn attack_traces(&self) -> usize {
        self.sim.attack_traces.unwrap_or(match self.sim.preset {
            Preset::Hw => 10_000,
            Preset::Bitwise => 50_000,
        })
    }

    pub fn sim_config(&self, part: SimPart) -> SimConfig {
        let (n, tag) = match part {
            SimPart::Profiling => (self.profiling_traces(), "sim-profiling"),
            SimPart::Attack => (self.attack_traces(), "sim-attack"),
        };
        let seed = derive_seed(self.seed, tag);
        let mut c = match self.sim.preset {
            Preset::Hw => SimConfig::hw_default(n, seed),
            Preset::Bitwise => SimConfig::bitwise_default(n, seed),
        };
        if let Some(s) = self.sim.noise_sigma {
            c.noise_sigma = s;
        }
        if let Some(l) = self.sim.trace_length {
            c.trace_length = l;
        }
        if let Some(d) = self.sim.order {
            c.order = d;
        }
        if let Some(k) = self.sim.key_mode {
            c.key_mode = k;
        }
        if let Some(p) = &self.sim.points {
            c.points = p.clone();
        }
        c
    }

    pub fn mlp_spec(&self) -> MlpSpec {
        let width = self.sim_config(SimPart::Profiling).trace_length;
        let mut s = match self.leakage_model() {
            LeakageModel::Hw => MlpSpec::hw_default(width),
            LeakageModel::Id => MlpSpec::id_default(width),
        };
        if let Some(w) = &self.model.layer_widths {
            s.layer_widths = w.clone();
        }
        if let Some(a) = self.model.activation {
            s.activation = a;
        }
        if let Some(i) = self.model.init {
            s.init = i;
        }
        s
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init")
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = match self.leakage_model() {
            LeakageModel::Hw => TrainConfig::hw_default(self.seed),
            LeakageModel::Id => TrainConfig::id_default(self.seed),
        };
        let s = &self.train;
        if let Some(v) = s.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = s.l1_lambda {
            t.l1_lambda = v;
        }
        if let Some(v) = s.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = s.epochs {
            t.epochs = v;
        }
        t
    }

    pub fn epochs(&self) -> usize {
        self.train_config().epochs
    }

    /// Epochs that get a checkpoint.
    pub fn checkpoint_epochs(&self) -> Vec<usize> {
        let n = self.epochs();
        (1..=n)
            .filter(|e| e % self.train.checkpoint_every == 0 || *e == n)
            .collect()
    }

    pub fn analysis_epoch(&self) -> usize {
        self.analysis.epoch.unwrap_or_else(|| self.epochs())
    }

    pub fn analysis_layer(&self) -> usize {
        self.analysis.layer.unwrap_or_else(|| match self.leakage_model() {
            LeakageModel::Hw => 0,
            LeakageModel::Id => self.mlp_spec().n_hidden() - 1,
        })
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            steps: self.analysis.probe.steps,
            learning_rate: self.analysis.probe.learning_rate,
            holdout: self.analysis.probe.holdout,
            seed: derive_seed(self.seed, "probe"),
        }
    }

    /// SHA-256 of the config without `paths`, as canonical JSON.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("paths");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimPart {
    Profiling,
    Attack,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_hw_defaults() {
        let c = parse("", &[]).unwrap();
        assert_eq!(c.leakage_model(), LeakageModel::Hw);
        assert_eq!(c.mlp_spec(), MlpSpec::hw_default(20));
        assert_eq!(c.train_config(), TrainConfig::hw_default(1));
        assert_eq!(c.analysis_layer(), 0);
        assert_eq!(c.checkpoint_epochs().last(), Some(&100));
    }

    #[test]
    fn bitwise_preset_switches_to_id() {
        let c = parse("[sim]\npreset = \"bitwise\"", &[]).unwrap();
        assert_eq!(c.leakage_model(), LeakageModel::Id);
        assert_eq!(c.mlp_spec(), MlpSpec::id_default(30));
        assert_eq!(c.analysis_layer(), 5);
        assert_eq!((c.profiling_traces(), c.attack_traces()), (200_000, 50_000));
        let explicit = parse("[sim]\npreset = \"bitwise\"\nprofiling_traces = 200000", &[]).unwrap();
        assert_eq!(explicit.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(parse("colour = 1", &[]), Err(CliError::Config(_))));
        assert!(matches!(parse("[train]\nepoch = 3", &[]), Err(CliError::Config(_))));
        let o = vec![("analysis.lyer".to_string(), "1".to_string())];
        assert!(matches!(parse("", &o), Err(CliError::Config(_))));
    }

    #[test]
    fn dotted_overrides_apply() {
        let o = vec![
            ("train.epochs".to_string(), "7".to_string()),
            ("sim.preset".to_string(), "bitwise".to_string()),
            ("analysis.recovery.corner_scale".to_string(), "1.5".to_string()),
        ];
        let c = parse("[train]\nepochs = 3", &o).unwrap();
        assert_eq!(c.epochs(), 7);
        assert_eq!(c.sim.preset, Preset::Bitwise);
        assert_eq!(c.analysis.recovery.corner_scale, 1.5);
    }

    #[test]
    fn hash_ignores_paths_only() {
        let a = parse("", &[]).unwrap();
        let b = parse("[paths]\nout = \"elsewhere\"", &[]).unwrap();
        let c = parse("seed = 2", &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(parse("[train]\nbatch_size = 0", &[]).is_err());
        assert!(parse("[analysis]\nlayer = 4", &[]).is_err());
        assert!(parse("[analysis]\nepoch = 101", &[]).is_err());
        assert!(parse("[sim]\norder = 1", &[]).is_err());
    }

    #[test]
    fn checkpoint_schedule_keeps_last() {
        let c = parse("[train]\nepochs = 25\ncheckpoint_every = 10", &[]).unwrap();
        assert_eq!(c.checkpoint_epochs(), vec![10, 20, 25]);
    }
}
