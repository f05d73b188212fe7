use std::fmt;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use smope::continual::{ContinualConfig, PretrainSpec, StreamSpec, TrainHyper};
use smope::model::ModelConfig;
use smope::theory::RateConfig;

#[derive(Debug)]
pub enum CliError {
    /// Unreadable, malformed or invalid input. Exit status 1.
    Config(String),
    /// Failure while computing or writing results. Exit status 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {}", m),
            CliError::Runtime(m) => write!(f, "runtime error: {}", m),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<smope::Error> for CliError {
    fn from(e: smope::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentMode {
    Continual,
    Ablation,
    NoiseSweep,
    Rate,
}

impl ExperimentMode {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentMode::Continual => "continual",
            ExperimentMode::Ablation => "ablation",
            ExperimentMode::NoiseSweep => "noise-sweep",
            ExperimentMode::Rate => "rate",
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_epsilons() -> Vec<f64> {
    vec![0.0, 0.4, 1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: ExperimentMode,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Noise magnitudes visited by `noise-sweep`.
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub stream: StreamSpec,
    #[serde(default)]
    pub train: TrainHyper,
    #[serde(default)]
    pub pretrain: PretrainSpec,
    #[serde(default)]
    pub rate: RateConfig,
}

impl ExperimentConfig {
    pub fn continual(&self) -> ContinualConfig {
        ContinualConfig {
            model: self.model.clone(),
            stream: self.stream.clone(),
            train: self.train.clone(),
            pretrain: self.pretrain.clone(),
        }
    }

    /// Returns the offending key (when known) with the message.
    fn validate(&self) -> Result<(), (Option<String>, String)> {
        if self.seeds.is_empty() {
            return Err((Some("seeds".into()), "at least one seed is required".into()));
        }
        match self.mode {
            ExperimentMode::Rate => {
                let true_atoms = 2;
                self.rate
                    .validate(true_atoms)
                    .map_err(|e| (Some("rate".into()), e.to_string()))?;
            }
            mode => {
                if mode == ExperimentMode::NoiseSweep
                    && (self.epsilons.is_empty()
                        || self.epsilons.iter().any(|e| !(e.is_finite() && *e >= 0.0)))
                {
                    return Err((
                        Some("epsilons".into()),
                        "epsilons must be a non-empty list of finite values >= 0".into(),
                    ));
                }
                self.continual().validate().map_err(|e| {
                    let msg = e.to_string();
                    (dotted_key(&msg), msg)
                })?;
            }
        }
        Ok(())
    }
}

/// First `section.key` looking word of a message.
fn dotted_key(msg: &str) -> Option<String> {
    msg.split(|c: char| c.is_whitespace() || c == ',' || c == ':')
        .find(|w| {
            let parts: Vec<&str> = w.split('.').collect();
            parts.len() >= 2
                && parts
                    .iter()
                    .all(|p| !p.is_empty() && p.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
                && parts[0].chars().next().is_some_and(|c| c.is_ascii_alphabetic())
        })
        .map(str::to_string)
}

/// One-based line where `key` (dotted path) is set, falling back to its closest parent.
pub fn locate_key(text: &str, key: &str) -> Option<usize> {
    let parts: Vec<&str> = key.split('.').collect();
    for len in (1..=parts.len()).rev() {
        let (section, name) = (parts[..len - 1].join("."), parts[len - 1]);
        let mut current = String::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if let Some(h) = t.strip_prefix('[').and_then(|h| h.strip_suffix(']')) {
                current = h.trim().to_string();
                if len == parts.len() && current == key {
                    return Some(i + 1);
                }
                continue;
            }
            if current == section {
                if let Some(rest) = t.strip_prefix(name) {
                    if rest.trim_start().starts_with('=') {
                        return Some(i + 1);
                    }
                }
            }
        }
    }
    None
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    (line, col)
}

#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub path: PathBuf,
    /// The file exactly as read.
    pub text: String,
    pub experiment: ExperimentConfig,
}

pub fn parse_config(path: &Path, text: &str) -> Result<ExperimentConfig, CliError> {
    let shown = path.display();
    let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let msg = e.message().trim().to_string();
        match e.span() {
            Some(span) => {
                let (line, col) = line_col(text, span.start);
                CliError::Config(format!("{}:{}:{}: {}", shown, line, col, msg))
            }
            None => CliError::Config(format!("{}: {}", shown, msg)),
        }
    })?;
    let table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    let model_has = |k: &str| {
        table
            .get("model")
            .and_then(|m| m.as_table())
            .is_some_and(|m| m.contains_key(k))
    };
    if !model_has("tokens") {
        cfg.model.tokens = cfg.stream.tokens + 1;
    }
    if !model_has("raw_dim") {
        cfg.model.raw_dim = cfg.stream.token_dim;
    }
    cfg.validate().map_err(|(key, msg)| {
        match key.as_deref().and_then(|k| locate_key(text, k)) {
            Some(line) => CliError::Config(format!("{}:{}: {}", shown, line, msg)),
            None => CliError::Config(format!("{}: {}", shown, msg)),
        }
    })?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))?;
    let experiment = parse_config(path, &text)?;
    Ok(LoadedConfig {
        path: path.to_path_buf(),
        text,
        experiment,
    })
}
