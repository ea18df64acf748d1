//! Run configuration: defaults, a flat `key = value` file, then flag overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ldag_core::mae::SoftmaxScope;
use ldag_core::model::FusionMode;
use ldag_core::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provider {
    Toy,
    Files,
}

impl FromStr for Provider {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "toy" => Ok(Provider::Toy),
            "files" => Ok(Provider::Files),
            other => Err(format!("unknown provider {other:?} (toy | files)")),
        }
    }
}

impl fmt::Display for Provider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provider::Toy => "toy",
            Provider::Files => "files",
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub provider: Provider,
    /// Imported episode directory for the files provider.
    pub data: Option<PathBuf>,
    /// Attribute fixture directory; defaults to `<out>/fixtures` when present.
    pub fixtures: Option<PathBuf>,
    pub out: PathBuf,
    pub offline: bool,
    /// Worker threads; 0 keeps the library default.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            provider: Provider::Toy,
            data: None,
            fixtures: None,
            out: PathBuf::from("out"),
            offline: false,
            threads: 0,
        }
    }
}

/// A mistake in the invocation or configuration; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, UsageError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| UsageError(format!("bad value {value:?} for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, UsageError> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(UsageError(format!("bad value {value:?} for {key}: expected true or false"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), UsageError> {
        let t = &mut self.train;
        match key {
            "alpha" => t.alpha = parse(key, value)?,
            "n" => t.n = parse(key, value)?,
            "tau" => t.tau = parse(key, value)?,
            "tau1" => t.tau1 = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "episodes" => t.episodes = parse(key, value)?,
            "eval_episodes" => t.eval_episodes = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "shots" => t.shots = parse(key, value)?,
            "fold" => t.fold = parse(key, value)?,
            "mae" => t.toggles.mae_on = parse_bool(key, value)?,
            "maa" => t.toggles.maa_on = parse_bool(key, value)?,
            "support" => t.toggles.use_support = parse_bool(key, value)?,
            "scope" => {
                t.scope = match value {
                    "pairwise" => SoftmaxScope::Pairwise,
                    "joint" => SoftmaxScope::Joint,
                    _ => return Err(UsageError(format!("bad scope {value:?} (pairwise | joint)"))),
                }
            }
            "fusion" => {
                t.fusion = match value {
                    "mean" => FusionMode::Mean,
                    "per-attribute" => FusionMode::PerAttribute,
                    _ => return Err(UsageError(format!("bad fusion {value:?} (mean | per-attribute)"))),
                }
            }
            "provider" => self.provider = parse(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "fixtures" => self.fixtures = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "offline" => self.offline = parse_bool(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            _ => return Err(UsageError(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), UsageError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| UsageError(format!("{origin}:{}: expected key = value", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| UsageError(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        self.train.validate().map_err(|e| UsageError(e.to_string()))?;
        if self.provider == Provider::Files && self.data.is_none() {
            return Err(UsageError("the files provider needs --data".into()));
        }
        Ok(())
    }

    pub fn fixture_dir(&self) -> Option<PathBuf> {
        self.fixtures.clone().or_else(|| {
            let d = self.out.join("fixtures");
            d.is_dir().then_some(d)
        })
    }

    /// The training config plus the run-level keys.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = self.train.echo();
        v["provider"] = serde_json::json!(self.provider.to_string());
        v["offline"] = serde_json::json!(self.offline);
        v
    }
}
