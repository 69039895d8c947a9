use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use iotsh_core::corpus::{DEFAULT_CHUNK_OVERLAP, DEFAULT_CHUNK_SIZE};
use iotsh_core::embed::DEFAULT_STUB_DIM;
use iotsh_core::rag::DEFAULT_K;

pub const ENV_PREFIX: &str = "IOTSH_";
pub const STUB: &str = "stub";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Syntax(String),
    #[error("config field `{field}`: {reason}")]
    Field { field: &'static str, reason: String },
}

fn field(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub corpus_dir: PathBuf,
    pub store_path: PathBuf,
    /// Record log, alert log and saved reports live here.
    pub data_dir: PathBuf,
    pub embed_endpoint: String,
    pub embed_dim: usize,
    pub chat_endpoint: String,
    pub chat_model: String,
    /// Remote classifier URL, or `stub` for the naive Bayes baseline at
    /// `baseline_model_path`.
    pub classify_endpoint: Option<String>,
    pub baseline_model_path: Option<PathBuf>,
    pub default_k: usize,
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    /// Required by the flow commands; release naming varies, so there is
    /// no default.
    pub label_column: Option<String>,
    /// `None` selects the built-in drop list.
    pub feature_policy_path: Option<PathBuf>,
    pub listen_address: String,
    pub alert_threshold: f64,
    pub parallelism: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            corpus_dir: "docs".into(),
            store_path: "data/store.jsonl".into(),
            data_dir: "data".into(),
            embed_endpoint: STUB.into(),
            embed_dim: DEFAULT_STUB_DIM,
            chat_endpoint: STUB.into(),
            chat_model: "echo".into(),
            classify_endpoint: None,
            baseline_model_path: None,
            default_k: DEFAULT_K,
            chunk_size: DEFAULT_CHUNK_SIZE,
            chunk_overlap: DEFAULT_CHUNK_OVERLAP,
            label_column: None,
            feature_policy_path: None,
            listen_address: "127.0.0.1:8080".into(),
            alert_threshold: 0.5,
            parallelism: 4,
        }
    }
}

fn parse<T: std::str::FromStr>(name: &'static str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.parse()
        .map_err(|e| field(name, format!("{raw:?}: {e}")))
}

fn optional(raw: &str) -> Option<String> {
    (!raw.trim().is_empty()).then(|| raw.to_owned())
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Applies `IOTSH_<FIELD>` overrides; other variables are ignored.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        for (key, value) in vars {
            if let Some(name) = key.strip_prefix(ENV_PREFIX) {
                self.set(&name.to_ascii_lowercase(), &value)?;
            }
        }
        Ok(())
    }

    /// Sets one field from its textual form. An empty value clears an
    /// optional field.
    pub fn set(&mut self, name: &str, raw: &str) -> Result<(), ConfigError> {
        match name {
            "corpus_dir" => self.corpus_dir = raw.into(),
            "store_path" => self.store_path = raw.into(),
            "data_dir" => self.data_dir = raw.into(),
            "embed_endpoint" => self.embed_endpoint = raw.into(),
            "embed_dim" => self.embed_dim = parse("embed_dim", raw)?,
            "chat_endpoint" => self.chat_endpoint = raw.into(),
            "chat_model" => self.chat_model = raw.into(),
            "classify_endpoint" => self.classify_endpoint = optional(raw),
            "baseline_model_path" => self.baseline_model_path = optional(raw).map(PathBuf::from),
            "default_k" => self.default_k = parse("default_k", raw)?,
            "chunk_size" => self.chunk_size = parse("chunk_size", raw)?,
            "chunk_overlap" => self.chunk_overlap = parse("chunk_overlap", raw)?,
            "label_column" => self.label_column = optional(raw),
            "feature_policy_path" => self.feature_policy_path = optional(raw).map(PathBuf::from),
            "listen_address" => self.listen_address = raw.into(),
            "alert_threshold" => self.alert_threshold = parse("alert_threshold", raw)?,
            "parallelism" => self.parallelism = parse("parallelism", raw)?,
            other => log::warn!("ignoring unknown config override {other}"),
        }
        Ok(())
    }

    pub fn label_column(&self) -> Result<&str, ConfigError> {
        self.label_column.as_deref().ok_or_else(|| {
            field(
                "label_column",
                "not set; name the column holding the class label",
            )
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.chunk_size == 0 {
            return Err(field("chunk_size", "must be positive"));
        }
        if self.chunk_overlap >= self.chunk_size {
            return Err(field(
                "chunk_overlap",
                format!(
                    "{} must be smaller than chunk_size {}",
                    self.chunk_overlap, self.chunk_size
                ),
            ));
        }
        if self.default_k == 0 {
            return Err(field("default_k", "must be at least 1"));
        }
        if self.embed_dim == 0 {
            return Err(field("embed_dim", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alert_threshold) {
            return Err(field("alert_threshold", "must lie in [0, 1]"));
        }
        if self.parallelism == 0 {
            return Err(field("parallelism", "must be at least 1"));
        }
        check_endpoint("embed_endpoint", &self.embed_endpoint)?;
        check_endpoint("chat_endpoint", &self.chat_endpoint)?;
        if let Some(e) = &self.classify_endpoint {
            check_endpoint("classify_endpoint", e)?;
            if e == STUB && self.baseline_model_path.is_none() {
                return Err(field(
                    "baseline_model_path",
                    "required when classify_endpoint is \"stub\"",
                ));
            }
        }
        if self
            .label_column
            .as_deref()
            .is_some_and(|l| l.trim().is_empty())
        {
            return Err(field("label_column", "must not be blank"));
        }
        self.listen_address
            .parse::<SocketAddr>()
            .map_err(|e| field("listen_address", e.to_string()))?;
        Ok(())
    }
}

fn check_endpoint(name: &'static str, value: &str) -> Result<(), ConfigError> {
    if value == STUB {
        return Ok(());
    }
    match url::Url::parse(value) {
        Ok(u) if matches!(u.scheme(), "http" | "https") && u.has_host() => Ok(()),
        Ok(u) => Err(field(name, format!("unsupported URL {u}"))),
        Err(e) => Err(field(
            name,
            format!("{value:?} is neither \"stub\" nor an absolute URL ({e})"),
        )),
    }
}
