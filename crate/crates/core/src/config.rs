//! Researcher-editable configuration: one defaults file for the whole server
//! and one JSON document per experiment. Both are loaded once at startup.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::{
    font_size_in_range, line_spacing_in_range, EffectiveSettings, FONT_SIZE_RANGE_PX,
    LINE_SPACING_RANGE,
};

pub const DEFAULT_FONT_SIZE_PX: u32 = 16;
pub const DEFAULT_LINE_SPACING: f64 = 1.4;
pub const DEFAULT_LISTEN_ADDRESS: &str = "127.0.0.1:8080";
pub const DEFAULT_DATA_DIR: &str = "./clpc-data";
pub const MAX_CODE_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteProviderConfig {
    pub id: String,
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_ms: u64,
    /// Dotted path to the reply text in the upstream response body.
    /// Defaults to `choices.0.message.content`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomEventConfig {
    pub type_name: String,
    #[serde(default)]
    pub required_payload_keys: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefaultsConfig {
    pub default_provider_id: String,
    pub default_font_size_px: u32,
    pub default_line_spacing: f64,
    pub listen_address: String,
    pub data_dir: PathBuf,
    pub providers: Vec<RemoteProviderConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub custom_events: Vec<CustomEventConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ui_origin: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDefaults {
    default_provider_id: Option<String>,
    default_font_size_px: Option<u32>,
    default_line_spacing: Option<f64>,
    listen_address: Option<String>,
    data_dir: Option<PathBuf>,
    #[serde(default)]
    providers: Vec<RemoteProviderConfig>,
    #[serde(default)]
    custom_events: Vec<CustomEventConfig>,
    ui_origin: Option<String>,
}

/// Per-experiment settings overrides. Keys mirror the defaults file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingsOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_provider_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_font_size_px: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_line_spacing: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub code: String,
    #[serde(default)]
    pub system_prompts: Vec<String>,
    #[serde(rename = "allowed_providers")]
    pub allowed_provider_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overrides: Option<SettingsOverrides>,
}

impl ExperimentConfig {
    pub fn allows(&self, provider_id: &str) -> bool {
        self.allowed_provider_ids.iter().any(|p| p == provider_id)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}:{column}: parse error: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{}: invalid `{field}`: {message}", path.display())]
    Validation {
        path: PathBuf,
        field: String,
        message: String,
    },
    #[error(
        "experiment code `{code}` is declared by both {} and {}",
        first.display(),
        second.display()
    )]
    DuplicateExperimentCode {
        code: String,
        first: PathBuf,
        second: PathBuf,
    },
    #[error(
        "experiment `{code}`: resolved provider `{provider_id}` is not in its allowed providers"
    )]
    ProviderNotAllowed { code: String, provider_id: String },
}

impl ConfigError {
    pub fn code(&self) -> &'static str {
        match self {
            ConfigError::Io { .. } => "IoError",
            ConfigError::Parse { .. } => "ParseError",
            ConfigError::Validation { .. } => "ValidationError",
            ConfigError::DuplicateExperimentCode { .. } => "DuplicateExperimentCode",
            ConfigError::ProviderNotAllowed { .. } => "ProviderNotAllowed",
        }
    }

    fn invalid(path: &Path, field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Validation {
            path: path.to_path_buf(),
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Every problem found while loading configuration, in discovery order.
#[derive(Debug)]
pub struct ConfigReport(pub Vec<ConfigError>);

impl ConfigReport {
    pub fn errors(&self) -> &[ConfigError] {
        &self.0
    }

    /// True when every error is an I/O failure, which the CLI reports with a
    /// different exit code than bad content.
    pub fn is_io(&self) -> bool {
        !self.0.is_empty() && self.0.iter().all(|e| matches!(e, ConfigError::Io { .. }))
    }
}

impl fmt::Display for ConfigReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigReport {}

impl From<ConfigError> for ConfigReport {
    fn from(e: ConfigError) -> Self {
        ConfigReport(vec![e])
    }
}

fn read_document<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    serde_path_to_error::deserialize(value).map_err(|e| {
        let field = e.path().to_string();
        ConfigError::invalid(path, field, e.into_inner().to_string())
    })
}

fn check_label(path: &Path, field: &str, value: &str, errors: &mut Vec<ConfigError>) {
    if value.trim().is_empty() {
        errors.push(ConfigError::invalid(path, field, "must be non-empty"));
    } else if value.chars().count() > MAX_CODE_LEN {
        errors.push(ConfigError::invalid(
            path,
            field,
            format!("must be at most {MAX_CODE_LEN} characters"),
        ));
    } else if value.chars().any(char::is_control) {
        errors.push(ConfigError::invalid(
            path,
            field,
            "must not contain control characters",
        ));
    }
}

fn check_font(path: &Path, field: &str, value: u32, errors: &mut Vec<ConfigError>) {
    if !font_size_in_range(value) {
        errors.push(ConfigError::invalid(
            path,
            field,
            format!(
                "{value} is outside [{}, {}]",
                FONT_SIZE_RANGE_PX.start(),
                FONT_SIZE_RANGE_PX.end()
            ),
        ));
    }
}

fn check_spacing(path: &Path, field: &str, value: f64, errors: &mut Vec<ConfigError>) {
    if !line_spacing_in_range(value) {
        errors.push(ConfigError::invalid(
            path,
            field,
            format!(
                "{value} is outside [{}, {}]",
                LINE_SPACING_RANGE.start(),
                LINE_SPACING_RANGE.end()
            ),
        ));
    }
}

fn check_listen_address(path: &Path, value: &str, errors: &mut Vec<ConfigError>) {
    let ok = value
        .rsplit_once(':')
        .is_some_and(|(host, port)| !host.is_empty() && port.parse::<u16>().is_ok());
    if !ok {
        errors.push(ConfigError::invalid(
            path,
            "listen_address",
            "expected host:port",
        ));
    }
}

fn check_remote(
    path: &Path,
    index: usize,
    p: &RemoteProviderConfig,
    errors: &mut Vec<ConfigError>,
) {
    let field = |name: &str| format!("providers[{index}].{name}");
    if p.id.trim().is_empty() {
        errors.push(ConfigError::invalid(path, field("id"), "must be non-empty"));
    }
    match reqwest::Url::parse(&p.base_url) {
        Ok(url) if matches!(url.scheme(), "http" | "https") => {}
        Ok(_) => errors.push(ConfigError::invalid(
            path,
            field("base_url"),
            "scheme must be http or https",
        )),
        Err(e) => errors.push(ConfigError::invalid(path, field("base_url"), e.to_string())),
    }
    if p.model_name.is_empty() {
        errors.push(ConfigError::invalid(
            path,
            field("model_name"),
            "must be non-empty",
        ));
    }
    if p.api_key_env.is_empty() {
        errors.push(ConfigError::invalid(
            path,
            field("api_key_env"),
            "must be non-empty",
        ));
    }
    if p.timeout_ms == 0 {
        errors.push(ConfigError::invalid(
            path,
            field("timeout_ms"),
            "must be positive",
        ));
    }
}

/// Loads and validates the defaults file, filling absent keys from the hard
/// defaults. Provider references are checked later, once the registry exists.
pub fn load_defaults(path: &Path) -> Result<DefaultsConfig, ConfigReport> {
    match check_defaults(path) {
        (Some(config), errors) if errors.is_empty() => Ok(config),
        (_, errors) => Err(ConfigReport(errors)),
    }
}

/// The parsed document, if it parsed at all, plus every problem in it.
fn check_defaults(path: &Path) -> (Option<DefaultsConfig>, Vec<ConfigError>) {
    let raw: RawDefaults = match read_document(path) {
        Ok(raw) => raw,
        Err(e) => return (None, vec![e]),
    };
    let mut errors = Vec::new();

    let default_provider_id = raw.default_provider_id.unwrap_or_default();
    if default_provider_id.is_empty() {
        errors.push(ConfigError::invalid(
            path,
            "default_provider_id",
            "required and must be non-empty",
        ));
    }
    let config = DefaultsConfig {
        default_provider_id,
        default_font_size_px: raw.default_font_size_px.unwrap_or(DEFAULT_FONT_SIZE_PX),
        default_line_spacing: raw.default_line_spacing.unwrap_or(DEFAULT_LINE_SPACING),
        listen_address: raw
            .listen_address
            .unwrap_or_else(|| DEFAULT_LISTEN_ADDRESS.to_owned()),
        data_dir: raw
            .data_dir
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR)),
        providers: raw.providers,
        custom_events: raw.custom_events,
        ui_origin: raw.ui_origin,
    };

    check_font(
        path,
        "default_font_size_px",
        config.default_font_size_px,
        &mut errors,
    );
    check_spacing(
        path,
        "default_line_spacing",
        config.default_line_spacing,
        &mut errors,
    );
    check_listen_address(path, &config.listen_address, &mut errors);
    for (i, p) in config.providers.iter().enumerate() {
        check_remote(path, i, p, &mut errors);
    }
    for (i, e) in config.custom_events.iter().enumerate() {
        if e.type_name.trim().is_empty() {
            errors.push(ConfigError::invalid(
                path,
                format!("custom_events[{i}].type_name"),
                "must be non-empty",
            ));
        }
    }

    (Some(config), errors)
}

fn validate_experiment(path: &Path, exp: &ExperimentConfig, errors: &mut Vec<ConfigError>) {
    check_label(path, "code", &exp.code, errors);
    if exp.allowed_provider_ids.is_empty() {
        errors.push(ConfigError::invalid(
            path,
            "allowed_providers",
            "must be non-empty",
        ));
    }
    if let Some(o) = &exp.overrides {
        if let Some(font) = o.default_font_size_px {
            check_font(path, "overrides.default_font_size_px", font, errors);
        }
        if let Some(spacing) = o.default_line_spacing {
            check_spacing(path, "overrides.default_line_spacing", spacing, errors);
        }
    }
}

/// Loads every `*.json` file in `dir`, sorted by file name, keeping the
/// source path of each experiment.
pub fn load_experiment_sources(
    dir: &Path,
) -> Result<Vec<(PathBuf, ExperimentConfig)>, ConfigReport> {
    let (loaded, errors) = check_experiment_sources(dir);
    if errors.is_empty() {
        Ok(loaded)
    } else {
        Err(ConfigReport(errors))
    }
}

/// The experiments that passed their own checks, plus every problem found.
fn check_experiment_sources(dir: &Path) -> (Vec<(PathBuf, ExperimentConfig)>, Vec<ConfigError>) {
    let io = |source| ConfigError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let entries = match fs::read_dir(dir) {
        Ok(entries) => entries,
        Err(e) => return (Vec::new(), vec![io(e)]),
    };
    let mut paths = Vec::new();
    for entry in entries {
        let entry = match entry {
            Ok(entry) => entry,
            Err(e) => return (Vec::new(), vec![io(e)]),
        };
        let path = entry.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "json") {
            paths.push(path);
        }
    }
    paths.sort();

    let mut errors = Vec::new();
    let mut loaded: Vec<(PathBuf, ExperimentConfig)> = Vec::new();
    let mut seen: HashMap<String, PathBuf> = HashMap::new();
    for path in paths {
        let exp: ExperimentConfig = match read_document(&path) {
            Ok(exp) => exp,
            Err(e) => {
                errors.push(e);
                continue;
            }
        };
        let before = errors.len();
        validate_experiment(&path, &exp, &mut errors);
        if errors.len() > before {
            continue;
        }
        if let Some(first) = seen.get(&exp.code) {
            errors.push(ConfigError::DuplicateExperimentCode {
                code: exp.code.clone(),
                first: first.clone(),
                second: path,
            });
            continue;
        }
        seen.insert(exp.code.clone(), path.clone());
        loaded.push((path, exp));
    }
    (loaded, errors)
}

pub fn load_experiments(dir: &Path) -> Result<Vec<ExperimentConfig>, ConfigReport> {
    Ok(load_experiment_sources(dir)?
        .into_iter()
        .map(|(_, exp)| exp)
        .collect())
}

/// Field-wise overlay: the experiment override when present, else the
/// global default.
pub fn resolve_effective_settings(
    exp: &ExperimentConfig,
    defaults: &DefaultsConfig,
) -> Result<EffectiveSettings, ConfigError> {
    let o = exp.overrides.clone().unwrap_or_default();
    let settings = EffectiveSettings {
        provider_id: o
            .default_provider_id
            .unwrap_or_else(|| defaults.default_provider_id.clone()),
        font_size_px: o
            .default_font_size_px
            .unwrap_or(defaults.default_font_size_px),
        line_spacing: o
            .default_line_spacing
            .unwrap_or(defaults.default_line_spacing),
    };
    if !exp.allows(&settings.provider_id) {
        return Err(ConfigError::ProviderNotAllowed {
            code: exp.code.clone(),
            provider_id: settings.provider_id,
        });
    }
    Ok(settings)
}

/// Everything the server needs from its configuration files.
#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub defaults_path: PathBuf,
    pub defaults: DefaultsConfig,
    pub experiments: Vec<ExperimentConfig>,
}

impl ServerConfig {
    /// Loads both documents and checks every provider reference against
    /// `builtin_provider_ids` plus the remotes declared in the defaults file.
    /// All problems are collected, not just the first.
    pub fn load(
        defaults_path: &Path,
        experiments_dir: &Path,
        builtin_provider_ids: &[&str],
    ) -> Result<Self, ConfigReport> {
        let (defaults, mut errors) = check_defaults(defaults_path);
        let defaults_valid = errors.is_empty();
        let (experiments, experiment_errors) = check_experiment_sources(experiments_dir);
        errors.extend(experiment_errors);
        let Some(defaults) = defaults else {
            return Err(ConfigReport(errors));
        };

        let mut known: Vec<&str> = builtin_provider_ids.to_vec();
        for (i, p) in defaults.providers.iter().enumerate() {
            if known.contains(&p.id.as_str()) {
                errors.push(ConfigError::invalid(
                    defaults_path,
                    format!("providers[{i}].id"),
                    format!("provider id `{}` is already taken", p.id),
                ));
            } else {
                known.push(&p.id);
            }
        }
        if !known.contains(&defaults.default_provider_id.as_str()) {
            errors.push(ConfigError::invalid(
                defaults_path,
                "default_provider_id",
                format!("unknown provider `{}`", defaults.default_provider_id),
            ));
        }
        let mut seen_events: Vec<&str> = Vec::new();
        for (i, e) in defaults.custom_events.iter().enumerate() {
            if seen_events.contains(&e.type_name.as_str()) {
                errors.push(ConfigError::invalid(
                    defaults_path,
                    format!("custom_events[{i}].type_name"),
                    format!("`{}` declared twice", e.type_name),
                ));
            }
            seen_events.push(&e.type_name);
        }

        for (path, exp) in &experiments {
            for (i, id) in exp.allowed_provider_ids.iter().enumerate() {
                if !known.contains(&id.as_str()) {
                    errors.push(ConfigError::invalid(
                        path,
                        format!("allowed_providers[{i}]"),
                        format!("unknown provider `{id}`"),
                    ));
                }
            }
            if let Some(id) = exp
                .overrides
                .as_ref()
                .and_then(|o| o.default_provider_id.as_ref())
            {
                if !known.contains(&id.as_str()) {
                    errors.push(ConfigError::invalid(
                        path,
                        "overrides.default_provider_id",
                        format!("unknown provider `{id}`"),
                    ));
                }
            }
            if defaults_valid {
                if let Err(e) = resolve_effective_settings(exp, &defaults) {
                    errors.push(e);
                }
            }
        }

        if !errors.is_empty() {
            return Err(ConfigReport(errors));
        }
        Ok(Self {
            defaults_path: defaults_path.to_path_buf(),
            defaults,
            experiments: experiments.into_iter().map(|(_, e)| e).collect(),
        })
    }

    pub fn experiment(&self, code: &str) -> Option<&ExperimentConfig> {
        self.experiments.iter().find(|e| e.code == code)
    }
}
