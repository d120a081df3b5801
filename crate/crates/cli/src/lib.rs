//! Subcommands of the `impedance` tool: `run`, `margins` and `estimate`.
//!
//! Every command writes only inside its output directory and records the
//! resolved configuration and tool version next to its data.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

mod estimate;
mod margins;
mod run;

pub use estimate::{cmd_estimate, EstimateSummary};
pub use margins::{cmd_margins, LoopConfigFile};
pub use run::cmd_run;

pub const TOOL: &str = "impedance";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Unstable(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Unstable(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<impedance_core::Error> for CliError {
    fn from(e: impedance_core::Error) -> Self {
        use impedance_core::Error as E;
        match e {
            E::Config(_) | E::Domain(_) | E::Range(_) => CliError::Config(e.to_string()),
            E::Unstable { .. } => CliError::Unstable(e.to_string()),
            E::Singular(_) | E::NoContact { .. } | E::Resolution(_) | E::Numerical(_) => {
                CliError::Numerical(e.to_string())
            }
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Options shared by all subcommands.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub out: PathBuf,
    /// `key.path=value` overrides in the order given.
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub quiet: bool,
}

impl Common {
    pub fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub input: Option<String>,
    pub overrides: Vec<String>,
    pub config: Value,
}

impl Metadata {
    pub fn new(command: &'static str, input: Option<&Path>, overrides: &[String], config: Value) -> Self {
        Self {
            tool: TOOL,
            version: VERSION,
            command,
            input: input.map(|p| p.display().to_string()),
            overrides: overrides.to_vec(),
            config,
        }
    }
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

/// Parses `text` as JSON, pointing at the line and column on failure.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> CliResult<T> {
    serde_json::from_str(text).map_err(|e| {
        CliError::Config(format!(
            "{}: line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

/// Applies `a.b.c=value` overrides to a JSON tree. Values parse as JSON
/// when they can and fall back to plain strings.
pub fn apply_overrides(root: &mut Value, overrides: &[String]) -> CliResult<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{o}` is not key=value")))?;
        if key.is_empty() {
            return Err(CliError::Usage(format!("override `{o}` has an empty key")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut node = &mut *root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| CliError::Config(format!("override `{key}`: `{}` is not an object", parts[..i].join("."))))?;
            if i + 1 == parts.len() {
                obj.insert(part.to_string(), value.clone());
                break;
            }
            node = obj
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(())
}

/// Re-reads a JSON tree after overrides, naming the offending key.
pub fn from_value<T: serde::de::DeserializeOwned>(v: Value, what: &str) -> CliResult<T> {
    serde_json::from_value(v).map_err(|e| CliError::Config(format!("{what} after overrides: {e}")))
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

/// Writes `name` inside `dir`; `name` must be a plain file name.
pub fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
    debug_assert!(!name.contains(['/', '\\']) && name != ".." && name != ".");
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> CliResult<PathBuf> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
    text.push('\n');
    write_file(dir, name, text.as_bytes())
}

pub fn csv_error(e: csv::Error) -> CliError {
    CliError::Numerical(format!("csv output failed: {e}"))
}

/// Keeps letters, digits, `-` and `_` so a scenario name is safe as a
/// directory name.
pub fn safe_name(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if s.is_empty() || s.chars().all(|c| c == '_') {
        "scenario".into()
    } else {
        s
    }
}
