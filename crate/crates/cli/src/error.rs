use std::fmt;
use std::path::{Path, PathBuf};

use curesimex::{Error, ErrorClass};
use serde::de::DeserializeOwned;

/// Failures of a command, mapped onto the exit-code contract.
#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// A config file that does not deserialize; `pointer` is a JSON pointer.
    Config { path: PathBuf, pointer: String, message: String },
    Io { path: PathBuf, source: std::io::Error },
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e.class() {
                ErrorClass::Validation => 2,
                ErrorClass::Numeric => 3,
                ErrorClass::Io => 4,
            },
            CliError::Config { .. } | CliError::Usage(_) => 2,
            CliError::Io { .. } => 4,
        }
    }

    fn class(&self) -> &'static str {
        match self.exit_code() {
            2 => "validation",
            3 => "numeric",
            _ => "io",
        }
    }

    /// Single-line structured form for machine consumers.
    pub fn to_json(&self) -> String {
        let mut obj = serde_json::json!({
            "class": self.class(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        match self {
            CliError::Config { path, pointer, .. } => {
                obj["path"] = path.display().to_string().into();
                obj["pointer"] = pointer.clone().into();
            }
            CliError::Io { path, .. } => obj["path"] = path.display().to_string().into(),
            CliError::Core(e) => obj["kind"] = kind(e).into(),
            CliError::Usage(_) => {}
        }
        serde_json::json!({ "error": obj }).to_string()
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Domain(_) => "domain",
        Error::Config(_) => "config",
        Error::NotEstimable => "not_estimable",
        Error::Ingest(_) => "ingest",
        Error::Schema(_) => "schema",
        Error::TailDivergence { .. } => "tail_divergence",
        Error::Numeric(_) => "numeric",
        Error::Extrapolation(_) => "extrapolation",
        Error::Variance(_) => "variance",
        Error::DegenerateRisk(_) => "degenerate_risk",
        Error::SimexConvergence { .. } => "simex_convergence",
        Error::CensoringInfeasible { .. } => "censoring_infeasible",
        Error::DegenerateTruncation { .. } => "degenerate_truncation",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
        Error::Json(_) => "json",
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Config { path, pointer, message } => {
                let at = if pointer.is_empty() { "/" } else { pointer };
                write!(f, "{}: invalid config at {at}: {message}", path.display())
            }
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CliError::Usage(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

/// Parses JSON, reporting the failing location as a JSON pointer.
pub fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|err| {
        let pointer = pointer_of(err.path());
        CliError::Config { path: path.to_path_buf(), pointer, message: err.into_inner().to_string() }
    })
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, serde::Deserialize)]
    #[serde(deny_unknown_fields)]
    #[allow(dead_code)]
    struct Inner {
        cr: f64,
    }

    #[derive(Debug, serde::Deserialize)]
    #[allow(dead_code)]
    struct Outer {
        cells: Vec<Inner>,
    }

    #[test]
    fn pointer_names_the_failing_field() {
        let err = parse_json::<Outer>(Path::new("x.json"), r#"{"cells":[{"cr":0.1},{"cr":"high"}]}"#).unwrap_err();
        match err {
            CliError::Config { pointer, .. } => assert_eq!(pointer, "/cells/1/cr"),
            other => panic!("{other:?}"),
        }
    }
}
