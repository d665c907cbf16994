use std::fmt;
use std::path::PathBuf;

/// One problem found in a config file. `line` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl ConfigIssue {
    pub fn new(message: impl Into<String>) -> Self {
        ConfigIssue {
            line: None,
            key: None,
            message: message.into(),
        }
    }

    pub fn at(line: usize, key: Option<&str>, message: impl Into<String>) -> Self {
        ConfigIssue {
            line: Some(line),
            key: key.map(str::to_owned),
            message: message.into(),
        }
    }

    pub fn for_key(key: &str, message: impl Into<String>) -> Self {
        ConfigIssue {
            line: None,
            key: Some(key.to_owned()),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        if let Some(key) = &self.key {
            write!(f, "`{key}`: ")?;
        }
        f.write_str(&self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config:\n{}", list(.0))]
    Config(Vec<ConfigIssue>),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", .path.display())]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] fedgc_core::Error),
}

fn list(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  - {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
