use std::path::PathBuf;

/// Errors raised across the crate.
///
/// Variants follow the failure classes of the pipeline: a value outside its
/// mathematical domain, a broken caller contract (shape/length mismatch),
/// bad configuration, and I/O or format problems with persisted artifacts.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown glyph {glyph:?} at byte offset {offset}")]
    UnknownGlyph { glyph: char, offset: usize },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("format error in {path:?}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("load error: {0}")]
    Load(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Domain(_) => "domain",
            Self::Contract(_) => "contract",
            Self::Config(_) => "config",
            Self::UnknownGlyph { .. } => "unknown-glyph",
            Self::Lookup(_) => "lookup",
            Self::Training(_) => "training",
            Self::Format { .. } => "format",
            Self::Load(_) => "load",
            Self::Io(_) => "io",
            Self::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if let false = $cond {
            return Err($crate::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
