use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this node; rebuild the graph first")]
    BackwardTwice,
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("missing layer tag: {0}")]
    MissingTag(String),
    #[error("unknown parameter or activation name: {0}")]
    UnknownName(String),
    #[error("tag {0} covered by no upload in round {1}")]
    UncoveredTag(String, usize),
    #[error("client {id} unclassifiable: feature jaccard {feature_score:.3}, id jaccard {id_score:.3}")]
    Unclassifiable {
        id: usize,
        feature_score: f64,
        id_score: f64,
    },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
