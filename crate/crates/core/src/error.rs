use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("sample has no available task label")]
    NoAvailableTask,
    #[error("scores contain a single class; need at least one positive and one negative")]
    SingleClass,
    #[error("bootstrap skipped {skipped} of {iters} resamples as single-class")]
    BootstrapDegenerate { skipped: usize, iters: usize },
    #[error("zero-norm task vectors at rows {0:?}")]
    ZeroNormRows(Vec<usize>),
    #[error("gradient supplied for frozen parameter `{0}`")]
    FrozenGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("matrix is not symmetric")]
    Asymmetric,
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
