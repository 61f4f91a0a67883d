use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Mismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("dims {dims:?} need {} elements, got {len}", dims.iter().product::<usize>())]
    DataLength { dims: Vec<usize>, len: usize },
}

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive i/o")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}, expected JTRK")]
    BadMagic([u8; 4]),
    #[error("unsupported archive version {0}")]
    Version(u32),
    #[error("unknown dtype tag {0}")]
    Dtype(u8),
    #[error("entry name is not valid UTF-8")]
    Name,
    #[error("entry name longer than 65535 bytes: {0}")]
    NameTooLong(String),
    #[error("truncated archive")]
    Truncated,
    #[error("missing entry `{0}`")]
    Missing(String),
    #[error("entry `{name}`: {source}")]
    Shape {
        name: String,
        #[source]
        source: ShapeError,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradCheckError {
    #[error("non-finite function value when perturbing input {input} at element {index}")]
    NonFinite { input: usize, index: usize },
    #[error("function value is not finite at the unperturbed inputs")]
    NonFiniteBase,
}
