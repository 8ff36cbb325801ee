use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors disagree on a shape that an operation requires to match.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// A kernel's input-channel count does not match the tensor it is applied to.
    #[error("channel mismatch in {context}: kernel expects {expected} channels, input has {actual}")]
    ChannelMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// Convolution geometry produces a non-positive output extent.
    #[error("invalid geometry: input extent {input}, kernel {kernel}, stride {stride}, dilation {dilation}, padding {padding} yields non-positive output")]
    InvalidGeometry {
        input: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    },

    /// A voxel label lies outside the configured class range.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u16, classes: usize },

    /// Average surface distance is undefined when a surface is empty.
    #[error("surface for label {label} is empty in the {side} segmentation; distance is undefined")]
    EmptySurface { label: u16, side: &'static str },

    /// Two label volumes disagree on grid dimensions or spacing.
    #[error("grid mismatch: {a} vs {b}")]
    GridMismatch { a: String, b: String },

    /// Training requires at least one volume.
    #[error("training set is empty")]
    EmptyTrainingSet,

    /// Phantom construction failed to produce the required anatomy.
    #[error("degenerate phantom: {0}")]
    DegeneratePhantom(String),

    /// A feature-map tap was requested for a layer that does not exist.
    #[error("unknown layer '{name}'; available layers:\n{available}")]
    UnknownLayer { name: String, available: String },

    /// A serialized artifact (volume, checkpoint, config) is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
