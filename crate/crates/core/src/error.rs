use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("raster too small: {width}x{height} raster cannot hold a {tile_size} px tile")]
    RasterTooSmall {
        width: usize,
        height: usize,
        tile_size: usize,
    },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("ambiguous split: polygons for {0} and {1} overlap")]
    AmbiguousSplit(String, String),
    #[error("unknown family for labels: {0:?}")]
    UnknownFamily(Vec<String>),
    #[error("class absent from training set: {0}")]
    ClassAbsent(String),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("missing class weight for {0}")]
    MissingWeight(String),
    #[error("class {label} cannot be lifted to the {level} level")]
    CannotLift { label: String, level: &'static str },
    #[error("no ground truth")]
    NoGroundTruth,
    #[error("weight/class mismatch: {0}")]
    WeightMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),
    #[error("malformed RLE: {0}")]
    MalformedRle(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
}
