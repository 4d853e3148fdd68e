//! Deterministic synthetic data: captioned shapes and Gaussian targets.

mod gaussian;
mod shapes;

pub use gaussian::{make_gaussian_spec, GaussianStructure};
pub use shapes::{
    generate_sample, generate_shapes, DatasetManifest, ObjectAnnotation, ObjectRecord, SampleRecord,
    ShapesDataset, ShapesSample, BACKGROUND_TOKEN, COLOR_TOKENS, COLOR_VALUES, DATASET_FORMAT, SHAPE_TOKENS,
    VOCABULARY,
};

/// Allowed square image sides.
pub const SUPPORTED_DIMS: [usize; 3] = [16, 24, 32];
