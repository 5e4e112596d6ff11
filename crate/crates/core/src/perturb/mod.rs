//! Robustness perturbations: whitespace normalization, identifier and string
//! abstraction, and semantic-preserving rewrites.

pub mod abstraction;
pub mod normalize;
pub mod transform;

pub use abstraction::{abstract_function, AbstractionMap};
pub use normalize::{normalize, NormalizationRule};
pub use transform::{apply_transform, enumerate_sites, generate_variants, Site, TransformError, TransformKind, TransformVariant};
