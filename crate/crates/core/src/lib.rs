//! Region-aware latent editing on a style-based generator: blended forward
//! passes, region selectors, latent editors, objectives, training and
//! inference.

pub mod backbone;
pub mod blending;
pub mod blob;
pub mod desk;
pub mod editors;
pub mod error;
pub mod inference;
pub mod losses;
pub mod optim;
pub mod selectors;
pub mod tensor;
pub mod trainer;

pub use backbone::{BackboneConfig, LatentZ, ModulatedBackbone, Synthesis, WPlusCode};
pub use blending::{LayerMask, MaskStack};
pub use editors::{EditDelta, Editor, EditorKind};
pub use error::{CoralError, Result};
pub use inference::{apply_edit, EditArtifact, EditResult};
pub use losses::{LossReport, LossWeights};
pub use selectors::{Selector, Variant};
pub use tensor::{FeatureMap, ImageRgb};
pub use trainer::{train, Components, TrainConfig, TrainState};
