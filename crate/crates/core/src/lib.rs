//! Projection-aware dual captioning for spatial augmented reality scenes.
//!
//! The pipeline composites projected content onto a physical scene, segments
//! the projected region, retrieves object names from a key-value memory and
//! decodes two independent captions: one for the scene and one for the
//! projection.

pub mod autograd;
pub mod checkpoint;
pub mod compose;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod qformer;
pub mod tensor;
pub mod train;
pub mod vision;
pub mod vocab;

pub use compose::{BlendParams, Homography, ProjectionSpec, SarSample, SceneSpec, Split};
pub use config::{LossWeights, ModelConfig, RunConfig, SynthConfig, TrainConfig};
pub use error::{ProcapError, Result};
pub use eval::{EvalRecord, EvalReport};
pub use image::{BinaryMask, Image};
pub use memory::{KnowledgeBase, RetrievedContext};
pub use model::{Context, ProCapModel, Task};
pub use tensor::Tensor;
pub use train::LossBreakdown;
pub use vision::{FeatureGrid, MaskGrid};
pub use vocab::{TokenSequence, Vocabulary};
