//! Seasonal contrastive pre-training for satellite imagery.
//!
//! The crate covers the whole pipeline: collecting seasonally revisited image
//! stacks around populated places ([`geosampler`]), turning a stack into one
//! query and three key views ([`views`]), momentum-contrastive training with
//! three projection sub-spaces ([`learner`]) and downstream evaluation
//! harnesses ([`eval`]).

pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geosampler;
pub mod image;
pub mod learner;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod views;

pub use config::RunConfig;
pub use encoder::{Encoder, EncoderConfig};
pub use error::{Error, Result};
pub use geosampler::{
    CatalogQuery, CityRecord, DateSchedule, LocationSample, SeasonalStack, TileCatalog, TilePatch,
};
pub use eval::{ChangePair, LabeledDataset, MaskMetrics, ProbeConfig, ProbeMode};
pub use learner::{EmbeddingQueue, LearnerConfig, SecoState, TrainConfig};
pub use views::{AugmentationParams, ViewSet};
