pub mod config;
pub mod dataset;
pub mod detect;
pub mod embed;
pub mod error;
pub mod export;
pub mod features;
pub mod graph;
pub mod model;
pub mod prefs;
pub mod pretrain;
pub mod pipeline;
pub mod rgt;
pub mod synth;

pub use error::{Result, SegaError};
