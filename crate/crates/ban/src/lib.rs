//! Bi-temporal adapter network for remote-sensing change detection.
//!
//! A frozen ViT image encoder supplies general features which bridging
//! modules select, align, and inject into a trainable bi-temporal change
//! branch. The crate covers the full pipeline: model assembly, training
//! with AdamW and a poly schedule, sliding-window inference, and the
//! binary/semantic change-detection metric suites.

pub mod augment;
pub mod autodiff;
pub mod bitab;
pub mod bridge;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod infer;
pub mod ops;
pub mod optim;
pub mod raster;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
