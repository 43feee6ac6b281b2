//! Active learning for pixel-wise change detection on image pairs: a
//! synthetic corpus, a small Siamese U-Net, ensemble and Monte Carlo batch
//! norm uncertainty, the acquisition loop, and an experiment harness.

pub mod acquire;
pub mod active_loop;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod seed;
pub mod siamnet;
pub mod synthdata;

pub use error::{Error, Result};
