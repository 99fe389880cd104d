//! Residual pattern learning for pixel-wise out-of-distribution detection.
//!
//! A frozen closed-set segmentation network ([`segnet`]) is paired with an
//! external residual adapter ([`rpl`]) whose output is added to the
//! network's head input. The adapter is trained with a positive-energy loss
//! and an inlier-approximation loss ([`losses`]) plus a context-robust
//! contrastive loss ([`corocl`]) on outlier-exposure composites
//! ([`synthdata`]). Anomaly scores are the free energy of the residual
//! logits ([`inference`]), evaluated with pixel-level metrics ([`metrics`]).

pub mod checkpoint;
pub mod corocl;
pub mod error;
pub mod inference;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rpl;
pub mod segnet;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
