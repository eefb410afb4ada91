//! Grad-Libra: hardness-weighted binary cross-entropy for long-tailed
//! classification.
//!
//! Each class is scored by its own sigmoid classifier. Grad-Libra weights
//! every per-class cross-entropy term by a monotone function of the
//! magnitude of that term's logit gradient, with separate modulating factors
//! for positives and negatives, so easy negatives fade and hard positives of
//! rare classes keep their say.
//!
//! The crate also carries what is needed to study the loss end to end:
//!
//! * [`loss`]: Grad-Libra, cross-entropy and (alpha-balanced) focal loss
//!   with analytic logit gradients.
//! * [`data`]: seeded synthetic long-tailed datasets and CSV I/O.
//! * [`model`] and [`train`]: linear / one-hidden-layer heads trained by SGD
//!   with momentum, weight decay, warmup and step decay.
//! * [`telemetry`]: cumulative positive/negative gradient ratios and
//!   classifier weight norms.
//! * [`metrics`]: average precision and grouped mean recall.
//!
//! ```
//! use gradlibra::loss::{grad_libra_forward, Labels, LossConfig};
//! use ndarray::array;
//!
//! let logits = array![[2.0, -1.0, -3.0], [-0.5, -2.5, 0.3]];
//! let labels = Labels::from_classes(3, &[Some(0), None]).unwrap();
//! let out = grad_libra_forward(logits.view(), &labels, &LossConfig::grad_libra(0.8, 0.8)).unwrap();
//! assert!(out.total > 0.0);
//! assert_eq!(out.grad_logits.dim(), (2, 3));
//! ```

pub mod data;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod telemetry;
pub mod train;

pub use error::{Error, Result};

/// The guide under `book/src`, compiled here so its snippets run as doctests.
/// The CLI chapter is compiled by `gradlibra-cli`.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../README.md")]
    pub mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/hardness.md")]
    pub mod hardness {}
    #[doc = include_str!("../../../book/src/losses.md")]
    pub mod losses {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/telemetry.md")]
    pub mod telemetry {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
}
