//! Deterministic federated-learning simulator whose server can optimize the
//! aggregation itself.
//!
//! Instead of fixing the aggregation weights by sample count, the server
//! treats them as parameters: the global model is restricted to the convex
//! hull of the received client models, and the coefficients are trained on
//! a small server-held proxy set (see [`aggregation::smartfl`]). Classical
//! baselines (FedAVG, full-space finetuning, accuracy-based weights, Krum,
//! coordinate-wise median, trimmed mean), label-flip and omniscient attacks,
//! and a config-driven experiment runner are included.
//!
//! ```
//! use smartfl::experiment::{run, ExperimentConfig};
//!
//! let cfg = ExperimentConfig::from_toml_str(r#"
//!     rounds = 3
//!     clients = 6
//!     participation = 0.5
//!     [data]
//!     source = "synthetic"
//!     num_classes = 3
//!     train_per_class = 30
//!     test_per_class = 10
//!     input_dim = 4
//!     [proxy]
//!     size = 12
//!     [aggregation]
//!     strategy = "smartfl"
//! "#)?;
//! let out = run(&cfg)?;
//! assert_eq!(out.records.len(), 4);
//! # Ok::<(), smartfl::Error>(())
//! ```

pub mod aggregation;
pub mod attack;
pub mod checks;
pub mod client;
pub mod data;
pub mod error;
pub mod experiment;
pub mod math;
pub mod model;
pub mod optim;
pub mod rng;

pub use error::{Error, Result};
pub use math::{CoefficientVector, ParamVector};
pub use rng::SeededRng;

/// Guide chapters from `book/`, compiled here so their snippets run as
/// doctests and cannot drift from the API.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/subspace.md")]
    pub mod subspace {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    pub mod baselines {}
    #[doc = include_str!("../../../book/src/attacks.md")]
    pub mod attacks {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub mod experiments {}
    #[doc = include_str!("../../../book/src/determinism.md")]
    pub mod determinism {}
}
