//! Curvature-aware policy optimization (CAPO) for softmax last-layer policies.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: sparse/dense vectors, row-sparse matrices, seeded RNG streams.
//! - [`env`]: tiny autoregressive token MDPs with verifiable terminal rewards and
//!   an exact enumerator of the expected return.
//! - [`policy`]: fixed random feature encoder plus a trainable softmax last layer.
//! - [`estimators`]: advantages, factored token gradients, and matrix-free
//!   directional Hessian/Fisher curvatures.
//! - [`stepmodel`]: SGD and Adam step models with hypothetical (uncommitted) moments.
//! - [`optimizer`]: REINFORCE / GRPO / Dr.GRPO gradients and the trust-region
//!   masking loop.
//! - [`oracle`]: dense brute-force references used to verify everything above.
//! - [`harness`]: configuration, training orchestration, metrics, checkpoints,
//!   sweeps and the `capo` command line.
//!
//! Runnable walkthroughs live in `examples/`; see the README for the list.

pub mod env;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod numerics;
pub mod optimizer;
pub mod oracle;
pub mod policy;
pub mod stepmodel;

pub use error::{Error, Result};
