//! Training engine for small residual networks, serial and layer-parallel.
//!
//! The classical baseline trains a residual network `T(blocks(S(y)))` by one
//! forward pass followed by backpropagation through every block. The parallel
//! alternative splits the `L` blocks into `K` contiguous stages, feeds each
//! stage from an auxiliary boundary variable `lambda_k` instead of its
//! predecessor's output, and softly enforces boundary consistency with a
//! penalty term `beta * psi(lambda_k, x_out)` (optionally augmented with
//! explicit multipliers `kappa_k`). Stages then run forward and backward
//! concurrently; a cheap communication phase corrects the `lambda`s.
//!
//! Storing one `lambda` per training sample does not survive data
//! augmentation, so low-capacity auxiliary networks ([`auxnet`]) regenerate
//! the `lambda`s on the fly and are distilled against the corrected values
//! each step.
//!
//! Module map:
//! - [`tensor`], [`rng`]: dense f64 arithmetic, seeded randomness, and the
//!   finite-difference gradient oracle every test suite leans on.
//! - [`model`]: the residual network with exact per-block backward maps.
//! - [`optim`], [`serial`]: SGD, learning-rate schedules, the layer-serial
//!   baseline trainer.
//! - [`parallel`]: stage partitioning, decoupled stage losses and adjoints,
//!   lambda/kappa corrections, and the synchronous K-worker step.
//! - [`auxnet`]: auxiliary-variable networks and their recursive variant.
//! - [`speedup`]: phase-timing instrumentation and the analytic speedup model.
//! - [`data`]: deterministic synthetic datasets, augmentation, batching.
//! - [`checkpoint`]: exact round-trip parameter serialization.
//! - [`experiment`]: run configs, metrics files, comparisons, SVG curves.

pub mod auxnet;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod serial;
pub mod speedup;
pub mod tensor;

pub use error::Error;
pub type Result<T> = std::result::Result<T, Error>;
