//! Continual learning for sound-event detection, end to end and dependency-light.
//!
//! The crate provides:
//! - a deterministic numerics stack: 2-D f64 tensors, a reverse-mode autodiff
//!   tape, AdamW, and central-difference gradient checking;
//! - a synthetic spoken-event benchmark: procedurally generated semantic and
//!   acoustic event clips, splice/overlay composition, STFT features, task
//!   streams with disjoint train labels and cumulative test sets;
//! - a frozen encoder-decoder sequence model whose decoder grows a mixture of
//!   bottleneck adapter experts with a learned per-block router;
//! - a replay memory that stores both plain exemplars and synthetic mixed
//!   samples, and a trainer that combines task, replay, and routing losses;
//! - classic continual-learning baselines (fine-tuning, multitask upper
//!   bound, replay, gradient projection, weight regularization, distillation)
//!   on a parameter-matched single-adapter variant of the same model;
//! - accuracy/forgetting metrics over the full task-by-checkpoint result
//!   matrix, plus an experiment harness with on-disk run artifacts.
//!
//! Everything is seeded: identical configuration and seed reproduce identical
//! artifacts bit for bit.

pub mod audio;
pub mod baselines;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;
