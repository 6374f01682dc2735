//! Desk-scale pipeline for pretraining on heterogeneous CSI tensors:
//! deterministic synthetic channel data, scale-aware batch scheduling with
//! exact padding oracles, double masking, a small masked-autoencoder
//! transformer with self-contained reverse-mode gradients, and evaluation
//! plus gradient-conflict analysis.

pub mod datagen;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scheduler;
pub mod tensor;
