//! Merge fine-tuned expert checkpoints into a single model, search merge
//! configurations with a budgeted genetic algorithm, and summarize benchmark
//! gains.
//!
//! Module map:
//! - [`tensor_store`]: safetensors-compatible reading and writing, F32/F16/BF16.
//! - [`merge_ops`]: SLERP, task arithmetic, TIES, DARE and BreadCrumbs.
//! - [`recipe`]: JSON merge recipes and the genome encoding used by the search.
//! - [`evolve`]: (μ+λ) genetic search against a pluggable evaluator.
//! - [`gainstats`]: AVG / #DG / CV Δ reports and judge-score aggregation.
//! - [`packer`]: best-fit-decreasing sequence packing and EOS concatenation.

pub mod evolve;
pub mod gainstats;
pub mod merge_ops;
pub mod packer;
pub mod recipe;
pub mod tensor_store;

pub use merge_ops::{MergeError, TaskVectorSet};
pub use recipe::{Genome, MergeRecipe, Method};
pub use tensor_store::{DType, Tensor, TensorStoreError, WeightMap};
