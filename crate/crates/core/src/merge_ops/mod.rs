//! Merge operators applied tensor by tensor across aligned weight maps.
//!
//! Multi-expert methods work on task vectors `τ_i = θ_i − θ_base`. Every
//! operator is a pure function of its inputs; tensors are processed in
//! parallel and each tensor's reductions run in a fixed order.

mod dare;
pub mod kernels;
mod model;

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::tensor_store::{Tensor, TensorStoreError, WeightMap};

pub use dare::{drop_and_rescale, stream_key, uniform};
pub use model::{merge_model, merge_with_plan, CheckpointSource, FsCheckpoints, MergePlan, MethodPlan};

pub const DEFAULT_COLINEAR_THRESHOLD: f64 = 0.9995;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("tensor {tensor:?}: expert {expert:?} has shape {expert_shape:?}, base has {base_shape:?}")]
    ShapeMismatch {
        tensor: String,
        expert: String,
        base_shape: Vec<u64>,
        expert_shape: Vec<u64>,
    },
    #[error("expert {expert:?} is missing tensor {tensor:?}")]
    MissingTensor { expert: String, tensor: String },
    #[error("expert {expert:?} has tensor {tensor:?} that the base lacks")]
    UnexpectedTensor { expert: String, tensor: String },
    #[error("{what}: expected {expected} entries, got {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{field} = {value}: {reason}")]
    InvalidParam {
        field: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("loading {path}: {source}")]
    Load {
        path: String,
        #[source]
        source: TensorStoreError,
    },
    #[error("recipe {recipe}: {source}")]
    InRecipe {
        recipe: String,
        #[source]
        source: Box<MergeError>,
    },
}

fn check_range(field: &'static str, value: f64, ok: bool, reason: &'static str) -> Result<(), MergeError> {
    if ok {
        Ok(())
    } else {
        Err(MergeError::InvalidParam {
            field,
            value,
            reason,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlerpParams {
    /// Fraction of the expert, in `[0, 1]`.
    pub t: f64,
    pub colinear_threshold: f64,
    /// `(substring, t)` pairs; the first pattern contained in a tensor name wins.
    pub overrides: Vec<(String, f64)>,
}

impl SlerpParams {
    pub fn new(t: f64) -> Self {
        SlerpParams {
            t,
            colinear_threshold: DEFAULT_COLINEAR_THRESHOLD,
            overrides: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), MergeError> {
        check_range("t", self.t, (0.0..=1.0).contains(&self.t), "must lie in [0, 1]")?;
        for (_, t) in &self.overrides {
            check_range("t_overrides.t", *t, (0.0..=1.0).contains(t), "must lie in [0, 1]")?;
        }
        Ok(())
    }

    pub fn t_for(&self, tensor: &str) -> f64 {
        self.overrides
            .iter()
            .find(|(pattern, _)| tensor.contains(pattern.as_str()))
            .map_or(self.t, |(_, t)| *t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiesParams {
    pub density: f64,
    pub lambda: f64,
    pub weights: Vec<f64>,
}

impl TiesParams {
    pub fn validate(&self, experts: usize) -> Result<(), MergeError> {
        check_range("density", self.density, self.density > 0.0 && self.density <= 1.0, "must lie in (0, 1]")?;
        validate_combination(self.lambda, &self.weights, experts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DareParams {
    pub drop_p: f64,
    pub seed: u64,
}

impl DareParams {
    pub fn validate(&self) -> Result<(), MergeError> {
        check_range("dare.drop_p", self.drop_p, (0.0..1.0).contains(&self.drop_p), "must lie in [0, 1)")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BreadcrumbsParams {
    pub beta_top: f64,
    pub gamma_bottom: f64,
    pub lambda: f64,
    pub weights: Vec<f64>,
}

impl BreadcrumbsParams {
    pub fn validate(&self, experts: usize) -> Result<(), MergeError> {
        check_range("beta_top", self.beta_top, (0.0..1.0).contains(&self.beta_top), "must lie in [0, 1)")?;
        check_range(
            "gamma_bottom",
            self.gamma_bottom,
            (0.0..1.0).contains(&self.gamma_bottom),
            "must lie in [0, 1)",
        )?;
        check_range(
            "beta_top + gamma_bottom",
            self.beta_top + self.gamma_bottom,
            self.beta_top + self.gamma_bottom < 1.0,
            "must be below 1",
        )?;
        validate_combination(self.lambda, &self.weights, experts)
    }
}

pub(crate) fn validate_combination(lambda: f64, weights: &[f64], experts: usize) -> Result<(), MergeError> {
    check_range("lambda", lambda, lambda > 0.0 && lambda.is_finite(), "must be a positive finite number")?;
    if weights.len() != experts {
        return Err(MergeError::LengthMismatch {
            what: "weights",
            expected: experts,
            actual: weights.len(),
        });
    }
    for &w in weights {
        check_range("weight", w, w >= 0.0 && w.is_finite(), "must be a non-negative finite number")?;
    }
    Ok(())
}

/// Per-expert deltas against a common base.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertDelta {
    pub expert_name: String,
    /// Tensor name → flat delta, one entry per base tensor.
    pub tensors: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVectorSet {
    pub base_name: String,
    pub deltas: Vec<ExpertDelta>,
    /// `(expert, tensor)` pairs that were absent and contributed zero deltas.
    pub missing: Vec<(String, String)>,
}

impl TaskVectorSet {
    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    fn tensor_deltas(&self, name: &str) -> Vec<&[f64]> {
        self.deltas
            .iter()
            .map(|d| d.tensors.get(name).map(Vec::as_slice).unwrap_or(&[]))
            .collect()
    }

    fn check_against(&self, base: &WeightMap) -> Result<(), MergeError> {
        for d in &self.deltas {
            for (name, t) in base.iter() {
                let len = d.tensors.get(name).map(Vec::len);
                match len {
                    None => {
                        return Err(MergeError::MissingTensor {
                            expert: d.expert_name.clone(),
                            tensor: name.clone(),
                        })
                    }
                    Some(n) if n != t.num_elements() => {
                        return Err(MergeError::LengthMismatch {
                            what: "delta tensor",
                            expected: t.num_elements(),
                            actual: n,
                        })
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

/// Resolves the expert tensor aligned with a base tensor.
///
/// `Ok(None)` means the tensor is missing and `allow_missing` is set.
pub(crate) fn aligned<'a>(
    expert_name: &str,
    expert: &'a WeightMap,
    name: &str,
    base_tensor: &Tensor,
    allow_missing: bool,
) -> Result<Option<&'a Tensor>, MergeError> {
    match expert.get(name) {
        Some(t) if t.shape != base_tensor.shape => Err(MergeError::ShapeMismatch {
            tensor: name.to_string(),
            expert: expert_name.to_string(),
            base_shape: base_tensor.shape.clone(),
            expert_shape: t.shape.clone(),
        }),
        Some(t) => Ok(Some(t)),
        None if allow_missing => Ok(None),
        None => Err(MergeError::MissingTensor {
            expert: expert_name.to_string(),
            tensor: name.to_string(),
        }),
    }
}

/// Checks the expert has no tensors outside the base's name set.
pub(crate) fn check_extra(expert_name: &str, expert: &WeightMap, base: &WeightMap, allow_missing: bool) -> Result<(), MergeError> {
    for name in expert.names() {
        if !base.contains(name) {
            if allow_missing {
                log::warn!("expert {expert_name:?}: ignoring tensor {name:?} absent from the base");
            } else {
                return Err(MergeError::UnexpectedTensor {
                    expert: expert_name.to_string(),
                    tensor: name.clone(),
                });
            }
        }
    }
    Ok(())
}

pub(crate) fn delta_of(base: &Tensor, expert: Option<&Tensor>) -> Vec<f64> {
    match expert {
        Some(e) => base
            .values
            .iter()
            .zip(&e.values)
            .map(|(&b, &x)| x as f64 - b as f64)
            .collect(),
        None => vec![0.0; base.num_elements()],
    }
}

/// Task vectors `θ_expert − θ_base` for each named expert.
pub fn task_vectors(
    base_name: &str,
    base: &WeightMap,
    experts: &[(&str, &WeightMap)],
    allow_missing: bool,
) -> Result<TaskVectorSet, MergeError> {
    let mut missing = Vec::new();
    let mut deltas = Vec::with_capacity(experts.len());
    for (expert_name, expert) in experts {
        check_extra(expert_name, expert, base, allow_missing)?;
        let mut tensors = BTreeMap::new();
        for (name, bt) in base.iter() {
            let et = aligned(expert_name, expert, name, bt, allow_missing)?;
            if et.is_none() {
                log::warn!("expert {expert_name:?} lacks tensor {name:?}; using a zero delta");
                missing.push((expert_name.to_string(), name.clone()));
            }
            tensors.insert(name.clone(), delta_of(bt, et));
        }
        deltas.push(ExpertDelta {
            expert_name: expert_name.to_string(),
            tensors,
        });
    }
    Ok(TaskVectorSet {
        base_name: base_name.to_string(),
        deltas,
        missing,
    })
}

fn map_tensors<F>(base: &WeightMap, f: F) -> WeightMap
where
    F: Fn(&str, &Tensor) -> Vec<f32> + Sync,
{
    let tensors: Vec<(String, Tensor)> = base
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(name, t)| {
            let values = f(name, t);
            ((*name).clone(), Tensor::new(t.shape.clone(), t.dtype, values))
        })
        .collect();
    let mut out: WeightMap = tensors.into_iter().collect();
    out.metadata = base.metadata.clone();
    out
}

/// SLERP between base and expert, one flattened tensor at a time.
pub fn slerp_merge(
    base: &WeightMap,
    expert: &WeightMap,
    params: &SlerpParams,
    allow_missing: bool,
) -> Result<WeightMap, MergeError> {
    params.validate()?;
    check_extra("expert", expert, base, allow_missing)?;
    for (name, bt) in base.iter() {
        aligned("expert", expert, name, bt, allow_missing)?;
    }
    Ok(map_tensors(base, |name, bt| match expert.get(name) {
        Some(et) => kernels::slerp(&bt.values, &et.values, params.t_for(name), params.colinear_threshold),
        None => bt.values.clone(),
    }))
}

/// `θ_base + λ Σ w_i τ_i`.
pub fn task_arithmetic_merge(
    base: &WeightMap,
    tv: &TaskVectorSet,
    weights: &[f64],
    lambda: f64,
) -> Result<WeightMap, MergeError> {
    validate_combination(lambda, weights, tv.len())?;
    tv.check_against(base)?;
    Ok(map_tensors(base, |name, bt| {
        kernels::task_arithmetic(&bt.values, &tv.tensor_deltas(name), weights, lambda)
    }))
}

/// TIES: trim to `⌈density·n⌉` entries, elect a sign per position, average agreeing entries.
pub fn ties_merge(base: &WeightMap, tv: &TaskVectorSet, params: &TiesParams) -> Result<WeightMap, MergeError> {
    params.validate(tv.len())?;
    tv.check_against(base)?;
    Ok(map_tensors(base, |name, bt| {
        kernels::ties(&bt.values, &tv.tensor_deltas(name), &params.weights, params.density, params.lambda)
    }))
}

/// BreadCrumbs: drop the top-β and bottom-γ magnitude bands of each delta, then combine.
pub fn breadcrumbs_merge(
    base: &WeightMap,
    tv: &TaskVectorSet,
    params: &BreadcrumbsParams,
) -> Result<WeightMap, MergeError> {
    params.validate(tv.len())?;
    tv.check_against(base)?;
    Ok(map_tensors(base, |name, bt| {
        kernels::breadcrumbs(
            &bt.values,
            &tv.tensor_deltas(name),
            &params.weights,
            params.beta_top,
            params.gamma_bottom,
            params.lambda,
        )
    }))
}

/// DARE: drops delta entries with probability `drop_p` and rescales the survivors.
pub fn dare_preprocess(tv: &TaskVectorSet, params: &DareParams) -> Result<TaskVectorSet, MergeError> {
    params.validate()?;
    let mut out = tv.clone();
    out.deltas.par_iter_mut().for_each(|d| {
        let expert = d.expert_name.clone();
        d.tensors.par_iter_mut().for_each(|(tensor, values)| {
            drop_and_rescale(values, params.drop_p, stream_key(params.seed, &expert, tensor));
        });
    });
    Ok(out)
}
