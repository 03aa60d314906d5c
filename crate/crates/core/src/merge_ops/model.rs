//! Whole-model merges driven by a recipe.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use super::{
    aligned, check_extra, delta_of, drop_and_rescale, kernels, stream_key, validate_combination,
    BreadcrumbsParams, DareParams, MergeError, SlerpParams, TiesParams,
};
use crate::recipe::MergeRecipe;
use crate::tensor_store::{load_weights, Tensor, TensorStoreError, WeightMap};

/// Access to checkpoints named by recipe paths.
pub trait CheckpointSource: Sync {
    fn load(&self, path: &str) -> Result<Arc<WeightMap>, TensorStoreError>;
}

/// Loads checkpoints from disk, resolving relative paths against `root`.
///
/// With caching enabled each path is read once and shared afterwards.
#[derive(Debug, Default)]
pub struct FsCheckpoints {
    root: PathBuf,
    cache: Option<Mutex<HashMap<PathBuf, Arc<WeightMap>>>>,
}

impl FsCheckpoints {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FsCheckpoints {
            root: root.into(),
            cache: None,
        }
    }

    pub fn cached(root: impl Into<PathBuf>) -> Self {
        FsCheckpoints {
            root: root.into(),
            cache: Some(Mutex::new(HashMap::new())),
        }
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

impl CheckpointSource for FsCheckpoints {
    fn load(&self, path: &str) -> Result<Arc<WeightMap>, TensorStoreError> {
        let resolved = self.resolve(path);
        let Some(cache) = &self.cache else {
            return load_weights(&resolved).map(Arc::new);
        };
        if let Some(hit) = cache.lock().expect("cache lock").get(&resolved) {
            return Ok(Arc::clone(hit));
        }
        let loaded = Arc::new(load_weights(&resolved)?);
        cache
            .lock()
            .expect("cache lock")
            .insert(resolved, Arc::clone(&loaded));
        Ok(loaded)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MethodPlan {
    Slerp(SlerpParams),
    TaskArithmetic { weights: Vec<f64>, lambda: f64 },
    Ties(TiesParams),
    Breadcrumbs(BreadcrumbsParams),
}

/// A fully resolved merge: operator, parameters and optional DARE preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    pub method: MethodPlan,
    /// Ignored for SLERP.
    pub dare: Option<DareParams>,
    pub allow_missing: bool,
}

impl MergePlan {
    pub fn validate(&self, experts: usize) -> Result<(), MergeError> {
        match &self.method {
            MethodPlan::Slerp(p) => {
                if experts != 1 {
                    return Err(MergeError::LengthMismatch {
                        what: "slerp experts",
                        expected: 1,
                        actual: experts,
                    });
                }
                p.validate()?;
            }
            MethodPlan::TaskArithmetic { weights, lambda } => {
                validate_combination(*lambda, weights, experts)?
            }
            MethodPlan::Ties(p) => p.validate(experts)?,
            MethodPlan::Breadcrumbs(p) => p.validate(experts)?,
        }
        if let Some(d) = &self.dare {
            d.validate()?;
        }
        Ok(())
    }

    fn merge_tensor(&self, name: &str, base: &Tensor, experts: &[(&str, Option<&Tensor>)]) -> Vec<f32> {
        if let MethodPlan::Slerp(p) = &self.method {
            return match experts[0].1 {
                Some(e) => kernels::slerp(&base.values, &e.values, p.t_for(name), p.colinear_threshold),
                None => base.values.clone(),
            };
        }
        let deltas: Vec<Vec<f64>> = experts
            .iter()
            .map(|(expert_name, e)| {
                let mut d = delta_of(base, *e);
                if let Some(dare) = &self.dare {
                    drop_and_rescale(&mut d, dare.drop_p, stream_key(dare.seed, expert_name, name));
                }
                d
            })
            .collect();
        let refs: Vec<&[f64]> = deltas.iter().map(Vec::as_slice).collect();
        match &self.method {
            MethodPlan::TaskArithmetic { weights, lambda } => {
                kernels::task_arithmetic(&base.values, &refs, weights, *lambda)
            }
            MethodPlan::Ties(p) => kernels::ties(&base.values, &refs, &p.weights, p.density, p.lambda),
            MethodPlan::Breadcrumbs(p) => kernels::breadcrumbs(
                &base.values,
                &refs,
                &p.weights,
                p.beta_top,
                p.gamma_bottom,
                p.lambda,
            ),
            MethodPlan::Slerp(_) => unreachable!(),
        }
    }
}

/// Merges in-memory checkpoints. The output has exactly the base's tensors.
///
/// Deltas are formed one tensor at a time, so no full task-vector set is held.
pub fn merge_with_plan(
    base: &WeightMap,
    experts: &[(&str, &WeightMap)],
    plan: &MergePlan,
) -> Result<WeightMap, MergeError> {
    plan.validate(experts.len())?;
    let mut jobs = Vec::with_capacity(base.len());
    for (name, bt) in base.iter() {
        let mut aligned_experts = Vec::with_capacity(experts.len());
        for (expert_name, expert) in experts {
            let t = aligned(expert_name, expert, name, bt, plan.allow_missing)?;
            if t.is_none() {
                log::warn!("expert {expert_name:?} lacks tensor {name:?}; using a zero delta");
            }
            aligned_experts.push((*expert_name, t));
        }
        jobs.push((name, bt, aligned_experts));
    }
    for (expert_name, expert) in experts {
        check_extra(expert_name, expert, base, plan.allow_missing)?;
    }
    let merged: Vec<(String, Tensor)> = jobs
        .par_iter()
        .map(|(name, bt, ex)| {
            let values = plan.merge_tensor(name, bt, ex);
            ((*name).clone(), Tensor::new(bt.shape.clone(), bt.dtype, values))
        })
        .collect();
    let mut out: WeightMap = merged.into_iter().collect();
    out.metadata = base.metadata.clone();
    Ok(out)
}

/// Loads the recipe's checkpoints through `source` and merges them.
pub fn merge_model(recipe: &MergeRecipe, source: &dyn CheckpointSource) -> Result<WeightMap, MergeError> {
    let label = recipe
        .origin
        .as_ref()
        .map_or_else(|| "<inline>".to_string(), |p| p.display().to_string());
    let wrap = |e: MergeError| MergeError::InRecipe {
        recipe: label.clone(),
        source: Box::new(e),
    };
    let load = |path: &str| {
        source.load(path).map_err(|e| {
            wrap(MergeError::Load {
                path: path.to_string(),
                source: e,
            })
        })
    };
    let base = load(&recipe.base)?;
    let experts = recipe
        .experts
        .iter()
        .map(|e| load(&e.path))
        .collect::<Result<Vec<_>, _>>()?;
    let pairs: Vec<(&str, &WeightMap)> = recipe
        .experts
        .iter()
        .zip(&experts)
        .map(|(e, w)| (e.path.as_str(), w.as_ref()))
        .collect();
    merge_with_plan(&base, &pairs, &recipe.plan()).map_err(wrap)
}
