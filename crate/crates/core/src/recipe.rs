//! Merge recipes: JSON documents describing one merge, and the genome
//! encoding the evolutionary search mutates.
//!
//! ```json
//! {"base": "base.safetensors",
//!  "experts": [{"path": "a.safetensors", "weight": 1.0}],
//!  "method": "ties",
//!  "params": {"density": 0.5, "lambda": 1.0, "dare": {"drop_p": 0.2, "seed": 7}},
//!  "output_dtype": "preserve", "allow_missing": false, "seed": 0}
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::merge_ops::{
    BreadcrumbsParams, DareParams, MergePlan, MethodPlan, SlerpParams, TiesParams,
    DEFAULT_COLINEAR_THRESHOLD,
};
use crate::tensor_store::{DType, DtypePolicy};

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("recipe is not valid JSON for the schema: {0}")]
    Json(String),
    #[error("{path}: {message}")]
    Field { path: String, message: String },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn field_err(path: impl Into<String>, message: impl Into<String>) -> RecipeError {
    RecipeError::Field {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Slerp,
    TaskArithmetic,
    Ties,
    Breadcrumbs,
}

impl Method {
    /// Methods reachable from the genome, indexed by the method gene.
    pub const GENOME_ORDER: [Method; 3] = [Method::TaskArithmetic, Method::Ties, Method::Breadcrumbs];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Slerp => "slerp",
            Method::TaskArithmetic => "task_arithmetic",
            Method::Ties => "ties",
            Method::Breadcrumbs => "breadcrumbs",
        }
    }

    pub fn gene(self) -> Option<u8> {
        Self::GENOME_ORDER
            .iter()
            .position(|m| *m == self)
            .map(|i| i as u8)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "slerp" => Ok(Method::Slerp),
            "task_arithmetic" => Ok(Method::TaskArithmetic),
            "ties" => Ok(Method::Ties),
            "breadcrumbs" => Ok(Method::Breadcrumbs),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertRef {
    pub path: String,
    pub weight: f64,
}

/// Operator parameters. Fields not used by the recipe's method are kept but ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodParams {
    pub t: Option<f64>,
    pub t_overrides: Vec<(String, f64)>,
    pub density: Option<f64>,
    pub lambda: f64,
    pub beta_top: Option<f64>,
    pub gamma_bottom: Option<f64>,
    pub dare: Option<DareParams>,
}

impl Default for MethodParams {
    fn default() -> Self {
        MethodParams {
            t: None,
            t_overrides: Vec::new(),
            density: None,
            lambda: 1.0,
            beta_top: None,
            gamma_bottom: None,
            dare: None,
        }
    }
}

/// A validated merge recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeRecipe {
    pub base: String,
    pub experts: Vec<ExpertRef>,
    pub method: Method,
    pub params: MethodParams,
    pub output_dtype: DtypePolicy,
    pub allow_missing: bool,
    pub seed: u64,
    /// File the recipe was read from, if any. Relative checkpoint paths resolve against its directory.
    pub origin: Option<PathBuf>,
}

// Wire format.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecipe {
    base: String,
    experts: Vec<RawExpert>,
    method: Method,
    #[serde(default)]
    params: RawParams,
    #[serde(default = "default_dtype")]
    output_dtype: String,
    #[serde(default)]
    allow_missing: bool,
    #[serde(default)]
    seed: u64,
}

fn default_dtype() -> String {
    "preserve".to_string()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExpert {
    path: String,
    #[serde(default = "one")]
    weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    t_overrides: Vec<RawOverride>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    density: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta_top: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma_bottom: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dare: Option<RawDare>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOverride {
    pattern: String,
    t: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDare {
    drop_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

/// Parses and validates a recipe document, applying defaults (λ = 1, weights = 1, seed = 0).
pub fn parse_recipe(document: &str) -> Result<MergeRecipe, RecipeError> {
    let raw: RawRecipe = serde_json::from_str(document).map_err(|e| RecipeError::Json(e.to_string()))?;
    let output_dtype = match raw.output_dtype.as_str() {
        "preserve" => DtypePolicy::Preserve,
        other => DtypePolicy::Force(
            DType::from_str(other)
                .map_err(|d| field_err("output_dtype", format!("unknown dtype {d:?}")))?,
        ),
    };
    let recipe = MergeRecipe {
        base: raw.base,
        experts: raw
            .experts
            .into_iter()
            .map(|e| ExpertRef {
                path: e.path,
                weight: e.weight,
            })
            .collect(),
        method: raw.method,
        params: MethodParams {
            t: raw.params.t,
            t_overrides: raw
                .params
                .t_overrides
                .into_iter()
                .map(|o| (o.pattern, o.t))
                .collect(),
            density: raw.params.density,
            lambda: raw.params.lambda.unwrap_or(1.0),
            beta_top: raw.params.beta_top,
            gamma_bottom: raw.params.gamma_bottom,
            dare: raw.params.dare.map(|d| DareParams {
                drop_p: d.drop_p,
                seed: d.seed.unwrap_or(raw.seed),
            }),
        },
        output_dtype,
        allow_missing: raw.allow_missing,
        seed: raw.seed,
        origin: None,
    };
    recipe.validate()?;
    Ok(recipe)
}

/// Reads and parses a recipe file, recording its path as the origin.
pub fn load_recipe(path: impl AsRef<Path>) -> Result<MergeRecipe, RecipeError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| RecipeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut recipe = parse_recipe(&text)?;
    recipe.origin = Some(path.to_path_buf());
    Ok(recipe)
}

fn check(path: &str, value: f64, ok: bool, expect: &str) -> Result<(), RecipeError> {
    if ok && !value.is_nan() {
        Ok(())
    } else {
        Err(field_err(path, format!("{value} is out of range, expected {expect}")))
    }
}

fn require(path: &str, value: Option<f64>, method: Method) -> Result<f64, RecipeError> {
    value.ok_or_else(|| field_err(path, format!("required for method {method}")))
}

impl MergeRecipe {
    pub fn validate(&self) -> Result<(), RecipeError> {
        if self.base.is_empty() {
            return Err(field_err("base", "must be a non-empty path"));
        }
        match self.method {
            Method::Slerp if self.experts.len() != 1 => {
                return Err(field_err(
                    "experts",
                    format!("slerp requires exactly one expert, got {}", self.experts.len()),
                ))
            }
            _ if self.experts.is_empty() => return Err(field_err("experts", "at least one expert is required")),
            _ => {}
        }
        for (i, e) in self.experts.iter().enumerate() {
            if e.path.is_empty() {
                return Err(field_err(format!("experts[{i}].path"), "must be a non-empty path"));
            }
            check(
                &format!("experts[{i}].weight"),
                e.weight,
                e.weight >= 0.0 && e.weight.is_finite(),
                "a finite number >= 0",
            )?;
        }

        let p = &self.params;
        if let Some(t) = p.t {
            check("method_params.t", t, (0.0..=1.0).contains(&t), "[0, 1]")?;
        }
        for (i, (_, t)) in p.t_overrides.iter().enumerate() {
            check(&format!("method_params.t_overrides[{i}].t"), *t, (0.0..=1.0).contains(t), "[0, 1]")?;
        }
        if let Some(d) = p.density {
            check("method_params.density", d, d > 0.0 && d <= 1.0, "(0, 1]")?;
        }
        check("method_params.lambda", p.lambda, p.lambda > 0.0 && p.lambda.is_finite(), "a finite number > 0")?;
        if let Some(b) = p.beta_top {
            check("method_params.beta_top", b, (0.0..1.0).contains(&b), "[0, 1)")?;
        }
        if let Some(g) = p.gamma_bottom {
            check("method_params.gamma_bottom", g, (0.0..1.0).contains(&g), "[0, 1)")?;
        }
        if let (Some(b), Some(g)) = (p.beta_top, p.gamma_bottom) {
            check("method_params.beta_top + gamma_bottom", b + g, b + g < 1.0, "a sum below 1")?;
        }
        if let Some(d) = &p.dare {
            check("method_params.dare.drop_p", d.drop_p, (0.0..1.0).contains(&d.drop_p), "[0, 1)")?;
        }

        match self.method {
            Method::Slerp => {
                require("method_params.t", p.t, self.method)?;
            }
            Method::TaskArithmetic => {}
            Method::Ties => {
                require("method_params.density", p.density, self.method)?;
            }
            Method::Breadcrumbs => {
                require("method_params.beta_top", p.beta_top, self.method)?;
                require("method_params.gamma_bottom", p.gamma_bottom, self.method)?;
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.experts.iter().map(|e| e.weight).collect()
    }

    /// The operator invocation this recipe describes. Assumes a validated recipe.
    pub fn plan(&self) -> MergePlan {
        let p = &self.params;
        let method = match self.method {
            Method::Slerp => MethodPlan::Slerp(SlerpParams {
                t: p.t.unwrap_or(0.5),
                colinear_threshold: DEFAULT_COLINEAR_THRESHOLD,
                overrides: p.t_overrides.clone(),
            }),
            Method::TaskArithmetic => MethodPlan::TaskArithmetic {
                weights: self.weights(),
                lambda: p.lambda,
            },
            Method::Ties => MethodPlan::Ties(TiesParams {
                density: p.density.unwrap_or(1.0),
                lambda: p.lambda,
                weights: self.weights(),
            }),
            Method::Breadcrumbs => MethodPlan::Breadcrumbs(BreadcrumbsParams {
                beta_top: p.beta_top.unwrap_or(0.0),
                gamma_bottom: p.gamma_bottom.unwrap_or(0.0),
                lambda: p.lambda,
                weights: self.weights(),
            }),
        };
        MergePlan {
            method,
            dare: if self.method == Method::Slerp { None } else { p.dare },
            allow_missing: self.allow_missing,
        }
    }

    /// Directory that relative checkpoint paths resolve against.
    pub fn root_dir(&self) -> PathBuf {
        self.origin
            .as_deref()
            .and_then(Path::parent)
            .map(Path::to_path_buf)
            .unwrap_or_default()
    }

    /// Serializes back to the recipe document schema.
    pub fn to_json(&self) -> serde_json::Value {
        let p = &self.params;
        let raw = RawRecipe {
            base: self.base.clone(),
            experts: self
                .experts
                .iter()
                .map(|e| RawExpert {
                    path: e.path.clone(),
                    weight: e.weight,
                })
                .collect(),
            method: self.method,
            params: RawParams {
                t: p.t,
                t_overrides: p
                    .t_overrides
                    .iter()
                    .map(|(pattern, t)| RawOverride {
                        pattern: pattern.clone(),
                        t: *t,
                    })
                    .collect(),
                density: p.density,
                lambda: Some(p.lambda),
                beta_top: p.beta_top,
                gamma_bottom: p.gamma_bottom,
                dare: p.dare.map(|d| RawDare {
                    drop_p: d.drop_p,
                    seed: Some(d.seed),
                }),
            },
            output_dtype: match self.output_dtype {
                DtypePolicy::Preserve => "preserve".to_string(),
                DtypePolicy::Force(d) => d.as_str().to_string(),
            },
            allow_missing: self.allow_missing,
            seed: self.seed,
        };
        serde_json::to_value(raw).expect("recipe serializes")
    }
}

/// Closed bounds of every gene. `(min, max)`.
pub mod bounds {
    pub const METHOD: (u8, u8) = (0, 2);
    pub const WEIGHT: (f64, f64) = (0.0, 1.5);
    /// Density must stay positive; 0.01 keeps at least 1% of each delta.
    pub const DENSITY: (f64, f64) = (0.01, 1.0);
    pub const LAMBDA: (f64, f64) = (0.01, 2.0);
    pub const BETA: (f64, f64) = (0.0, 0.3);
    pub const GAMMA: (f64, f64) = (0.0, 0.3);
    pub const DROP: (f64, f64) = (0.0, 0.95);
}

/// Fixed-length numeric encoding of a multi-expert recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genome {
    /// Index into [`Method::GENOME_ORDER`]: 0 task_arithmetic, 1 ties, 2 breadcrumbs.
    pub method_gene: u8,
    pub weight_genes: Vec<f64>,
    pub density_gene: f64,
    pub lambda_gene: f64,
    pub beta_gene: f64,
    pub gamma_gene: f64,
    pub drop_gene: f64,
}

/// Identifies one gene position, for pinning and per-gene operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gene {
    Method,
    Weight(usize),
    Density,
    Lambda,
    Beta,
    Gamma,
    Drop,
}

impl Gene {
    /// Continuous genes of a genome with `experts` weights, in vector order.
    pub fn continuous(experts: usize) -> Vec<Gene> {
        let mut genes: Vec<Gene> = (0..experts).map(Gene::Weight).collect();
        genes.extend([Gene::Density, Gene::Lambda, Gene::Beta, Gene::Gamma, Gene::Drop]);
        genes
    }

    pub fn bounds(self) -> (f64, f64) {
        match self {
            Gene::Method => (bounds::METHOD.0 as f64, bounds::METHOD.1 as f64),
            Gene::Weight(_) => bounds::WEIGHT,
            Gene::Density => bounds::DENSITY,
            Gene::Lambda => bounds::LAMBDA,
            Gene::Beta => bounds::BETA,
            Gene::Gamma => bounds::GAMMA,
            Gene::Drop => bounds::DROP,
        }
    }
}

impl FromStr for Gene {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "method" => Gene::Method,
            "density" => Gene::Density,
            "lambda" => Gene::Lambda,
            "beta" | "beta_top" => Gene::Beta,
            "gamma" | "gamma_bottom" => Gene::Gamma,
            "drop" | "drop_p" => Gene::Drop,
            other => {
                let idx = other
                    .strip_prefix("weight")
                    .and_then(|rest| rest.trim_start_matches(['[', '_', '.']).trim_end_matches(']').parse().ok())
                    .ok_or_else(|| format!("unknown gene {other:?}"))?;
                Gene::Weight(idx)
            }
        })
    }
}

impl Genome {
    pub fn num_experts(&self) -> usize {
        self.weight_genes.len()
    }

    pub fn get(&self, gene: Gene) -> f64 {
        match gene {
            Gene::Method => self.method_gene as f64,
            Gene::Weight(i) => self.weight_genes[i],
            Gene::Density => self.density_gene,
            Gene::Lambda => self.lambda_gene,
            Gene::Beta => self.beta_gene,
            Gene::Gamma => self.gamma_gene,
            Gene::Drop => self.drop_gene,
        }
    }

    pub fn set(&mut self, gene: Gene, value: f64) {
        match gene {
            Gene::Method => self.method_gene = value.round().clamp(0.0, 255.0) as u8,
            Gene::Weight(i) => self.weight_genes[i] = value,
            Gene::Density => self.density_gene = value,
            Gene::Lambda => self.lambda_gene = value,
            Gene::Beta => self.beta_gene = value,
            Gene::Gamma => self.gamma_gene = value,
            Gene::Drop => self.drop_gene = value,
        }
    }

    /// Whether every gene lies within its bounds.
    pub fn in_bounds(&self) -> bool {
        self.method_gene <= bounds::METHOD.1
            && Gene::continuous(self.num_experts()).into_iter().all(|g| {
                let (lo, hi) = g.bounds();
                let v = self.get(g);
                v >= lo && v <= hi
            })
    }

    /// Copy with every gene clamped into bounds; NaN genes go to the lower bound.
    pub fn clamped(&self) -> Genome {
        let mut out = self.clone();
        out.method_gene = out.method_gene.min(bounds::METHOD.1);
        for g in Gene::continuous(self.num_experts()) {
            let (lo, hi) = g.bounds();
            let v = self.get(g);
            out.set(g, if v.is_nan() { lo } else { v.clamp(lo, hi) });
        }
        out
    }

    /// Exact identity of the genome's bit patterns, used as the fitness-cache key.
    pub fn cache_key(&self) -> String {
        let mut key = format!("{:02x}", self.method_gene);
        for g in Gene::continuous(self.num_experts()) {
            key.push_str(&format!("{:016x}", self.get(g).to_bits()));
        }
        key
    }

    pub fn method(&self) -> Method {
        Method::GENOME_ORDER[self.method_gene.min(bounds::METHOD.1) as usize]
    }
}

/// Encodes a multi-expert recipe. Parameters absent from the recipe take neutral
/// defaults (density 1, β = γ = 0, no DARE).
pub fn recipe_to_genome(recipe: &MergeRecipe) -> Result<Genome, RecipeError> {
    let method_gene = recipe
        .method
        .gene()
        .ok_or_else(|| field_err("method", "slerp recipes are not part of the genome search space"))?;
    let p = &recipe.params;
    Ok(Genome {
        method_gene,
        weight_genes: recipe.weights(),
        density_gene: p.density.unwrap_or(1.0),
        lambda_gene: p.lambda,
        beta_gene: p.beta_top.unwrap_or(0.0),
        gamma_gene: p.gamma_bottom.unwrap_or(0.0),
        drop_gene: p.dare.map_or(0.0, |d| d.drop_p),
    })
}

/// Decodes a genome onto a template that supplies paths and non-searched fields.
///
/// Out-of-bounds genes are clamped with a warning. A parameter is written when
/// the decoded method needs it or the template already carries it.
pub fn genome_to_recipe(genome: &Genome, template: &MergeRecipe) -> Result<MergeRecipe, RecipeError> {
    if genome.num_experts() != template.experts.len() {
        return Err(field_err(
            "weight_genes",
            format!(
                "genome has {} weights, template has {} experts",
                genome.num_experts(),
                template.experts.len()
            ),
        ));
    }
    if !genome.in_bounds() {
        log::warn!("genome out of bounds; clamping: {genome:?}");
    }
    let g = genome.clamped();
    let method = g.method();
    let tp = &template.params;
    let keep = |needed: bool, present: bool, value: f64| (needed || present).then_some(value);

    let dare = if g.drop_gene > 0.0 || tp.dare.is_some() {
        Some(DareParams {
            drop_p: g.drop_gene,
            seed: tp.dare.map_or(template.seed, |d| d.seed),
        })
    } else {
        None
    };

    let recipe = MergeRecipe {
        base: template.base.clone(),
        experts: template
            .experts
            .iter()
            .zip(&g.weight_genes)
            .map(|(e, w)| ExpertRef {
                path: e.path.clone(),
                weight: *w,
            })
            .collect(),
        method,
        params: MethodParams {
            t: tp.t,
            t_overrides: tp.t_overrides.clone(),
            density: keep(method == Method::Ties, tp.density.is_some(), g.density_gene),
            lambda: g.lambda_gene,
            beta_top: keep(method == Method::Breadcrumbs, tp.beta_top.is_some(), g.beta_gene),
            gamma_bottom: keep(method == Method::Breadcrumbs, tp.gamma_bottom.is_some(), g.gamma_gene),
            dare,
        },
        output_dtype: template.output_dtype,
        allow_missing: template.allow_missing,
        seed: template.seed,
        origin: template.origin.clone(),
    };
    recipe.validate()?;
    Ok(recipe)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SLERP: &str = r#"{"base": "b.safetensors", "experts": [{"path": "e.safetensors"}],
                            "method": "slerp", "params": {"t": 0.5}}"#;

    fn five_expert_breadcrumbs() -> MergeRecipe {
        parse_recipe(
            r#"{"base": "phi.safetensors",
                "experts": [{"path": "pubmed", "weight": 1.0}, {"path": "clinical", "weight": 0.8},
                            {"path": "medwiki", "weight": 1.2}, {"path": "medcode", "weight": 0.5},
                            {"path": "guideline", "weight": 0.9}],
                "method": "breadcrumbs",
                "params": {"beta_top": 0.1, "gamma_bottom": 0.2, "lambda": 1.0},
                "output_dtype": "BF16", "seed": 11}"#,
        )
        .unwrap()
    }

    #[test]
    fn minimal_slerp_recipe_with_defaults() {
        let r = parse_recipe(SLERP).unwrap();
        assert_eq!(r.method, Method::Slerp);
        assert_eq!(r.params.t, Some(0.5));
        assert_eq!(r.params.lambda, 1.0);
        assert_eq!(r.experts[0].weight, 1.0);
        assert_eq!(r.seed, 0);
        assert_eq!(r.output_dtype, DtypePolicy::Preserve);
        assert!(!r.allow_missing);
    }

    #[test]
    fn density_zero_names_field() {
        let err = parse_recipe(
            r#"{"base": "b", "experts": [{"path": "e"}], "method": "ties", "params": {"density": 0}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("method_params.density"), "{err}");
    }

    #[test]
    fn slerp_needs_one_expert() {
        let err = parse_recipe(
            r#"{"base": "b", "experts": [{"path": "e"}, {"path": "f"}], "method": "slerp", "params": {"t": 0.1}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, RecipeError::Field { ref path, .. } if path == "experts"));
    }

    #[test]
    fn schema_violations() {
        assert!(matches!(parse_recipe("{}"), Err(RecipeError::Json(_))));
        assert!(matches!(
            parse_recipe(r#"{"base": "b", "experts": [], "method": "ties", "params": {"density": 1}}"#),
            Err(RecipeError::Field { .. })
        ));
        assert!(matches!(
            parse_recipe(r#"{"base": "b", "experts": [{"path": "e"}], "method": "soup"}"#),
            Err(RecipeError::Json(_))
        ));
        assert!(matches!(
            parse_recipe(r#"{"base": "b", "experts": [{"path": "e"}], "method": "task_arithmetic", "extra": 1}"#),
            Err(RecipeError::Json(_))
        ));
        let err = parse_recipe(
            r#"{"base": "b", "experts": [{"path": "e", "weight": -1}], "method": "task_arithmetic"}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("experts[0].weight"));
        let err = parse_recipe(
            r#"{"base": "b", "experts": [{"path": "e"}], "method": "breadcrumbs",
                "params": {"beta_top": 0.6, "gamma_bottom": 0.5}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("beta_top + gamma_bottom"));
        let err = parse_recipe(
            r#"{"base": "b", "experts": [{"path": "e"}], "method": "task_arithmetic", "output_dtype": "I8"}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("output_dtype"));
    }

    #[test]
    fn five_expert_breadcrumbs_has_five_weight_genes() {
        let r = five_expert_breadcrumbs();
        let g = recipe_to_genome(&r).unwrap();
        assert_eq!(g.weight_genes.len(), 5);
        assert_eq!(g.method_gene, 2);
        assert_eq!(r.output_dtype, DtypePolicy::Force(DType::BF16));
    }

    #[test]
    fn method_gene_order() {
        let r = five_expert_breadcrumbs();
        let mut g = recipe_to_genome(&r).unwrap();
        for (gene, method) in [(0, Method::TaskArithmetic), (1, Method::Ties), (2, Method::Breadcrumbs)] {
            g.method_gene = gene;
            assert_eq!(genome_to_recipe(&g, &r).unwrap().method, method);
        }
    }

    #[test]
    fn encode_decode_identity() {
        let r = five_expert_breadcrumbs();
        assert_eq!(genome_to_recipe(&recipe_to_genome(&r).unwrap(), &r).unwrap(), r);

        let with_dare = parse_recipe(
            r#"{"base": "b", "experts": [{"path": "e", "weight": 0.5}], "method": "ties",
                "params": {"density": 0.3, "lambda": 1.5, "dare": {"drop_p": 0.0, "seed": 4}}, "seed": 9}"#,
        )
        .unwrap();
        assert_eq!(
            genome_to_recipe(&recipe_to_genome(&with_dare).unwrap(), &with_dare).unwrap(),
            with_dare
        );
    }

    #[test]
    fn out_of_bounds_genes_are_clamped() {
        let r = five_expert_breadcrumbs();
        let mut g = recipe_to_genome(&r).unwrap();
        g.weight_genes[0] = 9.0;
        g.lambda_gene = -1.0;
        g.beta_gene = 0.9;
        g.method_gene = 7;
        let d = genome_to_recipe(&g, &r).unwrap();
        assert_eq!(d.experts[0].weight, 1.5);
        assert_eq!(d.params.lambda, bounds::LAMBDA.0);
        assert_eq!(d.params.beta_top, Some(0.3));
        assert_eq!(d.method, Method::Breadcrumbs);
    }

    #[test]
    fn slerp_is_not_encodable() {
        assert!(recipe_to_genome(&parse_recipe(SLERP).unwrap()).is_err());
    }

    #[test]
    fn json_round_trip() {
        let r = five_expert_breadcrumbs();
        let text = serde_json::to_string(&r.to_json()).unwrap();
        assert_eq!(parse_recipe(&text).unwrap(), r);
    }

    #[test]
    fn gene_names_parse() {
        assert_eq!("lambda".parse::<Gene>().unwrap(), Gene::Lambda);
        assert_eq!("weight1".parse::<Gene>().unwrap(), Gene::Weight(1));
        assert_eq!("weight[3]".parse::<Gene>().unwrap(), Gene::Weight(3));
        assert!("speed".parse::<Gene>().is_err());
    }
}
