//! Fitness sources for the search.
//!
//! An external evaluator is a shell command that receives a merged checkpoint
//! path via `{model}` and prints `{"scores": {dataset: number}}` on stdout.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use serde::Deserialize;
use thiserror::Error;

use crate::merge_ops::{merge_model, CheckpointSource, FsCheckpoints, MergeError};
use crate::recipe::MergeRecipe;
use crate::tensor_store::{load_weights, store_weights, TensorStoreError, WeightMap};

pub const MODEL_PLACEHOLDER: &str = "{model}";
pub const TMPDIR_ENV: &str = "MERGEFORGE_TMPDIR";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("merge failed: {0}")]
    Merge(#[from] MergeError),
    #[error("writing candidate: {0}")]
    Store(#[from] TensorStoreError),
    #[error("scratch file: {0}")]
    Scratch(std::io::Error),
    #[error("spawning evaluator: {0}")]
    Spawn(std::io::Error),
    #[error("evaluator timed out after {0:?}")]
    Timeout(Duration),
    #[error("evaluator exited with {status}")]
    ExitStatus { status: String },
    #[error("malformed score document: {0}")]
    Malformed(String),
    #[error("target has no tensor {0:?}")]
    TargetMismatch(String),
}

/// Produces a fitness for a fully decoded recipe. Higher is better.
pub trait Evaluator: Sync {
    fn evaluate(&self, recipe: &MergeRecipe) -> Result<f64, EvalError>;

    /// Number of evaluations that may run at once.
    fn parallel_evals(&self) -> usize {
        1
    }

    /// Number of times [`Evaluator::evaluate`] has been called.
    fn invocations(&self) -> usize;
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreDocument {
    scores: BTreeMap<String, f64>,
}

/// Mean of the document's scores, optionally weighted per dataset (missing weights count as 1).
pub fn parse_score_document(text: &str, weights: Option<&BTreeMap<String, f64>>) -> Result<f64, EvalError> {
    let doc: ScoreDocument = serde_json::from_str(text.trim()).map_err(|e| EvalError::Malformed(e.to_string()))?;
    if doc.scores.is_empty() {
        return Err(EvalError::Malformed("no scores".into()));
    }
    let (mut total, mut norm) = (0.0, 0.0);
    for (name, &score) in &doc.scores {
        if !(0.0..=100.0).contains(&score) {
            return Err(EvalError::Malformed(format!("score {score} for {name:?} is outside [0, 100]")));
        }
        let w = weights.and_then(|w| w.get(name)).copied().unwrap_or(1.0);
        total += w * score;
        norm += w;
    }
    if norm <= 0.0 {
        return Err(EvalError::Malformed("dataset weights sum to zero".into()));
    }
    Ok(total / norm)
}

/// Quotes `s` for a POSIX shell.
pub fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// Scratch directory for candidate checkpoints.
pub fn scratch_dir() -> PathBuf {
    std::env::var_os(TMPDIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(std::env::temp_dir)
}

/// Runs `sh -c command`, returning stdout. Kills the child after `timeout`.
pub fn run_with_timeout(command: &str, timeout: Duration) -> Result<String, EvalError> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(EvalError::Spawn)?;
    let mut stdout = child.stdout.take().expect("piped stdout");
    let reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stdout.read_to_end(&mut buf);
        buf
    });
    let start = Instant::now();
    let status = loop {
        match child.try_wait().map_err(EvalError::Spawn)? {
            Some(status) => break status,
            None if start.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(EvalError::Timeout(timeout));
            }
            None => std::thread::sleep(Duration::from_millis(5)),
        }
    };
    let out = reader.join().unwrap_or_default();
    if !status.success() {
        return Err(EvalError::ExitStatus {
            status: status.to_string(),
        });
    }
    String::from_utf8(out).map_err(|_| EvalError::Malformed("stdout is not UTF-8".into()))
}

/// Writes each candidate to the scratch directory and scores it with a shell command.
pub struct ExternalCommand {
    pub command_template: String,
    pub timeout: Duration,
    pub parallel_evals: usize,
    pub dataset_weights: Option<BTreeMap<String, f64>>,
    pub scratch: PathBuf,
    pub keep_candidates: bool,
    source: FsCheckpoints,
    calls: AtomicUsize,
}

impl ExternalCommand {
    /// Checkpoints are read relative to `root` and cached across evaluations.
    pub fn new(command_template: impl Into<String>, root: impl Into<PathBuf>) -> Self {
        ExternalCommand {
            command_template: command_template.into(),
            timeout: Duration::from_secs(3600),
            parallel_evals: 1,
            dataset_weights: None,
            scratch: scratch_dir(),
            keep_candidates: false,
            source: FsCheckpoints::cached(root),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn command_for(&self, model: &Path) -> String {
        self.command_template
            .replace(MODEL_PLACEHOLDER, &shell_quote(&model.to_string_lossy()))
    }
}

impl Evaluator for ExternalCommand {
    fn evaluate(&self, recipe: &MergeRecipe) -> Result<f64, EvalError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let merged = merge_model(recipe, &self.source)?;
        let file = tempfile::Builder::new()
            .prefix("candidate-")
            .suffix(".safetensors")
            .tempfile_in(&self.scratch)
            .map_err(EvalError::Scratch)?;
        store_weights(&merged, file.path(), recipe.output_dtype)?;
        let result = run_with_timeout(&self.command_for(file.path()), self.timeout)
            .and_then(|out| parse_score_document(&out, self.dataset_weights.as_ref()));
        if self.keep_candidates {
            let (_, path) = file.keep().map_err(|e| EvalError::Scratch(e.error))?;
            log::info!("kept candidate {}", path.display());
        }
        result
    }

    fn parallel_evals(&self) -> usize {
        self.parallel_evals.max(1)
    }

    fn invocations(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Fitness is the negative L2 distance between the merge and a target checkpoint.
pub struct SyntheticTarget {
    pub target: WeightMap,
    source: FsCheckpoints,
    calls: AtomicUsize,
}

impl SyntheticTarget {
    pub fn new(target: WeightMap, root: impl Into<PathBuf>) -> Self {
        SyntheticTarget {
            target,
            source: FsCheckpoints::cached(root),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_path(target_path: impl AsRef<Path>, root: impl Into<PathBuf>) -> Result<Self, TensorStoreError> {
        Ok(Self::new(load_weights(target_path)?, root))
    }

    /// Negative L2 distance over all tensors of `merged`.
    pub fn score(&self, merged: &WeightMap) -> Result<f64, EvalError> {
        let mut sq = 0.0f64;
        for (name, t) in merged.iter() {
            let target = self
                .target
                .get(name)
                .filter(|x| x.values.len() == t.values.len())
                .ok_or_else(|| EvalError::TargetMismatch(name.clone()))?;
            sq += t
                .values
                .iter()
                .zip(&target.values)
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum::<f64>();
        }
        Ok(-sq.sqrt())
    }
}

impl Evaluator for SyntheticTarget {
    fn evaluate(&self, recipe: &MergeRecipe) -> Result<f64, EvalError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let merged = recipe.output_dtype.apply(&merge_model(recipe, &self.source)?);
        self.score(&merged)
    }

    fn invocations(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Loads every checkpoint a recipe names, so broken paths fail before the search starts.
pub fn check_template_paths(template: &MergeRecipe, source: &dyn CheckpointSource) -> Result<(), MergeError> {
    for path in std::iter::once(&template.base).chain(template.experts.iter().map(|e| &e.path)) {
        source.load(path).map_err(|e| MergeError::Load {
            path: path.clone(),
            source: e,
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_scores() {
        assert_eq!(parse_score_document(r#"{"scores": {"a": 40, "b": 60}}"#, None).unwrap(), 50.0);
        let w: BTreeMap<String, f64> = [("a".to_string(), 3.0)].into_iter().collect();
        assert_eq!(parse_score_document(r#"{"scores": {"a": 40, "b": 60}}"#, Some(&w)).unwrap(), 45.0);
    }

    #[test]
    fn malformed_documents() {
        for bad in ["", "nope", "{}", r#"{"scores": {}}"#, r#"{"scores": {"a": 101}}"#, r#"{"scores": {"a": "x"}}"#] {
            assert!(matches!(parse_score_document(bad, None), Err(EvalError::Malformed(_))), "{bad}");
        }
    }

    #[test]
    fn quoting() {
        assert_eq!(shell_quote("a b"), "'a b'");
        assert_eq!(shell_quote("it's"), r"'it'\''s'");
    }

    #[test]
    fn command_outcomes() {
        assert_eq!(run_with_timeout("echo hi", Duration::from_secs(5)).unwrap(), "hi\n");
        assert!(matches!(
            run_with_timeout("exit 3", Duration::from_secs(5)),
            Err(EvalError::ExitStatus { .. })
        ));
        assert!(matches!(
            run_with_timeout("sleep 5", Duration::from_millis(50)),
            Err(EvalError::Timeout(_))
        ));
    }
}
