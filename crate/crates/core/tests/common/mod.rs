//! Reference implementations used as test oracles.
//!
//! These compute ranks by counting competitors instead of sorting, sum in index
//! order, and share no code with the library.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::path::Path;

use mergeforge::evolve::SearchConfig;
use mergeforge::recipe::{parse_recipe, MergeRecipe};
use mergeforge::tensor_store::{encode_weights, round_trip, store_weights, DType, DtypePolicy, Tensor, WeightMap};

/// Position of `i` when entries are ordered by magnitude descending, lower index first on ties.
pub fn desc_rank(delta: &[f64], i: usize) -> usize {
    (0..delta.len())
        .filter(|&j| {
            let (a, b) = (delta[j].abs(), delta[i].abs());
            a > b || (a == b && j < i)
        })
        .count()
}

/// Smallest integer `k` with `k ≥ x`, for `x` away from integer boundaries.
fn ceil_of(x: f64) -> usize {
    let mut k = 0usize;
    while (k as f64) < x - 1e-9 {
        k += 1;
    }
    k
}

/// Largest integer `k` with `k ≤ x`.
fn floor_of(x: f64) -> usize {
    let mut k = 0usize;
    while ((k + 1) as f64) <= x + 1e-9 {
        k += 1;
    }
    k
}

fn combine(base: f32, update: f64) -> f32 {
    if update == 0.0 {
        base
    } else {
        (base as f64 + update) as f32
    }
}

pub fn ties(base: &[f32], deltas: &[Vec<f64>], weights: &[f64], density: f64, lambda: f64) -> Vec<f32> {
    let n = base.len();
    let keep = ceil_of(density * n as f64);
    let trimmed: Vec<Vec<f64>> = deltas
        .iter()
        .map(|d| (0..n).map(|i| if desc_rank(d, i) < keep { d[i] } else { 0.0 }).collect())
        .collect();
    (0..n)
        .map(|i| {
            let mut elected = 0.0;
            for (d, w) in trimmed.iter().zip(weights) {
                elected += w * d[i];
            }
            let mut sum = 0.0;
            let mut count = 0usize;
            for (d, w) in trimmed.iter().zip(weights) {
                let c = w * d[i];
                if c != 0.0 && elected != 0.0 && (c > 0.0) == (elected > 0.0) {
                    sum += c;
                    count += 1;
                }
            }
            let merged = if count == 0 { 0.0 } else { sum / count as f64 };
            combine(base[i], lambda * merged)
        })
        .collect()
}

pub fn breadcrumbs(
    base: &[f32],
    deltas: &[Vec<f64>],
    weights: &[f64],
    beta: f64,
    gamma: f64,
    lambda: f64,
) -> Vec<f32> {
    let n = base.len();
    let top = floor_of(beta * n as f64);
    let bottom = floor_of(gamma * n as f64);
    (0..n)
        .map(|i| {
            let mut sum = 0.0;
            for (d, w) in deltas.iter().zip(weights) {
                let r = desc_rank(d, i);
                let masked = r < top || n - 1 - r < bottom;
                if !masked {
                    sum += w * d[i];
                }
            }
            combine(base[i], lambda * sum)
        })
        .collect()
}

pub fn task_arithmetic(base: &[f32], deltas: &[Vec<f64>], weights: &[f64], lambda: f64) -> Vec<f32> {
    (0..base.len())
        .map(|i| {
            let mut sum = 0.0;
            for (d, w) in deltas.iter().zip(weights) {
                sum += w * d[i];
            }
            combine(base[i], lambda * sum)
        })
        .collect()
}

/// Random multiple of 1/16 in [-4, 4].
pub fn dyadic(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-64i32..=64) as f64 / 16.0
}

/// Random multiple of 1/4 in `[lo, hi]`.
pub fn quarter(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let k = rng.random_range((lo * 4.0) as i32..=(hi * 4.0) as i32);
    k as f64 / 4.0
}

/// Random operator case with exactly representable values.
#[derive(Debug, Clone)]
pub struct Case {
    pub base: Vec<f32>,
    pub deltas: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub density: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Case {
    pub fn random(rng: &mut ChaCha8Rng) -> Case {
        let n = rng.random_range(1..=16);
        let experts = rng.random_range(1..=4);
        let base: Vec<f32> = (0..n).map(|_| dyadic(rng) as f32).collect();
        let deltas = (0..experts)
            .map(|_| {
                (0..n)
                    .map(|_| if rng.random_bool(0.15) { 0.0 } else { dyadic(rng) })
                    .collect()
            })
            .collect();
        let weights = (0..experts).map(|_| quarter(rng, 0.0, 1.5)).collect();
        let lambda = quarter(rng, 0.25, 2.0);
        let density = rng.random_range(0.01..=1.0);
        let beta = rng.random_range(0.0..0.5);
        let gamma = rng.random_range(0.0..0.5);
        Case {
            base,
            deltas,
            weights,
            lambda,
            density,
            beta,
            gamma,
        }
    }

    pub fn base_map(&self) -> WeightMap {
        let mut w = WeightMap::new();
        w.insert("t", Tensor::new(vec![self.base.len() as u64], DType::F32, self.base.clone()))
            .unwrap();
        w
    }

    /// Expert checkpoints `base + delta`; exact because every value is dyadic.
    pub fn expert_maps(&self) -> Vec<WeightMap> {
        self.deltas
            .iter()
            .map(|d| {
                let values: Vec<f32> = self.base.iter().zip(d).map(|(b, x)| (*b as f64 + x) as f32).collect();
                let mut w = WeightMap::new();
                w.insert("t", Tensor::new(vec![values.len() as u64], DType::F32, values))
                    .unwrap();
                w
            })
            .collect()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub fn sample_checkpoint() -> WeightMap {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut w = WeightMap::new();
    for (name, dtype, shape) in [
        ("model.embed", DType::BF16, vec![4u64, 8]),
        ("model.layers.0.weight", DType::F16, vec![3, 5]),
        ("model.norm", DType::F32, vec![7]),
        ("scalar", DType::F32, vec![]),
        ("empty", DType::F16, vec![0, 3]),
    ] {
        let n: u64 = shape.iter().product();
        let values: Vec<f32> = (0..n)
            .map(|_| round_trip(rng.random_range(-4.0..4.0), dtype))
            .collect();
        w.insert(name, Tensor::new(shape, dtype, values)).unwrap();
    }
    w.metadata = Some([("format".to_string(), "pt".to_string())].into_iter().collect());
    w
}

fn frame(header: &str, data: &[u8]) -> Vec<u8> {
    let mut out = (header.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(data);
    out
}

/// Files that must be rejected: header truncations, malformed entries and bad length prefixes.
pub fn corrupt_corpus() -> Vec<(String, Vec<u8>)> {
    let valid = encode_weights(&sample_checkpoint(), DtypePolicy::Preserve);
    let header_len = u64::from_le_bytes(valid[..8].try_into().unwrap()) as usize;
    let mut corpus = Vec::new();
    // Every cut that ends inside the length prefix or header.
    for cut in 0..8 + header_len {
        corpus.push((format!("truncated at {cut}"), valid[..cut].to_vec()));
    }
    // Data region one byte short.
    corpus.push(("short data".into(), valid[..valid.len() - 1].to_vec()));
    let f32x2 = [0u8; 8];
    for (label, header) in [
        ("not json", "hello"),
        ("array", "[]"),
        ("tensor not object", r#"{"a": 3}"#),
        ("unknown dtype", r#"{"a": {"dtype": "I8", "shape": [2], "data_offsets": [0, 8]}}"#),
        ("missing shape", r#"{"a": {"dtype": "F32", "data_offsets": [0, 8]}}"#),
        ("negative dim", r#"{"a": {"dtype": "F32", "shape": [-2], "data_offsets": [0, 8]}}"#),
        ("float dim", r#"{"a": {"dtype": "F32", "shape": [2.5], "data_offsets": [0, 8]}}"#),
        ("reversed offsets", r#"{"a": {"dtype": "F32", "shape": [2], "data_offsets": [8, 0]}}"#),
        ("one offset", r#"{"a": {"dtype": "F32", "shape": [2], "data_offsets": [0]}}"#),
        ("out of range", r#"{"a": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]}}"#),
        ("size mismatch", r#"{"a": {"dtype": "F32", "shape": [3], "data_offsets": [0, 8]}}"#),
        ("duplicate", r#"{"a": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}, "a": {"dtype": "F32", "shape": [1], "data_offsets": [4, 8]}}"#),
        ("overlap", r#"{"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}, "b": {"dtype": "F32", "shape": [1], "data_offsets": [4, 8]}}"#),
        ("overflowing shape", r#"{"a": {"dtype": "F32", "shape": [4294967296, 4294967296], "data_offsets": [0, 8]}}"#),
        ("bad metadata", r#"{"__metadata__": {"k": 1}}"#),
        ("trailing garbage", r#"{} x"#),
    ] {
        corpus.push((label.to_string(), frame(header, &f32x2)));
    }
    let mut invalid_utf8 = frame("{\"a\": 1}", &f32x2);
    invalid_utf8[10] = 0xff;
    corpus.push(("invalid utf-8".into(), invalid_utf8));
    let mut huge = valid.clone();
    huge[..8].copy_from_slice(&u64::MAX.to_le_bytes());
    corpus.push(("huge header length".into(), huge));
    let mut past_end = valid.clone();
    past_end[..8].copy_from_slice(&((valid.len() as u64) + 10).to_le_bytes());
    corpus.push(("header length past end".into(), past_end));
    corpus
}

pub const W_STAR: [f64; 2] = [0.35, 1.1];

pub struct Toy {
    pub dir: tempfile::TempDir,
    pub base: Vec<f32>,
    pub deltas: Vec<Vec<f64>>,
}

pub fn single(values: Vec<f32>) -> WeightMap {
    let mut w = WeightMap::new();
    w.insert("w", Tensor::new(vec![4, 4], DType::F32, values)).unwrap();
    w
}

/// Base and two experts with 16-element tensors, written to a temporary directory.
pub fn toy() -> Toy {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(77);
    let base: Vec<f32> = (0..16).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut deltas = Vec::new();
    store_weights(&single(base.clone()), dir.path().join("base.safetensors"), DtypePolicy::Preserve).unwrap();
    for i in 0..2 {
        let expert: Vec<f32> = base.iter().map(|b| b + r.random_range(-0.5..0.5)).collect();
        deltas.push(expert.iter().zip(&base).map(|(e, b)| *e as f64 - *b as f64).collect());
        store_weights(&single(expert), dir.path().join(format!("e{i}.safetensors")), DtypePolicy::Preserve).unwrap();
    }
    Toy { dir, base, deltas }
}

pub fn toy_template(dir: &Path) -> MergeRecipe {
    let mut r = parse_recipe(
        r#"{"base": "base.safetensors", "experts": [{"path": "e0.safetensors", "weight": 1.0},
            {"path": "e1.safetensors", "weight": 1.0}], "method": "task_arithmetic", "seed": 1}"#,
    )
    .unwrap();
    r.origin = Some(dir.join("template.json"));
    r
}

/// Budget 500, population 20, every gene except the weights pinned.
pub fn toy_config(seed: u64) -> SearchConfig {
    SearchConfig {
        budget: 500,
        population_size: 20,
        seed,
        pins: ["method", "lambda", "density", "beta", "gamma", "drop"]
            .iter()
            .zip([0.0, 1.0, 1.0, 0.0, 0.0, 0.0])
            .map(|(n, v)| (n.to_string(), v))
            .collect(),
    }
}

