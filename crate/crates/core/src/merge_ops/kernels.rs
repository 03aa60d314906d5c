//! Per-tensor merge kernels over flat slices.
//!
//! Deltas are f64 so that `base + (expert - base)` reproduces the expert. Every
//! per-position reduction over experts sums its terms in sorted order, which
//! makes the result independent of expert order bit for bit.

use std::cmp::Ordering;

/// Number of entries selected by a fraction of `n`, rounding up.
///
/// A tolerance of 1e-9 absorbs representation error in products like `0.7 * 10`.
pub fn ceil_count(fraction: f64, n: usize) -> usize {
    let exact = fraction * n as f64;
    let k = (exact - 1e-9).ceil().max(0.0) as usize;
    k.min(n)
}

/// Number of entries selected by a fraction of `n`, rounding down.
pub fn floor_count(fraction: f64, n: usize) -> usize {
    let exact = fraction * n as f64;
    let k = (exact + 1e-9).floor().max(0.0) as usize;
    k.min(n)
}

/// Indices ordered by magnitude descending; equal magnitudes keep lower index first.
pub fn magnitude_order(delta: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..delta.len()).collect();
    idx.sort_by(|&a, &b| match delta[b].abs().total_cmp(&delta[a].abs()) {
        Ordering::Equal => a.cmp(&b),
        other => other,
    });
    idx
}

/// Sum of `terms` in ascending total order.
#[inline]
fn canonical_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

#[inline]
fn apply_update(base: f32, update: f64) -> f32 {
    if update == 0.0 {
        base
    } else {
        (base as f64 + update) as f32
    }
}

/// Spherical interpolation between two flattened tensors.
///
/// Returns `v0` at `t = 0` and `v1` at `t = 1` bit for bit. Falls back to
/// linear interpolation when `|cos Ω| > colinear_threshold` or a norm is zero.
pub fn slerp(v0: &[f32], v1: &[f32], t: f64, colinear_threshold: f64) -> Vec<f32> {
    debug_assert_eq!(v0.len(), v1.len());
    if t == 0.0 {
        return v0.to_vec();
    }
    if t == 1.0 {
        return v1.to_vec();
    }
    let (mut dot, mut n0, mut n1) = (0f64, 0f64, 0f64);
    for (&a, &b) in v0.iter().zip(v1) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        n0 += a * a;
        n1 += b * b;
    }
    let (n0, n1) = (n0.sqrt(), n1.sqrt());
    let (c0, c1) = if n0 == 0.0 || n1 == 0.0 {
        (1.0 - t, t)
    } else {
        let cos = (dot / (n0 * n1)).clamp(-1.0, 1.0);
        if cos.abs() > colinear_threshold {
            (1.0 - t, t)
        } else {
            let omega = cos.acos();
            let sin = omega.sin();
            (((1.0 - t) * omega).sin() / sin, (t * omega).sin() / sin)
        }
    };
    v0.iter()
        .zip(v1)
        .map(|(&a, &b)| (c0 * a as f64 + c1 * b as f64) as f32)
        .collect()
}

/// Whether [`slerp`] would take its linear fallback for these inputs.
pub fn slerp_is_linear(v0: &[f32], v1: &[f32], colinear_threshold: f64) -> bool {
    let (mut dot, mut n0, mut n1) = (0f64, 0f64, 0f64);
    for (&a, &b) in v0.iter().zip(v1) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        n0 += a * a;
        n1 += b * b;
    }
    if n0 == 0.0 || n1 == 0.0 {
        return true;
    }
    (dot / (n0.sqrt() * n1.sqrt())).clamp(-1.0, 1.0).abs() > colinear_threshold
}

/// `base + λ Σ w_i δ_i`.
pub fn task_arithmetic(base: &[f32], deltas: &[&[f64]], weights: &[f64], lambda: f64) -> Vec<f32> {
    let mut terms = vec![0f64; deltas.len()];
    (0..base.len())
        .map(|i| {
            for (slot, (d, w)) in terms.iter_mut().zip(deltas.iter().zip(weights)) {
                *slot = w * d[i];
            }
            apply_update(base[i], lambda * canonical_sum(&mut terms))
        })
        .collect()
}

/// Keeps the `⌈density·n⌉` largest-magnitude entries of `delta`, zeroing the rest.
pub fn ties_trim(delta: &[f64], density: f64) -> Vec<f64> {
    let keep = ceil_count(density, delta.len());
    let mut out = vec![0f64; delta.len()];
    for &i in magnitude_order(delta).iter().take(keep) {
        out[i] = delta[i];
    }
    out
}

/// Trim, elect sign, disjoint mean; result is `base + λ · merged`.
pub fn ties(base: &[f32], deltas: &[&[f64]], weights: &[f64], density: f64, lambda: f64) -> Vec<f32> {
    let trimmed: Vec<Vec<f64>> = deltas.iter().map(|d| ties_trim(d, density)).collect();
    let mut terms = vec![0f64; deltas.len()];
    let mut agreeing = Vec::with_capacity(deltas.len());
    (0..base.len())
        .map(|i| {
            for (slot, (d, w)) in terms.iter_mut().zip(trimmed.iter().zip(weights)) {
                *slot = w * d[i];
            }
            let elected = canonical_sum(&mut terms);
            let merged = if elected == 0.0 || elected.is_nan() {
                0.0
            } else {
                agreeing.clear();
                agreeing.extend(
                    terms
                        .iter()
                        .copied()
                        .filter(|c| *c != 0.0 && (*c > 0.0) == (elected > 0.0)),
                );
                // `terms` is already sorted, so `agreeing` is too.
                agreeing.iter().sum::<f64>() / agreeing.len() as f64
            };
            apply_update(base[i], lambda * merged)
        })
        .collect()
}

/// Zeroes the `⌊β·n⌋` largest and `⌊γ·n⌋` smallest-magnitude entries.
pub fn breadcrumbs_mask(delta: &[f64], beta_top: f64, gamma_bottom: f64) -> Vec<f64> {
    let n = delta.len();
    let top = floor_count(beta_top, n);
    let bottom = floor_count(gamma_bottom, n);
    let mut out = delta.to_vec();
    let order = magnitude_order(delta);
    for &i in order.iter().take(top) {
        out[i] = 0.0;
    }
    for &i in order.iter().rev().take(bottom) {
        out[i] = 0.0;
    }
    out
}

pub fn breadcrumbs(
    base: &[f32],
    deltas: &[&[f64]],
    weights: &[f64],
    beta_top: f64,
    gamma_bottom: f64,
    lambda: f64,
) -> Vec<f32> {
    let masked: Vec<Vec<f64>> = deltas
        .iter()
        .map(|d| breadcrumbs_mask(d, beta_top, gamma_bottom))
        .collect();
    let refs: Vec<&[f64]> = masked.iter().map(Vec::as_slice).collect();
    task_arithmetic(base, &refs, weights, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_round_as_documented() {
        assert_eq!(ceil_count(2.0 / 3.0, 3), 2);
        assert_eq!(ceil_count(0.7, 10), 7);
        assert_eq!(ceil_count(0.01, 3), 1);
        assert_eq!(ceil_count(1.0, 5), 5);
        assert_eq!(floor_count(0.2, 5), 1);
        assert_eq!(floor_count(0.2, 1), 0);
        assert_eq!(floor_count(0.29, 100), 29);
    }

    #[test]
    fn magnitude_ties_prefer_lower_index() {
        assert_eq!(magnitude_order(&[1.0, -2.0, 2.0, 0.5]), vec![1, 2, 0, 3]);
        assert_eq!(ties_trim(&[1.0, -1.0, 1.0], 0.5), vec![1.0, -1.0, 0.0]);
    }

    #[test]
    fn ties_worked_example() {
        let base = [0.0f32; 3];
        let t1 = [1.0, -2.0, 0.3];
        let t2 = [0.5, 1.0, -0.4];
        assert_eq!(ties_trim(&t1, 2.0 / 3.0), vec![1.0, -2.0, 0.0]);
        assert_eq!(ties_trim(&t2, 2.0 / 3.0), vec![0.5, 1.0, 0.0]);
        let out = ties(&base, &[&t1, &t2], &[1.0, 1.0], 2.0 / 3.0, 1.0);
        assert_eq!(out, vec![0.75, -2.0, 0.0]);
    }

    #[test]
    fn breadcrumbs_worked_example() {
        let d = [0.1, 0.5, -3.0, 0.2, 0.05];
        assert_eq!(breadcrumbs_mask(&d, 0.2, 0.2), vec![0.1, 0.5, 0.0, 0.2, 0.0]);
        assert_eq!(breadcrumbs_mask(&[0.7], 0.2, 0.0), vec![0.7]);
    }

    #[test]
    fn task_arithmetic_hand_example() {
        let out = task_arithmetic(&[0.0, 0.0], &[&[1.0, -2.0], &[3.0, 4.0]], &[0.5, 0.5], 2.0);
        assert_eq!(out, vec![4.0, 2.0]);
    }

    #[test]
    fn zero_update_keeps_negative_zero() {
        let out = task_arithmetic(&[-0.0], &[&[0.0]], &[1.0], 1.0);
        assert_eq!(out[0].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn slerp_quarter_circle() {
        let out = slerp(&[1.0, 0.0], &[0.0, 1.0], 0.5, 0.9995);
        for v in out {
            assert!((v as f64 - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        }
    }

    #[test]
    fn slerp_colinear_uses_lerp() {
        let v = [0.3f32, -1.2, 4.0];
        assert!(slerp_is_linear(&v, &v, 0.9995));
        assert_eq!(slerp(&v, &v, 0.5, 0.9995), v.to_vec());
        assert!(slerp_is_linear(&[0.0, 0.0], &[1.0, 2.0], 0.9995));
        assert!(!slerp_is_linear(&[1.0, 0.0], &[0.0, 1.0], 0.9995));
    }
}
