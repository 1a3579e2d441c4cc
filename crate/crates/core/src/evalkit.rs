//! Geo-localization metrics: R@N, radius-constrained R_d@N, Top-1 L2
//! distance error, and error histograms.
//!
//! Convention for the prior region: the constrained search is centered on
//! the query's TRUE position. The prior models "we coarsely know where the
//! vehicle is" (last fix plus motion estimate); without a motion model the
//! true position is the stand-in. Queries whose constrained candidate set is
//! empty count as recall failures and are excluded from (but reported next
//! to) the mean L2 error.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodata::geo_distance;
use crate::retrieval::{DescriptorIndex, IndexError, RetrievalResult};

pub const SUCCESS_RADIUS_M: f64 = 50.0;
pub const DEFAULT_PRIOR_RADIUS_M: f64 = 512.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("n must be >= 1")]
    ZeroN,
    #[error("histogram bin edges must be strictly increasing")]
    BadEdges,
    #[error("results and truths differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// A query descriptor with its ground-truth position.
#[derive(Clone, Debug)]
pub struct EvalQuery {
    pub descriptor: Vec<f64>,
    pub truth: (f64, f64),
}

/// Percentage of queries with at least one of the top-n retrieved positions
/// within `success_radius_m` of the query's true position.
pub fn recall_at_n(
    results: &[RetrievalResult],
    truths: &[(f64, f64)],
    n: usize,
    success_radius_m: f64,
) -> Result<f64, EvalError> {
    if n == 0 {
        return Err(EvalError::ZeroN);
    }
    if results.len() != truths.len() {
        return Err(EvalError::LengthMismatch(results.len(), truths.len()));
    }
    if results.is_empty() {
        return Ok(0.0);
    }
    let hits = results
        .iter()
        .zip(truths)
        .filter(|(r, &t)| {
            r.entries
                .iter()
                .take(n)
                .any(|e| geo_distance(e.position, t) <= success_radius_m)
        })
        .count();
    Ok(100.0 * hits as f64 / results.len() as f64)
}

/// R@N with candidates restricted to a radius around each query's true
/// position. Queries with an empty constrained candidate set are failures.
/// Returns (percentage, skipped count).
pub fn recall_prior(
    index: &DescriptorIndex,
    queries: &[EvalQuery],
    n: usize,
    d_m: f64,
) -> Result<(f64, usize), EvalError> {
    if n == 0 {
        return Err(EvalError::ZeroN);
    }
    if queries.is_empty() {
        return Ok((0.0, 0));
    }
    let mut hits = 0usize;
    let mut skipped = 0usize;
    for q in queries {
        let res = index.knn_within(&q.descriptor, n, q.truth, d_m)?;
        if res.localization_failure {
            skipped += 1;
            continue;
        }
        if res
            .entries
            .iter()
            .take(n)
            .any(|e| geo_distance(e.position, q.truth) <= SUCCESS_RADIUS_M)
        {
            hits += 1;
        }
    }
    Ok((100.0 * hits as f64 / queries.len() as f64, skipped))
}

/// Mean Top-1 position error (meters) under the radius prior, plus the
/// per-query errors for evaluated queries and the skipped count.
pub fn l2_error_prior(
    index: &DescriptorIndex,
    queries: &[EvalQuery],
    d_m: f64,
) -> Result<(f64, Vec<f64>, usize), EvalError> {
    let mut errors = Vec::with_capacity(queries.len());
    let mut skipped = 0usize;
    for q in queries {
        let res = index.knn_within(&q.descriptor, 1, q.truth, d_m)?;
        match res.top1() {
            Some(top) => errors.push(geo_distance(top.position, q.truth)),
            None => skipped += 1,
        }
    }
    let mean = if errors.is_empty() {
        0.0
    } else {
        errors.iter().sum::<f64>() / errors.len() as f64
    };
    Ok((mean, errors, skipped))
}

/// Histogram counts per [edge_i, edge_{i+1}) bin plus an overflow bin for
/// values at or beyond the last edge. Values below the first edge land in
/// the first bin so counts always conserve the input length.
pub fn error_histogram(errors: &[f64], bin_edges: &[f64]) -> Result<Vec<usize>, EvalError> {
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::BadEdges);
    }
    let n_bins = bin_edges.len() - 1;
    let mut counts = vec![0usize; n_bins + 1];
    for &e in errors {
        if e >= bin_edges[n_bins] {
            counts[n_bins] += 1;
        } else {
            let mut bin = 0;
            for i in (0..n_bins).rev() {
                if e >= bin_edges[i] {
                    bin = i;
                    break;
                }
            }
            counts[bin] += 1;
        }
    }
    Ok(counts)
}

/// Everything the evaluation stage reports for one model/index pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    /// N -> R@N percentage.
    pub r_at: BTreeMap<usize, f64>,
    /// (prior radius in meters rendered as a key "d=512", N) -> percentage.
    pub r_prior_at: BTreeMap<String, f64>,
    /// prior radius -> mean L2 error (meters).
    pub l2_prior: BTreeMap<String, f64>,
    pub per_query_errors: Vec<f64>,
    pub skipped: usize,
    pub evaluated_queries: usize,
    /// Free-form experiment label, e.g. the ablation cell.
    pub label: String,
}

impl EvalReport {
    pub fn prior_key(d_m: f64, n: usize) -> String {
        format!("d={d_m:.0},n={n}")
    }

    /// Compute the standard metric set (R@{1,5}, R_d@{1,5}, L2^d).
    pub fn compute(
        index: &DescriptorIndex,
        queries: &[EvalQuery],
        d_m: f64,
        label: &str,
    ) -> Result<Self, EvalError> {
        let mut results = Vec::with_capacity(queries.len());
        for q in queries {
            results.push(index.knn(&q.descriptor, 5)?);
        }
        let truths: Vec<(f64, f64)> = queries.iter().map(|q| q.truth).collect();
        let mut r_at = BTreeMap::new();
        for n in [1usize, 5] {
            r_at.insert(n, recall_at_n(&results, &truths, n, SUCCESS_RADIUS_M)?);
        }
        let mut r_prior_at = BTreeMap::new();
        let mut skipped = 0usize;
        for n in [1usize, 5] {
            let (pct, sk) = recall_prior(index, queries, n, d_m)?;
            skipped = skipped.max(sk);
            r_prior_at.insert(Self::prior_key(d_m, n), pct);
        }
        let (mean_err, per_query_errors, sk) = l2_error_prior(index, queries, d_m)?;
        skipped = skipped.max(sk);
        let mut l2_prior = BTreeMap::new();
        l2_prior.insert(format!("d={d_m:.0}"), mean_err);
        Ok(EvalReport {
            r_at,
            r_prior_at,
            l2_prior,
            per_query_errors,
            skipped,
            evaluated_queries: queries.len(),
            label: label.to_string(),
        })
    }

    /// Human-readable table mirroring the five headline metric columns.
    pub fn render_table(&self, d_m: f64) -> String {
        let g = |m: &BTreeMap<usize, f64>, k: usize| m.get(&k).copied().unwrap_or(f64::NAN);
        let gp = |k: &str| self.r_prior_at.get(k).copied().unwrap_or(f64::NAN);
        let l2 = self
            .l2_prior
            .get(&format!("d={d_m:.0}"))
            .copied()
            .unwrap_or(f64::NAN);
        let mut s = String::new();
        s.push_str(&format!("model: {}\n", self.label));
        s.push_str(&format!(
            "{:>8} {:>8} {:>10} {:>10} {:>12}\n",
            "R@1",
            "R@5",
            format!("R_{d_m:.0}@1"),
            format!("R_{d_m:.0}@5"),
            format!("L2^{d_m:.0}(m)")
        ));
        s.push_str(&format!(
            "{:>8.1} {:>8.1} {:>10.1} {:>10.1} {:>12.1}\n",
            g(&self.r_at, 1),
            g(&self.r_at, 5),
            gp(&Self::prior_key(d_m, 1)),
            gp(&Self::prior_key(d_m, 5)),
            l2
        ));
        s.push_str(&format!(
            "queries: {}   skipped (empty prior region): {}\n",
            self.evaluated_queries, self.skipped
        ));
        s
    }

    /// Machine-readable `key = value` lines.
    pub fn render_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("label = {}\n", self.label));
        s.push_str(&format!("queries = {}\n", self.evaluated_queries));
        s.push_str(&format!("skipped = {}\n", self.skipped));
        for (n, v) in &self.r_at {
            s.push_str(&format!("r_at_{n} = {v}\n"));
        }
        for (k, v) in &self.r_prior_at {
            s.push_str(&format!("r_prior[{k}] = {v}\n"));
        }
        for (k, v) in &self.l2_prior {
            s.push_str(&format!("l2_prior[{k}] = {v}\n"));
        }
        s
    }
}

/// CSV with `bin_edge,count` rows; the final row is the overflow bin.
pub fn histogram_csv(bin_edges: &[f64], counts: &[usize]) -> String {
    let mut s = String::from("bin_edge,count\n");
    for (i, c) in counts.iter().enumerate() {
        if i < bin_edges.len() - 1 {
            s.push_str(&format!("{},{}\n", bin_edges[i], c));
        } else {
            s.push_str(&format!("overflow,{c}\n"));
        }
    }
    s
}

/// Minimal bar-chart rendering of a histogram as a PNG.
pub fn histogram_png(counts: &[usize], path: &std::path::Path) -> Result<(), EvalError> {
    let w = (counts.len() * 24).max(64) as u32;
    let h = 128u32;
    let max = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    let img = image::ImageBuffer::from_fn(w, h, |x, y| {
        let bin = (x / 24) as usize;
        let filled = bin < counts.len() && {
            let frac = counts[bin] as f64 / max;
            (h - y) as f64 <= frac * h as f64
        };
        if filled {
            image::Luma([40u8])
        } else {
            image::Luma([230u8])
        }
    });
    img.save(path)
        .map_err(|e| EvalError::Index(IndexError::Io(std::io::Error::other(e))))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::RetrievedTile;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn result_of(positions: &[(f64, f64)]) -> RetrievalResult {
        RetrievalResult {
            entries: positions
                .iter()
                .enumerate()
                .map(|(i, &position)| RetrievedTile {
                    tile_id: i as u64,
                    position,
                    distance: i as f64 * 0.1,
                })
                .collect(),
            localization_failure: false,
        }
    }

    #[test]
    fn perfect_top1_gives_hundred() {
        let truths = vec![(0.0, 0.0), (100.0, 50.0)];
        let results = vec![result_of(&[(0.0, 0.0)]), result_of(&[(100.0, 50.0)])];
        assert_eq!(recall_at_n(&results, &truths, 1, 50.0).unwrap(), 100.0);
    }

    #[test]
    fn rank_counting_matches_example() {
        // one hit at rank 1, one first hit at rank 3
        let truths = vec![(0.0, 0.0), (0.0, 0.0)];
        let results = vec![
            result_of(&[(10.0, 0.0), (500.0, 0.0), (600.0, 0.0)]),
            result_of(&[(500.0, 0.0), (600.0, 0.0), (20.0, 0.0)]),
        ];
        assert_eq!(recall_at_n(&results, &truths, 1, 50.0).unwrap(), 50.0);
        assert_eq!(recall_at_n(&results, &truths, 5, 50.0).unwrap(), 100.0);
    }

    #[test]
    fn recall_matches_brute_force_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let nq = 30;
            let truths: Vec<(f64, f64)> = (0..nq)
                .map(|_| (rng.gen_range(-200.0..200.0), rng.gen_range(-200.0..200.0)))
                .collect();
            let results: Vec<RetrievalResult> = truths
                .iter()
                .map(|_| {
                    let k = rng.gen_range(1..6);
                    let positions: Vec<(f64, f64)> = (0..k)
                        .map(|_| (rng.gen_range(-200.0..200.0), rng.gen_range(-200.0..200.0)))
                        .collect();
                    result_of(&positions)
                })
                .collect();
            for n in [1usize, 3, 5] {
                let got = recall_at_n(&results, &truths, n, 50.0).unwrap();
                let mut hits = 0;
                for (r, t) in results.iter().zip(&truths) {
                    let mut ok = false;
                    for e in r.entries.iter().take(n) {
                        let dx = e.position.0 - t.0;
                        let dy = e.position.1 - t.1;
                        if (dx * dx + dy * dy).sqrt() <= 50.0 {
                            ok = true;
                        }
                    }
                    if ok {
                        hits += 1;
                    }
                }
                assert_eq!(got, 100.0 * hits as f64 / nq as f64);
            }
        }
    }

    #[test]
    fn histogram_example_cases() {
        let counts = error_histogram(&[5.0, 15.0, 205.0], &[0.0, 10.0, 100.0]).unwrap();
        assert_eq!(counts, vec![1, 1, 1]);
        let empty = error_histogram(&[], &[0.0, 10.0, 100.0]).unwrap();
        assert_eq!(empty, vec![0, 0, 0]);
    }

    #[test]
    fn histogram_conserves_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(0..200);
            let errors: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..400.0)).collect();
            let edges = vec![0.0, 25.0, 50.0, 100.0, 200.0];
            let counts = error_histogram(&errors, &edges).unwrap();
            assert_eq!(counts.iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn histogram_bad_edges_rejected() {
        assert!(error_histogram(&[1.0], &[0.0, 0.0, 10.0]).is_err());
        assert!(error_histogram(&[1.0], &[10.0, 0.0]).is_err());
        assert!(error_histogram(&[1.0], &[5.0]).is_err());
    }

    #[test]
    fn recall_nondecreasing_in_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let truths: Vec<(f64, f64)> = (0..40)
            .map(|_| (rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0)))
            .collect();
        let results: Vec<RetrievalResult> = truths
            .iter()
            .map(|_| {
                let positions: Vec<(f64, f64)> = (0..5)
                    .map(|_| (rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0)))
                    .collect();
                result_of(&positions)
            })
            .collect();
        let mut prev = 0.0;
        for n in 1..=5 {
            let r = recall_at_n(&results, &truths, n, 50.0).unwrap();
            assert!(r >= prev, "R@{n} = {r} dropped below R@{} = {prev}", n - 1);
            prev = r;
        }
    }
}
