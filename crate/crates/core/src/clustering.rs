//! Seeded spherical k-means and the per-modality prototype sets built from it.
//!
//! Points and centroids live on the unit sphere. Assignment maximizes cosine,
//! centroids are normalized member means, and inertia is `Σ (1 − cos)` to the
//! assigned centroid. Seeding is k-means++ on the chordal distance.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::matrix::{dot, guarded_norm};
use crate::nn::Matrix;
use crate::rng::{derive_seed, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansParams {
    pub max_iters: usize,
    /// Independent seeded runs; the lowest-inertia one is returned.
    pub restarts: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iters: 100,
            restarts: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every Lloyd iteration of the returned run.
    pub inertia_trace: Vec<f64>,
    pub converged: bool,
}

/// Spherical inertia of a partition under the given centroids.
pub fn inertia(points: &Matrix, centroids: &Matrix, assignments: &[usize]) -> f64 {
    points
        .row_iter()
        .zip(assignments)
        .map(|(x, &a)| 1.0 - dot(x, centroids.row(a)))
        .sum()
}

fn distinct_rows(points: &Matrix) -> usize {
    let mut rows: Vec<Vec<u64>> = points
        .row_iter()
        .map(|r| r.iter().map(|x| x.to_bits()).collect())
        .collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

fn argmax_cos(x: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, c) in centroids.row_iter().enumerate() {
        let s = dot(x, c);
        if s > best.1 {
            best = (k, s);
        }
    }
    best
}

fn plus_plus_init<R: Rng>(points: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut closest: Vec<f64> = points
        .row_iter()
        .map(|x| (1.0 - dot(x, points.row(chosen[0]))).max(0.0))
        .collect();
    while chosen.len() < k {
        let total: f64 = closest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = None;
            for (i, &w) in closest.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // every point coincides with a chosen centroid
            (0..n).find(|i| !chosen.contains(i)).expect("k ≤ n")
        };
        chosen.push(next);
        for (i, c) in closest.iter_mut().enumerate() {
            *c = c.min((1.0 - dot(points.row(i), points.row(next))).max(0.0));
        }
    }
    points.gather_rows(&chosen)
}

fn lloyd<R: Rng>(points: &Matrix, k: usize, max_iters: usize, rng: &mut R) -> KMeansResult {
    let n = points.rows();
    let mut centroids = plus_plus_init(points, k, rng);
    let mut previous: Option<Vec<usize>> = None;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut assignments = vec![0; n];
    for _ in 0..max_iters.max(1) {
        let mut best_cos = vec![0.0; n];
        for (i, x) in points.row_iter().enumerate() {
            (assignments[i], best_cos[i]) = argmax_cos(x, &centroids);
        }
        let mut counts = vec![0usize; k];
        assignments.iter().for_each(|&a| counts[a] += 1);
        // empty-cluster repair: hand the worst-fitting point (whose cluster
        // keeps at least one member) to the empty cluster
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let (worst, _) = (0..n)
                .filter(|&i| counts[assignments[i]] > 1)
                .map(|i| (i, best_cos[i]))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .expect("k ≤ n leaves a cluster with spare members");
            counts[assignments[worst]] -= 1;
            counts[empty] += 1;
            assignments[worst] = empty;
            best_cos[worst] = 1.0;
        }

        let d = points.cols();
        let mut sums = Matrix::zeros(k, d);
        for (x, &a) in points.row_iter().zip(&assignments) {
            sums.row_mut(a).iter_mut().zip(x).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            let s = sums.row(c);
            // a zero sum scores every direction equally; keep the old centroid
            if guarded_norm(s) > 1e-12 {
                let n = guarded_norm(s);
                let normed: Vec<f64> = s.iter().map(|v| v / n).collect();
                centroids.row_mut(c).copy_from_slice(&normed);
            }
        }

        let value = inertia(points, &centroids, &assignments);
        if let Some(&last) = trace.last() {
            debug_assert!(value <= last + 1e-9, "inertia rose from {last} to {value}");
        }
        trace.push(value);
        if previous.as_ref() == Some(&assignments) {
            converged = true;
            break;
        }
        previous = Some(assignments.clone());
    }
    KMeansResult {
        inertia: *trace.last().unwrap(),
        centroids,
        assignments,
        inertia_trace: trace,
        converged,
    }
}

/// Spherical k-means with k-means++ seeding.
///
/// Stops when assignments are unchanged between two iterations or after
/// `max_iters`. Deterministic for a given `seed`.
pub fn kmeans(points: &Matrix, k: usize, seed: u64, params: &KMeansParams) -> Result<KMeansResult> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("cannot form {k} clusters from {n} points")));
    }
    if !points.is_finite() {
        return Err(Error::Numeric("non-finite point".into()));
    }
    if k > 1 {
        let distinct = distinct_rows(points);
        if distinct < k {
            return Err(Error::Degenerate(format!(
                "{k} clusters requested but only {distinct} distinct points"
            )));
        }
    }
    let mut best: Option<KMeansResult> = None;
    for restart in 0..params.restarts.max(1) {
        let mut rng = substream(seed, "kmeans", restart as u64);
        let run = lloyd(points, k, params.max_iters, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

/// One clustering of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centroids: Matrix,
    /// Centroid index per training instance.
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }
}

/// The `R` clusterings of one modality, in `K_list` order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrototypeSet {
    clusterings: Vec<Clustering>,
}

impl PrototypeSet {
    pub fn new(clusterings: Vec<Clustering>) -> Self {
        Self { clusterings }
    }

    pub fn clusterings(&self) -> &[Clustering] {
        &self.clusterings
    }

    pub fn num_clusterings(&self) -> usize {
        self.clusterings.len()
    }

    pub fn k_list(&self) -> Vec<usize> {
        self.clusterings.iter().map(Clustering::k).collect()
    }

    pub fn write_to(&self, c: &mut Container, prefix: &str) {
        c.put_u64(format!("{prefix}.r"), vec![self.clusterings.len() as u64]);
        for (r, cl) in self.clusterings.iter().enumerate() {
            c.put_matrix(format!("{prefix}.r{r}.centroids"), &cl.centroids);
            c.put_u64(
                format!("{prefix}.r{r}.assignments"),
                cl.assignments.iter().map(|&a| a as u64).collect(),
            );
            c.put_f64(format!("{prefix}.r{r}.inertia"), vec![cl.inertia]);
        }
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let r = c.u64_scalar(&format!("{prefix}.r"))?;
        let clusterings = (0..r)
            .map(|r| {
                let centroids = c.matrix(&format!("{prefix}.r{r}.centroids"))?;
                let assignments: Vec<usize> = c
                    .u64s(&format!("{prefix}.r{r}.assignments"))?
                    .iter()
                    .map(|&a| a as usize)
                    .collect();
                if assignments.iter().any(|&a| a >= centroids.rows()) {
                    return Err(Error::Load(format!("{prefix}.r{r}: assignment out of range")));
                }
                let inertia = c.f64s(&format!("{prefix}.r{r}.inertia"))?[0];
                Ok(Clustering {
                    centroids,
                    assignments,
                    inertia,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { clusterings })
    }
}

/// Thread count for parallel kernels, from `CMPC_THREADS` (default 1).
pub fn kernel_threads() -> usize {
    std::env::var("CMPC_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or(1)
}

/// Cluster each modality's memory snapshot once per entry of `k_list`.
///
/// Modalities are clustered separately. Each of the `2R` runs has its own
/// seed derived from `seed`, so results do not depend on execution order.
pub fn build_prototypes(
    voice_snapshot: &Matrix,
    face_snapshot: &Matrix,
    k_list: &[usize],
    seed: u64,
    params: &KMeansParams,
) -> Result<(PrototypeSet, PrototypeSet)> {
    if k_list.is_empty() {
        return Err(Error::Argument("empty cluster-count list".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..2).flat_map(|m| (0..k_list.len()).map(move |r| (m, r))).collect();
    let run = |&(m, r): &(usize, usize)| -> Result<Clustering> {
        let (points, name) = if m == 0 {
            (voice_snapshot, "prototypes.voice")
        } else {
            (face_snapshot, "prototypes.face")
        };
        let res = kmeans(points, k_list[r], derive_seed(seed, name, r as u64), params)?;
        Ok(Clustering {
            centroids: res.centroids,
            assignments: res.assignments,
            inertia: res.inertia,
        })
    };
    let threads = kernel_threads();
    let results: Vec<Result<Clustering>> = if threads > 1 {
        use rayon::prelude::*;
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::State(format!("thread pool: {e}")))?
            .install(|| jobs.par_iter().map(run).collect())
    } else {
        jobs.iter().map(run).collect()
    };
    let mut all = results.into_iter().collect::<Result<Vec<_>>>()?;
    let face = all.split_off(k_list.len());
    Ok((PrototypeSet::new(all), PrototypeSet::new(face)))
}

/// Dump both prototype sets as `prototypes_epoch{epoch}.bin` plus a JSON index.
pub fn dump_prototypes(dir: &Path, epoch: u64, voice: &PrototypeSet, face: &PrototypeSet) -> Result<()> {
    let stem = format!("prototypes_epoch{epoch:03}");
    let mut c = Container::new("prototypes");
    voice.write_to(&mut c, "voice");
    face.write_to(&mut c, "face");
    c.write_file(&dir.join(format!("{stem}.bin")))?;
    let index = serde_json::json!({
        "epoch": epoch,
        "file": format!("{stem}.bin"),
        "voice": voice.clusterings().iter().map(|cl| serde_json::json!({"k": cl.k(), "inertia": cl.inertia})).collect::<Vec<_>>(),
        "face": face.clusterings().iter().map(|cl| serde_json::json!({"k": cl.k(), "inertia": cl.inertia})).collect::<Vec<_>>(),
    });
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))
}

/// Fraction of points whose label is the majority label of their cluster.
pub fn purity(assignments: &[usize], labels: &[usize]) -> f64 {
    use std::collections::BTreeMap;
    let mut table: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&a, &l) in assignments.iter().zip(labels) {
        *table.entry(a).or_default().entry(l).or_default() += 1;
    }
    let hits: usize = table.values().map(|m| m.values().max().copied().unwrap_or(0)).sum();
    hits as f64 / assignments.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle(angles: &[f64]) -> Matrix {
        Matrix::from_rows(&angles.iter().map(|a| [a.cos(), a.sin()]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn antipodal_pairs_split_like_brute_force() {
        let pts = circle(&[0.0, 0.1, std::f64::consts::PI, std::f64::consts::PI + 0.1]);
        let res = kmeans(&pts, 2, 3, &KMeansParams::default()).unwrap();
        assert_eq!(res.assignments[0], res.assignments[1]);
        assert_eq!(res.assignments[2], res.assignments[3]);
        assert_ne!(res.assignments[0], res.assignments[2]);

        // exhaustive: best 2-partition (non-empty) by optimal spherical inertia
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1..(1u32 << 4) - 1 {
            let cost: f64 = (0..2)
                .map(|side| {
                    let members: Vec<usize> = (0..4).filter(|&i| ((mask >> i) & 1) == side).collect();
                    let mut s = [0.0; 2];
                    for &i in &members {
                        s[0] += pts.get(i, 0);
                        s[1] += pts.get(i, 1);
                    }
                    members.len() as f64 - (s[0] * s[0] + s[1] * s[1]).sqrt()
                })
                .sum();
            if cost < best.0 {
                best = (cost, mask);
            }
        }
        assert!((res.inertia - best.0).abs() < 1e-12);
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let pts = circle(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let res = kmeans(&pts, 5, 0, &KMeansParams::default()).unwrap();
        assert!(res.inertia.abs() < 1e-12);
        let mut a = res.assignments.clone();
        a.sort_unstable();
        a.dedup();
        assert_eq!(a.len(), 5);
    }

    #[test]
    fn single_cluster_is_normalized_mean() {
        let pts = circle(&[0.2, 0.5, 1.1, 1.4]);
        let res = kmeans(&pts, 1, 0, &KMeansParams::default()).unwrap();
        let (sx, sy) = pts.row_iter().fold((0.0, 0.0), |acc, r| (acc.0 + r[0], acc.1 + r[1]));
        let n = (sx * sx + sy * sy).sqrt();
        assert!((res.centroids.get(0, 0) - sx / n).abs() < 1e-12);
        assert!((res.centroids.get(0, 1) - sy / n).abs() < 1e-12);
    }

    #[test]
    fn argument_and_degenerate_errors() {
        let pts = circle(&[0.0, 1.0]);
        assert!(matches!(kmeans(&pts, 3, 0, &KMeansParams::default()), Err(Error::Argument(_))));
        let same = circle(&[0.7, 0.7, 0.7]);
        assert!(matches!(kmeans(&same, 2, 0, &KMeansParams::default()), Err(Error::Degenerate(_))));
        assert!(kmeans(&same, 1, 0, &KMeansParams::default()).is_ok());
    }

    #[test]
    fn inertia_trace_is_nonincreasing_and_centroids_unit() {
        let angles: Vec<f64> = (0..60).map(|i| (i as f64 * 0.77).sin() * 3.0).collect();
        let pts = circle(&angles);
        for seed in 0..20 {
            let res = kmeans(&pts, 6, seed, &KMeansParams::default()).unwrap();
            assert!(res.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
            for c in res.centroids.row_iter() {
                assert!((crate::nn::matrix::norm(c) - 1.0).abs() < 1e-9);
            }
            let mut used = res.assignments.clone();
            used.sort_unstable();
            used.dedup();
            assert_eq!(used.len(), 6, "no empty cluster");
        }
    }

    #[test]
    fn prototypes_shape_and_determinism() {
        let v = circle(&(0..20).map(|i| i as f64 * 0.3).collect::<Vec<_>>());
        let f = circle(&(0..20).map(|i| i as f64 * 0.2 + 1.0).collect::<Vec<_>>());
        let (pv, pf) = build_prototypes(&v, &f, &[2, 3, 4], 11, &KMeansParams::default()).unwrap();
        assert_eq!(pv.k_list(), vec![2, 3, 4]);
        assert_eq!(pf.num_clusterings(), 3);
        let again = build_prototypes(&v, &f, &[2, 3, 4], 11, &KMeansParams::default()).unwrap();
        assert_eq!((pv.clone(), pf.clone()), again);

        let mut c = Container::new("p");
        pv.write_to(&mut c, "voice");
        assert_eq!(PrototypeSet::read_from(&c, "voice").unwrap(), pv);
    }

    #[test]
    fn purity_counts_majorities() {
        assert_eq!(purity(&[0, 0, 1, 1], &[5, 5, 6, 7]), 0.75);
    }
}
