//! K-means, centroid-nearest set extraction and silhouette-based selection
//! of the number of clusters.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::samples::squared_distance;
use crate::{rng, usage, Result, SampleSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansParams {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self { k, restarts: 10, max_iter: 100, seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: SampleSet,
    pub assignment: Vec<usize>,
    pub inertia: f64,
}

/// Lloyd's algorithm with k-means++ seeding; the restart with the lowest
/// inertia wins (earliest restart on ties).
pub fn kmeans(data: &SampleSet, params: &KMeansParams) -> Result<KMeans> {
    let n = data.len();
    if params.k == 0 {
        return Err(usage!("k must be positive"));
    }
    if params.k > n {
        return Err(usage!("k = {} exceeds the {n} points to cluster", params.k));
    }
    let mut best: Option<KMeans> = None;
    for r in 0..params.restarts.max(1) {
        let run = lloyd(data, params.k, params.max_iter, &mut rng::stream(params.seed, r as u64));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn plus_plus_init(data: &SampleSet, k: usize, rng: &mut rng::Rng) -> SampleSet {
    let n = data.len();
    let mut centroids = SampleSet::empty(data.dim());
    let first = rng.random_range(0..n);
    centroids.push(data.row(first)).expect("same dim");
    let mut d2: Vec<f64> = data
        .rows()
        .map(|x| f64::from(squared_distance(x, data.row(first))))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            // All points coincide with a centroid; any choice is as good.
            rng.random_range(0..n)
        };
        centroids.push(data.row(pick)).expect("same dim");
        let c = centroids.row(centroids.len() - 1).to_vec();
        for (i, x) in data.rows().enumerate() {
            d2[i] = d2[i].min(f64::from(squared_distance(x, &c)));
        }
    }
    centroids
}

fn nearest(x: &[f32], centroids: &SampleSet) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (j, c) in centroids.rows().enumerate() {
        let d = squared_distance(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn lloyd(data: &SampleSet, k: usize, max_iter: usize, rng: &mut rng::Rng) -> KMeans {
    let n = data.len();
    let dim = data.dim();
    let mut centroids = plus_plus_init(data, k, rng);
    let mut assignment = vec![usize::MAX; n];
    let mut dist = vec![0f32; n];
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for (i, x) in data.rows().enumerate() {
            let (j, d) = nearest(x, &centroids);
            dist[i] = d;
            if assignment[i] != j {
                assignment[i] = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, x) in data.rows().enumerate() {
            let j = assignment[i];
            counts[j] += 1;
            for (s, &v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(x) {
                *s += f64::from(v);
            }
        }
        let mut next = Vec::with_capacity(k * dim);
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] == 0 {
                // Re-seed an empty cluster at the point farthest from its centroid.
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken[far] = true;
                next.extend_from_slice(data.row(far));
            } else {
                let c = counts[j] as f64;
                next.extend(sums[j * dim..(j + 1) * dim].iter().map(|s| (s / c) as f32));
            }
        }
        centroids = SampleSet::new(next, dim).expect("k rows of dim");
    }
    let mut inertia = 0f64;
    for (i, x) in data.rows().enumerate() {
        let (j, d) = nearest(x, &centroids);
        assignment[i] = j;
        inertia += f64::from(d);
    }
    KMeans { centroids, assignment, inertia }
}

/// Final reconstruction extracted from a candidate pool.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionSet {
    /// Index of each final sample in the candidate pool.
    pub indices: Vec<usize>,
    pub finals: SampleSet,
    pub k: usize,
}

/// Clusters the candidates into `k` groups and keeps, per cluster, the
/// member nearest to its centroid (lowest candidate index on ties).
pub fn cluster_reconstruct(candidates: &SampleSet, params: &KMeansParams) -> Result<ReconstructionSet> {
    let km = kmeans(candidates, params)?;
    let mut pick: Vec<Option<(usize, f32)>> = vec![None; params.k];
    for (i, x) in candidates.rows().enumerate() {
        let j = km.assignment[i];
        let d = squared_distance(x, km.centroids.row(j));
        if pick[j].is_none_or(|(_, best)| d < best) {
            pick[j] = Some((i, d));
        }
    }
    let mut indices: Vec<usize> = Vec::with_capacity(params.k);
    for (j, p) in pick.into_iter().enumerate() {
        match p {
            Some((i, _)) => indices.push(i),
            // Only reachable when candidates contain duplicates: fall back to
            // the globally nearest unused candidate.
            None => {
                let c = km.centroids.row(j);
                let i = (0..candidates.len())
                    .filter(|i| !indices.contains(i))
                    .min_by(|&a, &b| {
                        squared_distance(candidates.row(a), c)
                            .total_cmp(&squared_distance(candidates.row(b), c))
                            .then(a.cmp(&b))
                    })
                    .expect("k <= candidates");
                indices.push(i);
            }
        }
    }
    Ok(ReconstructionSet {
        finals: candidates.select(&indices),
        indices,
        k: params.k,
    })
}

/// Mean silhouette coefficient of a labeling (Euclidean distances).
/// Points in singleton clusters score 0.
pub fn silhouette_score(data: &SampleSet, labels: &[usize], k: usize) -> Result<f64> {
    let n = data.len();
    if labels.len() != n {
        return Err(usage!("{} labels for {n} points", labels.len()));
    }
    if n < 2 {
        return Err(usage!("silhouette needs at least two points"));
    }
    let mut sizes = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(usage!("cluster label {l} out of range"));
        }
        sizes[l] += 1;
    }
    let mut total = 0f64;
    let mut sums = vec![0f64; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[labels[j]] += f64::from(libm::sqrtf(squared_distance(data.row(i), data.row(j))));
            }
        }
        let own = labels[i];
        if sizes[own] <= 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            let m = a.max(b);
            if m > 0.0 {
                total += (b - a) / m;
            }
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CardinalityChoice {
    pub k: usize,
    /// `(k, mean silhouette)` for every candidate k, ascending in k.
    pub scores: Vec<(usize, f64)>,
    /// Number of points the silhouette was evaluated on.
    pub evaluated_on: usize,
}

/// Picks the cluster count with the highest mean silhouette. K-means runs on
/// all candidates; the silhouette is evaluated on a seeded uniform subsample
/// of at most `max_silhouette_points` of them. Ties go to the smaller k.
pub fn detect_cardinality(
    candidates: &SampleSet,
    candidate_ks: &[usize],
    restarts: usize,
    max_silhouette_points: usize,
    seed: u64,
) -> Result<CardinalityChoice> {
    if candidate_ks.is_empty() {
        return Err(usage!("no candidate cardinalities given"));
    }
    let mut ks = candidate_ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if let Some(&bad) = ks.iter().find(|&&k| k < 2 || k > candidates.len()) {
        return Err(usage!(
            "candidate cardinality {bad} outside [2, {}]",
            candidates.len()
        ));
    }
    if ks.len() == 1 {
        return Ok(CardinalityChoice { k: ks[0], scores: vec![(ks[0], f64::NAN)], evaluated_on: 0 });
    }
    let n = candidates.len();
    let subset: Vec<usize> = if n > max_silhouette_points && max_silhouette_points >= 2 {
        let mut idx = rand::seq::index::sample(&mut rng::stream(seed, u64::MAX), n, max_silhouette_points).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };
    let sub = candidates.select(&subset);
    let mut scores = Vec::with_capacity(ks.len());
    for &k in &ks {
        let km = kmeans(candidates, &KMeansParams { k, restarts, max_iter: 100, seed })?;
        let labels: Vec<usize> = subset.iter().map(|&i| km.assignment[i]).collect();
        scores.push((k, silhouette_score(&sub, &labels, k)?));
    }
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 > best.1 {
            best = s;
        }
    }
    Ok(CardinalityChoice { k: best.0, scores, evaluated_on: sub.len() })
}
