//! Clustering from a distance matrix alone.
//!
//! Only algorithms that never need a "center" in feature space are offered:
//! k-medoids, agglomerative clustering and DBSCAN.

use std::io::Write;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::metrics::DistanceMatrix;
use crate::seed::{self, stream};
use crate::{Error, Result};

/// Label of DBSCAN noise points.
pub const NOISE: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster id per client, contiguous from 0; noise points carry [`NOISE`].
    pub labels: Vec<usize>,
    pub num_clusters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub medoids: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_mask: Option<Vec<bool>>,
}

impl ClusterAssignment {
    /// Relabel so ids are contiguous and ordered by each cluster's lowest member.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let labels: Vec<usize> = labels
            .iter()
            .map(|&l| {
                if l == NOISE {
                    return NOISE;
                }
                let next = map.len();
                *map.entry(l).or_insert(next)
            })
            .collect();
        let noise = labels.contains(&NOISE);
        Self {
            num_clusters: map.len(),
            noise_mask: noise.then(|| labels.iter().map(|&l| l == NOISE).collect()),
            labels,
            medoids: None,
        }
    }

    pub fn single(n: usize) -> Self {
        Self::from_labels(&vec![0; n])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_noise(&self, i: usize) -> bool {
        self.noise_mask.as_ref().is_some_and(|m| m[i])
    }

    pub fn num_noise(&self) -> usize {
        self.noise_mask.as_ref().map_or(0, |m| m.iter().filter(|&&b| b).count())
    }

    /// Give every noise point its own cluster.
    pub fn noise_as_singletons(&self) -> ClusterAssignment {
        let mut next = self.num_clusters;
        let labels: Vec<usize> = self
            .labels
            .iter()
            .map(|&l| {
                if l == NOISE {
                    next += 1;
                    next - 1
                } else {
                    l
                }
            })
            .collect();
        ClusterAssignment { labels, num_clusters: next, medoids: self.medoids.clone(), noise_mask: None }
    }

    /// Member positions of every cluster, in id order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters];
        for (i, &l) in self.labels.iter().enumerate() {
            if l != NOISE {
                out[l].push(i);
            }
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members().iter().map(Vec::len).collect()
    }

    /// Sum of member-to-medoid distances.
    pub fn medoid_objective(&self, dm: &DistanceMatrix) -> Option<f64> {
        let meds = self.medoids.as_ref()?;
        Some(self.labels.iter().enumerate().map(|(i, &l)| dm.get(i, meds[l])).sum())
    }

    /// `client_id,cluster_id,is_noise`; noise rows carry an empty cluster id.
    pub fn write_csv<W: Write>(&self, client_ids: &[usize], writer: W) -> Result<()> {
        if client_ids.len() != self.labels.len() {
            return Err(Error::Shape("one client id per label required".into()));
        }
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        w.write_record(["client_id", "cluster_id", "is_noise"])?;
        for (id, &l) in client_ids.iter().zip(&self.labels) {
            let cluster = if l == NOISE { String::new() } else { l.to_string() };
            w.write_record([id.to_string(), cluster, (l == NOISE).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// k-medoids

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KMedoidsConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iters: usize,
}

impl KMedoidsConfig {
    pub fn new(k: usize) -> Self {
        Self { k, restarts: 5, max_iters: 100 }
    }
}

/// One k-medoids run from explicit initial medoids.
#[derive(Debug, Clone, PartialEq)]
pub struct KMedoidsRun {
    pub assignment: ClusterAssignment,
    pub objective: f64,
    /// Objective after every assignment step.
    pub trace: Vec<f64>,
}

fn assign_to_medoids(dm: &DistanceMatrix, medoids: &[usize]) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let labels = (0..dm.size())
        .map(|i| {
            if let Some(pos) = medoids.iter().position(|&m| m == i) {
                return pos;
            }
            // medoids are kept sorted, so the first minimum is the lowest index
            let mut best = 0;
            for (pos, &m) in medoids.iter().enumerate().skip(1) {
                if dm.get(i, m) < dm.get(i, medoids[best]) {
                    best = pos;
                }
            }
            total += dm.get(i, medoids[best]);
            best
        })
        .collect();
    (labels, total)
}

/// Alternate nearest-medoid assignment with in-cluster medoid updates; when
/// that reaches a fixed point, apply the best improving medoid swap and
/// continue. The objective never increases.
pub fn k_medoids_from(dm: &DistanceMatrix, initial: &[usize], max_iters: usize) -> Result<KMedoidsRun> {
    let n = dm.size();
    let k = initial.len();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("k = {k} must lie in [1, {n}]")));
    }
    let mut medoids = initial.to_vec();
    medoids.sort_unstable();
    medoids.dedup();
    if medoids.len() != k || medoids.iter().any(|&m| m >= n) {
        return Err(Error::Parameter("initial medoids must be distinct client positions".into()));
    }
    let (mut labels, mut objective) = assign_to_medoids(dm, &medoids);
    let mut trace = vec![objective];
    for _ in 0..max_iters {
        let mut next = medoids.clone();
        for (c, med) in next.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            let cost = |cand: usize| members.iter().map(|&i| dm.get(i, cand)).sum::<f64>();
            let mut best = (*med, cost(*med));
            for &cand in &members {
                let cst = cost(cand);
                if cst < best.1 {
                    best = (cand, cst);
                }
            }
            *med = best.0;
        }
        next.sort_unstable();
        if next == medoids {
            match best_swap(dm, &medoids, objective) {
                Some(swapped) => next = swapped,
                None => break,
            }
        }
        let (l, obj) = assign_to_medoids(dm, &next);
        if obj > objective {
            // cannot happen for exact arithmetic; guard against rounding drift
            break;
        }
        medoids = next;
        labels = l;
        objective = obj;
        trace.push(objective);
    }
    Ok(KMedoidsRun {
        assignment: ClusterAssignment { labels, num_clusters: k, medoids: Some(medoids), noise_mask: None },
        objective,
        trace,
    })
}

fn best_swap(dm: &DistanceMatrix, medoids: &[usize], objective: f64) -> Option<Vec<usize>> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for pos in 0..medoids.len() {
        for cand in 0..dm.size() {
            if medoids.contains(&cand) {
                continue;
            }
            let mut trial = medoids.to_vec();
            trial[pos] = cand;
            trial.sort_unstable();
            let (_, obj) = assign_to_medoids(dm, &trial);
            if obj < best.as_ref().map_or(objective, |b| b.0) {
                best = Some((obj, trial));
            }
        }
    }
    best.map(|b| b.1)
}

/// Seeded random restarts; the lowest objective wins (earliest restart on ties).
pub fn k_medoids(dm: &DistanceMatrix, cfg: &KMedoidsConfig, seed_v: u64) -> Result<ClusterAssignment> {
    k_medoids_best(dm, cfg, seed_v).map(|r| r.assignment)
}

pub fn k_medoids_best(dm: &DistanceMatrix, cfg: &KMedoidsConfig, seed_v: u64) -> Result<KMedoidsRun> {
    let n = dm.size();
    if cfg.k == 0 || cfg.k > n {
        return Err(Error::Parameter(format!("k = {} must lie in [1, {n}]", cfg.k)));
    }
    let mut best: Option<KMedoidsRun> = None;
    for r in 0..cfg.restarts.max(1) {
        let mut rng = seed::rng(seed_v, &[stream::CLUSTER, r as u64]);
        let init = index::sample(&mut rng, n, cfg.k).into_vec();
        let run = k_medoids_from(dm, &init, cfg.max_iters)?;
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

// ---------------------------------------------------------------------------
// agglomerative

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Linkage {
    Single,
    Complete,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopRule {
    NumClusters(usize),
    /// Keep merging while the closest pair is within this distance.
    Threshold(f64),
}

/// One merge: clusters are named by their lowest member position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agglomeration {
    pub assignment: ClusterAssignment,
    pub merges: Vec<Merge>,
}

/// Bottom-up merging with Lance-Williams distance updates. Among equally
/// close pairs the lexicographically lowest `(left, right)` merges first.
pub fn agglomerative(dm: &DistanceMatrix, linkage: Linkage, stop: StopRule) -> Result<Agglomeration> {
    let n = dm.size();
    match stop {
        StopRule::NumClusters(k) if k == 0 || k > n => {
            return Err(Error::Parameter(format!("k = {k} must lie in [1, {n}]")))
        }
        StopRule::Threshold(t) if !(t >= 0.0) => return Err(Error::Parameter(format!("threshold {t} must be >= 0"))),
        _ => {}
    }
    let mut d: Vec<Vec<f64>> = (0..n).map(|i| dm.row(i).to_vec()).collect();
    let mut active: Vec<bool> = vec![true; n];
    let mut size = vec![1usize; n];
    let mut owner: Vec<usize> = (0..n).collect();
    let mut merges = Vec::new();
    let mut count = n;
    loop {
        if let StopRule::NumClusters(k) = stop {
            if count <= k {
                break;
            }
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for a in (0..n).filter(|&a| active[a]) {
            for b in (a + 1..n).filter(|&b| active[b]) {
                if best.is_none_or(|(_, _, bd)| d[a][b] < bd) {
                    best = Some((a, b, d[a][b]));
                }
            }
        }
        let Some((a, b, dist)) = best else { break };
        if let StopRule::Threshold(t) = stop {
            if dist > t {
                break;
            }
        }
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for c in (0..n).filter(|&c| active[c] && c != a && c != b) {
            let v = match linkage {
                Linkage::Single => d[a][c].min(d[b][c]),
                Linkage::Complete => d[a][c].max(d[b][c]),
                Linkage::Average => (na * d[a][c] + nb * d[b][c]) / (na + nb),
            };
            d[a][c] = v;
            d[c][a] = v;
        }
        active[b] = false;
        size[a] += size[b];
        for o in owner.iter_mut() {
            if *o == b {
                *o = a;
            }
        }
        merges.push(Merge { left: a, right: b, distance: dist, size: size[a] });
        count -= 1;
    }
    Ok(Agglomeration { assignment: ClusterAssignment::from_labels(&owner), merges })
}

// ---------------------------------------------------------------------------
// DBSCAN

/// Median of the lowest quarter of pairwise distances.
pub fn default_eps(dm: &DistanceMatrix) -> f64 {
    let mut pairs = dm.pairwise();
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.sort_by(f64::total_cmp);
    let quarter = &pairs[..pairs.len().div_ceil(4)];
    let mid = quarter.len() / 2;
    if quarter.len() % 2 == 1 {
        quarter[mid]
    } else {
        0.5 * (quarter[mid - 1] + quarter[mid])
    }
}

/// Classical DBSCAN with `d <= eps` neighborhoods (a point is its own
/// neighbor). Points are scanned in position order.
pub fn dbscan(dm: &DistanceMatrix, eps: f64, min_pts: usize) -> Result<ClusterAssignment> {
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("eps = {eps} must be > 0")));
    }
    if min_pts == 0 {
        return Err(Error::Parameter("min_pts must be >= 1".into()));
    }
    let n = dm.size();
    let neighbors = |p: usize| -> Vec<usize> { (0..n).filter(|&q| dm.get(p, q) <= eps).collect() };
    let mut labels = vec![None::<usize>; n];
    let mut visited = vec![false; n];
    let mut next = 0;
    for p in 0..n {
        if visited[p] {
            continue;
        }
        visited[p] = true;
        let nb = neighbors(p);
        if nb.len() < min_pts {
            continue;
        }
        let cluster = next;
        next += 1;
        labels[p] = Some(cluster);
        let mut queue: std::collections::VecDeque<usize> = nb.into_iter().collect();
        while let Some(q) = queue.pop_front() {
            if labels[q].is_none() {
                labels[q] = Some(cluster);
            }
            if visited[q] {
                continue;
            }
            visited[q] = true;
            let qn = neighbors(q);
            if qn.len() >= min_pts {
                queue.extend(qn);
            }
        }
    }
    let raw: Vec<usize> = labels.iter().map(|l| l.unwrap_or(NOISE)).collect();
    let mut out = ClusterAssignment::from_labels(&raw);
    if out.noise_mask.is_none() {
        out.noise_mask = Some(vec![false; n]);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// ARI

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseHandling {
    #[default]
    Singletons,
    Exclude,
}

fn pairs(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index between a predicted assignment and ground-truth labels.
pub fn adjusted_rand_index(pred: &ClusterAssignment, truth: &[usize], noise: NoiseHandling) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predicted labels vs {} truth labels", pred.len(), truth.len())));
    }
    let (p, t): (Vec<usize>, Vec<usize>) = match noise {
        NoiseHandling::Singletons => (pred.noise_as_singletons().labels, truth.to_vec()),
        NoiseHandling::Exclude => {
            pred.labels.iter().zip(truth).filter(|(&l, _)| l != NOISE).map(|(&l, &t)| (l, t)).unzip()
        }
    };
    Ok(ari_labels(&p, &t))
}

pub fn ari_labels(a: &[usize], b: &[usize]) -> f64 {
    use std::collections::HashMap;
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut cells: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *cells.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = cells.values().map(|&c| pairs(c as f64)).sum();
    let sa: f64 = rows.values().map(|&c| pairs(c as f64)).sum();
    let sb: f64 = cols.values().map(|&c| pairs(c as f64)).sum();
    let expected = sa * sb / pairs(n as f64);
    let max = 0.5 * (sa + sb);
    if max == expected {
        // both partitions trivial (all singletons or one block)
        return if index == max { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricKind;

    fn blocks(sizes: &[usize], intra: f64, inter: f64) -> DistanceMatrix {
        let owner: Vec<usize> = sizes.iter().enumerate().flat_map(|(b, &s)| std::iter::repeat_n(b, s)).collect();
        DistanceMatrix::from_upper(owner.len(), MetricKind::LossGap, |i, j| {
            Ok(if owner[i] == owner[j] { intra } else { inter })
        })
        .unwrap()
    }

    #[test]
    fn k_equals_m_is_all_medoids() {
        let dm = blocks(&[3, 3], 0.1, 10.0);
        let run = k_medoids_best(&dm, &KMedoidsConfig::new(6), 1).unwrap();
        assert_eq!(run.objective, 0.0);
        assert_eq!(run.assignment.medoids.unwrap(), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn block_recovery() {
        let dm = blocks(&[4, 3], 0.1, 10.0);
        let a = k_medoids(&dm, &KMedoidsConfig::new(2), 3).unwrap();
        assert_eq!(ari_labels(&a.labels, &[0, 0, 0, 0, 1, 1, 1]), 1.0);
        let meds = a.medoids.as_ref().unwrap();
        for (c, &m) in meds.iter().enumerate() {
            assert_eq!(a.labels[m], c);
        }
    }

    #[test]
    fn k_out_of_range() {
        let dm = blocks(&[2], 0.1, 1.0);
        assert!(matches!(k_medoids(&dm, &KMedoidsConfig::new(3), 0), Err(Error::Parameter(_))));
        assert!(matches!(k_medoids(&dm, &KMedoidsConfig::new(0), 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn objective_trace_is_monotone() {
        let mut rng = seed::rng(5, &[]);
        use rand::Rng;
        let pts: Vec<f64> = (0..30).map(|_| rng.random::<f64>()).collect();
        let dm = DistanceMatrix::from_upper(30, MetricKind::ParamNorm, |i, j| Ok((pts[i] - pts[j]).abs())).unwrap();
        let run = k_medoids_from(&dm, &[0, 1, 2, 3], 50).unwrap();
        for w in run.trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn zero_threshold_keeps_singletons() {
        let dm = blocks(&[3, 2], 0.5, 2.0);
        let agg = agglomerative(&dm, Linkage::Average, StopRule::Threshold(0.0)).unwrap();
        assert_eq!(agg.assignment.num_clusters, 5);
        let one = agglomerative(&dm, Linkage::Complete, StopRule::NumClusters(1)).unwrap();
        assert_eq!(one.assignment.num_clusters, 1);
        assert_eq!(one.merges.len(), 4);
        assert!(agglomerative(&dm, Linkage::Single, StopRule::Threshold(-1.0)).is_err());
    }

    #[test]
    fn linkage_updates() {
        // points on a line at 0, 1, 3, 7
        let x: [f64; 4] = [0.0, 1.0, 3.0, 7.0];
        let dm = DistanceMatrix::from_upper(4, MetricKind::ParamNorm, |i, j| Ok((x[i] - x[j]).abs())).unwrap();
        let single = agglomerative(&dm, Linkage::Single, StopRule::NumClusters(1)).unwrap();
        let dists: Vec<f64> = single.merges.iter().map(|m| m.distance).collect();
        assert_eq!(dists, vec![1.0, 2.0, 4.0]);
        let complete = agglomerative(&dm, Linkage::Complete, StopRule::NumClusters(1)).unwrap();
        let dists: Vec<f64> = complete.merges.iter().map(|m| m.distance).collect();
        assert_eq!(dists, vec![1.0, 3.0, 7.0]);
        let average = agglomerative(&dm, Linkage::Average, StopRule::NumClusters(1)).unwrap();
        let dists: Vec<f64> = average.merges.iter().map(|m| m.distance).collect();
        // {0,1} to 3: (3 + 2) / 2; {0,1,3} to 7: (7 + 6 + 4) / 3
        assert_eq!(dists, vec![1.0, 2.5, 17.0 / 3.0]);
    }

    #[test]
    fn dbscan_extremes() {
        let dm = blocks(&[3, 3], 1.0, 2.0);
        let one = dbscan(&dm, 5.0, 2).unwrap();
        assert_eq!(one.num_clusters, 1);
        assert_eq!(one.num_noise(), 0);
        let none = dbscan(&dm, 0.5, 2).unwrap();
        assert_eq!(none.num_noise(), 6);
        assert_eq!(none.num_clusters, 0);
        assert!(dbscan(&dm, 0.0, 2).is_err());
        assert!(dbscan(&dm, 1.0, 0).is_err());
    }

    #[test]
    fn default_eps_is_low_quantile() {
        let dm = blocks(&[3, 3], 1.0, 2.0);
        // 6 intra pairs at 1.0 and 9 inter at 2.0; lowest quarter = four 1.0s
        assert_eq!(default_eps(&dm), 1.0);
    }

    #[test]
    fn ari_cases() {
        let truth = [0, 0, 1, 1, 2, 2];
        assert_eq!(ari_labels(&[5, 5, 3, 3, 9, 9], &truth), 1.0);
        assert_eq!(ari_labels(&[0; 6], &[0, 0, 0, 1, 1, 1]), 0.0);
        let pred = ClusterAssignment::from_labels(&[0, 0, 1, 1, 2, 3]);
        assert!(adjusted_rand_index(&pred, &truth[..5], NoiseHandling::Singletons).is_err());
        // noise handling
        let noisy = ClusterAssignment::from_labels(&[0, 0, 1, 1, NOISE, NOISE]);
        let ex = adjusted_rand_index(&noisy, &truth, NoiseHandling::Exclude).unwrap();
        assert_eq!(ex, 1.0);
        let single = adjusted_rand_index(&noisy, &truth, NoiseHandling::Singletons).unwrap();
        assert!(single < 1.0);
    }

    #[test]
    fn assignment_csv() {
        let a = ClusterAssignment::from_labels(&[1, NOISE, 1, 0]);
        let mut buf = Vec::new();
        a.write_csv(&[10, 11, 12, 13], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "client_id,cluster_id,is_noise\n10,0,false\n11,,true\n12,0,false\n13,1,false\n"
        );
    }
}
