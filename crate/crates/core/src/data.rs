//! Client datasets and heterogeneous federation generators.
//!
//! Synthetic generators always record the ground-truth cluster of every
//! client so recovered clusterings can be scored. Cluster membership is
//! assigned round-robin (`client i -> cluster i % k`).

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::seed::{self, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Targets {
    Regression(Vec<f64>),
    Classes { labels: Vec<usize>, num_classes: usize },
}

impl Targets {
    fn len(&self) -> usize {
        match self {
            Targets::Regression(y) => y.len(),
            Targets::Classes { labels, .. } => labels.len(),
        }
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Regression(y) => Targets::Regression(idx.iter().map(|&i| y[i]).collect()),
            Targets::Classes { labels, num_classes } => {
                Targets::Classes { labels: idx.iter().map(|&i| labels[i]).collect(), num_classes: *num_classes }
            }
        }
    }
}

/// One client's samples: a row-major `len x dim` feature matrix plus targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    dim: usize,
    features: Vec<f64>,
    pub targets: Targets,
    pub true_cluster: Option<usize>,
}

impl ClientDataset {
    pub fn new(client_id: usize, dim: usize, features: Vec<f64>, targets: Targets) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("feature dimension must be positive".into()));
        }
        if !features.len().is_multiple_of(dim) || features.len() / dim != targets.len() {
            return Err(Error::Shape(format!(
                "{} feature values with dim {dim} do not match {} targets",
                features.len(),
                targets.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("features must be finite".into()));
        }
        if let Targets::Classes { labels, num_classes } = &targets {
            if let Some(&bad) = labels.iter().find(|&&l| l >= *num_classes) {
                return Err(Error::Parameter(format!("label {bad} outside [0, {num_classes})")));
            }
        }
        Ok(Self { client_id, dim, features, targets, true_cluster: None })
    }

    pub fn with_true_cluster(mut self, cluster: usize) -> Self {
        self.true_cluster = Some(cluster);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classes { num_classes, .. } => Some(*num_classes),
            Targets::Regression(_) => None,
        }
    }

    pub fn select(&self, idx: &[usize]) -> ClientDataset {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        ClientDataset {
            client_id: self.client_id,
            dim: self.dim,
            features,
            targets: self.targets.select(idx),
            true_cluster: self.true_cluster,
        }
    }

    /// Stack several datasets (same dim and target kind) into one.
    pub fn concat(client_id: usize, parts: &[&ClientDataset]) -> Result<ClientDataset> {
        let first = parts.first().ok_or(Error::EmptyInput("nothing to concatenate"))?;
        let mut features = Vec::new();
        let mut targets = match &first.targets {
            Targets::Regression(_) => Targets::Regression(Vec::new()),
            Targets::Classes { num_classes, .. } => Targets::Classes { labels: Vec::new(), num_classes: *num_classes },
        };
        for p in parts {
            if p.dim != first.dim {
                return Err(Error::Shape("datasets differ in feature dimension".into()));
            }
            features.extend_from_slice(&p.features);
            match (&mut targets, &p.targets) {
                (Targets::Regression(a), Targets::Regression(b)) => a.extend_from_slice(b),
                (Targets::Classes { labels, .. }, Targets::Classes { labels: b, .. }) => labels.extend_from_slice(b),
                _ => return Err(Error::Shape("datasets differ in target kind".into())),
            }
        }
        ClientDataset::new(client_id, first.dim, features, targets)
    }
}

/// Train and test portions of one client's data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSplit {
    pub train: ClientDataset,
    pub test: ClientDataset,
}

impl ClientSplit {
    pub fn client_id(&self) -> usize {
        self.train.client_id
    }

    pub fn true_cluster(&self) -> Option<usize> {
        self.train.true_cluster
    }
}

/// Seeded shuffle, then the first `round(train_fraction * m)` samples (at
/// least one, and at most `m - 1` when `m >= 2`) go to train.
pub fn split_train_test(data: &ClientDataset, train_fraction: f64, seed_v: u64) -> Result<ClientSplit> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Parameter("train_fraction must lie in (0, 1]".into()));
    }
    let m = data.len();
    if m == 0 {
        return Err(Error::EmptyInput("cannot split an empty dataset"));
    }
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut seed::rng(seed_v, &[stream::SPLIT, data.client_id as u64]));
    let mut n_train = ((m as f64) * train_fraction).round() as usize;
    n_train = n_train.clamp(1, m);
    if m >= 2 && train_fraction < 1.0 {
        n_train = n_train.min(m - 1);
    }
    let test_idx = if n_train == m { &idx[..] } else { &idx[n_train..] };
    Ok(ClientSplit { train: data.select(&idx[..n_train]), test: data.select(test_idx) })
}

/// Labelled feature pool that client datasets are carved from.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePool {
    pub dim: usize,
    /// Side length when the features are a square grid.
    pub side: Option<usize>,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl SamplePool {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }
}

// ---------------------------------------------------------------------------
// linear family

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "scale")]
pub enum Noise {
    Gaussian(f64),
    /// Uniform on `[-half_width, half_width]`.
    Uniform(f64),
}

impl Noise {
    pub fn variance(&self) -> f64 {
        match *self {
            Noise::Gaussian(s) => s * s,
            Noise::Uniform(a) => a * a / 3.0,
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Noise::Gaussian(s) => s * rng.sample::<f64, _>(StandardNormal),
            Noise::Uniform(a) if a > 0.0 => rng.random_range(-a..=a),
            Noise::Uniform(_) => 0.0,
        }
    }
}

/// `y = beta^T x + noise` with `x ~ N(0, Sigma_XX)`, optionally rejected
/// outside the ball `||x|| <= radius`.
#[derive(Debug, Clone)]
pub struct LinearSource {
    pub beta: Vec<f64>,
    chol: Option<DMatrix<f64>>,
    pub noise: Noise,
    pub truncate_radius: Option<f64>,
}

impl LinearSource {
    pub fn new(beta: Vec<f64>, sigma_xx: Option<&DMatrix<f64>>, noise: Noise) -> Result<Self> {
        let chol = match sigma_xx {
            Some(s) => {
                if s.nrows() != beta.len() || s.ncols() != beta.len() {
                    return Err(Error::Shape("Sigma_XX does not match beta".into()));
                }
                Some(
                    s.clone()
                        .cholesky()
                        .ok_or_else(|| Error::Parameter("Sigma_XX is not positive definite".into()))?
                        .l(),
                )
            }
            None => None,
        };
        Ok(Self { beta, chol, noise, truncate_radius: None })
    }

    pub fn truncated(mut self, radius: f64) -> Self {
        self.truncate_radius = Some(radius);
        self
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    /// Draw `m` samples; returns the dataset and the number of rejected draws.
    pub fn sample<R: Rng + ?Sized>(&self, client_id: usize, m: usize, rng: &mut R) -> (ClientDataset, usize) {
        let d = self.dim();
        let mut features = Vec::with_capacity(m * d);
        let mut targets = Vec::with_capacity(m);
        let mut rejected = 0;
        let mut z = vec![0.0; d];
        let mut x = vec![0.0; d];
        while targets.len() < m {
            z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            match &self.chol {
                Some(l) => {
                    for i in 0..d {
                        x[i] = (0..=i).map(|j| l[(i, j)] * z[j]).sum();
                    }
                }
                None => x.copy_from_slice(&z),
            }
            if let Some(r) = self.truncate_radius {
                if x.iter().map(|v| v * v).sum::<f64>() > r * r {
                    rejected += 1;
                    continue;
                }
            }
            let y = x.iter().zip(&self.beta).map(|(a, b)| a * b).sum::<f64>() + self.noise.sample(rng);
            features.extend_from_slice(&x);
            targets.push(y);
        }
        let data = ClientDataset::new(client_id, d, features, Targets::Regression(targets))
            .expect("generated shapes are consistent");
        (data, rejected)
    }
}

/// Parameters of the linear-family generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearFamily {
    /// One cross-covariance vector `Sigma_Xy` per cluster.
    pub sigma_xy: Vec<Vec<f64>>,
    /// Shared feature covariance; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_xx: Option<Vec<Vec<f64>>>,
    pub m_per_client: usize,
    pub noise_std: f64,
}

impl LinearFamily {
    pub fn input_dim(&self) -> usize {
        self.sigma_xy.first().map_or(0, Vec::len)
    }

    pub fn sigma_xx_matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.input_dim();
        match &self.sigma_xx {
            None => Ok(DMatrix::identity(d, d)),
            Some(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::Shape("sigma_xx must be input_dim x input_dim".into()));
                }
                Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
            }
        }
    }

    /// Regression coefficients `beta_c = Sigma_XX^{-1} Sigma_Xy(c)`.
    pub fn betas(&self) -> Result<Vec<Vec<f64>>> {
        let sxx = self.sigma_xx_matrix()?;
        let chol = sxx.cholesky().ok_or_else(|| Error::Parameter("sigma_xx is not positive definite".into()))?;
        Ok(self.sigma_xy.iter().map(|s| chol.solve(&DVector::from_column_slice(s)).as_slice().to_vec()).collect())
    }
}

pub fn gen_linear_family(family: &LinearFamily, num_clients: usize, seed_v: u64) -> Result<Vec<ClientDataset>> {
    let k = family.sigma_xy.len();
    if k == 0 {
        return Err(Error::DegenerateFamily("no Sigma_Xy vectors supplied".into()));
    }
    let d = family.input_dim();
    if d == 0 || family.sigma_xy.iter().any(|s| s.len() != d) {
        return Err(Error::Shape("all Sigma_Xy vectors must share a positive length".into()));
    }
    for a in 0..k {
        for b in a + 1..k {
            if family.sigma_xy[a] == family.sigma_xy[b] {
                return Err(Error::DegenerateFamily(format!("clusters {a} and {b} have identical Sigma_Xy")));
            }
        }
    }
    if family.noise_std < 0.0 || !family.noise_std.is_finite() {
        return Err(Error::Parameter("noise_std must be >= 0".into()));
    }
    if family.m_per_client == 0 {
        return Err(Error::Parameter("m_per_client must be positive".into()));
    }
    check_cluster_count(k, num_clients)?;
    let sxx = family.sigma_xx_matrix()?;
    let sources = family
        .betas()?
        .into_iter()
        .map(|beta| LinearSource::new(beta, Some(&sxx), Noise::Gaussian(family.noise_std)))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..num_clients)
        .map(|i| {
            let c = i % k;
            let mut rng = seed::rng(seed_v, &[stream::DATA, i as u64]);
            sources[c].sample(i, family.m_per_client, &mut rng).0.with_true_cluster(c)
        })
        .collect())
}

fn check_cluster_count(k: usize, num_clients: usize) -> Result<()> {
    if num_clients == 0 {
        return Err(Error::Parameter("need at least one client".into()));
    }
    if k > num_clients {
        return Err(Error::Parameter(format!("{k} clusters cannot be spread over {num_clients} clients")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// rotations

/// Rotate a row-major `side x side` grid by `quarter_turns * 90` degrees
/// counter-clockwise. Pure index permutation.
pub fn rotate_grid(grid: &[f64], side: usize, quarter_turns: usize) -> Vec<f64> {
    let mut cur = grid.to_vec();
    for _ in 0..quarter_turns % 4 {
        let mut next = vec![0.0; cur.len()];
        for r in 0..side {
            for c in 0..side {
                next[r * side + c] = cur[c * side + (side - 1 - r)];
            }
        }
        cur = next;
    }
    cur
}

fn rotate_plane(x: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    vec![c * x[0] - s * x[1], s * x[0] + c * x[1]]
}

/// Carve `num_clients` datasets out of `pool`, rotating every client's
/// features by its cluster's angle (`360 / k * cluster`).
pub fn gen_rotated(
    rotations: usize,
    num_clients: usize,
    m_per_client: usize,
    pool: &SamplePool,
    seed_v: u64,
) -> Result<Vec<ClientDataset>> {
    check_cluster_count(rotations, num_clients)?;
    let grid_side = match pool.side {
        Some(s) => {
            if ![1, 2, 4].contains(&rotations) {
                return Err(Error::Unsupported(format!("grid features support 2 or 4 rotations, got {rotations}")));
            }
            Some(s)
        }
        None if pool.dim == 2 => None,
        None => return Err(Error::Unsupported("rotation needs square-grid or 2-D features".into())),
    };
    if pool.is_empty() || m_per_client == 0 {
        return Err(Error::EmptyInput("rotation needs a nonempty pool and m_per_client > 0"));
    }
    let assignment = partition_pool(pool.len(), num_clients, m_per_client, seed_v);
    assignment
        .into_iter()
        .enumerate()
        .map(|(i, idx)| {
            let r = i % rotations;
            let mut features = Vec::with_capacity(idx.len() * pool.dim);
            for &s in &idx {
                let x = pool.row(s);
                match grid_side {
                    Some(side) => features.extend(rotate_grid(x, side, r * 4 / rotations.max(1))),
                    None => features.extend(rotate_plane(x, std::f64::consts::TAU * r as f64 / rotations as f64)),
                }
            }
            let labels = idx.iter().map(|&s| pool.labels[s]).collect();
            Ok(ClientDataset::new(i, pool.dim, features, Targets::Classes { labels, num_classes: pool.num_classes })?
                .with_true_cluster(r))
        })
        .collect()
}

/// Give each client `m` pool indices, drawing without replacement from a
/// seeded shuffle and reshuffling whenever the pool runs out.
fn partition_pool(pool_len: usize, num_clients: usize, m: usize, seed_v: u64) -> Vec<Vec<usize>> {
    let mut rng = seed::rng(seed_v, &[stream::DATA, u64::MAX]);
    let mut order: Vec<usize> = (0..pool_len).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    (0..num_clients)
        .map(|_| {
            (0..m)
                .map(|_| {
                    if cursor == pool_len {
                        order.shuffle(&mut rng);
                        cursor = 0;
                    }
                    cursor += 1;
                    order[cursor - 1]
                })
                .collect()
        })
        .collect()
}

/// Each client's full pool share with no transformation; ground truth is a
/// single cluster.
pub fn gen_iid(num_clients: usize, m_per_client: usize, pool: &SamplePool, seed_v: u64) -> Result<Vec<ClientDataset>> {
    check_cluster_count(1, num_clients)?;
    if pool.is_empty() || m_per_client == 0 {
        return Err(Error::EmptyInput("IID partition needs a nonempty pool"));
    }
    partition_pool(pool.len(), num_clients, m_per_client, seed_v)
        .into_iter()
        .enumerate()
        .map(|(i, idx)| {
            let features = idx.iter().flat_map(|&s| pool.row(s).iter().copied()).collect();
            let labels = idx.iter().map(|&s| pool.labels[s]).collect();
            Ok(ClientDataset::new(i, pool.dim, features, Targets::Classes { labels, num_classes: pool.num_classes })?
                .with_true_cluster(0))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// label shards

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Lexicographic rank of a sorted `c`-subset of `{0..n}`.
pub fn subset_rank(subset: &[usize], n: usize) -> usize {
    let c = subset.len();
    let mut rank = 0;
    let mut prev = 0;
    for (pos, &v) in subset.iter().enumerate() {
        for skipped in prev..v {
            rank += binomial(n - skipped - 1, c - pos - 1);
        }
        prev = v + 1;
    }
    rank
}

/// Every client sees only `classes_per_client` randomly chosen classes.
/// `true_cluster` is the lexicographic rank of the client's class subset.
pub fn gen_label_shard(
    num_classes_total: usize,
    classes_per_client: usize,
    num_clients: usize,
    m_per_client: usize,
    pool: &SamplePool,
    seed_v: u64,
) -> Result<Vec<ClientDataset>> {
    if classes_per_client == 0 || classes_per_client > num_classes_total {
        return Err(Error::Parameter(format!("classes_per_client must lie in [1, {num_classes_total}]")));
    }
    if num_classes_total > pool.num_classes {
        return Err(Error::InsufficientPool { class: pool.num_classes, needed: 1, available: 0 });
    }
    if num_clients == 0 || m_per_client == 0 {
        return Err(Error::Parameter("need clients and samples".into()));
    }
    let by_class = pool.class_indices();
    (0..num_clients)
        .map(|i| {
            let mut rng = seed::rng(seed_v, &[stream::DATA, i as u64]);
            let mut classes: Vec<usize> = (0..num_classes_total).collect();
            classes.shuffle(&mut rng);
            classes.truncate(classes_per_client);
            classes.sort_unstable();
            let mut idx = Vec::with_capacity(m_per_client);
            for (pos, &c) in classes.iter().enumerate() {
                // spread the remainder over the first classes
                let needed = m_per_client / classes_per_client + usize::from(pos < m_per_client % classes_per_client);
                let available = by_class[c].len();
                if available < needed || available == 0 {
                    return Err(Error::InsufficientPool { class: c, needed, available });
                }
                idx.extend(by_class[c].choose_multiple(&mut rng, needed).copied());
            }
            idx.shuffle(&mut rng);
            let features = idx.iter().flat_map(|&s| pool.row(s).iter().copied()).collect();
            let labels = idx.iter().map(|&s| pool.labels[s]).collect();
            Ok(ClientDataset::new(i, pool.dim, features, Targets::Classes { labels, num_classes: pool.num_classes })?
                .with_true_cluster(subset_rank(&classes, num_classes_total)))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// synthetic image pool

/// Pair of classes whose prototypes are exact rotations of one another,
/// like a 6 and a 9.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationTwin {
    pub class: usize,
    pub source: usize,
    pub quarter_turns: usize,
}

/// Grid images built from one smooth random prototype per class plus
/// per-pixel Gaussian noise, clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypePool {
    pub side: usize,
    pub num_classes: usize,
    pub per_class: usize,
    pub noise_std: f64,
    #[serde(default)]
    pub twins: Vec<RotationTwin>,
}

impl PrototypePool {
    pub fn prototypes(&self, seed_v: u64) -> Result<Vec<Vec<f64>>> {
        let s = self.side;
        let mut rng = seed::rng(seed_v, &[stream::DATA, 0xB0A5]);
        let mut protos: Vec<Vec<f64>> = (0..self.num_classes)
            .map(|_| {
                let raw: Vec<f64> = (0..s * s).map(|_| rng.random::<f64>()).collect();
                // 3x3 box blur then contrast stretch to [0, 1]
                let mut blurred = vec![0.0; s * s];
                for r in 0..s {
                    for c in 0..s {
                        let mut acc = 0.0;
                        let mut n = 0.0;
                        for dr in -1i64..=1 {
                            for dc in -1i64..=1 {
                                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                                if rr >= 0 && cc >= 0 && (rr as usize) < s && (cc as usize) < s {
                                    acc += raw[rr as usize * s + cc as usize];
                                    n += 1.0;
                                }
                            }
                        }
                        blurred[r * s + c] = acc / n;
                    }
                }
                let lo = blurred.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = blurred.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                blurred.iter().map(|v| (v - lo) / (hi - lo).max(1e-12)).collect()
            })
            .collect();
        for t in &self.twins {
            if t.class >= self.num_classes || t.source >= self.num_classes || t.class == t.source {
                return Err(Error::Parameter(format!("invalid rotation twin {t:?}")));
            }
            protos[t.class] = rotate_grid(&protos[t.source], s, t.quarter_turns);
        }
        Ok(protos)
    }

    pub fn generate(&self, seed_v: u64) -> Result<SamplePool> {
        if self.side == 0 || self.num_classes < 2 || self.per_class == 0 {
            return Err(Error::Parameter("prototype pool needs side > 0, >= 2 classes".into()));
        }
        let protos = self.prototypes(seed_v)?;
        let mut rng = seed::rng(seed_v, &[stream::DATA, 0xB0A6]);
        let dim = self.side * self.side;
        let mut features = Vec::with_capacity(self.num_classes * self.per_class * dim);
        let mut labels = Vec::with_capacity(self.num_classes * self.per_class);
        for _ in 0..self.per_class {
            for (c, p) in protos.iter().enumerate() {
                features.extend(
                    p.iter().map(|&v| (v + self.noise_std * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0)),
                );
                labels.push(c);
            }
        }
        Ok(SamplePool { dim, side: Some(self.side), features, labels, num_classes: self.num_classes })
    }
}

// ---------------------------------------------------------------------------
// IDX files

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, offset: u64, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), offset, reason: reason.into() }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, offset as u64, "truncated header"))
}

/// Parse an IDX image file (magic 0x00000803) and label file (0x00000801).
/// Pixels are scaled from `u8` to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<SamplePool> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = std::fs::read(ip)?;
    let labels = std::fs::read(lp)?;
    parse_idx(&images, ip, &labels, lp)
}

pub fn parse_idx(images: &[u8], ip: &Path, labels: &[u8], lp: &Path) -> Result<SamplePool> {
    let magic = read_u32_be(images, 0, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(ip, 0, format!("bad image magic {magic:#010x}")));
    }
    let n = read_u32_be(images, 4, ip)? as usize;
    let rows = read_u32_be(images, 8, ip)? as usize;
    let cols = read_u32_be(images, 12, ip)? as usize;
    let dim = rows * cols;
    let expected = 16 + n * dim;
    if images.len() < expected {
        return Err(format_err(ip, images.len() as u64, format!("truncated pixel data, expected {expected} bytes")));
    }
    let lmagic = read_u32_be(labels, 0, lp)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(format_err(lp, 0, format!("bad label magic {lmagic:#010x}")));
    }
    let ln = read_u32_be(labels, 4, lp)? as usize;
    if ln != n {
        return Err(format_err(lp, 4, format!("label count {ln} does not match image count {n}")));
    }
    if labels.len() < 8 + n {
        return Err(format_err(lp, labels.len() as u64, "truncated label data"));
    }
    let labels: Vec<usize> = labels[8..8 + n].iter().map(|&b| b as usize).collect();
    let features = images[16..expected].iter().map(|&b| f64::from(b) / 255.0).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(SamplePool { dim, side: (rows == cols).then_some(rows), features, labels, num_classes })
}

/// Serialize a pool in IDX format (images, labels). Pixels are quantized to `u8`.
pub fn encode_idx(pool: &SamplePool, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != pool.dim {
        return Err(Error::Shape("rows * cols must equal the feature dimension".into()));
    }
    let n = pool.len() as u32;
    let mut images = Vec::with_capacity(16 + pool.features.len());
    for v in [IDX_IMAGES_MAGIC, n, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(pool.features.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + pool.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    for &l in &pool.labels {
        labels.push(u8::try_from(l).map_err(|_| Error::Range("label exceeds 255".into()))?);
    }
    Ok((images, labels))
}

// ---------------------------------------------------------------------------
// normalization

/// Global (cross-client) feature statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Subtract the union-wide per-feature mean and divide by the union-wide std
/// where it is positive. Constant columns end up all zero.
pub fn normalize(datasets: &mut [ClientDataset]) -> Result<FeatureStats> {
    let d = datasets.first().ok_or(Error::EmptyInput("normalize needs datasets"))?.dim();
    if datasets.iter().any(|ds| ds.dim() != d) {
        return Err(Error::Shape("datasets differ in feature dimension".into()));
    }
    let total: usize = datasets.iter().map(ClientDataset::len).sum();
    if total == 0 {
        return Err(Error::EmptyInput("normalize needs samples"));
    }
    let mut mean = vec![0.0; d];
    for ds in datasets.iter() {
        for i in 0..ds.len() {
            for (m, x) in mean.iter_mut().zip(ds.row(i)) {
                *m += x;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= total as f64);
    let mut var = vec![0.0; d];
    for ds in datasets.iter() {
        for i in 0..ds.len() {
            for ((v, x), m) in var.iter_mut().zip(ds.row(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / total as f64).sqrt()).collect();
    for ds in datasets.iter_mut() {
        for row in ds.features_mut().chunks_mut(d) {
            for ((x, m), s) in row.iter_mut().zip(&mean).zip(&std) {
                *x -= m;
                if *s > 1e-12 {
                    *x /= s;
                } else {
                    *x = 0.0;
                }
            }
        }
    }
    Ok(FeatureStats { mean, std })
}

// ---------------------------------------------------------------------------
// federation spec

/// Where rotated / sharded clients draw their samples from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source", deny_unknown_fields)]
pub enum BaseTask {
    Prototypes(PrototypePool),
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` samples.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
}

impl BaseTask {
    pub fn load(&self, seed_v: u64) -> Result<SamplePool> {
        match self {
            BaseTask::Prototypes(p) => p.generate(seed_v),
            BaseTask::Idx { images, labels, limit } => {
                let mut pool = load_idx(images, labels)?;
                if let Some(n) = *limit {
                    let n = n.min(pool.len());
                    pool.features.truncate(n * pool.dim);
                    pool.labels.truncate(n);
                }
                Ok(pool)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum Generator {
    LinearFamily(LinearFamily),
    RotatedClassification { rotations: usize, m_per_client: usize, base: BaseTask },
    LabelShard { num_classes_total: usize, classes_per_client: usize, m_per_client: usize, base: BaseTask },
    IdxImport { m_per_client: usize, images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSpec {
    pub num_clients: usize,
    /// Mixed with each run seed to derive the data seed.
    pub seed: u64,
    pub normalize: bool,
    pub train_fraction: f64,
    pub generator: Generator,
}

/// A materialized federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Federation {
    pub clients: Vec<ClientSplit>,
    pub num_true_clusters: usize,
}

impl Federation {
    pub fn true_labels(&self) -> Option<Vec<usize>> {
        self.clients.iter().map(ClientSplit::true_cluster).collect()
    }

    pub fn train_sets(&self) -> Vec<&ClientDataset> {
        self.clients.iter().map(|c| &c.train).collect()
    }
}

impl FederationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 2 {
            return Err(Error::config("federation.num_clients", "must be >= 2"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("federation.train_fraction", "must lie in (0, 1)"));
        }
        let k = match &self.generator {
            Generator::LinearFamily(f) => f.sigma_xy.len(),
            Generator::RotatedClassification { rotations, .. } => *rotations,
            _ => 1,
        };
        if k > self.num_clients {
            return Err(Error::config("federation.generator", format!("cluster count {k} exceeds num_clients")));
        }
        Ok(())
    }

    pub fn build(&self, run_seed: u64) -> Result<Federation> {
        self.validate()?;
        let data_seed = seed::derive(self.seed, &[stream::DATA, run_seed]);
        let m = self.num_clients;
        let mut sets = match &self.generator {
            Generator::LinearFamily(f) => gen_linear_family(f, m, data_seed)?,
            Generator::RotatedClassification { rotations, m_per_client, base } => {
                let pool = base.load(self.seed)?;
                gen_rotated(*rotations, m, *m_per_client, &pool, data_seed)?
            }
            Generator::LabelShard { num_classes_total, classes_per_client, m_per_client, base } => {
                let pool = base.load(self.seed)?;
                gen_label_shard(*num_classes_total, *classes_per_client, m, *m_per_client, &pool, data_seed)?
            }
            Generator::IdxImport { m_per_client, images, labels } => {
                let pool = load_idx(images, labels)?;
                gen_iid(m, *m_per_client, &pool, data_seed)?
            }
        };
        if self.normalize {
            normalize(&mut sets)?;
        }
        let num_true_clusters = {
            let mut ids: Vec<usize> = sets.iter().filter_map(|s| s.true_cluster).collect();
            ids.sort_unstable();
            ids.dedup();
            ids.len()
        };
        let clients =
            sets.iter().map(|s| split_train_test(s, self.train_fraction, data_seed)).collect::<Result<Vec<_>>>()?;
        Ok(Federation { clients, num_true_clusters })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_pool(side: usize, n: usize, classes: usize) -> SamplePool {
        let mut rng = seed::rng(1, &[]);
        SamplePool {
            dim: side * side,
            side: Some(side),
            features: (0..n * side * side).map(|_| rng.random()).collect(),
            labels: (0..n).map(|i| i % classes).collect(),
            num_classes: classes,
        }
    }

    fn family2() -> LinearFamily {
        LinearFamily {
            sigma_xy: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            sigma_xx: None,
            m_per_client: 50,
            noise_std: 0.1,
        }
    }

    #[test]
    fn round_robin_clusters() {
        let sets = gen_linear_family(&family2(), 4, 3).unwrap();
        let truth: Vec<_> = sets.iter().map(|s| s.true_cluster.unwrap()).collect();
        assert_eq!(truth, vec![0, 1, 0, 1]);
    }

    #[test]
    fn duplicate_sigma_xy_is_degenerate() {
        let mut f = family2();
        f.sigma_xy[1] = f.sigma_xy[0].clone();
        assert!(matches!(gen_linear_family(&f, 4, 3), Err(Error::DegenerateFamily(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(gen_linear_family(&family2(), 6, 11).unwrap(), gen_linear_family(&family2(), 6, 11).unwrap());
        assert_ne!(gen_linear_family(&family2(), 6, 11).unwrap(), gen_linear_family(&family2(), 6, 12).unwrap());
    }

    #[test]
    fn empirical_cross_covariance_matches_request() {
        let mut f = family2();
        f.m_per_client = 2000;
        let sets = gen_linear_family(&f, 4, 5).unwrap();
        let cluster0: Vec<&ClientDataset> = sets.iter().filter(|s| s.true_cluster == Some(0)).collect();
        let n: usize = cluster0.iter().map(|s| s.len()).sum();
        let mut sxy = [0.0; 2];
        for s in &cluster0 {
            let Targets::Regression(y) = &s.targets else { panic!() };
            for i in 0..s.len() {
                for j in 0..2 {
                    sxy[j] += s.row(i)[j] * y[i];
                }
            }
        }
        let tol = 5.0 / (n as f64).sqrt();
        assert!((sxy[0] / n as f64 - 1.0).abs() < tol);
        assert!((sxy[1] / n as f64).abs() < tol);
    }

    #[test]
    fn rotation_group_properties() {
        let grid: Vec<f64> = (0..25).map(f64::from).collect();
        assert_eq!(rotate_grid(&grid, 5, 0), grid);
        assert_eq!(rotate_grid(&rotate_grid(&grid, 5, 1), 5, 3), grid);
        let four = (0..4).fold(grid.clone(), |g, _| rotate_grid(&g, 5, 1));
        assert_eq!(four, grid);
        assert_ne!(rotate_grid(&grid, 5, 1), grid);
        // corner (0, 4) moves to (0, 0) under one counter-clockwise turn
        assert_eq!(rotate_grid(&grid, 5, 1)[0], 4.0);
    }

    #[test]
    fn rotated_federation_layout() {
        let pool = tiny_pool(4, 40, 3);
        let sets = gen_rotated(4, 8, 5, &pool, 2).unwrap();
        let mut counts = [0; 4];
        for s in &sets {
            counts[s.true_cluster.unwrap()] += 1;
        }
        assert_eq!(counts, [2, 2, 2, 2]);
        assert!(matches!(gen_rotated(3, 8, 5, &pool, 2), Err(Error::Unsupported(_))));
    }

    #[test]
    fn rotation_zero_keeps_features() {
        let pool = tiny_pool(3, 10, 2);
        let sets = gen_rotated(2, 2, 10, &pool, 4).unwrap();
        let c0 = &sets[0];
        for i in 0..c0.len() {
            let row = c0.row(i);
            assert!((0..pool.len()).any(|s| pool.row(s) == row));
        }
    }

    #[test]
    fn planar_rotation() {
        let pool = SamplePool { dim: 2, side: None, features: vec![1.0, 0.0], labels: vec![0], num_classes: 2 };
        let sets = gen_rotated(4, 4, 1, &pool, 0).unwrap();
        assert!((sets[1].row(0)[0]).abs() < 1e-15 && (sets[1].row(0)[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn label_shards() {
        let pool = tiny_pool(2, 300, 10);
        let sets = gen_label_shard(10, 3, 6, 30, &pool, 8).unwrap();
        for s in &sets {
            let Targets::Classes { labels, .. } = &s.targets else { panic!() };
            let mut seen = labels.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), 3);
            assert_eq!(s.true_cluster, Some(subset_rank(&seen, 10)));
        }
        let iid = gen_label_shard(10, 10, 4, 20, &pool, 8).unwrap();
        assert!(iid.iter().all(|s| s.true_cluster == Some(0)));
        assert_eq!(gen_label_shard(10, 3, 1, 9, &pool, 8).unwrap().len(), 1);
        let small = tiny_pool(2, 5, 5);
        assert!(matches!(gen_label_shard(5, 2, 2, 10, &small, 1), Err(Error::InsufficientPool { .. })));
    }

    #[test]
    fn subset_rank_is_a_bijection() {
        let mut ranks = Vec::new();
        for a in 0..5 {
            for b in a + 1..5 {
                ranks.push(subset_rank(&[a, b], 5));
            }
        }
        assert_eq!(ranks, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let pool = tiny_pool(28, 4, 3);
        let (img, lab) = encode_idx(&pool, 28, 28).unwrap();
        let p = Path::new("x");
        let parsed = parse_idx(&img, p, &lab, p).unwrap();
        assert_eq!(parsed.len(), 4);
        assert_eq!(parsed.dim, 784);
        assert_eq!(parsed.side, Some(28));
        let mut bad = img.clone();
        bad[3] = 0x02;
        assert!(matches!(parse_idx(&bad, p, &lab, p), Err(Error::Format { offset: 0, .. })));
        let mut short_labels = lab.clone();
        short_labels[7] = 3;
        assert!(matches!(parse_idx(&img, p, &short_labels, p), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(parse_idx(&img[..100], p, &lab, p), Err(Error::Format { .. })));
    }

    #[test]
    fn normalization() {
        let mut sets = gen_linear_family(&family2(), 4, 9).unwrap();
        normalize(&mut sets).unwrap();
        let total: usize = sets.iter().map(|s| s.len()).sum();
        for j in 0..2 {
            let mean: f64 =
                sets.iter().flat_map(|s| (0..s.len()).map(move |i| s.row(i)[j])).sum::<f64>() / total as f64;
            assert!(mean.abs() < 1e-10);
        }
        let mut constant =
            vec![ClientDataset::new(0, 2, vec![1.0, 3.0, 2.0, 3.0], Targets::Regression(vec![0.0, 0.0])).unwrap()];
        normalize(&mut constant).unwrap();
        assert_eq!(constant[0].row(0)[1], 0.0);
        assert_eq!(constant[0].row(1)[1], 0.0);
    }

    #[test]
    fn centered_unit_data_is_unchanged() {
        let mut sets = vec![ClientDataset::new(0, 1, vec![-1.0, 1.0], Targets::Regression(vec![0.0, 0.0])).unwrap()];
        normalize(&mut sets).unwrap();
        assert_eq!(sets[0].features(), &[-1.0, 1.0]);
    }

    #[test]
    fn split_is_eighty_twenty() {
        let sets = gen_linear_family(&family2(), 2, 1).unwrap();
        let s = split_train_test(&sets[0], 0.8, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (40, 10));
    }
}
