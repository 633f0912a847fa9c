//! Client-similarity metrics and the server-side distance matrix.
//!
//! The loss-gap metric is computed with a split-and-sum protocol: client `i`
//! receives the warm-up parameters `w_j` of every peer, evaluates
//! `|L_i(w_j) - L_i(w_i)|` on its own data only and sends that scalar back.
//! The server adds the two one-sided halves of each pair.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::model::{self, ModelSpec, ParamVector};
use crate::{parallel, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    LossGap,
    ParamNorm,
    GradCosine,
    /// `|L_i(w_i) - L_j(w_i)| + |L_i(w_j) - L_j(w_j)|`. Needs an extra round of
    /// loss exchange; kept only for A/B comparison.
    CrossLoss,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::LossGap => "loss-gap",
            MetricKind::ParamNorm => "param-norm",
            MetricKind::GradCosine => "grad-cosine",
            MetricKind::CrossLoss => "cross-loss",
        }
    }
}

/// Symmetric, zero-diagonal, nonnegative `M x M` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    size: usize,
    entries: Vec<f64>,
    pub metric: MetricKind,
    pub client_ids: Vec<usize>,
}

impl DistanceMatrix {
    /// Build from the upper triangle; entries are mirrored so the result is
    /// exactly symmetric.
    pub fn from_upper<F>(size: usize, metric: MetricKind, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> Result<f64>,
    {
        let mut entries = vec![0.0; size * size];
        for i in 0..size {
            for j in i + 1..size {
                let v = f(i, j)?;
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::Contract(format!(
                        "distance ({i}, {j}) = {v} is not a finite nonnegative number"
                    )));
                }
                entries[i * size + j] = v;
                entries[j * size + i] = v;
            }
        }
        Ok(Self { size, entries, metric, client_ids: (0..size).collect() })
    }

    /// Validate and wrap a full row-major matrix.
    pub fn from_rows(rows: &[Vec<f64>], metric: MetricKind) -> Result<Self> {
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return Err(Error::Shape("distance matrix must be square".into()));
        }
        for i in 0..size {
            if rows[i][i] != 0.0 {
                return Err(Error::Contract(format!("diagonal entry {i} is not zero")));
            }
            for j in 0..i {
                if rows[i][j] != rows[j][i] {
                    return Err(Error::Contract(format!("entry ({i}, {j}) is not symmetric")));
                }
            }
        }
        Self::from_upper(size, metric, |i, j| Ok(rows[i][j]))
    }

    pub fn with_client_ids(mut self, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != self.size {
            return Err(Error::Shape("one client id per row required".into()));
        }
        self.client_ids = ids;
        Ok(self)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.size..(i + 1) * self.size]
    }

    pub fn max_entry(&self) -> f64 {
        self.entries.iter().cloned().fold(0.0, f64::max)
    }

    /// Off-diagonal upper-triangle entries.
    pub fn pairwise(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.size * self.size.saturating_sub(1) / 2);
        for i in 0..self.size {
            out.extend_from_slice(&self.row(i)[i + 1..]);
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.entries.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// Reorder rows and columns: `perm[new] = old`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.size;
        let mut out = self.clone();
        for a in 0..n {
            for b in 0..n {
                out.entries[a * n + b] = self.get(perm[a], perm[b]);
            }
        }
        out.client_ids = perm.iter().map(|&p| self.client_ids[p]).collect();
        out
    }

    /// Row-major CSV with a header row of client ids.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        let mut header = vec!["client_id".to_string()];
        header.extend(self.client_ids.iter().map(ToString::to_string));
        w.write_record(&header)?;
        for i in 0..self.size {
            let mut rec = vec![self.client_ids[i].to_string()];
            rec.extend(self.row(i).iter().map(ToString::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R, metric: MetricKind) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let mut fields = rec.iter();
            let id = fields
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Shape("row without a client id".into()))?;
            ids.push(id);
            rows.push(
                fields
                    .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Shape(format!("bad entry `{s}`: {e}"))))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Self::from_rows(&rows, metric)?.with_client_ids(ids)
    }
}

/// One client's contribution to a loss-gap entry, computed from its own data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfDistance {
    pub from_client: usize,
    pub about_client: usize,
    pub value: f64,
}

/// `|L_i(w_j) - L_i(w_i)|` evaluated on client `i`'s data.
pub fn half_distance(
    spec: &ModelSpec,
    data_i: &ClientDataset,
    w_i: &ParamVector,
    about_client: usize,
    w_j: &ParamVector,
) -> Result<HalfDistance> {
    let own = model::loss(spec, w_i, data_i)?;
    let other = model::loss(spec, w_j, data_i)?;
    if !own.is_finite() || !other.is_finite() {
        return Err(Error::Contract(format!("non-finite loss on client {}", data_i.client_id)));
    }
    Ok(HalfDistance { from_client: data_i.client_id, about_client, value: (other - own).abs() })
}

/// Client side of the protocol: all halves `d(i, j)_i` for `j != i`.
/// `i` and `j` are positions in `params`.
pub fn client_halves(
    spec: &ModelSpec,
    position: usize,
    data_i: &ClientDataset,
    params: &[ParamVector],
) -> Result<Vec<HalfDistance>> {
    let own = model::loss(spec, &params[position], data_i)?;
    params
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != position)
        .map(|(j, w_j)| {
            let other = model::loss(spec, w_j, data_i)?;
            if !own.is_finite() || !other.is_finite() {
                return Err(Error::Contract(format!("non-finite loss on client {position}")));
            }
            Ok(HalfDistance { from_client: position, about_client: j, value: (other - own).abs() })
        })
        .collect()
}

/// Server side: `d(i, j) = d(i, j)_i + d(j, i)_j`. Every ordered pair must be
/// present exactly once; positions are `0..size`.
pub fn assemble_loss_gap(size: usize, halves: &[HalfDistance]) -> Result<DistanceMatrix> {
    let mut table = BTreeMap::new();
    for h in halves {
        if h.from_client >= size || h.about_client >= size || h.from_client == h.about_client {
            return Err(Error::Contract(format!(
                "half-distance ({}, {}) outside the {size}-client protocol",
                h.from_client, h.about_client
            )));
        }
        if !(h.value >= 0.0 && h.value.is_finite()) {
            return Err(Error::Contract(format!(
                "half-distance ({}, {}) = {} is invalid",
                h.from_client, h.about_client, h.value
            )));
        }
        if table.insert((h.from_client, h.about_client), h.value).is_some() {
            return Err(Error::Contract(format!("duplicate half-distance ({}, {})", h.from_client, h.about_client)));
        }
    }
    let missing: Vec<(usize, usize)> = (0..size)
        .flat_map(|i| (0..size).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && !table.contains_key(&(i, j)))
        .collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteProtocol { missing });
    }
    DistanceMatrix::from_upper(size, MetricKind::LossGap, |i, j| Ok(table[&(i, j)] + table[&(j, i)]))
}

/// Run the whole exchange for `datasets[i]` / `params[i]` pairs.
pub fn loss_gap_matrix(
    spec: &ModelSpec,
    datasets: &[&ClientDataset],
    params: &[ParamVector],
) -> Result<DistanceMatrix> {
    if datasets.len() != params.len() {
        return Err(Error::Shape("one parameter vector per client required".into()));
    }
    let positions: Vec<usize> = (0..datasets.len()).collect();
    let halves = parallel::map(&positions, |&i| client_halves(spec, i, datasets[i], params))
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .concat();
    assemble_loss_gap(datasets.len(), &halves)?.with_client_ids(datasets.iter().map(|d| d.client_id).collect())
}

/// Euclidean parameter distance `||w_i - w_j||`.
pub fn param_norm_matrix(params: &[ParamVector]) -> Result<DistanceMatrix> {
    DistanceMatrix::from_upper(params.len(), MetricKind::ParamNorm, |i, j| params[i].distance(&params[j]))
}

pub fn mean_params(params: &[ParamVector]) -> Result<ParamVector> {
    let first = params.first().ok_or(Error::EmptyInput("no parameters to average"))?;
    let mut out = first.clone();
    for p in &params[1..] {
        out.axpy(1.0, p)?;
    }
    out.scale(1.0 / params.len() as f64);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCosine {
    pub matrix: DistanceMatrix,
    /// Positions whose gradient at the reference point is exactly zero; their
    /// cosine is taken as 0 (distance 1/2).
    pub zero_gradient: Vec<usize>,
}

/// Cosine of full-batch gradients at a shared reference point, mapped to a
/// distance `(1 - alpha) / 2` in `[0, 1]`.
pub fn grad_cosine_matrix(
    spec: &ModelSpec,
    datasets: &[&ClientDataset],
    reference: &ParamVector,
) -> Result<GradCosine> {
    let grads = parallel::map(datasets, |d| model::full_gradient(spec, reference, d))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let norms: Vec<f64> = grads.iter().map(ParamVector::norm).collect();
    let zero_gradient = norms.iter().enumerate().filter(|(_, &n)| n == 0.0).map(|(i, _)| i).collect();
    let matrix = DistanceMatrix::from_upper(grads.len(), MetricKind::GradCosine, |i, j| {
        let alpha = if norms[i] == 0.0 || norms[j] == 0.0 {
            0.0
        } else {
            (grads[i].dot(&grads[j])? / (norms[i] * norms[j])).clamp(-1.0, 1.0)
        };
        Ok(((1.0 - alpha) / 2.0).max(0.0))
    })?
    .with_client_ids(datasets.iter().map(|d| d.client_id).collect())?;
    Ok(GradCosine { matrix, zero_gradient })
}

/// The rejected two-model cross-loss metric.
pub fn cross_loss_matrix(
    spec: &ModelSpec,
    datasets: &[&ClientDataset],
    params: &[ParamVector],
) -> Result<DistanceMatrix> {
    if datasets.len() != params.len() {
        return Err(Error::Shape("one parameter vector per client required".into()));
    }
    let n = datasets.len();
    // losses[a][b] = L_a(w_b)
    let losses = parallel::map_range(n, |a| {
        params.iter().map(|w| model::loss(spec, w, datasets[a])).collect::<Result<Vec<_>>>()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    DistanceMatrix::from_upper(n, MetricKind::CrossLoss, |i, j| {
        Ok((losses[i][i] - losses[j][i]).abs() + (losses[i][j] - losses[j][j]).abs())
    })?
    .with_client_ids(datasets.iter().map(|d| d.client_id).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriangleReport {
    pub triples: usize,
    pub violations: usize,
    /// Largest `d(i, k) - d(i, j) - d(j, k)` seen (0 when none violate).
    pub max_excess: f64,
}

/// Count ordered triples violating `d(i, k) <= d(i, j) + d(j, k)`.
pub fn triangle_report(dm: &DistanceMatrix, tolerance: f64) -> TriangleReport {
    let n = dm.size();
    let mut report = TriangleReport { triples: 0, violations: 0, max_excess: 0.0 };
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                if i == j || j == k || i == k {
                    continue;
                }
                report.triples += 1;
                let excess = dm.get(i, k) - dm.get(i, j) - dm.get(j, k);
                if excess > tolerance {
                    report.violations += 1;
                }
                report.max_excess = report.max_excess.max(excess);
            }
        }
    }
    report
}
