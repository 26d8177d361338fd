//! PCA over latent matrices, principal-axis vector analogy, axis-exemplar
//! retrieval, same/different-group distance and KS analysis, 2D projection,
//! and the temporal axis in context space.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::EmbeddingMatrix;
use crate::util::{atomic_write, fnv1a64};

/// Candidate window half-width around each segment point, in projection units.
pub const AXIS_WINDOW: f64 = 0.015;
/// Number of segment points along a PC axis.
pub const AXIS_POINTS: usize = 8;
/// Default pair-sampling budget per distance class.
pub const DEFAULT_PAIR_BUDGET: usize = 200_000;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("rank-deficient input: requested {requested} components, achievable {achievable}")]
    RankDeficient { requested: usize, achievable: usize },
    #[error("insufficient pairs in class '{0}'")]
    InsufficientPairs(String),
    #[error("external projector unavailable ({0}); fall back to method=pca")]
    ExternalUnavailable(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt model: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, AnalyticsError>;

/// Mean, orthonormal components (rows) and explained-variance ratios of a
/// fitted PCA model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    pub components: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Fit PCA from the singular-value decomposition of the mean-centered
/// matrix. When rows are scarcer than dimensions the decomposition goes
/// through the n x n Gram matrix instead of a full SVD.
///
/// Sign convention: each component's largest-|loading| coordinate is
/// positive (ties resolve to the lowest index).
pub fn fit_pca(data: &DMatrix<f64>, k: usize) -> Result<PcaModel> {
    let n = data.nrows();
    let d = data.ncols();
    if n < 2 {
        return Err(AnalyticsError::Precondition(format!(
            "PCA needs at least 2 rows, got {n}"
        )));
    }
    if k > (n - 1).min(d) {
        return Err(AnalyticsError::Precondition(format!(
            "k = {k} exceeds min(n-1, d) = {}",
            (n - 1).min(d)
        )));
    }

    let mean: DVector<f64> = data.row_mean().transpose();
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }

    // (sigma^2, component) pairs sorted by sigma^2 descending.
    let mut spectra: Vec<(f64, DVector<f64>)> = if n < d {
        let gram = &centered * centered.transpose();
        let eig = gram.symmetric_eigen();
        let mut pairs: Vec<(f64, usize)> = eig
            .eigenvalues
            .iter()
            .copied()
            .enumerate()
            .map(|(i, v)| (v.max(0.0), i))
            .collect();
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        pairs
            .into_iter()
            .map(|(lambda, i)| {
                let u = eig.eigenvectors.column(i);
                let v = if lambda > 0.0 {
                    (centered.transpose() * u) / lambda.sqrt()
                } else {
                    DVector::zeros(d)
                };
                (lambda, v)
            })
            .collect()
    } else {
        let svd = centered.clone().svd(false, true);
        let v_t = svd.v_t.expect("requested V^T");
        let mut pairs: Vec<(f64, usize)> = svd
            .singular_values
            .iter()
            .copied()
            .enumerate()
            .map(|(i, s)| (s * s, i))
            .collect();
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        pairs
            .into_iter()
            .map(|(s2, i)| (s2, v_t.row(i).transpose()))
            .collect()
    };

    let total: f64 = spectra.iter().map(|(s2, _)| s2).sum();
    let tol = spectra.first().map(|(s2, _)| s2).copied().unwrap_or(0.0) * 1e-12;
    let rank = spectra.iter().filter(|(s2, _)| *s2 > tol).count();
    if k > rank {
        return Err(AnalyticsError::RankDeficient { requested: k, achievable: rank });
    }
    spectra.truncate(k);

    let mut components = Vec::with_capacity(k);
    let mut ratios = Vec::with_capacity(k);
    for (s2, mut v) in spectra {
        let norm = v.norm();
        if norm > 0.0 {
            v /= norm;
        }
        // Sign convention.
        let mut best = 0usize;
        for (i, x) in v.iter().enumerate() {
            if x.abs() > v[best].abs() {
                best = i;
            }
        }
        if v[best] < 0.0 {
            v = -v;
        }
        components.push(v.iter().copied().collect::<Vec<f64>>());
        ratios.push(if total > 0.0 { s2 / total } else { 0.0 });
    }

    Ok(PcaModel {
        mean: mean.iter().copied().collect(),
        components,
        explained_variance_ratio: ratios,
    })
}

fn check_dim(model: &PcaModel, v_len: usize) -> Result<()> {
    if v_len != model.dim() {
        return Err(AnalyticsError::DimensionMismatch(format!(
            "vector has {} coordinates, model expects {}",
            v_len,
            model.dim()
        )));
    }
    Ok(())
}

fn check_axis(model: &PcaModel, i: usize) -> Result<()> {
    if i >= model.k() {
        return Err(AnalyticsError::Precondition(format!(
            "axis {i} out of range for a {}-component model",
            model.k()
        )));
    }
    Ok(())
}

/// Projection of one mean-centered vector onto components[i].
pub fn pc_project(model: &PcaModel, v: &[f64], i: usize) -> Result<f64> {
    check_axis(model, i)?;
    check_dim(model, v.len())?;
    Ok(v.iter()
        .zip(&model.mean)
        .zip(&model.components[i])
        .map(|((x, m), c)| (x - m) * c)
        .sum())
}

/// Projections for many vectors.
pub fn pc_project_rows(model: &PcaModel, rows: &[Vec<f64>], i: usize) -> Result<Vec<f64>> {
    rows.iter().map(|v| pc_project(model, v, i)).collect()
}

/// Vector analogy along a principal axis: v + d_scalar * components[i].
pub fn analogy_shift(model: &PcaModel, v: &[f64], i: usize, d_scalar: f64) -> Result<Vec<f64>> {
    check_axis(model, i)?;
    check_dim(model, v.len())?;
    Ok(v.iter()
        .zip(&model.components[i])
        .map(|(x, c)| x + d_scalar * c)
        .collect())
}

/// One selected exemplar on a PC axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AxisSelection {
    pub id: String,
    pub projection: f64,
    pub perpendicular: f64,
}

/// Eight segment points along a PC axis with the nearest on-axis paintings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AxisSample {
    pub pc_index: usize,
    pub segment_points: Vec<f64>,
    pub selections: Vec<Option<AxisSelection>>,
}

/// Axis exemplar retrieval: split the projection span into eight
/// equally spaced points; at each point, among paintings projecting within
/// +-0.015 of it, pick the one with minimum perpendicular distance to the
/// axis. A degenerate span (max == min) yields 8 copies of that point.
pub fn select_axis_exemplars(
    model: &PcaModel,
    i: usize,
    embeddings: &EmbeddingMatrix,
) -> Result<AxisSample> {
    check_axis(model, i)?;
    if embeddings.n() == 0 {
        return Err(AnalyticsError::Precondition("embeddings are empty".into()));
    }
    check_dim(model, embeddings.d)?;

    let rows: Vec<Vec<f64>> = (0..embeddings.n())
        .map(|r| embeddings.row(r).iter().map(|&x| x as f64).collect())
        .collect();
    let projections = pc_project_rows(model, &rows, i)?;
    let lo = projections.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = projections.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let segment_points: Vec<f64> = (0..AXIS_POINTS)
        .map(|j| {
            if hi > lo {
                lo + (hi - lo) * j as f64 / (AXIS_POINTS - 1) as f64
            } else {
                lo
            }
        })
        .collect();

    let perpendicular = |r: usize| -> f64 {
        let centered: Vec<f64> = rows[r]
            .iter()
            .zip(&model.mean)
            .map(|(x, m)| x - m)
            .collect();
        let along = projections[r];
        centered
            .iter()
            .zip(&model.components[i])
            .map(|(c, a)| (c - along * a).powi(2))
            .sum::<f64>()
            .sqrt()
    };

    let selections = segment_points
        .iter()
        .map(|&point| {
            let mut best: Option<AxisSelection> = None;
            for r in 0..rows.len() {
                if (projections[r] - point).abs() <= AXIS_WINDOW {
                    let perp = perpendicular(r);
                    let better = match &best {
                        None => true,
                        Some(b) => {
                            perp < b.perpendicular
                                || (perp == b.perpendicular && embeddings.ids[r] < b.id)
                        }
                    };
                    if better {
                        best = Some(AxisSelection {
                            id: embeddings.ids[r].clone(),
                            projection: projections[r],
                            perpendicular: perp,
                        });
                    }
                }
            }
            best
        })
        .collect();

    Ok(AxisSample { pc_index: i, segment_points, selections })
}

/// Two-sample Kolmogorov-Smirnov statistic: sup |ECDF_a - ECDF_b|.
/// Statistic only, no p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(AnalyticsError::Precondition(
            "KS statistic needs two nonempty samples".into(),
        ));
    }
    let mut xs: Vec<f64> = a.to_vec();
    let mut ys: Vec<f64> = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let na = xs.len() as f64;
    let nb = ys.len() as f64;
    let (mut i, mut j) = (0usize, 0usize);
    let mut sup = 0f64;
    while i < xs.len() && j < ys.len() {
        let x = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= x {
            i += 1;
        }
        while j < ys.len() && ys[j] <= x {
            j += 1;
        }
        sup = sup.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(sup.min(1.0))
}

/// Same/different-group distance report for one latent space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupDistanceReport {
    pub grouping: String,
    pub space: String,
    pub mean_same: f64,
    pub mean_diff: f64,
    /// 100 * (mean_diff - mean_same) / mean_same.
    pub pct_diff: f64,
    pub ks: f64,
    pub same_pairs: usize,
    pub diff_pairs: usize,
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Decode pair index p in [0, m*(m-1)/2) to (i, j) with i < j.
fn decode_pair(p: u64, m: u64) -> (u64, u64) {
    // Solve for the row: p sits in row i when cum(i) <= p < cum(i+1),
    // cum(i) = i*m - i*(i+1)/2.
    let pf = p as f64;
    let mf = m as f64;
    let mut i = ((2.0 * mf - 1.0 - ((2.0 * mf - 1.0).powi(2) - 8.0 * pf).max(0.0).sqrt()) / 2.0)
        .floor() as u64;
    let cum = |i: u64| i * m - i * (i + 1) / 2;
    while i > 0 && cum(i) > p {
        i -= 1;
    }
    while cum(i + 1) <= p {
        i += 1;
    }
    let j = p - cum(i) + i + 1;
    (i, j)
}

/// Sample `k` distinct values from [0, total) with a seeded generator.
fn sample_indices(total: u64, k: usize, rng: &mut ChaCha8Rng) -> Vec<u64> {
    if k as u64 >= total {
        return (0..total).collect();
    }
    if (k as u64) * 3 >= total {
        // Dense case: partial Fisher-Yates over the explicit range.
        let mut all: Vec<u64> = (0..total).collect();
        for t in 0..k {
            let swap = rng.gen_range(t..all.len());
            all.swap(t, swap);
        }
        all.truncate(k);
        all.sort_unstable();
        return all;
    }
    let mut seen = HashSet::with_capacity(k);
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let v = rng.gen_range(0..total);
        if seen.insert(v) {
            out.push(v);
        }
    }
    out.sort_unstable();
    out
}

/// Distances between sampled same-group and different-group pairs, with
/// means, relative difference and the KS statistic between the two distance
/// distributions. Sampling is uniform without replacement up to
/// `sample_budget` per class, seeded, and taken over id order so the result
/// is invariant under row permutations of the input.
pub fn group_distance_stats(
    embeddings: &EmbeddingMatrix,
    labels: &HashMap<String, String>,
    grouping: &str,
    sample_budget: usize,
    seed: u64,
) -> Result<GroupDistanceReport> {
    // Labeled members in id order.
    let mut members: Vec<(&str, &str)> = embeddings
        .ids
        .iter()
        .filter_map(|id| labels.get(id).map(|g| (id.as_str(), g.as_str())))
        .collect();
    members.sort_by(|a, b| a.0.cmp(b.0));
    let row_of: HashMap<&str, usize> = embeddings
        .ids
        .iter()
        .enumerate()
        .map(|(r, id)| (id.as_str(), r))
        .collect();

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (idx, (_, g)) in members.iter().enumerate() {
        groups.entry(g).or_default().push(idx);
    }
    let rich_groups = groups.values().filter(|v| v.len() >= 2).count();
    if rich_groups < 2 {
        return Err(AnalyticsError::Precondition(
            "need at least 2 groups with at least 2 members each".into(),
        ));
    }

    let m = members.len() as u64;
    let total_pairs = m * (m - 1) / 2;
    let same_total: u64 = groups
        .values()
        .map(|v| (v.len() as u64) * (v.len() as u64 - 1) / 2)
        .sum();
    let diff_total = total_pairs - same_total;
    if same_total == 0 {
        return Err(AnalyticsError::InsufficientPairs("same-group".into()));
    }
    if diff_total == 0 {
        return Err(AnalyticsError::InsufficientPairs("different-group".into()));
    }

    let dist_of = |a_idx: usize, b_idx: usize| -> f64 {
        let ra = row_of[members[a_idx].0];
        let rb = row_of[members[b_idx].0];
        euclidean(embeddings.row(ra), embeddings.row(rb))
    };

    // Same-group pairs: flat index over cumulative per-group pair counts.
    let group_list: Vec<&Vec<usize>> = groups.values().collect();
    let mut cum = Vec::with_capacity(group_list.len() + 1);
    cum.push(0u64);
    for g in &group_list {
        let c = (g.len() as u64) * (g.len() as u64 - 1) / 2;
        cum.push(cum.last().unwrap() + c);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let same_idx = sample_indices(same_total, sample_budget, &mut rng);
    let same_dists: Vec<f64> = same_idx
        .into_iter()
        .map(|p| {
            let gi = match cum.binary_search(&p) {
                Ok(exact) => {
                    // Skip empty-pair groups sharing the same cumulative value.
                    let mut gi = exact;
                    while cum[gi + 1] == p {
                        gi += 1;
                    }
                    gi
                }
                Err(ins) => ins - 1,
            };
            let local = p - cum[gi];
            let g = group_list[gi];
            let (a, b) = decode_pair(local, g.len() as u64);
            dist_of(g[a as usize], g[b as usize])
        })
        .collect();

    // Different-group pairs: rejection-sample the full pair space, or
    // enumerate it when the budget covers it.
    let mut diff_dists: Vec<f64> = Vec::new();
    if sample_budget as u64 >= diff_total {
        for p in 0..total_pairs {
            let (a, b) = decode_pair(p, m);
            if members[a as usize].1 != members[b as usize].1 {
                diff_dists.push(dist_of(a as usize, b as usize));
            }
        }
    } else {
        let mut seen = HashSet::new();
        while diff_dists.len() < sample_budget {
            let p = rng.gen_range(0..total_pairs);
            let (a, b) = decode_pair(p, m);
            if members[a as usize].1 == members[b as usize].1 {
                continue;
            }
            if seen.insert(p) {
                diff_dists.push(dist_of(a as usize, b as usize));
            }
        }
    }

    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let mean_same = mean(&same_dists);
    let mean_diff = mean(&diff_dists);
    let pct_diff = if mean_same > 0.0 {
        100.0 * (mean_diff - mean_same) / mean_same
    } else {
        0.0
    };
    let ks = ks_two_sample(&same_dists, &diff_dists)?;

    Ok(GroupDistanceReport {
        grouping: grouping.to_string(),
        space: embeddings.space.tag().to_string(),
        mean_same,
        mean_diff,
        pct_diff,
        ks,
        same_pairs: same_dists.len(),
        diff_pairs: diff_dists.len(),
    })
}

/// 2D projection method.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ProjectionMethod {
    /// First two PCA projections; deterministic.
    Pca,
    /// Delegate to a configured neighbor-embedding adapter executable,
    /// invoked as `command [args...] <input.tsv> <output.tsv> <seed>`.
    External {
        command: String,
        #[serde(default)]
        args: Vec<String>,
    },
}

/// Project an embedding matrix to n x 2 coordinates.
pub fn project_2d(
    embeddings: &EmbeddingMatrix,
    method: &ProjectionMethod,
    seed: u64,
) -> Result<Vec<[f64; 2]>> {
    let n = embeddings.n();
    if n < 2 {
        return Err(AnalyticsError::Precondition(format!(
            "2D projection needs at least 2 rows, got {n}"
        )));
    }
    match method {
        ProjectionMethod::Pca => {
            let data = DMatrix::from_fn(n, embeddings.d, |r, c| embeddings.row(r)[c] as f64);
            // Low-rank data still projects: missing axes are identically 0.
            let k_max = 2.min(n - 1).min(embeddings.d);
            let model = match fit_pca(&data, k_max) {
                Ok(m) => m,
                Err(AnalyticsError::RankDeficient { achievable, .. }) if achievable >= 1 => {
                    fit_pca(&data, achievable.min(2))?
                }
                Err(e) => return Err(e),
            };
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|r| embeddings.row(r).iter().map(|&x| x as f64).collect())
                .collect();
            let x0 = pc_project_rows(&model, &rows, 0)?;
            let x1 = if model.k() > 1 {
                pc_project_rows(&model, &rows, 1)?
            } else {
                vec![0.0; n]
            };
            Ok(x0.into_iter().zip(x1).map(|(a, b)| [a, b]).collect())
        }
        ProjectionMethod::External { command, args } => {
            let dir = std::env::temp_dir().join(format!(
                "artlatent-proj-{}-{}",
                std::process::id(),
                fnv1a64(embeddings.checkpoint_id.as_bytes())
            ));
            std::fs::create_dir_all(&dir)?;
            let input = dir.join("input.tsv");
            let output = dir.join("output.tsv");
            let mut text = String::new();
            for r in 0..n {
                let row: Vec<String> =
                    embeddings.row(r).iter().map(|v| format!("{v}")).collect();
                text.push_str(&row.join("\t"));
                text.push('\n');
            }
            atomic_write(&input, text.as_bytes())?;
            let status = std::process::Command::new(command)
                .args(args)
                .arg(&input)
                .arg(&output)
                .arg(seed.to_string())
                .status()
                .map_err(|e| AnalyticsError::ExternalUnavailable(e.to_string()))?;
            if !status.success() {
                return Err(AnalyticsError::ExternalUnavailable(format!(
                    "adapter exited with {status}"
                )));
            }
            let out_text = std::fs::read_to_string(&output)?;
            let mut coords = Vec::with_capacity(n);
            for line in out_text.lines() {
                let parts: Vec<&str> = line.split('\t').collect();
                if parts.len() != 2 {
                    return Err(AnalyticsError::Corrupt(format!(
                        "adapter output row has {} columns, expected 2",
                        parts.len()
                    )));
                }
                let x: f64 = parts[0].parse().map_err(|_| {
                    AnalyticsError::Corrupt("adapter output is not numeric".into())
                })?;
                let y: f64 = parts[1].parse().map_err(|_| {
                    AnalyticsError::Corrupt("adapter output is not numeric".into())
                })?;
                coords.push([x, y]);
            }
            if coords.len() != n {
                return Err(AnalyticsError::Corrupt(format!(
                    "adapter returned {} rows, expected {n}",
                    coords.len()
                )));
            }
            Ok(coords)
        }
    }
}

/// Directional shift in context space between two century buckets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemporalAxis {
    pub vector: Vec<f64>,
    pub from_label: String,
    pub to_label: String,
}

/// Mean C-vector of the `to` century minus the mean of the `from` century.
/// A century bucket covers its ten decades, e.g. 1500 covers 1500-1590.
pub fn temporal_axis_between(
    embeddings: &EmbeddingMatrix,
    decades: &HashMap<String, i32>,
    from_century: i32,
    to_century: i32,
) -> Result<TemporalAxis> {
    let bucket_mean = |century: i32| -> Result<Vec<f64>> {
        let mut sum = vec![0f64; embeddings.d];
        let mut count = 0usize;
        for (r, id) in embeddings.ids.iter().enumerate() {
            if let Some(&dec) = decades.get(id) {
                if dec >= century && dec < century + 100 {
                    for (s, &v) in sum.iter_mut().zip(embeddings.row(r)) {
                        *s += v as f64;
                    }
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(AnalyticsError::Precondition(format!(
                "no paintings in the {century}s century bucket"
            )));
        }
        Ok(sum.into_iter().map(|s| s / count as f64).collect())
    };
    let from = bucket_mean(from_century)?;
    let to = bucket_mean(to_century)?;
    Ok(TemporalAxis {
        vector: from.iter().zip(&to).map(|(f, t)| t - f).collect(),
        from_label: format!("{from_century}s"),
        to_label: format!("{to_century}s"),
    })
}

/// The default axis: 1500s -> 1900s.
pub fn temporal_axis(
    embeddings: &EmbeddingMatrix,
    decades: &HashMap<String, i32>,
) -> Result<TemporalAxis> {
    temporal_axis_between(embeddings, decades, 1500, 1900)
}

/// Scalar projection v . axis / ||axis||.
pub fn axis_projection(v: &[f64], axis: &TemporalAxis) -> Result<f64> {
    if v.len() != axis.vector.len() {
        return Err(AnalyticsError::DimensionMismatch(format!(
            "vector has {} coordinates, axis has {}",
            v.len(),
            axis.vector.len()
        )));
    }
    let norm = axis.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(AnalyticsError::Precondition("axis vector is zero".into()));
    }
    Ok(v.iter().zip(&axis.vector).map(|(a, b)| a * b).sum::<f64>() / norm)
}

/// Persist a PCA model next to the latent-store layout: mean and components
/// as a vectors.f32 payload, ratios in the manifest.
pub fn save_pca(model: &PcaModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut payload: Vec<u8> = Vec::new();
    for v in &model.mean {
        payload.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for comp in &model.components {
        for v in comp {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    #[derive(Serialize)]
    struct PcaManifest<'a> {
        d: usize,
        k: usize,
        explained_variance_ratio: &'a [f64],
        checksum: String,
    }
    atomic_write(&dir.join("vectors.f32"), &payload)?;
    let manifest = PcaManifest {
        d: model.dim(),
        k: model.k(),
        explained_variance_ratio: &model.explained_variance_ratio,
        checksum: format!("{:016x}", fnv1a64(&payload)),
    };
    let bytes = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| AnalyticsError::Corrupt(e.to_string()))?;
    atomic_write(&dir.join("manifest.json"), &bytes)?;
    Ok(())
}

pub fn load_pca(dir: &Path) -> Result<PcaModel> {
    #[derive(Deserialize)]
    struct PcaManifest {
        d: usize,
        k: usize,
        explained_variance_ratio: Vec<f64>,
        checksum: String,
    }
    let manifest: PcaManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)
            .map_err(|e| AnalyticsError::Corrupt(format!("pca manifest: {e}")))?;
    let payload = std::fs::read(dir.join("vectors.f32"))?;
    if format!("{:016x}", fnv1a64(&payload)) != manifest.checksum {
        return Err(AnalyticsError::Corrupt("pca payload checksum mismatch".into()));
    }
    let expected = (manifest.k + 1) * manifest.d * 4;
    if payload.len() != expected {
        return Err(AnalyticsError::Corrupt(format!(
            "pca payload holds {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let floats: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let mean = floats[..manifest.d].to_vec();
    let components = (0..manifest.k)
        .map(|i| floats[(i + 1) * manifest.d..(i + 2) * manifest.d].to_vec())
        .collect();
    Ok(PcaModel {
        mean,
        components,
        explained_variance_ratio: manifest.explained_variance_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Space;

    /// Independent PCA oracle: dense eigendecomposition of the covariance
    /// matrix, with the same sign convention applied.
    pub fn pca_oracle(data: &DMatrix<f64>, k: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let n = data.nrows();
        let mean = data.row_mean();
        let mut centered = data.clone();
        for mut row in centered.row_iter_mut() {
            row -= &mean;
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let eig = cov.symmetric_eigen();
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        let mut comps = Vec::new();
        let mut ratios = Vec::new();
        for &idx in order.iter().take(k) {
            let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
            let mut best = 0usize;
            for (i, x) in v.iter().enumerate() {
                if x.abs() > v[best].abs() {
                    best = i;
                }
            }
            if v[best] < 0.0 {
                for x in v.iter_mut() {
                    *x = -*x;
                }
            }
            comps.push(v);
            ratios.push(eig.eigenvalues[idx].max(0.0) / total);
        }
        (comps, ratios)
    }

    fn random_data(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn pca_line_has_single_component() {
        // Points on y = 2x, zero mean.
        let data = DMatrix::from_row_slice(4, 2, &[-2.0, -4.0, -1.0, -2.0, 1.0, 2.0, 2.0, 4.0]);
        let model = fit_pca(&data, 1).unwrap();
        assert!((model.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        // Requesting a second component on rank-1 data names the rank.
        match fit_pca(&data, 2) {
            Err(AnalyticsError::RankDeficient { achievable, .. }) => assert_eq!(achievable, 1),
            other => panic!("expected RankDeficient, got {other:?}"),
        }
    }

    #[test]
    fn pca_matches_covariance_oracle() {
        for seed in 0..5 {
            let data = random_data(6 + seed as usize, 4, seed);
            let k = 3;
            let model = fit_pca(&data, k).unwrap();
            let (oracle_comps, oracle_ratios) = pca_oracle(&data, k);
            for i in 0..k {
                for j in 0..4 {
                    assert!(
                        (model.components[i][j] - oracle_comps[i][j]).abs() < 1e-8,
                        "component {i}[{j}]"
                    );
                }
                assert!((model.explained_variance_ratio[i] - oracle_ratios[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pca_gram_route_matches_oracle_when_d_exceeds_n() {
        let data = random_data(5, 12, 9);
        let model = fit_pca(&data, 3).unwrap();
        let (oracle_comps, oracle_ratios) = pca_oracle(&data, 3);
        for i in 0..3 {
            for j in 0..12 {
                assert!((model.components[i][j] - oracle_comps[i][j]).abs() < 1e-8);
            }
            assert!((model.explained_variance_ratio[i] - oracle_ratios[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn pca_components_orthonormal_and_ratios_valid() {
        let data = random_data(20, 6, 3);
        let model = fit_pca(&data, 5).unwrap();
        for i in 0..5 {
            let norm: f64 = model.components[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
            for j in 0..i {
                let dot: f64 = model.components[i]
                    .iter()
                    .zip(&model.components[j])
                    .map(|(a, b)| a * b)
                    .sum();
                assert!(dot.abs() < 1e-7);
            }
        }
        let sum: f64 = model.explained_variance_ratio.iter().sum();
        assert!(sum <= 1.0 + 1e-9);
        for w in model.explained_variance_ratio.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
    }

    #[test]
    fn projection_centering_and_orthonormality() {
        let data = random_data(10, 4, 5);
        let model = fit_pca(&data, 3).unwrap();
        // The mean projects to zero on every axis.
        for i in 0..3 {
            assert!(pc_project(&model, &model.mean, i).unwrap().abs() < 1e-9);
        }
        // mean + 3 * component projects to exactly 3.
        let shifted: Vec<f64> = model
            .mean
            .iter()
            .zip(&model.components[1])
            .map(|(m, c)| m + 3.0 * c)
            .collect();
        assert!((pc_project(&model, &shifted, 1).unwrap() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn analogy_shift_moves_exactly_one_axis() {
        let data = random_data(12, 5, 7);
        let model = fit_pca(&data, 4).unwrap();
        let v: Vec<f64> = (0..5).map(|i| i as f64 * 0.3).collect();
        let unchanged = analogy_shift(&model, &v, 2, 0.0).unwrap();
        assert_eq!(unchanged, v);
        let shifted = analogy_shift(&model, &v, 2, 5.0).unwrap();
        let delta_norm: f64 = shifted
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((delta_norm - 5.0).abs() < 1e-9);
        for axis in 0..4 {
            let before = pc_project(&model, &v, axis).unwrap();
            let after = pc_project(&model, &shifted, axis).unwrap();
            let expected = if axis == 2 { 5.0 } else { 0.0 };
            assert!((after - before - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn ks_known_cases() {
        assert_eq!(ks_two_sample(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(ks_two_sample(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap(), 1.0);
        let d = ks_two_sample(&[1.0, 2.0, 3.0, 4.0], &[2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((d - 0.25).abs() < 1e-12);
        assert!(ks_two_sample(&[], &[1.0]).is_err());
    }

    /// Brute-force ECDF oracle: evaluate |F_a - F_b| at every sample point.
    pub fn ks_oracle(a: &[f64], b: &[f64]) -> f64 {
        let ecdf = |xs: &[f64], t: f64| xs.iter().filter(|&&x| x <= t).count() as f64 / xs.len() as f64;
        a.iter()
            .chain(b.iter())
            .map(|&t| (ecdf(a, t) - ecdf(b, t)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn ks_matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let na = rng.gen_range(1..30);
            let nb = rng.gen_range(1..30);
            let a: Vec<f64> = (0..na).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..nb).map(|_| (rng.gen_range(-3.0..3.0) as f64).round()).collect();
            let got = ks_two_sample(&a, &b).unwrap();
            let want = ks_oracle(&a, &b);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn ks_symmetric_and_monotone_invariant() {
        let a = vec![0.1, 0.5, 0.9, 2.0];
        let b = vec![0.3, 0.4, 1.5];
        let d1 = ks_two_sample(&a, &b).unwrap();
        let d2 = ks_two_sample(&b, &a).unwrap();
        assert_eq!(d1, d2);
        let f = |x: f64| x.exp();
        let fa: Vec<f64> = a.iter().map(|&x| f(x)).collect();
        let fb: Vec<f64> = b.iter().map(|&x| f(x)).collect();
        assert!((ks_two_sample(&fa, &fb).unwrap() - d1).abs() < 1e-12);
    }

    fn small_embeddings(rows: Vec<(&str, Vec<f32>)>) -> EmbeddingMatrix {
        // Test-only matrix that bypasses the canonical space dimensions.
        let d = rows[0].1.len();
        EmbeddingMatrix {
            space: Space::C,
            d,
            values: rows.iter().flat_map(|(_, v)| v.clone()).collect(),
            ids: rows.iter().map(|(id, _)| id.to_string()).collect(),
            checkpoint_id: "test".into(),
        }
    }

    #[test]
    fn group_distances_on_separated_clusters() {
        let mut rows = Vec::new();
        let owned: Vec<String> = (0..8).map(|i| format!("p{i}")).collect();
        for i in 0..8 {
            let base = if i < 4 { 0.0 } else { 100.0 };
            rows.push((
                owned[i].as_str(),
                vec![base + (i % 4) as f32 * 0.1, 0.0, 0.0],
            ));
        }
        let emb = small_embeddings(rows);
        let labels: HashMap<String, String> = (0..8)
            .map(|i| (format!("p{i}"), if i < 4 { "g1".into() } else { "g2".into() }))
            .collect();
        let report = group_distance_stats(&emb, &labels, "author", 1000, 1).unwrap();
        assert!(report.mean_diff > report.mean_same);
        assert_eq!(report.ks, 1.0);
        // Budget covers every pair, so counts are exhaustive.
        assert_eq!(report.same_pairs, 2 * 6);
        assert_eq!(report.diff_pairs, 16);
    }

    #[test]
    fn group_distances_degenerate_geometry() {
        let owned: Vec<String> = (0..6).map(|i| format!("p{i}")).collect();
        let rows = owned.iter().map(|id| (id.as_str(), vec![1.0f32, 2.0, 3.0])).collect();
        let emb = small_embeddings(rows);
        let labels: HashMap<String, String> = (0..6)
            .map(|i| (format!("p{i}"), if i % 2 == 0 { "a".into() } else { "b".into() }))
            .collect();
        let report = group_distance_stats(&emb, &labels, "author", 1000, 1).unwrap();
        assert_eq!(report.mean_same, 0.0);
        assert_eq!(report.mean_diff, 0.0);
        assert_eq!(report.ks, 0.0);
    }

    #[test]
    fn group_distances_row_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ids: Vec<String> = (0..12).map(|i| format!("p{i:02}")).collect();
        let vecs: Vec<Vec<f32>> = (0..12)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let labels: HashMap<String, String> = (0..12)
            .map(|i| (format!("p{i:02}"), format!("g{}", i % 3)))
            .collect();
        let fwd: Vec<(&str, Vec<f32>)> = ids
            .iter()
            .zip(&vecs)
            .map(|(id, v)| (id.as_str(), v.clone()))
            .collect();
        let rev: Vec<(&str, Vec<f32>)> = fwd.iter().rev().cloned().collect();
        let r1 = group_distance_stats(&small_embeddings(fwd), &labels, "g", 10, 5).unwrap();
        let r2 = group_distance_stats(&small_embeddings(rev), &labels, "g", 10, 5).unwrap();
        assert_eq!(r1.mean_same, r2.mean_same);
        assert_eq!(r1.mean_diff, r2.mean_diff);
        assert_eq!(r1.ks, r2.ks);
    }

    #[test]
    fn exemplars_match_bruteforce_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ids: Vec<String> = (0..20).map(|i| format!("p{i:02}")).collect();
        let rows: Vec<(&str, Vec<f32>)> = ids
            .iter()
            .map(|id| {
                (
                    id.as_str(),
                    (0..3).map(|_| rng.gen_range(-0.05f32..0.05)).collect(),
                )
            })
            .collect();
        let emb = small_embeddings(rows);
        let data = DMatrix::from_fn(emb.n(), emb.d, |r, c| emb.row(r)[c] as f64);
        let model = fit_pca(&data, 2).unwrap();
        let sample = select_axis_exemplars(&model, 0, &emb).unwrap();

        // Independent brute-force oracle.
        let rows_f64: Vec<Vec<f64>> = (0..emb.n())
            .map(|r| emb.row(r).iter().map(|&x| x as f64).collect())
            .collect();
        let projections = pc_project_rows(&model, &rows_f64, 0).unwrap();
        let lo = projections.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = projections.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (j, sel) in sample.selections.iter().enumerate() {
            let point = lo + (hi - lo) * j as f64 / 7.0;
            assert!((sample.segment_points[j] - point).abs() < 1e-12);
            let mut want: Option<(usize, f64)> = None;
            for r in 0..emb.n() {
                if (projections[r] - point).abs() <= AXIS_WINDOW {
                    let centered: Vec<f64> = rows_f64[r]
                        .iter()
                        .zip(&model.mean)
                        .map(|(x, m)| x - m)
                        .collect();
                    let perp = centered
                        .iter()
                        .zip(&model.components[0])
                        .map(|(c, a)| (c - projections[r] * a).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if want.is_none() || perp < want.unwrap().1 {
                        want = Some((r, perp));
                    }
                }
            }
            match (sel, want) {
                (Some(s), Some((r, perp))) => {
                    assert_eq!(s.id, emb.ids[r]);
                    assert!((s.perpendicular - perp).abs() < 1e-12);
                }
                (None, None) => {}
                other => panic!("selection mismatch at point {j}: {other:?}"),
            }
        }
    }

    #[test]
    fn exemplars_degenerate_span() {
        let owned: Vec<String> = (0..5).map(|i| format!("p{i}")).collect();
        let rows = owned.iter().map(|id| (id.as_str(), vec![0.5f32, 0.5])).collect();
        let emb = small_embeddings(rows);
        // All vectors identical: build a dummy model over a spread dataset
        // and select over the degenerate embedding.
        let data = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 2.0, 0.0]);
        let model = fit_pca(&data, 1).unwrap();
        let sample = select_axis_exemplars(&model, 0, &emb).unwrap();
        let first = sample.segment_points[0];
        assert!(sample.segment_points.iter().all(|&p| p == first));
        assert!(sample.selections.iter().all(|s| s.is_some()));
    }

    #[test]
    fn temporal_axis_arithmetic_and_antisymmetry() {
        let ids: Vec<String> = (0..6).map(|i| format!("p{i}")).collect();
        let rows: Vec<(&str, Vec<f32>)> = vec![
            (ids[0].as_str(), vec![1.0, 0.0]),
            (ids[1].as_str(), vec![3.0, 0.0]),
            (ids[2].as_str(), vec![2.0, 2.0]),
            (ids[3].as_str(), vec![4.0, 4.0]),
            (ids[4].as_str(), vec![6.0, 6.0]),
            (ids[5].as_str(), vec![0.0, 0.0]),
        ];
        let emb = small_embeddings(rows);
        let decades: HashMap<String, i32> = [
            ("p0", 1500),
            ("p1", 1590),
            ("p2", 1900),
            ("p3", 1950),
            ("p4", 1990),
            ("p5", 1700),
        ]
        .into_iter()
        .map(|(a, b)| (a.to_string(), b))
        .collect();
        let axis = temporal_axis(&emb, &decades).unwrap();
        // 1500s mean = (2, 0); 1900s mean = (4, 4).
        assert_eq!(axis.vector, vec![2.0, 4.0]);
        let rev = temporal_axis_between(&emb, &decades, 1900, 1500).unwrap();
        assert_eq!(rev.vector, vec![-2.0, -4.0]);
        // Forced by construction: the to-bucket mean projects higher.
        let p_to = axis_projection(&[4.0, 4.0], &axis).unwrap();
        let p_from = axis_projection(&[2.0, 0.0], &axis).unwrap();
        assert!(p_to > p_from);
    }

    #[test]
    fn temporal_axis_empty_bucket_errors() {
        let ids = ["p0".to_string()];
        let emb = small_embeddings(vec![(ids[0].as_str(), vec![1.0f32])]);
        let decades: HashMap<String, i32> = [("p0".to_string(), 1500)].into_iter().collect();
        assert!(matches!(
            temporal_axis(&emb, &decades),
            Err(AnalyticsError::Precondition(_))
        ));
    }

    #[test]
    fn axis_projection_linear_and_guarded() {
        let axis = TemporalAxis {
            vector: vec![3.0, 4.0],
            from_label: "1500s".into(),
            to_label: "1900s".into(),
        };
        assert!((axis_projection(&[3.0, 4.0], &axis).unwrap() - 5.0).abs() < 1e-12);
        assert!(axis_projection(&[-4.0, 3.0], &axis).unwrap().abs() < 1e-12);
        // Linearity.
        let a = axis_projection(&[1.0, 2.0], &axis).unwrap();
        let b = axis_projection(&[0.5, -1.0], &axis).unwrap();
        let ab = axis_projection(&[1.5, 1.0], &axis).unwrap();
        assert!((a + b - ab).abs() < 1e-12);
        let zero = TemporalAxis { vector: vec![0.0, 0.0], from_label: "".into(), to_label: "".into() };
        assert!(axis_projection(&[1.0, 1.0], &zero).is_err());
    }

    #[test]
    fn project2d_pca_basics() {
        // Two points: symmetric about the origin on axis 0.
        let ids = ["a".to_string(), "b".to_string()];
        let emb = small_embeddings(vec![
            (ids[0].as_str(), vec![0.0f32, 0.0, 0.0]),
            (ids[1].as_str(), vec![2.0, 0.0, 0.0]),
        ]);
        let coords = project_2d(&emb, &ProjectionMethod::Pca, 0).unwrap();
        assert!((coords[0][0] + coords[1][0]).abs() < 1e-9);
        assert!(coords[0][1].abs() < 1e-9 && coords[1][1].abs() < 1e-9);
    }

    #[test]
    fn project2d_external_adapter_roundtrip() {
        // Fake adapter: copies the first two input columns.
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("adapter.sh");
        std::fs::write(&script, "#!/bin/sh\ncut -f1,2 \"$1\" > \"$2\"\n").unwrap();
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();

        let ids = ["a".to_string(), "b".to_string()];
        let emb = small_embeddings(vec![
            (ids[0].as_str(), vec![1.0f32, 2.0, 3.0]),
            (ids[1].as_str(), vec![4.0, 5.0, 6.0]),
        ]);
        let method = ProjectionMethod::External {
            command: script.display().to_string(),
            args: vec![],
        };
        let coords = project_2d(&emb, &method, 7).unwrap();
        assert_eq!(coords, vec![[1.0, 2.0], [4.0, 5.0]]);
        assert_eq!(coords, project_2d(&emb, &method, 7).unwrap());

        let missing = ProjectionMethod::External {
            command: "/nonexistent/adapter".into(),
            args: vec![],
        };
        assert!(matches!(
            project_2d(&emb, &missing, 7),
            Err(AnalyticsError::ExternalUnavailable(_))
        ));
    }

    #[test]
    fn pca_reconstruction_at_full_rank() {
        let data = random_data(8, 5, 13);
        let k = 5; // full rank: n-1 = 7 >= d = 5
        let model = fit_pca(&data, k).unwrap();
        // Project and reconstruct every row; relative error below 1e-6.
        for r in 0..8 {
            let row: Vec<f64> = data.row(r).iter().copied().collect();
            let mut recon = model.mean.clone();
            for i in 0..k {
                let p = pc_project(&model, &row, i).unwrap();
                for (x, c) in recon.iter_mut().zip(&model.components[i]) {
                    *x += p * c;
                }
            }
            let err: f64 = recon
                .iter()
                .zip(&row)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
            assert!(err / scale < 1e-6);
        }
    }

    #[test]
    fn decode_pair_covers_triangle() {
        for m in 2u64..10 {
            let mut seen = HashSet::new();
            for p in 0..m * (m - 1) / 2 {
                let (i, j) = decode_pair(p, m);
                assert!(i < j && j < m, "p={p} m={m} -> ({i},{j})");
                assert!(seen.insert((i, j)));
            }
            assert_eq!(seen.len() as u64, m * (m - 1) / 2);
        }
    }
}
