//! Year-prediction regression on latent vectors and LOWESS trend curves.

pub mod gbrt;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::Space;
use crate::util::atomic_write;
pub use gbrt::{GbtModel, GbtParams};

#[derive(Debug, Error)]
pub enum ChronometryError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("non-finite features in rows {0:?}")]
    NonFinite(Vec<usize>),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt model: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, ChronometryError>;

/// Train/test partition parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_fraction: 0.7, seed: 0 }
    }
}

/// Seeded uniform partition of ids. The shuffle runs over sorted ids so the
/// partition is invariant under input ordering. |train| = round(fraction*n).
pub fn split(ids: &[String], spec: &SplitSpec) -> Result<(Vec<String>, Vec<String>)> {
    if ids.is_empty() {
        return Err(ChronometryError::Precondition("no records to split".into()));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(ChronometryError::Precondition(format!(
            "train_fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    let n = sorted.len();
    let n_train = (spec.train_fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for t in 0..n.saturating_sub(1) {
        let swap = rng.gen_range(t..n);
        sorted.swap(t, swap);
    }
    let test = sorted.split_off(n_train);
    Ok((sorted, test))
}

/// A fitted year regressor plus everything needed to audit it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct YearModel {
    pub regressor: GbtModel,
    pub feature_dim: usize,
    pub space: Space,
    pub hyperparams: GbtParams,
    pub training_digest: String,
}

/// Fit a gradient-boosted ensemble mapping latent rows to decades.
pub fn train_year_model(
    x: &[f32],
    n: usize,
    d: usize,
    y: &[f64],
    space: Space,
    params: &GbtParams,
    training_digest: &str,
) -> Result<YearModel> {
    if n < 10 {
        return Err(ChronometryError::Precondition(format!(
            "need at least 10 training rows, got {n}"
        )));
    }
    if x.len() != n * d || y.len() != n {
        return Err(ChronometryError::DimensionMismatch(format!(
            "x has {} values for {n} x {d}, y has {}",
            x.len(),
            y.len()
        )));
    }
    let bad: Vec<usize> = (0..n)
        .filter(|&r| x[r * d..(r + 1) * d].iter().any(|v| !v.is_finite()))
        .collect();
    if !bad.is_empty() {
        return Err(ChronometryError::NonFinite(bad));
    }
    let regressor = GbtModel::fit(x, n, d, y, params);
    Ok(YearModel {
        regressor,
        feature_dim: d,
        space,
        hyperparams: params.clone(),
        training_digest: training_digest.to_string(),
    })
}

/// Continuous year estimates for a row-major m x d matrix.
pub fn predict_years(model: &YearModel, x: &[f32], m: usize) -> Result<Vec<f64>> {
    if x.len() != m * model.feature_dim {
        return Err(ChronometryError::DimensionMismatch(format!(
            "x has {} values for {m} rows, model expects {} features",
            x.len(),
            model.feature_dim
        )));
    }
    Ok(model.regressor.predict(x, m))
}

/// Per-painting prediction row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub decade: f64,
    pub predicted: f64,
}

/// R², Pearson correlation, and the per-painting prediction table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub r2: f64,
    /// Absent when the targets have zero variance.
    pub pearson: Option<f64>,
    pub predictions: Vec<PredictionRow>,
}

/// r2 = 1 - SS_res/SS_tot and the sample correlation of (pred, y).
pub fn score(pred: &[f64], y: &[f64]) -> Result<(f64, Option<f64>)> {
    if pred.len() != y.len() {
        return Err(ChronometryError::DimensionMismatch(format!(
            "{} predictions vs {} targets",
            pred.len(),
            y.len()
        )));
    }
    if y.len() < 2 {
        return Err(ChronometryError::Precondition(
            "evaluation needs at least 2 rows".into(),
        ));
    }
    let n = y.len() as f64;
    let mean_y = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|v| (v - mean_y).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(y).map(|(p, v)| (p - v).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };

    let pearson = if ss_tot > 0.0 {
        let mean_p = pred.iter().sum::<f64>() / n;
        let ss_p: f64 = pred.iter().map(|v| (v - mean_p).powi(2)).sum();
        if ss_p > 0.0 {
            let cov: f64 = pred
                .iter()
                .zip(y)
                .map(|(p, v)| (p - mean_p) * (v - mean_y))
                .sum();
            Some((cov / (ss_p * ss_tot).sqrt()).clamp(-1.0, 1.0))
        } else {
            Some(0.0)
        }
    } else {
        None
    };
    Ok((r2, pearson))
}

pub fn evaluate(
    model: &YearModel,
    ids: &[String],
    x: &[f32],
    y: &[f64],
) -> Result<EvalReport> {
    let m = ids.len();
    if y.len() != m {
        return Err(ChronometryError::DimensionMismatch(format!(
            "{m} ids vs {} targets",
            y.len()
        )));
    }
    let pred = predict_years(model, x, m)?;
    let (r2, pearson) = score(&pred, y)?;
    let predictions = ids
        .iter()
        .zip(y)
        .zip(&pred)
        .map(|((id, &decade), &predicted)| PredictionRow {
            id: id.clone(),
            decade,
            predicted,
        })
        .collect();
    Ok(EvalReport { r2, pearson, predictions })
}

/// Model file plus metadata sidecar.
pub fn save_year_model(model: &YearModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let body = serde_json::to_vec(&model.regressor)
        .map_err(|e| ChronometryError::Corrupt(e.to_string()))?;
    #[derive(Serialize)]
    struct Sidecar<'a> {
        space: Space,
        feature_dim: usize,
        hyperparams: &'a GbtParams,
        training_digest: &'a str,
    }
    let sidecar = serde_json::to_vec_pretty(&Sidecar {
        space: model.space,
        feature_dim: model.feature_dim,
        hyperparams: &model.hyperparams,
        training_digest: &model.training_digest,
    })
    .map_err(|e| ChronometryError::Corrupt(e.to_string()))?;
    atomic_write(&dir.join("model.json"), &body)?;
    atomic_write(&dir.join("metadata.json"), &sidecar)?;
    Ok(())
}

pub fn load_year_model(dir: &Path) -> Result<YearModel> {
    #[derive(Deserialize)]
    struct Sidecar {
        space: Space,
        feature_dim: usize,
        hyperparams: GbtParams,
        training_digest: String,
    }
    let sidecar: Sidecar =
        serde_json::from_slice(&std::fs::read(dir.join("metadata.json"))?)
            .map_err(|e| ChronometryError::Corrupt(format!("metadata: {e}")))?;
    let regressor: GbtModel = serde_json::from_slice(&std::fs::read(dir.join("model.json"))?)
        .map_err(|e| ChronometryError::Corrupt(format!("model: {e}")))?;
    if regressor.d != sidecar.feature_dim {
        return Err(ChronometryError::Corrupt(format!(
            "model dimension {} disagrees with sidecar {}",
            regressor.d, sidecar.feature_dim
        )));
    }
    Ok(YearModel {
        regressor,
        feature_dim: sidecar.feature_dim,
        space: sidecar.space,
        hyperparams: sidecar.hyperparams,
        training_digest: sidecar.training_digest,
    })
}

/// A smoothed trend curve evaluated at the (sorted) input xs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCurve {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub frac: f64,
    pub iters: usize,
}

pub const LOWESS_FRAC: f64 = 2.0 / 3.0;
pub const LOWESS_ITERS: usize = 3;

fn tricube(u: f64) -> f64 {
    let a = 1.0 - u.abs().powi(3);
    if a > 0.0 { a.powi(3) } else { 0.0 }
}

/// Weighted linear fit of (xs, ys) evaluated at x0. Degenerate weighted
/// x-variance falls back to the weighted mean.
fn weighted_fit(xs: &[f64], ys: &[f64], w: &[f64], x0: f64) -> f64 {
    let sw: f64 = w.iter().sum();
    if sw <= 0.0 {
        // No in-window weight at all; nearest point carries the value.
        let nearest = (0..xs.len())
            .min_by(|&a, &b| (xs[a] - x0).abs().total_cmp(&(xs[b] - x0).abs()))
            .unwrap();
        return ys[nearest];
    }
    // Locally constant data reproduces exactly instead of via the normal
    // equations, which would smear it by an ulp.
    let mut in_window = xs.iter().zip(ys).zip(w).filter(|&((_, _), &wi)| wi > 0.0);
    if let Some(((_, &first), _)) = in_window.next() {
        if in_window.all(|((_, &y), _)| y == first) {
            return first;
        }
    }
    let mx: f64 = xs.iter().zip(w).map(|(x, wi)| wi * x).sum::<f64>() / sw;
    let my: f64 = ys.iter().zip(w).map(|(y, wi)| wi * y).sum::<f64>() / sw;
    let sxx: f64 = xs.iter().zip(w).map(|(x, wi)| wi * (x - mx).powi(2)).sum();
    if sxx <= 1e-12 * sw {
        return my;
    }
    let sxy: f64 = xs
        .iter()
        .zip(ys)
        .zip(w)
        .map(|((x, y), wi)| wi * (x - mx) * (y - my))
        .sum();
    my + sxy / sxx * (x0 - mx)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Cleveland's LOWESS: tricube locally weighted linear fits over the
/// frac-nearest neighbors of each x, with `iters` bisquare robustifying
/// reweights, evaluated at the input xs. Output is ordered by x and is
/// invariant under permutation of the input points.
pub fn lowess(xs: &[f64], ys: &[f64], frac: f64, iters: usize) -> Result<TrendCurve> {
    if xs.len() != ys.len() {
        return Err(ChronometryError::DimensionMismatch(format!(
            "{} xs vs {} ys",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len();
    if n < 3 {
        return Err(ChronometryError::Precondition(format!(
            "lowess needs at least 3 points, got {n}"
        )));
    }
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(ChronometryError::Precondition(format!(
            "frac {frac} outside (0, 1]"
        )));
    }
    let mut points: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let sx: Vec<f64> = points.iter().map(|p| p.0).collect();
    let sy: Vec<f64> = points.iter().map(|p| p.1).collect();
    if sx[0] == sx[n - 1] {
        return Err(ChronometryError::Precondition(
            "all xs identical".into(),
        ));
    }

    let r = ((frac * n as f64).ceil() as usize).clamp(2, n);
    let mut robust = vec![1f64; n];
    let mut fitted = vec![0f64; n];
    for iteration in 0..=iters {
        fitted = crate::par::map_range(0..n, |i| {
            // frac-nearest neighbors by |x - xi| over the sorted xs.
            let mut dists: Vec<f64> = sx.iter().map(|&x| (x - sx[i]).abs()).collect();
            dists.sort_by(f64::total_cmp);
            let h = dists[r - 1];
            let w: Vec<f64> = (0..n)
                .map(|j| {
                    let base = if h > 0.0 {
                        tricube((sx[j] - sx[i]).abs() / h)
                    } else if sx[j] == sx[i] {
                        1.0
                    } else {
                        0.0
                    };
                    base * robust[j]
                })
                .collect();
            weighted_fit(&sx, &sy, &w, sx[i])
        });
        if iteration == iters {
            break;
        }
        let residuals: Vec<f64> = sy.iter().zip(&fitted).map(|(y, f)| y - f).collect();
        let mut abs: Vec<f64> = residuals.iter().map(|e| e.abs()).collect();
        let s = median(&mut abs);
        if s <= 0.0 {
            break; // perfect fit: bisquare weights stay at 1
        }
        robust = residuals
            .iter()
            .map(|e| {
                let u = e / (6.0 * s);
                if u.abs() >= 1.0 { 0.0 } else { (1.0 - u * u).powi(2) }
            })
            .collect();
    }

    Ok(TrendCurve { xs: sx, ys: fitted, frac, iters })
}
