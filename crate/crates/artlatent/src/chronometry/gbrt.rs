//! Histogram gradient-boosted regression trees, squared-error loss.
//!
//! Features are quantized to at most 64 quantile bins before any tree is
//! grown; split search scans bin histograms. Trees grow depth-wise. All
//! tie-breaks are total — (gain, then lowest feature, then lowest bin) —
//! so training is deterministic, including under the feature-parallel
//! histogram path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::par;

pub const MAX_BINS: usize = 64;
const MIN_GAIN: f64 = 1e-12;

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub subsample: f64,
    pub seed: u64,
}

impl Default for GbtParams {
    fn default() -> Self {
        Self {
            n_trees: 300,
            max_depth: 6,
            learning_rate: 0.1,
            subsample: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Node {
    /// Rows with feature value <= threshold go left.
    Split {
        feature: usize,
        threshold: f32,
        left: usize,
        right: usize,
    },
    /// Leaf value, learning rate already applied.
    Leaf { value: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: &[f32]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    at = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

/// A fitted ensemble.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbtModel {
    pub params: GbtParams,
    pub d: usize,
    base_score: f64,
    trees: Vec<Tree>,
}

/// Per-feature quantile bin upper edges; code b covers values <= edges[b].
struct Binning {
    edges: Vec<Vec<f32>>,
}

impl Binning {
    fn fit(x: &[f32], n: usize, d: usize) -> Self {
        let edges = par::map_range(0..d, |f| {
            let mut col: Vec<f32> = (0..n).map(|r| x[r * d + f]).collect();
            col.sort_by(f32::total_cmp);
            col.dedup();
            if col.len() <= MAX_BINS {
                return col;
            }
            // Quantile edges over the distinct values.
            let mut out = Vec::with_capacity(MAX_BINS);
            for b in 0..MAX_BINS {
                let q = (b + 1) * col.len() / MAX_BINS - 1;
                let v = col[q];
                if out.last() != Some(&v) {
                    out.push(v);
                }
            }
            out
        });
        Self { edges }
    }

    fn n_bins(&self, f: usize) -> usize {
        self.edges[f].len()
    }

    fn code(&self, f: usize, v: f32) -> u8 {
        // First edge >= v; values above every edge land in the last bin.
        let e = &self.edges[f];
        match e.binary_search_by(|probe| probe.total_cmp(&v)) {
            Ok(i) => i as u8,
            Err(i) => i.min(e.len() - 1) as u8,
        }
    }
}

struct BestSplit {
    gain: f64,
    feature: usize,
    bin: usize,
}

fn build_tree(
    codes: &[Vec<u8>],
    binning: &Binning,
    residuals: &[f64],
    rows: Vec<usize>,
    params: &GbtParams,
) -> Tree {
    let d = codes.len();
    let mut nodes: Vec<Node> = Vec::new();
    // (node index, member rows, depth) work queue; children appended in
    // left-right order so indices are stable.
    let mut queue: Vec<(usize, Vec<usize>, usize)> = Vec::new();
    nodes.push(Node::Leaf { value: 0.0 });
    queue.push((0, rows, 0));

    while let Some((at, members, depth)) = queue.pop() {
        let sum: f64 = members.iter().map(|&r| residuals[r]).sum();
        let mean = sum / members.len() as f64;
        if depth >= params.max_depth || members.len() < 2 {
            nodes[at] = Node::Leaf { value: params.learning_rate * mean };
            continue;
        }

        // Histogram scan per feature, parallel with a deterministic fold.
        let candidates: Vec<Option<BestSplit>> = par::map_range(0..d, |f| {
            let n_bins = binning.n_bins(f);
            if n_bins < 2 {
                return None;
            }
            let mut sums = vec![0f64; n_bins];
            let mut counts = vec![0usize; n_bins];
            for &r in &members {
                let b = codes[f][r] as usize;
                sums[b] += residuals[r];
                counts[b] += 1;
            }
            let total_count = members.len() as f64;
            let parent_term = sum * sum / total_count;
            let mut best: Option<BestSplit> = None;
            let mut left_sum = 0f64;
            let mut left_count = 0usize;
            for b in 0..n_bins - 1 {
                left_sum += sums[b];
                left_count += counts[b];
                let right_count = members.len() - left_count;
                if left_count == 0 || right_count == 0 {
                    continue;
                }
                let right_sum = sum - left_sum;
                let gain = left_sum * left_sum / left_count as f64
                    + right_sum * right_sum / right_count as f64
                    - parent_term;
                if best.as_ref().map_or(true, |x| gain > x.gain) {
                    best = Some(BestSplit { gain, feature: f, bin: b });
                }
            }
            best
        });
        let best = candidates.into_iter().flatten().fold(
            None::<BestSplit>,
            |acc, c| match acc {
                None => Some(c),
                Some(a) => {
                    if c.gain > a.gain
                        || (c.gain == a.gain
                            && (c.feature, c.bin) < (a.feature, a.bin))
                    {
                        Some(c)
                    } else {
                        Some(a)
                    }
                }
            },
        );

        match best {
            Some(b) if b.gain > MIN_GAIN => {
                let (mut left, mut right) = (Vec::new(), Vec::new());
                for &r in &members {
                    if (codes[b.feature][r] as usize) <= b.bin {
                        left.push(r);
                    } else {
                        right.push(r);
                    }
                }
                let left_idx = nodes.len();
                nodes.push(Node::Leaf { value: 0.0 });
                let right_idx = nodes.len();
                nodes.push(Node::Leaf { value: 0.0 });
                nodes[at] = Node::Split {
                    feature: b.feature,
                    threshold: binning.edges[b.feature][b.bin],
                    left: left_idx,
                    right: right_idx,
                };
                queue.push((left_idx, left, depth + 1));
                queue.push((right_idx, right, depth + 1));
            }
            _ => {
                nodes[at] = Node::Leaf { value: params.learning_rate * mean };
            }
        }
    }
    Tree { nodes }
}

impl GbtModel {
    /// Fit on a row-major n x d matrix. Deterministic for a given seed.
    pub fn fit(x: &[f32], n: usize, d: usize, y: &[f64], params: &GbtParams) -> Self {
        assert_eq!(x.len(), n * d, "matrix shape");
        assert_eq!(y.len(), n, "target length");
        let binning = Binning::fit(x, n, d);
        // Column-major code matrix: codes[f][r].
        let codes: Vec<Vec<u8>> = par::map_range(0..d, |f| {
            (0..n).map(|r| binning.code(f, x[r * d + f])).collect()
        });

        let base_score = y.iter().sum::<f64>() / n as f64;
        let mut predictions = vec![base_score; n];
        let mut trees = Vec::with_capacity(params.n_trees);
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

        for _ in 0..params.n_trees {
            let residuals: Vec<f64> = y
                .iter()
                .zip(&predictions)
                .map(|(yi, pi)| yi - pi)
                .collect();
            let rows: Vec<usize> = if params.subsample < 1.0 {
                let keep = ((params.subsample * n as f64).round() as usize).max(1);
                let mut all: Vec<usize> = (0..n).collect();
                for t in 0..keep {
                    let swap = rng.gen_range(t..n);
                    all.swap(t, swap);
                }
                all.truncate(keep);
                all.sort_unstable();
                all
            } else {
                (0..n).collect()
            };
            let tree = build_tree(&codes, &binning, &residuals, rows, params);
            for r in 0..n {
                let row = &x[r * d..(r + 1) * d];
                predictions[r] += tree.predict(row);
            }
            trees.push(tree);
        }

        Self { params: params.clone(), d, base_score, trees }
    }

    pub fn predict_row(&self, row: &[f32]) -> f64 {
        assert_eq!(row.len(), self.d, "feature dimension");
        self.base_score + self.trees.iter().map(|t| t.predict(row)).sum::<f64>()
    }

    /// Predict a row-major m x d matrix.
    pub fn predict(&self, x: &[f32], m: usize) -> Vec<f64> {
        assert_eq!(x.len(), m * self.d, "matrix shape");
        par::map_range(0..m, |r| self.predict_row(&x[r * self.d..(r + 1) * self.d]))
    }
}
