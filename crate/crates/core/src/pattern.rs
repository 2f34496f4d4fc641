//! Pattern mining: DTW-based semantic neighbours and k-Shape clustering of
//! short flow windows into a set of representative traffic patterns.

use std::ops::Range;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::TrafficTensor;
use crate::io::DenseMatrix;
use crate::matrix::BinaryMatrix;
use crate::par;
use crate::{Error, Result};

pub const DEFAULT_SEMANTIC_NEIGHBOURS: usize = 3;
pub const DEFAULT_PATTERN_COUNT: usize = 16;
pub const DEFAULT_PATTERN_WINDOW: usize = 3;
pub const KSHAPE_MAX_ITERATIONS: usize = 100;

const CONSTANT_STD_TOL: f64 = 1e-10;

/// Unconstrained DTW with absolute-difference local cost.
pub fn dtw_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("DTW needs non-empty series".into()));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut curr = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &x in a {
        curr[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j].min(curr[j - 1]).min(prev[j - 1]);
            curr[j] = (x - b[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[m])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMask {
    pub mask: BinaryMatrix,
    pub neighbours: usize,
}

/// Marks, for every node, the `k` other nodes with the smallest DTW distance
/// (lower index wins ties) plus the node itself.
pub fn semantic_mask(node_series: &[Vec<f64>], k: usize) -> Result<SemanticMask> {
    let n = node_series.len();
    if k >= n {
        return Err(Error::InvalidArgument(format!(
            "semantic neighbour count {k} must be below node count {n}"
        )));
    }
    if let Some(i) = node_series.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("node {i} has an empty series")));
    }
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    let dists = par::map_slice(&pairs, |&(i, j)| {
        dtw_distance(&node_series[i], &node_series[j]).expect("series checked non-empty")
    });
    let mut full = vec![0.0; n * n];
    for (&(i, j), &d) in pairs.iter().zip(&dists) {
        full[i * n + j] = d;
        full[j * n + i] = d;
    }
    let mut mask = BinaryMatrix::identity(n);
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| {
            full[i * n + a]
                .partial_cmp(&full[i * n + b])
                .expect("DTW distances are finite")
                .then(a.cmp(&b))
        });
        for &j in others.iter().take(k) {
            mask.set(i, j, true);
        }
    }
    Ok(SemanticMask {
        mask,
        neighbours: k,
    })
}

/// Per-node mean daily profile over `steps`, one value per day slot and
/// channel, channels concatenated. Slots without observations fall back to
/// the channel mean over the range.
pub fn daily_profiles(flow: &TrafficTensor, steps: Range<usize>) -> Result<Vec<Vec<f64>>> {
    if steps.end > flow.steps() || steps.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "profile range {steps:?} outside 0..{}",
            flow.steps()
        )));
    }
    let slots = flow.slots_per_day();
    let profiles = par::map_range(flow.nodes(), |n| {
        let mut out = Vec::with_capacity(slots * flow.channels());
        for c in 0..flow.channels() {
            let mut sum = vec![0.0; slots];
            let mut cnt = vec![0usize; slots];
            let (mut tot, mut tot_n) = (0.0, 0usize);
            for t in steps.clone() {
                if flow.is_missing(t, n, c) {
                    continue;
                }
                let s = flow.day_slot(t);
                let v = flow.get(t, n, c);
                sum[s] += v;
                cnt[s] += 1;
                tot += v;
                tot_n += 1;
            }
            let fallback = if tot_n > 0 { tot / tot_n as f64 } else { 0.0 };
            out.extend(
                sum.iter()
                    .zip(&cnt)
                    .map(|(&s, &k)| if k > 0 { s / k as f64 } else { fallback }),
            );
        }
        out
    });
    Ok(profiles)
}

/// Population z-normalization; near-constant series map to all zeros.
pub fn z_normalize(series: &[f64]) -> Vec<f64> {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < CONSTANT_STD_TOL * mean.abs().max(1.0) {
        return vec![0.0; series.len()];
    }
    series.iter().map(|v| (v - mean) / std).collect()
}

/// All stride-1 windows of length `window` for one channel over `steps`,
/// node-major, z-normalized. Windows touching a missing value are dropped.
pub fn extract_windows(
    flow: &TrafficTensor,
    window: usize,
    channel: usize,
    steps: Range<usize>,
) -> Result<Vec<Vec<f64>>> {
    if channel >= flow.channels() {
        return Err(Error::InvalidArgument(format!(
            "channel {channel} outside 0..{}",
            flow.channels()
        )));
    }
    if window < 2 {
        return Err(Error::InvalidArgument("pattern window must be at least 2".into()));
    }
    if steps.end > flow.steps() || steps.len() < window {
        return Err(Error::InvalidArgument(format!(
            "range {steps:?} is shorter than window {window} or outside the data"
        )));
    }
    let mut out = Vec::new();
    for n in 0..flow.nodes() {
        for start in steps.start..=(steps.end - window) {
            let ts = start..start + window;
            if ts.clone().any(|t| flow.is_missing(t, n, channel)) {
                continue;
            }
            let raw: Vec<f64> = ts.map(|t| flow.get(t, n, channel)).collect();
            out.push(z_normalize(&raw));
        }
    }
    if out.is_empty() {
        return Err(Error::Data("no complete windows to cluster".into()));
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cross-correlation of `x` with `y` delayed by `shift`: `sum_i x[i] y[i - shift]`.
fn cross_correlation(x: &[f64], y: &[f64], shift: isize) -> f64 {
    let m = x.len() as isize;
    let mut acc = 0.0;
    for i in 0..m {
        let j = i - shift;
        if (0..m).contains(&j) {
            acc += x[i as usize] * y[j as usize];
        }
    }
    acc
}

/// Shape-based distance `1 - max_w NCC_c(x, y)` together with the shift of
/// `y` that attains the maximum. A zero-norm input has distance 1.
pub fn shape_based_distance(x: &[f64], y: &[f64]) -> (f64, isize) {
    let denom = norm(x) * norm(y);
    if denom == 0.0 {
        return (1.0, 0);
    }
    let m = x.len() as isize;
    let (mut best, mut best_shift) = (f64::NEG_INFINITY, 0);
    for w in -(m - 1)..m {
        let ncc = cross_correlation(x, y, w) / denom;
        if ncc > best {
            best = ncc;
            best_shift = w;
        }
    }
    ((1.0 - best).clamp(0.0, 2.0), best_shift)
}

fn shift_series(y: &[f64], shift: isize) -> Vec<f64> {
    let m = y.len() as isize;
    (0..m)
        .map(|i| {
            let j = i - shift;
            if (0..m).contains(&j) {
                y[j as usize]
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternSet {
    centroids: Vec<Vec<f64>>,
    window: usize,
}

impl PatternSet {
    pub fn new(centroids: Vec<Vec<f64>>) -> Result<Self> {
        let window = centroids.first().map(Vec::len).unwrap_or(0);
        if centroids.is_empty() || window < 2 {
            return Err(Error::InvalidArgument(
                "pattern set needs at least one centroid of length >= 2".into(),
            ));
        }
        if centroids.iter().any(|c| c.len() != window) {
            return Err(Error::InvalidArgument("centroids differ in length".into()));
        }
        Ok(Self { centroids, window })
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// N_p x S row-major.
    pub fn to_matrix(&self) -> DenseMatrix {
        DenseMatrix {
            rows: self.len(),
            cols: self.window,
            data: self.centroids.concat(),
        }
    }

    pub fn from_matrix(m: &DenseMatrix) -> Result<Self> {
        Self::new((0..m.rows).map(|i| m.row(i).to_vec()).collect())
    }
}

#[derive(Debug, Clone)]
pub struct KShapeOutcome {
    pub patterns: PatternSet,
    pub assignments: Vec<usize>,
    /// Sum of SBD to the assigned centroid, recorded after every assignment.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

fn extract_shape(members: &[&[f64]], previous: &[f64]) -> Vec<f64> {
    let m = previous.len();
    let prev_is_zero = previous.iter().all(|&v| v == 0.0);
    let aligned: Vec<Vec<f64>> = members
        .iter()
        .map(|x| {
            let a = if prev_is_zero {
                x.to_vec()
            } else {
                let (_, shift) = shape_based_distance(previous, x);
                shift_series(x, shift)
            };
            z_normalize(&a)
        })
        .collect();

    let mut scatter = DMatrix::<f64>::zeros(m, m);
    for a in &aligned {
        for i in 0..m {
            for j in 0..m {
                scatter[(i, j)] += a[i] * a[j];
            }
        }
    }
    let centering = DMatrix::<f64>::identity(m, m) - DMatrix::from_element(m, m, 1.0 / m as f64);
    let mut target = &centering * scatter * &centering;
    target = (&target + target.transpose()) * 0.5;
    let eig = SymmetricEigen::new(target);
    let mut top = 0;
    for i in 1..m {
        if eig.eigenvalues[i] > eig.eigenvalues[top] {
            top = i;
        }
    }
    let mut shape: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();

    let reference: Vec<f64> = if prev_is_zero {
        (0..m).map(|i| aligned.iter().map(|a| a[i]).sum()).collect()
    } else {
        previous.to_vec()
    };
    if dot(&shape, &reference) < 0.0 {
        shape.iter_mut().for_each(|v| *v = -*v);
    }
    z_normalize(&shape)
}

fn cluster_cost(windows: &[Vec<f64>], members: &[usize], centroid: &[f64]) -> f64 {
    members
        .iter()
        .map(|&i| shape_based_distance(centroid, &windows[i]).0)
        .sum()
}

/// k-Shape clustering seeded by a random initial assignment.
///
/// Centroid refinement keeps the previous centroid of a cluster when the
/// extracted shape would raise that cluster's SBD sum, and reassignment only
/// moves a window when a strictly closer centroid exists, so the recorded
/// objective never increases. Empty clusters are reseeded with the window
/// farthest from its centroid.
pub fn kshape_cluster(windows: &[Vec<f64>], clusters: usize, seed: u64) -> Result<KShapeOutcome> {
    if clusters == 0 {
        return Err(Error::InvalidArgument("cluster count must be positive".into()));
    }
    if windows.len() < clusters {
        return Err(Error::InvalidArgument(format!(
            "{} windows cannot form {clusters} clusters",
            windows.len()
        )));
    }
    let len = windows[0].len();
    if len < 2 || windows.iter().any(|w| w.len() != len) {
        return Err(Error::InvalidArgument(
            "windows must share one length of at least 2".into(),
        ));
    }
    let windows: Vec<Vec<f64>> = windows.iter().map(|w| z_normalize(w)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assign: Vec<usize> = (0..windows.len())
        .map(|_| rng.random_range(0..clusters))
        .collect();
    let mut centroids = vec![vec![0.0; len]; clusters];
    let mut history = Vec::new();
    let mut iterations = 0;

    while iterations < KSHAPE_MAX_ITERATIONS {
        iterations += 1;
        let members: Vec<Vec<usize>> = (0..clusters)
            .map(|c| (0..windows.len()).filter(|&i| assign[i] == c).collect())
            .collect();
        let refined = par::map_range(clusters, |c| {
            if members[c].is_empty() {
                return centroids[c].clone();
            }
            let refs: Vec<&[f64]> = members[c].iter().map(|&i| windows[i].as_slice()).collect();
            let candidate = extract_shape(&refs, &centroids[c]);
            if cluster_cost(&windows, &members[c], &candidate)
                <= cluster_cost(&windows, &members[c], &centroids[c])
            {
                candidate
            } else {
                centroids[c].clone()
            }
        });
        centroids = refined;

        let nearest = par::map_range(windows.len(), |i| {
            let current = assign[i];
            let own = shape_based_distance(&centroids[current], &windows[i]).0;
            let mut best = (own, current);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = shape_based_distance(centroid, &windows[i]).0;
                if d < best.0 {
                    best = (d, c);
                }
            }
            best
        });
        let mut next: Vec<usize> = nearest.iter().map(|&(_, c)| c).collect();
        let mut dist: Vec<f64> = nearest.iter().map(|&(d, _)| d).collect();

        let mut reseeded = false;
        for c in 0..clusters {
            if next.iter().any(|&a| a == c) {
                continue;
            }
            let mut sizes = vec![0usize; clusters];
            next.iter().for_each(|&a| sizes[a] += 1);
            let donor = (0..windows.len())
                .filter(|&i| sizes[next[i]] > 1 && norm(&windows[i]) > 0.0)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dist[b] >= dist[i] => Some(b),
                    _ => Some(i),
                });
            if let Some(i) = donor {
                centroids[c] = windows[i].clone();
                next[i] = c;
                dist[i] = shape_based_distance(&centroids[c], &windows[i]).0;
                reseeded = true;
            }
        }

        history.push(dist.iter().sum());
        let converged = !reseeded && next == assign;
        assign = next;
        if converged {
            break;
        }
    }

    Ok(KShapeOutcome {
        patterns: PatternSet::new(centroids)?,
        assignments: assign,
        objective_history: history,
        iterations,
    })
}
