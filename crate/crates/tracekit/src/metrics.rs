//! Windowed trace-prediction metric (LBM) built on minimum-cost bipartite
//! matching.
//!
//! The metric definition is pinned and versioned here and echoed by the CLI
//! (`fingerprint`) so reported scores are self-describing: both traces are
//! split into windows (fixed size `L` by default, or caller-supplied word
//! boundaries), each predicted window is matched against the union of
//! ground-truth windows within radius `k`, pair distances are normalized by
//! the image diagonal, and predicted points in windows with no candidates at
//! all incur the maximum normalized distance 1.0.

use thiserror::Error;

use crate::trace::TimedTrace;

pub const LBM_DEFINITION_VERSION: &str = "lbm-v1";

#[derive(Debug, Clone, PartialEq)]
pub enum WindowMode {
    /// `ceil(n/L)` chunks of `L` consecutive points on each trace.
    Fixed(usize),
    /// Explicit window start indices per trace (word-aligned windows). Each
    /// list must start at 0 and be strictly increasing.
    Boundaries { pred: Vec<usize>, gt: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbmConfig {
    /// Window radius: predicted window `i` may match ground-truth windows
    /// `i-k ..= i+k`.
    pub k: usize,
    pub window: WindowMode,
}

impl LbmConfig {
    pub fn fixed(k: usize, window_len: usize) -> Self {
        Self {
            k,
            window: WindowMode::Fixed(window_len),
        }
    }

    /// Stable description of the pinned metric definition.
    pub fn fingerprint(&self) -> String {
        let win = match &self.window {
            WindowMode::Fixed(l) => format!("fixed:{l}"),
            WindowMode::Boundaries { .. } => "word".to_string(),
        };
        format!(
            "{LBM_DEFINITION_VERSION}/window={win}/k={}/norm=diagonal/penalty=1.0",
            self.k
        )
    }
}

impl Default for LbmConfig {
    fn default() -> Self {
        Self::fixed(0, 5)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("trace contains no points")]
    EmptyTrace,
    #[error("image dimensions differ between traces")]
    DimensionMismatch,
    #[error("invalid window specification")]
    BadWindows,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LbmScore {
    pub score: f64,
    /// Matched point pairs across all windows.
    pub n_pairs: usize,
    /// Predicted points penalized for having no candidate window.
    pub n_penalized: usize,
}

/// Minimum-cost rectangular assignment: matches `min(rows, cols)` pairs.
/// Among cost-optimal assignments the lexicographically smallest one (by row
/// order, then column index) is returned.
pub fn min_cost_matching(costs: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = costs.len();
    if rows == 0 {
        return vec![];
    }
    let cols = costs[0].len();
    if cols == 0 {
        return vec![];
    }

    let opt = submatrix_cost(costs, 0, &vec![false; cols]);
    let tol = 1e-9 * opt.abs().max(1.0);
    let quota = rows.min(cols);

    // Fix rows one at a time to the smallest column that preserves
    // optimality; a row with no such column stays unmatched.
    let mut fixed: Vec<(usize, usize)> = Vec::new();
    let mut fixed_cost = 0.0;
    let mut used_cols = vec![false; cols];
    for r in 0..rows {
        if fixed.len() == quota {
            break;
        }
        for c in 0..cols {
            if used_cols[c] {
                continue;
            }
            used_cols[c] = true;
            let total = fixed_cost + costs[r][c] + submatrix_cost(costs, r + 1, &used_cols);
            if total <= opt + tol {
                fixed.push((r, c));
                fixed_cost += costs[r][c];
                break;
            }
            used_cols[c] = false;
        }
    }
    fixed
}

/// Optimal assignment cost over rows `first_row..` and unused columns.
fn submatrix_cost(costs: &[Vec<f64>], first_row: usize, used_cols: &[bool]) -> f64 {
    let cols: Vec<usize> = (0..used_cols.len()).filter(|&c| !used_cols[c]).collect();
    if first_row >= costs.len() || cols.is_empty() {
        return 0.0;
    }
    let sub: Vec<Vec<f64>> = costs[first_row..]
        .iter()
        .map(|row| cols.iter().map(|&c| row[c]).collect())
        .collect();
    hungarian_cost(&sub)
}

/// O(n^3) Hungarian algorithm on a rectangular matrix; matches
/// `min(rows, cols)` pairs and returns the minimal total cost.
fn hungarian_cost(costs: &[Vec<f64>]) -> f64 {
    let (r, c) = (costs.len(), costs[0].len());
    // the classic algorithm wants rows <= cols; cost is symmetric under transpose
    let a: Vec<Vec<f64>> = if r <= c {
        costs.to_vec()
    } else {
        (0..c).map(|j| (0..r).map(|i| costs[i][j]).collect()).collect()
    };
    let (n, m) = (a.len(), a[0].len());

    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=m {
        if p[j] != 0 {
            total += a[p[j] - 1][j - 1];
        }
    }
    total
}

fn windows(n: usize, mode: &WindowMode, which_pred: bool) -> Result<Vec<(usize, usize)>, MetricError> {
    match mode {
        WindowMode::Fixed(l) => {
            if *l == 0 {
                return Err(MetricError::BadWindows);
            }
            Ok((0..n.div_ceil(*l))
                .map(|i| (i * l, ((i + 1) * l).min(n)))
                .collect())
        }
        WindowMode::Boundaries { pred, gt } => {
            let starts = if which_pred { pred } else { gt };
            if starts.first() != Some(&0) || starts.windows(2).any(|w| w[1] <= w[0]) {
                return Err(MetricError::BadWindows);
            }
            if *starts.last().unwrap() >= n {
                return Err(MetricError::BadWindows);
            }
            let mut out = Vec::with_capacity(starts.len());
            for (i, &s) in starts.iter().enumerate() {
                let e = starts.get(i + 1).copied().unwrap_or(n);
                out.push((s, e));
            }
            Ok(out)
        }
    }
}

/// Windowed minimum-cost matching score between a predicted and a
/// ground-truth trace. Lower is better; identical traces score 0.
pub fn lbm(pred: &TimedTrace, gt: &TimedTrace, config: &LbmConfig) -> Result<LbmScore, MetricError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(MetricError::EmptyTrace);
    }
    if pred.image_width != gt.image_width || pred.image_height != gt.image_height {
        return Err(MetricError::DimensionMismatch);
    }
    let diagonal = pred.image_width.hypot(pred.image_height);
    let pred_windows = windows(pred.len(), &config.window, true)?;
    let gt_windows = windows(gt.len(), &config.window, false)?;

    let mut total_cost = 0.0;
    let mut n_pairs = 0usize;
    let mut n_penalized = 0usize;

    for (wi, &(ps, pe)) in pred_windows.iter().enumerate() {
        let lo = wi.saturating_sub(config.k);
        let hi = (wi + config.k).min(gt_windows.len().saturating_sub(1));
        let mut candidates: Vec<usize> = Vec::new();
        if lo < gt_windows.len() {
            for &(gs, ge) in &gt_windows[lo..=hi] {
                candidates.extend(gs..ge);
            }
        }
        let pred_pts = &pred.points[ps..pe];
        if candidates.is_empty() {
            total_cost += pred_pts.len() as f64; // max normalized distance each
            n_penalized += pred_pts.len();
            continue;
        }
        let costs: Vec<Vec<f64>> = pred_pts
            .iter()
            .map(|p| {
                candidates
                    .iter()
                    .map(|&gi| p.distance_to(&gt.points[gi]) / diagonal)
                    .collect()
            })
            .collect();
        let pairs = min_cost_matching(&costs);
        for &(i, j) in &pairs {
            total_cost += costs[i][j];
        }
        n_pairs += pairs.len();
    }

    let units = n_pairs + n_penalized;
    let score = if units == 0 { 0.0 } else { total_cost / units as f64 };
    Ok(LbmScore {
        score,
        n_pairs,
        n_penalized,
    })
}
