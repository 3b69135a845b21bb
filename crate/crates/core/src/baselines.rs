//! Selectors the look-once network is compared against.
//!
//! - [`count_selections`]: the number of `N`-subsets of `M` candidates.
//! - [`search_tree_select`]: exhaustive enumeration of every `N`-subset,
//!   scored against a skeleton template. This is the slow exact oracle.
//! - [`condition_filter`]: a single greedy top-down pass with gap and lateral
//!   rules.
//!
//! The search-tree error of a subset sorted by `y` is
//!
//! ```text
//! sum_i (g_i - t_i)^2 + lambda * sum_i (x_i - mean(x))^2
//! ```
//!
//! with `g_i` the consecutive `y` gaps of the subset and `t_i` those of the
//! template. This error function is our own definition; `lambda` defaults
//! to 0.1.

use std::cmp::Ordering;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{LabelScheme, Point2D};
use crate::lookonce::{CandidateSet, SelectionResult};

/// `M! / (N! (M-N)!)` by the multiplicative formula.
pub fn count_selections(m: u64, n: u64) -> Result<u64> {
    if n > m {
        return Err(Error::Infeasible { wanted: n as usize, available: m as usize });
    }
    let k = n.min(m - n);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * u128::from(m - i) / u128::from(i + 1);
    }
    u64::try_from(r).map_err(|_| Error::Config(format!("C({m},{n}) overflows u64")))
}

/// Work done by a selector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SelectionCost {
    /// Candidate subsets scored.
    pub subsets_evaluated: u64,
    /// Full network evaluations.
    pub forward_passes: u64,
    /// Seconds.
    pub wall_time: f64,
}

/// Expected disc positions, superior to inferior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTemplate {
    positions: Vec<Point2D>,
    gaps: Vec<f64>,
}

impl SkeletonTemplate {
    pub fn new(positions: Vec<Point2D>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptySet("skeleton template"));
        }
        let gaps: Vec<f64> = positions.windows(2).map(|w| w[1].y - w[0].y).collect();
        if gaps.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::Config("template positions must have strictly increasing y".into()));
        }
        Ok(Self { positions, gaps })
    }

    /// `n` discs in a vertical column at `x`, `gap` apart, starting at `y0`.
    pub fn uniform(n: usize, x: f64, y0: f64, gap: f64) -> Result<Self> {
        Self::new((0..n).map(|i| Point2D::new(x, y0 + gap * i as f64)).collect())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point2D] {
        &self.positions
    }

    /// Consecutive `y` gaps, length `len() - 1`.
    pub fn gaps(&self) -> &[f64] {
        &self.gaps
    }

    pub fn min_gap(&self) -> f64 {
        self.gaps.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_gap(&self) -> f64 {
        self.gaps.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeOptions {
    /// Weight of the lateral-deviation term.
    pub lambda: f64,
    /// Worker threads; results do not depend on it.
    pub jobs: usize,
}

impl Default for TreeOptions {
    fn default() -> Self {
        Self { lambda: 0.1, jobs: 1 }
    }
}

/// Error of one subset given in any order.
pub fn subset_error(points: &[Point2D], template: &SkeletonTemplate, lambda: f64) -> Result<f64> {
    if points.len() != template.len() {
        return Err(Error::dim("subset_error", &[template.len()], &[points.len()]));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.y.total_cmp(&b.y));
    let gap_err: f64 = sorted
        .windows(2)
        .zip(template.gaps())
        .map(|(w, t)| {
            let d = w[1].y - w[0].y - t;
            d * d
        })
        .sum();
    let mean = sorted.iter().map(|p| p.x).sum::<f64>() / sorted.len() as f64;
    let lateral: f64 = sorted.iter().map(|p| (p.x - mean) * (p.x - mean)).sum();
    Ok(gap_err + lambda * lateral)
}

/// Best subset found in one part of the enumeration.
#[derive(Clone, Debug)]
struct Best {
    error: f64,
    /// Original candidate indices, ascending.
    key: Vec<usize>,
    leaves: u64,
}

impl Best {
    fn empty() -> Self {
        Self { error: f64::INFINITY, key: Vec::new(), leaves: 0 }
    }

    fn better_than(&self, other: &Best) -> bool {
        match self.error.total_cmp(&other.error) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => other.key.is_empty() || self.key < other.key,
        }
    }

    fn merge(mut self, other: Best) -> Best {
        let leaves = self.leaves + other.leaves;
        if !self.key.is_empty() || !other.key.is_empty() {
            if other.better_than(&self) {
                self = other;
            }
        }
        self.leaves = leaves;
        self
    }
}

/// Depth-first enumeration over candidates sorted by `y`, so every path is
/// already in `y` order and the error can be accumulated along it.
struct Tree<'a> {
    y: &'a [f64],
    x: &'a [f64],
    x2: &'a [f64],
    orig: &'a [usize],
    gaps: &'a [f64],
    n: usize,
    lambda: f64,
    inv_n: f64,
    path: Vec<usize>,
    best: Best,
}

impl Tree<'_> {
    fn offer(&mut self, error: f64, last: usize) {
        if error > self.best.error {
            return;
        }
        let mut key: Vec<usize> = self.path.iter().chain([&last]).map(|&i| self.orig[i]).collect();
        key.sort_unstable();
        let cand = Best { error, key, leaves: 0 };
        if cand.better_than(&self.best) {
            self.best.error = cand.error;
            self.best.key = cand.key;
        }
    }

    fn descend(&mut self, prev: usize, depth: usize, gap_err: f64, sx: f64, sxx: f64) {
        let m = self.y.len();
        let last_start = prev + 1;
        let last_end = m - (self.n - depth) + 1;
        if depth == self.n - 1 {
            let t = self.gaps[depth - 1];
            let yp = self.y[prev];
            let mut best_err = self.best.error;
            for i in last_start..last_end {
                let d = self.y[i] - yp - t;
                let s = sx + self.x[i];
                let e = gap_err + d * d + self.lambda * (sxx + self.x2[i] - s * s * self.inv_n);
                if e <= best_err {
                    self.offer(e, i);
                    best_err = self.best.error;
                }
            }
            self.best.leaves += (last_end - last_start) as u64;
            return;
        }
        let t = self.gaps[depth - 1];
        for i in last_start..last_end {
            let d = self.y[i] - self.y[prev] - t;
            self.path.push(i);
            self.descend(i, depth + 1, gap_err + d * d, sx + self.x[i], sxx + self.x2[i]);
            self.path.pop();
        }
    }

    /// Every subset whose first (smallest `y`) element is `first`.
    fn run_from(mut self, first: usize) -> Best {
        if self.n == 1 {
            self.offer(0.0, first);
            self.best.leaves = 1;
            return self.best;
        }
        self.path.push(first);
        self.descend(first, 1, 0.0, self.x[first], self.x2[first]);
        self.best
    }
}

/// Scores every `N`-subset and keeps the one with the smallest error; ties go
/// to the lexicographically smallest tuple of candidate indices.
pub fn search_tree_select(
    cs: &CandidateSet,
    template: &SkeletonTemplate,
    n: usize,
    opts: &TreeOptions,
) -> Result<(SelectionResult, SelectionCost)> {
    cs.validate()?;
    let m = cs.len();
    if n > m {
        return Err(Error::Infeasible { wanted: n, available: m });
    }
    if n != template.len() {
        return Err(Error::dim("search_tree_select template", &[template.len()], &[n]));
    }
    let start = Instant::now();
    let mut orig: Vec<usize> = (0..m).collect();
    orig.sort_by(|&a, &b| cs.points[a].position.y.total_cmp(&cs.points[b].position.y).then(a.cmp(&b)));
    let y: Vec<f64> = orig.iter().map(|&i| cs.points[i].position.y).collect();
    let x: Vec<f64> = orig.iter().map(|&i| cs.points[i].position.x).collect();
    let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
    let tree = |first: usize| {
        Tree {
            y: &y,
            x: &x,
            x2: &x2,
            orig: &orig,
            gaps: template.gaps(),
            n,
            lambda: opts.lambda,
            inv_n: 1.0 / n as f64,
            path: Vec::with_capacity(n),
            best: Best::empty(),
        }
        .run_from(first)
    };
    let best = if n == 0 {
        Best { error: 0.0, key: Vec::new(), leaves: 1 }
    } else if opts.jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let parts: Vec<Best> = pool.install(|| (0..=m - n).into_par_iter().map(tree).collect());
        parts.into_iter().fold(Best::empty(), Best::merge)
    } else {
        (0..=m - n).map(tree).fold(Best::empty(), Best::merge)
    };
    let mut keep = vec![false; m];
    best.key.iter().for_each(|&i| keep[i] = true);
    let probs: Vec<f64> = keep.iter().map(|&k| f64::from(u8::from(k))).collect();
    let result = SelectionResult::from_mask(cs, &keep, &probs, &LabelScheme::numbered(n.max(1))?);
    let cost = SelectionCost { subsets_evaluated: best.leaves, forward_passes: 0, wall_time: start.elapsed().as_secs_f64() };
    Ok((result, cost))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterOptions {
    /// Lower gap bound as a fraction of the smallest template gap.
    pub alpha: f64,
    /// Upper gap bound as a multiple of the largest template gap.
    pub beta: f64,
    /// Largest allowed distance in `x` from the running column mean (mm).
    pub lateral_mm: f64,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 1.5, lateral_mm: 10.0 }
    }
}

/// One greedy pass from the top. The column starts at the median `x` of all
/// candidates; the first candidate near it is kept, then each following
/// candidate is kept if its gap to the last kept one lies in
/// `[alpha * min_gap, beta * max_gap]` and it stays within `lateral_mm` of the
/// mean `x` of those kept so far. Nothing is revisited.
pub fn condition_filter(cs: &CandidateSet, template: &SkeletonTemplate, opts: &FilterOptions) -> Result<SelectionResult> {
    cs.validate()?;
    let m = cs.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| cs.points[a].position.y.total_cmp(&cs.points[b].position.y).then(a.cmp(&b)));
    let mut xs: Vec<f64> = cs.points.iter().map(|p| p.position.x).collect();
    xs.sort_by(f64::total_cmp);
    let median = if m % 2 == 1 { xs[m / 2] } else { (xs[m / 2 - 1] + xs[m / 2]) / 2.0 };
    let (lo, hi) = if template.len() > 1 {
        (opts.alpha * template.min_gap(), opts.beta * template.max_gap())
    } else {
        (0.0, f64::INFINITY)
    };

    let mut keep = vec![false; m];
    let mut last_y: Option<f64> = None;
    let (mut sum_x, mut count) = (0.0, 0usize);
    for &i in &order {
        let p = cs.points[i].position;
        let column = if count == 0 { median } else { sum_x / count as f64 };
        if (p.x - column).abs() >= opts.lateral_mm {
            continue;
        }
        if let Some(ly) = last_y {
            let gap = p.y - ly;
            if gap < lo || gap > hi {
                continue;
            }
        }
        keep[i] = true;
        last_y = Some(p.y);
        sum_x += p.x;
        count += 1;
    }
    let probs: Vec<f64> = keep.iter().map(|&k| f64::from(u8::from(k))).collect();
    Ok(SelectionResult::from_mask(cs, &keep, &probs, &LabelScheme::numbered(template.len())?))
}
