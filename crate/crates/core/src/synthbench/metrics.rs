//! Localisation and classification metrics.
//!
//! Localisation: predictions are matched to ground truth greedily by
//! ascending distance; a prediction closer than the radius (5 mm) to an
//! unmatched ground truth is a hit, anything else is a false positive and
//! every unmatched ground truth is a false negative. FNR is a percentage of
//! the ground truth, FPR a percentage of the predictions (0 with no
//! predictions). DTT is the mean and population standard deviation of the
//! matched distances.
//!
//! Classification works on per-candidate keep scores against TP/FP flags.
//! AUC uses the Mann-Whitney rank formula with midranks for ties.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::Point2D;

pub const MATCH_RADIUS_MM: f64 = 5.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchStrategy {
    /// Closest pairs first.
    #[default]
    Greedy,
    /// Most matches, then smallest total distance.
    Optimal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MatchedPair {
    pub pred: usize,
    pub gt: usize,
    pub pred_pos: Point2D,
    pub gt_pos: Point2D,
}

impl MatchedPair {
    pub fn distance(&self) -> f64 {
        self.pred_pos.distance(&self.gt_pos)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchReport {
    pub pairs: Vec<MatchedPair>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Percent of ground truth.
    pub fnr: f64,
    /// Percent of predictions.
    pub fpr: f64,
}

fn rates(pred: usize, gt: usize, matched: usize) -> (f64, f64) {
    let fnr = if gt == 0 { 0.0 } else { 100.0 * (gt - matched) as f64 / gt as f64 };
    let fpr = if pred == 0 { 0.0 } else { 100.0 * (pred - matched) as f64 / pred as f64 };
    (fnr, fpr)
}

fn greedy_pairs(pred: &[Point2D], gt: &[Point2D], radius: f64) -> Vec<(usize, usize)> {
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let d = p.distance(g);
            if d < radius {
                cand.push((d, i, j));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in cand {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

/// Minimum-cost assignment on a square matrix (Hungarian method, `O(n^3)`).
/// Returns the column assigned to each row.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
            for j in 0..=n {
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
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

fn optimal_pairs(pred: &[Point2D], gt: &[Point2D], radius: f64) -> Vec<(usize, usize)> {
    let n = pred.len().max(gt.len());
    // Pairs outside the radius cost more than any set of in-radius pairs.
    let miss = radius * (n as f64 + 1.0);
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| match (pred.get(i), gt.get(j)) {
                    (Some(p), Some(g)) if p.distance(g) < radius => p.distance(g),
                    _ => miss,
                })
                .collect()
        })
        .collect();
    let mut pairs: Vec<(usize, usize)> = hungarian(&cost)
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| i < pred.len() && j < gt.len() && pred[i].distance(&gt[j]) < radius)
        .collect();
    pairs.sort_unstable();
    pairs
}

pub fn match_and_rate(pred: &[Point2D], gt: &[Point2D], radius_mm: f64) -> MatchReport {
    match_with(pred, gt, radius_mm, MatchStrategy::Greedy)
}

pub fn match_with(pred: &[Point2D], gt: &[Point2D], radius_mm: f64, strategy: MatchStrategy) -> MatchReport {
    let idx = match strategy {
        MatchStrategy::Greedy => greedy_pairs(pred, gt, radius_mm),
        MatchStrategy::Optimal if pred.is_empty() || gt.is_empty() => Vec::new(),
        MatchStrategy::Optimal => optimal_pairs(pred, gt, radius_mm),
    };
    let pairs: Vec<MatchedPair> =
        idx.into_iter().map(|(i, j)| MatchedPair { pred: i, gt: j, pred_pos: pred[i], gt_pos: gt[j] }).collect();
    let matched = pairs.len();
    let (fnr, fpr) = rates(pred.len(), gt.len(), matched);
    MatchReport {
        pairs,
        true_positives: matched,
        false_positives: pred.len() - matched,
        false_negatives: gt.len() - matched,
        fnr,
        fpr,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DttAxis {
    /// 2D Euclidean distance.
    #[default]
    Euclidean,
    /// `|dy|` only.
    SuperiorInferior,
}

/// Mean and population standard deviation of matched distances.
pub fn dtt(pairs: &[MatchedPair], axis: DttAxis) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("distance to target needs at least one matched pair".into()));
    }
    let d: Vec<f64> = pairs
        .iter()
        .map(|p| match axis {
            DttAxis::Euclidean => p.distance(),
            DttAxis::SuperiorInferior => (p.pred_pos.y - p.gt_pos.y).abs(),
        })
        .collect();
    Ok(mean_std(&d))
}

fn mean_std(d: &[f64]) -> (f64, f64) {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Confusion counts at candidate level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Confusion {
    pub fn from_predictions(pred: &[bool], truth: &[bool]) -> Result<Self> {
        let mut c = Self::default();
        c.add(pred, truth)?;
        Ok(c)
    }

    pub fn add(&mut self, pred: &[bool], truth: &[bool]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::dim("confusion", &[pred.len()], &[truth.len()]));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => self.tn += 1,
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2TP / (2TP + FP + FN)`, 0 when undefined.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

/// Area under the ROC curve by the rank-sum formula.
pub fn auc(scores: &[f64], flags: &[bool]) -> Result<f64> {
    if scores.len() != flags.len() {
        return Err(Error::dim("auc", &[scores.len()], &[flags.len()]));
    }
    let pos = flags.iter().filter(|&&f| f).count();
    let neg = flags.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative candidates".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * idx[i..=j].iter().filter(|&&k| flags[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Trapezoidal area under the ROC curve traced over every distinct threshold.
pub fn roc_auc_trapezoid(scores: &[f64], flags: &[bool]) -> Result<f64> {
    let pos = flags.iter().filter(|&&f| f).count() as f64;
    let neg = flags.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 || scores.len() != flags.len() {
        return Err(Error::UndefinedMetric("ROC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0.0, 0.0);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if flags[idx[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let (tpr, fpr) = (tp / pos, fp / neg);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

/// Everything reported for one method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub dtt_mean: Option<f64>,
    pub dtt_std: Option<f64>,
    pub fnr: f64,
    pub fpr: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub specificity: f64,
    pub sensitivity: f64,
    pub auc: Option<f64>,
    pub counts: Confusion,
}

/// Candidate-level scores at `threshold`. With only one class present `auc`
/// is `None`; use [`auc`] directly to get the error.
pub fn classification_metrics(scores: &[f64], flags: &[bool], threshold: f64) -> Result<MetricReport> {
    let pred: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    let counts = Confusion::from_predictions(&pred, flags)?;
    Ok(MetricReport {
        f1: counts.f1(),
        accuracy: counts.accuracy(),
        specificity: counts.specificity(),
        sensitivity: counts.sensitivity(),
        auc: auc(scores, flags).ok(),
        counts,
        ..Default::default()
    })
}

/// Pools per-case results into one report.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    scores: Vec<f64>,
    flags: Vec<bool>,
    kept: Vec<bool>,
    distances: Vec<f64>,
    predictions: usize,
    ground_truth: usize,
    matched: usize,
    pub axis: DttAxis,
    pub strategy: MatchStrategy,
}

impl MetricAccumulator {
    pub fn new(axis: DttAxis, strategy: MatchStrategy) -> Self {
        Self { axis, strategy, ..Default::default() }
    }

    /// Adds one case: per-candidate scores, keep decisions and flags, plus
    /// the kept positions against the reference disc positions.
    pub fn add_case(
        &mut self,
        scores: &[f64],
        kept: &[bool],
        flags: &[bool],
        kept_positions: &[Point2D],
        reference: &[Point2D],
    ) -> Result<()> {
        if scores.len() != flags.len() || kept.len() != flags.len() {
            return Err(Error::dim("metric case", &[flags.len()], &[scores.len(), kept.len()]));
        }
        self.scores.extend_from_slice(scores);
        self.flags.extend_from_slice(flags);
        self.kept.extend_from_slice(kept);
        let m = match_with(kept_positions, reference, MATCH_RADIUS_MM, self.strategy);
        self.predictions += kept_positions.len();
        self.ground_truth += reference.len();
        self.matched += m.true_positives;
        for p in &m.pairs {
            self.distances.push(match self.axis {
                DttAxis::Euclidean => p.distance(),
                DttAxis::SuperiorInferior => (p.pred_pos.y - p.gt_pos.y).abs(),
            });
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MetricReport> {
        let counts = Confusion::from_predictions(&self.kept, &self.flags)?;
        let (fnr, fpr) = rates(self.predictions, self.ground_truth, self.matched);
        let (dtt_mean, dtt_std) = if self.distances.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&self.distances);
            (Some(m), Some(s))
        };
        Ok(MetricReport {
            dtt_mean,
            dtt_std,
            fnr,
            fpr,
            f1: counts.f1(),
            accuracy: counts.accuracy(),
            specificity: counts.specificity(),
            sensitivity: counts.sensitivity(),
            auc: auc(&self.scores, &self.flags).ok(),
            counts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p(x: f64, y: f64) -> Point2D {
        Point2D::new(x, y)
    }

    #[test]
    fn identical_sets_are_perfect() {
        let gt = [p(0.0, 0.0), p(1.0, 35.0), p(-1.0, 70.0)];
        let r = match_and_rate(&gt, &gt, MATCH_RADIUS_MM);
        assert_eq!((r.fnr, r.fpr), (0.0, 0.0));
        assert_eq!(dtt(&r.pairs, DttAxis::Euclidean).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn six_mm_offset_is_one_fp_and_one_fn() {
        let r = match_and_rate(&[p(6.0, 0.0)], &[p(0.0, 0.0)], MATCH_RADIUS_MM);
        assert_eq!((r.false_positives, r.false_negatives, r.true_positives), (1, 1, 0));
        assert_eq!((r.fnr, r.fpr), (100.0, 100.0));
    }

    #[test]
    fn no_predictions() {
        let r = match_and_rate(&[], &[p(0.0, 0.0), p(0.0, 30.0)], MATCH_RADIUS_MM);
        assert_eq!((r.fnr, r.fpr), (100.0, 0.0));
        assert!(matches!(dtt(&r.pairs, DttAxis::Euclidean), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn dtt_of_one_and_three() {
        let r = match_and_rate(&[p(1.0, 0.0), p(0.0, 53.0)], &[p(0.0, 0.0), p(0.0, 50.0)], MATCH_RADIUS_MM);
        assert_eq!(dtt(&r.pairs, DttAxis::Euclidean).unwrap(), (2.0, 1.0));
        assert_eq!(dtt(&r.pairs, DttAxis::SuperiorInferior).unwrap(), (1.5, 1.5));
    }

    #[test]
    fn greedy_and_optimal_can_differ() {
        // Greedy takes the 1 mm pair and strands the other prediction.
        let pred = [p(0.0, 0.0), p(-3.5, 0.0)];
        let gt = [p(1.0, 0.0), p(-4.5, 3.0)];
        let gt2 = [p(1.0, 0.0), p(4.5, 0.0)];
        let greedy = match_with(&pred, &gt2, 5.0, MatchStrategy::Greedy);
        let optimal = match_with(&pred, &gt2, 5.0, MatchStrategy::Optimal);
        assert_eq!(greedy.true_positives, 1);
        assert_eq!(optimal.true_positives, 2);
        assert_eq!(match_with(&pred, &gt, 5.0, MatchStrategy::Optimal).true_positives, 2);
    }

    #[test]
    fn prediction_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let gt: Vec<_> = (0..6).map(|i| p(rng.random_range(-3.0..3.0), 30.0 * i as f64)).collect();
            let mut pred: Vec<_> = (0..7).map(|_| p(rng.random_range(-6.0..6.0), rng.random_range(0.0..160.0))).collect();
            let a = match_and_rate(&pred, &gt, 5.0);
            pred.reverse();
            let b = match_and_rate(&pred, &gt, 5.0);
            assert_eq!((a.true_positives, a.fnr, a.fpr), (b.true_positives, b.fnr, b.fpr));
        }
    }

    #[test]
    fn auc_extremes() {
        let flags = [true, true, false, false, true];
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2, 0.7], &flags).unwrap(), 1.0);
        assert_eq!(auc(&[0.4; 5], &flags).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn rank_auc_matches_trapezoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(2..25);
            let flags: Vec<bool> = (0..n).map(|i| i == 0 || (i != 1 && rng.random_bool(0.5))).collect();
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6u8)) / 5.0).collect();
            let a = auc(&scores, &flags).unwrap();
            let b = roc_auc_trapezoid(&scores, &flags).unwrap();
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn perfect_scores_give_unit_metrics() {
        let r = classification_metrics(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false], 0.5).unwrap();
        assert_eq!((r.f1, r.accuracy, r.auc), (1.0, 1.0, Some(1.0)));
        assert_eq!((r.specificity, r.sensitivity), (1.0, 1.0));
    }

    #[test]
    fn single_class_keeps_other_metrics() {
        let r = classification_metrics(&[0.9, 0.2], &[true, true], 0.5).unwrap();
        assert_eq!(r.auc, None);
        assert_eq!(r.sensitivity, 0.5);
    }

    #[test]
    fn accumulator_pools_cases() {
        let mut acc = MetricAccumulator::new(DttAxis::Euclidean, MatchStrategy::Greedy);
        let gt = [p(0.0, 0.0), p(0.0, 35.0)];
        acc.add_case(&[1.0, 1.0, 0.0], &[true, true, false], &[true, true, false], &gt, &gt).unwrap();
        acc.add_case(&[1.0, 0.0], &[true, false], &[false, true], &[p(20.0, 0.0)], &[p(0.0, 0.0)]).unwrap();
        let r = acc.report().unwrap();
        assert_eq!(r.counts, Confusion { tp: 2, fp: 1, fn_: 1, tn: 1 });
        assert!((r.fnr - 100.0 / 3.0).abs() < 1e-12);
        assert!((r.fpr - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.dtt_mean, Some(0.0));
    }
}
