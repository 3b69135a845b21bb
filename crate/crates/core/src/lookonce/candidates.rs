use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{DiscCandidate, LabelScheme, Point2D};

/// Ground truth of one candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointTruth {
    pub is_tp: bool,
    /// Disc the candidate belongs to, superior first. `None` for FPs.
    pub gt_index: Option<usize>,
}

/// Per-candidate flags plus the true position of every disc.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub flags: Vec<PointTruth>,
    pub discs: Vec<Point2D>,
}

/// An unordered set of detections from one image.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub image_id: String,
    pub points: Vec<DiscCandidate>,
    pub truth: Option<GroundTruth>,
}

impl CandidateSet {
    pub fn new(image_id: impl Into<String>, points: Vec<DiscCandidate>) -> Result<Self> {
        let cs = Self { image_id: image_id.into(), points, truth: None };
        cs.validate()?;
        Ok(cs)
    }

    pub fn with_truth(mut self, truth: GroundTruth) -> Result<Self> {
        self.truth = Some(truth);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::EmptySet("candidate set"));
        }
        if let Some(p) = self.points.iter().find(|p| !p.position.x.is_finite() || !p.position.y.is_finite()) {
            return Err(Error::NonFinite(format!("candidate {:?} in `{}`", p.position, self.image_id)));
        }
        if let Some(t) = &self.truth {
            if t.flags.len() != self.points.len() {
                return Err(Error::dim("ground truth flags", &[self.points.len()], &[t.flags.len()]));
            }
            if let Some(bad) = t.flags.iter().filter_map(|f| f.gt_index).find(|&i| i >= t.discs.len()) {
                return Err(Error::Config(format!("gt_index {bad} but only {} discs", t.discs.len())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Point2D> {
        self.points.iter().map(|p| p.position).collect()
    }

    /// Candidate-level labels, if known.
    pub fn tp_flags(&self) -> Option<Vec<bool>> {
        self.truth.as_ref().map(|t| t.flags.iter().map(|f| f.is_tp).collect())
    }

    /// Positions a perfect selector should output: the TP candidate of each
    /// disc, or the disc itself when no candidate was detected for it.
    pub fn reference_positions(&self) -> Option<Vec<Point2D>> {
        let t = self.truth.as_ref()?;
        let mut out = t.discs.clone();
        let mut seen = vec![false; out.len()];
        for (p, f) in self.points.iter().zip(&t.flags) {
            if let (true, Some(i)) = (f.is_tp, f.gt_index) {
                if !seen[i] {
                    out[i] = p.position;
                    seen[i] = true;
                }
            }
        }
        Some(out)
    }

    /// Copy with the candidates reordered by `order` (a permutation).
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            image_id: self.image_id.clone(),
            points: order.iter().map(|&i| self.points[i]).collect(),
            truth: self.truth.as_ref().map(|t| GroundTruth {
                flags: order.iter().map(|&i| t.flags[i]).collect(),
                discs: t.discs.clone(),
            }),
        }
    }
}

/// A kept candidate with its disc label (`1..=K`, superior first).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KeptCandidate {
    pub index: usize,
    pub candidate: DiscCandidate,
    pub probability: f64,
    pub label: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RejectedCandidate {
    pub index: usize,
    pub candidate: DiscCandidate,
    pub probability: f64,
}

/// Partition of a candidate set. `index` refers to the input order.
///
/// Hard selectors report probability 1 for kept and 0 for rejected points.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SelectionResult {
    pub kept: Vec<KeptCandidate>,
    pub rejected: Vec<RejectedCandidate>,
}

impl SelectionResult {
    /// Builds the partition from a keep mask, labelling kept points by `y`.
    pub fn from_mask(cs: &CandidateSet, keep: &[bool], probabilities: &[f64], labels: &LabelScheme) -> Self {
        let mut kept_idx: Vec<usize> = (0..cs.len()).filter(|&i| keep[i]).collect();
        kept_idx.sort_by(|&a, &b| cs.points[a].position.y.total_cmp(&cs.points[b].position.y).then(a.cmp(&b)));
        let kept = kept_idx
            .iter()
            .enumerate()
            .map(|(k, &i)| KeptCandidate {
                index: i,
                candidate: cs.points[i],
                probability: probabilities[i],
                label: k + 1,
                name: labels.name(k).map_or_else(|| format!("disc-{}", k + 1), str::to_string),
            })
            .collect();
        let rejected = (0..cs.len())
            .filter(|&i| !keep[i])
            .map(|i| RejectedCandidate { index: i, candidate: cs.points[i], probability: probabilities[i] })
            .collect();
        Self { kept, rejected }
    }

    pub fn len(&self) -> usize {
        self.kept.len() + self.rejected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keep mask in input order.
    pub fn keep_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        for k in &self.kept {
            mask[k.index] = true;
        }
        mask
    }

    /// Probabilities in input order.
    pub fn probabilities(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.len()];
        for k in &self.kept {
            p[k.index] = k.probability;
        }
        for r in &self.rejected {
            p[r.index] = r.probability;
        }
        p
    }

    pub fn kept_positions(&self) -> Vec<Point2D> {
        self.kept.iter().map(|k| k.candidate.position).collect()
    }
}

/// Centred and scaled coordinates of a set, with the inverse transform.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedSet {
    pub points: Vec<Point2D>,
    pub center: Point2D,
    pub scale: f64,
}

impl NormalizedSet {
    pub fn denormalize(&self, p: Point2D) -> Point2D {
        Point2D::new(p.x * self.scale + self.center.x, p.y * self.scale + self.center.y)
    }
}

/// Subtracts the centroid and divides by `scale`.
pub fn normalize_points(points: &[Point2D], scale: f64) -> Result<NormalizedSet> {
    if points.is_empty() {
        return Err(Error::EmptySet("normalize_set"));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Config(format!("normalisation scale must be positive, got {scale}")));
    }
    let n = points.len() as f64;
    let center = Point2D::new(
        points.iter().map(|p| p.x).sum::<f64>() / n,
        points.iter().map(|p| p.y).sum::<f64>() / n,
    );
    let points = points
        .iter()
        .map(|p| Point2D::new((p.x - center.x) / scale, (p.y - center.y) / scale))
        .collect();
    Ok(NormalizedSet { points, center, scale })
}

/// Root-mean-square distance of the points to their centroid.
pub fn spread(points: &[Point2D]) -> f64 {
    let Ok(n) = normalize_points(points, 1.0) else {
        return 0.0;
    };
    let ss: f64 = n.points.iter().map(|p| p.x * p.x + p.y * p.y).sum();
    (ss / points.len() as f64).sqrt()
}
