use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{DiscCandidate, Point2D};
use crate::lookonce::{CandidateSet, GroundTruth, PointTruth};

/// Geometry and noise of the synthetic spines, in millimetres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Discs per spine.
    pub discs: usize,
    pub mean_gap: f64,
    pub gap_jitter: f64,
    pub column_x: f64,
    pub lateral_jitter: f64,
    /// `y` of the first disc.
    pub top_y: f64,
    /// Standard deviation of each detection around its disc.
    pub tp_sigma: f64,
    pub fp_count: usize,
    /// FPs are drawn with `|x - column_x| <= fp_margin_x`.
    pub fp_margin_x: f64,
    /// FPs are drawn from `fp_margin_y` above the first to below the last disc.
    pub fp_margin_y: f64,
    /// Smallest distance between an FP and any disc or detection.
    pub fp_min_distance: f64,
    pub drop_tp_probability: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            discs: 11,
            mean_gap: 35.0,
            gap_jitter: 4.0,
            column_x: 100.0,
            lateral_jitter: 3.0,
            top_y: 40.0,
            tp_sigma: 2.0,
            fp_count: 20,
            fp_margin_x: 100.0,
            fp_margin_y: 30.0,
            fp_min_distance: 6.0,
            drop_tp_probability: 0.0,
            seed: 0,
        }
    }
}

pub const MAX_FP_ATTEMPTS: usize = 1000;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mean_gap", self.mean_gap),
            ("fp_margin_x", self.fp_margin_x),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("gap_jitter", self.gap_jitter),
            ("lateral_jitter", self.lateral_jitter),
            ("tp_sigma", self.tp_sigma),
            ("fp_margin_y", self.fp_margin_y),
            ("fp_min_distance", self.fp_min_distance),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.discs == 0 {
            return Err(Error::Config("discs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_tp_probability) {
            return Err(Error::Config(format!(
                "drop_tp_probability must lie in [0, 1], got {}",
                self.drop_tp_probability
            )));
        }
        if !self.column_x.is_finite() || !self.top_y.is_finite() {
            return Err(Error::Config("column_x and top_y must be finite".into()));
        }
        Ok(())
    }

    /// Independent stream for case `index`.
    pub fn case_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

fn normal(mean: f64, sd: f64) -> Result<Normal<f64>> {
    Normal::new(mean, sd).map_err(|e| Error::Config(format!("normal({mean}, {sd}): {e}")))
}

/// One noisy detection of a spine with flagged TPs and FPs, in shuffled order.
pub fn generate_case<R: Rng>(cfg: &SynthConfig, image_id: impl Into<String>, rng: &mut R) -> Result<CandidateSet> {
    cfg.validate()?;
    let gap = normal(cfg.mean_gap, cfg.gap_jitter)?;
    let lateral = normal(0.0, cfg.lateral_jitter)?;
    let jitter = normal(0.0, cfg.tp_sigma)?;

    let mut discs = Vec::with_capacity(cfg.discs);
    let mut y = cfg.top_y;
    for i in 0..cfg.discs {
        if i > 0 {
            y += gap.sample(rng).max(0.3 * cfg.mean_gap);
        }
        discs.push(Point2D::new(cfg.column_x + lateral.sample(rng), y));
    }

    let mut points = Vec::new();
    let mut flags = Vec::new();
    for (i, d) in discs.iter().enumerate() {
        let dropped = cfg.drop_tp_probability > 0.0 && rng.random_bool(cfg.drop_tp_probability);
        let p = Point2D::new(d.x + jitter.sample(rng), d.y + jitter.sample(rng));
        let score = rng.random_range(0.6..1.0);
        if !dropped {
            points.push(DiscCandidate::new(p, score));
            flags.push(PointTruth { is_tp: true, gt_index: Some(i) });
        }
    }

    let y_lo = discs[0].y - cfg.fp_margin_y;
    let y_hi = discs[cfg.discs - 1].y + cfg.fp_margin_y;
    let x_lo = cfg.column_x - cfg.fp_margin_x;
    let x_hi = cfg.column_x + cfg.fp_margin_x;
    let anchors: Vec<Point2D> = points.iter().map(|c| c.position).chain(discs.iter().copied()).collect();
    for k in 0..cfg.fp_count {
        let mut placed = None;
        for _ in 0..MAX_FP_ATTEMPTS {
            let p = Point2D::new(rng.random_range(x_lo..=x_hi), rng.random_range(y_lo..=y_hi));
            if anchors.iter().all(|a| a.distance(&p) >= cfg.fp_min_distance) {
                placed = Some(p);
                break;
            }
        }
        let p = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place false positive {k} at least {} mm from every disc after {MAX_FP_ATTEMPTS} attempts",
                cfg.fp_min_distance
            ))
        })?;
        points.push(DiscCandidate::new(p, rng.random_range(0.3..0.9)));
        flags.push(PointTruth { is_tp: false, gt_index: None });
    }

    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(rng);
    let points = order.iter().map(|&i| points[i]).collect();
    let flags = order.iter().map(|&i| flags[i]).collect();
    let cs = CandidateSet { image_id: image_id.into(), points, truth: Some(GroundTruth { flags, discs }) };
    if cs.points.is_empty() {
        return Err(Error::Generation("every disc was dropped and no false positives were requested".into()));
    }
    Ok(cs)
}

/// `count` cases, case `i` drawn from its own stream of `cfg.seed`.
pub fn generate_dataset(cfg: &SynthConfig, count: usize) -> Result<Vec<CandidateSet>> {
    (0..count)
        .map(|i| generate_case(cfg, format!("synth-{}-{i:05}", cfg.seed), &mut cfg.case_rng(i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_case_has_only_discs() {
        let cfg = SynthConfig { fp_count: 0, ..Default::default() };
        let cs = generate_case(&cfg, "a", &mut cfg.case_rng(0)).unwrap();
        assert_eq!(cs.len(), 11);
        assert!(cs.tp_flags().unwrap().iter().all(|&f| f));
    }

    #[test]
    fn same_seed_same_cases() {
        let cfg = SynthConfig { seed: 9, ..Default::default() };
        assert_eq!(generate_dataset(&cfg, 5).unwrap(), generate_dataset(&cfg, 5).unwrap());
        let other = SynthConfig { seed: 10, ..Default::default() };
        assert_ne!(generate_dataset(&cfg, 5).unwrap(), generate_dataset(&other, 5).unwrap());
    }

    #[test]
    fn default_layout_counts() {
        let cfg = SynthConfig::default();
        let data = generate_dataset(&cfg, 100).unwrap();
        assert_eq!(data.len(), 100);
        for cs in &data {
            let flags = cs.tp_flags().unwrap();
            assert_eq!(cs.len(), 31);
            assert_eq!(flags.iter().filter(|&&f| f).count(), 11);
            let tps: Vec<_> = cs.points.iter().zip(&flags).filter(|(_, &f)| f).map(|(p, _)| p.position).collect();
            for (p, _) in cs.points.iter().zip(&flags).filter(|(_, &f)| !f) {
                assert!(tps.iter().all(|t| t.distance(&p.position) > 5.0));
            }
        }
    }

    #[test]
    fn dropping_removes_detections_but_keeps_discs() {
        let cfg = SynthConfig { fp_count: 0, drop_tp_probability: 0.5, ..Default::default() };
        let data = generate_dataset(&cfg, 20).unwrap();
        assert!(data.iter().any(|cs| cs.len() < 11));
        assert!(data.iter().all(|cs| cs.truth.as_ref().unwrap().discs.len() == 11));
    }

    #[test]
    fn impossible_placement_fails() {
        let cfg = SynthConfig { fp_min_distance: 1e4, fp_count: 1, ..Default::default() };
        let err = generate_case(&cfg, "x", &mut cfg.case_rng(0));
        assert!(matches!(err, Err(Error::Generation(_))));
    }

    #[test]
    fn invalid_probability_is_rejected() {
        let cfg = SynthConfig { drop_tp_probability: 1.5, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
