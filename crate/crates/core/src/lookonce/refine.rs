use std::time::Instant;

use super::candidates::{CandidateSet, SelectionResult};
use super::model::LookOnceModel;
use crate::baselines::SelectionCost;
use crate::error::{Error, Result};
use crate::heatmap::LabelScheme;

/// How many candidates to keep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KeepRule {
    /// The `N` most probable candidates.
    TopN(usize),
    /// Every candidate with keep-probability at or above the threshold.
    Threshold(f64),
}

impl Default for KeepRule {
    fn default() -> Self {
        KeepRule::Threshold(0.5)
    }
}

/// Classifies every candidate in one forward pass and labels the kept ones
/// superior to inferior.
pub fn refine(
    cs: &CandidateSet,
    model: &LookOnceModel,
    rule: KeepRule,
    labels: &LabelScheme,
) -> Result<(SelectionResult, SelectionCost)> {
    cs.validate()?;
    if let KeepRule::TopN(n) = rule {
        if n > cs.len() {
            return Err(Error::Infeasible { wanted: n, available: cs.len() });
        }
    }
    let start = Instant::now();
    let probs = model.predict(cs)?;
    let keep = match rule {
        KeepRule::Threshold(t) => probs.iter().map(|&p| p >= t).collect(),
        KeepRule::TopN(n) => {
            let mut idx: Vec<usize> = (0..probs.len()).collect();
            idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            let mut keep = vec![false; probs.len()];
            idx[..n].iter().for_each(|&i| keep[i] = true);
            keep
        }
    };
    let result = SelectionResult::from_mask(cs, &keep, &probs, labels);
    let cost = SelectionCost { subsets_evaluated: 0, forward_passes: 1, wall_time: start.elapsed().as_secs_f64() };
    Ok((result, cost))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lookonce::Architecture;
    use crate::synthbench::{generate_dataset, SynthConfig};

    fn setup() -> (CandidateSet, LookOnceModel) {
        let cs = generate_dataset(&SynthConfig { fp_count: 6, seed: 3, ..Default::default() }, 1).unwrap().remove(0);
        (cs, LookOnceModel::new(Architecture::default(), 100.0, 4).unwrap())
    }

    #[test]
    fn keeps_top_n_and_labels_by_height() {
        let (cs, model) = setup();
        let labels = LabelScheme::numbered(11).unwrap();
        let (r, cost) = refine(&cs, &model, KeepRule::TopN(11), &labels).unwrap();
        assert_eq!(cost.forward_passes, 1);
        assert_eq!(cost.subsets_evaluated, 0);
        assert_eq!(r.kept.len(), 11);
        assert_eq!(r.kept.len() + r.rejected.len(), cs.len());
        assert!(r.kept.windows(2).all(|w| w[0].candidate.position.y <= w[1].candidate.position.y));
        assert_eq!(r.kept.iter().map(|k| k.label).collect::<Vec<_>>(), (1..=11).collect::<Vec<_>>());
        let min_kept = r.kept.iter().map(|k| k.probability).fold(f64::INFINITY, f64::min);
        assert!(r.rejected.iter().all(|k| k.probability <= min_kept));
    }

    #[test]
    fn order_of_candidates_does_not_matter() {
        let (cs, model) = setup();
        let labels = LabelScheme::numbered(11).unwrap();
        let order: Vec<usize> = (0..cs.len()).rev().collect();
        let shuffled = cs.permuted(&order);
        let (a, _) = refine(&cs, &model, KeepRule::TopN(11), &labels).unwrap();
        let (b, _) = refine(&shuffled, &model, KeepRule::TopN(11), &labels).unwrap();
        let pa = a.probabilities();
        let pb = b.probabilities();
        for (new, &old) in order.iter().enumerate() {
            assert!((pa[old] - pb[new]).abs() < 1e-9);
        }
        assert_eq!(a.kept_positions(), b.kept_positions());
    }

    #[test]
    fn asking_for_more_than_available_fails() {
        let (cs, model) = setup();
        let labels = LabelScheme::numbered(11).unwrap();
        let m = cs.len();
        assert!(matches!(
            refine(&cs, &model, KeepRule::TopN(m + 1), &labels),
            Err(Error::Infeasible { wanted, available }) if wanted == m + 1 && available == m
        ));
        let (r, _) = refine(&cs, &model, KeepRule::Threshold(2.0), &labels).unwrap();
        assert!(r.kept.is_empty());
        assert_eq!(model.forward_passes(), 1);
    }
}
