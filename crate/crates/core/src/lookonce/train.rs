use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::candidates::{spread, CandidateSet};
use super::model::{Architecture, LookOnceModel};
use crate::error::{Error, Result};
use crate::numkit::{Graph, OptimizerState, ParamStore, Tensor, Var};
use crate::synthbench::metrics::Confusion;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub epochs: usize,
    /// Candidate sets per optimiser step.
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate is multiplied by `decay_factor` every `decay_period`
    /// epochs; the default factor of 1 keeps it constant.
    pub decay_factor: f64,
    pub decay_period: usize,
    /// Keep-probability threshold for validation F1.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::default(),
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            decay_factor: 1.0,
            decay_period: 20,
            threshold: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation F1.
    pub model: LookOnceModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    /// Per-class loss weights `(reject, keep)`.
    pub class_weights: [f64; 2],
}

/// A set prepared for the tape: normalised input, targets and row weights.
struct Example {
    input: Tensor,
    targets: Vec<usize>,
    weights: Vec<f64>,
    flags: Vec<bool>,
}

fn prepare(sets: &[CandidateSet], model: &LookOnceModel, class_weights: [f64; 2]) -> Result<Vec<Example>> {
    sets.iter()
        .map(|cs| {
            let flags = cs
                .tp_flags()
                .ok_or_else(|| Error::Config(format!("set `{}` has no ground truth", cs.image_id)))?;
            let targets: Vec<usize> = flags.iter().map(|&f| usize::from(f)).collect();
            let weights = targets.iter().map(|&t| class_weights[t]).collect();
            Ok(Example { input: model.input_tensor(cs)?, targets, weights, flags })
        })
        .collect()
}

/// Class weights `total / (2 * count_c)`.
pub fn class_weights(sets: &[CandidateSet]) -> [f64; 2] {
    let mut counts = [0usize; 2];
    for flags in sets.iter().filter_map(CandidateSet::tp_flags) {
        for f in flags {
            counts[usize::from(f)] += 1;
        }
    }
    let total = (counts[0] + counts[1]) as f64;
    counts.map(|c| if c == 0 { 1.0 } else { total / (2.0 * c as f64) })
}

fn set_loss(g: &mut Graph, params: &ParamStore, arch: &Architecture, ex: &Example) -> Result<(Var, Var)> {
    let x = g.input(ex.input.clone());
    let out = LookOnceModel::forward_graph(g, params, arch, x)?;
    let loss = g.softmax_cross_entropy(out.logits, &ex.targets, &ex.weights)?;
    Ok((loss, out.probs))
}

/// Mean per-set loss and F1 over every candidate, without gradients.
fn evaluate(params: &ParamStore, arch: &Architecture, data: &[Example], threshold: f64) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut confusion = Confusion::default();
    for ex in data {
        let mut g = Graph::new();
        let (loss, probs) = set_loss(&mut g, params, arch, ex)?;
        total += g.value(loss).item();
        let p = g.value(probs);
        let pred: Vec<bool> = (0..p.rows()).map(|i| p.get(i, 1) >= threshold).collect();
        confusion.add(&pred, &ex.flags)?;
    }
    Ok((total / data.len() as f64, confusion.f1()))
}

fn validate(train: &[CandidateSet], cfg: &TrainConfig) -> Result<()> {
    if train.is_empty() {
        return Err(Error::EmptySet("training data"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("epochs, batch_size and lr must be positive".into()));
    }
    for cs in train {
        cs.validate()?;
        match cs.tp_flags() {
            None => return Err(Error::Config(format!("set `{}` has no ground truth", cs.image_id))),
            Some(f) if !f.contains(&true) => {
                return Err(Error::Config(format!("set `{}` has no true positive", cs.image_id)))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Trains with class-weighted cross-entropy and Adam, keeping the epoch with
/// the best validation F1 (the earliest on ties). With an empty `val` the
/// training sets are used for selection.
pub fn train_lookonce(train: &[CandidateSet], val: &[CandidateSet], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_lookonce_with(train, val, cfg, |_| {})
}

/// As [`train_lookonce`], calling `on_epoch` after every epoch.
pub fn train_lookonce_with(
    train: &[CandidateSet],
    val: &[CandidateSet],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    validate(train, cfg)?;
    let scale = train.iter().map(|cs| spread(&cs.positions())).sum::<f64>() / train.len() as f64;
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let mut model = LookOnceModel::new(cfg.arch.clone(), scale, cfg.seed)?;
    let weights = class_weights(train);
    let train_data = prepare(train, &model, weights)?;
    let val_data = if val.is_empty() { prepare(train, &model, weights)? } else { prepare(val, &model, weights)? };

    let mut opt = OptimizerState::adam(cfg.lr).with_decay(cfg.decay_factor, cfg.decay_period);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;

    for epoch in 1..=cfg.epochs {
        opt.set_epoch(epoch - 1);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let mut total: Option<Var> = None;
            for &i in batch {
                let (loss, _) = set_loss(&mut g, &model.params, &model.arch, &train_data[i])?;
                total = Some(match total {
                    Some(t) => g.add(t, loss)?,
                    None => loss,
                });
            }
            let sum = total.expect("non-empty batch");
            epoch_loss += g.value(sum).item();
            let mean = g.scale(sum, 1.0 / batch.len() as f64);
            g.backward(mean)?;
            model.params.zero_grad();
            g.accumulate_into(&mut model.params)?;
            opt.step(&mut model.params)?;
        }
        let (val_loss, val_f1) = evaluate(&model.params, &model.arch, &val_data, cfg.threshold)?;
        let entry = EpochLog { epoch, train_loss: epoch_loss / train_data.len() as f64, val_loss, val_f1 };
        on_epoch(&entry);
        log.push(entry);
        if best.as_ref().is_none_or(|(_, f1, _)| val_f1 > *f1) {
            best = Some((epoch, val_f1, model.params.clone()));
        }
    }
    let (best_epoch, best_val_f1, params) = best.expect("at least one epoch");
    model.params = params;
    model.params.clear_grad();
    Ok(TrainOutcome { model, log, best_epoch, best_val_f1, class_weights: weights })
}

/// Mean per-set loss of a model on labelled sets.
pub fn dataset_loss(model: &LookOnceModel, sets: &[CandidateSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::EmptySet("loss data"));
    }
    let data = prepare(sets, model, class_weights(sets))?;
    Ok(evaluate(&model.params, &model.arch, &data, 0.5)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::{DiscCandidate, Point2D};
    use crate::lookonce::{GroundTruth, PointTruth};
    use crate::numkit::{grad_check, GraphFn};
    use crate::synthbench::{generate_dataset, SynthConfig};

    fn small() -> Architecture {
        Architecture { transform_shared: vec![8, 8], transform_head: 8, encoder: vec![8, 16], relation_hidden: 8 }
    }

    /// Discs on a vertical line, FPs far to the side.
    fn separable(count: usize) -> Vec<CandidateSet> {
        (0..count)
            .map(|k| {
                let shift = k as f64 * 3.0;
                let mut points = Vec::new();
                let mut flags = Vec::new();
                for i in 0..6 {
                    points.push(DiscCandidate::new(Point2D::new(shift, 30.0 * i as f64), 1.0));
                    flags.push(PointTruth { is_tp: true, gt_index: Some(i) });
                }
                for i in 0..4 {
                    let side = if (i + k) % 2 == 0 { 70.0 } else { -70.0 };
                    points.push(DiscCandidate::new(Point2D::new(shift + side, 20.0 + 40.0 * i as f64), 1.0));
                    flags.push(PointTruth { is_tp: false, gt_index: None });
                }
                let discs = points[..6].iter().map(|p| p.position).collect();
                CandidateSet { image_id: format!("s{k}"), points, truth: Some(GroundTruth { flags, discs }) }
            })
            .collect()
    }

    #[test]
    fn weights_balance_classes() {
        let w = class_weights(&separable(2));
        assert!((w[0] - 20.0 / 16.0).abs() < 1e-12);
        assert!((w[1] - 20.0 / 24.0).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_on_twenty_sets() {
        let data = generate_dataset(&SynthConfig { fp_count: 5, seed: 4, ..Default::default() }, 20).unwrap();
        let cfg = TrainConfig { arch: small(), epochs: 200, batch_size: 4, lr: 1e-3, seed: 1, ..Default::default() };
        let out = train_lookonce(&data, &[], &cfg).unwrap();
        let first = out.log[0].train_loss;
        let last = out.log.last().unwrap().train_loss;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn separable_sets_are_learned_exactly() {
        let data = separable(16);
        let cfg = TrainConfig { arch: small(), epochs: 60, batch_size: 4, lr: 1e-2, seed: 2, ..Default::default() };
        let out = train_lookonce(&data, &[], &cfg).unwrap();
        assert_eq!(out.best_val_f1, 1.0);
        for cs in &data {
            let p = out.model.predict(cs).unwrap();
            let flags = cs.tp_flags().unwrap();
            assert!(p.iter().zip(&flags).all(|(&p, &f)| (p >= 0.5) == f));
        }
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let data = generate_dataset(&SynthConfig { fp_count: 4, seed: 8, ..Default::default() }, 8).unwrap();
        let cfg = TrainConfig { arch: small(), epochs: 3, batch_size: 3, seed: 5, ..Default::default() };
        let a = train_lookonce(&data[..6], &data[6..], &cfg).unwrap();
        let b = train_lookonce(&data[..6], &data[6..], &cfg).unwrap();
        assert_eq!(a.model.to_checkpoint().to_json().unwrap(), b.model.to_checkpoint().to_json().unwrap());
        assert_eq!(a.log, b.log);
        let c = train_lookonce(&data[..6], &data[6..], &TrainConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a.model.to_checkpoint().to_json().unwrap(), c.model.to_checkpoint().to_json().unwrap());
    }

    #[test]
    fn unlabelled_or_empty_training_is_rejected() {
        let cfg = TrainConfig::default();
        assert!(matches!(train_lookonce(&[], &[], &cfg), Err(Error::EmptySet(_))));
        let cs = CandidateSet::new("u", vec![DiscCandidate::new(Point2D::new(0.0, 0.0), 1.0)]).unwrap();
        assert!(matches!(train_lookonce(&[cs], &[], &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn full_network_passes_grad_check() {
        let data = generate_dataset(&SynthConfig { fp_count: 3, discs: 4, seed: 2, ..Default::default() }, 1).unwrap();
        for seed in 0..4 {
            let model = LookOnceModel::new(small(), 40.0, seed).unwrap();
            let ex = prepare(&data, &model, class_weights(&data)).unwrap().remove(0);
            let mut store = model.params.clone();
            // Move the transform and classifier off their initial values so
            // every path carries gradient well above finite-difference noise.
            store.value_mut("tnet.fc4.w").unwrap().data_mut().iter_mut().enumerate().for_each(|(i, v)| {
                *v = ((i * 7 % 13) as f64 - 6.0) / 40.0;
            });
            store.value_mut("cls.w").unwrap().data_mut().iter_mut().for_each(|v| *v *= 6.0);
            let m = ex.input.rows();
            let coeffs = Tensor::matrix(m, 2, (0..2 * m).map(|i| 0.5 + (i * 37 % 11) as f64 / 10.0).collect()).unwrap();
            let arch = model.arch.clone();
            let mut f = GraphFn(|g: &mut Graph, p: &ParamStore| {
                let (_, probs) = set_loss(g, p, &arch, &ex)?;
                let c = g.input(coeffs.clone());
                let y = g.mul(probs, c)?;
                Ok(g.sum(y))
            });
            let report = grad_check(&mut f, &mut store, 1e-4).unwrap();
            assert!(report.passed(), "seed {seed}: {:?}", report.worst());
        }
    }
}
