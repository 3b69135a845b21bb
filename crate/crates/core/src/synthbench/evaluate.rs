use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{DttAxis, MatchStrategy, MetricAccumulator, MetricReport};
use crate::baselines::{condition_filter, search_tree_select, FilterOptions, SelectionCost, SkeletonTemplate, TreeOptions};
use crate::error::{Error, Result};
use crate::heatmap::LabelScheme;
use crate::lookonce::{refine, CandidateSet, KeepRule, LookOnceModel, SelectionResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    LookOnce,
    SearchTree,
    Condition,
    /// Keeps exactly the TP candidates; a sanity check of the metrics.
    GroundTruth,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::LookOnce, Method::SearchTree, Method::Condition, Method::GroundTruth];

    pub fn name(self) -> &'static str {
        match self {
            Method::LookOnce => "lookonce",
            Method::SearchTree => "search-tree",
            Method::Condition => "condition",
            Method::GroundTruth => "ground-truth",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected lookonce, search-tree, condition or ground-truth)")))
    }
}

/// Where the search tree and condition filter get their skeleton.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateSource {
    /// Uniform spacing of `template_gap`; what a deployed pipeline has.
    #[default]
    Generic,
    /// The true disc skeleton of each labelled case. Makes the tree the
    /// reference selector for the generated geometry.
    Case,
}

/// Shared settings for running selectors over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Template gap for the search tree and condition filter (mm).
    pub template_gap: f64,
    pub template: TemplateSource,
    /// Look-once keeps the `V` most probable candidates when true, otherwise
    /// thresholds.
    pub top_n: bool,
    pub threshold: f64,
    pub tree: TreeOptions,
    pub filter: FilterOptions,
    pub axis: DttAxis,
    pub strategy: MatchStrategy,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            template_gap: 35.0,
            template: TemplateSource::Generic,
            top_n: true,
            threshold: 0.5,
            tree: TreeOptions::default(),
            filter: FilterOptions::default(),
            axis: DttAxis::Euclidean,
            strategy: MatchStrategy::Greedy,
        }
    }
}

/// Output of one selector on one set.
#[derive(Clone, Debug)]
pub struct CaseRun {
    pub result: SelectionResult,
    pub cost: SelectionCost,
}

/// Number of discs the selectors look for: `V` when known, else the set size.
fn expected_count(cs: &CandidateSet) -> usize {
    cs.truth.as_ref().map_or(cs.len(), |t| t.discs.len())
}

fn skeleton(cs: &CandidateSet, n: usize, opts: &EvalOptions) -> Result<SkeletonTemplate> {
    let n = n.max(1);
    match opts.template {
        TemplateSource::Generic => SkeletonTemplate::uniform(n, 0.0, 0.0, opts.template_gap),
        TemplateSource::Case => {
            let discs = &cs
                .truth
                .as_ref()
                .ok_or_else(|| Error::Config(format!("case templates need labels on `{}`", cs.image_id)))?
                .discs;
            if discs.len() == n {
                return SkeletonTemplate::new(discs.clone());
            }
            // Fewer detections than discs: keep the case's mean spacing.
            let span = discs.last().map_or(0.0, |l| l.y - discs[0].y);
            let gap = if discs.len() > 1 { span / (discs.len() - 1) as f64 } else { opts.template_gap };
            SkeletonTemplate::uniform(n, 0.0, 0.0, gap)
        }
    }
}

pub fn run_method(
    method: Method,
    cs: &CandidateSet,
    model: Option<&LookOnceModel>,
    opts: &EvalOptions,
) -> Result<CaseRun> {
    let v = expected_count(cs);
    let n = v.min(cs.len());
    let template = || skeleton(cs, n, opts);
    match method {
        Method::LookOnce => {
            let model = model.ok_or_else(|| Error::Config("method lookonce needs a checkpoint".into()))?;
            let rule = if opts.top_n { KeepRule::TopN(n) } else { KeepRule::Threshold(opts.threshold) };
            let labels = LabelScheme::numbered(v.max(1))?;
            let (result, cost) = refine(cs, model, rule, &labels)?;
            Ok(CaseRun { result, cost })
        }
        Method::SearchTree => {
            let (result, cost) = search_tree_select(cs, &template()?, n, &opts.tree)?;
            Ok(CaseRun { result, cost })
        }
        Method::Condition => {
            let result = condition_filter(cs, &template()?, &opts.filter)?;
            Ok(CaseRun { result, cost: SelectionCost::default() })
        }
        Method::GroundTruth => {
            let flags = cs
                .tp_flags()
                .ok_or_else(|| Error::Config(format!("ground-truth method needs labels on `{}`", cs.image_id)))?;
            let probs: Vec<f64> = flags.iter().map(|&f| f64::from(u8::from(f))).collect();
            let result = SelectionResult::from_mask(cs, &flags, &probs, &LabelScheme::numbered(v.max(1))?);
            Ok(CaseRun { result, cost: SelectionCost::default() })
        }
    }
}

/// Metrics of one method over labelled sets, plus its summed cost.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodEval {
    pub method: Method,
    pub cases: usize,
    pub report: MetricReport,
    pub subsets_evaluated: u64,
    pub forward_passes: u64,
}

pub fn evaluate_method(
    method: Method,
    sets: &[CandidateSet],
    model: Option<&LookOnceModel>,
    opts: &EvalOptions,
) -> Result<MethodEval> {
    if sets.is_empty() {
        return Err(Error::EmptySet("evaluation data"));
    }
    let mut acc = MetricAccumulator::new(opts.axis, opts.strategy);
    let (mut subsets, mut passes) = (0, 0);
    for cs in sets {
        let flags = cs
            .tp_flags()
            .ok_or_else(|| Error::Config(format!("evaluation needs labels on `{}`", cs.image_id)))?;
        let run = run_method(method, cs, model, opts)?;
        let reference = cs.reference_positions().expect("labelled set");
        acc.add_case(
            &run.result.probabilities(),
            &run.result.keep_mask(),
            &flags,
            &run.result.kept_positions(),
            &reference,
        )?;
        subsets += run.cost.subsets_evaluated;
        passes += run.cost.forward_passes;
    }
    Ok(MethodEval { method, cases: sets.len(), report: acc.report()?, subsets_evaluated: subsets, forward_passes: passes })
}
