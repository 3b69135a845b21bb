use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::evaluate::{run_method, EvalOptions, Method};
use super::generate::{generate_dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::lookonce::LookOnceModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Geometry of the cases; `fp_count` is replaced by each entry of `fp_counts`.
    pub synth: SynthConfig,
    pub fp_counts: Vec<usize>,
    /// Cases per FP count; every method sees the same ones.
    pub cases: usize,
    /// Timing repetitions; the median is reported.
    pub repetitions: usize,
    pub methods: Vec<Method>,
    pub eval: EvalOptions,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig { drop_tp_probability: 0.0, ..Default::default() },
            fp_counts: (1..=8).collect(),
            cases: 10,
            repetitions: 5,
            methods: vec![Method::LookOnce, Method::SearchTree],
            eval: EvalOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: Method,
    pub extra_fp: usize,
    pub m: usize,
    pub n: usize,
    /// Network evaluations per case.
    pub forward_passes: u64,
    /// Subsets scored per case.
    pub subsets_evaluated: u64,
    /// Median over repetitions of the mean seconds per case.
    pub median_wall_s: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Runs every method on identical cases for each FP count.
pub fn bench_inference(model: Option<&LookOnceModel>, cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.repetitions < 5 {
        return Err(Error::Config(format!("at least 5 repetitions are needed, got {}", cfg.repetitions)));
    }
    if cfg.cases == 0 || cfg.fp_counts.is_empty() || cfg.methods.is_empty() {
        return Err(Error::Config("bench needs cases, fp_counts and methods".into()));
    }
    if cfg.methods.contains(&Method::LookOnce) && model.is_none() {
        return Err(Error::Config("method lookonce needs a checkpoint".into()));
    }
    let mut rows = Vec::new();
    for &k in &cfg.fp_counts {
        let synth = SynthConfig { fp_count: k, ..cfg.synth.clone() };
        let cases = generate_dataset(&synth, cfg.cases)?;
        let m = cases[0].len();
        for &method in &cfg.methods {
            let mut counts = None;
            let mut times = Vec::with_capacity(cfg.repetitions);
            for _ in 0..cfg.repetitions {
                let start = Instant::now();
                for cs in &cases {
                    let run = run_method(method, cs, model, &cfg.eval)?;
                    let c = (run.cost.forward_passes, run.cost.subsets_evaluated, run.result.kept.len());
                    match counts {
                        None => counts = Some(c),
                        Some(prev) if prev != c => {
                            return Err(Error::Config(format!("{method} did different work on equally sized cases")));
                        }
                        _ => {}
                    }
                }
                times.push(start.elapsed().as_secs_f64() / cases.len() as f64);
            }
            let (forward_passes, subsets_evaluated, n) = counts.expect("at least one case");
            rows.push(BenchRow { method, extra_fp: k, m, n, forward_passes, subsets_evaluated, median_wall_s: median(times) });
        }
    }
    Ok(rows)
}

/// Operation counts only; identical across runs.
pub fn write_counts_csv(rows: &[BenchRow], header: &[String], out: &mut impl Write) -> Result<()> {
    write_csv(rows, header, out, false)
}

/// Counts plus median wall time.
pub fn write_timing_csv(rows: &[BenchRow], header: &[String], out: &mut impl Write) -> Result<()> {
    write_csv(rows, header, out, true)
}

fn write_csv(rows: &[BenchRow], header: &[String], out: &mut impl Write, timing: bool) -> Result<()> {
    let mut buf = Vec::new();
    for h in header {
        writeln!(buf, "# {h}").map_err(|e| Error::io("<bench>", e))?;
    }
    let mut w = csv::Writer::from_writer(&mut buf);
    let mut cols = vec!["method", "extra_fp", "m", "n", "forward_passes", "subsets_evaluated"];
    if timing {
        cols.push("median_wall_s");
    }
    w.write_record(&cols)?;
    for r in rows {
        let mut rec = vec![
            r.method.to_string(),
            r.extra_fp.to_string(),
            r.m.to_string(),
            r.n.to_string(),
            r.forward_passes.to_string(),
            r.subsets_evaluated.to_string(),
        ];
        if timing {
            rec.push(format!("{:.9}", r.median_wall_s));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<bench>", e))?;
    drop(w);
    out.write_all(&buf).map_err(|e| Error::io("<bench>", e))
}
