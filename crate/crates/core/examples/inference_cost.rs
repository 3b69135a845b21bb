//! Work per case as false positives are added: one network pass for
//! look-once, `C(M, 11)` scored subsets for the search tree.

use ivd_lookonce::lookonce::LookOnceModel;
use ivd_lookonce::synthbench::{bench_inference, BenchConfig, SynthConfig};

fn main() -> ivd_lookonce::error::Result<()> {
    // Costs do not depend on the weights, so an untrained model is enough.
    let model = LookOnceModel::new(Default::default(), 100.0, 0)?;
    let cfg = BenchConfig {
        synth: SynthConfig { seed: 2, ..Default::default() },
        fp_counts: (1..=6).collect(),
        cases: 3,
        ..Default::default()
    };
    println!("{:<12} {:>3} {:>7} {:>9} {:>12}", "method", "M", "passes", "subsets", "median s");
    for r in bench_inference(Some(&model), &cfg)? {
        println!("{:<12} {:>3} {:>7} {:>9} {:>12.6}", r.method.name(), r.m, r.forward_passes, r.subsets_evaluated, r.median_wall_s);
    }
    Ok(())
}
