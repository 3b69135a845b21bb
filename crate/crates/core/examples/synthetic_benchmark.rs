//! Generates a labelled dataset, writes it as JSON Lines and scores the
//! non-learned selectors on it.

use ivd_lookonce::synthbench::{
    evaluate_method, generate_dataset, load_jsonl, save_jsonl, EvalOptions, Method, SynthConfig,
};

fn main() -> ivd_lookonce::error::Result<()> {
    let cfg = SynthConfig { fp_count: 5, seed: 11, ..Default::default() };
    let data = generate_dataset(&cfg, 25)?;
    let dir = std::env::temp_dir().join("ivd-lookonce-example");
    let path = dir.join("cases.jsonl");
    save_jsonl(&data, &path)?;
    let data = load_jsonl(&path)?;
    println!("{} cases of {} candidates in {}", data.len(), data[0].len(), path.display());

    println!("{:<13} {:>6} {:>6} {:>6} {:>6} {:>6}", "method", "f1", "acc", "fnr%", "fpr%", "auc");
    for method in [Method::GroundTruth, Method::SearchTree, Method::Condition] {
        let e = evaluate_method(method, &data, None, &EvalOptions::default())?;
        let r = e.report;
        let auc = r.auc.map_or("-".to_string(), |a| format!("{a:.3}"));
        println!("{:<13} {:>6.3} {:>6.3} {:>6.2} {:>6.2} {auc:>6}", method.name(), r.f1, r.accuracy, r.fnr, r.fpr);
    }
    Ok(())
}
