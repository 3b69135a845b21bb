//! Trains a small look-once network on synthetic spines and refines one
//! held-out candidate set in a single pass.

use ivd_lookonce::heatmap::LabelScheme;
use ivd_lookonce::lookonce::{refine, train_lookonce_with, KeepRule, TrainConfig};
use ivd_lookonce::synthbench::{generate_dataset, SynthConfig};

fn main() -> ivd_lookonce::error::Result<()> {
    let data = generate_dataset(&SynthConfig { fp_count: 10, seed: 3, ..Default::default() }, 300)?;
    let (train, rest) = data.split_at(240);
    let (val, test) = rest.split_at(40);
    let cfg = TrainConfig { epochs: 25, seed: 3, ..Default::default() };
    let outcome = train_lookonce_with(train, val, &cfg, |e| {
        if e.epoch % 5 == 0 {
            println!("epoch {:>2}  loss {:.4}  val F1 {:.3}", e.epoch, e.train_loss, e.val_f1);
        }
    })?;

    let cs = &test[0];
    let flags = cs.tp_flags().expect("generated sets are labelled");
    let (result, cost) = refine(cs, &outcome.model, KeepRule::TopN(11), &LabelScheme::default())?;
    println!("\n{}: {} candidates, {} forward pass", cs.image_id, cs.len(), cost.forward_passes);
    for k in &result.kept {
        let tag = if flags[k.index] { "TP" } else { "FP" };
        println!("{:<6} ({:>6.1}, {:>6.1})  p={:.3}  {tag}", k.name, k.candidate.position.x, k.candidate.position.y, k.probability);
    }
    let fp_rejected = result.rejected.iter().filter(|r| !flags[r.index]).count();
    println!("rejected {} candidates, {fp_rejected} of them false positives", result.rejected.len());
    Ok(())
}
