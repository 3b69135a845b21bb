//! The exhaustive search tree and the greedy condition filter on one noisy
//! spine, with the number of subsets the tree has to score.

use ivd_lookonce::baselines::{
    condition_filter, count_selections, search_tree_select, FilterOptions, SkeletonTemplate, TreeOptions,
};
use ivd_lookonce::synthbench::{generate_dataset, SynthConfig};

fn main() -> ivd_lookonce::error::Result<()> {
    for extra in 1..=8 {
        println!("M = {:>2}: C(M, 11) = {}", 11 + extra, count_selections(11 + extra, 11)?);
    }
    let cs = generate_dataset(&SynthConfig { fp_count: 6, seed: 5, ..Default::default() }, 1)?.remove(0);
    let flags = cs.tp_flags().expect("labelled");
    let template = SkeletonTemplate::uniform(11, 0.0, 0.0, 35.0)?;

    let (tree, cost) = search_tree_select(&cs, &template, 11, &TreeOptions::default())?;
    let tree_tp = tree.kept.iter().filter(|k| flags[k.index]).count();
    println!("\nsearch tree: scored {} subsets in {:.3}s, kept {tree_tp}/11 true discs", cost.subsets_evaluated, cost.wall_time);

    let filtered = condition_filter(&cs, &template, &FilterOptions::default())?;
    let filter_tp = filtered.kept.iter().filter(|k| flags[k.index]).count();
    println!("condition filter: kept {} candidates, {filter_tp} true discs", filtered.kept.len());
    Ok(())
}
