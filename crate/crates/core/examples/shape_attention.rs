//! Recalibrates a three-level feature pyramid with image-gradient shape
//! information and fuses it at the finest resolution.

use ivd_lookonce::shape_attention::{
    compute_shape_feature, AttentionBlock, AttentionConfig, FeatureMap, FeaturePyramid, Grid,
};

fn main() -> ivd_lookonce::error::Result<()> {
    // A bright vertical column with periodic bumps.
    let image = Grid::from_fn(32, 32, |r, c| {
        let band = (-((c as f64 - 16.0) / 4.0).powi(2)).exp();
        band * (0.6 + 0.4 * (r as f64 * 0.8).cos())
    });
    let sf = compute_shape_feature(&image)?;
    let levels = [(8, 32), (16, 16), (32, 8)]
        .iter()
        .map(|&(c, s)| FeatureMap::new(c, s, s, (0..c * s * s).map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5).collect()))
        .collect::<Result<Vec<_>, _>>()?;
    let pyramid = FeaturePyramid::new(levels)?;
    let block = AttentionBlock::new(AttentionConfig::new(vec![8, 16, 32], 4), 1)?;
    let out = block.forward(&pyramid, &sf)?;
    for (j, lv) in out.levels.iter().enumerate() {
        let g = &lv.channel_gates;
        println!(
            "level {j}: {:?}  channel gates {:.3}..{:.3}  shape gate {:.3}",
            lv.map.shape(),
            g.iter().copied().fold(f64::INFINITY, f64::min),
            g.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            lv.shape_gate
        );
    }
    println!("fused: {:?}", out.fused.shape());
    Ok(())
}
