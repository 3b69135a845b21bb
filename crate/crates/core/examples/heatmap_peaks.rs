//! Renders one Gaussian target per disc label and reads the discs back.

use ivd_lookonce::heatmap::{extract_peaks, render_heatmap, Geometry, Kernel, LabelScheme, PeakParams, Point2D};

fn main() -> ivd_lookonce::error::Result<()> {
    let scheme = LabelScheme::default();
    let discs: Vec<(Point2D, usize)> = (0..scheme.channels())
        .map(|i| (Point2D::new(60.0 + 4.0 * (i as f64 * 0.6).sin(), 25.0 + 33.5 * i as f64), i))
        .collect();
    let geometry = Geometry { height: 400, width: 120, pixel_size_mm: 1.0 };
    let h = render_heatmap(&discs, &scheme, geometry, Kernel::default())?;
    let peaks = extract_peaks(&h, PeakParams::default());
    println!("{} channels, {} peaks", h.channels(), peaks.len());
    for p in &peaks {
        let ch = p.channel.expect("rendered peaks carry a channel");
        let want = discs[ch].0;
        println!(
            "{:<6} at ({:>5.1}, {:>5.1}) score {:.3}  off by {:.2} px",
            scheme.name(ch).unwrap_or("?"),
            p.position.x,
            p.position.y,
            p.score,
            p.position.distance(&want)
        );
    }
    Ok(())
}
