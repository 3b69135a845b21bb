//! Ground-truth heatmap targets and local-maximum candidate extraction.
//!
//! Each disc is drawn into its own channel as a truncated Gaussian bump with
//! amplitude 1 at the (pixel-snapped) centre. Overlapping bumps in a channel
//! combine by pointwise maximum, so targets stay in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Location in millimetres. `x` runs left-right (columns), `y` runs
/// superior-inferior (rows).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Ordered disc label names, superior to inferior.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelScheme {
    names: Vec<String>,
}

const DEFAULT_LABELS: [&str; 11] = [
    "C2-C3", "C3-C4", "C4-C5", "C5-C6", "C6-C7", "C7-T1", "T1-T2", "T2-T3", "T3-T4", "T4-T5",
    "T5-T6",
];

impl Default for LabelScheme {
    fn default() -> Self {
        Self {
            names: DEFAULT_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl LabelScheme {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("label scheme needs at least one label".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate label `{n}`")));
            }
        }
        Ok(Self { names })
    }

    /// Scheme with `v` generic labels `disc-1 .. disc-v`.
    pub fn numbered(v: usize) -> Result<Self> {
        if v == DEFAULT_LABELS.len() {
            return Ok(Self::default());
        }
        Self::new((1..=v).map(|i| format!("disc-{i}")).collect())
    }

    pub fn channels(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, channel: usize) -> Option<&str> {
        self.names.get(channel).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// A detection: position, confidence and optionally the channel it came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscCandidate {
    pub position: Point2D,
    pub score: f64,
    pub channel: Option<usize>,
}

impl DiscCandidate {
    pub fn new(position: Point2D, score: f64) -> Self {
        Self { position, score, channel: None }
    }
}

/// `V x H x W` response grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    channels: usize,
    height: usize,
    width: usize,
    pixel_size_mm: f64,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HeatmapJson {
    channels: usize,
    height: usize,
    width: usize,
    pixel_size_mm: f64,
    values: Vec<Vec<Vec<f64>>>,
}

impl Heatmap {
    pub fn zeros(channels: usize, height: usize, width: usize, pixel_size_mm: f64) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || !(pixel_size_mm > 0.0) {
            return Err(Error::Config(format!(
                "invalid heatmap geometry {channels}x{height}x{width} @ {pixel_size_mm} mm"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixel_size_mm,
            values: vec![0.0; channels * height * width],
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_size_mm(&self) -> f64 {
        self.pixel_size_mm
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn idx(&self, c: usize, r: usize, col: usize) -> usize {
        (c * self.height + r) * self.width + col
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.values[self.idx(channel, row, col)]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, v: f64) {
        let i = self.idx(channel, row, col);
        self.values[i] = v;
    }

    pub fn same_shape(&self, other: &Heatmap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn to_json(&self) -> Result<String> {
        let values = (0..self.channels)
            .map(|c| {
                (0..self.height)
                    .map(|r| {
                        let start = self.idx(c, r, 0);
                        self.values[start..start + self.width].to_vec()
                    })
                    .collect()
            })
            .collect();
        Ok(serde_json::to_string(&HeatmapJson {
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixel_size_mm: self.pixel_size_mm,
            values,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: HeatmapJson = serde_json::from_str(s)?;
        let mut h = Self::zeros(j.channels, j.height, j.width, j.pixel_size_mm)?;
        let rows_ok = j.values.len() == j.channels
            && j.values.iter().all(|ch| {
                ch.len() == j.height && ch.iter().all(|row| row.len() == j.width)
            });
        if !rows_ok {
            return Err(Error::dim("heatmap json", &h.dims(), &[j.values.len()]));
        }
        h.values = j.values.into_iter().flatten().flatten().collect();
        Ok(h)
    }
}

/// Truncated Gaussian kernel, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kernel {
    pub radius_px: f64,
    pub sigma_px: f64,
}

impl Default for Kernel {
    fn default() -> Self {
        Self { radius_px: 10.0, sigma_px: 10.0 / 3.0 }
    }
}

/// Grid size and resolution of a rendered heatmap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub pixel_size_mm: f64,
}

impl Geometry {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, pixel_size_mm: 1.0 }
    }
}

/// Draws one truncated Gaussian per `(position, channel)` pair.
pub fn render_heatmap(
    positions: &[(Point2D, usize)],
    scheme: &LabelScheme,
    geometry: Geometry,
    kernel: Kernel,
) -> Result<Heatmap> {
    let mut h = Heatmap::zeros(scheme.channels(), geometry.height, geometry.width, geometry.pixel_size_mm)?;
    let reach = kernel.radius_px.floor() as i64;
    let r2max = kernel.radius_px * kernel.radius_px;
    let two_s2 = 2.0 * kernel.sigma_px * kernel.sigma_px;
    for &(p, ch) in positions {
        if ch >= scheme.channels() {
            return Err(Error::dim("render_heatmap channel", &[scheme.channels()], &[ch]));
        }
        let r0 = (p.y / geometry.pixel_size_mm).round();
        let c0 = (p.x / geometry.pixel_size_mm).round();
        if !r0.is_finite() || !c0.is_finite() || r0 < 0.0 || c0 < 0.0
            || r0 >= geometry.height as f64 || c0 >= geometry.width as f64
        {
            return Err(Error::OutOfBounds {
                row: r0 as i64,
                col: c0 as i64,
                height: geometry.height,
                width: geometry.width,
            });
        }
        let (r0, c0) = (r0 as i64, c0 as i64);
        for r in (r0 - reach).max(0)..=(r0 + reach).min(geometry.height as i64 - 1) {
            for c in (c0 - reach).max(0)..=(c0 + reach).min(geometry.width as i64 - 1) {
                let d2 = ((r - r0).pow(2) + (c - c0).pow(2)) as f64;
                if d2 > r2max {
                    continue;
                }
                let v = (-d2 / two_s2).exp();
                let i = h.idx(ch, r as usize, c as usize);
                if v > h.values[i] {
                    h.values[i] = v;
                }
            }
        }
    }
    Ok(h)
}

/// Local-maximum peak picking with greedy suppression.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeakParams {
    pub threshold: f64,
    pub nms_radius_px: f64,
}

impl Default for PeakParams {
    fn default() -> Self {
        Self { threshold: 0.3, nms_radius_px: 10.0 }
    }
}

fn is_strict_local_max(h: &Heatmap, ch: usize, r: usize, c: usize) -> bool {
    let v = h.get(ch, r, c);
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            if dr == 0 && dc == 0 {
                continue;
            }
            let (rr, cc) = (r as i64 + dr, c as i64 + dc);
            if rr < 0 || cc < 0 || rr >= h.height as i64 || cc >= h.width as i64 {
                continue;
            }
            if h.get(ch, rr as usize, cc as usize) >= v {
                return false;
            }
        }
    }
    true
}

/// Per channel: strict 3x3 maxima at or above the threshold, visited in
/// descending score (row-major on ties) and suppressed within the NMS radius
/// of an already accepted peak. Output is grouped by channel.
pub fn extract_peaks(h: &Heatmap, params: PeakParams) -> Vec<DiscCandidate> {
    let mut out = Vec::new();
    let r2 = params.nms_radius_px * params.nms_radius_px;
    for ch in 0..h.channels {
        let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
        for r in 0..h.height {
            for c in 0..h.width {
                let v = h.get(ch, r, c);
                if v >= params.threshold && is_strict_local_max(h, ch, r, c) {
                    peaks.push((v, r, c));
                }
            }
        }
        peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut kept: Vec<(usize, usize)> = Vec::new();
        for (v, r, c) in peaks {
            let close = kept.iter().any(|&(kr, kc)| {
                let dr = kr as f64 - r as f64;
                let dc = kc as f64 - c as f64;
                dr * dr + dc * dc <= r2
            });
            if close {
                continue;
            }
            kept.push((r, c));
            out.push(DiscCandidate {
                position: Point2D::new(c as f64 * h.pixel_size_mm, r as f64 * h.pixel_size_mm),
                score: v,
                channel: Some(ch),
            });
        }
    }
    out
}

/// Mean over all `V*H*W` entries of the squared difference.
pub fn mse_loss(pred: &Heatmap, target: &Heatmap) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(Error::dim("mse_loss", &pred.dims(), &target.dims()));
    }
    let n = pred.values.len() as f64;
    Ok(pred
        .values
        .iter()
        .zip(&target.values)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Gradient of [`mse_loss`] with respect to `pred`.
pub fn mse_loss_grad(pred: &Heatmap, target: &Heatmap) -> Result<Heatmap> {
    if !pred.same_shape(target) {
        return Err(Error::dim("mse_loss", &pred.dims(), &target.dims()));
    }
    let n = pred.values.len() as f64;
    let mut g = pred.clone();
    for (gv, t) in g.values.iter_mut().zip(&target.values) {
        *gv = 2.0 * (*gv - t) / n;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::numkit::{grad_check, ParamStore, ScalarFunction, Tensor};

    fn one_channel() -> LabelScheme {
        LabelScheme::numbered(1).unwrap()
    }

    fn single_disc() -> Heatmap {
        render_heatmap(
            &[(Point2D::new(50.0, 50.0), 0)],
            &one_channel(),
            Geometry::new(100, 100),
            Kernel::default(),
        )
        .unwrap()
    }

    #[test]
    fn kernel_centre_and_truncation() {
        let h = single_disc();
        assert_eq!(h.get(0, 50, 50), 1.0);
        assert_eq!(h.get(0, 50, 61), 0.0);
        // on the radius edge: exp(-100 / (2 * 100/9)) = exp(-4.5)
        assert!((h.get(0, 50, 60) - (-4.5f64).exp()).abs() < 1e-12);
        assert!(h.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn empty_positions_render_zeros() {
        let h = render_heatmap(&[], &LabelScheme::default(), Geometry::new(20, 30), Kernel::default()).unwrap();
        assert_eq!(h.channels(), 11);
        assert!(h.values().iter().all(|&v| v == 0.0));
        assert!(extract_peaks(&h, PeakParams::default()).is_empty());
    }

    #[test]
    fn out_of_grid_position_is_rejected() {
        let err = render_heatmap(
            &[(Point2D::new(5.0, 120.0), 0)],
            &one_channel(),
            Geometry::new(100, 100),
            Kernel::default(),
        );
        assert!(matches!(err, Err(Error::OutOfBounds { row: 120, .. })));
        let err = render_heatmap(&[(Point2D::new(5.0, 5.0), 3)], &one_channel(), Geometry::new(10, 10), Kernel::default());
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn overlapping_kernels_take_maximum() {
        let h = render_heatmap(
            &[(Point2D::new(20.0, 20.0), 0), (Point2D::new(24.0, 20.0), 0)],
            &one_channel(),
            Geometry::new(40, 40),
            Kernel::default(),
        )
        .unwrap();
        assert_eq!(h.get(0, 20, 20), 1.0);
        assert_eq!(h.get(0, 20, 24), 1.0);
        assert!(h.values().iter().all(|v| *v <= 1.0));
    }

    #[test]
    fn weaker_nearby_peak_is_suppressed() {
        let mut h = Heatmap::zeros(1, 30, 30, 1.0).unwrap();
        h.set(0, 10, 10, 0.9);
        h.set(0, 10, 15, 0.8);
        h.set(0, 10, 12, 0.1);
        let peaks = extract_peaks(&h, PeakParams::default());
        assert_eq!(peaks.len(), 1);
        assert_eq!(peaks[0].score, 0.9);
        assert_eq!(peaks[0].position, Point2D::new(10.0, 10.0));
    }

    #[test]
    fn round_trip_recovers_centres() {
        let scheme = LabelScheme::default();
        let pts: Vec<(Point2D, usize)> = (0..11)
            .map(|i| (Point2D::new(40.0 + (i % 2) as f64 * 30.0, 20.0 + 30.0 * i as f64), i))
            .collect();
        let h = render_heatmap(&pts, &scheme, Geometry::new(360, 120), Kernel::default()).unwrap();
        let peaks = extract_peaks(&h, PeakParams::default());
        assert_eq!(peaks.len(), 11);
        for (p, (want, ch)) in peaks.iter().zip(&pts) {
            assert_eq!(p.channel, Some(*ch));
            assert!(p.position.distance(want) <= 1.0);
        }
    }

    #[test]
    fn mse_values() {
        let t = single_disc();
        assert_eq!(mse_loss(&t, &t).unwrap(), 0.0);
        let mut p = t.clone();
        p.values_mut().iter_mut().for_each(|v| *v += 0.5);
        assert!((mse_loss(&p, &t).unwrap() - 0.25).abs() < 1e-12);
        let other = Heatmap::zeros(2, 100, 100, 1.0).unwrap();
        assert!(matches!(mse_loss(&p, &other), Err(Error::Dimension { .. })));
    }

    struct MseFn {
        target: Heatmap,
    }

    impl MseFn {
        fn pred(&self, ps: &ParamStore) -> Result<Heatmap> {
            let mut h = self.target.clone();
            h.values_mut().copy_from_slice(ps.value("pred")?.data());
            Ok(h)
        }
    }

    impl ScalarFunction for MseFn {
        fn value(&mut self, ps: &ParamStore) -> Result<f64> {
            mse_loss(&self.pred(ps)?, &self.target)
        }

        fn value_and_grad(&mut self, ps: &ParamStore) -> Result<(f64, BTreeMap<String, Tensor>)> {
            let pred = self.pred(ps)?;
            let g = mse_loss_grad(&pred, &self.target)?;
            let g = Tensor::vector(g.values().to_vec())?;
            Ok((mse_loss(&pred, &self.target)?, BTreeMap::from([("pred".to_string(), g)])))
        }
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let target = render_heatmap(&[(Point2D::new(4.0, 3.0), 1)], &LabelScheme::numbered(2).unwrap(), Geometry::new(8, 9), Kernel { radius_px: 3.0, sigma_px: 1.0 }).unwrap();
        let mut ps = ParamStore::new();
        let pred: Vec<f64> = (0..target.values().len()).map(|i| ((i * 7) % 13) as f64 / 13.0).collect();
        ps.insert("pred", Tensor::vector(pred).unwrap()).unwrap();
        let report = grad_check(&mut MseFn { target }, &mut ps, 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn json_round_trip() {
        let h = render_heatmap(&[(Point2D::new(2.0, 1.0), 0)], &one_channel(), Geometry::new(4, 5), Kernel { radius_px: 2.0, sigma_px: 1.0 }).unwrap();
        let back = Heatmap::from_json(&h.to_json().unwrap()).unwrap();
        assert_eq!(back, h);
        assert!(Heatmap::from_json(r#"{"channels":1,"height":2,"width":2,"pixel_size_mm":1.0,"values":[[[0.0,1.0]]]}"#).is_err());
    }
}
