//! Shape-attention recalibration of a feature pyramid.
//!
//! For every pyramid level `P_j` (channels `C_j`, size `H_j x W_j`):
//!
//! ```text
//! w_f  = sigmoid(W2_j relu(W1_j GAP(P_j)))         per channel
//! w_sp = sigmoid(W4 relu(W3 GAP(sf_j)))            scalar
//! P~_j = w_sp * (w_f ⊙ P_j) + S_j(sf_j)
//! ```
//!
//! where `sf_j` is the image-gradient shape feature `(gx, gy)` area-averaged
//! to the level's size and `S_j` a 1x1 projection to `C_j` channels. The
//! levels are then fused:
//!
//! ```text
//! f' = sigmoid(sum_j w_prm[j] * up(Q_j P~_j))
//! ```
//!
//! with `Q_j` a 1x1 projection to a common channel count and `up` nearest
//! neighbour upsampling to the finest level.
//!
//! Feature maps are stored channel-major (`C x H x W`); on the tape they are
//! pixel-major `H*W x C` so that 1x1 projections are plain affine layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numkit::{dense, init_dense, Checkpoint, Graph, ParamStore, Tensor, Var};

/// A single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim("grid", &[height, width], &[data.len()]));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..height).flat_map(|r| (0..width).map(move |c| (r, c))).map(|(r, c)| f(r, c)).collect();
        Self { height, width, data }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }
}

/// Image gradients and their normalised magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeFeature {
    pub gx: Grid,
    pub gy: Grid,
    pub magnitude: Grid,
}

impl ShapeFeature {
    pub fn height(&self) -> usize {
        self.gx.height
    }

    pub fn width(&self) -> usize {
        self.gx.width
    }

    /// Pixel-major `H*W x 2` tensor with columns `(gx, gy)`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.gx.data.iter().zip(&self.gy.data).flat_map(|(&x, &y)| [x, y]).collect();
        Tensor::matrix(self.gx.data.len(), 2, data).expect("non-empty grid")
    }
}

fn derivative(len: usize, at: usize, sample: impl Fn(usize) -> f64) -> f64 {
    if at == 0 {
        sample(1) - sample(0)
    } else if at == len - 1 {
        sample(at) - sample(at - 1)
    } else {
        (sample(at + 1) - sample(at - 1)) / 2.0
    }
}

/// Central differences inside, one-sided differences on the border.
pub fn compute_shape_feature(image: &Grid) -> Result<ShapeFeature> {
    let (h, w) = (image.height, image.width);
    if h < 2 || w < 2 {
        return Err(Error::Config(format!("shape feature needs at least 2x2 pixels, got {h}x{w}")));
    }
    let gx = Grid::from_fn(h, w, |r, c| derivative(w, c, |cc| image.get(r, cc)));
    let gy = Grid::from_fn(h, w, |r, c| derivative(h, r, |rr| image.get(rr, c)));
    let mut mag: Vec<f64> = gx.data.iter().zip(&gy.data).map(|(x, y)| x.hypot(*y)).collect();
    let max = mag.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        mag.iter_mut().for_each(|m| *m /= max);
    }
    Ok(ShapeFeature { gx, gy, magnitude: Grid { height: h, width: w, data: mag } })
}

/// Channel-major `C x H x W` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(Error::dim("feature map", &[channels, height, width], &[data.len()]));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[(c * self.height + r) * self.width + col]
    }

    /// Pixel-major `H*W x C` tensor.
    pub fn to_pixel_major(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut out = vec![0.0; hw * self.channels];
        for c in 0..self.channels {
            for p in 0..hw {
                out[p * self.channels + c] = self.data[c * hw + p];
            }
        }
        Tensor::matrix(hw, self.channels, out).expect("non-empty map")
    }

    pub fn from_pixel_major(t: &Tensor, height: usize, width: usize) -> Result<Self> {
        let (hw, channels) = t.dims2();
        if hw != height * width {
            return Err(Error::dim("from_pixel_major", t.shape(), &[height, width]));
        }
        let mut data = vec![0.0; hw * channels];
        for p in 0..hw {
            for (c, v) in t.row(p).iter().enumerate() {
                data[c * hw + p] = *v;
            }
        }
        Self::new(channels, height, width, data)
    }
}

/// Multi-level features, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureMap>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::EmptySet("feature pyramid"));
        }
        for pair in levels.windows(2) {
            if pair[1].height > pair[0].height || pair[1].width > pair[0].width {
                return Err(Error::dim(
                    "feature pyramid levels must not grow",
                    &pair[0].shape(),
                    &pair[1].shape(),
                ));
            }
        }
        if let Some(bad) = levels.iter().find(|l| l.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("pyramid level {:?}", bad.shape())));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    /// `C_j` per level, finest first.
    pub level_channels: Vec<usize>,
    /// Channels of the fused output.
    pub out_channels: usize,
    /// Bottleneck ratio `r` of the channel gate.
    pub reduction: usize,
    /// Hidden width `d` of the shape gate.
    pub shape_hidden: usize,
}

impl AttentionConfig {
    pub fn new(level_channels: Vec<usize>, out_channels: usize) -> Self {
        Self { level_channels, out_channels, reduction: 2, shape_hidden: 4 }
    }

    fn validate(&self) -> Result<()> {
        if self.level_channels.is_empty() {
            return Err(Error::EmptySet("attention levels"));
        }
        if self.reduction == 0 || self.out_channels == 0 || self.shape_hidden == 0 {
            return Err(Error::Config("reduction, out_channels and shape_hidden must be positive".into()));
        }
        for &c in &self.level_channels {
            if c == 0 || c % self.reduction != 0 {
                return Err(Error::Config(format!(
                    "reduction {} must divide channel count {c}",
                    self.reduction
                )));
            }
        }
        Ok(())
    }
}

/// Parameter names of level `j`.
fn level_prefix(j: usize, part: &str) -> String {
    format!("level{j}.{part}")
}

const SHAPE_FC1: &str = "shape.fc1";
const SHAPE_FC2: &str = "shape.fc2";
const W_PRM: &str = "aggregate.w_prm";

/// Parameters of the whole block plus their configuration.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub config: AttentionConfig,
    pub params: ParamStore,
}

/// Tape handles of one recalibrated level.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    pub output: Var,
    pub channel_gate: Var,
    pub shape_gate: Var,
}

/// Tape handles of a full block evaluation.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub levels: Vec<LevelVars>,
    pub fused: Var,
}

/// Gates and output of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct Recalibrated {
    pub map: FeatureMap,
    pub channel_gates: Vec<f64>,
    pub shape_gate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockOutput {
    pub levels: Vec<Recalibrated>,
    pub fused: FeatureMap,
}

impl AttentionBlock {
    /// Glorot-initialised weights, zero biases, `w_prm = 1/L`.
    pub fn new(config: AttentionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.shape_hidden;
        init_dense(&mut params, SHAPE_FC1, 2, d, &mut rng)?;
        init_dense(&mut params, SHAPE_FC2, d, 1, &mut rng)?;
        for (j, &c) in config.level_channels.iter().enumerate() {
            let hidden = c / config.reduction;
            init_dense(&mut params, &level_prefix(j, "channel.fc1"), c, hidden, &mut rng)?;
            init_dense(&mut params, &level_prefix(j, "channel.fc2"), hidden, c, &mut rng)?;
            init_dense(&mut params, &level_prefix(j, "sf_proj"), 2, c, &mut rng)?;
            init_dense(&mut params, &level_prefix(j, "proj"), c, config.out_channels, &mut rng)?;
        }
        let l = config.level_channels.len();
        params.insert(W_PRM, Tensor::filled(&[l], 1.0 / l as f64))?;
        Ok(Self { config, params })
    }

    pub fn levels(&self) -> usize {
        self.config.level_channels.len()
    }

    /// Names of the gate weights `W1..W4` (and their biases).
    pub fn gate_param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for p in [SHAPE_FC1, SHAPE_FC2] {
            names.push(format!("{p}.w"));
            names.push(format!("{p}.b"));
        }
        for j in 0..self.levels() {
            for part in ["channel.fc1", "channel.fc2"] {
                names.push(format!("{}.w", level_prefix(j, part)));
                names.push(format!("{}.b", level_prefix(j, part)));
            }
        }
        names
    }

    /// Sets every gate weight and bias to zero, leaving `S_j`, `Q_j`, `w_prm`.
    pub fn zero_gates(&mut self) -> Result<()> {
        for name in self.gate_param_names() {
            self.params.value_mut(&name)?.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(())
    }

    fn check_level(&self, j: usize, p: &FeatureMap) -> Result<()> {
        let want = *self
            .config
            .level_channels
            .get(j)
            .ok_or_else(|| Error::dim("level index", &[self.levels()], &[j]))?;
        if p.channels != want {
            return Err(Error::dim("recalibrate_level channels", &[want], &[p.channels]));
        }
        Ok(())
    }

    /// Records recalibration of level `j` on the tape.
    ///
    /// `level` is pixel-major `h*w x C_j`; `sf` is pixel-major `(gx, gy)` at
    /// `sf_dims`.
    pub fn recalibrate_level_graph(
        g: &mut Graph,
        params: &ParamStore,
        j: usize,
        level: Var,
        dims: (usize, usize),
        sf: Var,
        sf_dims: (usize, usize),
    ) -> Result<LevelVars> {
        let gap = g.mean_rows(level);
        let h = dense(g, params, &level_prefix(j, "channel.fc1"), gap)?;
        let h = g.relu(h);
        let z = dense(g, params, &level_prefix(j, "channel.fc2"), h)?;
        let channel_gate = g.sigmoid(z);

        let sf_j = g.area_pool(sf, sf_dims, dims)?;
        let sf_gap = g.mean_rows(sf);
        let s = dense(g, params, SHAPE_FC1, sf_gap)?;
        let s = g.relu(s);
        let s = dense(g, params, SHAPE_FC2, s)?;
        let shape_gate = g.sigmoid(s);

        let scaled = g.mul(level, channel_gate)?;
        let scaled = g.mul(scaled, shape_gate)?;
        let residual = dense(g, params, &level_prefix(j, "sf_proj"), sf_j)?;
        let output = g.add(scaled, residual)?;
        Ok(LevelVars { output, channel_gate, shape_gate })
    }

    /// Records the fusion of recalibrated levels; `levels[0]` is the finest.
    pub fn aggregate_graph(g: &mut Graph, params: &ParamStore, levels: &[(Var, (usize, usize))]) -> Result<Var> {
        let Some(&(_, finest)) = levels.first() else {
            return Err(Error::EmptySet("aggregate_pyramid"));
        };
        let w_prm = g.param(params, W_PRM)?;
        let mut total: Option<Var> = None;
        for (j, &(v, dims)) in levels.iter().enumerate() {
            let projected = dense(g, params, &level_prefix(j, "proj"), v)?;
            let aligned = g.upsample_nearest(projected, dims, finest)?;
            let weight = g.pick(w_prm, j)?;
            let term = g.mul(aligned, weight)?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
        Ok(g.sigmoid(total.expect("at least one level")))
    }

    /// Records the whole block: every level recalibrated, then fused.
    pub fn forward_graph(
        g: &mut Graph,
        params: &ParamStore,
        levels: &[(Var, (usize, usize))],
        sf: Var,
        sf_dims: (usize, usize),
    ) -> Result<BlockVars> {
        let mut out = Vec::with_capacity(levels.len());
        for (j, &(v, dims)) in levels.iter().enumerate() {
            out.push(Self::recalibrate_level_graph(g, params, j, v, dims, sf, sf_dims)?);
        }
        let recal: Vec<(Var, (usize, usize))> =
            out.iter().zip(levels).map(|(lv, &(_, dims))| (lv.output, dims)).collect();
        let fused = Self::aggregate_graph(g, params, &recal)?;
        Ok(BlockVars { levels: out, fused })
    }

    fn read_level(g: &Graph, vars: LevelVars, dims: (usize, usize)) -> Result<Recalibrated> {
        Ok(Recalibrated {
            map: FeatureMap::from_pixel_major(g.value(vars.output), dims.0, dims.1)?,
            channel_gates: g.value(vars.channel_gate).data().to_vec(),
            shape_gate: g.value(vars.shape_gate).item(),
        })
    }

    /// `P~_j` together with the gate values that produced it.
    pub fn recalibrate_level(&self, level: &FeatureMap, sf: &ShapeFeature, j: usize) -> Result<Recalibrated> {
        self.check_level(j, level)?;
        let mut g = Graph::new();
        let dims = (level.height, level.width);
        let v = g.input(level.to_pixel_major());
        let s = g.input(sf.to_tensor());
        let vars = Self::recalibrate_level_graph(&mut g, &self.params, j, v, dims, s, (sf.height(), sf.width()))?;
        Self::read_level(&g, vars, dims)
    }

    /// `f'` from already recalibrated levels (finest first).
    pub fn aggregate_pyramid(&self, levels: &[FeatureMap]) -> Result<FeatureMap> {
        if levels.is_empty() {
            return Err(Error::EmptySet("aggregate_pyramid"));
        }
        if levels.len() != self.levels() {
            return Err(Error::dim("aggregate_pyramid levels", &[self.levels()], &[levels.len()]));
        }
        let mut g = Graph::new();
        let vars: Vec<(Var, (usize, usize))> = levels
            .iter()
            .enumerate()
            .map(|(j, l)| {
                self.check_level(j, l)?;
                Ok((g.input(l.to_pixel_major()), (l.height, l.width)))
            })
            .collect::<Result<_>>()?;
        let fused = Self::aggregate_graph(&mut g, &self.params, &vars)?;
        FeatureMap::from_pixel_major(g.value(fused), levels[0].height, levels[0].width)
    }

    pub fn forward(&self, pyramid: &FeaturePyramid, sf: &ShapeFeature) -> Result<BlockOutput> {
        if pyramid.len() != self.levels() {
            return Err(Error::dim("attention block levels", &[self.levels()], &[pyramid.len()]));
        }
        let mut g = Graph::new();
        let mut vars = Vec::new();
        for (j, l) in pyramid.levels().iter().enumerate() {
            self.check_level(j, l)?;
            vars.push((g.input(l.to_pixel_major()), (l.height, l.width)));
        }
        let s = g.input(sf.to_tensor());
        let block = Self::forward_graph(&mut g, &self.params, &vars, s, (sf.height(), sf.width()))?;
        let levels = block
            .levels
            .iter()
            .zip(&vars)
            .map(|(lv, &(_, dims))| Self::read_level(&g, *lv, dims))
            .collect::<Result<_>>()?;
        let finest = vars[0].1;
        Ok(BlockOutput {
            levels,
            fused: FeatureMap::from_pixel_major(g.value(block.fused), finest.0, finest.1)?,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let arch = serde_json::json!({ "kind": "shape_attention", "config": self.config });
        Ok(Checkpoint::from_store(arch, &self.params))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: AttentionConfig = serde_json::from_value(ck.architecture["config"].clone())?;
        config.validate()?;
        let params = ck.to_store()?;
        let reference = Self::new(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            if params.value(name)?.shape() != t.shape() {
                return Err(Error::dim("checkpoint parameter", t.shape(), params.value(name)?.shape()));
            }
        }
        Ok(Self { config, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{affine, ops::area_pool};

    fn ramp(h: usize, w: usize, s: f64) -> Grid {
        Grid::from_fn(h, w, |_, c| s * c as f64)
    }

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let data = (0..c * h * w).map(|i| (((i as u64 + seed) * 2654435761) % 1000) as f64 / 500.0 - 1.0).collect();
        FeatureMap::new(c, h, w, data).unwrap()
    }

    #[test]
    fn constant_image_has_no_shape() {
        let sf = compute_shape_feature(&Grid::from_fn(5, 6, |_, _| 3.0)).unwrap();
        for g in [&sf.gx, &sf.gy, &sf.magnitude] {
            assert!(g.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn vertical_step_edge_marks_adjacent_columns() {
        let img = Grid::from_fn(6, 8, |_, c| if c >= 4 { 1.0 } else { 0.0 });
        let sf = compute_shape_feature(&img).unwrap();
        for r in 0..6 {
            for c in 0..8 {
                let m = sf.magnitude.get(r, c);
                if c == 3 || c == 4 {
                    assert_eq!(m, 1.0);
                } else {
                    assert_eq!(m, 0.0, "({r},{c})");
                }
            }
        }
    }

    #[test]
    fn ramp_gradient_is_exact() {
        let sf = compute_shape_feature(&ramp(4, 7, 0.75)).unwrap();
        for r in 0..4 {
            for c in 1..6 {
                assert!((sf.gx.get(r, c) - 0.75).abs() < 1e-12);
                assert_eq!(sf.gy.get(r, c), 0.0);
            }
        }
    }

    #[test]
    fn degenerate_image_is_rejected() {
        assert!(compute_shape_feature(&Grid::from_fn(1, 5, |_, _| 0.0)).is_err());
    }

    #[test]
    fn zero_gates_give_quarter_plus_shape_residual() {
        let mut block = AttentionBlock::new(AttentionConfig::new(vec![4, 6], 3), 7).unwrap();
        block.zero_gates().unwrap();
        let sf = compute_shape_feature(&Grid::from_fn(8, 8, |r, c| ((r * c) as f64).sin())).unwrap();
        let level = random_map(6, 4, 4, 3);
        let out = block.recalibrate_level(&level, &sf, 1).unwrap();
        assert!(out.channel_gates.iter().all(|&g| g == 0.5));
        assert_eq!(out.shape_gate, 0.5);
        let sf_j = area_pool(&sf.to_tensor(), (8, 8), (4, 4)).unwrap();
        let residual = affine(
            &sf_j,
            block.params.value("level1.sf_proj.w").unwrap(),
            block.params.value("level1.sf_proj.b").unwrap(),
        )
        .unwrap();
        let residual = FeatureMap::from_pixel_major(&residual, 4, 4).unwrap();
        for (i, v) in out.map.data.iter().enumerate() {
            let want = 0.25 * level.data[i] + residual.data[i];
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let block = AttentionBlock::new(AttentionConfig::new(vec![4], 2), 0).unwrap();
        let sf = compute_shape_feature(&ramp(4, 4, 1.0)).unwrap();
        let err = block.recalibrate_level(&random_map(3, 4, 4, 0), &sf, 0);
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn single_level_zero_weight_is_half() {
        let mut block = AttentionBlock::new(AttentionConfig::new(vec![2], 3), 1).unwrap();
        block.params.value_mut(W_PRM).unwrap().data_mut()[0] = 0.0;
        let fused = block.aggregate_pyramid(&[random_map(2, 3, 5, 9)]).unwrap();
        assert_eq!(fused.shape(), [3, 3, 5]);
        assert!(fused.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn empty_aggregation_is_error() {
        let block = AttentionBlock::new(AttentionConfig::new(vec![2], 3), 1).unwrap();
        assert!(matches!(block.aggregate_pyramid(&[]), Err(Error::EmptySet(_))));
        assert!(FeaturePyramid::new(vec![]).is_err());
    }

    #[test]
    fn pyramid_rejects_growing_levels() {
        let err = FeaturePyramid::new(vec![random_map(2, 4, 4, 0), random_map(2, 8, 8, 0)]);
        assert!(err.is_err());
    }

    #[test]
    fn reduction_must_divide_channels() {
        let mut cfg = AttentionConfig::new(vec![3], 2);
        cfg.reduction = 2;
        assert!(AttentionBlock::new(cfg, 0).is_err());
    }

    fn weighted_sum(g: &mut Graph, v: Var) -> Var {
        let n = g.value(v).len();
        let shape = g.value(v).shape().to_vec();
        let coeffs = (0..n).map(|i| 0.5 + (i * 37 % 11) as f64 / 10.0).collect();
        let c = g.input(Tensor::new(shape, coeffs).unwrap());
        let m = g.mul(v, c).unwrap();
        g.sum(m)
    }

    #[test]
    fn full_block_passes_grad_check() {
        let block = AttentionBlock::new(AttentionConfig::new(vec![4, 2], 3), 11).unwrap();
        let mut store = block.params.clone();
        let sf = compute_shape_feature(&Grid::from_fn(6, 6, |r, c| (r as f64 * 0.7).sin() + 0.3 * c as f64)).unwrap();
        store.insert("input.sf", sf.to_tensor()).unwrap();
        store.insert("input.p0", random_map(4, 6, 6, 1).to_pixel_major()).unwrap();
        store.insert("input.p1", random_map(2, 3, 3, 2).to_pixel_major()).unwrap();
        let mut f = crate::numkit::GraphFn(|g: &mut Graph, p: &ParamStore| {
            let sf = g.param(p, "input.sf")?;
            let p0 = g.param(p, "input.p0")?;
            let p1 = g.param(p, "input.p1")?;
            let out = AttentionBlock::forward_graph(g, p, &[(p0, (6, 6)), (p1, (3, 3))], sf, (6, 6))?;
            let a = weighted_sum(g, out.fused);
            let b = weighted_sum(g, out.levels[0].output);
            let c = weighted_sum(g, out.levels[1].output);
            let ab = g.add(a, b)?;
            g.add(ab, c)
        });
        let report = crate::numkit::grad_check(&mut f, &mut store, 1e-4).unwrap();
        assert!(report.passed(), "{:?}", report.worst());
        assert!(report.params.iter().any(|c| c.name == W_PRM));
        assert!(report.params.iter().any(|c| c.name == "input.sf"));
    }

    #[test]
    fn saturated_gates_pass_input_through() {
        let mut block = AttentionBlock::new(AttentionConfig::new(vec![4], 2), 3).unwrap();
        block.zero_gates().unwrap();
        for name in ["level0.channel.fc2.b", "shape.fc2.b"] {
            block.params.value_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 60.0);
        }
        let sf = compute_shape_feature(&ramp(5, 5, 0.4)).unwrap();
        let level = random_map(4, 5, 5, 4);
        let out = block.recalibrate_level(&level, &sf, 0).unwrap();
        let residual = affine(
            &sf.to_tensor(),
            block.params.value("level0.sf_proj.w").unwrap(),
            block.params.value("level0.sf_proj.b").unwrap(),
        )
        .unwrap();
        let residual = FeatureMap::from_pixel_major(&residual, 5, 5).unwrap();
        for (i, v) in out.map.data.iter().enumerate() {
            assert!((v - level.data[i] - residual.data[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn swapping_levels_keeps_fusion() {
        let block = AttentionBlock::new(AttentionConfig::new(vec![2, 2], 3), 8).unwrap();
        let a = random_map(2, 4, 4, 1);
        let b = random_map(2, 4, 4, 2);
        let mut swapped = block.clone();
        for part in ["proj.w", "proj.b"] {
            let l0 = block.params.value(&format!("level0.{part}")).unwrap().clone();
            let l1 = block.params.value(&format!("level1.{part}")).unwrap().clone();
            *swapped.params.value_mut(&format!("level0.{part}")).unwrap() = l1;
            *swapped.params.value_mut(&format!("level1.{part}")).unwrap() = l0;
        }
        swapped.params.value_mut(W_PRM).unwrap().data_mut().copy_from_slice(&[0.8, -0.3]);
        let mut original = block.clone();
        original.params.value_mut(W_PRM).unwrap().data_mut().copy_from_slice(&[-0.3, 0.8]);
        let f1 = original.aggregate_pyramid(&[a.clone(), b.clone()]).unwrap();
        let f2 = swapped.aggregate_pyramid(&[b, a]).unwrap();
        for (x, y) in f1.data.iter().zip(&f2.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_keeps_shapes_and_bounds() {
        let block = AttentionBlock::new(AttentionConfig::new(vec![4, 4, 2], 3), 2).unwrap();
        let pyr = FeaturePyramid::new(vec![random_map(4, 8, 8, 0), random_map(4, 4, 4, 1), random_map(2, 2, 2, 2)])
            .unwrap();
        let sf = compute_shape_feature(&Grid::from_fn(16, 16, |r, c| ((r + 2 * c) % 5) as f64)).unwrap();
        let out = block.forward(&pyr, &sf).unwrap();
        for (lv, p) in out.levels.iter().zip(pyr.levels()) {
            assert_eq!(lv.map.shape(), p.shape());
            assert!(lv.channel_gates.iter().all(|&g| g > 0.0 && g < 1.0));
            assert!(lv.shape_gate > 0.0 && lv.shape_gate < 1.0);
        }
        assert_eq!(out.fused.shape(), [3, 8, 8]);
        assert!(out.fused.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let block = AttentionBlock::new(AttentionConfig::new(vec![4, 2], 3), 5).unwrap();
        let json = block.to_checkpoint().unwrap().to_json().unwrap();
        let back = AttentionBlock::from_checkpoint(&Checkpoint::from_json(&json).unwrap()).unwrap();
        assert_eq!(back.config, block.config);
        for (name, t) in block.params.iter() {
            assert!(back.params.value(name).unwrap().max_abs_diff(t) < 1e-6);
        }
    }
}
