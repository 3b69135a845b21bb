use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::candidates::{normalize_points, CandidateSet, NormalizedSet};
use crate::error::{Error, Result};
use crate::numkit::{dense, init_dense, Checkpoint, Graph, ParamStore, Tensor, Var};

/// Layer widths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Shared per-point layers of the transform predictor, before pooling.
    pub transform_shared: Vec<usize>,
    /// Hidden layer after pooling; the output is always 4 (a 2x2 matrix).
    pub transform_head: usize,
    /// Shared encoder widths; the last one is the global signature width.
    pub encoder: Vec<usize>,
    pub relation_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            transform_shared: vec![16, 32],
            transform_head: 16,
            encoder: vec![32, 64, 128],
            relation_hidden: 64,
        }
    }
}

impl Architecture {
    /// Width of a per-point feature row (local then global).
    pub fn feature_width(&self) -> usize {
        2 * self.encoder.last().copied().unwrap_or(0)
    }

    fn validate(&self) -> Result<()> {
        let widths = self.transform_shared.iter().chain(&self.encoder).chain([&self.transform_head, &self.relation_hidden]);
        if self.transform_shared.is_empty() || self.encoder.is_empty() || widths.clone().any(|&w| w == 0) {
            return Err(Error::Config("architecture widths must be non-empty and positive".into()));
        }
        Ok(())
    }
}

pub const CLASSES: usize = 2;

/// The refinement network and its frozen normalisation scale.
#[derive(Debug)]
pub struct LookOnceModel {
    pub arch: Architecture,
    pub params: ParamStore,
    /// Coordinates are divided by this after centring.
    pub scale: f64,
    passes: AtomicU64,
}

impl Clone for LookOnceModel {
    fn clone(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            params: self.params.clone(),
            scale: self.scale,
            passes: AtomicU64::new(0),
        }
    }
}

/// Every intermediate of one forward evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub transform: Var,
    pub aligned: Var,
    pub features: Var,
    pub gates: Var,
    pub scaled: Var,
    pub logits: Var,
    pub probs: Var,
}

fn layer(prefix: &str, i: usize) -> String {
    format!("{prefix}.fc{}", i + 1)
}

fn shared_mlp(g: &mut Graph, params: &ParamStore, prefix: &str, depth: usize, mut x: Var) -> Result<Var> {
    for i in 0..depth {
        let h = dense(g, params, &layer(prefix, i), x)?;
        x = g.relu(h);
    }
    Ok(x)
}

impl LookOnceModel {
    /// Glorot weights, zero biases; the transform head outputs the identity.
    pub fn new(arch: Architecture, scale: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!("normalisation scale must be positive, got {scale}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut fan_in = 2;
        for (i, &w) in arch.transform_shared.iter().enumerate() {
            init_dense(&mut params, &layer("tnet", i), fan_in, w, &mut rng)?;
            fan_in = w;
        }
        let k = arch.transform_shared.len();
        init_dense(&mut params, &layer("tnet", k), fan_in, arch.transform_head, &mut rng)?;
        params.insert(format!("{}.w", layer("tnet", k + 1)), Tensor::zeros(&[arch.transform_head, 4]))?;
        params.insert(format!("{}.b", layer("tnet", k + 1)), Tensor::vector(vec![1.0, 0.0, 0.0, 1.0])?)?;

        let mut fan_in = 2;
        for (i, &w) in arch.encoder.iter().enumerate() {
            init_dense(&mut params, &layer("enc", i), fan_in, w, &mut rng)?;
            fan_in = w;
        }
        let f = arch.feature_width();
        init_dense(&mut params, "rel.fc1", f, arch.relation_hidden, &mut rng)?;
        init_dense(&mut params, "rel.fc2", arch.relation_hidden, f, &mut rng)?;
        init_dense(&mut params, "cls", f, CLASSES, &mut rng)?;
        Ok(Self { arch, params, scale, passes: AtomicU64::new(0) })
    }

    /// Number of full network evaluations made through [`Self::predict`].
    pub fn forward_passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn normalize_set(&self, cs: &CandidateSet) -> Result<NormalizedSet> {
        normalize_points(&cs.positions(), self.scale)
    }

    /// `M x 2` network input for a set.
    pub fn input_tensor(&self, cs: &CandidateSet) -> Result<Tensor> {
        let n = self.normalize_set(cs)?;
        Tensor::matrix(n.points.len(), 2, n.points.iter().flat_map(|p| [p.x, p.y]).collect())
    }

    /// Predicts `T` from the points and returns `(points . T, T)`.
    pub fn transform_graph(g: &mut Graph, params: &ParamStore, arch: &Architecture, x: Var) -> Result<(Var, Var)> {
        let k = arch.transform_shared.len();
        let h = shared_mlp(g, params, "tnet", k, x)?;
        let pooled = g.max_pool_set(h)?;
        let h = dense(g, params, &layer("tnet", k), pooled)?;
        let h = g.relu(h);
        let t = dense(g, params, &layer("tnet", k + 1), h)?;
        let t = g.reshape(t, &[2, 2])?;
        let aligned = g.matmul(x, t)?;
        Ok((aligned, t))
    }

    /// Local features concatenated with the max-pooled global signature.
    pub fn encode_graph(g: &mut Graph, params: &ParamStore, arch: &Architecture, aligned: Var) -> Result<Var> {
        let local = shared_mlp(g, params, "enc", arch.encoder.len(), aligned)?;
        let global = g.max_pool_set(local)?;
        g.concat_cols(local, global)
    }

    /// Returns `(gates, gates ⊙ features)`.
    pub fn attention_graph(g: &mut Graph, params: &ParamStore, features: Var) -> Result<(Var, Var)> {
        let h = dense(g, params, "rel.fc1", features)?;
        let h = g.relu(h);
        let z = dense(g, params, "rel.fc2", h)?;
        let gates = g.sigmoid(z);
        let scaled = g.mul(features, gates)?;
        Ok((gates, scaled))
    }

    pub fn classify_graph(g: &mut Graph, params: &ParamStore, scaled: Var) -> Result<Var> {
        dense(g, params, "cls", scaled)
    }

    /// The whole network on an already normalised `M x 2` input.
    pub fn forward_graph(g: &mut Graph, params: &ParamStore, arch: &Architecture, x: Var) -> Result<ForwardVars> {
        let (aligned, transform) = Self::transform_graph(g, params, arch, x)?;
        let features = Self::encode_graph(g, params, arch, aligned)?;
        let (gates, scaled) = Self::attention_graph(g, params, features)?;
        let logits = Self::classify_graph(g, params, scaled)?;
        let probs = g.softmax_rows(logits);
        Ok(ForwardVars { transform, aligned, features, gates, scaled, logits, probs })
    }

    pub fn input_transform(&self, points: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let x = g.input(points.clone());
        let (aligned, t) = Self::transform_graph(&mut g, &self.params, &self.arch, x)?;
        Ok((g.value(aligned).clone(), g.value(t).clone()))
    }

    pub fn encode(&self, aligned: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(aligned.clone());
        let f = Self::encode_graph(&mut g, &self.params, &self.arch, x)?;
        Ok(g.value(f).clone())
    }

    /// Returns `(scaled features, gates)`.
    pub fn geometric_attention(&self, features: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let x = g.input(features.clone());
        let (gates, scaled) = Self::attention_graph(&mut g, &self.params, x)?;
        Ok((g.value(scaled).clone(), g.value(gates).clone()))
    }

    /// Row-softmax class probabilities; column 1 is keep.
    pub fn classify(&self, scaled: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(scaled.clone());
        let logits = Self::classify_graph(&mut g, &self.params, x)?;
        let p = g.softmax_rows(logits);
        Ok(g.value(p).clone())
    }

    /// Keep-probability of every candidate from one forward pass.
    pub fn predict(&self, cs: &CandidateSet) -> Result<Vec<f64>> {
        let x = self.input_tensor(cs)?;
        let mut g = Graph::new();
        let x = g.input(x);
        let out = Self::forward_graph(&mut g, &self.params, &self.arch, x)?;
        self.passes.fetch_add(1, Ordering::Relaxed);
        let probs = g.value(out.probs);
        Ok((0..probs.rows()).map(|i| probs.get(i, 1)).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let arch = serde_json::json!({
            "kind": "lookonce",
            "layers": self.arch,
            "normalization": { "scale": self.scale },
        });
        Checkpoint::from_store(arch, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.architecture["kind"] != "lookonce" {
            return Err(Error::Config("checkpoint is not a look-once model".into()));
        }
        let arch: Architecture = serde_json::from_value(ck.architecture["layers"].clone())?;
        let scale = ck.architecture["normalization"]["scale"]
            .as_f64()
            .ok_or_else(|| Error::Config("checkpoint lacks normalization.scale".into()))?;
        let reference = Self::new(arch, scale, 0)?;
        let params = ck.to_store()?;
        if params.len() != reference.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, architecture needs {}",
                params.len(),
                reference.params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            let got = params.value(name)?;
            if got.shape() != t.shape() {
                return Err(Error::dim("checkpoint tensor", t.shape(), got.shape()));
            }
        }
        Ok(Self { params, ..reference })
    }
}
