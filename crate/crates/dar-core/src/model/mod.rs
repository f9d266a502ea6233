//! Backbone CNN, feature aggregation (GAP or multi-head attention), and
//! classifier heads.
//!
//! The backbone is a plain conv/relu/maxpool stack with no batch statistics,
//! so evaluation and training see identical forward semantics and a frozen
//! backbone is genuinely frozen. The attention aggregator follows the
//! two-layer scaled-dot-product formulation: `k` learnable queries attend
//! over the `H*W` spatial positions of the final activation map (used as both
//! keys and values), heads are concatenated through an output projection, and
//! the aggregated feature is the mean over the query outputs.

pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{NodeId, Param, ParamSet, Scalar, Tape, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackbonePreset {
    Small,
    Medium,
    Large,
}

impl BackbonePreset {
    pub fn channels(self) -> [usize; 3] {
        match self {
            BackbonePreset::Small => [16, 32, 32],
            BackbonePreset::Medium => [32, 64, 64],
            BackbonePreset::Large => [64, 128, 128],
        }
    }

    /// Channel count `d` of the final activation map.
    pub fn feature_dim(self) -> usize {
        self.channels()[2]
    }
}

/// Attention aggregator hyperparameters (ablation axes).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DarConfig {
    pub queries: usize,
    pub heads: usize,
    pub layers: usize,
    pub positional: bool,
}

impl Default for DarConfig {
    fn default() -> Self {
        DarConfig { queries: 4, heads: 4, layers: 2, positional: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "dar")]
pub enum AggregatorKind {
    Gap,
    Dar(DarConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    TwoLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: BackbonePreset,
    /// Input image dims (channels, height, width).
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub aggregator: AggregatorKind,
    pub head: HeadKind,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub pool: bool,
}

impl ModelConfig {
    /// Three conv blocks; the first two halve the spatial extent.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let ch = self.preset.channels();
        vec![
            BlockSpec { c_in: self.input.0, c_out: ch[0], kernel: 3, pool: true },
            BlockSpec { c_in: ch[0], c_out: ch[1], kernel: 3, pool: true },
            BlockSpec { c_in: ch[1], c_out: ch[2], kernel: 3, pool: false },
        ]
    }

    /// (d, h, w) of the final activation map.
    pub fn map_dims(&self) -> (usize, usize, usize) {
        let (_, mut h, mut w) = self.input;
        for b in self.blocks() {
            if b.pool {
                h /= 2;
                w /= 2;
            }
        }
        (self.preset.feature_dim(), h, w)
    }

    pub fn feature_dim(&self) -> usize {
        self.preset.feature_dim()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(ModelError::Config(format!("bad input dims {:?}", self.input)));
        }
        if self.classes < 2 {
            return Err(ModelError::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        let (d, mh, mw) = self.map_dims();
        if mh < 2 || mw < 2 {
            return Err(ModelError::Config(format!(
                "activation map {}x{} too small for spatial weighting; enlarge the input",
                mh, mw
            )));
        }
        if let AggregatorKind::Dar(dar) = self.aggregator {
            if dar.queries == 0 || dar.heads == 0 {
                return Err(ModelError::Config("attention queries and heads must be >= 1".into()));
            }
            if !(1..=2).contains(&dar.layers) {
                return Err(ModelError::Config(format!("attention layers must be 1 or 2, got {}", dar.layers)));
            }
            if d % dar.heads != 0 {
                return Err(ModelError::Config(format!(
                    "feature dim {} not divisible by {} heads",
                    d, dar.heads
                )));
            }
        }
        Ok(())
    }
}

// ── Initialization ──────────────────────────────────────────────────

fn gaussian<F: Scalar>(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<F> {
    let normal = Normal::new(0.0, sigma).expect("sigma > 0");
    (0..n).map(|_| F::from_f64(normal.sample(rng))).collect()
}

pub fn init_backbone<F: Scalar>(set: &mut ParamSet<F>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    for (i, b) in cfg.blocks().iter().enumerate() {
        let fan_in = b.c_in * b.kernel * b.kernel;
        let sigma = (2.0 / fan_in as f64).sqrt();
        let n = b.c_out * b.c_in * b.kernel * b.kernel;
        set.push(Param::new(
            format!("backbone.block{}.kernel", i),
            vec![b.c_out, b.c_in, b.kernel, b.kernel],
            gaussian(rng, n, sigma),
        ));
        set.push(Param::new(format!("backbone.block{}.bias", i), vec![b.c_out], vec![F::zero(); b.c_out]));
    }
}

/// Query/projection init: zero-mean Gaussian, sigma = 0.02, no biases. The
/// small scale keeps initial attention near-uniform (a near-GAP warm start).
pub const ATTN_INIT_SIGMA: f64 = 0.02;

pub fn init_aggregator<F: Scalar>(set: &mut ParamSet<F>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let AggregatorKind::Dar(dar) = cfg.aggregator else { return };
    let (d, h, w) = cfg.map_dims();
    let d_head = d / dar.heads;
    set.push(Param::new("dar.queries", vec![dar.queries, d], gaussian(rng, dar.queries * d, ATTN_INIT_SIGMA)));
    for l in 0..dar.layers {
        for t in 0..dar.heads {
            for proj in ["wq", "wk", "wv"] {
                set.push(Param::new(
                    format!("dar.layer{}.head{}.{}", l, t, proj),
                    vec![d, d_head],
                    gaussian(rng, d * d_head, ATTN_INIT_SIGMA),
                ));
            }
        }
        set.push(Param::new(format!("dar.layer{}.wo", l), vec![d, d], gaussian(rng, d * d, ATTN_INIT_SIGMA)));
    }
    if dar.positional {
        set.push(Param::new("dar.positional", vec![h * w, d], gaussian(rng, h * w * d, ATTN_INIT_SIGMA)));
    }
}

pub fn init_head<F: Scalar>(set: &mut ParamSet<F>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.feature_dim();
    if cfg.head == HeadKind::TwoLayer {
        let sigma = (2.0 / d as f64).sqrt();
        set.push(Param::new("head.hidden.weight", vec![d, d], gaussian(rng, d * d, sigma)));
        set.push(Param::new("head.hidden.bias", vec![d], vec![F::zero(); d]));
    }
    let sigma = (1.0 / d as f64).sqrt();
    set.push(Param::new("head.weight", vec![d, cfg.classes], gaussian(rng, d * cfg.classes, sigma)));
    set.push(Param::new("head.bias", vec![cfg.classes], vec![F::zero(); cfg.classes]));
}

/// Fresh parameters for the whole model, seeded.
pub fn init_params<F: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<F>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x706172616d); // "param"
    let mut set = ParamSet::new();
    init_backbone(&mut set, cfg, &mut rng);
    init_aggregator(&mut set, cfg, &mut rng);
    init_head(&mut set, cfg, &mut rng);
    Ok(set)
}

// ── Forward passes ──────────────────────────────────────────────────

/// Parameters bound onto a tape for one forward pass.
pub struct BoundModel<'s, F> {
    pub set: &'s ParamSet<F>,
    pub ids: Vec<NodeId>,
}

impl<'s, F: Scalar> BoundModel<'s, F> {
    pub fn id(&self, name: &str) -> NodeId {
        let idx = self.set.index_of(name).unwrap_or_else(|| panic!("unbound param {}", name));
        self.ids[idx]
    }

    /// Gradient of a parameter after backward, if it was trainable.
    pub fn grad<'t>(&self, tape: &'t Tape<F>, name: &str) -> Option<&'t [F]> {
        tape.grad(self.id(name))
    }
}

pub fn bind<'s, F: Scalar>(tape: &mut Tape<F>, set: &'s ParamSet<F>) -> Result<BoundModel<'s, F>, TensorError> {
    let mut ids = Vec::with_capacity(set.params.len());
    for p in &set.params {
        ids.push(tape.leaf(p.data.clone(), p.shape.clone(), p.trainable)?);
    }
    Ok(BoundModel { set, ids })
}

/// Stack raw images into a [batch, c, h, w] input leaf.
pub fn batch_input<F: Scalar>(
    tape: &mut Tape<F>,
    images: &[&[f32]],
    dims: (usize, usize, usize),
) -> Result<NodeId, TensorError> {
    let (c, h, w) = dims;
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        data.extend(img.iter().map(|&v| F::from_f64(v as f64)));
    }
    tape.constant(data, vec![images.len(), c, h, w])
}

/// conv -> bias -> relu (-> maxpool) blocks; returns the activation map
/// [batch, d, h, w].
pub fn backbone_forward<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    model: &BoundModel<F>,
    x: NodeId,
) -> Result<NodeId, TensorError> {
    let mut cur = x;
    for (i, b) in cfg.blocks().iter().enumerate() {
        let kern = model.id(&format!("backbone.block{}.kernel", i));
        let bias = model.id(&format!("backbone.block{}.bias", i));
        cur = tape.conv2d(cur, kern, 1, (b.kernel - 1) / 2)?;
        cur = tape.add_bias(cur, bias)?;
        cur = tape.relu(cur)?;
        if b.pool {
            cur = tape.maxpool2d(cur, 2, 2)?;
        }
    }
    Ok(cur)
}

/// Global average pooling: per-channel spatial mean, [b,d,h,w] -> [b,d].
pub fn gap_aggregate<F: Scalar>(tape: &mut Tape<F>, map: NodeId) -> Result<NodeId, TensorError> {
    tape.gap(map)
}

/// Scaled dot-product attention. Scale is 1/sqrt(d') for the incoming
/// query/key width d'. Returns (output, attention weights [q rows, n keys]).
pub fn sdpa<F: Scalar>(
    tape: &mut Tape<F>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<(NodeId, NodeId), TensorError> {
    let dq = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, F::one() / F::from_f64((dq as f64).sqrt()))?;
    let attn = tape.softmax_rows(scaled)?;
    let out = tape.matmul_value_sorted(attn, v)?;
    Ok((out, attn))
}

/// Per-layer attention parameter ids.
pub struct MhaLayer<F> {
    pub wq: Vec<NodeId>,
    pub wk: Vec<NodeId>,
    pub wv: Vec<NodeId>,
    pub wo: NodeId,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> MhaLayer<F> {
    pub fn from_bound(model: &BoundModel<F>, dar: &DarConfig, layer: usize) -> Self {
        let get = |proj: &str, t: usize| model.id(&format!("dar.layer{}.head{}.{}", layer, t, proj));
        MhaLayer {
            wq: (0..dar.heads).map(|t| get("wq", t)).collect(),
            wk: (0..dar.heads).map(|t| get("wk", t)).collect(),
            wv: (0..dar.heads).map(|t| get("wv", t)).collect(),
            wo: model.id(&format!("dar.layer{}.wo", layer)),
            _marker: std::marker::PhantomData,
        }
    }
}

/// Multi-head attention: heads run scaled dot-product attention on projected
/// inputs, outputs are concatenated and projected by `wo`. Returns the output
/// and each head's attention weights.
pub fn mha<F: Scalar>(
    tape: &mut Tape<F>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    layer: &MhaLayer<F>,
) -> Result<(NodeId, Vec<NodeId>), TensorError> {
    let d = tape.shape(q)[1];
    let heads = layer.wq.len();
    if d % heads != 0 {
        return Err(TensorError::Config(format!("feature dim {} not divisible by {} heads", d, heads)));
    }
    let mut outs = Vec::with_capacity(heads);
    let mut attns = Vec::with_capacity(heads);
    for t in 0..heads {
        let qp = tape.matmul(q, layer.wq[t])?;
        let kp = tape.matmul(k, layer.wk[t])?;
        let vp = tape.matmul(v, layer.wv[t])?;
        let (o, a) = sdpa(tape, qp, kp, vp)?;
        outs.push(o);
        attns.push(a);
    }
    let cat = tape.concat_cols(&outs)?;
    let out = tape.matmul(cat, layer.wo)?;
    Ok((out, attns))
}

/// Final-layer attention weights averaged over heads, per example: rows are
/// queries, columns the H*W spatial positions.
pub type AttentionMap = Vec<f64>;

/// Attention aggregation over a batched activation map. Each example's map is
/// flattened to [H*W, d] and used as keys and values; with two layers the
/// first pass updates the queries in context. Returns the aggregated features
/// [batch, d] and per-example inspection copies of the final attention.
pub fn dar_aggregate<F: Scalar>(
    tape: &mut Tape<F>,
    dar: &DarConfig,
    model: &BoundModel<F>,
    map: NodeId,
) -> Result<(NodeId, Vec<AttentionMap>), TensorError> {
    let shape = tape.shape(map).to_vec();
    if shape.len() != 4 {
        return Err(TensorError::Dimension { op: "dar_aggregate", detail: format!("{:?}", shape) });
    }
    let (batch, d, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let queries = model.id("dar.queries");
    let positional = if dar.positional {
        let p = model.id("dar.positional");
        if tape.shape(p) != [hw, d] {
            return Err(TensorError::Dimension {
                op: "dar_aggregate",
                detail: format!("positional table {:?} vs map {}x{}", tape.shape(p), hw, d),
            });
        }
        Some(p)
    } else {
        None
    };
    let layers: Vec<MhaLayer<F>> = (0..dar.layers).map(|l| MhaLayer::from_bound(model, dar, l)).collect();

    let mut rows = Vec::with_capacity(batch);
    let mut maps = Vec::with_capacity(batch);
    for b in 0..batch {
        let a_i = tape.slice_batch(map, b)?;
        let flat = tape.reshape(a_i, vec![d, hw])?;
        let a_flat = tape.transpose(flat)?;
        let keys = match positional {
            Some(p) => tape.add(a_flat, p)?,
            None => a_flat,
        };
        let mut q = queries;
        let mut final_attn = Vec::new();
        for layer in &layers {
            let (out, attns) = mha(tape, q, keys, a_flat, layer)?;
            q = out;
            final_attn = attns;
        }
        let h = tape.mean_rows(q)?;
        rows.push(tape.reshape(h, vec![1, d])?);

        let k = dar.queries;
        let mut avg = vec![0.0f64; k * hw];
        for &attn in &final_attn {
            for (o, &v) in avg.iter_mut().zip(tape.data(attn)) {
                *o += v.as_f64();
            }
        }
        let inv = 1.0 / final_attn.len() as f64;
        avg.iter_mut().for_each(|v| *v *= inv);
        maps.push(avg);
    }
    let h = tape.concat_rows(&rows)?;
    Ok((h, maps))
}

/// Linear (or relu two-layer) classifier over aggregated features [b, d].
pub fn classify<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    model: &BoundModel<F>,
    features: NodeId,
) -> Result<NodeId, TensorError> {
    let mut h = features;
    if cfg.head == HeadKind::TwoLayer {
        let w = model.id("head.hidden.weight");
        let b = model.id("head.hidden.bias");
        h = tape.matmul(h, w)?;
        h = tape.add_bias(h, b)?;
        h = tape.relu(h)?;
    }
    let w = model.id("head.weight");
    let b = model.id("head.bias");
    let logits = tape.matmul(h, w)?;
    tape.add_bias(logits, b)
}

pub struct ForwardOut {
    /// Final activation map [b, d, h, w].
    pub map: NodeId,
    /// Aggregated features [b, d].
    pub features: NodeId,
    /// Class logits [b, classes].
    pub logits: NodeId,
    /// Final-layer attention (attention aggregator only).
    pub attention: Option<Vec<AttentionMap>>,
}

/// Aggregator + classifier on top of an existing activation map.
pub fn forward_from_map<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    model: &BoundModel<F>,
    map: NodeId,
) -> Result<ForwardOut, TensorError> {
    let (features, attention) = match &cfg.aggregator {
        AggregatorKind::Gap => (gap_aggregate(tape, map)?, None),
        AggregatorKind::Dar(dar) => {
            let (h, attn) = dar_aggregate(tape, dar, model, map)?;
            (h, Some(attn))
        }
    };
    let logits = classify(tape, cfg, model, features)?;
    Ok(ForwardOut { map, features, logits, attention })
}

/// Full forward pass: backbone, aggregation, classification.
pub fn forward<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    model: &BoundModel<F>,
    x: NodeId,
) -> Result<ForwardOut, TensorError> {
    let map = backbone_forward(tape, cfg, model, x)?;
    forward_from_map(tape, cfg, model, map)
}

#[cfg(test)]
mod tests;
