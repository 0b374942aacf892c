//! Cross-scale global attention: 3D sinusoidal position encoding, exact and
//! kernelized (positive random feature) attention, and the two-stage
//! bottom-up composition over blocks 2, 3 and 4.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, ScanError};
use crate::sparse::{align_to_support, sparse_align, SparseTensor, VoxelCoord};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub depth: usize,
    /// Random features per head.
    pub features: usize,
    pub seed: u64,
    pub share_weights: bool,
}

impl Default for AttentionConfig {
    /// 8 heads of 16 channels, depth 2.
    fn default() -> Self {
        Self {
            heads: 8,
            head_dim: 16,
            depth: 2,
            features: 64,
            seed: 0,
            share_weights: false,
        }
    }
}

impl AttentionConfig {
    pub fn embed_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 || self.features == 0 || self.depth == 0 {
            return Err(ScanError::InvalidInput(format!(
                "attention heads, head_dim, depth and features must all be >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Sinusoidal encoding of voxel coordinates into `width` channels.
///
/// The first `width / 3` channels encode x, the next `width / 3` encode y and
/// the rest encode z. Inside a span of length `L`, channel `2i` is
/// `sin(v / 10000^(2i / L))` and channel `2i + 1` the matching cosine.
pub fn pos_encode(coords: &[VoxelCoord], width: usize) -> Result<Array2<f64>> {
    if width < 6 {
        return Err(ScanError::InvalidInput(format!("position encoding width {width} < 6")));
    }
    let d = width / 3;
    let spans = [(0, d), (d, d), (2 * d, width - 2 * d)];
    let mut out = Array2::zeros((coords.len(), width));
    for (axis, &(start, len)) in spans.iter().enumerate() {
        let inv_freq: Vec<f64> = (0..len)
            .map(|k| 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / len as f64))
            .collect();
        for (mut row, c) in out.rows_mut().into_iter().zip(coords) {
            let v = c.to_array()[axis] as f64;
            for (k, &f) in inv_freq.iter().enumerate() {
                let a = v * f;
                row[start + k] = if k % 2 == 0 { a.sin() } else { a.cos() };
            }
        }
    }
    Ok(out)
}

/// Affine layer, `x W + b`, optionally followed by ReLU. `weight` is `c_in x c_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub relu: bool,
}

impl Linear {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>, relu: bool) -> Result<Self> {
        if weight.ncols() != bias.len() {
            return Err(ScanError::Shape(format!(
                "weight has {} outputs, bias has {}",
                weight.ncols(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias, relu })
    }

    pub fn zeros(c_in: usize, c_out: usize, relu: bool) -> Self {
        Self {
            weight: Array2::zeros((c_in, c_out)),
            bias: Array1::zeros(c_out),
            relu,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn c_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.c_in() {
            return Err(ScanError::Shape(format!(
                "layer expects {} inputs, got {}",
                self.c_in(),
                x.ncols()
            )));
        }
        let mut y = x.dot(&self.weight) + &self.bias;
        if self.relu {
            y.mapv_inplace(|v| v.max(0.0));
        }
        Ok(y)
    }
}

pub fn mlp_forward(x: ArrayView2<'_, f64>, layers: &[Linear]) -> Result<Array2<f64>> {
    let Some((first, rest)) = layers.split_first() else {
        return Ok(x.to_owned());
    };
    let mut h = first.forward(x)?;
    for layer in rest {
        h = layer.forward(h.view())?;
    }
    Ok(h)
}

/// `softmax(Q K^T / sqrt(d)) V` with row-max subtraction.
pub fn exact_attention(q: ArrayView2<'_, f64>, k: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_qkv(q, k, v)?;
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut logits = q.dot(&k.t()) * scale;
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    Ok(logits.dot(&v))
}

fn check_qkv(q: ArrayView2<'_, f64>, k: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>) -> Result<()> {
    if q.ncols() != k.ncols() || k.nrows() != v.nrows() {
        return Err(ScanError::Shape(format!(
            "attention shapes disagree: q {:?}, k {:?}, v {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    if k.nrows() == 0 {
        return Err(ScanError::InvalidInput("attention needs at least one key".into()));
    }
    Ok(())
}

/// Gaussian projection matrix (`m x d`) for positive random features.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomFeatures(pub Array2<f64>);

impl RandomFeatures {
    pub fn draw(m: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self(Array2::from_shape_simple_fn((m, d), || StandardNormal.sample(&mut rng)))
    }

    pub fn count(&self) -> usize {
        self.0.nrows()
    }
}

/// `exp(W u - |u|^2 / 2 - c) / sqrt(m)` per row. The stabilizer `c` is the
/// row maximum for queries and the global maximum for keys; both cancel in
/// the attention normalization.
fn positive_features(x: ArrayView2<'_, f64>, w: &RandomFeatures, scale: f64, per_row: bool) -> Array2<f64> {
    let m = w.count();
    let d = x.ncols();
    let x = x.as_standard_layout();
    let mut proj = x.dot(&(&w.0 * scale).t());
    let norm = (m as f64).sqrt().recip();
    let xs = x.as_slice().expect("standard layout");
    let ps = proj.as_slice_mut().expect("fresh array is contiguous");
    let mut global = f64::NEG_INFINITY;
    for (row, u) in ps.chunks_exact_mut(m).zip(xs.chunks_exact(d)) {
        let half_norm = 0.5 * scale * scale * u.iter().map(|v| v * v).sum::<f64>();
        let mut max = f64::NEG_INFINITY;
        for p in row.iter_mut() {
            *p -= half_norm;
            max = max.max(*p);
        }
        if per_row {
            for p in row.iter_mut() {
                *p = (*p - max).exp() * norm;
            }
        } else {
            global = global.max(max);
        }
    }
    if !per_row {
        for p in ps.iter_mut() {
            *p = (*p - global).exp() * norm;
        }
    }
    proj
}

/// Linear-complexity softmax attention estimate with `m` positive random features.
pub fn gka_attention(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    m: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if m == 0 {
        return Err(ScanError::InvalidInput("random feature count must be >= 1".into()));
    }
    let w = RandomFeatures::draw(m, q.ncols(), seed);
    gka_with_features(q, k, v, &w)
}

pub fn gka_with_features(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    w: &RandomFeatures,
) -> Result<Array2<f64>> {
    check_qkv(q, k, v)?;
    if w.0.ncols() != q.ncols() {
        return Err(ScanError::Shape(format!(
            "random features of width {} for head width {}",
            w.0.ncols(),
            q.ncols()
        )));
    }
    let scale = (q.ncols() as f64).powf(-0.25);
    let phi_q = positive_features(q, w, scale, true);
    let phi_k = positive_features(k, w, scale, false);
    let kv = phi_k.t().dot(&v);
    let k_sum = phi_k.sum_axis(Axis(0));
    let mut out = phi_q.dot(&kv);
    let denom = phi_q.dot(&k_sum);
    for (mut row, &d) in out.rows_mut().into_iter().zip(denom.iter()) {
        row /= d.max(1e-9);
    }
    Ok(out)
}

/// Weights of one attention iteration.
///
/// `query` maps the position-encoded query features into the attention width;
/// `key` and `value` are the two-layer MLPs of the key and value paths; `out`
/// projects the concatenated heads back to the feature width.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayerWeights {
    pub query: Array2<f64>,
    pub key: Vec<Linear>,
    pub value: Vec<Linear>,
    pub out: Linear,
}

impl AttentionLayerWeights {
    pub fn zeros(channels: usize, embed: usize) -> Self {
        Self {
            query: Array2::zeros((channels, embed)),
            key: vec![Linear::zeros(channels, embed, true), Linear::zeros(embed, embed, false)],
            value: vec![Linear::zeros(channels, embed, true), Linear::zeros(embed, embed, false)],
            out: Linear::zeros(embed, channels, false),
        }
    }
}

/// Per-stage, per-depth layer weights. With sharing, every slot holds the same `Arc`.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    stages: [Vec<Arc<AttentionLayerWeights>>; 2],
}

impl AttentionWeights {
    pub fn new(stage1: Vec<Arc<AttentionLayerWeights>>, stage2: Vec<Arc<AttentionLayerWeights>>) -> Result<Self> {
        if stage1.len() != stage2.len() || stage1.is_empty() {
            return Err(ScanError::Shape(format!(
                "stages have {} and {} layers",
                stage1.len(),
                stage2.len()
            )));
        }
        Ok(Self {
            stages: [stage1, stage2],
        })
    }

    pub fn shared(layer: AttentionLayerWeights, depth: usize) -> Self {
        let layer = Arc::new(layer);
        let stage = vec![layer; depth];
        Self {
            stages: [stage.clone(), stage],
        }
    }

    pub fn stage(&self, i: usize) -> &[Arc<AttentionLayerWeights>] {
        &self.stages[i]
    }

    pub fn depth(&self) -> usize {
        self.stages[0].len()
    }
}

/// Deterministic seed for a (stage, depth, head) slot.
pub fn feature_seed(base: u64, stage: usize, depth: usize, head: usize) -> u64 {
    let mut z = base ^ ((stage as u64) << 40) ^ ((depth as u64) << 20) ^ head as u64;
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One cross-scale stage: queries from `query`, keys and values from `context`
/// (already on the same support), `layers.len()` residual iterations.
pub fn cross_scale_attention_layer(
    query: &SparseTensor,
    context: &SparseTensor,
    layers: &[Arc<AttentionLayerWeights>],
    cfg: &AttentionConfig,
    stage: usize,
) -> Result<SparseTensor> {
    cfg.validate()?;
    if query.coords() != context.coords() {
        return Err(ScanError::Alignment(format!(
            "query support ({} voxels) differs from context support ({} voxels)",
            query.len(),
            context.len()
        )));
    }
    if query.is_empty() {
        return Ok(query.clone());
    }
    let channels = query.channels();
    let pe = pos_encode(query.coords(), channels)?;
    let embed = cfg.embed_dim();
    let keyed_context = context.feats() + &pe;
    let mut x = query.feats().clone();
    for (depth, layer) in layers.iter().enumerate() {
        let q = (&x + &pe).dot(&layer.query);
        let k = mlp_forward(keyed_context.view(), &layer.key)?;
        let v = mlp_forward(context.feats().view(), &layer.value)?;
        if q.ncols() != embed || k.ncols() != embed || v.ncols() != embed {
            return Err(ScanError::Shape(format!(
                "attention width {embed} but projections give {}, {}, {}",
                q.ncols(),
                k.ncols(),
                v.ncols()
            )));
        }
        let mut heads = Array2::zeros((x.nrows(), embed));
        for h in 0..cfg.heads {
            let cols = s![.., h * cfg.head_dim..(h + 1) * cfg.head_dim];
            let w = RandomFeatures::draw(cfg.features, cfg.head_dim, feature_seed(cfg.seed, stage, depth, h));
            let o = gka_with_features(q.slice(cols), k.slice(cols), v.slice(cols), &w)?;
            heads.slice_mut(cols).assign(&o);
        }
        x += &layer.out.forward(heads.view())?;
    }
    query.with_feats(x)
}

/// Bottom-up attention over blocks 2, 3 and 4; the result lives on block 4's support.
pub fn cross_scale_attention(
    r_b2: &SparseTensor,
    r_b3: &SparseTensor,
    r_b4: &SparseTensor,
    weights: &AttentionWeights,
    cfg: &AttentionConfig,
) -> Result<SparseTensor> {
    if weights.depth() != cfg.depth {
        return Err(ScanError::Shape(format!(
            "weights have depth {}, config asks for {}",
            weights.depth(),
            cfg.depth
        )));
    }
    let aligned = if r_b2.is_empty() {
        SparseTensor::empty(r_b2.channels(), r_b3.scale())
    } else {
        sparse_align(r_b2, r_b3.scale())?
    };
    let context1 = align_to_support(&aligned, r_b3.coords());
    let a1 = cross_scale_attention_layer(r_b3, &context1, weights.stage(0), cfg, 0)?;
    if a1.scale() != r_b4.scale() {
        return Err(ScanError::Alignment(format!(
            "stage-1 output at {:?} but block 4 at {:?}",
            a1.scale(),
            r_b4.scale()
        )));
    }
    let context2 = align_to_support(&a1, r_b4.coords());
    cross_scale_attention_layer(r_b4, &context2, weights.stage(1), cfg, 1)
}
