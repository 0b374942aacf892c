//! Prediction heads and the loss stack.
//!
//! Every loss returns its value together with the analytic gradient with
//! respect to its prediction input; there is no general autodiff.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::attention::Linear;
use crate::error::{Result, ScanError};
use crate::sparse::{
    build_index, flatten_bev, hash_query, rearrange, ssc_forward, CentroidHeatmap, SparseTensor, SscLayer,
    VoxelCoord,
};
use crate::voxel::{SoftVoxelLabels, VoxelRange};

/// A scalar loss and its gradient with respect to the prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<G> {
    pub value: f64,
    pub grad: G,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut p = logits.to_owned();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

/// Pulls a gradient on softmax probabilities back to the logits.
pub fn softmax_backward(probs: ArrayView2<'_, f64>, grad_probs: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((mut o, p), g) in out.rows_mut().into_iter().zip(probs.rows()).zip(grad_probs.rows()) {
        let dot = p.dot(&g);
        for ((o, &pj), &gj) in o.iter_mut().zip(p).zip(g) {
            *o = pj * (gj - dot);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Heatmap head

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapHeadWeights {
    pub ssc1: SscLayer,
    pub ssc2: SscLayer,
    pub proj: Linear,
}

/// BEV sparse centroid distribution: flatten, two planar SSC layers, a 1x1
/// projection to one channel and a logistic.
pub fn heatmap_head(a: &SparseTensor, w: &HeatmapHeadWeights, extent: [usize; 2]) -> Result<CentroidHeatmap> {
    let bev = flatten_bev(a);
    let h = ssc_forward(&ssc_forward(&bev, &w.ssc1)?, &w.ssc2)?;
    let logits = w.proj.forward(h.feats().view())?;
    CentroidHeatmap::new(h.with_feats(logits.mapv(sigmoid))?, extent)
}

/// Which reading of the centroid head and its Gaussian target is used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeatmapKernel {
    /// Head on the flattened BEV map, 3x3 Gaussian target.
    #[default]
    Bev,
    /// Head on the 3D support, 3x3x3 Gaussian target, both collapsed to BEV by column max.
    Volume,
}

/// Volumetric reading of [`heatmap_head`]: [`heatmap_head_3d`] then a column max.
pub fn heatmap_head_volume(a: &SparseTensor, w: &HeatmapHeadWeights, extent: [usize; 2]) -> Result<CentroidHeatmap> {
    CentroidHeatmap::new(flatten_bev(&heatmap_head_3d(a, w)?), extent)
}

/// Dense-BEV alternative: the same layers run over every cell of the
/// `w x h` grid, so invalid cells carry activations too. Returns the full grid.
pub fn heatmap_head_dense(a: &SparseTensor, w: &HeatmapHeadWeights, extent: [usize; 2]) -> Result<Array2<f64>> {
    let bev = flatten_bev(a);
    let mut grid = ndarray::Array3::<f64>::zeros((extent[0], extent[1], bev.channels()));
    for (c, row) in bev.coords().iter().zip(bev.feats().rows()) {
        grid.slice_mut(ndarray::s![c.x as usize, c.y as usize, ..]).assign(&row);
    }
    let grid = dense_planar_conv(&grid, &w.ssc1);
    let grid = dense_planar_conv(&grid, &w.ssc2);
    let mut out = Array2::zeros((extent[0], extent[1]));
    for x in 0..extent[0] {
        for y in 0..extent[1] {
            let f = grid.slice(ndarray::s![x, y, ..]);
            let z = f.dot(&w.proj.weight.column(0)) + w.proj.bias[0];
            out[[x, y]] = sigmoid(z);
        }
    }
    Ok(out)
}

fn dense_planar_conv(grid: &ndarray::Array3<f64>, layer: &SscLayer) -> ndarray::Array3<f64> {
    let (w, h, _) = grid.dim();
    let mut out = ndarray::Array3::zeros((w, h, layer.c_out()));
    let offsets = layer.offsets();
    for x in 0..w as i32 {
        for y in 0..h as i32 {
            let mut acc = layer.bias().clone();
            for (o, d) in offsets.iter().enumerate() {
                if d[2] != 0 {
                    continue;
                }
                let (nx, ny) = (x + d[0], y + d[1]);
                if nx < 0 || ny < 0 || nx >= w as i32 || ny >= h as i32 {
                    continue;
                }
                let f = grid.slice(ndarray::s![nx as usize, ny as usize, ..]);
                acc += &f.dot(&layer.weight().index_axis(Axis(0), o));
            }
            if layer.relu() {
                acc.mapv_inplace(|v| v.max(0.0));
            }
            out.slice_mut(ndarray::s![x as usize, y as usize, ..]).assign(&acc);
        }
    }
    out
}

/// 3D sparse alternative: the head runs on the full 3D support (planar
/// kernels act within each z slice), giving one activation per 3D voxel.
pub fn heatmap_head_3d(a: &SparseTensor, w: &HeatmapHeadWeights) -> Result<SparseTensor> {
    let h = ssc_forward(&ssc_forward(a, &w.ssc1)?, &w.ssc2)?;
    let logits = w.proj.forward(h.feats().view())?;
    h.with_feats(logits.mapv(sigmoid))
}

// ---------------------------------------------------------------------------
// Targets

/// Class-agnostic Gaussian centroid target.
///
/// Each instance centroid (meters) marks its BEV cell with 1 and the cells of
/// the surrounding 3x3 window with `exp(-(dx^2 + dy^2) / (2 sigma^2))`, grid
/// units. Only cells in `bev_support` are kept; overlaps take the maximum.
pub fn gaussian_heatmap_target(
    instances: &[([f64; 2], u16)],
    bev_support: &[VoxelCoord],
    range: &VoxelRange,
    bev_scale: [f64; 2],
    sigma: f64,
    extent: [usize; 2],
) -> Result<CentroidHeatmap> {
    if !(sigma > 0.0) {
        return Err(ScanError::InvalidInput(format!("sigma {sigma} must be positive")));
    }
    let index = build_index(bev_support)?;
    let mut best: std::collections::BTreeMap<VoxelCoord, f64> = Default::default();
    for (center, _) in instances {
        let cx = ((center[0] - range.min[0]) / bev_scale[0]).floor() as i32;
        let cy = ((center[1] - range.min[1]) / bev_scale[1]).floor() as i32;
        for dx in -1..=1 {
            for dy in -1..=1 {
                let v = VoxelCoord::new(cx + dx, cy + dy, 0);
                if !index.contains(v) {
                    continue;
                }
                let act = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                let slot = best.entry(v).or_insert(0.0);
                *slot = slot.max(act);
            }
        }
    }
    let coords: Vec<VoxelCoord> = best.keys().copied().collect();
    let feats = Array2::from_shape_vec((coords.len(), 1), best.values().copied().collect())
        .expect("one value per coordinate");
    CentroidHeatmap::new(SparseTensor::new(coords, feats, [bev_scale[0], bev_scale[1], 1.0])?, extent)
}

/// Volumetric reading of the centroid target: a 3x3x3 window around each
/// instance's 3D centroid voxel, kept where `support` (3D, at `scale`) has a
/// voxel, then collapsed to BEV by the column maximum.
pub fn gaussian_heatmap_target_volume(
    instances: &[([f64; 3], u16)],
    support: &[VoxelCoord],
    range: &VoxelRange,
    scale: [f64; 3],
    sigma: f64,
    extent: [usize; 2],
) -> Result<CentroidHeatmap> {
    if !(sigma > 0.0) {
        return Err(ScanError::InvalidInput(format!("sigma {sigma} must be positive")));
    }
    let index = build_index(support)?;
    let mut best: std::collections::BTreeMap<VoxelCoord, f64> = Default::default();
    for (center, _) in instances {
        let c = range.voxel_of(*center, scale);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if !index.contains(c.offset([dx, dy, dz])) {
                        continue;
                    }
                    let act = (-((dx * dx + dy * dy + dz * dz) as f64) / (2.0 * sigma * sigma)).exp();
                    let slot = best.entry(VoxelCoord::new(c.x + dx, c.y + dy, 0)).or_insert(0.0);
                    *slot = slot.max(act);
                }
            }
        }
    }
    let coords: Vec<VoxelCoord> = best.keys().copied().collect();
    let feats = Array2::from_shape_vec((coords.len(), 1), best.values().copied().collect())
        .expect("one value per coordinate");
    CentroidHeatmap::new(SparseTensor::new(coords, feats, scale)?, extent)
}

/// Target activation for every coordinate of `support`, zero where the target has none.
pub fn target_on_support(target: &CentroidHeatmap, support: &[VoxelCoord]) -> Vec<f64> {
    let index = target.tensor().index();
    let values = target.tensor().feats().column(0);
    support
        .iter()
        .map(|&c| index.get(c).map_or(0.0, |i| values[i]))
        .collect()
}

// ---------------------------------------------------------------------------
// Losses

pub const PROB_EPS: f64 = 1e-7;

/// Penalty-reduced focal loss for Gaussian-soft heatmap targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeatmapFocal {
    /// Focusing exponent on the prediction.
    pub alpha: f64,
    /// Penalty reduction exponent on `1 - target` for non-centre cells.
    pub beta: f64,
}

impl Default for HeatmapFocal {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 4.0 }
    }
}

/// Mean over elements of
/// `-(1 - p)^a ln p` where the target is 1, and
/// `-(1 - t)^b p^a ln(1 - p)` elsewhere, with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn focal_loss(pred: &[f64], target: &[f64], params: HeatmapFocal) -> Result<LossGrad<Vec<f64>>> {
    if pred.len() != target.len() {
        return Err(ScanError::Shape(format!("{} predictions, {} targets", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Ok(LossGrad { value: 0.0, grad: Vec::new() });
    }
    let n = pred.len() as f64;
    let HeatmapFocal { alpha: a, beta: b } = params;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&raw, &t) in pred.iter().zip(target) {
        let p = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let live = if raw == p { 1.0 } else { 0.0 };
        let (l, g) = if t >= 1.0 {
            let q = 1.0 - p;
            (-q.powf(a) * p.ln(), a * q.powf(a - 1.0) * p.ln() - q.powf(a) / p)
        } else {
            let w = (1.0 - t).powf(b);
            let ln1p = (1.0 - p).ln();
            (
                -w * p.powf(a) * ln1p,
                -w * (a * p.powf(a - 1.0) * ln1p - p.powf(a) / (1.0 - p)),
            )
        };
        total += l;
        grad.push(live * g / n);
    }
    Ok(LossGrad { value: total / n, grad })
}

/// Multi-class focal loss on logits for hard labels; mean over non-ignored points.
pub fn semantic_focal_loss(
    logits: ArrayView2<'_, f64>,
    labels: &[u16],
    gamma: f64,
    alpha: f64,
    ignore: Option<u16>,
) -> Result<LossGrad<Array2<f64>>> {
    check_labels(logits, labels)?;
    let probs = softmax_rows(logits);
    let kept: Vec<usize> = (0..labels.len()).filter(|&i| Some(labels[i]) != ignore).collect();
    let mut grad = Array2::zeros(logits.raw_dim());
    if kept.is_empty() {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let n = kept.len() as f64;
    let mut total = 0.0;
    for &i in &kept {
        let y = labels[i] as usize;
        let pt = probs[[i, y]].max(PROB_EPS);
        let q = 1.0 - pt;
        total += -alpha * q.powf(gamma) * pt.ln();
        let dl_dpt = -alpha * (-gamma * q.powf(gamma - 1.0) * pt.ln() + q.powf(gamma) / pt);
        let p = probs.row(i);
        for j in 0..p.len() {
            let delta = if j == y { 1.0 } else { 0.0 };
            grad[[i, j]] = dl_dpt * pt * (delta - p[j]) / n;
        }
    }
    Ok(LossGrad { value: total / n, grad })
}

fn check_labels(logits: ArrayView2<'_, f64>, labels: &[u16]) -> Result<()> {
    if logits.nrows() != labels.len() {
        return Err(ScanError::Shape(format!("{} rows, {} labels", logits.nrows(), labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= logits.ncols()) {
        return Err(ScanError::InvalidInput(format!("label {l} >= {} classes", logits.ncols())));
    }
    Ok(())
}

/// Mean absolute error over the rows not masked out; masked rows contribute
/// nothing and a fully masked input has loss 0.
pub fn l1_loss(
    pred: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    row_mask: Option<&[bool]>,
) -> Result<LossGrad<Array2<f64>>> {
    if pred.dim() != target.dim() {
        return Err(ScanError::Shape(format!("pred {:?} vs target {:?}", pred.dim(), target.dim())));
    }
    if let Some(m) = row_mask {
        if m.len() != pred.nrows() {
            return Err(ScanError::Shape(format!("mask of {} for {} rows", m.len(), pred.nrows())));
        }
    }
    let keep = |i: usize| row_mask.is_none_or(|m| m[i]);
    let count = (0..pred.nrows()).filter(|&i| keep(i)).count() * pred.ncols();
    let mut grad = Array2::zeros(pred.raw_dim());
    if count == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let n = count as f64;
    let mut total = 0.0;
    for i in (0..pred.nrows()).filter(|&i| keep(i)) {
        for j in 0..pred.ncols() {
            let d = pred[[i, j]] - target[[i, j]];
            total += d.abs();
            grad[[i, j]] = if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            };
        }
    }
    Ok(LossGrad { value: total / n, grad })
}

/// Gradient of the Lovász extension of the Jaccard loss for ground truth
/// sorted by decreasing error.
fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut inter_cum = 0.0;
    let mut union_cum = 0.0;
    let mut prev = 0.0;
    gt_sorted
        .iter()
        .map(|&g| {
            if g {
                inter_cum += 1.0;
            } else {
                union_cum += 1.0;
            }
            let jaccard = 1.0 - (gts - inter_cum) / (gts + union_cum);
            let step = jaccard - prev;
            prev = jaccard;
            step
        })
        .collect()
}

/// Lovász-softmax on class probabilities. Averaged over classes present in
/// the non-ignored labels; the gradient is with respect to `probs`.
pub fn lovasz_softmax_probs(
    probs: ArrayView2<'_, f64>,
    labels: &[u16],
    ignore: Option<u16>,
) -> Result<LossGrad<Array2<f64>>> {
    check_labels(probs, labels)?;
    let kept: Vec<usize> = (0..labels.len()).filter(|&i| Some(labels[i]) != ignore).collect();
    if kept.is_empty() {
        return Err(ScanError::InvalidInput("every point is ignored".into()));
    }
    let mut grad = Array2::zeros(probs.raw_dim());
    let mut total = 0.0;
    let mut present = 0usize;
    for c in 0..probs.ncols() {
        let fg: Vec<bool> = kept.iter().map(|&i| labels[i] as usize == c).collect();
        if !fg.iter().any(|&g| g) {
            continue;
        }
        present += 1;
        let errors: Vec<f64> = kept
            .iter()
            .zip(&fg)
            .map(|(&i, &g)| (if g { 1.0 } else { 0.0 } - probs[[i, c]]).abs())
            .collect();
        let mut order: Vec<usize> = (0..kept.len()).collect();
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
        let gt_sorted: Vec<bool> = order.iter().map(|&r| fg[r]).collect();
        let jg = lovasz_grad(&gt_sorted);
        for (rank, &r) in order.iter().enumerate() {
            total += errors[r] * jg[rank];
            // d|fg - p| / dp
            let sign = if fg[r] { -1.0 } else { 1.0 };
            grad[[kept[r], c]] += sign * jg[rank];
        }
    }
    let p = present as f64;
    grad /= p;
    Ok(LossGrad { value: total / p, grad })
}

/// Lovász-softmax on logits.
pub fn lovasz_softmax_loss(
    logits: ArrayView2<'_, f64>,
    labels: &[u16],
    ignore: Option<u16>,
) -> Result<LossGrad<Array2<f64>>> {
    let probs = softmax_rows(logits);
    let LossGrad { value, grad } = lovasz_softmax_probs(probs.view(), labels, ignore)?;
    Ok(LossGrad {
        value,
        grad: softmax_backward(probs.view(), grad.view()),
    })
}

/// L1 between voxel predictions and soft labels after reordering the
/// predictions onto the label coordinate order.
pub fn voxel_semantic_loss(pred: &SparseTensor, label_coords: &[VoxelCoord], labels: &SoftVoxelLabels) -> Result<f64> {
    if label_coords.len() != labels.0.nrows() {
        return Err(ScanError::Shape(format!(
            "{} label coordinates for {} label rows",
            label_coords.len(),
            labels.0.nrows()
        )));
    }
    let mask = hash_query(label_coords, &pred.index());
    let aligned = rearrange(pred, &mask)?;
    Ok(l1_loss(aligned.feats().view(), labels.0.view(), None)?.value)
}

/// Sum over blocks of L1(rearranged SSC head output, soft voxel labels).
pub fn multi_scale_sparse_loss(
    blocks: &[(&SparseTensor, &SscLayer)],
    labels: &[(&[VoxelCoord], &SoftVoxelLabels)],
) -> Result<f64> {
    if blocks.len() != labels.len() {
        return Err(ScanError::Shape(format!("{} blocks, {} label sets", blocks.len(), labels.len())));
    }
    let mut total = 0.0;
    for ((t, head), (coords, soft)) in blocks.iter().zip(labels) {
        let pred = ssc_forward(t, head)?;
        total += voxel_semantic_loss(&pred, coords, soft)?;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_d: f64,
    pub l_o: f64,
    pub l_s: f64,
    pub l_v: f64,
    pub total: f64,
}

pub fn total_loss(l_d: f64, l_o: f64, l_s: f64, l_v: f64) -> LossReport {
    LossReport {
        l_d,
        l_o,
        l_s,
        l_v,
        total: l_d + l_o + l_s + l_v,
    }
}

/// Everything the heads predict for one frame.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub heatmap: CentroidHeatmap,
    /// `N x 2` x/y displacement to the centroid, meters.
    pub offsets: Array2<f64>,
    /// `N x n_classes` logits.
    pub semantics: Array2<f64>,
    /// Voxel class predictions of blocks 2, 3 and 4.
    pub aux_voxel_semantics: Vec<SparseTensor>,
}

/// Supervision for one frame, aligned with [`HeadOutputs`].
#[derive(Clone, Debug)]
pub struct FrameTargets {
    /// Target activation per heatmap voxel, in heatmap row order.
    pub heatmap: Vec<f64>,
    pub offsets: Array2<f64>,
    /// True for thing points; background points are masked out of the offset loss.
    pub offset_mask: Vec<bool>,
    pub semantic: Vec<u16>,
    pub aux: Vec<(Vec<VoxelCoord>, SoftVoxelLabels)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    pub heatmap: HeatmapFocal,
    pub semantic_gamma: f64,
    pub semantic_alpha: f64,
    pub ignore: Option<u16>,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            heatmap: HeatmapFocal::default(),
            semantic_gamma: 2.0,
            semantic_alpha: 0.25,
            ignore: Some(0),
        }
    }
}

/// `L = L_d + L_o + L_s + L_v` for one frame.
pub fn frame_losses(out: &HeadOutputs, targets: &FrameTargets, params: &LossParams) -> Result<LossReport> {
    let scores: Vec<f64> = out.heatmap.scores().collect();
    let l_d = focal_loss(&scores, &targets.heatmap, params.heatmap)?.value;
    let l_o = l1_loss(out.offsets.view(), targets.offsets.view(), Some(&targets.offset_mask))?.value;
    let lovasz = if targets.semantic.iter().any(|&s| Some(s) != params.ignore) {
        lovasz_softmax_loss(out.semantics.view(), &targets.semantic, params.ignore)?.value
    } else {
        0.0
    };
    let focal = semantic_focal_loss(
        out.semantics.view(),
        &targets.semantic,
        params.semantic_gamma,
        params.semantic_alpha,
        params.ignore,
    )?
    .value;
    if out.aux_voxel_semantics.len() != targets.aux.len() {
        return Err(ScanError::Shape(format!(
            "{} auxiliary predictions, {} label sets",
            out.aux_voxel_semantics.len(),
            targets.aux.len()
        )));
    }
    let mut l_v = 0.0;
    for (pred, (coords, soft)) in out.aux_voxel_semantics.iter().zip(&targets.aux) {
        l_v += voxel_semantic_loss(pred, coords, soft)?;
    }
    Ok(total_loss(l_d, l_o, lovasz + focal, l_v))
}

/// Class with the largest logit among `1..n`, ties to the smaller id.
pub fn argmax_class(row: ArrayView1<'_, f64>) -> u16 {
    let mut best = 1usize.min(row.len().saturating_sub(1));
    for j in best..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best as u16
}
