//! Backbone, end-to-end forward pass and panoptic decoding.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2, Axis};

use crate::attention::{cross_scale_attention, mlp_forward, AttentionConfig, Linear};
use crate::error::{Result, ScanError};
use crate::heads::{
    argmax_class, gaussian_heatmap_target, gaussian_heatmap_target_volume, heatmap_head, heatmap_head_volume,
    target_on_support, HeatmapKernel, FrameTargets, HeadOutputs,
};
use crate::sparse::{
    flatten_bev, sparse_max_pool_peaks, ssc_forward, ssc_forward_mapped, CentroidHeatmap, KernelMap, SparseTensor,
    VoxelCoord,
};
use crate::voxel::{
    crop_points, gather_rows, pool_mean, pool_mean_mapped, soft_voxel_labels, voxelize_coords, Point2Voxel,
    PointCloud, PointLabels, VoxelRange,
};
use crate::weights::Model;

/// Voxel size multiplier of each backbone block.
pub const BLOCK_FACTORS: [f64; 4] = [1.0, 2.0, 4.0, 4.0];

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Base voxel size `s` in meters.
    pub scale: [f64; 3],
    pub range: VoxelRange,
    pub max_centroids: usize,
    pub score_threshold: f64,
    pub pool_window: usize,
    pub n_classes: usize,
    pub things: BTreeSet<u16>,
    pub channels: usize,
    pub attention: AttentionConfig,
    /// Gaussian spread of the centroid target, grid cells.
    pub target_sigma: f64,
    pub heatmap_kernel: HeatmapKernel,
}

impl Default for PipelineConfig {
    /// SemanticKITTI setup: s = [0.2, 0.2, 0.1], range ±48 x ±48 x [-3, 1.5],
    /// K = 100, threshold 0.1, C = 64, 20 classes with things 1..=8.
    fn default() -> Self {
        Self {
            scale: [0.2, 0.2, 0.1],
            range: VoxelRange::semantic_kitti(),
            max_centroids: 100,
            score_threshold: 0.1,
            pool_window: 3,
            n_classes: 20,
            things: (1..=8).collect(),
            channels: 64,
            attention: AttentionConfig::default(),
            target_sigma: 1.0,
            heatmap_kernel: HeatmapKernel::Bev,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ScanError::InvalidInput(m));
        if self.max_centroids == 0 || self.max_centroids > u16::MAX as usize {
            return bad(format!("max centroids {} outside 1..=65535", self.max_centroids));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return bad(format!("score threshold {} outside [0, 1]", self.score_threshold));
        }
        if self.pool_window % 2 == 0 {
            return bad(format!("pool window {} must be odd", self.pool_window));
        }
        if self.things.contains(&0) || self.things.iter().any(|&t| t as usize >= self.n_classes) {
            return bad(format!("thing classes {:?} must lie in 1..{}", self.things, self.n_classes));
        }
        if self.n_classes < 2 || self.channels < 6 {
            return bad("need at least 2 classes and 6 channels".into());
        }
        if self.scale.iter().any(|&s| !(s > 0.0)) {
            return bad(format!("voxel size {:?} must be positive", self.scale));
        }
        self.attention.validate()
    }

    pub fn block_scale(&self, block: usize) -> [f64; 3] {
        self.scale.map(|s| s * BLOCK_FACTORS[block])
    }

    /// Voxel size of the BEV centroid grid (block 4's scale).
    pub fn bev_scale(&self) -> [f64; 3] {
        self.block_scale(3)
    }

    /// `w x h` of the BEV centroid grid.
    pub fn bev_extent(&self) -> [usize; 2] {
        let d = self.range.grid_dims(self.bev_scale());
        [d[0], d[1]]
    }

    pub fn is_thing(&self, class: u16) -> bool {
        self.things.contains(&class)
    }
}

/// Per-block sparse tensors, projected voxel features and point maps.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub blocks: Vec<SparseTensor>,
    /// Output of each block's point projection, one row per voxel. A point's
    /// feature is the row of its voxel.
    pub voxel_feats: Vec<Array2<f64>>,
    pub maps: Vec<Point2Voxel>,
}

impl BackboneOutput {
    /// Per-point features of block `b`.
    pub fn point_feats(&self, b: usize) -> Result<Array2<f64>> {
        gather_rows(self.voxel_feats[b].view(), &self.maps[b])
    }
}

/// Four blocks at voxel sizes s, 2s, 4s, 4s. Each voxelizes the incoming point
/// features (mean pooling), runs two SSC layers and projects back to points.
/// `points` must already be cropped to the configured range.
///
/// The projection acts row-wise, so it runs on voxels and is gathered to
/// points lazily; the result is the same as projecting every point.
pub fn backbone_forward(points: &PointCloud, model: &Model, cfg: &PipelineConfig) -> Result<BackboneOutput> {
    let mut blocks = Vec::with_capacity(4);
    let mut voxel_feats: Vec<Array2<f64>> = Vec::with_capacity(4);
    let mut maps: Vec<Point2Voxel> = Vec::with_capacity(4);
    for (b, weights) in model.blocks.iter().enumerate() {
        let scale = cfg.block_scale(b);
        let (coords, p2v) = voxelize_coords(points, scale, &cfg.range)?;
        if p2v.rows().contains(&Point2Voxel::CROPPED) {
            return Err(ScanError::InvalidInput("backbone input contains points outside the range".into()));
        }
        let pooled = match (voxel_feats.last(), maps.last()) {
            (Some(f), Some(prev)) => pool_mean_mapped(f.view(), prev, &p2v)?,
            _ => pool_mean(points.to_matrix().view(), &p2v)?,
        };
        let t = SparseTensor::from_parts(coords, pooled, scale);
        let map = KernelMap::for_layer(&t, &weights.ssc1)?;
        let t = ssc_forward_mapped(&ssc_forward_mapped(&t, &weights.ssc1, &map)?, &weights.ssc2, &map)?;
        voxel_feats.push(weights.proj.forward(t.feats().view())?);
        blocks.push(t);
        maps.push(p2v);
    }
    Ok(BackboneOutput {
        blocks,
        voxel_feats,
        maps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Centroid {
    pub xy: [f64; 2],
    pub score: f64,
}

/// Keeps peaks scoring at least `threshold`, best first, at most `k`, as BEV
/// cell centres in meters.
pub fn top_k_centroids(
    peaks: &[(VoxelCoord, f64)],
    k: usize,
    threshold: f64,
    range: &VoxelRange,
    bev_scale: [f64; 3],
) -> Vec<Centroid> {
    let mut kept: Vec<&(VoxelCoord, f64)> = peaks.iter().filter(|p| p.1 >= threshold).collect();
    kept.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    kept.truncate(k);
    kept.into_iter()
        .map(|&(c, score)| {
            let center = range.voxel_center(c, bev_scale);
            Centroid {
                xy: [center[0], center[1]],
                score,
            }
        })
        .collect()
}

/// Nearest-centroid clustering of offset-shifted thing points.
///
/// Centroids that attract no point are dropped and the rest renumbered
/// `1..=n` in their original order; every other point gets instance 0.
pub fn assign_instances(
    xy: &[[f64; 2]],
    semantics: &[u16],
    offsets: ArrayView2<'_, f64>,
    centroids: &[[f64; 2]],
    is_thing: impl Fn(u16) -> bool,
) -> Result<Vec<u16>> {
    assign_with_survivors(xy, semantics, offsets, centroids, is_thing).map(|(ids, _)| ids)
}

fn assign_with_survivors(
    xy: &[[f64; 2]],
    semantics: &[u16],
    offsets: ArrayView2<'_, f64>,
    centroids: &[[f64; 2]],
    is_thing: impl Fn(u16) -> bool,
) -> Result<(Vec<u16>, Vec<bool>)> {
    if xy.len() != semantics.len() || xy.len() != offsets.nrows() || offsets.ncols() != 2 {
        return Err(ScanError::Shape(format!(
            "{} points, {} semantics, offsets {:?}",
            xy.len(),
            semantics.len(),
            offsets.dim()
        )));
    }
    if centroids.len() > u16::MAX as usize {
        return Err(ScanError::InvalidInput(format!("{} centroids exceed the instance id space", centroids.len())));
    }
    let mut nearest = vec![usize::MAX; xy.len()];
    let mut used = vec![false; centroids.len()];
    if !centroids.is_empty() {
        for (i, p) in xy.iter().enumerate() {
            if !is_thing(semantics[i]) {
                continue;
            }
            let sx = p[0] + offsets[[i, 0]];
            let sy = p[1] + offsets[[i, 1]];
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centroids.iter().enumerate() {
                let d = (sx - c[0]).powi(2) + (sy - c[1]).powi(2);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            nearest[i] = best;
            used[best] = true;
        }
    }
    let mut ids = vec![0u16; centroids.len()];
    let mut next = 0u16;
    for (j, &u) in used.iter().enumerate() {
        if u {
            next += 1;
            ids[j] = next;
        }
    }
    let out = nearest
        .into_iter()
        .map(|j| if j == usize::MAX { 0 } else { ids[j] })
        .collect();
    Ok((out, used))
}

/// Relabels every point of an instance with the instance's majority class
/// (ties to the smaller class id). Instance 0 is untouched.
pub fn majority_vote_refine(semantics: &[u16], instances: &[u16]) -> Vec<u16> {
    let mut votes: std::collections::BTreeMap<u16, std::collections::BTreeMap<u16, usize>> = Default::default();
    for (&s, &i) in semantics.iter().zip(instances) {
        if i > 0 {
            *votes.entry(i).or_default().entry(s).or_default() += 1;
        }
    }
    let winner: std::collections::BTreeMap<u16, u16> = votes
        .into_iter()
        .map(|(inst, hist)| {
            // BTreeMap iterates classes ascending, so max_by keeps the last maximum; reverse for the smallest id
            let best = hist
                .iter()
                .rev()
                .max_by_key(|&(_, &n)| n)
                .map(|(&c, _)| c)
                .expect("instance has points");
            (inst, best)
        })
        .collect();
    semantics
        .iter()
        .zip(instances)
        .map(|(&s, &i)| if i > 0 { winner[&i] } else { s })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PanopticPrediction {
    pub semantic: Vec<u16>,
    pub instance: Vec<u16>,
    pub centroids: Vec<Centroid>,
}

impl PanopticPrediction {
    pub fn empty(n: usize) -> Self {
        Self {
            semantic: vec![0; n],
            instance: vec![0; n],
            centroids: Vec::new(),
        }
    }

    pub fn to_labels(&self) -> PointLabels {
        PointLabels {
            semantic: self.semantic.clone(),
            instance: self.instance.clone(),
        }
    }
}

/// Wall-clock time per pipeline stage.
#[derive(Clone, Debug, Default)]
pub struct Timings(pub Vec<(&'static str, Duration)>);

impl Timings {
    fn time<T>(slot: &mut Option<&mut Timings>, name: &'static str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        if let Some(t) = slot.as_deref_mut() {
            t.0.push((name, start.elapsed()));
        }
        out
    }
}

/// Forward pass over the points that survive cropping.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Indices of the kept points in the input cloud.
    pub kept: Vec<usize>,
    pub points: PointCloud,
    pub backbone: BackboneOutput,
    pub attention: SparseTensor,
    pub heads: HeadOutputs,
}

pub fn forward(
    p: &PointCloud,
    model: &Model,
    cfg: &PipelineConfig,
    with_aux: bool,
    mut timings: Option<&mut Timings>,
) -> Result<Option<ForwardOutput>> {
    cfg.validate()?;
    let (points, kept) = Timings::time(&mut timings, "crop", || crop_points(p, &cfg.range));
    if points.is_empty() {
        return Ok(None);
    }
    let backbone = Timings::time(&mut timings, "backbone", || backbone_forward(&points, model, cfg))?;
    let attention = Timings::time(&mut timings, "attention", || {
        cross_scale_attention(
            &backbone.blocks[1],
            &backbone.blocks[2],
            &backbone.blocks[3],
            &model.attention,
            &cfg.attention,
        )
    })?;
    let heatmap = Timings::time(&mut timings, "heatmap", || match cfg.heatmap_kernel {
        HeatmapKernel::Bev => heatmap_head(&attention, &model.heatmap, cfg.bev_extent()),
        HeatmapKernel::Volume => heatmap_head_volume(&attention, &model.heatmap, cfg.bev_extent()),
    })?;
    let (semantics, offsets) = Timings::time(&mut timings, "point_heads", || -> Result<_> {
        let (f, m) = (&backbone.voxel_feats, &backbone.maps);
        let parts = [
            (f[1].view(), &m[1]),
            (f[2].view(), &m[2]),
            (f[3].view(), &m[3]),
            (attention.feats().view(), &m[3]),
        ];
        Ok((fused_point_mlp(&parts, &model.semantic)?, fused_point_mlp(&parts, &model.offset)?))
    })?;
    let aux_voxel_semantics = if with_aux {
        backbone.blocks[1..]
            .iter()
            .zip(&model.aux)
            .map(|(t, head)| ssc_forward(t, head))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok(Some(ForwardOutput {
        kept,
        points,
        backbone,
        attention,
        heads: HeadOutputs {
            heatmap,
            offsets,
            semantics,
            aux_voxel_semantics,
        },
    }))
}

/// Point-wise MLP over the column concatenation of voxel-level parts, each
/// gathered to points through its map. The first layer runs per part on
/// voxels, so neither the gathered nor the concatenated matrix is built.
pub fn fused_point_mlp(parts: &[(ArrayView2<'_, f64>, &Point2Voxel)], layers: &[Linear]) -> Result<Array2<f64>> {
    let Some((first, rest)) = layers.split_first() else {
        return Err(ScanError::Shape("point MLP needs at least one layer".into()));
    };
    let width: usize = parts.iter().map(|p| p.0.ncols()).sum();
    let n = parts.first().map_or(0, |p| p.1.len());
    if width != first.c_in() || parts.iter().any(|p| p.1.len() != n) {
        return Err(ScanError::Shape(format!(
            "first layer expects {} inputs, parts give {width}",
            first.c_in()
        )));
    }
    let c = first.c_out();
    let mut h = Array2::zeros((n, c));
    let mut at = 0;
    for (feats, p2v) in parts {
        let w = first.weight.slice(ndarray::s![at..at + feats.ncols(), ..]);
        at += feats.ncols();
        let partial = feats.dot(&w);
        let dst = h.as_slice_mut().expect("fresh array is contiguous");
        for i in 0..n {
            if let Some(r) = p2v.get(i) {
                for (a, &b) in dst[i * c..(i + 1) * c].iter_mut().zip(partial.row(r)) {
                    *a += b;
                }
            }
        }
    }
    h += &first.bias;
    if first.relu {
        h.mapv_inplace(|v| v.max(0.0));
    }
    mlp_forward(h.view(), rest)
}

/// Centroid extraction, clustering and semantic refinement on cropped points.
pub fn decode(
    points: &PointCloud,
    semantics: &[u16],
    offsets: ArrayView2<'_, f64>,
    heatmap: &CentroidHeatmap,
    cfg: &PipelineConfig,
) -> Result<(Vec<u16>, Vec<u16>, Vec<Centroid>)> {
    let peaks = sparse_max_pool_peaks(heatmap, cfg.pool_window);
    let centroids = top_k_centroids(&peaks, cfg.max_centroids, cfg.score_threshold, &cfg.range, cfg.bev_scale());
    let xy: Vec<[f64; 2]> = points.points().iter().map(|q| [q[0] as f64, q[1] as f64]).collect();
    let centers: Vec<[f64; 2]> = centroids.iter().map(|c| c.xy).collect();
    let (instances, used) = assign_with_survivors(&xy, semantics, offsets, &centers, |c| cfg.is_thing(c))?;
    let refined = majority_vote_refine(semantics, &instances);
    let survivors = centroids.into_iter().zip(used).filter(|(_, u)| *u).map(|(c, _)| c).collect();
    Ok((refined, instances, survivors))
}

/// Runs the full pipeline. Cropped points come back as semantic 0, instance 0.
pub fn run_pipeline(p: &PointCloud, model: &Model, cfg: &PipelineConfig) -> Result<PanopticPrediction> {
    run_pipeline_timed(p, model, cfg, None)
}

pub fn run_pipeline_timed(
    p: &PointCloud,
    model: &Model,
    cfg: &PipelineConfig,
    mut timings: Option<&mut Timings>,
) -> Result<PanopticPrediction> {
    let Some(out) = forward(p, model, cfg, false, timings.as_deref_mut())? else {
        return Ok(PanopticPrediction::empty(p.len()));
    };
    let semantics: Vec<u16> = out.heads.semantics.rows().into_iter().map(argmax_class).collect();
    let decoded = Timings::time(&mut timings, "decode", || {
        decode(&out.points, &semantics, out.heads.offsets.view(), &out.heads.heatmap, cfg)
    })?;
    Ok(scatter_prediction(p.len(), &out.kept, decoded))
}

fn scatter_prediction(n: usize, kept: &[usize], (sem, inst, centroids): (Vec<u16>, Vec<u16>, Vec<Centroid>)) -> PanopticPrediction {
    let mut pred = PanopticPrediction::empty(n);
    for (j, &i) in kept.iter().enumerate() {
        pred.semantic[i] = sem[j];
        pred.instance[i] = inst[j];
    }
    pred.centroids = centroids;
    pred
}

/// Ground-truth head outputs for the whole input cloud.
#[derive(Clone, Debug)]
pub struct OracleHeads {
    pub heatmap: CentroidHeatmap,
    /// `N x 2`, one row per input point.
    pub offsets: Array2<f64>,
    pub semantics: Vec<u16>,
}

/// Mean x/y of each instance's points, keyed by instance id, with its class.
pub fn instance_centroids(points: &PointCloud, labels: &PointLabels) -> Vec<(u16, [f64; 2], u16)> {
    instance_centroids_3d(points, labels)
        .into_iter()
        .map(|(i, c, s)| (i, [c[0], c[1]], s))
        .collect()
}

/// Mean x/y/z of each instance's points, keyed by instance id, with its class.
pub fn instance_centroids_3d(points: &PointCloud, labels: &PointLabels) -> Vec<(u16, [f64; 3], u16)> {
    let mut acc: std::collections::BTreeMap<u16, ([f64; 3], usize, u16)> = Default::default();
    for (q, (&s, &i)) in points.points().iter().zip(labels.semantic.iter().zip(&labels.instance)) {
        if i == 0 {
            continue;
        }
        let e = acc.entry(i).or_insert(([0.0; 3], 0, s));
        for k in 0..3 {
            e.0[k] += q[k] as f64;
        }
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(i, (sum, n, s))| (i, sum.map(|v| v / n as f64), s))
        .collect()
}

/// Offset targets (centroid minus point, meters) and the thing-point mask.
pub fn offset_targets(points: &PointCloud, labels: &PointLabels, cfg: &PipelineConfig) -> (Array2<f64>, Vec<bool>) {
    let centers: std::collections::BTreeMap<u16, [f64; 2]> =
        instance_centroids(points, labels).into_iter().map(|(i, c, _)| (i, c)).collect();
    let mut offsets = Array2::zeros((points.len(), 2));
    let mut mask = vec![false; points.len()];
    for (k, q) in points.points().iter().enumerate() {
        let (s, i) = (labels.semantic[k], labels.instance[k]);
        if i > 0 && cfg.is_thing(s) {
            let c = centers[&i];
            offsets[[k, 0]] = c[0] - q[0] as f64;
            offsets[[k, 1]] = c[1] - q[1] as f64;
            mask[k] = true;
        }
    }
    (offsets, mask)
}

/// BEV support of the cropped points at the centroid grid scale.
pub fn bev_support(points: &PointCloud, cfg: &PipelineConfig) -> Result<Vec<VoxelCoord>> {
    let (coords, _) = voxelize_coords(points, cfg.bev_scale(), &cfg.range)?;
    let t = SparseTensor::from_parts(coords.clone(), Array2::zeros((coords.len(), 0)), cfg.bev_scale());
    Ok(flatten_bev(&t).into_parts().0)
}

/// Gaussian centroid heatmap of the ground-truth instances on the cloud's BEV support.
pub fn heatmap_target(points: &PointCloud, labels: &PointLabels, cfg: &PipelineConfig) -> Result<CentroidHeatmap> {
    let (cropped, kept) = crop_points(points, &cfg.range);
    let labels = labels.select(&kept);
    let instances: Vec<([f64; 3], u16)> = instance_centroids_3d(&cropped, &labels)
        .into_iter()
        .filter(|(_, _, s)| cfg.is_thing(*s))
        .map(|(_, c, s)| (c, s))
        .collect();
    let bev = cfg.bev_scale();
    match cfg.heatmap_kernel {
        HeatmapKernel::Bev => {
            let flat: Vec<([f64; 2], u16)> = instances.iter().map(|(c, s)| ([c[0], c[1]], *s)).collect();
            let support = bev_support(&cropped, cfg)?;
            gaussian_heatmap_target(&flat, &support, &cfg.range, [bev[0], bev[1]], cfg.target_sigma, cfg.bev_extent())
        }
        HeatmapKernel::Volume => {
            let (support, _) = voxelize_coords(&cropped, bev, &cfg.range)?;
            gaussian_heatmap_target_volume(&instances, &support, &cfg.range, bev, cfg.target_sigma, cfg.bev_extent())
        }
    }
}

impl OracleHeads {
    pub fn from_ground_truth(points: &PointCloud, labels: &PointLabels, cfg: &PipelineConfig) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(ScanError::Shape(format!("{} points, {} labels", points.len(), labels.len())));
        }
        let (offsets, _) = offset_targets(points, labels, cfg);
        Ok(Self {
            heatmap: heatmap_target(points, labels, cfg)?,
            offsets,
            semantics: labels.semantic.clone(),
        })
    }
}

/// Decoder-only run with ground-truth heads injected.
pub fn run_pipeline_oracle(p: &PointCloud, heads: &OracleHeads, cfg: &PipelineConfig) -> Result<PanopticPrediction> {
    cfg.validate()?;
    if heads.semantics.len() != p.len() || heads.offsets.nrows() != p.len() {
        return Err(ScanError::Shape("oracle heads do not match the point count".into()));
    }
    let (points, kept) = crop_points(p, &cfg.range);
    if points.is_empty() {
        return Ok(PanopticPrediction::empty(p.len()));
    }
    let semantics: Vec<u16> = kept.iter().map(|&i| heads.semantics[i]).collect();
    let offsets = heads.offsets.select(Axis(0), &kept);
    let decoded = decode(&points, &semantics, offsets.view(), &heads.heatmap, cfg)?;
    Ok(scatter_prediction(p.len(), &kept, decoded))
}

/// Supervision for a forward pass built from ground-truth labels of the input cloud.
pub fn frame_targets(out: &ForwardOutput, labels: &PointLabels, cfg: &PipelineConfig) -> Result<FrameTargets> {
    let labels = labels.select(&out.kept);
    let target = heatmap_target(&out.points, &labels, cfg)?;
    let heatmap = target_on_support(&target, out.heads.heatmap.coords());
    let (offsets, offset_mask) = offset_targets(&out.points, &labels, cfg);
    let aux = out.backbone.blocks[1..]
        .iter()
        .zip(&out.backbone.maps[1..])
        .map(|(t, p2v)| Ok((t.coords().to_vec(), soft_voxel_labels(&labels, p2v, cfg.n_classes)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameTargets {
        heatmap,
        offsets,
        offset_mask,
        semantic: labels.semantic,
        aux,
    })
}
