//! Point clouds, cropping, voxelization and the point <-> voxel maps.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{Result, ScanError};
use crate::sparse::{unique_with_inverse, SparseTensor, VoxelCoord};

/// Raw LiDAR points, one `(x, y, z, intensity)` row each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<[f32; 4]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 4]>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ScanError::InvalidInput("non-finite point entry".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f32; 4]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The points as an `N x 4` matrix.
    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), 4), |(i, k)| self.points[i][k] as f64)
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            points: rows.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

/// Per-point semantic class and instance id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PointLabels {
    pub semantic: Vec<u16>,
    pub instance: Vec<u16>,
}

impl PointLabels {
    pub fn new(semantic: Vec<u16>, instance: Vec<u16>) -> Result<Self> {
        if semantic.len() != instance.len() {
            return Err(ScanError::Shape(format!(
                "{} semantic labels but {} instance labels",
                semantic.len(),
                instance.len()
            )));
        }
        Ok(Self { semantic, instance })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            semantic: vec![0; n],
            instance: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }

    /// Checks that only points of a thing class carry an instance id.
    pub fn validate(&self, is_thing: impl Fn(u16) -> bool) -> Result<()> {
        match self
            .semantic
            .iter()
            .zip(&self.instance)
            .position(|(&s, &i)| i > 0 && !is_thing(s))
        {
            Some(p) => Err(ScanError::InvalidInput(format!(
                "point {p} has instance id but non-thing class {}",
                self.semantic[p]
            ))),
            None => Ok(()),
        }
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            semantic: rows.iter().map(|&i| self.semantic[i]).collect(),
            instance: rows.iter().map(|&i| self.instance[i]).collect(),
        }
    }
}

/// Axis-aligned voxelization space in meters; points must satisfy `min <= v < max`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelRange {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl VoxelRange {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|k| !(min[k] < max[k])) {
            return Err(ScanError::InvalidInput(format!("empty range {min:?}..{max:?}")));
        }
        Ok(Self { min, max })
    }

    /// [-48, 48] x [-48, 48] x [-3, 1.5] meters.
    pub fn semantic_kitti() -> Self {
        Self {
            min: [-48.0, -48.0, -3.0],
            max: [48.0, 48.0, 1.5],
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| self.min[k] <= p[k] && p[k] < self.max[k])
    }

    /// Number of voxels along each axis at the given voxel size.
    pub fn grid_dims(&self, scale: [f64; 3]) -> [usize; 3] {
        let mut dims = [0; 3];
        for k in 0..3 {
            dims[k] = ((self.max[k] - self.min[k]) / scale[k] - 1e-6).ceil().max(1.0) as usize;
        }
        dims
    }

    /// Voxel index of a point inside the range.
    pub fn voxel_of(&self, p: [f64; 3], scale: [f64; 3]) -> VoxelCoord {
        let dims = self.grid_dims(scale);
        let mut v = [0i32; 3];
        for k in 0..3 {
            let cell = ((p[k] - self.min[k]) / scale[k]).floor() as i64;
            v[k] = cell.clamp(0, dims[k] as i64 - 1) as i32;
        }
        VoxelCoord::from(v)
    }

    /// Center of a voxel in meters.
    pub fn voxel_center(&self, c: VoxelCoord, scale: [f64; 3]) -> [f64; 3] {
        let v = c.to_array();
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[k] = self.min[k] + (v[k] as f64 + 0.5) * scale[k];
        }
        out
    }
}

/// Keeps the points inside `range`; returns them with their original indices.
pub fn crop_points(p: &PointCloud, range: &VoxelRange) -> (PointCloud, Vec<usize>) {
    let kept: Vec<usize> = p
        .points()
        .iter()
        .enumerate()
        .filter(|(_, q)| range.contains([q[0] as f64, q[1] as f64, q[2] as f64]))
        .map(|(i, _)| i)
        .collect();
    (p.select(&kept), kept)
}

/// Point-to-voxel row map. Cropped points hold [`Point2Voxel::CROPPED`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Point2Voxel {
    rows: Vec<u32>,
    voxel_count: usize,
}

impl Point2Voxel {
    pub const CROPPED: u32 = u32::MAX;

    pub fn new(rows: Vec<u32>, voxel_count: usize) -> Result<Self> {
        if let Some(r) = rows.iter().find(|&&r| r != Self::CROPPED && r as usize >= voxel_count) {
            return Err(ScanError::Consistency(format!("voxel row {r} >= {voxel_count}")));
        }
        Ok(Self { rows, voxel_count })
    }

    pub fn rows(&self) -> &[u32] {
        &self.rows
    }

    pub fn voxel_count(&self) -> usize {
        self.voxel_count
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, point: usize) -> Option<usize> {
        match self.rows[point] {
            Self::CROPPED => None,
            r => Some(r as usize),
        }
    }
}

/// Voxel coordinates of the points, sorted and unique, with the point map.
pub fn voxelize_coords(p: &PointCloud, scale: [f64; 3], range: &VoxelRange) -> Result<(Vec<VoxelCoord>, Point2Voxel)> {
    if scale.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
        return Err(ScanError::Scale(format!("voxel size {scale:?} must be positive")));
    }
    let mut kept = Vec::with_capacity(p.len());
    let mut coords = Vec::with_capacity(p.len());
    for (i, q) in p.points().iter().enumerate() {
        let xyz = [q[0] as f64, q[1] as f64, q[2] as f64];
        if range.contains(xyz) {
            kept.push(i);
            coords.push(range.voxel_of(xyz, scale));
        }
    }
    let (unique, inverse) = unique_with_inverse(&coords);
    let mut rows = vec![Point2Voxel::CROPPED; p.len()];
    for (&i, &r) in kept.iter().zip(&inverse) {
        rows[i] = r as u32;
    }
    let voxel_count = unique.len();
    Ok((unique, Point2Voxel { rows, voxel_count }))
}

/// Mean of the point rows that fall into each voxel.
pub fn pool_mean(point_feats: ArrayView2<'_, f64>, p2v: &Point2Voxel) -> Result<Array2<f64>> {
    if point_feats.nrows() != p2v.len() {
        return Err(ScanError::Shape(format!(
            "{} feature rows for {} points",
            point_feats.nrows(),
            p2v.len()
        )));
    }
    let mut sums = Array2::zeros((p2v.voxel_count, point_feats.ncols()));
    let mut counts = vec![0usize; p2v.voxel_count];
    for (i, row) in point_feats.rows().into_iter().enumerate() {
        if let Some(r) = p2v.get(i) {
            counts[r] += 1;
            let mut dst = sums.row_mut(r);
            dst += &row;
        }
    }
    for (mut row, &n) in sums.rows_mut().into_iter().zip(&counts) {
        if n == 0 {
            return Err(ScanError::Consistency("voxel without member points".into()));
        }
        row /= n as f64;
    }
    Ok(sums)
}

/// Voxelizes a cloud; each voxel's feature is the mean `(x, y, z, intensity)` of its points.
pub fn voxelize(p: &PointCloud, scale: [f64; 3], range: &VoxelRange) -> Result<(SparseTensor, Point2Voxel)> {
    let (coords, p2v) = voxelize_coords(p, scale, range)?;
    let feats = pool_mean(p.to_matrix().view(), &p2v)?;
    Ok((SparseTensor::from_parts(coords, feats, scale), p2v))
}

/// Copies each voxel's feature row back to its member points; cropped points get zeros.
pub fn gather_voxel_to_point(t: &SparseTensor, p2v: &Point2Voxel) -> Result<Array2<f64>> {
    gather_rows(t.feats().view(), p2v)
}

/// Row `p2v[i]` of `feats` for every point `i`, zeros for cropped points.
pub fn gather_rows(feats: ArrayView2<'_, f64>, p2v: &Point2Voxel) -> Result<Array2<f64>> {
    if p2v.voxel_count != feats.nrows() {
        return Err(ScanError::Consistency(format!(
            "point map refers to {} voxels, features have {} rows",
            p2v.voxel_count,
            feats.nrows()
        )));
    }
    let mut out = Array2::zeros((p2v.len(), feats.ncols()));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        if let Some(r) = p2v.get(i) {
            row.assign(&feats.row(r));
        }
    }
    Ok(out)
}

/// `pool_mean(gather_rows(feats, prev), p2v)` without building the per-point matrix.
pub fn pool_mean_mapped(feats: ArrayView2<'_, f64>, prev: &Point2Voxel, p2v: &Point2Voxel) -> Result<Array2<f64>> {
    if prev.len() != p2v.len() || prev.voxel_count != feats.nrows() {
        return Err(ScanError::Consistency(format!(
            "maps over {} and {} points, {} source voxels for {} feature rows",
            prev.len(),
            p2v.len(),
            prev.voxel_count,
            feats.nrows()
        )));
    }
    let c = feats.ncols();
    let mut sums = Array2::zeros((p2v.voxel_count, c));
    let mut counts = vec![0usize; p2v.voxel_count];
    let zero = ndarray::Array1::zeros(c);
    for i in 0..p2v.len() {
        if let Some(r) = p2v.get(i) {
            counts[r] += 1;
            let mut dst = sums.row_mut(r);
            match prev.get(i) {
                Some(q) => dst += &feats.row(q),
                None => dst += &zero,
            }
        }
    }
    for (mut row, &n) in sums.rows_mut().into_iter().zip(&counts) {
        if n == 0 {
            return Err(ScanError::Consistency("voxel without member points".into()));
        }
        row /= n as f64;
    }
    Ok(sums)
}

/// Per-voxel class proportions, `M x n_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftVoxelLabels(pub Array2<f64>);

impl SoftVoxelLabels {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }
}

pub fn soft_voxel_labels(labels: &PointLabels, p2v: &Point2Voxel, n_classes: usize) -> Result<SoftVoxelLabels> {
    if labels.len() != p2v.len() {
        return Err(ScanError::Shape(format!("{} labels for {} points", labels.len(), p2v.len())));
    }
    let mut hist = Array2::<f64>::zeros((p2v.voxel_count, n_classes));
    for (i, &s) in labels.semantic.iter().enumerate() {
        if s as usize >= n_classes {
            return Err(ScanError::InvalidInput(format!("class {s} >= {n_classes}")));
        }
        if let Some(r) = p2v.get(i) {
            hist[[r, s as usize]] += 1.0;
        }
    }
    for mut row in hist.rows_mut() {
        let total = row.sum();
        if total == 0.0 {
            return Err(ScanError::Consistency("voxel without member points".into()));
        }
        row /= total;
    }
    Ok(SoftVoxelLabels(hist))
}

/// How the three flips act on (x, y).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FlipConvention {
    /// Flip "along" an axis mirrors across the plane containing it:
    /// x-flip negates y, y-flip negates x, xy-flip swaps x and y.
    #[default]
    Mirror,
    /// Flip an axis negates that coordinate; xy-flip negates both.
    Negate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentParams {
    pub angle: f64,
    pub flip_x: bool,
    pub flip_y: bool,
    pub flip_xy: bool,
    pub convention: FlipConvention,
}

impl AugmentParams {
    /// Rotation (uniform angle in [-pi, pi]) and each flip are applied
    /// independently with probability 1/2.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, convention: FlipConvention) -> Self {
        let rotate = rng.random_bool(0.5);
        let angle = rng.random_range(-std::f64::consts::PI..=std::f64::consts::PI);
        Self {
            angle: if rotate { angle } else { 0.0 },
            flip_x: rng.random_bool(0.5),
            flip_y: rng.random_bool(0.5),
            flip_xy: rng.random_bool(0.5),
            convention,
        }
    }

    fn apply_xy(&self, x: f64, y: f64) -> (f64, f64) {
        let (sin, cos) = self.angle.sin_cos();
        let (mut x, mut y) = (cos * x - sin * y, sin * x + cos * y);
        match self.convention {
            FlipConvention::Mirror => {
                if self.flip_x {
                    y = -y;
                }
                if self.flip_y {
                    x = -x;
                }
                if self.flip_xy {
                    std::mem::swap(&mut x, &mut y);
                }
            }
            FlipConvention::Negate => {
                if self.flip_x {
                    x = -x;
                }
                if self.flip_y {
                    y = -y;
                }
                if self.flip_xy {
                    x = -x;
                    y = -y;
                }
            }
        }
        (x, y)
    }
}

/// Rotates about z and flips; z, intensity and labels are untouched.
pub fn augment(p: &PointCloud, labels: &PointLabels, params: &AugmentParams) -> Result<(PointCloud, PointLabels)> {
    if !(-std::f64::consts::PI..=std::f64::consts::PI).contains(&params.angle) {
        return Err(ScanError::InvalidInput(format!("rotation angle {} outside [-pi, pi]", params.angle)));
    }
    let points = p
        .points()
        .iter()
        .map(|q| {
            let (x, y) = params.apply_xy(q[0] as f64, q[1] as f64);
            [x as f32, y as f32, q[2], q[3]]
        })
        .collect();
    Ok((PointCloud { points }, labels.clone()))
}
