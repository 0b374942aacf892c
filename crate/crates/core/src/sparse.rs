//! Coordinate-indexed sparse voxel tensors and the operators built on them.
//!
//! A [`SparseTensor`] pairs a duplicate-free list of integer voxel coordinates
//! with one feature row per coordinate. Coordinates are looked up through a
//! [`CoordIndex`], which packs each coordinate into a collision-free 63-bit key.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2};
use rustc_hash::FxHashMap;

use crate::error::{Result, ScanError};

/// Bias added to every axis before packing; also the magnitude of the lowest valid component.
pub const COORD_BIAS: i64 = 1 << 20;
pub const COORD_MIN: i32 = -(1 << 20);
pub const COORD_MAX: i32 = (1 << 20) - 1;

/// Reserved "not found" slot in an index mask. Never a valid row.
pub const MISS: usize = usize::MAX;

/// Integer voxel coordinate. Ordering is lexicographic in (x, y, z).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct VoxelCoord {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl VoxelCoord {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { x, y, z }
    }

    pub fn in_packing_range(&self) -> bool {
        [self.x, self.y, self.z]
            .iter()
            .all(|&v| (COORD_MIN..=COORD_MAX).contains(&v))
    }

    pub fn offset(&self, d: [i32; 3]) -> Self {
        Self::new(self.x + d[0], self.y + d[1], self.z + d[2])
    }

    pub fn to_array(self) -> [i32; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[i32; 3]> for VoxelCoord {
    fn from(v: [i32; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

/// Packs a coordinate into a 64-bit key, 21 bits per axis.
pub fn pack_coord(c: VoxelCoord) -> Result<u64> {
    try_pack(c).ok_or(ScanError::CoordOutOfRange(c))
}

#[inline]
fn try_pack(c: VoxelCoord) -> Option<u64> {
    if !c.in_packing_range() {
        return None;
    }
    let x = (c.x as i64 + COORD_BIAS) as u64;
    let y = (c.y as i64 + COORD_BIAS) as u64;
    let z = (c.z as i64 + COORD_BIAS) as u64;
    Some((x << 42) | (y << 21) | z)
}

/// Inverse of [`pack_coord`].
pub fn unpack_coord(key: u64) -> VoxelCoord {
    let mask = (1u64 << 21) - 1;
    let axis = |shift: u32| (((key >> shift) & mask) as i64 - COORD_BIAS) as i32;
    VoxelCoord::new(axis(42), axis(21), axis(0))
}

/// Lookup from packed coordinate keys to row indices.
#[derive(Clone, Debug, Default)]
pub struct CoordIndex {
    rows: FxHashMap<u64, usize>,
}

impl CoordIndex {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, c: VoxelCoord) -> Option<usize> {
        try_pack(c).and_then(|k| self.rows.get(&k).copied())
    }

    pub fn contains(&self, c: VoxelCoord) -> bool {
        self.get(c).is_some()
    }
}

/// Builds the row index for a duplicate-free coordinate list.
pub fn build_index(coords: &[VoxelCoord]) -> Result<CoordIndex> {
    let mut rows = FxHashMap::with_capacity_and_hasher(coords.len(), Default::default());
    for (i, &c) in coords.iter().enumerate() {
        if rows.insert(pack_coord(c)?, i).is_some() {
            return Err(ScanError::DuplicateCoord(c));
        }
    }
    Ok(CoordIndex { rows })
}

/// For every target, the row holding it in `index`, or [`MISS`].
pub fn hash_query(targets: &[VoxelCoord], index: &CoordIndex) -> Vec<usize> {
    targets
        .iter()
        .map(|&c| index.get(c).unwrap_or(MISS))
        .collect()
}

/// Sparse voxel tensor: coordinates, one feature row each, and the voxel size in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTensor {
    coords: Vec<VoxelCoord>,
    feats: Array2<f64>,
    scale: [f64; 3],
}

impl SparseTensor {
    pub fn new(coords: Vec<VoxelCoord>, feats: Array2<f64>, scale: [f64; 3]) -> Result<Self> {
        if feats.nrows() != coords.len() {
            return Err(ScanError::Shape(format!(
                "{} coordinates but {} feature rows",
                coords.len(),
                feats.nrows()
            )));
        }
        if scale.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(ScanError::Scale(format!("voxel size {scale:?} must be positive")));
        }
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(ScanError::InvalidInput("non-finite feature entry".into()));
        }
        build_index(&coords)?;
        Ok(Self {
            coords,
            feats,
            scale,
        })
    }

    /// Construction for callers that already guarantee the invariants.
    pub(crate) fn from_parts(coords: Vec<VoxelCoord>, feats: Array2<f64>, scale: [f64; 3]) -> Self {
        debug_assert_eq!(coords.len(), feats.nrows());
        Self {
            coords,
            feats,
            scale,
        }
    }

    pub fn empty(channels: usize, scale: [f64; 3]) -> Self {
        Self::from_parts(Vec::new(), Array2::zeros((0, channels)), scale)
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn feats(&self) -> &Array2<f64> {
        &self.feats
    }

    pub fn scale(&self) -> [f64; 3] {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.feats.ncols()
    }

    pub fn into_parts(self) -> (Vec<VoxelCoord>, Array2<f64>, [f64; 3]) {
        (self.coords, self.feats, self.scale)
    }

    pub fn index(&self) -> CoordIndex {
        // coords are duplicate-free and in range by construction
        build_index(&self.coords).expect("sparse tensor invariants")
    }

    /// Same support and scale, new features.
    pub fn with_feats(&self, feats: Array2<f64>) -> Result<Self> {
        if feats.nrows() != self.len() {
            return Err(ScanError::Shape(format!(
                "expected {} feature rows, got {}",
                self.len(),
                feats.nrows()
            )));
        }
        Ok(Self::from_parts(self.coords.clone(), feats, self.scale))
    }

    /// Exact equality including the bit patterns of every feature.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.coords == other.coords
            && self.feats.dim() == other.feats.dim()
            && self
                .feats
                .iter()
                .zip(other.feats.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self.scale.map(f64::to_bits) == other.scale.map(f64::to_bits)
    }
}

/// Reorders rows so that output row `j` is input row `mask[j]`.
pub fn rearrange(t: &SparseTensor, mask: &[usize]) -> Result<SparseTensor> {
    let m = t.len();
    if let Some((j, &e)) = mask.iter().enumerate().find(|(_, &e)| e >= m) {
        return Err(ScanError::Alignment(if e == MISS {
            format!("index mask slot {j} is a miss")
        } else {
            format!("index mask slot {j} points at row {e} of {m}")
        }));
    }
    let coords = mask.iter().map(|&e| t.coords[e]).collect();
    let feats = t.feats.select(ndarray::Axis(0), mask);
    Ok(SparseTensor::from_parts(coords, feats, t.scale))
}

/// Places `t`'s features onto `support`: rows present in `t` are copied, rows
/// missing from `t` are zero, and voxels of `t` outside `support` are dropped.
pub fn align_to_support(t: &SparseTensor, support: &[VoxelCoord]) -> SparseTensor {
    let index = t.index();
    let mask = hash_query(support, &index);
    let mut feats = Array2::zeros((support.len(), t.channels()));
    for (j, &e) in mask.iter().enumerate() {
        if e != MISS {
            feats.row_mut(j).assign(&t.feats.row(e));
        }
    }
    SparseTensor::from_parts(support.to_vec(), feats, t.scale)
}

/// Floor-divides every coordinate by `factor` per axis and merges duplicates.
///
/// Returns the lexicographically sorted unique coordinates and, for every
/// input, the row of its downscaled coordinate in that list.
pub fn downscale_unique_axes(coords: &[VoxelCoord], factor: [u32; 3]) -> (Vec<VoxelCoord>, Vec<usize>) {
    assert!(factor.iter().all(|&f| f >= 1), "downscale factor must be >= 1");
    let f = factor.map(|v| v as i32);
    let down: Vec<VoxelCoord> = coords
        .iter()
        .map(|c| VoxelCoord::new(c.x.div_euclid(f[0]), c.y.div_euclid(f[1]), c.z.div_euclid(f[2])))
        .collect();
    unique_with_inverse(&down)
}

/// Isotropic form of [`downscale_unique_axes`].
pub fn downscale_unique(coords: &[VoxelCoord], factor: u32) -> (Vec<VoxelCoord>, Vec<usize>) {
    downscale_unique_axes(coords, [factor; 3])
}

pub(crate) fn unique_with_inverse(coords: &[VoxelCoord]) -> (Vec<VoxelCoord>, Vec<usize>) {
    let mut unique = coords.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let inverse = coords
        .iter()
        .map(|c| unique.binary_search(c).expect("coordinate present in its own unique set"))
        .collect();
    (unique, inverse)
}

/// Per-channel maximum of the feature rows that share an output row.
pub fn scatter_max(feats: ArrayView2<'_, f64>, inverse: &[usize], rows_out: usize) -> Result<Array2<f64>> {
    if inverse.len() != feats.nrows() {
        return Err(ScanError::Shape(format!(
            "{} inverse entries for {} feature rows",
            inverse.len(),
            feats.nrows()
        )));
    }
    let mut out = Array2::from_elem((rows_out, feats.ncols()), f64::NEG_INFINITY);
    let mut hits = vec![0usize; rows_out];
    for (row, &k) in feats.rows().into_iter().zip(inverse) {
        if k >= rows_out {
            return Err(ScanError::Shape(format!("inverse entry {k} >= {rows_out}")));
        }
        hits[k] += 1;
        for (o, &v) in out.row_mut(k).iter_mut().zip(row) {
            if v > *o {
                *o = v;
            }
        }
    }
    if let Some(k) = hits.iter().position(|&h| h == 0) {
        return Err(ScanError::Consistency(format!("output row {k} received no input")));
    }
    Ok(out)
}

/// Integer ratio between two voxel sizes, per axis.
pub fn scale_factor(from: [f64; 3], to: [f64; 3]) -> Result<[u32; 3]> {
    let mut factor = [1u32; 3];
    for k in 0..3 {
        let ratio = to[k] / from[k];
        let rounded = ratio.round();
        if !(rounded >= 1.0 && (ratio - rounded).abs() <= 1e-6 * ratio) {
            return Err(ScanError::Scale(format!(
                "target voxel size {} is not an integer multiple of {} on axis {k}",
                to[k], from[k]
            )));
        }
        factor[k] = rounded as u32;
    }
    Ok(factor)
}

/// Sparse alignment: downscale to `to_scale`, merge duplicates, max-aggregate features.
pub fn sparse_align(t: &SparseTensor, to_scale: [f64; 3]) -> Result<SparseTensor> {
    let factor = scale_factor(t.scale, to_scale)?;
    let (unique, inverse) = downscale_unique_axes(&t.coords, factor);
    let feats = scatter_max(t.feats.view(), &inverse, unique.len())?;
    Ok(SparseTensor::from_parts(unique, feats, to_scale))
}

/// Collapses the z axis: every output voxel has z = 0 and carries the
/// per-channel maximum over its (x, y) column.
pub fn flatten_bev(t: &SparseTensor) -> SparseTensor {
    let flat: Vec<VoxelCoord> = t.coords.iter().map(|c| VoxelCoord::new(c.x, c.y, 0)).collect();
    let (unique, inverse) = unique_with_inverse(&flat);
    let feats = scatter_max(t.feats.view(), &inverse, unique.len()).expect("every BEV cell has a source voxel");
    SparseTensor::from_parts(unique, feats, t.scale)
}

/// Class-agnostic BEV centroid activations on a `w x h` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidHeatmap {
    tensor: SparseTensor,
    extent: [usize; 2],
}

impl CentroidHeatmap {
    pub fn new(tensor: SparseTensor, extent: [usize; 2]) -> Result<Self> {
        if tensor.channels() != 1 {
            return Err(ScanError::Shape(format!(
                "heatmap must have one channel, got {}",
                tensor.channels()
            )));
        }
        for c in tensor.coords() {
            if c.z != 0 {
                return Err(ScanError::InvalidInput(format!("heatmap voxel {c:?} has z != 0")));
            }
            if c.x < 0 || c.y < 0 || c.x as usize >= extent[0] || c.y as usize >= extent[1] {
                return Err(ScanError::InvalidInput(format!(
                    "heatmap voxel {c:?} outside the {}x{} grid",
                    extent[0], extent[1]
                )));
            }
        }
        if tensor.feats().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ScanError::InvalidInput("heatmap activation outside [0, 1]".into()));
        }
        Ok(Self { tensor, extent })
    }

    pub fn tensor(&self) -> &SparseTensor {
        &self.tensor
    }

    pub fn extent(&self) -> [usize; 2] {
        self.extent
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        self.tensor.coords()
    }

    pub fn scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensor.feats().column(0).into_iter().copied()
    }

    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }
}

/// Voxels whose activation is the maximum of their `window x window` BEV
/// neighbourhood, counting only valid voxels. Ties are all kept.
///
/// Sorted by descending score, then lexicographic coordinate.
pub fn sparse_max_pool_peaks(d: &CentroidHeatmap, window: usize) -> Vec<(VoxelCoord, f64)> {
    assert!(window % 2 == 1, "pooling window must be odd");
    let r = (window / 2) as i32;
    let index = d.tensor.index();
    let scores = d.tensor.feats().column(0);
    let mut peaks: Vec<(VoxelCoord, f64)> = d
        .coords()
        .iter()
        .enumerate()
        .filter(|&(_, &c)| {
            let own = scores[index.get(c).expect("own coordinate")];
            (-r..=r).all(|dx| {
                (-r..=r).all(|dy| match index.get(c.offset([dx, dy, 0])) {
                    Some(j) => scores[j] <= own,
                    None => true,
                })
            })
        })
        .map(|(i, &c)| (c, scores[i]))
        .collect();
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    peaks
}

/// One submanifold sparse convolution layer.
///
/// `weight` has shape `[kernel volume, c_in, c_out]`; kernel offsets are
/// enumerated with x outermost and z innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct SscLayer {
    extent: [usize; 3],
    weight: Array3<f64>,
    bias: Array1<f64>,
    relu: bool,
}

impl SscLayer {
    pub fn new(extent: [usize; 3], weight: Array3<f64>, bias: Array1<f64>, relu: bool) -> Result<Self> {
        if extent.iter().any(|&k| k % 2 == 0) {
            return Err(ScanError::Shape(format!("kernel extent {extent:?} must be odd")));
        }
        let volume: usize = extent.iter().product();
        let (kv, _, c_out) = weight.dim();
        if kv != volume {
            return Err(ScanError::Shape(format!(
                "kernel extent {extent:?} needs {volume} weight slices, got {kv}"
            )));
        }
        if bias.len() != c_out {
            return Err(ScanError::Shape(format!("bias length {} != c_out {c_out}", bias.len())));
        }
        Ok(Self {
            extent,
            weight,
            bias,
            relu,
        })
    }

    /// K x K x K kernel.
    pub fn cubic(k: usize, weight: Array3<f64>, bias: Array1<f64>, relu: bool) -> Result<Self> {
        Self::new([k, k, k], weight, bias, relu)
    }

    /// K x K x 1 kernel for BEV maps.
    pub fn planar(k: usize, weight: Array3<f64>, bias: Array1<f64>, relu: bool) -> Result<Self> {
        Self::new([k, k, 1], weight, bias, relu)
    }

    pub fn extent(&self) -> [usize; 3] {
        self.extent
    }

    pub fn weight(&self) -> &Array3<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn relu(&self) -> bool {
        self.relu
    }

    pub fn c_in(&self) -> usize {
        self.weight.dim().1
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim().2
    }

    /// Kernel offsets in weight-slice order.
    pub fn offsets(&self) -> Vec<[i32; 3]> {
        let r = self.extent.map(|k| (k / 2) as i32);
        let mut out = Vec::with_capacity(self.weight.dim().0);
        for dx in -r[0]..=r[0] {
            for dy in -r[1]..=r[1] {
                for dz in -r[2]..=r[2] {
                    out.push([dx, dy, dz]);
                }
            }
        }
        out
    }
}

const SSC_CHUNK: usize = 256;

/// Active (output row, input row) pairs of every kernel offset over one support.
///
/// Both SSC layers of a block share their support, so the map is built once
/// and reused.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMap {
    offsets: Vec<[i32; 3]>,
    pairs: Vec<(Vec<usize>, Vec<usize>)>,
    rows: usize,
}

impl KernelMap {
    pub fn new(coords: &[VoxelCoord], offsets: &[[i32; 3]]) -> Result<Self> {
        let index = build_index(coords)?;
        let pairs = offsets
            .iter()
            .map(|&d| {
                let mut out = Vec::new();
                let mut inp = Vec::new();
                if d != [0, 0, 0] {
                    for (i, c) in coords.iter().enumerate() {
                        if let Some(j) = index.get(c.offset(d)) {
                            out.push(i);
                            inp.push(j);
                        }
                    }
                }
                (out, inp)
            })
            .collect();
        Ok(Self {
            offsets: offsets.to_vec(),
            pairs,
            rows: coords.len(),
        })
    }

    pub fn for_layer(t: &SparseTensor, layer: &SscLayer) -> Result<Self> {
        Self::new(&t.coords, &layer.offsets())
    }

    pub fn offsets(&self) -> &[[i32; 3]] {
        &self.offsets
    }

    /// Number of active neighbour pairs, excluding the centre.
    pub fn pair_count(&self) -> usize {
        self.pairs.iter().map(|p| p.0.len()).sum()
    }
}

/// Submanifold sparse convolution: outputs exist exactly at the input sites and
/// only active neighbours contribute.
pub fn ssc_forward(t: &SparseTensor, layer: &SscLayer) -> Result<SparseTensor> {
    ssc_forward_mapped(t, layer, &KernelMap::for_layer(t, layer)?)
}

/// [`ssc_forward`] with a precomputed kernel map for `t`'s support.
pub fn ssc_forward_mapped(t: &SparseTensor, layer: &SscLayer, map: &KernelMap) -> Result<SparseTensor> {
    if t.channels() != layer.c_in() {
        return Err(ScanError::Shape(format!(
            "layer expects {} input channels, tensor has {}",
            layer.c_in(),
            t.channels()
        )));
    }
    if map.rows != t.len() || map.offsets != layer.offsets() {
        return Err(ScanError::Consistency("kernel map was built for a different support or kernel".into()));
    }
    let (m, cin, cout) = (t.len(), layer.c_in(), layer.c_out());
    let mut out = Array2::zeros((m, cout));
    let src = t.feats.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    // small chunks keep the gathered rows and their products in cache
    let mut gathered = Array2::<f64>::zeros((SSC_CHUNK, cin));
    let mut contrib = Array2::<f64>::zeros((SSC_CHUNK, cout));
    for (o, (rows_out, rows_in)) in map.pairs.iter().enumerate() {
        let w = layer.weight.slice(s![o, .., ..]);
        if map.offsets[o] == [0, 0, 0] {
            general_mat_mul(1.0, &t.feats, &w, 1.0, &mut out);
            continue;
        }
        for (outs, ins) in rows_out.chunks(SSC_CHUNK).zip(rows_in.chunks(SSC_CHUNK)) {
            let n = ins.len();
            let g = gathered.as_slice_mut().expect("contiguous buffer");
            for (k, &j) in ins.iter().enumerate() {
                g[k * cin..(k + 1) * cin].copy_from_slice(&src[j * cin..(j + 1) * cin]);
            }
            let mut c = contrib.slice_mut(s![..n, ..]);
            general_mat_mul(1.0, &gathered.slice(s![..n, ..]), &w, 0.0, &mut c);
            let c = contrib.as_slice().expect("contiguous buffer");
            let dst = out.as_slice_mut().expect("fresh array is contiguous");
            for (k, &i) in outs.iter().enumerate() {
                for (a, &b) in dst[i * cout..(i + 1) * cout].iter_mut().zip(&c[k * cout..(k + 1) * cout]) {
                    *a += b;
                }
            }
        }
    }
    out += &layer.bias;
    if layer.relu {
        out.mapv_inplace(|v| v.max(0.0));
    }
    Ok(SparseTensor::from_parts(t.coords.clone(), out, t.scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn c(x: i32, y: i32, z: i32) -> VoxelCoord {
        VoxelCoord::new(x, y, z)
    }

    #[test]
    fn pack_known_values() {
        let b = 1u64 << 20;
        assert_eq!(pack_coord(c(0, 0, 0)).unwrap(), (b << 42) | (b << 21) | b);
        assert_eq!(pack_coord(c(COORD_MIN, COORD_MIN, COORD_MIN)).unwrap(), 0);
        assert!(matches!(
            pack_coord(c(COORD_MAX + 1, 0, 0)),
            Err(ScanError::CoordOutOfRange(_))
        ));
        assert!(pack_coord(c(0, COORD_MIN - 1, 0)).is_err());
        let k = pack_coord(c(COORD_MAX, -5, 17)).unwrap();
        assert_eq!(unpack_coord(k), c(COORD_MAX, -5, 17));
    }

    #[test]
    fn index_basics() {
        let idx = build_index(&[]).unwrap();
        assert!(idx.is_empty());
        let idx = build_index(&[c(1, 2, 3)]).unwrap();
        assert_eq!(idx.get(c(1, 2, 3)), Some(0));
        assert_eq!(idx.get(c(3, 2, 1)), None);
        assert!(matches!(
            build_index(&[c(1, 2, 3), c(0, 0, 0), c(1, 2, 3)]),
            Err(ScanError::DuplicateCoord(_))
        ));
    }

    #[test]
    fn hash_query_identity_and_reverse() {
        let coords = vec![c(0, 0, 0), c(5, -1, 2), c(7, 7, 7)];
        let idx = build_index(&coords).unwrap();
        assert_eq!(hash_query(&coords, &idx), vec![0, 1, 2]);
        let rev: Vec<_> = coords.iter().rev().copied().collect();
        assert_eq!(hash_query(&rev, &idx), vec![2, 1, 0]);
        assert_eq!(hash_query(&[c(9, 9, 9), c(7, 7, 7)], &idx), vec![MISS, 2]);
    }

    #[test]
    fn rearrange_rejects_miss() {
        let t = SparseTensor::new(vec![c(0, 0, 0)], array![[1.0]], [1.0; 3]).unwrap();
        assert!(matches!(rearrange(&t, &[MISS]), Err(ScanError::Alignment(_))));
        assert!(matches!(rearrange(&t, &[1]), Err(ScanError::Alignment(_))));
        let r = rearrange(&t, &[0, 0]).unwrap();
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn rearrange_reverses() {
        let t = SparseTensor::new(vec![c(0, 0, 0), c(1, 0, 0), c(2, 0, 0)], array![[1.0], [2.0], [3.0]], [1.0; 3])
            .unwrap();
        let r = rearrange(&t, &[2, 1, 0]).unwrap();
        assert_eq!(r.coords(), &[c(2, 0, 0), c(1, 0, 0), c(0, 0, 0)]);
        assert_eq!(r.feats(), &array![[3.0], [2.0], [1.0]]);
        assert!(rearrange(&t, &[0, 1, 2]).unwrap().bit_eq(&t));
    }

    #[test]
    fn downscale_examples() {
        let (u, inv) = downscale_unique(&[c(0, 0, 0), c(1, 1, 1), c(2, 2, 2)], 2);
        assert_eq!(u, vec![c(0, 0, 0), c(1, 1, 1)]);
        assert_eq!(inv, vec![0, 0, 1]);

        let (u, _) = downscale_unique(&[c(-1, -1, -1)], 2);
        assert_eq!(u, vec![c(-1, -1, -1)]);
        let (u, _) = downscale_unique(&[c(-3, -2, 3)], 2);
        assert_eq!(u, vec![c(-2, -1, 1)]);

        let input = vec![c(3, 0, 0), c(1, 0, 0), c(2, 0, 0)];
        let (u, inv) = downscale_unique(&input, 1);
        assert_eq!(u, vec![c(1, 0, 0), c(2, 0, 0), c(3, 0, 0)]);
        assert_eq!(inv, vec![2, 0, 1]);
    }

    #[test]
    fn scatter_max_examples() {
        let out = scatter_max(array![[1.0], [5.0], [3.0]].view(), &[0, 0, 1], 2).unwrap();
        assert_eq!(out, array![[5.0], [3.0]]);
        let f = array![[1.0, -2.0], [0.5, 4.0]];
        assert_eq!(scatter_max(f.view(), &[0, 1], 2).unwrap(), f);
        assert!(matches!(
            scatter_max(f.view(), &[0, 0], 2),
            Err(ScanError::Consistency(_))
        ));
    }

    #[test]
    fn sparse_align_cases() {
        let t = SparseTensor::new(vec![c(3, 1, 0), c(-1, 0, 0)], array![[1.0], [2.0]], [0.4; 3]).unwrap();
        let same = sparse_align(&t, [0.4; 3]).unwrap();
        assert_eq!(same.coords(), &[c(-1, 0, 0), c(3, 1, 0)]);
        assert_eq!(same.feats(), &array![[2.0], [1.0]]);

        let single = SparseTensor::new(vec![c(-3, 5, 1)], array![[7.0, -1.0]], [0.4, 0.4, 0.2]).unwrap();
        let a = sparse_align(&single, [0.8, 0.8, 0.4]).unwrap();
        assert_eq!(a.coords(), &[c(-2, 2, 0)]);
        assert_eq!(a.feats(), &array![[7.0, -1.0]]);
        assert_eq!(a.scale(), [0.8, 0.8, 0.4]);

        assert!(matches!(sparse_align(&t, [0.6; 3]), Err(ScanError::Scale(_))));
        assert!(matches!(sparse_align(&t, [0.2; 3]), Err(ScanError::Scale(_))));
    }

    #[test]
    fn flatten_bev_cases() {
        let t = SparseTensor::new(vec![c(3, 4, 0), c(3, 4, 7)], array![[1.0], [9.0]], [1.0; 3]).unwrap();
        let b = flatten_bev(&t);
        assert_eq!(b.coords(), &[c(3, 4, 0)]);
        assert_eq!(b.feats(), &array![[9.0]]);

        let flat = SparseTensor::new(vec![c(2, 0, 0), c(1, 1, 0)], array![[1.0], [2.0]], [1.0; 3]).unwrap();
        let b = flatten_bev(&flat);
        assert_eq!(b.coords(), &[c(1, 1, 0), c(2, 0, 0)]);
        assert_eq!(b.feats(), &array![[2.0], [1.0]]);
    }

    fn heatmap(cells: &[(i32, i32, f64)], extent: usize) -> CentroidHeatmap {
        let coords = cells.iter().map(|&(x, y, _)| c(x, y, 0)).collect();
        let feats = Array2::from_shape_vec((cells.len(), 1), cells.iter().map(|v| v.2).collect()).unwrap();
        CentroidHeatmap::new(SparseTensor::new(coords, feats, [1.0; 3]).unwrap(), [extent; 2]).unwrap()
    }

    #[test]
    fn peaks_single_and_ties() {
        let d = heatmap(&[(4, 4, 0.3)], 8);
        assert_eq!(sparse_max_pool_peaks(&d, 3), vec![(c(4, 4, 0), 0.3)]);

        let mut cells = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                cells.push((x, y, 0.5));
            }
        }
        let d = heatmap(&cells, 8);
        let peaks = sparse_max_pool_peaks(&d, 3);
        assert_eq!(peaks.len(), 9);
        assert_eq!(peaks[0].0, c(0, 0, 0));
    }

    #[test]
    fn peaks_sorted_by_score() {
        let d = heatmap(&[(0, 0, 0.2), (5, 5, 0.9), (1, 0, 0.1), (7, 0, 0.4)], 8);
        let peaks = sparse_max_pool_peaks(&d, 3);
        assert_eq!(peaks, vec![(c(5, 5, 0), 0.9), (c(7, 0, 0), 0.4), (c(0, 0, 0), 0.2)]);
        // window 1 keeps everything
        assert_eq!(sparse_max_pool_peaks(&d, 1).len(), 4);
    }

    #[test]
    fn heatmap_invariants() {
        let t = SparseTensor::new(vec![c(0, 0, 1)], array![[0.5]], [1.0; 3]).unwrap();
        assert!(CentroidHeatmap::new(t, [4, 4]).is_err());
        let t = SparseTensor::new(vec![c(0, 0, 0)], array![[1.5]], [1.0; 3]).unwrap();
        assert!(CentroidHeatmap::new(t, [4, 4]).is_err());
        let t = SparseTensor::new(vec![c(4, 0, 0)], array![[0.5]], [1.0; 3]).unwrap();
        assert!(CentroidHeatmap::new(t, [4, 4]).is_err());
    }

    #[test]
    fn ssc_identity_kernel() {
        let t = SparseTensor::new(vec![c(0, 0, 0), c(1, 0, 0)], array![[1.0, 2.0], [3.0, -4.0]], [1.0; 3]).unwrap();
        let w = Array3::from_shape_fn((1, 2, 2), |(_, i, j)| if i == j { 1.0 } else { 0.0 });
        let layer = SscLayer::cubic(1, w, Array1::zeros(2), false).unwrap();
        let out = ssc_forward(&t, &layer).unwrap();
        assert!(out.bit_eq(&t));
    }

    #[test]
    fn ssc_isolated_voxel_uses_center_only() {
        let t = SparseTensor::new(vec![c(10, 10, 10)], array![[2.0]], [1.0; 3]).unwrap();
        let w = Array3::from_shape_fn((27, 1, 1), |(o, _, _)| o as f64 + 1.0);
        let layer = SscLayer::cubic(3, w, array![0.5], false).unwrap();
        let out = ssc_forward(&t, &layer).unwrap();
        // center slice is index 13 -> weight 14
        assert_eq!(out.feats()[[0, 0]], 2.0 * 14.0 + 0.5);
    }

    #[test]
    fn ssc_relu_and_shape_errors() {
        let t = SparseTensor::new(vec![c(0, 0, 0)], array![[1.0]], [1.0; 3]).unwrap();
        let layer = SscLayer::cubic(1, Array3::from_elem((1, 1, 1), -1.0), array![0.0], true).unwrap();
        assert_eq!(ssc_forward(&t, &layer).unwrap().feats()[[0, 0]], 0.0);
        let wide = SscLayer::cubic(1, Array3::zeros((1, 2, 1)), array![0.0], false).unwrap();
        assert!(matches!(ssc_forward(&t, &wide), Err(ScanError::Shape(_))));
        assert!(SscLayer::cubic(2, Array3::zeros((8, 1, 1)), array![0.0], false).is_err());
        assert!(SscLayer::cubic(3, Array3::zeros((9, 1, 1)), array![0.0], false).is_err());
    }

    #[test]
    fn tensor_rejects_bad_input() {
        assert!(SparseTensor::new(vec![c(0, 0, 0)], Array2::zeros((2, 1)), [1.0; 3]).is_err());
        assert!(SparseTensor::new(vec![c(0, 0, 0)], array![[f64::NAN]], [1.0; 3]).is_err());
        assert!(SparseTensor::new(vec![c(0, 0, 0), c(0, 0, 0)], Array2::zeros((2, 1)), [1.0; 3]).is_err());
        assert!(SparseTensor::new(vec![], Array2::zeros((0, 1)), [0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn align_to_support_zero_fills_and_drops() {
        let t = SparseTensor::new(vec![c(0, 0, 0), c(1, 0, 0)], array![[1.0], [2.0]], [1.0; 3]).unwrap();
        let a = align_to_support(&t, &[c(1, 0, 0), c(5, 0, 0)]);
        assert_eq!(a.coords(), &[c(1, 0, 0), c(5, 0, 0)]);
        assert_eq!(a.feats(), &array![[2.0], [0.0]]);
    }

    #[test]
    fn kernel_map_reuse_and_mismatch() {
        let t = SparseTensor::new(
            vec![c(0, 0, 0), c(1, 0, 0), c(1, 1, 0), c(5, 5, 5)],
            Array2::from_shape_fn((4, 2), |(i, j)| (i + j) as f64),
            [1.0; 3],
        )
        .unwrap();
        let layer = SscLayer::cubic(3, Array3::from_elem((27, 2, 2), 0.5), Array1::zeros(2), false).unwrap();
        let map = KernelMap::for_layer(&t, &layer).unwrap();
        // (0,0,0)-(1,0,0), (1,0,0)-(1,1,0), (0,0,0)-(1,1,0), each both ways
        assert_eq!(map.pair_count(), 6);
        assert!(ssc_forward_mapped(&t, &layer, &map).unwrap().bit_eq(&ssc_forward(&t, &layer).unwrap()));
        let planar = SscLayer::planar(3, Array3::from_elem((9, 2, 2), 0.5), Array1::zeros(2), false).unwrap();
        assert!(matches!(ssc_forward_mapped(&t, &planar, &map), Err(ScanError::Consistency(_))));
        let other = SparseTensor::new(vec![c(0, 0, 0)], Array2::zeros((1, 2)), [1.0; 3]).unwrap();
        assert!(ssc_forward_mapped(&other, &layer, &map).is_err());
    }

    #[test]
    fn ssc_chunking_is_invisible() {
        // more neighbour pairs per offset than one chunk holds
        let coords: Vec<VoxelCoord> = (0..40).flat_map(|x| (0..20).map(move |y| c(x, y, 0))).collect();
        let n = coords.len();
        let t = SparseTensor::new(coords, Array2::from_shape_fn((n, 3), |(i, j)| ((i * 7 + j) % 11) as f64), [1.0; 3])
            .unwrap();
        let w = Array3::from_shape_fn((9, 3, 2), |(o, i, j)| (o as f64 - 4.0) * 0.1 + i as f64 - j as f64);
        let layer = SscLayer::planar(3, w, Array1::from(vec![0.5, -0.5]), false).unwrap();
        let out = ssc_forward(&t, &layer).unwrap();
        let idx = t.index();
        for (i, v) in t.coords().iter().enumerate() {
            for o in 0..2 {
                let mut acc = layer.bias()[o];
                for (k, d) in layer.offsets().iter().enumerate() {
                    if let Some(j) = idx.get(v.offset(*d)) {
                        for ci in 0..3 {
                            acc += t.feats()[[j, ci]] * layer.weight()[[k, ci, o]];
                        }
                    }
                }
                assert!((out.feats()[[i, o]] - acc).abs() < 1e-9);
            }
        }
    }
}
