//! Brute-force reference implementations used by the test suites and `scan check`.
//!
//! Everything here walks dense grids or enumerates all candidates, so it is
//! only suitable for small inputs.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;

use crate::metrics::{ClassSpec, PanopticStats, IGNORE};
use crate::sparse::{CentroidHeatmap, SparseTensor, SscLayer, VoxelCoord};
use crate::voxel::{PointCloud, PointLabels, VoxelRange};

/// Bounding box of `coords` as (min corner, dims).
fn bbox(coords: &[VoxelCoord]) -> ([i32; 3], [usize; 3]) {
    let mut lo = [i32::MAX; 3];
    let mut hi = [i32::MIN; 3];
    for c in coords {
        for (k, v) in c.to_array().into_iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    (lo, [0, 1, 2].map(|k| (hi[k] - lo[k] + 1) as usize))
}

/// Dense occupancy grid holding the source row of every voxel.
struct Grid {
    lo: [i32; 3],
    dims: [usize; 3],
    cells: Vec<Option<usize>>,
}

impl Grid {
    fn new(coords: &[VoxelCoord]) -> Self {
        let (lo, dims) = bbox(coords);
        let mut g = Grid {
            lo,
            dims,
            cells: vec![None; dims.iter().product()],
        };
        for (i, c) in coords.iter().enumerate() {
            let slot = g.slot(*c).expect("inside own bbox");
            g.cells[slot] = Some(i);
        }
        g
    }

    fn slot(&self, c: VoxelCoord) -> Option<usize> {
        let a = c.to_array();
        let mut s = 0;
        for k in 0..3 {
            let d = a[k] as i64 - self.lo[k] as i64;
            if d < 0 || d >= self.dims[k] as i64 {
                return None;
            }
            s = s * self.dims[k] + d as usize;
        }
        Some(s)
    }

    fn get(&self, c: VoxelCoord) -> Option<usize> {
        self.slot(c).and_then(|s| self.cells[s])
    }
}

fn floor_div(a: i32, b: i32) -> i32 {
    let q = a / b;
    if (a % b != 0) && ((a < 0) != (b < 0)) {
        q - 1
    } else {
        q
    }
}

/// Downscale by integer `factor` by scanning every coarse cell of the bounding
/// box and every fine cell inside it.
pub fn dense_sparse_align(t: &SparseTensor, factor: [i32; 3]) -> (Vec<VoxelCoord>, Array2<f64>) {
    if t.is_empty() {
        return (Vec::new(), Array2::zeros((0, t.channels())));
    }
    let g = Grid::new(t.coords());
    let hi = [0, 1, 2].map(|k| g.lo[k] + g.dims[k] as i32 - 1);
    let clo = [0, 1, 2].map(|k| floor_div(g.lo[k], factor[k]));
    let chi = [0, 1, 2].map(|k| floor_div(hi[k], factor[k]));
    let mut coords = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for cx in clo[0]..=chi[0] {
        for cy in clo[1]..=chi[1] {
            for cz in clo[2]..=chi[2] {
                let mut acc: Option<Vec<f64>> = None;
                for fx in cx * factor[0]..(cx + 1) * factor[0] {
                    for fy in cy * factor[1]..(cy + 1) * factor[1] {
                        for fz in cz * factor[2]..(cz + 1) * factor[2] {
                            if let Some(i) = g.get(VoxelCoord::new(fx, fy, fz)) {
                                let row = t.feats().row(i);
                                match &mut acc {
                                    None => acc = Some(row.to_vec()),
                                    Some(a) => {
                                        for (x, &v) in a.iter_mut().zip(row) {
                                            if v > *x {
                                                *x = v;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(a) = acc {
                    coords.push(VoxelCoord::new(cx, cy, cz));
                    rows.push(a);
                }
            }
        }
    }
    (coords, to_matrix(rows, t.channels()))
}

fn to_matrix(rows: Vec<Vec<f64>>, cols: usize) -> Array2<f64> {
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect()).expect("rectangular rows")
}

/// Column maximum over z for every (x, y) of the bounding box.
pub fn dense_flatten_bev(t: &SparseTensor) -> (Vec<VoxelCoord>, Array2<f64>) {
    if t.is_empty() {
        return (Vec::new(), Array2::zeros((0, t.channels())));
    }
    let g = Grid::new(t.coords());
    let mut coords = Vec::new();
    let mut rows = Vec::new();
    for x in 0..g.dims[0] as i32 {
        for y in 0..g.dims[1] as i32 {
            let mut acc: Option<Vec<f64>> = None;
            for z in 0..g.dims[2] as i32 {
                let c = VoxelCoord::new(g.lo[0] + x, g.lo[1] + y, g.lo[2] + z);
                if let Some(i) = g.get(c) {
                    let row = t.feats().row(i);
                    acc = Some(match acc {
                        None => row.to_vec(),
                        Some(a) => a.iter().zip(row).map(|(&p, &q)| if q > p { q } else { p }).collect(),
                    });
                }
            }
            if let Some(a) = acc {
                coords.push(VoxelCoord::new(g.lo[0] + x, g.lo[1] + y, 0));
                rows.push(a);
            }
        }
    }
    (coords, to_matrix(rows, t.channels()))
}

/// Peaks found on a full `w x h` grid where invalid cells hold no value.
pub fn dense_max_pool_peaks(d: &CentroidHeatmap, window: usize) -> Vec<(VoxelCoord, f64)> {
    let [w, h] = d.extent();
    let mut grid = vec![None; w * h];
    for (c, s) in d.coords().iter().zip(d.scores()) {
        grid[c.x as usize * h + c.y as usize] = Some(s);
    }
    let r = (window / 2) as i64;
    let mut out = Vec::new();
    for x in 0..w as i64 {
        for y in 0..h as i64 {
            let Some(own) = grid[x as usize * h + y as usize] else {
                continue;
            };
            let mut best = f64::NEG_INFINITY;
            for nx in (x - r).max(0)..=(x + r).min(w as i64 - 1) {
                for ny in (y - r).max(0)..=(y + r).min(h as i64 - 1) {
                    if let Some(v) = grid[nx as usize * h + ny as usize] {
                        best = best.max(v);
                    }
                }
            }
            if own >= best {
                out.push((VoxelCoord::new(x as i32, y as i32, 0), own));
            }
        }
    }
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
    out
}

/// Direct convolution sum with explicit loops over sites, kernel cells and channels.
pub fn dense_ssc(t: &SparseTensor, layer: &SscLayer) -> Array2<f64> {
    let k = layer.extent();
    let r = k.map(|v| (v / 2) as i32);
    let w = layer.weight();
    let (cin, cout) = (layer.c_in(), layer.c_out());
    let g = Grid::new(t.coords());
    let mut out = Array2::zeros((t.len(), cout));
    for (i, c) in t.coords().iter().enumerate() {
        for o in 0..cout {
            let mut acc = layer.bias()[o];
            for dx in -r[0]..=r[0] {
                for dy in -r[1]..=r[1] {
                    for dz in -r[2]..=r[2] {
                        let Some(j) = g.get(c.offset([dx, dy, dz])) else {
                            continue;
                        };
                        let slot = (((dx + r[0]) as usize * k[1]) + (dy + r[1]) as usize) * k[2] + (dz + r[2]) as usize;
                        for ci in 0..cin {
                            acc += t.feats()[[j, ci]] * w[[slot, ci, o]];
                        }
                    }
                }
            }
            out[[i, o]] = if layer.relu() { acc.max(0.0) } else { acc };
        }
    }
    out
}

/// Class histogram of every occupied voxel, normalised, keyed by voxel.
pub fn counting_soft_labels(
    points: &PointCloud,
    labels: &PointLabels,
    scale: [f64; 3],
    range: &VoxelRange,
    n_classes: usize,
) -> BTreeMap<VoxelCoord, Vec<f64>> {
    let mut counts: BTreeMap<VoxelCoord, Vec<u64>> = BTreeMap::new();
    for (p, &s) in points.points().iter().zip(&labels.semantic) {
        let q = [p[0] as f64, p[1] as f64, p[2] as f64];
        if !range.contains(q) {
            continue;
        }
        let v = range.voxel_of(q, scale);
        counts.entry(v).or_insert_with(|| vec![0; n_classes])[s as usize] += 1;
    }
    counts
        .into_iter()
        .map(|(v, c)| {
            let total: u64 = c.iter().sum();
            (v, c.iter().map(|&k| k as f64 / total as f64).collect())
        })
        .collect()
}

/// Central differences of `f` at `x` for every coordinate.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Panoptic counters by enumerating every pred/gt segment pair and searching
/// all one-to-one matchings for the one with the most IoU > 0.5 pairs.
pub fn brute_force_panoptic(pred: &PointLabels, gt: &PointLabels, spec: &ClassSpec) -> PanopticStats {
    let n = spec.n_classes();
    let mut stats = PanopticStats::new(n);
    let kept: Vec<usize> = (0..gt.len()).filter(|&i| gt.semantic[i] != IGNORE).collect();
    for &i in &kept {
        stats.confusion[gt.semantic[i] as usize * n + pred.semantic[i] as usize] += 1;
    }
    for c in 1..n as u16 {
        let seg_of = |l: &PointLabels, i: usize| -> Option<u16> {
            if l.semantic[i] != c {
                None
            } else if spec.is_thing(c) {
                Some(l.instance[i])
            } else {
                Some(0)
            }
        };
        let mut gsegs: BTreeMap<u16, BTreeSet<usize>> = BTreeMap::new();
        let mut psegs: BTreeMap<u16, BTreeSet<usize>> = BTreeMap::new();
        for &i in &kept {
            if let Some(s) = seg_of(gt, i) {
                gsegs.entry(s).or_default().insert(i);
            }
            if let Some(s) = seg_of(pred, i) {
                psegs.entry(s).or_default().insert(i);
            }
        }
        let gl: Vec<&BTreeSet<usize>> = gsegs.values().collect();
        let pl: Vec<&BTreeSet<usize>> = psegs.values().collect();
        let iou = |a: &BTreeSet<usize>, b: &BTreeSet<usize>| {
            let inter = a.intersection(b).count();
            inter as f64 / (a.len() + b.len() - inter) as f64
        };
        let ious: Vec<Vec<f64>> = gl.iter().map(|g| pl.iter().map(|p| iou(g, p)).collect()).collect();
        let mut used = vec![false; pl.len()];
        let (best_tp, best_sum) = best_matching(&ious, 0, &mut used);
        stats.tp[c as usize] = best_tp as u64;
        stats.iou_sum[c as usize] = best_sum;
        stats.fn_[c as usize] = (gl.len() - best_tp) as u64;
        stats.fp[c as usize] = (pl.len() - best_tp) as u64;
    }
    stats
}

fn best_matching(ious: &[Vec<f64>], g: usize, used: &mut [bool]) -> (usize, f64) {
    if g == ious.len() {
        return (0, 0.0);
    }
    let mut best = best_matching(ious, g + 1, used);
    for p in 0..used.len() {
        if used[p] || ious[g][p] <= 0.5 {
            continue;
        }
        used[p] = true;
        let (t, s) = best_matching(ious, g + 1, used);
        used[p] = false;
        if t + 1 > best.0 {
            best = (t + 1, s + ious[g][p]);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_division() {
        assert_eq!(floor_div(-1, 2), -1);
        assert_eq!(floor_div(-2, 2), -1);
        assert_eq!(floor_div(3, 2), 1);
    }

    #[test]
    fn finite_diff_of_square() {
        let g = finite_diff(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }
}
