//! Randomised equivalence and gradient suites.
//!
//! Each suite draws its own seeded instances and returns a [`CheckResult`];
//! `scan check` runs them all.

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{exact_attention, gka_attention};
use crate::heads::{focal_loss, l1_loss, lovasz_softmax_loss, semantic_focal_loss, HeatmapFocal};
use crate::metrics::{accumulate_frame, ClassSpec};
use crate::oracle;
use crate::sparse::{
    build_index, flatten_bev, hash_query, rearrange, sparse_align, sparse_max_pool_peaks, ssc_forward,
    CentroidHeatmap, SparseTensor, SscLayer, VoxelCoord,
};
use crate::voxel::{soft_voxel_labels, voxelize_coords, PointCloud, PointLabels, VoxelRange};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Distinct random coordinates inside a cube of side `side` starting at `lo`.
pub fn random_coords(rng: &mut impl Rng, n: usize, lo: i32, side: i32, flat: bool) -> Vec<VoxelCoord> {
    let mut set = std::collections::BTreeSet::new();
    let cap = if flat { side * side } else { side * side * side } as usize;
    while set.len() < n.min(cap) {
        let z = if flat { 0 } else { lo + rng.random_range(0..side) };
        set.insert(VoxelCoord::new(lo + rng.random_range(0..side), lo + rng.random_range(0..side), z));
    }
    let mut v: Vec<VoxelCoord> = set.into_iter().collect();
    v.shuffle(rng);
    v
}

/// Random tensor on a grid of at most `side^3`, features uniform in [-1, 1).
pub fn random_tensor(rng: &mut impl Rng, max_n: usize, side: i32, channels: usize) -> SparseTensor {
    let n = rng.random_range(1..=max_n);
    let lo = rng.random_range(-side..=0);
    let coords = random_coords(rng, n, lo, side, false);
    let feats = Array2::from_shape_simple_fn((coords.len(), channels), || rng.random_range(-1.0..1.0));
    SparseTensor::new(coords, feats, [0.1, 0.1, 0.1]).expect("valid random tensor")
}

/// sparse_align, flatten_bev, peak pooling and SSC against their dense oracles.
pub fn dense_equivalence(instances: usize, seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut align_bad = 0;
    let mut flat_bad = 0;
    let mut peak_bad = 0;
    let mut ssc_err = 0.0f64;
    for _ in 0..instances {
        let c = rng.random_range(1..=4);
        let t = random_tensor(&mut rng, 400, 32, c);

        let factor = [0, 1, 2].map(|_| [1, 2, 4][rng.random_range(0..3)]);
        let to = [0, 1, 2].map(|k| t.scale()[k] * factor[k] as f64);
        let a = sparse_align(&t, to).expect("integer factor");
        let (dc, df) = oracle::dense_sparse_align(&t, factor);
        if a.coords() != &dc[..] || a.feats() != &df {
            align_bad += 1;
        }

        let f = flatten_bev(&t);
        let (dc, df) = oracle::dense_flatten_bev(&t);
        if f.coords() != &dc[..] || f.feats() != &df {
            flat_bad += 1;
        }

        let extent = [rng.random_range(1..=32usize), rng.random_range(1..=32usize)];
        let n = rng.random_range(1..=extent[0] * extent[1]);
        let mut cells: Vec<VoxelCoord> = (0..extent[0] as i32)
            .flat_map(|x| (0..extent[1] as i32).map(move |y| VoxelCoord::new(x, y, 0)))
            .collect();
        cells.shuffle(&mut rng);
        cells.truncate(n);
        // coarse levels make ties common
        let levels = rng.random_range(2..=20);
        let scores = Array2::from_shape_simple_fn((n, 1), || rng.random_range(0..=levels) as f64 / levels as f64);
        let hm = CentroidHeatmap::new(SparseTensor::new(cells, scores, [0.8, 0.8, 1.0]).expect("valid"), extent)
            .expect("valid heatmap");
        let window = [1, 3, 5][rng.random_range(0..3)];
        if sparse_max_pool_peaks(&hm, window) != oracle::dense_max_pool_peaks(&hm, window) {
            peak_bad += 1;
        }

        let cout = rng.random_range(1..=4);
        let planar = rng.random_bool(0.3);
        let k = if planar { 3 } else { [1, 3, 5][rng.random_range(0..3)] };
        let vol = if planar { k * k } else { k * k * k };
        let w = Array3::from_shape_simple_fn((vol, c, cout), || rng.random_range(-1.0..1.0));
        let b = Array1::from_shape_simple_fn(cout, || rng.random_range(-0.5..0.5));
        let layer = if planar {
            SscLayer::planar(k, w, b, rng.random_bool(0.5))
        } else {
            SscLayer::cubic(k, w, b, rng.random_bool(0.5))
        }
        .expect("valid layer");
        let out = ssc_forward(&t, &layer).expect("matching channels");
        let dense = oracle::dense_ssc(&t, &layer);
        ssc_err = ssc_err.max((out.feats() - &dense).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
    }
    vec![
        CheckResult::new("sparse_align", align_bad == 0, format!("{align_bad}/{instances} mismatches")),
        CheckResult::new("flatten_bev", flat_bad == 0, format!("{flat_bad}/{instances} mismatches")),
        CheckResult::new("max_pool_peaks", peak_bad == 0, format!("{peak_bad}/{instances} mismatches")),
        CheckResult::new("ssc_forward", ssc_err <= 1e-5, format!("max abs error {ssc_err:.3e} (tol 1e-5)")),
    ]
}

/// `rearrange(t, hash_query(order, build_index(t)))` reproduces any reordering of `t` exactly.
pub fn rearrange_round_trip(instances: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..instances {
        let c = rng.random_range(1..=8);
        let t = random_tensor(&mut rng, 500, 64, c);
        let index = build_index(t.coords()).expect("unique coordinates");
        let same = rearrange(&t, &hash_query(t.coords(), &index)).expect("all hits");
        let mut perm: Vec<usize> = (0..t.len()).collect();
        perm.shuffle(&mut rng);
        let coords: Vec<VoxelCoord> = perm.iter().map(|&i| t.coords()[i]).collect();
        let shuffled = SparseTensor::new(coords.clone(), t.feats().select(ndarray::Axis(0), &perm), t.scale())
            .expect("permutation of a valid tensor");
        let back = rearrange(&t, &hash_query(&coords, &index)).expect("all hits");
        if !same.bit_eq(&t) || !back.bit_eq(&shuffled) {
            bad += 1;
        }
    }
    CheckResult::new("rearrange_round_trip", bad == 0, format!("{bad}/{instances} not bit-identical"))
}

/// Mean relative Frobenius error of the random-feature estimate per feature count.
pub fn gka_errors(ms: &[usize], instances: u64, tokens: usize, dim: usize) -> Vec<f64> {
    ms.iter()
        .map(|&m| {
            let mut total = 0.0;
            for inst in 0..instances {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst);
                let n = Normal::new(0.0, 0.75).expect("valid sigma");
                let q = Array2::from_shape_simple_fn((tokens, dim), || n.sample(&mut rng));
                let k = Array2::from_shape_simple_fn((tokens, dim), || n.sample(&mut rng));
                let v = Array2::from_shape_simple_fn((tokens, dim), || rng.random_range(0.0..1.0));
                let e = exact_attention(q.view(), k.view(), v.view()).expect("shapes");
                let g = gka_attention(q.view(), k.view(), v.view(), m, inst).expect("shapes");
                total += frobenius(&(&g - &e)) / frobenius(&e);
            }
            total / instances as f64
        })
        .collect()
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Convergence over m in {16, 64, 256} plus the degenerate single-key and identical-key cases.
pub fn gka_convergence() -> Vec<CheckResult> {
    let errs = gka_errors(&[16, 64, 256], 20, 64, 16);
    let monotone = errs.windows(2).all(|w| w[1] < w[0]);
    let conv = CheckResult::new(
        "gka_convergence",
        monotone && errs[2] <= 0.15,
        format!("errors {:.4} / {:.4} / {:.4} at m = 16/64/256 (need decreasing, last <= 0.15)", errs[0], errs[1], errs[2]),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let nq = rng.random_range(1..30);
        let nk = if case % 2 == 0 { 1 } else { rng.random_range(2..30) };
        let q = Array2::from_shape_simple_fn((nq, 16), || rng.random_range(-1.0..1.0));
        let key = Array1::from_shape_simple_fn(16, || rng.random_range(-1.0..1.0));
        let k = Array2::from_shape_fn((nk, 16), |(_, j)| key[j]);
        let v = Array2::from_shape_simple_fn((nk, 8), || rng.random_range(-1.0..1.0));
        let e = exact_attention(q.view(), k.view(), v.view()).expect("shapes");
        let g = gka_attention(q.view(), k.view(), v.view(), 64, case).expect("shapes");
        worst = worst.max((&g - &e).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
    }
    vec![
        conv,
        CheckResult::new(
            "gka_degenerate_keys",
            worst <= 1e-9,
            format!("single/identical keys max abs error {worst:.3e} (tol 1e-9)"),
        ),
    ]
}

fn max_abs_gap(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
}

/// Analytic gradients against central differences with h = 1e-5.
pub fn gradient_checks(instances: usize, seed: u64) -> Vec<CheckResult> {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut focal, mut sem, mut l1, mut lov) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..instances {
        let n = rng.random_range(1..40);
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.02..0.98)).collect();
        let target: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.2) { 1.0 } else { rng.random_range(0.0..0.95) })
            .collect();
        let params = HeatmapFocal::default();
        let g = focal_loss(&pred, &target, params).expect("shapes").grad;
        let num = oracle::finite_diff(|p| focal_loss(p, &target, params).expect("shapes").value, &pred, h);
        focal = focal.max(max_abs_gap(&g, &num));

        let (rows, classes) = (rng.random_range(1..20), rng.random_range(2..6));
        let logits: Vec<f64> = (0..rows * classes).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<u16> = (0..rows).map(|_| rng.random_range(0..classes) as u16).collect();
        let as_matrix = |x: &[f64]| Array2::from_shape_vec((rows, classes), x.to_vec()).expect("shape");
        let f = |x: &[f64]| semantic_focal_loss(as_matrix(x).view(), &labels, 2.0, 0.25, Some(0)).expect("ok").value;
        let g = semantic_focal_loss(as_matrix(&logits).view(), &labels, 2.0, 0.25, Some(0)).expect("ok").grad;
        sem = sem.max(max_abs_gap(g.as_slice().expect("contiguous"), &oracle::finite_diff(f, &logits, h)));

        let target: Vec<f64> = (0..rows * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
        // keep every residual well away from the kink at zero
        let pred: Vec<f64> = target
            .iter()
            .map(|t| t + rng.random_range(0.01..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let mask: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.7)).collect();
        let tm = Array2::from_shape_vec((rows, 2), target).expect("shape");
        let as2 = |x: &[f64]| Array2::from_shape_vec((rows, 2), x.to_vec()).expect("shape");
        let g = l1_loss(as2(&pred).view(), tm.view(), Some(&mask)).expect("ok").grad;
        let num = oracle::finite_diff(|x| l1_loss(as2(x).view(), tm.view(), Some(&mask)).expect("ok").value, &pred, h);
        l1 = l1.max(max_abs_gap(g.as_slice().expect("contiguous"), &num));

        // tie jitter: a tiny random offset separates equal errors so the sort is locally stable
        let jitter: Vec<f64> = logits.iter().map(|x| x + rng.random_range(-1e-3..1e-3)).collect();
        let labels_nz: Vec<u16> = labels.iter().map(|&l| l.max(1)).collect();
        let f = |x: &[f64]| lovasz_softmax_loss(as_matrix(x).view(), &labels_nz, Some(0)).expect("ok").value;
        let g = lovasz_softmax_loss(as_matrix(&jitter).view(), &labels_nz, Some(0)).expect("ok").grad;
        lov = lov.max(max_abs_gap(g.as_slice().expect("contiguous"), &oracle::finite_diff(f, &jitter, h)));
    }
    vec![
        CheckResult::new("grad_heatmap_focal", focal <= 1e-4, format!("max abs gap {focal:.3e} (tol 1e-4)")),
        CheckResult::new("grad_semantic_focal", sem <= 1e-4, format!("max abs gap {sem:.3e} (tol 1e-4)")),
        CheckResult::new("grad_l1", l1 <= 1e-4, format!("max abs gap {l1:.3e} (tol 1e-4)")),
        CheckResult::new("grad_lovasz", lov <= 1e-3, format!("max abs gap {lov:.3e} (tol 1e-3)")),
    ]
}

/// Random labelled cloud inside `range`.
pub fn random_frame(rng: &mut impl Rng, n: usize, range: &VoxelRange, n_classes: u16) -> (PointCloud, PointLabels) {
    let pts = (0..n)
        .map(|_| {
            let p = [0, 1, 2].map(|a| rng.random_range(range.min[a]..range.max[a]) as f32);
            [p[0], p[1], p[2], rng.random::<f32>()]
        })
        .collect();
    let sem = (0..n).map(|_| rng.random_range(0..n_classes)).collect();
    let inst = (0..n).map(|_| rng.random_range(0..4)).collect();
    (
        PointCloud::new(pts).expect("finite"),
        PointLabels::new(sem, inst).expect("equal lengths"),
    )
}

/// Soft voxel labels sum to one per row and equal per-voxel class counts.
pub fn soft_label_check(frames: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let range = VoxelRange::new([-4.0, -4.0, -2.0], [4.0, 4.0, 2.0]).expect("valid range");
    let mut worst_sum = 0.0f64;
    let mut worst = 0.0f64;
    for _ in 0..frames {
        let n = rng.random_range(1..2000);
        let classes = rng.random_range(2..20u16);
        let (p, l) = random_frame(&mut rng, n, &range, classes);
        let scale = [[0.4, 0.4, 0.2], [0.8, 0.8, 0.4], [1.6, 1.6, 0.8]][rng.random_range(0..3)];
        let (coords, p2v) = voxelize_coords(&p, scale, &range).expect("valid");
        let soft = soft_voxel_labels(&l, &p2v, classes as usize).expect("valid");
        let oracle = oracle::counting_soft_labels(&p, &l, scale, &range, classes as usize);
        if oracle.len() != coords.len() {
            worst = f64::INFINITY;
            continue;
        }
        for (row, c) in soft.0.rows().into_iter().zip(&coords) {
            worst_sum = worst_sum.max((row.sum() - 1.0).abs());
            let o = &oracle[c];
            worst = worst.max(row.iter().zip(o).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    CheckResult::new(
        "soft_voxel_labels",
        worst_sum <= 1e-6 && worst <= 1e-12,
        format!("max |row sum - 1| {worst_sum:.2e}, max oracle gap {worst:.2e}"),
    )
}

/// Random prediction/ground-truth pairs scored by the matcher and by exhaustive matching.
pub fn matching_check(scenes: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ClassSpec::new(6, [1, 2, 3]).expect("valid spec");
    let mut bad = 0;
    for _ in 0..scenes {
        let n = rng.random_range(1..80);
        let gt = random_labels(&mut rng, n);
        // perturb the ground truth so that some segments still match
        let mut pred = gt.clone();
        for i in 0..n {
            if rng.random_bool(0.25) {
                pred.semantic[i] = rng.random_range(0..6);
            }
            if rng.random_bool(0.25) {
                pred.instance[i] = rng.random_range(0..4);
            }
        }
        let fast = accumulate_frame(&pred, &gt, &spec).expect("equal lengths");
        let slow = oracle::brute_force_panoptic(&pred, &gt, &spec);
        let iou_ok = fast.iou_sum.iter().zip(&slow.iou_sum).all(|(a, b)| (a - b).abs() <= 1e-12);
        if fast.tp != slow.tp || fast.fp != slow.fp || fast.fn_ != slow.fn_ || fast.confusion != slow.confusion || !iou_ok {
            bad += 1;
        }
    }
    CheckResult::new("panoptic_matching", bad == 0, format!("{bad}/{scenes} differ from exhaustive matching"))
}

fn random_labels(rng: &mut impl Rng, n: usize) -> PointLabels {
    PointLabels::new(
        (0..n).map(|_| rng.random_range(0..6)).collect(),
        (0..n).map(|_| rng.random_range(0..4)).collect(),
    )
    .expect("equal lengths")
}

/// Every suite at its default size.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut out = dense_equivalence(200, seed);
    out.push(rearrange_round_trip(100, seed));
    out.extend(gka_convergence());
    out.extend(gradient_checks(50, seed));
    out.push(soft_label_check(100, seed));
    out.push(matching_check(200, seed));
    out
}
