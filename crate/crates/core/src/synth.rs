//! Seeded synthetic scenes: object blobs or boxes over a labelled ground plane.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, ScanError};
use crate::voxel::{PointCloud, PointLabels, VoxelRange};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Shape {
    /// Gaussian cloud with per-axis std `extent / 4`.
    #[default]
    Blob,
    /// Uniform samples on the box surface.
    Box,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSpec {
    pub class: u16,
    pub center: [f64; 3],
    pub extent: [f64; 3],
    pub points: usize,
    pub shape: Shape,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomInstances {
    pub count: usize,
    /// Minimum BEV distance between instance centres, meters.
    pub min_separation: f64,
    pub classes: Vec<u16>,
    pub points: usize,
    pub extent: [f64; 3],
    pub shape: Shape,
    /// Centres stay this far inside the range on x and y.
    pub margin: f64,
}

impl Default for RandomInstances {
    fn default() -> Self {
        Self {
            count: 0,
            min_separation: 2.5,
            classes: (1..=8).collect(),
            points: 150,
            extent: [1.2, 1.2, 1.2],
            shape: Shape::Blob,
            margin: 6.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub instances: Vec<InstanceSpec>,
    /// Drawn per frame on top of `instances` when `count > 0`.
    pub random: RandomInstances,
    /// Ground points per square meter.
    pub stuff_density: f64,
    /// Ground is the square `[-w, w]^2`, split into equal x-bands, one per class.
    pub stuff_half_width: f64,
    pub stuff_classes: Vec<u16>,
    pub ground_z: f64,
    pub noise: f64,
    pub seed: u64,
    pub frames: usize,
    pub range: VoxelRange,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            instances: Vec::new(),
            random: RandomInstances::default(),
            stuff_density: 0.0,
            stuff_half_width: 20.0,
            stuff_classes: vec![9],
            ground_z: -1.7,
            noise: 0.0,
            seed: 0,
            frames: 1,
            range: VoxelRange::semantic_kitti(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ScanError::InvalidInput(m));
        for (k, inst) in self.instances.iter().enumerate() {
            if !self.range.contains(inst.center) {
                return bad(format!("instance {} centre {:?} outside the range", k + 1, inst.center));
            }
            if inst.class == 0 || inst.extent.iter().any(|&e| !(e >= 0.0)) {
                return bad(format!("instance {} needs a nonzero class and non-negative extent", k + 1));
            }
        }
        if self.instances.len() + self.random.count > u16::MAX as usize {
            return bad("too many instances".into());
        }
        if !(self.noise >= 0.0) || !(self.stuff_density >= 0.0) || !(self.stuff_half_width >= 0.0) {
            return bad("noise, density and half width must be non-negative".into());
        }
        if self.stuff_density > 0.0 && (self.stuff_classes.is_empty() || self.stuff_classes.contains(&0)) {
            return bad("ground needs at least one nonzero stuff class".into());
        }
        if self.random.count > 0 && (self.random.classes.is_empty() || self.random.classes.contains(&0)) {
            return bad("random instances need nonzero classes".into());
        }
        if self.frames == 0 {
            return bad("frames must be at least 1".into());
        }
        Ok(())
    }
}

/// Places `r.count` centres uniformly with pairwise BEV distance above `r.min_separation`,
/// also keeping clear of `fixed`.
pub fn random_instances(
    r: &RandomInstances,
    range: &VoxelRange,
    z: f64,
    fixed: &[InstanceSpec],
    rng: &mut impl Rng,
) -> Result<Vec<InstanceSpec>> {
    let lo = [range.min[0] + r.margin, range.min[1] + r.margin];
    let hi = [range.max[0] - r.margin, range.max[1] - r.margin];
    if lo[0] >= hi[0] || lo[1] >= hi[1] {
        return Err(ScanError::InvalidInput(format!("margin {} leaves no room in the range", r.margin)));
    }
    let mut centers: Vec<[f64; 2]> = fixed.iter().map(|i| [i.center[0], i.center[1]]).collect();
    let mut out = Vec::with_capacity(r.count);
    let mut tries = 0;
    while out.len() < r.count {
        tries += 1;
        if tries > 10_000 * (r.count + 1) {
            return Err(ScanError::InvalidInput(format!(
                "cannot place {} instances {} m apart",
                r.count, r.min_separation
            )));
        }
        let c = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])];
        if centers.iter().any(|o| (o[0] - c[0]).hypot(o[1] - c[1]) <= r.min_separation) {
            continue;
        }
        centers.push(c);
        out.push(InstanceSpec {
            class: r.classes[rng.random_range(0..r.classes.len())],
            center: [c[0], c[1], z + r.extent[2] / 2.0],
            extent: r.extent,
            points: r.points,
            shape: r.shape,
        });
    }
    Ok(out)
}

fn box_surface(e: [f64; 3], rng: &mut impl Rng) -> [f64; 3] {
    let areas = [e[1] * e[2], e[0] * e[2], e[0] * e[1]];
    let total: f64 = areas.iter().sum();
    let mut u = [
        rng.random_range(-0.5..=0.5),
        rng.random_range(-0.5..=0.5),
        rng.random_range(-0.5..=0.5),
    ];
    if total > 0.0 {
        let mut pick = rng.random_range(0.0..total);
        let mut axis = 2;
        for (a, &area) in areas.iter().enumerate() {
            if pick < area {
                axis = a;
                break;
            }
            pick -= area;
        }
        u[axis] = if rng.random_bool(0.5) { 0.5 } else { -0.5 };
    }
    [u[0] * e[0], u[1] * e[1], u[2] * e[2]]
}

/// One frame of `spec`, drawn with `seed`. Instance ids follow the instance
/// order, fixed ones first; ground points are instance 0.
pub fn synth_frame(spec: &SceneSpec, seed: u64) -> Result<(PointCloud, PointLabels)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = spec.instances.clone();
    if spec.random.count > 0 {
        instances.extend(random_instances(&spec.random, &spec.range, spec.ground_z, &spec.instances, &mut rng)?);
    }
    let noise = Normal::new(0.0, spec.noise).map_err(|e| ScanError::InvalidInput(e.to_string()))?;
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut pts = Vec::new();
    let mut sem = Vec::new();
    let mut inst = Vec::new();
    for (k, s) in instances.iter().enumerate() {
        for _ in 0..s.points {
            let d = match s.shape {
                Shape::Blob => [0, 1, 2].map(|a| std.sample(&mut rng) * s.extent[a] / 4.0),
                Shape::Box => box_surface(s.extent, &mut rng),
            };
            let p = [0, 1, 2].map(|a| s.center[a] + d[a] + noise.sample(&mut rng));
            pts.push([p[0] as f32, p[1] as f32, p[2] as f32, rng.random::<f32>()]);
            sem.push(s.class);
            inst.push(k as u16 + 1);
        }
    }
    let w = spec.stuff_half_width;
    let n_ground = (spec.stuff_density * 4.0 * w * w).round() as usize;
    let bands = spec.stuff_classes.len().max(1) as f64;
    for _ in 0..n_ground {
        let x = rng.random_range(-w..=w);
        let y = rng.random_range(-w..=w);
        let band = (((x + w) / (2.0 * w) * bands) as usize).min(spec.stuff_classes.len() - 1);
        let z = spec.ground_z + noise.sample(&mut rng);
        pts.push([x as f32, y as f32, z as f32, rng.random::<f32>()]);
        sem.push(spec.stuff_classes[band]);
        inst.push(0);
    }
    Ok((PointCloud::new(pts)?, PointLabels::new(sem, inst)?))
}

/// First frame of `spec` (seeded by `spec.seed`).
pub fn synth_scene(spec: &SceneSpec) -> Result<(PointCloud, PointLabels)> {
    synth_frame(spec, spec.seed)
}

/// All `spec.frames` frames; frame `k` uses seed `spec.seed + k`.
pub fn synth_frames(spec: &SceneSpec) -> Result<Vec<(PointCloud, PointLabels)>> {
    (0..spec.frames as u64).map(|k| synth_frame(spec, spec.seed.wrapping_add(k))).collect()
}

/// Scan-like scene of about `n` points: 90% on a ground plane spanning the
/// range, the rest on 40 object boxes.
pub fn benchmark_scene(n: usize, range: &VoxelRange, seed: u64) -> Result<(PointCloud, PointLabels)> {
    let half = (range.max[0] - range.min[0]).min(range.max[1] - range.min[1]) / 2.0;
    let objects = 40;
    let spec = SceneSpec {
        random: RandomInstances {
            count: objects,
            min_separation: 4.0,
            points: n / 10 / objects,
            extent: [4.0, 1.8, 1.5],
            shape: Shape::Box,
            margin: 3.0,
            ..RandomInstances::default()
        },
        stuff_density: (n - n / 10 / objects * objects) as f64 / (4.0 * half * half),
        stuff_half_width: half,
        stuff_classes: vec![9, 11, 15, 17],
        noise: 0.03,
        range: range.clone(),
        seed,
        ..SceneSpec::default()
    };
    synth_scene(&spec)
}

/// A uniform cloud of `n` points inside `range`, for timing runs.
pub fn uniform_cloud(n: usize, range: &VoxelRange, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| {
            let p = [0, 1, 2].map(|a| rng.random_range(range.min[a]..range.max[a]) as f32);
            [p[0], p[1], p[2], rng.random::<f32>()]
        })
        .collect();
    PointCloud::new(pts).expect("finite samples")
}
