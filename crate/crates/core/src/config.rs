//! Plain-text `key = value` files with dotted keys and `#` comments.
//!
//! ```text
//! channels = 64
//! attention.heads = 8
//! classes.things = 1-8
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, ScanError};
use crate::heads::{HeatmapKernel, LossParams};
use crate::inference::PipelineConfig;
use crate::metrics::ClassSpec;
use crate::synth::{InstanceSpec, SceneSpec, Shape};
use crate::voxel::{FlipConvention, VoxelRange};

#[derive(Clone, Debug, Default)]
pub struct KvFile {
    entries: BTreeMap<String, (usize, String)>,
}

fn err(line: usize, msg: impl Into<String>) -> ScanError {
    ScanError::Config { line, msg: msg.into() }
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected `key = value`, got `{body}`")))?;
            let k = k.trim();
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(err(line, format!("bad key `{k}`")));
            }
            if let Some((first, _)) = entries.insert(k.to_owned(), (line, v.trim().to_owned())) {
                return Err(err(line, format!("`{k}` already set on line {first}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Removes and parses `key` if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| err(line, format!("`{key}`: cannot parse `{v}`: {e}"))),
        }
    }

    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some((line, v)) = self.entries.remove(key) else {
            return Ok(None);
        };
        if v.is_empty() {
            return Ok(Some(Vec::new()));
        }
        v.split(',')
            .map(|s| {
                let s = s.trim();
                s.parse().map_err(|e| err(line, format!("`{key}`: cannot parse `{s}`: {e}")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    pub fn take_vec3(&mut self, key: &str) -> Result<Option<[f64; 3]>> {
        let line = self.line(key);
        match self.take_list::<f64>(key)? {
            None => Ok(None),
            Some(v) => <[f64; 3]>::try_from(v)
                .map(Some)
                .map_err(|v| err(line, format!("`{key}` needs 3 numbers, got {}", v.len()))),
        }
    }

    /// Class ids as a list of ids and inclusive `a-b` ranges.
    pub fn take_classes(&mut self, key: &str) -> Result<Option<Vec<u16>>> {
        let Some((line, v)) = self.entries.remove(key) else {
            return Ok(None);
        };
        let mut out = Vec::new();
        for part in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let bad = |_| err(line, format!("`{key}`: bad class `{part}`"));
            match part.split_once('-') {
                Some((a, b)) => {
                    let (a, b): (u16, u16) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
                    out.extend(a..=b);
                }
                None => out.push(part.parse().map_err(bad)?),
            }
        }
        Ok(Some(out))
    }

    fn line(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.0)
    }

    /// Keys starting with `prefix`, sorted.
    pub fn keys_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.entries.keys().filter(|k| k.starts_with(prefix)).cloned().collect()
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().min_by_key(|(_, (line, _))| *line) {
            Some((k, (line, _))) => Err(err(line, format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

fn take_range(kv: &mut KvFile, prefix: &str, range: &mut VoxelRange) -> Result<()> {
    let min_key = format!("{prefix}.min");
    let line = kv.line(&min_key).max(kv.line(&format!("{prefix}.max")));
    let min = kv.take_vec3(&min_key)?.unwrap_or(range.min);
    let max = kv.take_vec3(&format!("{prefix}.max"))?.unwrap_or(range.max);
    *range = VoxelRange::new(min, max).map_err(|e| err(line, e.to_string()))?;
    Ok(())
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{s}` is not a boolean")),
    }
}

/// Everything tunable in one file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub loss: LossParams,
    pub flip: FlipConvention,
    pub min_points: usize,
}

impl RunConfig {
    pub fn from_kv(mut kv: KvFile) -> Result<Self> {
        let mut c = RunConfig::default();
        let p = &mut c.pipeline;
        if let Some(s) = kv.take_vec3("scale")? {
            p.scale = s;
        }
        take_range(&mut kv, "range", &mut p.range)?;
        kv.take_into("centroids.max", &mut p.max_centroids)?;
        kv.take_into("centroids.threshold", &mut p.score_threshold)?;
        kv.take_into("centroids.pool_window", &mut p.pool_window)?;
        kv.take_into("centroids.sigma", &mut p.target_sigma)?;
        let line = kv.line("centroids.kernel");
        if let Some(s) = kv.take::<String>("centroids.kernel")? {
            p.heatmap_kernel = match s.as_str() {
                "bev" => HeatmapKernel::Bev,
                "volume" => HeatmapKernel::Volume,
                v => return Err(err(line, format!("`centroids.kernel` must be bev or volume, got `{v}`"))),
            };
        }
        kv.take_into("classes.count", &mut p.n_classes)?;
        if let Some(t) = kv.take_classes("classes.things")? {
            p.things = t.into_iter().collect();
        }
        kv.take_into("channels", &mut p.channels)?;
        let a = &mut p.attention;
        kv.take_into("attention.heads", &mut a.heads)?;
        kv.take_into("attention.head_dim", &mut a.head_dim)?;
        kv.take_into("attention.depth", &mut a.depth)?;
        kv.take_into("attention.features", &mut a.features)?;
        kv.take_into("attention.seed", &mut a.seed)?;
        let line = kv.line("attention.share_weights");
        if let Some(s) = kv.take::<String>("attention.share_weights")? {
            a.share_weights = parse_bool(&s).map_err(|m| err(line, m))?;
        }
        kv.take_into("loss.heatmap_alpha", &mut c.loss.heatmap.alpha)?;
        kv.take_into("loss.heatmap_beta", &mut c.loss.heatmap.beta)?;
        kv.take_into("loss.semantic_gamma", &mut c.loss.semantic_gamma)?;
        kv.take_into("loss.semantic_alpha", &mut c.loss.semantic_alpha)?;
        let line = kv.line("loss.ignore");
        if let Some(s) = kv.take::<String>("loss.ignore")? {
            c.loss.ignore = match s.as_str() {
                "none" => None,
                v => Some(v.parse().map_err(|_| err(line, format!("`loss.ignore`: bad class `{v}`")))?),
            };
        }
        let line = kv.line("augment.flip");
        if let Some(s) = kv.take::<String>("augment.flip")? {
            c.flip = match s.as_str() {
                "mirror" => FlipConvention::Mirror,
                "negate" => FlipConvention::Negate,
                v => return Err(err(line, format!("`augment.flip` must be mirror or negate, got `{v}`"))),
            };
        }
        kv.take_into("metrics.min_points", &mut c.min_points)?;
        kv.finish()?;
        c.pipeline.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(KvFile::parse(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(KvFile::read(path)?)
    }

    pub fn class_spec(&self) -> Result<ClassSpec> {
        let mut s = ClassSpec::new(self.pipeline.n_classes, self.pipeline.things.iter().copied())?;
        s.min_points = self.min_points;
        Ok(s)
    }
}

fn take_shape(kv: &mut KvFile, key: &str) -> Result<Option<Shape>> {
    let line = kv.line(key);
    Ok(match kv.take::<String>(key)?.as_deref() {
        None => None,
        Some("blob") => Some(Shape::Blob),
        Some("box") => Some(Shape::Box),
        Some(v) => return Err(err(line, format!("`{key}` must be blob or box, got `{v}`"))),
    })
}

/// Scene file. Instances are `instance.<n>.{class,center,extent,points,shape}`,
/// listed in ascending `n`.
pub fn parse_scene_spec(text: &str) -> Result<SceneSpec> {
    let mut kv = KvFile::parse(text)?;
    let mut s = SceneSpec::default();
    kv.take_into("seed", &mut s.seed)?;
    kv.take_into("frames", &mut s.frames)?;
    kv.take_into("noise", &mut s.noise)?;
    take_range(&mut kv, "range", &mut s.range)?;
    kv.take_into("stuff.density", &mut s.stuff_density)?;
    kv.take_into("stuff.half_width", &mut s.stuff_half_width)?;
    kv.take_into("stuff.z", &mut s.ground_z)?;
    if let Some(c) = kv.take_classes("stuff.classes")? {
        s.stuff_classes = c;
    }
    let r = &mut s.random;
    kv.take_into("random.count", &mut r.count)?;
    kv.take_into("random.min_separation", &mut r.min_separation)?;
    kv.take_into("random.points", &mut r.points)?;
    kv.take_into("random.margin", &mut r.margin)?;
    if let Some(e) = kv.take_vec3("random.extent")? {
        r.extent = e;
    }
    if let Some(c) = kv.take_classes("random.classes")? {
        r.classes = c;
    }
    if let Some(sh) = take_shape(&mut kv, "random.shape")? {
        r.shape = sh;
    }
    let mut ids = BTreeMap::new();
    for key in kv.keys_with_prefix("instance.") {
        let line = kv.line(&key);
        let id = key["instance.".len()..].split('.').next().unwrap_or("");
        let n: u32 = id.parse().map_err(|_| err(line, format!("bad instance number in `{key}`")))?;
        ids.entry(n).or_insert(line);
    }
    for (n, line) in ids {
        let k = |f: &str| format!("instance.{n}.{f}");
        let class = kv
            .take(&k("class"))?
            .ok_or_else(|| err(line, format!("instance {n} has no class")))?;
        let center = kv
            .take_vec3(&k("center"))?
            .ok_or_else(|| err(line, format!("instance {n} has no center")))?;
        s.instances.push(InstanceSpec {
            class,
            center,
            extent: kv.take_vec3(&k("extent"))?.unwrap_or([1.0; 3]),
            points: kv.take(&k("points"))?.unwrap_or(100),
            shape: take_shape(&mut kv, &k("shape"))?.unwrap_or_default(),
        });
    }
    kv.finish()?;
    s.validate()?;
    Ok(s)
}

pub fn read_scene_spec(path: &Path) -> Result<SceneSpec> {
    parse_scene_spec(&std::fs::read_to_string(path)?)
}

/// Class file: `classes.count`, `classes.things`, optional `classes.min_points`
/// and `name.<id> = label`.
pub fn parse_class_spec(text: &str) -> Result<ClassSpec> {
    let mut kv = KvFile::parse(text)?;
    let count_line = kv.line("classes.count");
    let n: usize = kv.take("classes.count")?.ok_or_else(|| err(count_line, "missing `classes.count`"))?;
    let things = kv.take_classes("classes.things")?.unwrap_or_default();
    let mut spec = ClassSpec::new(n, things).map_err(|e| err(count_line, e.to_string()))?;
    kv.take_into("classes.min_points", &mut spec.min_points)?;
    for key in kv.keys_with_prefix("name.") {
        let line = kv.line(&key);
        let id: u16 = key[5..].parse().map_err(|_| err(line, format!("bad class id in `{key}`")))?;
        let name: String = kv.take(&key)?.expect("listed key");
        spec = spec.with_name(id, name);
    }
    kv.finish()?;
    Ok(spec)
}

pub fn read_class_spec(path: &Path) -> Result<ClassSpec> {
    parse_class_spec(&std::fs::read_to_string(path)?)
}
