//! Semantic IoU and panoptic quality accumulation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Result, ScanError};
use crate::voxel::PointLabels;

pub const IGNORE: u16 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    n_classes: usize,
    things: BTreeSet<u16>,
    names: BTreeMap<u16, String>,
    /// Segments smaller than this are neither counted as FP nor FN. 0 disables.
    pub min_points: usize,
}

impl ClassSpec {
    /// Every class in `1..n_classes` that is not a thing is stuff.
    pub fn new(n_classes: usize, things: impl IntoIterator<Item = u16>) -> Result<Self> {
        let things: BTreeSet<u16> = things.into_iter().collect();
        if n_classes < 2 || n_classes > u16::MAX as usize {
            return Err(ScanError::InvalidInput(format!("class count {n_classes}")));
        }
        if let Some(&bad) = things.iter().find(|&&t| t == IGNORE || t as usize >= n_classes) {
            return Err(ScanError::InvalidInput(format!("thing class {bad} outside 1..{n_classes}")));
        }
        Ok(Self {
            n_classes,
            things,
            names: BTreeMap::new(),
            min_points: 0,
        })
    }

    pub fn semantic_kitti() -> Self {
        let names = [
            "unlabeled", "car", "bicycle", "motorcycle", "truck", "other-vehicle", "person", "bicyclist",
            "motorcyclist", "road", "parking", "sidewalk", "other-ground", "building", "fence", "vegetation",
            "trunk", "terrain", "pole", "traffic-sign",
        ];
        let mut s = Self::new(20, 1..=8).expect("static class table");
        for (i, n) in names.iter().enumerate() {
            s.names.insert(i as u16, n.to_string());
        }
        s
    }

    pub fn with_name(mut self, class: u16, name: impl Into<String>) -> Self {
        self.names.insert(class, name.into());
        self
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn things(&self) -> &BTreeSet<u16> {
        &self.things
    }

    pub fn is_thing(&self, c: u16) -> bool {
        self.things.contains(&c)
    }

    pub fn is_stuff(&self, c: u16) -> bool {
        c != IGNORE && (c as usize) < self.n_classes && !self.is_thing(c)
    }

    pub fn name(&self, c: u16) -> String {
        self.names.get(&c).cloned().unwrap_or_else(|| format!("class{c}"))
    }
}

/// Mergeable per-class counters.
#[derive(Clone, Debug, PartialEq)]
pub struct PanopticStats {
    pub iou_sum: Vec<f64>,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    /// Row-major `n x n`, rows ground truth, columns prediction.
    pub confusion: Vec<u64>,
    n: usize,
}

impl PanopticStats {
    pub fn new(n_classes: usize) -> Self {
        Self {
            iou_sum: vec![0.0; n_classes],
            tp: vec![0; n_classes],
            fp: vec![0; n_classes],
            fn_: vec![0; n_classes],
            confusion: vec![0; n_classes * n_classes],
            n: n_classes,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn confusion_at(&self, gt: u16, pred: u16) -> u64 {
        self.confusion[gt as usize * self.n + pred as usize]
    }

    pub fn merge(&mut self, other: &PanopticStats) -> Result<()> {
        if other.n != self.n {
            return Err(ScanError::Shape(format!("merging stats over {} and {} classes", self.n, other.n)));
        }
        for c in 0..self.n {
            self.iou_sum[c] += other.iou_sum[c];
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            *a += b;
        }
        Ok(())
    }
}

/// Segment key: stuff classes collapse to one segment regardless of instance id.
fn segment_key(class: u16, instance: u16, spec: &ClassSpec) -> (u16, u16) {
    if spec.is_thing(class) {
        (class, instance)
    } else {
        (class, 0)
    }
}

/// Stats of a single frame. Points whose ground truth is the ignore class are
/// dropped from both sides before anything is counted.
pub fn accumulate_frame(pred: &PointLabels, gt: &PointLabels, spec: &ClassSpec) -> Result<PanopticStats> {
    if pred.len() != gt.len() {
        return Err(ScanError::Shape(format!("{} predicted points, {} ground-truth points", pred.len(), gt.len())));
    }
    let n = spec.n_classes;
    let check = |c: u16, side: &str| {
        if c as usize >= n {
            Err(ScanError::InvalidInput(format!("{side} class {c} outside 0..{n}")))
        } else {
            Ok(())
        }
    };
    let mut stats = PanopticStats::new(n);
    let mut gt_area: BTreeMap<(u16, u16), u64> = BTreeMap::new();
    let mut pred_area: BTreeMap<(u16, u16), u64> = BTreeMap::new();
    let mut inter: BTreeMap<((u16, u16), (u16, u16)), u64> = BTreeMap::new();
    for i in 0..gt.len() {
        let (gs, ps) = (gt.semantic[i], pred.semantic[i]);
        check(gs, "ground-truth")?;
        check(ps, "predicted")?;
        if gs == IGNORE {
            continue;
        }
        stats.confusion[gs as usize * n + ps as usize] += 1;
        let g = segment_key(gs, gt.instance[i], spec);
        *gt_area.entry(g).or_default() += 1;
        if ps == IGNORE {
            continue;
        }
        let p = segment_key(ps, pred.instance[i], spec);
        *pred_area.entry(p).or_default() += 1;
        if gs == ps {
            *inter.entry((g, p)).or_default() += 1;
        }
    }
    let mut matched_gt = BTreeSet::new();
    let mut matched_pred = BTreeSet::new();
    for (&(g, p), &i) in &inter {
        let union = gt_area[&g] + pred_area[&p] - i;
        // strict > 0.5, checked in integers: 2i > union
        if 2 * i > union {
            let c = g.0 as usize;
            stats.tp[c] += 1;
            stats.iou_sum[c] += i as f64 / union as f64;
            matched_gt.insert(g);
            matched_pred.insert(p);
        }
    }
    for (g, &a) in &gt_area {
        if !matched_gt.contains(g) && a as usize >= spec.min_points {
            stats.fn_[g.0 as usize] += 1;
        }
    }
    for (p, &a) in &pred_area {
        if !matched_pred.contains(p) && a as usize >= spec.min_points {
            stats.fp[p.0 as usize] += 1;
        }
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: u16,
    pub thing: bool,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub iou: f64,
    /// Seen in the ground truth or the prediction.
    pub present: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Aggregate {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PanopticReport {
    pub classes: Vec<ClassMetrics>,
    pub all: Aggregate,
    pub things: Aggregate,
    pub stuff: Aggregate,
    /// PQ with stuff classes scored by semantic IoU.
    pub pq_dagger: f64,
    pub miou: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn finalize(stats: &PanopticStats, spec: &ClassSpec) -> Result<PanopticReport> {
    if stats.n != spec.n_classes {
        return Err(ScanError::Shape(format!("stats over {} classes, spec over {}", stats.n, spec.n_classes)));
    }
    let n = stats.n;
    let mut classes = Vec::with_capacity(n - 1);
    for c in 1..n {
        let (tp, fp, fn_) = (stats.tp[c] as f64, stats.fp[c] as f64, stats.fn_[c] as f64);
        let sq = if tp > 0.0 { stats.iou_sum[c] / tp } else { 0.0 };
        let denom = tp + 0.5 * fp + 0.5 * fn_;
        let rq = if denom > 0.0 { tp / denom } else { 0.0 };
        let row: u64 = (0..n).map(|p| stats.confusion[c * n + p]).sum();
        let col: u64 = (1..n).map(|g| stats.confusion[g * n + c]).sum();
        let hit = stats.confusion[c * n + c];
        let union = row + col - hit;
        let iou = if union > 0 { hit as f64 / union as f64 } else { 0.0 };
        classes.push(ClassMetrics {
            class: c as u16,
            thing: spec.is_thing(c as u16),
            pq: sq * rq,
            sq,
            rq,
            iou,
            present: denom > 0.0 || union > 0,
        });
    }
    let agg = |keep: &dyn Fn(&ClassMetrics) -> bool| {
        let sel: Vec<&ClassMetrics> = classes.iter().filter(|m| m.present && keep(m)).collect();
        Aggregate {
            pq: mean(sel.iter().map(|m| m.pq)),
            sq: mean(sel.iter().map(|m| m.sq)),
            rq: mean(sel.iter().map(|m| m.rq)),
        }
    };
    let all = agg(&|_| true);
    let things = agg(&|m| m.thing);
    let stuff = agg(&|m| !m.thing);
    let present = || classes.iter().filter(|m| m.present);
    Ok(PanopticReport {
        pq_dagger: mean(present().map(|m| if m.thing { m.pq } else { m.iou })),
        miou: mean(present().map(|m| m.iou)),
        classes,
        all,
        things,
        stuff,
    })
}

impl PanopticReport {
    pub fn to_text(&self, spec: &ClassSpec) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# PQ-dagger scores stuff classes by semantic IoU; absent classes are excluded from means");
        let _ = writeln!(s, "{:<16} {:>6} {:>7} {:>7} {:>7} {:>7}", "class", "type", "PQ", "SQ", "RQ", "IoU");
        for m in self.classes.iter().filter(|m| m.present) {
            let _ = writeln!(
                s,
                "{:<16} {:>6} {:>7.3} {:>7.3} {:>7.3} {:>7.3}",
                spec.name(m.class),
                if m.thing { "thing" } else { "stuff" },
                m.pq,
                m.sq,
                m.rq,
                m.iou
            );
        }
        let _ = writeln!(s);
        for (name, a) in [("all", &self.all), ("things", &self.things), ("stuff", &self.stuff)] {
            let _ = writeln!(s, "{name:<16} PQ {:.3}  SQ {:.3}  RQ {:.3}", a.pq, a.sq, a.rq);
        }
        let _ = writeln!(s, "PQ-dagger        {:.3}", self.pq_dagger);
        let _ = writeln!(s, "mIoU             {:.3}", self.miou);
        s
    }

    /// `class,metric,value` rows, header first.
    pub fn to_csv(&self, spec: &ClassSpec) -> String {
        let mut s = String::from("class,metric,value\n");
        for m in self.classes.iter().filter(|m| m.present) {
            let name = spec.name(m.class);
            for (k, v) in [("pq", m.pq), ("sq", m.sq), ("rq", m.rq), ("iou", m.iou)] {
                let _ = writeln!(s, "{name},{k},{v}");
            }
        }
        for (name, a) in [("all", &self.all), ("things", &self.things), ("stuff", &self.stuff)] {
            for (k, v) in [("pq", a.pq), ("sq", a.sq), ("rq", a.rq)] {
                let _ = writeln!(s, "{name},{k},{v}");
            }
        }
        let _ = writeln!(s, "all,pq_dagger,{}", self.pq_dagger);
        let _ = writeln!(s, "all,miou,{}", self.miou);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(sem: &[u16], inst: &[u16]) -> PointLabels {
        PointLabels::new(sem.to_vec(), inst.to_vec()).unwrap()
    }

    fn spec() -> ClassSpec {
        ClassSpec::new(4, [1, 2]).unwrap()
    }

    #[test]
    fn perfect() {
        let gt = labels(&[1, 1, 1, 2, 2, 3, 3, 0], &[1, 1, 2, 5, 5, 0, 0, 0]);
        let st = accumulate_frame(&gt, &gt, &spec()).unwrap();
        assert_eq!(st.fp, vec![0; 4]);
        assert_eq!(st.fn_, vec![0; 4]);
        let r = finalize(&st, &spec()).unwrap();
        assert_eq!((r.all.pq, r.all.sq, r.all.rq, r.miou, r.pq_dagger), (1.0, 1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn split_in_half_matches_nothing() {
        let gt = labels(&[1; 4], &[1; 4]);
        let pred = labels(&[1; 4], &[1, 1, 2, 2]);
        let st = accumulate_frame(&pred, &gt, &spec()).unwrap();
        assert_eq!((st.tp[1], st.fp[1], st.fn_[1]), (0, 2, 1));
        assert_eq!(finalize(&st, &spec()).unwrap().classes[0].pq, 0.0);
    }

    #[test]
    fn one_tp_one_fp() {
        let gt = labels(&[1, 1, 0, 0], &[1, 1, 0, 0]);
        let pred = labels(&[1, 1, 1, 1], &[1, 1, 2, 2]);
        // ignore points are dropped, so the FP needs its own non-ignore support
        let gt2 = labels(&[1, 1, 3, 3], &[1, 1, 0, 0]);
        let st = accumulate_frame(&pred, &gt2, &spec()).unwrap();
        assert_eq!((st.tp[1], st.fp[1], st.fn_[1]), (1, 1, 0));
        let m = &finalize(&st, &spec()).unwrap().classes[0];
        assert!((m.rq - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.sq, 1.0);
        assert!((m.pq - 2.0 / 3.0).abs() < 1e-12);
        let st = accumulate_frame(&pred, &gt, &spec()).unwrap();
        assert_eq!((st.tp[1], st.fp[1]), (1, 0));
    }

    #[test]
    fn absent_classes_excluded() {
        let gt = labels(&[3, 3], &[0, 0]);
        let r = finalize(&accumulate_frame(&gt, &gt, &spec()).unwrap(), &spec()).unwrap();
        assert_eq!(r.classes.iter().filter(|m| m.present).count(), 1);
        assert_eq!(r.all.pq, 1.0);
        assert_eq!(r.things, Aggregate::default());
    }

    #[test]
    fn relabel_invariance_and_merge() {
        let gt = labels(&[1, 1, 1, 2, 2, 3], &[4, 4, 7, 1, 1, 0]);
        let pred = labels(&[1, 1, 2, 2, 2, 3], &[9, 9, 3, 3, 3, 0]);
        let pred2 = labels(&[1, 1, 2, 2, 2, 3], &[2, 2, 8, 8, 8, 5]);
        let a = accumulate_frame(&pred, &gt, &spec()).unwrap();
        assert_eq!(a, accumulate_frame(&pred2, &gt, &spec()).unwrap());
        let mut ab = a.clone();
        ab.merge(&a).unwrap();
        assert_eq!(ab.tp[2], 2 * a.tp[2]);
        assert!(ab.merge(&PanopticStats::new(3)).is_err());
    }

    #[test]
    fn length_mismatch() {
        assert!(accumulate_frame(&labels(&[1], &[1]), &labels(&[1, 1], &[1, 1]), &spec()).is_err());
    }

    #[test]
    fn reports() {
        let s = ClassSpec::semantic_kitti();
        let gt = labels(&[1, 1, 9], &[1, 1, 0]);
        let r = finalize(&accumulate_frame(&gt, &gt, &s).unwrap(), &s).unwrap();
        let csv = r.to_csv(&s);
        assert!(csv.starts_with("class,metric,value\n"));
        assert!(csv.contains("car,pq,1\n"));
        assert!(csv.contains("all,miou,1\n"));
        assert!(r.to_text(&s).contains("road"));
    }
}
