//! Synthetic shapes benchmark with a parametric normal-to-fog domain shift,
//! plus AP@0.5 and F1 metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::detector::{Detection, Target};
use crate::error::{Error, Result};
use crate::image::{BBox, Image};
use crate::par::{map_range, ExecMode};
use crate::rng::Rng;

pub const CIRCLE: usize = 1;
pub const SQUARE: usize = 2;
pub const TRIANGLE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            _ => Err(Error::Format { what: "domain", detail: format!("unknown domain {s:?}") }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    /// 3 for circle/square/triangle, 1 for circles only.
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_extent: usize,
    pub max_extent: usize,
    pub fog_alpha: f64,
    pub fog_level: f64,
    pub noise_sigma: f64,
    /// Largest hue shift applied to object colors in the target domain.
    pub hue_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            classes: 3,
            min_objects: 1,
            max_objects: 6,
            min_extent: 12,
            max_extent: 24,
            fog_alpha: 0.5,
            fog_level: 0.7,
            noise_sigma: 0.05,
            hue_jitter: 0.08,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::Config { key: key.into(), reason: reason.into() });
        if !(1..=3).contains(&self.classes) {
            return bad("classes", "must be 1, 2 or 3");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("min_objects", "need 1 <= min_objects <= max_objects");
        }
        if self.min_extent < 4 || self.min_extent > self.max_extent || self.max_extent >= self.size {
            return bad("min_extent", "need 4 <= min_extent <= max_extent < size");
        }
        if !(0.0..=1.0).contains(&self.fog_alpha) || self.noise_sigma < 0.0 || self.hue_jitter < 0.0 {
            return bad("fog_alpha", "fog alpha in [0,1], noise and jitter nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub objects: Vec<Target>,
    pub domain: Domain,
    /// Generator seed and stream the scene was drawn from.
    pub seed: u64,
    pub stream: u64,
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as usize % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn class_hue(class: usize) -> f64 {
    match class {
        CIRCLE => 0.0,
        SQUARE => 1.0 / 3.0,
        _ => 2.0 / 3.0,
    }
}

fn inside(class: usize, x0: f64, y0: f64, s: f64, px: f64, py: f64) -> bool {
    let (u, v) = ((px - x0) / s, (py - y0) / s);
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return false;
    }
    match class {
        CIRCLE => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        SQUARE => true,
        // Apex at the top middle, base along the bottom edge.
        _ => (u - 0.5).abs() <= 0.5 * v,
    }
}

struct Placed {
    class: usize,
    x0: usize,
    y0: usize,
    extent: usize,
    hue: f64,
    saturation: f64,
    value: f64,
}

fn layout(rng: &mut Rng, cfg: &SynthConfig) -> (Vec<Placed>, [f64; 3]) {
    let bg = [rng.uniform_range(0.82, 0.95), rng.uniform_range(0.82, 0.95), rng.uniform_range(0.82, 0.95)];
    let count = rng.int_range(cfg.min_objects, cfg.max_objects);
    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    let mut attempts = 0;
    while placed.len() < count && attempts < 200 {
        attempts += 1;
        let class = rng.int_range(1, cfg.classes);
        let extent = rng.int_range(cfg.min_extent, cfg.max_extent);
        let x0 = rng.int_range(0, cfg.size - extent);
        let y0 = rng.int_range(0, cfg.size - extent);
        let hue = class_hue(class) + rng.uniform_range(-0.03, 0.03);
        let saturation = rng.uniform_range(0.75, 0.95);
        let value = rng.uniform_range(0.6, 0.85);
        let b = pixel_box(x0, y0, extent, cfg.size);
        if placed.iter().any(|p| pixel_box(p.x0, p.y0, p.extent, cfg.size).iou(&b) > 0.1) {
            continue;
        }
        placed.push(Placed { class, x0, y0, extent, hue, saturation, value });
    }
    (placed, bg)
}

fn pixel_box(x0: usize, y0: usize, extent: usize, size: usize) -> BBox {
    let s = size as f64;
    BBox::from_corners(x0 as f64 / s, y0 as f64 / s, (x0 + extent) as f64 / s, (y0 + extent) as f64 / s)
}

/// Renders one scene. Layout and domain effects draw from separate
/// substreams, so both domains share annotations for the same generator.
pub fn generate_scene(rng: &Rng, domain: Domain, cfg: &SynthConfig) -> Scene {
    let mut layout_rng = rng.fork(0);
    let mut shift_rng = rng.fork(1);
    let (placed, bg) = layout(&mut layout_rng, cfg);
    let jitter = match domain {
        Domain::Source => 0.0,
        Domain::Target => shift_rng.uniform_range(-cfg.hue_jitter, cfg.hue_jitter),
    };
    let mut image = Image::filled(cfg.size, cfg.size, bg);
    for p in &placed {
        let color = hsv_to_rgb(p.hue + jitter, p.saturation, p.value);
        let (x0, y0, s) = (p.x0 as f64, p.y0 as f64, p.extent as f64);
        for y in p.y0..p.y0 + p.extent {
            for x in p.x0..p.x0 + p.extent {
                if inside(p.class, x0, y0, s, x as f64 + 0.5, y as f64 + 0.5) {
                    image.set_pixel(y, x, color);
                }
            }
        }
    }
    if domain == Domain::Target {
        let (a, level) = (cfg.fog_alpha, cfg.fog_level);
        for v in image.pixels.iter_mut() {
            *v = (1.0 - a) * *v + a * level;
        }
        if cfg.noise_sigma > 0.0 {
            for v in image.pixels.iter_mut() {
                *v = (*v + cfg.noise_sigma * shift_rng.normal()).clamp(0.0, 1.0);
            }
        }
    }
    let objects = placed.iter().map(|p| Target { bbox: pixel_box(p.x0, p.y0, p.extent, cfg.size), class: p.class }).collect();
    let state = rng.state();
    Scene { image, objects, domain, seed: state.seed, stream: state.stream }
}

/// Scene `i` is drawn from stream `i` of `seed`.
pub fn generate_dataset(seed: u64, domain: Domain, count: usize, cfg: &SynthConfig, mode: ExecMode) -> Vec<Scene> {
    map_range(count, mode, |i| generate_scene(&Rng::substream(seed, i as u64), domain, cfg))
}

/// IoU of two boxes with positive extent.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !(bx.w > 0.0 && bx.h > 0.0) {
            return Err(Error::Config { key: "box".into(), reason: format!("degenerate box {bx:?}") });
        }
    }
    Ok(a.iou(b))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalResult {
    /// `(class, AP)` for classes with ground truth.
    pub per_class_ap: Vec<(usize, f64)>,
    pub map: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Nothing to detect and nothing detected.
    pub vacuous: bool,
}

pub const MATCH_IOU: f64 = 0.5;

/// Greedy confidence-descending matching, one detection per ground truth.
/// Returns a hit flag per detection in the sorted order along with that order.
fn greedy_match(dets: &[(usize, Detection)], gts: &[Vec<Target>]) -> (Vec<(usize, Detection)>, Vec<bool>) {
    let mut sorted = dets.to_vec();
    sorted.sort_by(|a, b| {
        b.1.confidence
            .total_cmp(&a.1.confidence)
            .then(a.0.cmp(&b.0))
            .then(a.1.bbox.cx.total_cmp(&b.1.bbox.cx))
            .then(a.1.bbox.cy.total_cmp(&b.1.bbox.cy))
    });
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let hits = sorted
        .iter()
        .map(|(scene, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, t) in gts[*scene].iter().enumerate() {
                if used[*scene][j] || t.class != d.class {
                    continue;
                }
                let v = d.bbox.iou(&t.bbox);
                if v >= MATCH_IOU && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                used[*scene][j] = true;
                true
            } else {
                false
            }
        })
        .collect();
    (sorted, hits)
}

fn eleven_point_ap(hits: &[bool], positives: usize) -> f64 {
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        curve.push((tp as f64 / positives as f64, tp as f64 / (i + 1) as f64));
    }
    (0..=10)
        .map(|r| {
            let r = r as f64 / 10.0;
            curve.iter().filter(|(rec, _)| *rec >= r - 1e-12).map(|(_, p)| *p).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Scores detections (`detections[i]` belongs to `ground_truth[i]`).
pub fn evaluate(detections: &[Vec<Detection>], ground_truth: &[Vec<Target>], classes: usize, confidence: f64) -> Result<EvalResult> {
    if detections.len() != ground_truth.len() {
        return Err(Error::Config {
            key: "scenes".into(),
            reason: format!("{} detection lists for {} scenes", detections.len(), ground_truth.len()),
        });
    }
    let flat: Vec<(usize, Detection)> = detections.iter().enumerate().flat_map(|(i, ds)| ds.iter().map(move |d| (i, *d))).collect();
    let total_gt: usize = ground_truth.iter().map(Vec::len).sum();

    let mut per_class_ap = Vec::new();
    for c in 1..=classes {
        let positives = ground_truth.iter().flatten().filter(|t| t.class == c).count();
        if positives == 0 {
            continue;
        }
        let dets: Vec<(usize, Detection)> = flat.iter().copied().filter(|(_, d)| d.class == c).collect();
        let (_, hits) = greedy_match(&dets, ground_truth);
        per_class_ap.push((c, eleven_point_ap(&hits, positives)));
    }

    let kept: Vec<(usize, Detection)> = flat.iter().copied().filter(|(_, d)| d.confidence >= confidence).collect();
    let (_, hits) = greedy_match(&kept, ground_truth);
    let tp = hits.iter().filter(|&&h| h).count();
    let fp = hits.len() - tp;
    let fn_ = total_gt - tp;
    let vacuous = total_gt == 0 && kept.is_empty();
    let precision = if tp + fp == 0 {
        if vacuous {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if total_gt == 0 {
        if vacuous {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / total_gt as f64
    };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    let map = if per_class_ap.is_empty() {
        if flat.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        per_class_ap.iter().map(|(_, a)| a).sum::<f64>() / per_class_ap.len() as f64
    };
    Ok(EvalResult { per_class_ap, map, f1, precision, recall, tp, fp, fn_, vacuous })
}

pub fn eval_csv(rows: &[(String, EvalResult)]) -> String {
    let mut out = String::from("name,map,f1,precision,recall,tp,fp,fn\n");
    for (name, r) in rows {
        let _ = writeln!(out, "{name},{:.6},{:.6},{:.6},{:.6},{},{},{}", r.map, r.f1, r.precision, r.recall, r.tp, r.fp, r.fn_);
    }
    out
}

const ANNOTATIONS: &str = "annotations.csv";
const MANIFEST: &str = "scenes.csv";

fn image_name(id: usize) -> String {
    format!("scene_{id:05}.ppm")
}

/// Writes `scene_XXXXX.ppm`, `annotations.csv` and `scenes.csv` into `dir`.
pub fn export_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut ann = String::from("scene_id,class,cx,cy,w,h\n");
    let mut manifest = String::from("scene_id,seed,stream,domain\n");
    for (id, s) in scenes.iter().enumerate() {
        fs::write(dir.join(image_name(id)), s.image.to_ppm())?;
        let _ = writeln!(manifest, "{id},{},{},{}", s.seed, s.stream, s.domain.name());
        for t in &s.objects {
            let b = t.bbox;
            let _ = writeln!(ann, "{id},{},{:.6},{:.6},{:.6},{:.6}", t.class, b.cx, b.cy, b.w, b.h);
        }
    }
    fs::write(dir.join(ANNOTATIONS), ann)?;
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

fn read_required(path: &Path, what: &'static str) -> Result<String> {
    if !path.exists() {
        return Err(Error::Missing { what, path: path.to_path_buf() });
    }
    Ok(fs::read_to_string(path)?)
}

pub fn import_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let manifest = read_required(&dir.join(MANIFEST), "dataset manifest")?;
    let bad = |detail: String| Error::Format { what: "dataset csv", detail };
    let mut scenes = Vec::new();
    for (n, line) in manifest.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(format!("{MANIFEST} line {}: expected 4 fields", n + 1)));
        }
        let id: usize = f[0].parse().map_err(|_| bad(format!("{MANIFEST} line {}: bad id", n + 1)))?;
        if id != scenes.len() {
            return Err(bad(format!("{MANIFEST} line {}: ids must be consecutive", n + 1)));
        }
        let seed: u64 = f[1].parse().map_err(|_| bad(format!("{MANIFEST} line {}: bad seed", n + 1)))?;
        let stream: u64 = f[2].parse().map_err(|_| bad(format!("{MANIFEST} line {}: bad stream", n + 1)))?;
        let path = dir.join(image_name(id));
        if !path.exists() {
            return Err(Error::Missing { what: "scene image", path });
        }
        let image = Image::from_ppm(&fs::read(&path)?)?;
        scenes.push(Scene { image, objects: Vec::new(), domain: Domain::parse(f[3])?, seed, stream });
    }
    let ann = read_required(&dir.join(ANNOTATIONS), "annotations")?;
    for (n, line) in ann.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("{ANNOTATIONS} line {}: bad number", n + 1)));
        if f.len() != 6 {
            return Err(bad(format!("{ANNOTATIONS} line {}: expected 6 fields", n + 1)));
        }
        let id: usize = f[0].parse().map_err(|_| bad(format!("{ANNOTATIONS} line {}: bad id", n + 1)))?;
        let class: usize = f[1].parse().map_err(|_| bad(format!("{ANNOTATIONS} line {}: bad class", n + 1)))?;
        let scene = scenes.get_mut(id).ok_or_else(|| bad(format!("{ANNOTATIONS} line {}: unknown scene {id}", n + 1)))?;
        let bbox = BBox::new(parse(f[2])?, parse(f[3])?, parse(f[4])?, parse(f[5])?);
        scene.objects.push(Target { bbox, class });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(cx: f64, class: usize, confidence: f64) -> Detection {
        Detection { bbox: BBox::new(cx, 0.5, 0.2, 0.2), class, confidence }
    }

    #[test]
    fn null_shift_is_identity() {
        let cfg = SynthConfig { fog_alpha: 0.0, noise_sigma: 0.0, hue_jitter: 0.0, ..Default::default() };
        let rng = Rng::new(11);
        let a = generate_scene(&rng, Domain::Source, &cfg);
        let b = generate_scene(&rng, Domain::Target, &cfg);
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn shift_keeps_annotations() {
        let cfg = SynthConfig::default();
        for seed in 0..20 {
            let rng = Rng::new(seed);
            let a = generate_scene(&rng, Domain::Source, &cfg);
            let b = generate_scene(&rng, Domain::Target, &cfg);
            assert_eq!(a.objects, b.objects);
            assert_ne!(a.image, b.image);
        }
    }

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &BBox::new(0.1, 0.1, 0.05, 0.05)).unwrap(), 0.0);
        assert!(iou(&a, &BBox::new(0.5, 0.5, 0.0, 0.1)).is_err());
    }

    #[test]
    fn perfect_and_empty_detections() {
        let gt = vec![vec![Target { bbox: BBox::new(0.3, 0.5, 0.2, 0.2), class: 1 }]];
        let r = evaluate(&[vec![det(0.3, 1, 1.0)]], &gt, 3, 0.5).unwrap();
        assert_eq!((r.map, r.f1), (1.0, 1.0));
        let r = evaluate(&[vec![]], &gt, 3, 0.5).unwrap();
        assert_eq!((r.map, r.f1, r.fn_), (0.0, 0.0, 1));
        let r = evaluate(&[vec![]], &[vec![]], 3, 0.5).unwrap();
        assert!(r.vacuous && r.f1 == 1.0 && r.map == 1.0);
    }

    #[test]
    fn one_hit_one_miss() {
        let gt = vec![vec![Target { bbox: BBox::new(0.3, 0.5, 0.2, 0.2), class: 1 }]];
        let r = evaluate(&[vec![det(0.3, 1, 0.9), det(0.8, 1, 0.8)]], &gt, 1, 0.5).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 0));
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate_dataset(5, Domain::Target, 3, &SynthConfig::default(), ExecMode::Sequential);
        export_dataset(dir.path(), &scenes).unwrap();
        let back = import_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(a.image.to_ppm(), b.image.to_ppm());
            assert_eq!(a.objects.len(), b.objects.len());
            assert_eq!((a.seed, a.stream), (b.seed, b.stream));
            for (x, y) in a.objects.iter().zip(&b.objects) {
                assert!(x.bbox.l1(&y.bbox) < 4e-6);
            }
        }
    }
}
