//! A one-layer query decoder with class and box heads.
//!
//! Images are cut into non-overlapping patches and projected to tokens. Object
//! queries cross-attend to the tokens once, pass through a residual
//! feed-forward block, and are read out by a classification head (background
//! is class 0) and a sigmoid box head in `(cx, cy, w, h)` form.

use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::hungarian::{hungarian_assign, Sense};
use crate::image::{BBox, Image};
use crate::nn::{init_matrix, Linear, ParamSet};
use crate::rng::Rng;
use crate::slots::FeatureMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub patch: usize,
    /// Token dimension `d`.
    pub dim: usize,
    /// Query dimension `d_q`.
    pub query_dim: usize,
    pub queries: usize,
    /// Foreground classes `C`.
    pub classes: usize,
    /// Width of the Gaussian attention prior around each query's anchor, in
    /// normalized image units; 0 disables the prior.
    pub locality: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { image_size: 64, patch: 8, dim: 16, query_dim: 16, queries: 25, classes: 3, locality: 0.07 }
    }
}

impl DetectorConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size / self.patch, self.image_size / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (a, b) = self.grid();
        a * b
    }

    /// Reference box per query: centers on a square grid in row-major order.
    pub fn anchors(&self) -> Vec<BBox> {
        let side = (self.queries as f64).sqrt().ceil() as usize;
        let size = 1.0 / side as f64;
        (0..self.queries).map(|i| BBox::new(((i % side) as f64 + 0.5) * size, ((i / side) as f64 + 0.5) * size, size, size)).collect()
    }

    /// Additive attention bias `-|a_q - t_i|^2 / (2 s^2)` between query anchors
    /// and token centers.
    pub fn locality_bias(&self, grid: (usize, usize)) -> Tensor {
        let (gh, gw) = grid;
        let mut bias = Tensor::zeros(&[self.queries, gh * gw]);
        if self.locality <= 0.0 {
            return bias;
        }
        let denom = 2.0 * self.locality * self.locality;
        for (q, a) in self.anchors().iter().enumerate() {
            for i in 0..gh * gw {
                let tx = ((i % gw) as f64 + 0.5) / gw as f64;
                let ty = ((i / gw) as f64 + 0.5) / gh as f64;
                bias.set(q, i, -((a.cx - tx).powi(2) + (a.cy - ty).powi(2)) / denom);
            }
        }
        bias
    }

    /// Anchors in logit space, added before the box sigmoid. Coordinates are
    /// clamped to `[0.01, 0.99]` so a single full-image anchor stays finite.
    pub fn anchor_logits(&self) -> Tensor {
        let logit = |p: f64| {
            let p = p.clamp(0.01, 0.99);
            (p / (1.0 - p)).ln()
        };
        let rows: Vec<f64> = self.anchors().iter().flat_map(|a| a.to_array().map(logit)).collect();
        Tensor::from_parts(vec![self.queries, 4], rows)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.locality >= 0.0) {
            return Err(Error::Config { key: "locality".into(), reason: "must be nonnegative".into() });
        }
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config {
                key: "patch".into(),
                reason: format!("image size {} not divisible by patch {}", self.image_size, self.patch),
            });
        }
        for (key, v) in [("dim", self.dim), ("query_dim", self.query_dim), ("queries", self.queries), ("classes", self.classes)] {
            if v == 0 {
                return Err(Error::Config { key: key.into(), reason: "must be positive".into() });
            }
        }
        Ok(())
    }
}

/// Ground-truth or pseudo-label box with a foreground class in `1..=C`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub confidence: f64,
}

/// Decoder outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    /// Decoded query embeddings `M x d_q`.
    pub queries: Tensor,
    pub logits: Tensor,
    pub boxes: Tensor,
    /// Largest non-background probability per query.
    pub confidences: Vec<f64>,
    /// Argmax over all classes; 0 is background.
    pub classes: Vec<usize>,
    /// Argmax over foreground classes only.
    pub foreground: Vec<usize>,
}

impl QuerySet {
    pub fn from_tensors(queries: Tensor, logits: Tensor, boxes: Tensor) -> Result<Self> {
        let m = logits.rows();
        if boxes.rows() != m || boxes.cols() != 4 || queries.rows() != m || logits.cols() < 2 {
            return Err(shape_err(
                "query_set",
                format!("queries {:?}, logits {:?}, boxes {:?}", queries.shape(), logits.shape(), boxes.shape()),
            ));
        }
        let mut confidences = Vec::with_capacity(m);
        let mut classes = Vec::with_capacity(m);
        let mut foreground = Vec::with_capacity(m);
        for i in 0..m {
            let p = crate::math::softmax(logits.row_slice(i))?;
            let (fg, conf) =
                p.iter().enumerate().skip(1).fold((1, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best });
            let all = if p[0] >= conf { 0 } else { fg };
            confidences.push(conf);
            classes.push(all);
            foreground.push(fg);
        }
        Ok(Self { queries, logits, boxes, confidences, classes, foreground })
    }

    pub fn len(&self) -> usize {
        self.confidences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidences.is_empty()
    }

    pub fn bbox(&self, i: usize) -> BBox {
        BBox::from_slice(self.boxes.row_slice(i))
    }

    /// One detection per query, labeled with its best foreground class.
    pub fn detections(&self) -> Vec<Detection> {
        (0..self.len()).map(|i| Detection { bbox: self.bbox(i), class: self.foreground[i], confidence: self.confidences[i] }).collect()
    }
}

/// Parameter naming and forward pass of the detector.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub patch_proj: Linear,
    pub attn_q: Linear,
    pub attn_k: Linear,
    pub attn_v: Linear,
    pub attn_o: Linear,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub cls: Linear,
    pub box1: Linear,
    pub box2: Linear,
}

pub const POS_EMBED: &str = "det.pos";
pub const QUERY_EMBED: &str = "det.queries";

/// Tape handles for one decoder pass.
#[derive(Debug, Clone, Copy)]
pub struct DetectorNodes {
    pub decoded: NodeId,
    pub attention: NodeId,
    pub logits: NodeId,
    pub boxes: NodeId,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Self {
        let (d, q) = (config.dim, config.query_dim);
        let patch_in = config.patch * config.patch * 3;
        Self {
            config,
            patch_proj: Linear::new("det.patch", patch_in, d),
            attn_q: Linear::new("det.attn.q", q, q).without_bias(),
            attn_k: Linear::new("det.attn.k", d, q).without_bias(),
            attn_v: Linear::new("det.attn.v", d, q).without_bias(),
            attn_o: Linear::new("det.attn.o", q, q).without_bias(),
            ffn1: Linear::new("det.ffn1", q, 2 * q),
            ffn2: Linear::new("det.ffn2", 2 * q, q),
            cls: Linear::new("det.cls", q, config.classes + 1),
            box1: Linear::new("det.box1", q, q),
            box2: Linear::new("det.box2", q, 4),
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        let c = &self.config;
        self.patch_proj.init(params, rng, 1.0);
        // Coordinate ramps through a random projection, so attended values
        // carry the location of the tokens they came from.
        let ramps = crate::slots::position_ramps(c.grid());
        let proj = init_matrix(rng, 4, c.dim, 2.0);
        params.insert(POS_EMBED, ramps.matmul(&proj).expect("ramp projection shapes agree"));
        params.insert(QUERY_EMBED, init_matrix(rng, c.queries, c.query_dim, 0.3 * (c.queries as f64).sqrt()));
        for layer in [&self.attn_q, &self.attn_k, &self.attn_v, &self.attn_o, &self.ffn1, &self.box1] {
            layer.init(params, rng, 1.0);
        }
        self.ffn2.init(params, rng, 0.5);
        self.cls.init(params, rng, 0.5);
        self.box2.init(params, rng, 0.5);
    }

    /// Patch tokens `N x (p*p*3)`, patches in row-major grid order.
    pub fn patches(&self, image: &Image) -> Result<Tensor> {
        let p = self.config.patch;
        if p == 0 || !image.height.is_multiple_of(p) || !image.width.is_multiple_of(p) {
            return Err(shape_err("encode_image", format!("{}x{} not divisible by patch {p}", image.height, image.width)));
        }
        let (gh, gw) = (image.height / p, image.width / p);
        let mut data = Vec::with_capacity(image.pixels.len());
        for gy in 0..gh {
            for gx in 0..gw {
                for y in gy * p..(gy + 1) * p {
                    let start = (y * image.width + gx * p) * 3;
                    data.extend_from_slice(&image.pixels[start..start + 3 * p]);
                }
            }
        }
        Tensor::matrix(gh * gw, p * p * 3, data)
    }

    pub fn encode_node(&self, g: &mut Graph, params: &ParamSet, image: &Image) -> Result<(NodeId, (usize, usize))> {
        let patches = self.patches(image)?;
        let grid = (image.height / self.config.patch, image.width / self.config.patch);
        let x = g.constant(patches);
        Ok((self.patch_proj.forward(g, params, x)?, grid))
    }

    /// Query embeddings `Q_obj` as a tape leaf.
    pub fn query_node(&self, g: &mut Graph, params: &ParamSet) -> Result<NodeId> {
        g.param(params, QUERY_EMBED)
    }

    /// Cross-attention from `queries [M,d_q]` to `tokens [N,d]`, then the heads.
    pub fn detect_node(&self, g: &mut Graph, params: &ParamSet, tokens: NodeId, queries: NodeId) -> Result<DetectorNodes> {
        let (n, d) = (g.value(tokens).rows(), g.value(tokens).cols());
        if d != self.config.dim || g.value(queries).cols() != self.config.query_dim {
            return Err(shape_err("detect", format!("tokens {:?}, queries {:?}", g.value(tokens).shape(), g.value(queries).shape())));
        }
        let keyed = if params.contains(POS_EMBED) && params.get(POS_EMBED)?.rows() == n {
            let pos = g.param(params, POS_EMBED)?;
            g.add(tokens, pos)?
        } else {
            tokens
        };
        let q = self.attn_q.forward(g, params, queries)?;
        let k = self.attn_k.forward(g, params, keyed)?;
        let v = self.attn_v.forward(g, params, keyed)?;
        let scores = g.matmul_nt(q, k)?;
        let mut scores = g.scale(scores, 1.0 / (self.config.query_dim as f64).sqrt());
        let m = g.value(queries).rows();
        if self.config.locality > 0.0 && m == self.config.queries {
            let side = (n as f64).sqrt().round() as usize;
            if side * side == n {
                let bias = g.constant(self.config.locality_bias((side, side)));
                scores = g.add(scores, bias)?;
            }
        }
        let attention = g.softmax_rows(scores);
        let mixed = g.matmul(attention, v)?;
        let out = self.attn_o.forward(g, params, mixed)?;
        let x = g.add(queries, out)?;
        let hidden = self.ffn1.forward(g, params, x)?;
        let hidden = g.tanh(hidden);
        let ff = self.ffn2.forward(g, params, hidden)?;
        let decoded = g.add(x, ff)?;
        let logits = self.cls.forward(g, params, decoded)?;
        let b = self.box1.forward(g, params, decoded)?;
        let b = g.tanh(b);
        let mut b = self.box2.forward(g, params, b)?;
        if m == self.config.queries {
            let anchors = g.constant(self.config.anchor_logits());
            b = g.add(b, anchors)?;
        }
        let boxes = g.sigmoid(b);
        Ok(DetectorNodes { decoded, attention, logits, boxes })
    }

    pub fn query_set(&self, g: &Graph, nodes: &DetectorNodes) -> Result<QuerySet> {
        QuerySet::from_tensors(g.value(nodes.decoded).clone(), g.value(nodes.logits).clone(), g.value(nodes.boxes).clone())
    }
}

pub fn encode_image(image: &Image, detector: &Detector, params: &ParamSet) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let (tokens, grid) = detector.encode_node(&mut g, params, image)?;
    FeatureMap::new(g.value(tokens).clone(), grid)
}

pub fn detect(features: &FeatureMap, queries: &Tensor, detector: &Detector, params: &ParamSet) -> Result<QuerySet> {
    let mut g = Graph::new();
    let t = g.constant(features.tokens.clone());
    let q = g.constant(queries.clone());
    let nodes = detector.detect_node(&mut g, params, t, q)?;
    detector.query_set(&g, &nodes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Weight on background-class focal terms.
    pub background_alpha: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0, background_alpha: 0.25, l1_weight: 5.0, giou_weight: 2.0 }
    }
}

/// Loss components, already divided by `max(1, |targets|)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub classification: f64,
    pub l1: f64,
    pub giou: f64,
    /// `(target, query)` pairs.
    pub matches: Vec<(usize, usize)>,
    /// No targets: every query was pushed toward background.
    pub background_only: bool,
    /// Targets beyond the query count that were dropped.
    pub dropped_targets: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub classification: NodeId,
    pub l1: Option<NodeId>,
    pub giou: Option<NodeId>,
}

pub fn focal_term(p: f64, alpha: f64, gamma: f64) -> f64 {
    -alpha * (1.0 - p).powf(gamma) * p.ln()
}

/// Matching cost `-p(class) + l1_weight * L1 + giou_weight * (1 - GIoU)`.
pub fn matching_cost(queries: &QuerySet, targets: &[Target], cfg: &LossConfig) -> Result<Tensor> {
    let mut cost = Tensor::zeros(&[targets.len(), queries.len()]);
    for (t, target) in targets.iter().enumerate() {
        if target.class == 0 || target.class >= queries.logits.cols() {
            return Err(Error::Config { key: "target.class".into(), reason: format!("class {} out of range", target.class) });
        }
        for q in 0..queries.len() {
            let p = crate::math::softmax(queries.logits.row_slice(q))?[target.class];
            let b = queries.bbox(q);
            let c = -p + cfg.l1_weight * b.l1(&target.bbox) + cfg.giou_weight * (1.0 - b.giou(&target.bbox));
            cost.set(t, q, c);
        }
    }
    Ok(cost)
}

/// Per-row GIoU between two `[T,4]` cxcywh box stacks, returned as `[T,1]`.
pub fn giou_node(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId> {
    let corners = |g: &mut Graph, b: NodeId| -> Result<[NodeId; 6]> {
        let cx = g.slice_cols(b, 0, 1)?;
        let cy = g.slice_cols(b, 1, 1)?;
        let w = g.slice_cols(b, 2, 1)?;
        let h = g.slice_cols(b, 3, 1)?;
        let hw = g.scale(w, 0.5);
        let hh = g.scale(h, 0.5);
        let x1 = g.sub(cx, hw)?;
        let x2 = g.add(cx, hw)?;
        let y1 = g.sub(cy, hh)?;
        let y2 = g.add(cy, hh)?;
        let area = g.mul(w, h)?;
        Ok([x1, y1, x2, y2, area, w])
    };
    let [px1, py1, px2, py2, parea, _] = corners(g, pred)?;
    let [tx1, ty1, tx2, ty2, tarea, _] = corners(g, target)?;
    let ix2 = g.min(px2, tx2)?;
    let ix1 = g.max(px1, tx1)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.relu(iw);
    let iy2 = g.min(py2, ty2)?;
    let iy1 = g.max(py1, ty1)?;
    let ih = g.sub(iy2, iy1)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let union = g.add(parea, tarea)?;
    let union = g.sub(union, inter)?;
    let iou = g.div(inter, union)?;
    let hx2 = g.max(px2, tx2)?;
    let hx1 = g.min(px1, tx1)?;
    let hw = g.sub(hx2, hx1)?;
    let hy2 = g.max(py2, ty2)?;
    let hy1 = g.min(py1, ty1)?;
    let hh = g.sub(hy2, hy1)?;
    let hull = g.mul(hw, hh)?;
    let gap = g.sub(hull, union)?;
    let frac = g.div(gap, hull)?;
    g.sub(iou, frac)
}

/// Records the matched focal + box loss for one image on the tape.
pub fn detection_loss_node(
    g: &mut Graph,
    logits: NodeId,
    boxes: NodeId,
    queries: &QuerySet,
    targets: &[Target],
    cfg: &LossConfig,
) -> Result<(LossNodes, LossReport)> {
    let m = queries.len();
    let dropped = targets.len().saturating_sub(m);
    let targets = &targets[..targets.len().min(m)];
    let mut report = LossReport { dropped_targets: dropped, background_only: targets.is_empty(), ..Default::default() };
    let mut class_of = vec![0usize; m];
    if !targets.is_empty() {
        let cost = matching_cost(queries, targets, cfg)?;
        let assignment = hungarian_assign(&cost, Sense::Minimize)?;
        for &(t, q) in &assignment.pairs {
            class_of[q] = targets[t].class;
        }
        report.matches = assignment.pairs;
    }
    let norm = 1.0 / (targets.len().max(1) as f64);

    let logp = g.log_softmax_rows(logits);
    let picks: Vec<(usize, usize)> = class_of.iter().enumerate().map(|(q, &c)| (q, c)).collect();
    let logp_t = g.gather_elems(logp, &picks)?;
    let p = g.exp(logp_t);
    let rest = g.scale(p, -1.0);
    let rest = g.offset(rest, 1.0);
    let rest = g.relu(rest);
    let modulation = g.pow(rest, cfg.gamma);
    let weights: Vec<f64> = class_of.iter().map(|&c| if c == 0 { -cfg.background_alpha } else { -cfg.alpha }).collect();
    let weights = g.constant(Tensor::matrix(m, 1, weights)?);
    let focal = g.mul(modulation, logp_t)?;
    let focal = g.mul(focal, weights)?;
    let classification = g.sum(focal);
    let classification = g.scale(classification, norm);
    report.classification = g.scalar(classification);

    let mut total = classification;
    let (mut l1_node, mut giou_node_id) = (None, None);
    if !targets.is_empty() {
        let pairs = &report.matches;
        let qs: Vec<usize> = pairs.iter().map(|&(_, q)| q).collect();
        let tgt: Vec<Vec<f64>> = pairs.iter().map(|&(t, _)| targets[t].bbox.to_array().to_vec()).collect();
        let pred = g.gather_rows(boxes, &qs)?;
        let tgt = g.constant(Tensor::from_rows(&tgt)?);
        let diff = g.sub(pred, tgt)?;
        let diff = g.abs(diff);
        let l1 = g.sum(diff);
        let l1 = g.scale(l1, cfg.l1_weight * norm);
        let gi = giou_node(g, pred, tgt)?;
        let gi = g.scale(gi, -1.0);
        let gi = g.offset(gi, 1.0);
        let gi = g.sum(gi);
        let gi = g.scale(gi, cfg.giou_weight * norm);
        report.l1 = g.scalar(l1);
        report.giou = g.scalar(gi);
        total = g.add(total, l1)?;
        total = g.add(total, gi)?;
        l1_node = Some(l1);
        giou_node_id = Some(gi);
    }
    report.total = g.scalar(total);
    Ok((LossNodes { total, classification, l1: l1_node, giou: giou_node_id }, report))
}

/// Evaluates the loss of fixed predictions.
pub fn detection_loss(queries: &QuerySet, targets: &[Target], cfg: &LossConfig) -> Result<LossReport> {
    let mut g = Graph::new();
    let logits = g.constant(queries.logits.clone());
    let boxes = g.constant(queries.boxes.clone());
    Ok(detection_loss_node(&mut g, logits, boxes, queries, targets, cfg)?.1)
}

/// `image_id,class,cx,cy,w,h,confidence` rows.
pub fn detections_csv(rows: &[(usize, Detection)]) -> String {
    let mut out = String::from("image_id,class,cx,cy,w,h,confidence\n");
    for (id, d) in rows {
        let _ = writeln!(out, "{id},{},{:.6},{:.6},{:.6},{:.6},{:.6}", d.class, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h, d.confidence);
    }
    out
}

/// `image_id,query,class,confidence,e0..e{d-1}` rows for external embedding plots.
pub fn queries_csv(sets: &[(usize, &QuerySet)]) -> String {
    let dim = sets.first().map(|(_, s)| s.queries.cols()).unwrap_or(0);
    let mut out = String::from("image_id,query,class,confidence");
    for j in 0..dim {
        let _ = write!(out, ",e{j}");
    }
    out.push('\n');
    for (id, set) in sets {
        for q in 0..set.len() {
            let _ = write!(out, "{id},{q},{},{:.6}", set.classes[q], set.confidences[q]);
            for v in set.queries.row_slice(q) {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
    }
    out
}
