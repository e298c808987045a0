//! Source pretraining and mean-teacher target adaptation.

use std::fmt::Write as _;

use crate::cgsc::{assign_slot_labels, class_groups, slot_contrast_node, ContrastMode, PrototypeMemory, WeightedSlotSet};
use crate::detector::{detection_loss_node, Detection, LossConfig, Target};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::Image;
use crate::model::Model;
use crate::nn::{clip_grad_norm, sgd_update, ParamSet};
use crate::par::{try_map_range, ExecMode};
use crate::rng::Rng;
use crate::synth::{evaluate, EvalResult, Scene};
use crate::theory::margin_gain;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Fixed,
    Cosine,
    Exponential,
    Sigmoid,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Fixed => "fixed",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Exponential => "exponential",
            ScheduleKind::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "fixed" => ScheduleKind::Fixed,
            "cosine" => ScheduleKind::Cosine,
            "exponential" => ScheduleKind::Exponential,
            "sigmoid" => ScheduleKind::Sigmoid,
            _ => return Err(Error::Config { key: "schedule".into(), reason: format!("unknown kind {s:?}") }),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdSchedule {
    pub kind: ScheduleKind,
    pub tau_min: f64,
    pub tau_max: f64,
    pub total: usize,
    pub beta_exp: f64,
    pub k_sig: f64,
    pub tau_fix: f64,
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        Self { kind: ScheduleKind::Cosine, tau_min: 0.40, tau_max: 0.55, total: 500, beta_exp: 0.01, k_sig: 10.0, tau_fix: 0.5 }
    }
}

impl ThresholdSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.tau_min && self.tau_min <= self.tau_max && self.tau_max < 1.0;
        if !ok {
            return Err(Error::Config {
                key: "tau_min".into(),
                reason: format!("need 0 < tau_min <= tau_max < 1, got {}..{}", self.tau_min, self.tau_max),
            });
        }
        if self.total == 0 {
            return Err(Error::Config { key: "steps".into(), reason: "must be positive".into() });
        }
        if !(self.beta_exp >= 0.0 && self.k_sig >= 0.0 && (0.0..=1.0).contains(&self.tau_fix)) {
            return Err(Error::Config { key: "schedule".into(), reason: "bad decay, steepness or fixed value".into() });
        }
        Ok(())
    }
}

pub fn threshold_at(schedule: &ThresholdSchedule, s: usize) -> Result<f64> {
    if s > schedule.total {
        return Err(Error::StepOutOfRange { step: s, total: schedule.total });
    }
    let (lo, hi) = (schedule.tau_min, schedule.tau_max);
    let frac = s as f64 / schedule.total as f64;
    Ok(match schedule.kind {
        ScheduleKind::Fixed => schedule.tau_fix,
        ScheduleKind::Cosine => lo + (hi - lo) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0,
        ScheduleKind::Exponential => lo + (hi - lo) * (-schedule.beta_exp * s as f64).exp(),
        ScheduleKind::Sigmoid => lo + (hi - lo) / (1.0 + (-schedule.k_sig * (frac - 0.5)).exp()),
    })
}

/// Keeps detections with confidence at least `tau`.
pub fn filter_pseudo_labels(detections: &[Detection], tau: f64) -> Vec<Target> {
    detections.iter().filter(|d| d.confidence >= tau).map(|d| Target { bbox: d.bbox, class: d.class }).collect()
}

/// `teacher <- gamma * teacher + (1 - gamma) * student`.
pub fn teacher_ema_update(teacher: &mut ParamSet, student: &ParamSet, gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config { key: "gamma".into(), reason: format!("must lie in [0,1), got {gamma}") });
    }
    teacher.check_same_layout(student)?;
    for (name, s) in student.iter() {
        let t = teacher.get_mut(name)?;
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = gamma * *tv + (1.0 - gamma) * sv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda_rec: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub loss: LossConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch: 8, lr: 0.03, lambda_rec: 1.0, clip_norm: 5.0, loss: LossConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PretrainTrace {
    pub step: usize,
    pub detection: f64,
    pub reconstruction: f64,
    pub total: f64,
}

fn check_batch(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    Ok(())
}

/// Batch indices for step `step`, drawn with replacement.
pub fn batch_indices(seed: u64, step: usize, batch: usize, len: usize) -> Vec<usize> {
    let mut rng = Rng::substream(seed, step as u64).fork(0xba7c);
    (0..batch).map(|_| rng.int_range(0, len - 1)).collect()
}

fn mean_grads(params: &ParamSet, grads: Vec<ParamSet>) -> Result<ParamSet> {
    let n = grads.len() as f64;
    let mut acc = params.zeros_like();
    for g in &grads {
        acc.add_scaled(g, 1.0 / n)?;
    }
    Ok(acc)
}

/// One supervised step: detection loss plus `lambda_rec` times reconstruction.
pub fn pretrain_step(
    model: &Model,
    params: &mut ParamSet,
    batch: &[&Scene],
    rng: &Rng,
    cfg: &PretrainConfig,
    mode: ExecMode,
) -> Result<PretrainTrace> {
    check_batch(batch.len())?;
    let results = try_map_range(batch.len(), mode, |i| -> Result<(ParamSet, f64, f64)> {
        let scene = batch[i];
        let mut g = Graph::new();
        let mut r = rng.fork(i as u64);
        let nodes = model.forward(&mut g, params, &scene.image, &mut r)?;
        let qs = model.detector.query_set(&g, &nodes.det)?;
        let (loss, _) = detection_loss_node(&mut g, nodes.det.logits, nodes.det.boxes, &qs, &scene.objects, &cfg.loss)?;
        let mut total = loss.total;
        let mut rec = 0.0;
        if let Some(rn) = model.rec_loss_node(&mut g, &nodes) {
            rec = g.scalar(rn);
            if cfg.lambda_rec != 0.0 {
                let scaled = g.scale(rn, cfg.lambda_rec);
                total = g.add(total, scaled)?;
            }
        }
        let grads = g.backward(total)?.named(&g);
        Ok((grads, g.scalar(loss.total), rec))
    })?;
    let n = results.len() as f64;
    let detection = results.iter().map(|r| r.1).sum::<f64>() / n;
    let reconstruction = results.iter().map(|r| r.2).sum::<f64>() / n;
    let mut grads = mean_grads(params, results.into_iter().map(|r| r.0).collect())?;
    clip_grad_norm(&mut grads, cfg.clip_norm);
    sgd_update(params, &grads, cfg.lr)?;
    Ok(PretrainTrace { step: 0, detection, reconstruction, total: detection + cfg.lambda_rec * reconstruction })
}

/// Runs `cfg.steps` pretraining steps on `scenes`.
pub fn pretrain(
    model: &Model,
    params: &mut ParamSet,
    scenes: &[Scene],
    seed: u64,
    cfg: &PretrainConfig,
    mode: ExecMode,
) -> Result<Vec<PretrainTrace>> {
    check_batch(scenes.len())?;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&Scene> = batch_indices(seed, step, cfg.batch, scenes.len()).into_iter().map(|i| &scenes[i]).collect();
        let rng = Rng::substream(seed, step as u64).fork(1);
        let mut row = pretrain_step(model, params, &batch, &rng, cfg, mode)?;
        row.step = step;
        trace.push(row);
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Teacher EMA decay.
    pub gamma: f64,
    pub lambda_con: f64,
    pub lambda_rec: f64,
    pub burn_in: usize,
    pub schedule: ThresholdSchedule,
    pub tau_con: f64,
    /// Prototype EMA coefficient.
    pub beta: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub loss: LossConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 8,
            lr: 0.03,
            gamma: 0.9993,
            lambda_con: 0.05,
            lambda_rec: 1.0,
            burn_in: 20,
            schedule: ThresholdSchedule::default(),
            tau_con: 0.1,
            beta: 0.9,
            clip_norm: 5.0,
            loss: LossConfig::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config { key: "gamma".into(), reason: format!("must lie in [0,1), got {}", self.gamma) });
        }
        if !(self.lr > 0.0) || self.batch == 0 {
            return Err(Error::Config { key: "lr".into(), reason: "lr and batch must be positive".into() });
        }
        if self.lambda_con < 0.0 || self.lambda_rec < 0.0 {
            return Err(Error::Config { key: "lambda_con".into(), reason: "loss weights must be nonnegative".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptState {
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub memory: PrototypeMemory,
    pub step: usize,
    pub seed: u64,
    pub trace: Vec<AdaptTrace>,
}

impl AdaptState {
    /// Both roles start from the same pretrained parameters.
    pub fn new(pretrained: ParamSet, model: &Model, cfg: &AdaptConfig, seed: u64) -> Result<Self> {
        let memory = PrototypeMemory::new(model.config.detector.classes, model.config.detector.query_dim, cfg.beta, cfg.tau_con)?;
        Ok(Self { teacher: pretrained.clone(), student: pretrained, memory, step: 0, seed, trace: Vec::new() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptTrace {
    pub step: usize,
    pub tau: f64,
    pub pseudo_labels: usize,
    /// Images whose pseudo-label set was empty.
    pub background_only: usize,
    pub l_unsup: f64,
    pub l_rec: f64,
    pub l_con: f64,
    /// Images where the contrast loss was active.
    pub con_images: usize,
    /// Images that ran the single-class form.
    pub single_class: usize,
    pub delta: Option<f64>,
    pub burn_in: bool,
    /// Norm of each class prototype after this step, `None` while unset.
    pub prototype_norms: Vec<Option<f64>>,
}

struct ImageOutcome {
    grads: ParamSet,
    pseudo: usize,
    l_unsup: Option<f64>,
    l_rec: f64,
    con: Option<(f64, ContrastMode)>,
    queries: crate::tensor::Tensor,
    classes: Vec<usize>,
    embeddings: Vec<(Vec<f64>, usize)>,
}

/// Teacher pseudo labels, student forward, one SGD step, prototype and
/// teacher updates. Image forwards run in parallel; all state changes happen
/// after the batch.
pub fn adapt_step(model: &Model, state: &mut AdaptState, batch: &[&Image], cfg: &AdaptConfig, mode: ExecMode) -> Result<AdaptTrace> {
    check_batch(batch.len())?;
    let s = state.step;
    let burn = s < cfg.burn_in;
    let tau = threshold_at(&cfg.schedule, s.min(cfg.schedule.total))?;
    let snapshot = state.memory.clone();
    let step_rng = Rng::substream(state.seed, s as u64).fork(1);
    let (student, teacher) = (&state.student, &state.teacher);

    let outcomes = try_map_range(batch.len(), mode, |i| -> Result<ImageOutcome> {
        let image = batch[i];
        let rng = step_rng.fork(i as u64);
        let targets = if burn {
            Vec::new()
        } else {
            let (qs, _) = model.predict(teacher, image, &mut rng.fork(1))?;
            filter_pseudo_labels(&qs.detections(), tau)
        };
        let mut g = Graph::new();
        let nodes = model.forward(&mut g, student, image, &mut rng.fork(0))?;
        let qs = model.detector.query_set(&g, &nodes.det)?;
        let mut total = g.constant(crate::tensor::Tensor::scalar(0.0));
        let mut l_rec = 0.0;
        if let Some(rn) = model.rec_loss_node(&mut g, &nodes) {
            l_rec = g.scalar(rn);
            let scaled = g.scale(rn, cfg.lambda_rec);
            total = g.add(total, scaled)?;
        }
        let mut l_unsup = None;
        if !burn && !targets.is_empty() {
            let (loss, _) = detection_loss_node(&mut g, nodes.det.logits, nodes.det.boxes, &qs, &targets, &cfg.loss)?;
            l_unsup = Some(g.scalar(loss.total));
            total = g.add(total, loss.total)?;
        }
        let mut con = None;
        let mut embeddings = Vec::new();
        if !burn {
            if let Some(z) = model.weighted_slots_node(&mut g, &nodes)? {
                let labeled = assign_slot_labels(&WeightedSlotSet::unlabeled(g.value(z).clone()), &qs.queries, &qs.classes)?;
                let mut protos = Vec::new();
                for (c, ks) in class_groups(&labeled.labels) {
                    for &k in &ks {
                        embeddings.push((labeled.slots.row_slice(k).to_vec(), c));
                    }
                    let rows = g.gather_rows(z, &ks)?;
                    protos.push((c, g.mean_rows(rows)?));
                }
                if cfg.lambda_con > 0.0 {
                    if let Some((loss, cmode, _)) = slot_contrast_node(&mut g, &snapshot, &protos)? {
                        con = Some((g.scalar(loss), cmode));
                        let scaled = g.scale(loss, cfg.lambda_con);
                        total = g.add(total, scaled)?;
                    }
                }
            }
        }
        let grads = g.backward(total)?.named(&g);
        Ok(ImageOutcome { grads, pseudo: targets.len(), l_unsup, l_rec, con, queries: qs.queries, classes: qs.classes, embeddings })
    })?;

    let n = outcomes.len() as f64;
    let mean_of = |v: Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let l_unsup = mean_of(outcomes.iter().filter_map(|o| o.l_unsup).collect());
    let l_con = mean_of(outcomes.iter().filter_map(|o| o.con.map(|c| c.0)).collect());
    let l_rec = outcomes.iter().map(|o| o.l_rec).sum::<f64>() / n;
    let pseudo_labels = outcomes.iter().map(|o| o.pseudo).sum();
    let background_only = if burn { 0 } else { outcomes.iter().filter(|o| o.pseudo == 0).count() };
    let con_images = outcomes.iter().filter(|o| o.con.is_some()).count();
    let single_class = outcomes.iter().filter(|o| matches!(o.con, Some((_, ContrastMode::SingleClass)))).count();

    let protos: std::collections::BTreeMap<usize, Vec<f64>> =
        (1..=snapshot.classes()).filter_map(|c| snapshot.prototype(c).map(|p| (c, p.to_vec()))).collect();
    let embeddings: Vec<(Vec<f64>, usize)> = outcomes.iter().flat_map(|o| o.embeddings.iter().cloned()).collect();
    let delta = if embeddings.is_empty() { None } else { margin_gain(&protos, &embeddings)?.gain };

    let mut all_queries = Vec::new();
    let mut all_classes = Vec::new();
    for o in &outcomes {
        for r in 0..o.queries.rows() {
            all_queries.push(o.queries.row_slice(r).to_vec());
        }
        all_classes.extend_from_slice(&o.classes);
    }
    let mut grads = mean_grads(&state.student, outcomes.into_iter().map(|o| o.grads).collect())?;
    clip_grad_norm(&mut grads, cfg.clip_norm);
    sgd_update(&mut state.student, &grads, cfg.lr)?;
    state.memory.update(&crate::tensor::Tensor::from_rows(&all_queries)?, &all_classes)?;
    teacher_ema_update(&mut state.teacher, &state.student, cfg.gamma)?;

    let row = AdaptTrace {
        step: s,
        tau,
        pseudo_labels,
        background_only,
        l_unsup,
        l_rec,
        l_con,
        con_images,
        single_class,
        delta,
        burn_in: burn,
        prototype_norms: prototype_norms(&state.memory).into_iter().map(|(_, n)| n).collect(),
    };
    state.trace.push(row.clone());
    state.step += 1;
    Ok(row)
}

/// Runs adaptation until `state.step == cfg.steps`, calling `on_step` after
/// every step (used for periodic checkpoints).
pub fn adapt(
    model: &Model,
    state: &mut AdaptState,
    images: &[Image],
    cfg: &AdaptConfig,
    mode: ExecMode,
    mut on_step: impl FnMut(&AdaptState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    check_batch(images.len())?;
    while state.step < cfg.steps {
        let batch: Vec<&Image> = batch_indices(state.seed, state.step, cfg.batch, images.len()).into_iter().map(|i| &images[i]).collect();
        adapt_step(model, state, &batch, cfg, mode)?;
        on_step(state)?;
    }
    Ok(())
}

/// Detections for every scene; scene `i` samples slots from stream `i`.
pub fn predict_all(model: &Model, params: &ParamSet, images: &[&Image], seed: u64, mode: ExecMode) -> Result<Vec<Vec<Detection>>> {
    try_map_range(images.len(), mode, |i| {
        let (qs, _) = model.predict(params, images[i], &mut Rng::substream(seed, i as u64).fork(0xe7a1))?;
        Ok(qs.detections())
    })
}

pub fn evaluate_model(
    model: &Model,
    params: &ParamSet,
    scenes: &[Scene],
    seed: u64,
    confidence: f64,
    mode: ExecMode,
) -> Result<EvalResult> {
    let images: Vec<&Image> = scenes.iter().map(|s| &s.image).collect();
    let dets = predict_all(model, params, &images, seed, mode)?;
    let gts: Vec<Vec<Target>> = scenes.iter().map(|s| s.objects.clone()).collect();
    evaluate(&dets, &gts, model.config.detector.classes, confidence)
}

pub fn pretrain_trace_csv(rows: &[PretrainTrace]) -> String {
    let mut out = String::from("step,l_det,l_rec,total\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.9e},{:.9e},{:.9e}", r.step, r.detection, r.reconstruction, r.total);
    }
    out
}

pub fn adapt_trace_csv(rows: &[AdaptTrace]) -> String {
    let mut out = String::from("step,tau,pseudo_labels,background_only,l_unsup,l_rec,l_con,con_images,single_class,delta,burn_in");
    for c in 1..=rows.first().map_or(0, |r| r.prototype_norms.len()) {
        let _ = write!(out, ",proto_norm_{c}");
    }
    out.push('\n');
    for r in rows {
        let delta = r.delta.map(|d| format!("{d:.9e}")).unwrap_or_default();
        let _ = write!(
            out,
            "{},{:.9},{},{},{:.9e},{:.9e},{:.9e},{},{},{},{}",
            r.step,
            r.tau,
            r.pseudo_labels,
            r.background_only,
            r.l_unsup,
            r.l_rec,
            r.l_con,
            r.con_images,
            r.single_class,
            delta,
            r.burn_in as u8
        );
        for n in &r.prototype_norms {
            out.push(',');
            if let Some(n) = n {
                let _ = write!(out, "{n:.9e}");
            }
        }
        out.push('\n');
    }
    out
}

/// Norm of each class prototype, `None` while uninitialized.
pub fn prototype_norms(memory: &PrototypeMemory) -> Vec<(usize, Option<f64>)> {
    (1..=memory.classes()).map(|c| (c, memory.prototype(c).map(crate::math::norm))).collect()
}
