//! End-to-end runs behind the command-line verbs.
//!
//! Every artifact lands under `RunConfig::out_dir`. Datasets are regenerated
//! from the configuration unless a directory written by `gen-data` is given.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::adaptation::{adapt, adapt_trace_csv, evaluate_model, pretrain, pretrain_trace_csv, AdaptState, ScheduleKind};
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::RunConfig;
use crate::detector::{detections_csv, queries_csv, Detection, QuerySet};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::median;
use crate::model::Model;
use crate::nn::ParamSet;
use crate::par::try_map_range;
use crate::rng::Rng;
use crate::synth::{eval_csv, export_dataset, generate_dataset, hsv_to_rgb, import_dataset, Domain, EvalResult, Scene};
use crate::tensor::Tensor;
use crate::theory::{run_theory_suite, TheoryReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    SourceTrain,
    TargetTrain,
    TargetEval,
    SourceEval,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::SourceTrain, Split::TargetTrain, Split::TargetEval, Split::SourceEval];

    pub fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source-train",
            Split::TargetTrain => "target-train",
            Split::TargetEval => "target-eval",
            Split::SourceEval => "source-eval",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config { key: "split".into(), reason: format!("unknown split {s:?}") })
    }

    /// Generator seed, domain and size.
    pub fn generator(self, cfg: &RunConfig) -> (u64, Domain, usize) {
        match self {
            Split::SourceTrain => (cfg.seed, Domain::Source, cfg.train_size),
            Split::TargetTrain => (cfg.seed + 1000, Domain::Target, cfg.train_size),
            Split::TargetEval => (cfg.seed + 2000, Domain::Target, cfg.eval_size),
            Split::SourceEval => (cfg.seed + 3000, Domain::Source, cfg.eval_size),
        }
    }

    /// The split a checkpoint of this kind was trained on.
    pub fn train_of(kind: CheckpointKind) -> Self {
        match kind {
            CheckpointKind::Pretrain => Split::SourceTrain,
            CheckpointKind::Adapt => Split::TargetTrain,
        }
    }
}

/// Scenes for `split`, read from `data/<split>` when `data` is given.
pub fn load_split(cfg: &RunConfig, split: Split, data: Option<&Path>) -> Result<Vec<Scene>> {
    match data {
        Some(dir) => {
            let dir = dir.join(split.name());
            if !dir.is_dir() {
                return Err(Error::Missing { what: "dataset", path: dir });
            }
            import_dataset(&dir)
        }
        None => {
            let (seed, domain, count) = split.generator(cfg);
            Ok(generate_dataset(seed, domain, count, &cfg.synth, cfg.mode))
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

pub fn gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let root = cfg.out_dir.join("data");
    for split in Split::ALL {
        export_dataset(&root.join(split.name()), &load_split(cfg, split, None)?)?;
    }
    Ok(root)
}

pub fn evaluate_split(model: &Model, params: &ParamSet, cfg: &RunConfig, scenes: &[Scene]) -> Result<EvalResult> {
    evaluate_model(model, params, scenes, cfg.seed, cfg.confidence, cfg.mode)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ParamSet,
    pub train: EvalResult,
    pub target: EvalResult,
}

/// Supervised training on the source split. Writes `pretrain/checkpoint.txt`,
/// `pretrain/trace.csv` and `pretrain/eval.csv`.
pub fn run_pretrain(cfg: &RunConfig, data: Option<&Path>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let model = Model::new(cfg.model)?;
    let source = load_split(cfg, Split::SourceTrain, data)?;
    let target = load_split(cfg, Split::TargetEval, data)?;
    let mut params = model.init(&mut Rng::new(cfg.seed));
    let trace = pretrain(&model, &mut params, &source, cfg.seed, &cfg.pretrain, cfg.mode)?;
    let train = evaluate_split(&model, &params, cfg, &source)?;
    let target_result = evaluate_split(&model, &params, cfg, &target)?;

    let dir = cfg.out_dir.join("pretrain");
    Checkpoint::pretrained(cfg, params.clone(), cfg.pretrain.steps).save(&dir.join("checkpoint.txt"))?;
    write(&dir.join("trace.csv"), pretrain_trace_csv(&trace))?;
    write(
        &dir.join("eval.csv"),
        eval_csv(&[(Split::SourceTrain.name().into(), train.clone()), (Split::TargetEval.name().into(), target_result.clone())]),
    )?;
    Ok(PretrainOutcome { params, train, target: target_result })
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub state: AdaptState,
    pub train: EvalResult,
    pub target: EvalResult,
}

/// Where adaptation starts: pretrained parameters or a saved adaptation state.
#[derive(Debug, Clone)]
pub enum AdaptStart {
    Pretrained(ParamSet),
    Resume(AdaptState),
}

/// Adaptation on the unlabeled target split without writing anything.
pub fn adapt_in_memory(
    cfg: &RunConfig,
    start: AdaptStart,
    images: &[Image],
    mut on_step: impl FnMut(&AdaptState) -> Result<()>,
) -> Result<AdaptState> {
    let model = Model::new(cfg.model)?;
    let mut state = match start {
        AdaptStart::Pretrained(params) => AdaptState::new(params, &model, &cfg.adapt, cfg.seed)?,
        AdaptStart::Resume(state) => state,
    };
    adapt(&model, &mut state, images, &cfg.adapt, cfg.mode, |s| on_step(s))?;
    Ok(state)
}

pub fn step_checkpoint_name(step: usize) -> String {
    format!("step_{step:06}.txt")
}

/// Writes `adapt/checkpoint.txt`, periodic `adapt/step_NNNNNN.txt`,
/// `adapt/trace.csv` and `adapt/eval.csv`.
pub fn run_adapt(cfg: &RunConfig, start: AdaptStart, data: Option<&Path>) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let model = Model::new(cfg.model)?;
    let train_scenes = load_split(cfg, Split::TargetTrain, data)?;
    let eval_scenes = load_split(cfg, Split::TargetEval, data)?;
    let images: Vec<Image> = train_scenes.iter().map(|s| s.image.clone()).collect();
    let dir = cfg.out_dir.join("adapt");
    let every = cfg.checkpoint_every;
    let state = adapt_in_memory(cfg, start, &images, |s| {
        if every > 0 && s.step % every == 0 && s.step < cfg.adapt.steps {
            Checkpoint::from_adapt(cfg, s).save(&dir.join(step_checkpoint_name(s.step)))?;
        }
        Ok(())
    })?;
    let train = evaluate_split(&model, &state.student, cfg, &train_scenes)?;
    let target = evaluate_split(&model, &state.student, cfg, &eval_scenes)?;

    Checkpoint::from_adapt(cfg, &state).save(&dir.join("checkpoint.txt"))?;
    write(&dir.join("trace.csv"), adapt_trace_csv(&state.trace))?;
    write(
        &dir.join("eval.csv"),
        eval_csv(&[(Split::TargetTrain.name().into(), train.clone()), (Split::TargetEval.name().into(), target.clone())]),
    )?;
    Ok(AdaptOutcome { state, train, target })
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub split: Split,
    pub result: EvalResult,
    pub path: PathBuf,
}

/// Scores a checkpoint's primary parameters on `split` (its own training
/// split when `None`). Writes `eval/<split>.csv`, detections and query
/// embeddings.
pub fn run_eval(checkpoint: &Checkpoint, split: Option<Split>, out_dir: &Path, data: Option<&Path>) -> Result<EvalOutcome> {
    let cfg = &checkpoint.config;
    let split = split.unwrap_or_else(|| Split::train_of(checkpoint.kind));
    let model = Model::new(cfg.model)?;
    let params = checkpoint.primary_params()?;
    let scenes = load_split(cfg, split, data)?;
    let result = evaluate_split(&model, params, cfg, &scenes)?;

    let sets = try_map_range(scenes.len(), cfg.mode, |i| -> Result<QuerySet> {
        let (qs, _) = model.predict(params, &scenes[i].image, &mut Rng::substream(cfg.seed, i as u64).fork(0xe7a1))?;
        Ok(qs)
    })?;
    let dets: Vec<(usize, Detection)> =
        sets.iter().enumerate().flat_map(|(i, qs)| qs.detections().into_iter().map(move |d| (i, d))).collect();
    let refs: Vec<(usize, &QuerySet)> = sets.iter().enumerate().collect();

    let dir = out_dir.join("eval");
    let path = dir.join(format!("{}.csv", split.name()));
    write(&path, eval_csv(&[(split.name().into(), result.clone())]))?;
    write(&dir.join(format!("{}_detections.csv", split.name())), detections_csv(&dets))?;
    write(&dir.join(format!("{}_queries.csv", split.name())), queries_csv(&refs))?;
    Ok(EvalOutcome { split, result, path })
}

/// Writes `theory/report.txt`, `theory/contraction.csv` and
/// `theory/residuals.csv`.
pub fn run_theory(cfg: &RunConfig, cases: usize) -> Result<TheoryReport> {
    let report = run_theory_suite(cfg.seed, cases)?;
    let dir = cfg.out_dir.join("theory");
    write(&dir.join("report.txt"), report.summary())?;
    write(&dir.join("contraction.csv"), &report.trajectory_csv)?;
    write(&dir.join("residuals.csv"), &report.residual_csv)?;
    Ok(report)
}

/// Blends the image with one color per slot, chosen by argmax over the
/// slots of each token. `masks` is `K x N` over a row-major token grid.
pub fn mask_overlay(image: &Image, masks: &Tensor, grid: (usize, usize)) -> Result<Image> {
    let (gh, gw) = grid;
    if masks.cols() != gh * gw || gh == 0 || gw == 0 {
        return Err(Error::Shape { op: "mask_overlay", detail: format!("{:?} masks for a {gh}x{gw} grid", masks.shape()) });
    }
    let k = masks.rows();
    let palette: Vec<[f64; 3]> = (0..k).map(|i| hsv_to_rgb(i as f64 / k as f64, 0.85, 0.95)).collect();
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let token = (y * gh / image.height) * gw + x * gw / image.width;
            let mut best = 0;
            for s in 1..k {
                if masks.get(s, token) > masks.get(best, token) {
                    best = s;
                }
            }
            let p = image.pixel(y, x);
            let c = palette[best];
            out.set_pixel(y, x, [0.5 * p[0] + 0.5 * c[0], 0.5 * p[1] + 0.5 * c[1], 0.5 * p[2] + 0.5 * c[2]]);
        }
    }
    Ok(out)
}

/// Writes `masks/scene_NNNNN_{image,coarse,fine}.ppm` for the first `count`
/// scenes of `split`.
pub fn run_viz_masks(checkpoint: &Checkpoint, split: Split, count: usize, out_dir: &Path, data: Option<&Path>) -> Result<Vec<PathBuf>> {
    let cfg = &checkpoint.config;
    if !cfg.model.use_hsa {
        return Err(Error::Config { key: "use_hsa".into(), reason: "mask export needs slots".into() });
    }
    let model = Model::new(cfg.model)?;
    let params = checkpoint.primary_params()?;
    let scenes = load_split(cfg, split, data)?;
    let dir = out_dir.join("masks");
    let mut written = Vec::new();
    for (i, scene) in scenes.iter().take(count).enumerate() {
        let (_, hsa) = model.predict(params, &scene.image, &mut Rng::substream(cfg.seed, i as u64).fork(0xe7a1))?;
        let hsa = hsa.ok_or_else(|| Error::Config { key: "use_hsa".into(), reason: "no slot output".into() })?;
        let p = cfg.model.detector.patch;
        let grid = (scene.image.height / p, scene.image.width / p);
        for (tag, img) in [
            ("image", scene.image.clone()),
            ("coarse", mask_overlay(&scene.image, &hsa.coarse_masks, grid)?),
            ("fine", mask_overlay(&scene.image, &hsa.fine_masks, grid)?),
        ] {
            let path = dir.join(format!("scene_{i:05}_{tag}.ppm"));
            write(&path, img.to_ppm())?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    /// Source only, slots without contrast, full method.
    Methods,
    /// Slots per level at fixed depth.
    Slots,
    /// Pseudo-label threshold schedules.
    Schedules,
}

impl Grid {
    pub const ALL: [Grid; 3] = [Grid::Methods, Grid::Slots, Grid::Schedules];

    pub fn name(self) -> &'static str {
        match self {
            Grid::Methods => "methods",
            Grid::Slots => "slots",
            Grid::Schedules => "schedules",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Grid::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config { key: "grid".into(), reason: format!("unknown grid {s:?}") })
    }
}

pub const METHOD_NAMES: [&str; 3] = ["source_only", "hsa", "hsa_cgsc"];
pub const SLOT_GRID: [usize; 6] = [2, 4, 5, 6, 8, 10];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub grid: Grid,
    pub setting: String,
    pub seed: u64,
    pub target: EvalResult,
}

pub const ABLATION_HEADER: &str = "grid,setting,seed,target_f1,target_map,precision,recall";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let t = &r.target;
        let _ = writeln!(out, "{},{},{},{:.6},{:.6},{:.6},{:.6}", r.grid.name(), r.setting, r.seed, t.f1, t.map, t.precision, t.recall);
    }
    out
}

fn pretrained(cfg: &RunConfig, source: &[Scene]) -> Result<(Model, ParamSet)> {
    let model = Model::new(cfg.model)?;
    let mut params = model.init(&mut Rng::new(cfg.seed));
    pretrain(&model, &mut params, source, cfg.seed, &cfg.pretrain, cfg.mode)?;
    Ok((model, params))
}

fn adapted_f1(cfg: &RunConfig, model: &Model, params: ParamSet, train: &[Image], eval: &[Scene]) -> Result<EvalResult> {
    let state = adapt_in_memory(cfg, AdaptStart::Pretrained(params), train, |_| Ok(()))?;
    evaluate_split(model, &state.student, cfg, eval)
}

/// Smallest multiple of `fine` that is at least `queries`.
pub fn queries_for(queries: usize, fine: usize) -> usize {
    queries.div_ceil(fine) * fine
}

/// Rows of one grid for one seed. The method grid shares a single pretrained
/// model across its three settings.
pub fn ablate_seed(base: &RunConfig, grid: Grid, seed: u64) -> Result<Vec<AblationRow>> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    let source = load_split(&cfg, Split::SourceTrain, None)?;
    let train: Vec<Image> = load_split(&cfg, Split::TargetTrain, None)?.into_iter().map(|s| s.image).collect();
    let eval = load_split(&cfg, Split::TargetEval, None)?;
    let row = |setting: String, target| AblationRow { grid, setting, seed, target };
    let mut rows = Vec::new();
    match grid {
        Grid::Methods => {
            let (model, params) = pretrained(&cfg, &source)?;
            rows.push(row(METHOD_NAMES[0].into(), evaluate_split(&model, &params, &cfg, &eval)?));
            for (name, lambda_con) in [(METHOD_NAMES[1], 0.0), (METHOD_NAMES[2], base.adapt.lambda_con)] {
                let mut c = cfg.clone();
                c.adapt.lambda_con = lambda_con;
                rows.push(row(name.into(), adapted_f1(&c, &model, params.clone(), &train, &eval)?));
            }
        }
        Grid::Slots => {
            for n in SLOT_GRID {
                let mut c = cfg.clone();
                c.model.hsa.n = n;
                c.model.detector.queries = queries_for(base.model.detector.queries, c.model.hsa.fine_slots());
                c.model.validate()?;
                let (model, params) = pretrained(&c, &source)?;
                rows.push(row(format!("depth{}_n{n}", c.model.hsa.depth), adapted_f1(&c, &model, params, &train, &eval)?));
            }
        }
        Grid::Schedules => {
            let (model, params) = pretrained(&cfg, &source)?;
            for kind in [ScheduleKind::Fixed, ScheduleKind::Cosine, ScheduleKind::Exponential, ScheduleKind::Sigmoid] {
                let mut c = cfg.clone();
                c.adapt.schedule.kind = kind;
                rows.push(row(kind.name().into(), adapted_f1(&c, &model, params.clone(), &train, &eval)?));
            }
        }
    }
    Ok(rows)
}

/// Runs `grids` over `cfg.seeds`, writing `ablate/summary.csv` after each
/// seed so partial results survive interruption.
pub fn run_ablate(cfg: &RunConfig, grids: &[Grid]) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let path = cfg.out_dir.join("ablate").join("summary.csv");
    let mut rows = Vec::new();
    for &grid in grids {
        for &seed in &cfg.seeds {
            rows.extend(ablate_seed(cfg, grid, seed)?);
            write(&path, ablation_csv(&rows))?;
        }
    }
    write(&path, ablation_csv(&rows))?;
    Ok(rows)
}

/// Median F1 per setting of `grid`, in first-seen order.
pub fn median_f1(rows: &[AblationRow], grid: Grid) -> Vec<(String, f64)> {
    let mut names: Vec<String> = Vec::new();
    for r in rows.iter().filter(|r| r.grid == grid) {
        if !names.contains(&r.setting) {
            names.push(r.setting.clone());
        }
    }
    names
        .into_iter()
        .map(|name| {
            let v: Vec<f64> = rows.iter().filter(|r| r.grid == grid && r.setting == name).map(|r| r.target.f1).collect();
            let med = median(&v);
            (name, med)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_names_round_trip() {
        for s in Split::ALL {
            assert_eq!(Split::parse(s.name()).unwrap(), s);
        }
        assert!(Split::parse("val").is_err());
    }

    #[test]
    fn query_counts_cover_fine_slots() {
        assert_eq!(queries_for(25, 25), 25);
        assert_eq!(queries_for(25, 4), 28);
        assert_eq!(queries_for(25, 100), 100);
    }

    #[test]
    fn overlay_colors_follow_argmax() {
        let img = Image::filled(4, 4, [0.0, 0.0, 0.0]);
        let masks = Tensor::matrix(2, 4, vec![0.9, 0.1, 0.9, 0.1, 0.1, 0.9, 0.1, 0.9]).unwrap();
        let out = mask_overlay(&img, &masks, (2, 2)).unwrap();
        assert_eq!(out.pixel(0, 0), out.pixel(3, 0));
        assert_ne!(out.pixel(0, 0), out.pixel(0, 3));
        assert!(mask_overlay(&img, &masks, (3, 3)).is_err());
    }

    #[test]
    fn median_handles_even_counts() {
        let r = |setting: &str, seed, f1| AblationRow {
            grid: Grid::Methods,
            setting: setting.into(),
            seed,
            target: EvalResult { f1, ..EvalResult::default() },
        };
        let rows = vec![r("a", 1, 0.1), r("b", 1, 0.5), r("a", 2, 0.3), r("b", 2, 0.2)];
        let m = median_f1(&rows, Grid::Methods);
        assert_eq!(m[0].0, "a");
        assert!((m[0].1 - 0.2).abs() < 1e-12);
        assert!((m[1].1 - 0.35).abs() < 1e-12);
    }
}
