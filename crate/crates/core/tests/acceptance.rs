//! Prints one PASS/FAIL line per acceptance criterion.
//!
//! Runs without the libtest harness so the lines reach the console under a
//! plain `cargo test`. Pass criterion numbers as arguments to run a subset,
//! e.g. `cargo test --test acceptance -- 2 7`. Criteria 10 and 11 train real
//! models (about half an hour on one core); their outcome is reported but
//! does not fail the run, every other criterion does.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use slotadapt::adaptation::{adapt_step, threshold_at, ScheduleKind, ThresholdSchedule};
use slotadapt::cgsc::{slot_contrast_node, ContrastMode};
use slotadapt::experiment::{self, AdaptStart, Grid, Split, METHOD_NAMES};
use slotadapt::math::median;
use slotadapt::theory::{
    contraction_iterate, infonce_loss, infonce_similarity_grads, kappa_report, similarity_descent, similarity_margin, ContractionParams,
};
use slotadapt::*;

struct Outcome {
    passed: bool,
    detail: String,
    /// Failure of a training trend: reported, not fatal.
    soft: bool,
}

type Criterion = (&'static str, fn() -> Outcome);

fn hard(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail, soft: false }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn small(overrides: &[&str]) -> RunConfig {
    let base = [
        "image_size=32",
        "patch=8",
        "d=8",
        "d_q=8",
        "M=4",
        "n=2",
        "train_size=16",
        "eval_size=8",
        "min_extent=6",
        "max_extent=12",
        "pretrain_steps=4",
        "pretrain_batch=2",
        "batch=2",
        "S=8",
        "burn_in=2",
        "checkpoint_every=3",
    ];
    let all: Vec<String> = base.iter().chain(overrides).map(|s| s.to_string()).collect();
    RunConfig::parse("", &all).expect("small config is valid")
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let cases = common::op_cases();
    for case in &cases {
        let w = common::check_case(case, 100);
        if w > worst.0 {
            worst = (w, case.name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    hard(
        worst.0 <= 1.0 && secs < 120.0,
        format!("{} ops x 100 seeds, worst normalized error {:.3} ({}), {secs:.1}s", cases.len(), worst.0, worst.1),
    )
}

fn hungarian() -> Outcome {
    let mut rng = Rng::new(2024);
    let (mut count, mut worst) = (0usize, 0.0f64);
    for k in 1..=6 {
        for m in k..=6 {
            for _ in 0..50 {
                let score = common::random(&mut rng, k, m, -5.0, 5.0);
                let best = common::brute_force_max(&score);
                let got = hungarian_assign(&score, Sense::Maximize).unwrap();
                let neg = score.map(|v| -v);
                let low = hungarian_assign(&neg, Sense::Minimize).unwrap();
                let mut cols: Vec<usize> = got.pairs.iter().map(|p| p.1).collect();
                cols.sort_unstable();
                cols.dedup();
                let err = if cols.len() == k { (got.total - best).abs().max((low.total + best).abs()) } else { f64::INFINITY };
                worst = worst.max(err);
                count += 1;
            }
        }
    }
    let rejects = hungarian_assign(&Tensor::zeros(&[3, 2]), Sense::Maximize).is_err();
    hard(
        worst < 1e-9 && count >= 1000 && rejects,
        format!("{count} matrices, max |total - exhaustive| {worst:.2e}, K > M rejected: {rejects}"),
    )
}

fn mask_laws() -> Outcome {
    let mut cfg = RunConfig::parse("", &["S=200".into(), "train_size=32".into(), "batch=2".into()]).unwrap();
    cfg.seed = 3;
    let model = Model::new(cfg.model).unwrap();
    let images: Vec<Image> = experiment::load_split(&cfg, Split::TargetTrain, None).unwrap().into_iter().map(|s| s.image).collect();
    let params = model.init(&mut Rng::new(cfg.seed));
    let (mut col_err, mut kmin, mut kmax, mut steps) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY, 0usize);
    experiment::adapt_in_memory(&cfg, AdaptStart::Pretrained(params), &images, |s| {
        let (_, out) = model.predict(&s.student, &images[s.step % images.len()], &mut Rng::new(s.step as u64)).unwrap();
        let out = out.expect("slots are on");
        for masks in [&out.coarse_masks, &out.fine_masks] {
            for i in 0..masks.cols() {
                let sum: f64 = (0..masks.rows()).map(|k| masks.get(k, i)).sum();
                col_err = col_err.max((sum - 1.0).abs());
            }
        }
        let kr = kappa_report(&out.weights).unwrap();
        kmin = kmin.min(kr.min);
        kmax = kmax.max(kr.max);
        steps += 1;
        Ok(())
    })
    .unwrap();
    let one_hot = kappa_report(&Tensor::from_rows(&[vec![0.0, 0.0, 1.0, 0.0, 0.0]]).unwrap()).unwrap().max;
    let n = 49;
    let uniform = kappa_report(&Tensor::filled(&[1, n], 1.0 / n as f64)).unwrap().max;
    let exact = one_hot == 1.0 && (uniform - 1.0 / n as f64).abs() < 1e-15;
    hard(
        steps == 200 && col_err <= 1e-6 && kmin > 0.0 && kmax <= 1.0 && exact,
        format!(
            "{steps} steps, max |column sum - 1| {col_err:.2e}, kappa in [{kmin:.4}, {kmax:.4}], one-hot {one_hot}, uniform {uniform:.6}"
        ),
    )
}

fn infonce_grads() -> Outcome {
    let (mut worst, mut signs, mut conserve) = (0.0f64, true, 0.0f64);
    // Five-point stencil: a plain central difference at a step small enough
    // for 1e-5 loses near-zero entries to cancellation.
    let h = 1e-3;
    for seed in 0..200 {
        let mut rng = Rng::new(seed);
        let negs = rng.int_range(1, 6);
        let s: Vec<f64> = (0..=negs).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let tau = rng.uniform_range(0.1, 1.0);
        let (gp, gn) = infonce_similarity_grads(s[0], &s[1..], tau).unwrap();
        let analytic: Vec<f64> = std::iter::once(gp).chain(gn.iter().copied()).collect();
        for (i, a) in analytic.iter().enumerate() {
            let at = |d: f64| {
                let mut x = s.clone();
                x[i] += d;
                infonce_loss(x[0], &x[1..], tau).unwrap()
            };
            let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()));
        }
        signs &= gp < 0.0 && gn.iter().all(|&g| g > 0.0);
        conserve = conserve.max((gp.abs() - gn.iter().sum::<f64>()).abs());
    }
    hard(
        worst < 1e-5 && signs && conserve < 1e-10,
        format!("200 seeds, max rel err {worst:.2e}, signs ok {signs}, max | |g_pos| - sum g_neg | {conserve:.2e}"),
    )
}

fn margin_monotone() -> Outcome {
    let mut ok = true;
    let mut starts = vec![(0.1, vec![0.2, -0.1, 0.15], 0.1)];
    let mut rng = Rng::new(5);
    for _ in 0..20 {
        let negs = rng.int_range(1, 5);
        starts.push((rng.uniform_range(-1.0, 1.0), (0..negs).map(|_| rng.uniform_range(-1.0, 1.0)).collect(), rng.uniform_range(0.1, 1.0)));
    }
    for (p, n, tau) in &starts {
        let traj = similarity_descent(*p, n, *tau, 0.01, 50).unwrap();
        ok &= traj.len() == 51
            && traj.windows(2).all(|w| {
                w[1].0 > w[0].0
                    && w[1].1.iter().zip(&w[0].1).all(|(a, b)| a < b)
                    && similarity_margin(w[1].0, &w[1].1) > similarity_margin(w[0].0, &w[0].1)
            });
    }
    hard(ok, format!("{} starts x 50 steps strictly monotone: {ok}", starts.len()))
}

fn contraction() -> Outcome {
    let p = ContractionParams { alpha: 0.5, k: 1.0, eta_star: 0.1, r: 0.02 };
    let rep = contraction_iterate(&p, 0.8, 60).unwrap();
    let fp = rep.fixed_point.unwrap_or(f64::NAN);
    let err60 = (rep.trajectory[60] - 0.14).abs();
    let ratio = rep.ratios.iter().map(|r| (r - 0.5).abs()).fold(0.0, f64::max);
    hard(
        (fp - 0.14).abs() < 1e-12 && err60 < 1e-9 && !rep.ratios.is_empty() && ratio < 1e-9,
        format!("fixed point {fp:.12}, |eta_60 - 0.14| {err60:.2e}, max |ratio - 0.5| {ratio:.2e} over {} steps", rep.ratios.len()),
    )
}

fn schedules() -> Outcome {
    let base = ThresholdSchedule { total: 500, ..ThresholdSchedule::default() };
    let (lo, hi, s) = (base.tau_min, base.tau_max, base.total);
    let at = |kind, step| threshold_at(&ThresholdSchedule { kind, ..base }, step).unwrap();
    let (b, k) = (base.beta_exp, base.k_sig);
    let expected = [
        (ScheduleKind::Cosine, 0, 0.55),
        (ScheduleKind::Cosine, s / 2, 0.475),
        (ScheduleKind::Cosine, s, 0.40),
        (ScheduleKind::Exponential, 0, hi),
        (ScheduleKind::Exponential, s / 2, lo + (hi - lo) * (-b * (s / 2) as f64).exp()),
        (ScheduleKind::Exponential, s, lo + (hi - lo) * (-b * s as f64).exp()),
        (ScheduleKind::Sigmoid, 0, lo + (hi - lo) / (1.0 + (k / 2.0).exp())),
        (ScheduleKind::Sigmoid, s / 2, (lo + hi) / 2.0),
        (ScheduleKind::Sigmoid, s, lo + (hi - lo) / (1.0 + (-k / 2.0).exp())),
        (ScheduleKind::Fixed, 0, base.tau_fix),
        (ScheduleKind::Fixed, s, base.tau_fix),
    ];
    let worst = expected.iter().map(|&(kind, step, want)| (at(kind, step) - want).abs()).fold(0.0, f64::max);
    let beyond = threshold_at(&base, s + 1).is_err();
    hard(worst <= 1e-12 && beyond, format!("{} points, max error {worst:.2e}, step past the end rejected: {beyond}", expected.len()))
}

fn single_class() -> Outcome {
    let (mut loss_err, mut grad_err, mut mode_ok) = (0.0f64, 0.0f64, true);
    for seed in 0..100 {
        let mut rng = Rng::new(seed);
        let d = rng.int_range(2, 8);
        let p: Vec<f64> = (0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let z: Vec<f64> = (0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let mut memory = PrototypeMemory::new(1, d, 0.9, rng.uniform_range(0.05, 1.0)).unwrap();
        memory.update(&Tensor::row(p.clone()), &[1]).unwrap();
        let mut g = Graph::new();
        let zn = g.leaf(Tensor::row(z.clone()));
        let (loss, mode, _) = slot_contrast_node(&mut g, &memory, &[(1, zn)]).unwrap().unwrap();
        mode_ok &= mode == ContrastMode::SingleClass;
        let phi = cosine(&p, &z);
        loss_err = loss_err.max((g.scalar(loss) + phi).abs());
        let grads = g.backward(loss).unwrap();
        let gz = grads.get(zn).unwrap();
        // d/dz of -cos(P, z) = -(P / (|P||z|) - cos z / |z|^2)
        let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nz2 = z.iter().map(|v| v * v).sum::<f64>();
        for i in 0..d {
            let want = -(p[i] / (np * nz2.sqrt()) - phi * z[i] / nz2);
            grad_err = grad_err.max((gz.data()[i] - want).abs() / want.abs().max(1e-12));
        }
    }
    hard(
        loss_err < 1e-14 && grad_err < 1e-9 && mode_ok,
        format!("100 seeds, max |loss + cos| {loss_err:.2e}, max gradient rel err {grad_err:.2e}"),
    )
}

fn ema_identities() -> Outcome {
    let roundoff = |a: f64, b: f64| 4.0 * f64::EPSILON * a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
    let cfg = small(&[]);
    let model = Model::new(cfg.model).unwrap();
    let images: Vec<Image> = experiment::load_split(&cfg, Split::TargetTrain, None).unwrap().into_iter().map(|s| s.image).collect();
    let mut state = AdaptState::new(model.init(&mut Rng::new(1)), &model, &cfg.adapt, cfg.seed).unwrap();
    let gamma = cfg.adapt.gamma;
    let mut teacher_ok = true;
    for step in 0..cfg.adapt.steps {
        let before = state.teacher.clone();
        let batch: Vec<&Image> = vec![&images[step % images.len()], &images[(step + 1) % images.len()]];
        adapt_step(&model, &mut state, &batch, &cfg.adapt, cfg.mode).unwrap();
        for (name, t) in state.teacher.iter() {
            let (old, s) = (before.get(name).unwrap(), state.student.get(name).unwrap());
            for ((tv, ov), sv) in t.data().iter().zip(old.data()).zip(s.data()) {
                let want = gamma * ov + (1.0 - gamma) * sv;
                teacher_ok &= (tv - want).abs() <= roundoff(*tv, want);
            }
        }
    }

    let mut rng = Rng::new(9);
    let beta = 0.9;
    let mut memory = PrototypeMemory::new(3, 4, beta, 0.1).unwrap();
    let mut proto_ok = true;
    for _ in 0..200 {
        let rows = rng.int_range(1, 6);
        let q = common::random(&mut rng, rows, 4, -2.0, 2.0);
        let classes: Vec<usize> = (0..rows).map(|_| rng.int_range(0, 3)).collect();
        let before = memory.clone();
        memory.update(&q, &classes).unwrap();
        for c in 1..=3 {
            let members: Vec<usize> = (0..rows).filter(|&i| classes[i] == c).collect();
            let after = memory.prototype(c);
            match (before.prototype(c), members.is_empty()) {
                (prev, true) => proto_ok &= after == prev,
                (prev, false) => {
                    let mean: Vec<f64> = (0..4).map(|j| members.iter().map(|&i| q.get(i, j)).sum::<f64>() / members.len() as f64).collect();
                    let after = after.unwrap();
                    for j in 0..4 {
                        let want = prev.map(|p| beta * p[j] + (1.0 - beta) * mean[j]).unwrap_or(mean[j]);
                        proto_ok &= (after[j] - want).abs() <= roundoff(after[j], want);
                    }
                }
            }
        }
    }
    hard(
        teacher_ok && proto_ok,
        format!("teacher over {} adaptation steps: {teacher_ok}, prototypes over 200 updates: {proto_ok}", cfg.adapt.steps),
    )
}

/// Least-squares slope of `y` on `x`.
fn slope_of(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn training_dynamics() -> Outcome {
    let cfg = RunConfig::default();
    let model = Model::new(cfg.model).unwrap();
    let source = experiment::load_split(&cfg, Split::SourceTrain, None).unwrap();
    let mut params = model.init(&mut Rng::new(cfg.seed));
    pretrain(&model, &mut params, &source, cfg.seed, &cfg.pretrain, cfg.mode).unwrap();
    let images: Vec<Image> = experiment::load_split(&cfg, Split::TargetTrain, None).unwrap().into_iter().map(|s| s.image).collect();
    let start = Instant::now();
    let state = experiment::adapt_in_memory(&cfg, AdaptStart::Pretrained(params), &images, |_| Ok(())).unwrap();
    let took = start.elapsed();
    let rec: Vec<f64> = state.trace.iter().map(|t| t.l_rec).collect();
    let (first, last) = (rec[0], rec[rec.len() - 1]);
    let delta: Vec<(f64, f64)> = state.trace.iter().filter_map(|t| t.delta.map(|d| (t.step as f64, d))).collect();
    let slope = slope_of(&delta);
    let rec_ok = last < 0.5 * first;
    let slope_ok = slope > 0.0;
    let time_ok = took < Duration::from_secs(600);
    let hard_part = slope_ok && time_ok;
    Outcome {
        passed: rec_ok && hard_part,
        detail: format!(
            "{} steps in {:.0}s; (a) reconstruction {first:.3} -> {last:.3} (needs < {:.3}): {}; (b) margin slope {slope:.3e} over {} steps: {}",
            state.trace.len(),
            took.as_secs_f64(),
            0.5 * first,
            if rec_ok { "ok" } else { "missed" },
            delta.len(),
            if slope_ok { "ok" } else { "missed" },
        ),
        soft: true,
    }
}

fn ablation() -> Outcome {
    let cfg = RunConfig::default();
    let mut by_method: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for &seed in &cfg.seeds {
        for row in experiment::ablate_seed(&cfg, Grid::Methods, seed).unwrap() {
            let name = METHOD_NAMES.iter().find(|n| **n == row.setting).unwrap();
            by_method.entry(name).or_default().push(row.target.f1);
        }
        eprintln!("  ablation seed {seed} done");
    }
    let med: Vec<f64> = METHOD_NAMES.iter().map(|n| median(&by_method[n])).collect();
    let ordered = med[0] <= med[1] && med[1] <= med[2];
    let gain = med[2] - med[0];
    Outcome {
        passed: ordered && gain >= 0.02,
        detail: format!(
            "median target F1 over {} seeds: source-only {:.4}, +slots {:.4}, +slots+contrast {:.4}; ordered {ordered}, gain {gain:.4}",
            cfg.seeds.len(),
            med[0],
            med[1],
            med[2]
        ),
        soft: true,
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(&[]);
    cfg.out_dir = dir.path().join("run");
    let bytes = |p: &Path| std::fs::read(p).unwrap();
    let pre = cfg.out_dir.join("pretrain").join("checkpoint.txt");
    let fin = cfg.out_dir.join("adapt").join("checkpoint.txt");

    let run = |cfg: &RunConfig| {
        let params = experiment::run_pretrain(cfg, None).unwrap().params;
        experiment::run_adapt(cfg, AdaptStart::Pretrained(params), None).unwrap();
    };
    run(&cfg);
    let (pre_a, fin_a) = (bytes(&pre), bytes(&fin));
    let k = cfg.checkpoint_every;
    let mid = dir.path().join("mid.txt");
    std::fs::copy(cfg.out_dir.join("adapt").join(experiment::step_checkpoint_name(k)), &mid).unwrap();
    std::fs::remove_dir_all(&cfg.out_dir).unwrap();
    run(&cfg);
    let identical = pre_a == bytes(&pre) && fin_a == bytes(&fin);

    std::fs::remove_dir_all(cfg.out_dir.join("adapt")).unwrap();
    let ckpt = Checkpoint::load(&mid).unwrap();
    let resumed_at = ckpt.adapt_state().unwrap().step;
    experiment::run_adapt(&ckpt.config, AdaptStart::Resume(ckpt.adapt_state().unwrap()), None).unwrap();
    let resumed = fin_a == bytes(&fin);
    hard(
        identical && resumed && resumed_at == k,
        format!("repeat run byte-identical: {identical}; resume from step {resumed_at} of {} byte-identical: {resumed}", cfg.adapt.steps),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("gradient engine", gradients),
        ("hungarian matches exhaustive search", hungarian),
        ("mask laws", mask_laws),
        ("infonce closed-form gradients", infonce_grads),
        ("margin monotonicity", margin_monotone),
        ("contraction", contraction),
        ("threshold schedules", schedules),
        ("single-class reduction", single_class),
        ("ema identities", ema_identities),
        ("training dynamics", training_dynamics),
        ("ablation ordering", ablation),
        ("determinism and resume", determinism),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut fatal = false;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        let verdict = if out.passed { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {verdict}  {name}: {} [{:.1}s]", out.detail, start.elapsed().as_secs_f64());
        fatal |= !out.passed && !out.soft;
    }
    if fatal {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
