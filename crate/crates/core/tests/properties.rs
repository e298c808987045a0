mod common;

use proptest::prelude::*;
use slotadapt::adaptation::{adapt_step, predict_all};
use slotadapt::slots::FeatureMap;
use slotadapt::theory::{infonce_similarity_grads, kappa_report};
use slotadapt::Rng;
use slotadapt::*;

fn hsa_setup(seed: u64, n: usize, depth: usize, side: usize) -> (HsaConfig, ParamSet, FeatureMap) {
    let cfg = HsaConfig { depth, n, iters: 2, dim: 4, ..HsaConfig::default() };
    let mut params = ParamSet::new();
    Hsa::new(cfg).init(&mut params, &mut Rng::new(seed));
    let mut rng = Rng::new(seed ^ 0xfeed);
    let tokens = common::random(&mut rng, side * side, 4, -2.0, 2.0);
    (cfg, params, FeatureMap::new(tokens, (side, side)).unwrap())
}

fn small_config() -> RunConfig {
    let keys = ["image_size=32", "patch=8", "d=8", "d_q=8", "M=4", "n=2", "min_extent=6", "max_extent=12", "S=4", "burn_in=1", "batch=2"];
    RunConfig::parse("", &keys.map(String::from)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masks_compete_per_token_and_weights_normalize(seed in any::<u64>(), n in 2usize..5, depth in 1usize..3, side in 2usize..5) {
        let (cfg, params, features) = hsa_setup(seed, n, depth, side);
        let out = hsa_decompose(&features, &cfg, &mut Rng::new(seed), &params).unwrap();
        for masks in [&out.coarse_masks, &out.fine_masks] {
            for i in 0..masks.cols() {
                let s: f64 = (0..masks.rows()).map(|k| masks.get(k, i)).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
        prop_assert_eq!(out.weights.rows(), cfg.fine_slots());
        let kr = kappa_report(&out.weights).unwrap();
        let floor = 1.0 / (side * side) as f64;
        prop_assert!(kr.min >= floor - 1e-12 && kr.max <= 1.0 + 1e-12);
    }

    #[test]
    fn kappa_lies_between_uniform_and_one_hot(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..9) {
        let mut rng = Rng::new(seed);
        let raw = common::random(&mut rng, rows, cols, 0.0, 1.0);
        let data: Vec<f64> = (0..rows)
            .flat_map(|r| {
                let row = raw.row_slice(r).to_vec();
                let s: f64 = row.iter().sum::<f64>().max(1e-300);
                row.into_iter().map(move |v| v / s)
            })
            .collect();
        let kr = kappa_report(&Tensor::matrix(rows, cols, data).unwrap()).unwrap();
        prop_assert!(kr.min > 0.0);
        prop_assert!(kr.min >= 1.0 / cols as f64 - 1e-12);
        prop_assert!(kr.max <= 1.0 + 1e-12);
    }

    #[test]
    fn hungarian_beats_every_other_assignment(seed in any::<u64>(), k in 1usize..6, extra in 0usize..3) {
        let m = k + extra;
        let mut rng = Rng::new(seed);
        let score = common::random(&mut rng, k, m, -3.0, 3.0);
        let a = hungarian_assign(&score, Sense::Maximize).unwrap();
        let mut cols: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        cols.sort_unstable();
        cols.dedup();
        prop_assert_eq!(cols.len(), k);
        let recomputed: f64 = a.pairs.iter().map(|&(r, c)| score.get(r, c)).sum();
        prop_assert!((recomputed - a.total).abs() < 1e-12);
        prop_assert!(a.total >= common::brute_force_max(&score) - 1e-9);
    }

    #[test]
    fn ema_stays_between_teacher_and_student(seed in any::<u64>(), gamma in 0.0f64..0.9999) {
        let model = Model::new(small_config().model).unwrap();
        let teacher0 = model.init(&mut Rng::new(seed));
        let student = model.init(&mut Rng::new(seed.wrapping_add(1)));
        let mut teacher = teacher0.clone();
        teacher_ema_update(&mut teacher, &student, gamma).unwrap();
        for (name, t) in teacher.iter() {
            let (t0, s) = (teacher0.get(name).unwrap(), student.get(name).unwrap());
            for ((v, a), b) in t.data().iter().zip(t0.data()).zip(s.data()) {
                let slack = 1e-15 * a.abs().max(b.abs());
                prop_assert!(*v >= a.min(*b) - slack && *v <= a.max(*b) + slack);
            }
        }
    }

    #[test]
    fn thresholds_stay_in_range(kind in 0usize..4, total in 1usize..1000, frac in 0.0f64..=1.0) {
        let kind = [ScheduleKind::Fixed, ScheduleKind::Cosine, ScheduleKind::Exponential, ScheduleKind::Sigmoid][kind];
        let sched = ThresholdSchedule { kind, total, ..ThresholdSchedule::default() };
        let s = ((total as f64) * frac).round() as usize;
        let tau = threshold_at(&sched, s).unwrap();
        if kind == ScheduleKind::Fixed {
            prop_assert_eq!(tau, sched.tau_fix);
        } else {
            prop_assert!(tau >= sched.tau_min - 1e-15 && tau <= sched.tau_max + 1e-15);
        }
        if kind == ScheduleKind::Cosine && s < total {
            prop_assert!(threshold_at(&sched, s + 1).unwrap() <= tau);
        }
    }

    #[test]
    fn infonce_grads_balance(s in prop::collection::vec(-1.0f64..1.0, 2..8), tau in 0.05f64..2.0) {
        let (gp, gn) = infonce_similarity_grads(s[0], &s[1..], tau).unwrap();
        prop_assert!(gp <= 0.0 && gn.iter().all(|&g| g >= 0.0));
        prop_assert!((gp.abs() - gn.iter().sum::<f64>()).abs() < 1e-10);
    }

    #[test]
    fn giou_is_bounded_and_symmetric(a in prop::array::uniform4(0.05f64..0.95), b in prop::array::uniform4(0.05f64..0.95)) {
        let (p, q) = (BBox::new(a[0], a[1], a[2], a[3]), BBox::new(b[0], b[1], b[2], b[3]));
        let g = p.giou(&q);
        prop_assert!((-1.0..=1.0).contains(&g));
        prop_assert!((g - q.giou(&p)).abs() < 1e-12);
        prop_assert!(g <= p.iou(&q) + 1e-12);
        prop_assert!((p.giou(&p) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_text_reproduces_the_config(seed in 0u64..1000, lr in 0.001f64..0.5, n in 2usize..4, kind in 0usize..4, tau_con in 0.01f64..1.0) {
        let kind = ["fixed", "cosine", "exponential", "sigmoid"][kind];
        let overrides = [
            format!("seed={seed}"),
            format!("lr={lr}"),
            format!("n={n}"),
            format!("M={}", n * n * 2),
            format!("schedule={kind}"),
            format!("tau_con={tau_con}"),
        ];
        let cfg = RunConfig::parse("", &overrides).unwrap();
        prop_assert_eq!(RunConfig::parse(&cfg.to_text(), &[]).unwrap(), cfg);
    }
}

#[test]
fn prediction_and_adaptation_agree_across_exec_modes() {
    let cfg = small_config();
    let model = Model::new(cfg.model).unwrap();
    let params = model.init(&mut Rng::new(4));
    let scenes = generate_dataset(11, Domain::Target, 6, &cfg.synth, ExecMode::Sequential);
    assert_eq!(scenes, generate_dataset(11, Domain::Target, 6, &cfg.synth, ExecMode::Parallel));
    let images: Vec<&Image> = scenes.iter().map(|s| &s.image).collect();
    let seq = predict_all(&model, &params, &images, 3, ExecMode::Sequential).unwrap();
    let par = predict_all(&model, &params, &images, 3, ExecMode::Parallel).unwrap();
    assert_eq!(seq, par);

    let mut a = AdaptState::new(params.clone(), &model, &cfg.adapt, 2).unwrap();
    let mut b = a.clone();
    for _ in 0..3 {
        adapt_step(&model, &mut a, &images[..2], &cfg.adapt, ExecMode::Sequential).unwrap();
        adapt_step(&model, &mut b, &images[..2], &cfg.adapt, ExecMode::Parallel).unwrap();
    }
    assert_eq!(a, b);
}
