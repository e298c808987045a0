//! Executable checks of the analysis behind the method: closed-form InfoNCE
//! gradients, the contraction map on the detection-risk proxy, the cosine
//! margin and the mask contraction factors.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::cgsc::{check_row_stochastic, safe_cosine};
use crate::error::{Error, Result};
use crate::math::{finite_diff_grad, softmax};
use crate::rng::Rng;
use crate::tensor::Tensor;

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::Config { key: "tau".into(), reason: format!("must be positive, got {tau}") });
    }
    Ok(())
}

/// `-log softmax(s / tau)[pos]` with the positive first.
pub fn infonce_loss(s_pos: f64, s_neg: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let logits: Vec<f64> = std::iter::once(s_pos).chain(s_neg.iter().copied()).map(|s| s / tau).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[0])
}

/// `(-(1 - pi_pos)/tau, pi_neg/tau)`.
pub fn infonce_similarity_grads(s_pos: f64, s_neg: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    check_tau(tau)?;
    let logits: Vec<f64> = std::iter::once(s_pos).chain(s_neg.iter().copied()).map(|s| s / tau).collect();
    let pi = softmax(&logits)?;
    Ok((-(1.0 - pi[0]) / tau, pi[1..].iter().map(|p| p / tau).collect()))
}

/// Similarity-level margin: positive minus the largest negative.
pub fn similarity_margin(s_pos: f64, s_neg: &[f64]) -> f64 {
    s_pos - s_neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Gradient descent on the InfoNCE scalar treating similarities as free
/// variables. Entry 0 is the starting point.
pub fn similarity_descent(s_pos: f64, s_neg: &[f64], tau: f64, step: f64, iters: usize) -> Result<Vec<(f64, Vec<f64>)>> {
    let mut out = Vec::with_capacity(iters + 1);
    let (mut p, mut n) = (s_pos, s_neg.to_vec());
    out.push((p, n.clone()));
    for _ in 0..iters {
        let (gp, gn) = infonce_similarity_grads(p, &n, tau)?;
        p -= step * gp;
        for (v, g) in n.iter_mut().zip(gn) {
            *v -= step * g;
        }
        out.push((p, n.clone()));
    }
    Ok(out)
}

/// Below this error the ratio is dominated by rounding.
pub const RATIO_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionParams {
    pub alpha: f64,
    pub k: f64,
    pub eta_star: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport {
    pub trajectory: Vec<f64>,
    pub contractive: bool,
    /// `eta* + r/(alpha k)` when contractive and not below `eta*`.
    pub fixed_point: Option<f64>,
    /// `|eta_{t+1} - fp| / |eta_t - fp|` for steps starting above `eta*` while
    /// the error is above [`RATIO_FLOOR`].
    pub ratios: Vec<f64>,
}

impl ContractionParams {
    /// `eta - alpha * k * max(eta - eta*, 0) + r`.
    pub fn apply(&self, eta: f64) -> f64 {
        eta - self.alpha * self.k * (eta - self.eta_star).max(0.0) + self.r
    }
}

pub fn contraction_iterate(params: &ContractionParams, eta0: f64, steps: usize) -> Result<ContractionReport> {
    if !(0.0..=1.0).contains(&eta0) {
        return Err(Error::Config { key: "eta0".into(), reason: format!("must lie in [0,1], got {eta0}") });
    }
    if !(params.alpha > 0.0 && params.k > 0.0 && params.r >= 0.0) {
        return Err(Error::Config { key: "contraction".into(), reason: "alpha, k must be positive and r nonnegative".into() });
    }
    let ak = params.alpha * params.k;
    let contractive = ak < 1.0;
    let fixed_point = (params.eta_star + params.r / ak).max(params.eta_star);
    let fixed_point = contractive.then_some(fixed_point);
    let mut trajectory = Vec::with_capacity(steps + 1);
    let mut ratios = Vec::new();
    let mut eta = eta0;
    trajectory.push(eta);
    for _ in 0..steps {
        let next = params.apply(eta);
        if let Some(fp) = fixed_point {
            let before = (eta - fp).abs();
            if eta > params.eta_star && before > RATIO_FLOOR {
                ratios.push((next - fp).abs() / before);
            }
        }
        eta = next;
        trajectory.push(eta);
    }
    Ok(ContractionReport { trajectory, contractive, fixed_point, ratios })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginReport {
    pub same: f64,
    pub max_cross: f64,
    /// `same - max_cross`; `None` without a cross-class prototype.
    pub gain: Option<f64>,
    pub per_class: BTreeMap<usize, f64>,
}

/// Mean over classes of `E phi(P_c, z | c) - max_{c' != c} E phi(P_c', z | c)`.
pub fn margin_gain(prototypes: &BTreeMap<usize, Vec<f64>>, embeddings: &[(Vec<f64>, usize)]) -> Result<MarginReport> {
    let mut by_class: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (z, c) in embeddings {
        if prototypes.contains_key(c) {
            by_class.entry(*c).or_default().push(z);
        }
    }
    let expect = |p: &[f64], zs: &[&[f64]]| -> Result<f64> {
        let mut s = 0.0;
        for z in zs {
            s += safe_cosine(p, z)?;
        }
        Ok(s / zs.len() as f64)
    };
    let (mut same_sum, mut cross_sum, mut count) = (0.0, 0.0, 0usize);
    let mut same_only = 0.0;
    let mut per_class = BTreeMap::new();
    for (c, zs) in &by_class {
        let same = expect(&prototypes[c], zs)?;
        same_only += same;
        let mut cross = f64::NEG_INFINITY;
        for (c2, p) in prototypes {
            if c2 != c {
                cross = cross.max(expect(p, zs)?);
            }
        }
        if cross.is_finite() {
            per_class.insert(*c, same - cross);
            same_sum += same;
            cross_sum += cross;
            count += 1;
        }
    }
    if count == 0 {
        let n = by_class.len().max(1) as f64;
        return Ok(MarginReport { same: same_only / n, max_cross: f64::NAN, gain: None, per_class });
    }
    let (same, max_cross) = (same_sum / count as f64, cross_sum / count as f64);
    Ok(MarginReport { same, max_cross, gain: Some(same - max_cross), per_class })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KappaReport {
    pub kappas: Vec<f64>,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Squared l2 norm of every row of a row-stochastic weight matrix.
pub fn kappa_report(weights: &Tensor) -> Result<KappaReport> {
    check_row_stochastic(weights)?;
    if weights.rows() == 0 {
        return Err(Error::Empty("kappa_report"));
    }
    let kappas: Vec<f64> = (0..weights.rows()).map(|r| weights.row_slice(r).iter().map(|v| v * v).sum()).collect();
    let min = kappas.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = kappas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = kappas.iter().sum::<f64>() / kappas.len() as f64;
    Ok(KappaReport { kappas, min, max, mean })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryReport {
    pub checks: Vec<TheoryCheck>,
    /// `step,eta,error` rows of the reference contraction run.
    pub trajectory_csv: String,
    /// `seed,g_pos_residual,g_neg_residual` rows.
    pub residual_csv: String,
}

impl TheoryReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(out, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        out
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Runs every property of this module on seeded random instances.
pub fn run_theory_suite(seed: u64, cases: usize) -> Result<TheoryReport> {
    let mut checks = Vec::new();
    let mut rng = Rng::new(seed);
    let mut residual_csv = String::from("seed,g_pos_residual,g_neg_residual\n");
    let (mut worst, mut signs, mut conserve) = (0.0f64, true, 0.0f64);
    for case in 0..cases {
        let negs = rng.int_range(1, 5);
        let s: Vec<f64> = (0..=negs).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let tau = rng.uniform_range(0.2, 1.0);
        let (gp, gn) = infonce_similarity_grads(s[0], &s[1..], tau)?;
        let fd = finite_diff_grad(|x| infonce_loss(x[0], &x[1..], tau).unwrap_or(f64::NAN), &s, 1e-5)?;
        let rp = rel_err(gp, fd[0]);
        let rn = gn.iter().zip(&fd[1..]).map(|(a, b)| rel_err(*a, *b)).fold(0.0, f64::max);
        worst = worst.max(rp).max(rn);
        signs &= gp < 0.0 && gn.iter().all(|&g| g > 0.0);
        conserve = conserve.max((gp.abs() - gn.iter().sum::<f64>()).abs());
        let _ = writeln!(residual_csv, "{case},{rp:.3e},{rn:.3e}");
    }
    checks.push(TheoryCheck { name: "infonce_grads_match_fd", passed: worst < 1e-5, detail: format!("max rel err {worst:.2e}") });
    checks.push(TheoryCheck { name: "infonce_grad_signs", passed: signs, detail: format!("{cases} cases") });
    checks.push(TheoryCheck {
        name: "infonce_grad_conservation",
        passed: conserve < 1e-10,
        detail: format!("max | |g_pos| - sum g_neg | = {conserve:.2e}"),
    });

    let traj = similarity_descent(0.1, &[0.2, -0.1, 0.15], 0.1, 0.01, 50)?;
    let monotone = traj.windows(2).all(|w| {
        w[1].0 > w[0].0
            && w[1].1.iter().zip(&w[0].1).all(|(a, b)| a < b)
            && similarity_margin(w[1].0, &w[1].1) > similarity_margin(w[0].0, &w[0].1)
    });
    checks.push(TheoryCheck { name: "margin_monotone", passed: monotone, detail: "50 descent steps".into() });

    let params = ContractionParams { alpha: 0.5, k: 1.0, eta_star: 0.1, r: 0.02 };
    let rep = contraction_iterate(&params, 0.8, 60)?;
    let fp = rep.fixed_point.unwrap_or(f64::NAN);
    let last = *rep.trajectory.last().unwrap_or(&f64::NAN);
    let ratio_err = rep.ratios.iter().map(|r| (r - 0.5).abs()).fold(0.0, f64::max);
    checks.push(TheoryCheck {
        name: "contraction_fixed_point",
        passed: (fp - 0.14).abs() < 1e-12 && (last - fp).abs() < 1e-9,
        detail: format!("fixed point {fp}, eta_60 {last}"),
    });
    checks.push(TheoryCheck {
        name: "contraction_ratio",
        passed: !rep.ratios.is_empty() && ratio_err < 1e-9,
        detail: format!("max |ratio - 0.5| {ratio_err:.2e} over {} steps", rep.ratios.len()),
    });
    let mut trajectory_csv = String::from("step,eta,error\n");
    for (t, eta) in rep.trajectory.iter().enumerate() {
        let _ = writeln!(trajectory_csv, "{t},{eta:.17e},{:.17e}", (eta - fp).abs());
    }

    let one_hot = Tensor::from_rows(&[vec![0.0, 1.0, 0.0, 0.0]])?;
    let uniform = Tensor::filled(&[1, 8], 0.125);
    let k1 = kappa_report(&one_hot)?.max;
    let ku = kappa_report(&uniform)?.max;
    checks.push(TheoryCheck {
        name: "kappa_bounds",
        passed: k1 == 1.0 && (ku - 0.125).abs() < 1e-15,
        detail: format!("one-hot {k1}, uniform over 8 {ku}"),
    });

    let protos = BTreeMap::from([(1, vec![1.0, 0.0]), (2, vec![0.0, 1.0])]);
    let emb = vec![(vec![1.0, 0.0], 1), (vec![0.0, 1.0], 2)];
    let gain = margin_gain(&protos, &emb)?.gain;
    checks.push(TheoryCheck {
        name: "margin_orthogonal",
        passed: gain.map(|g| (g - 1.0).abs() < 1e-12).unwrap_or(false),
        detail: format!("gain {gain:?}"),
    });

    Ok(TheoryReport { checks, trajectory_csv, residual_csv })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_pair_grads() {
        let (gp, gn) = infonce_similarity_grads(0.3, &[0.3], 1.0).unwrap();
        assert!((gp + 0.5).abs() < 1e-15);
        assert!((gn[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn saturated_positive() {
        let (gp, _) = infonce_similarity_grads(1e3, &[0.0], 1.0).unwrap();
        assert!(gp.abs() < 1e-300);
    }

    #[test]
    fn contraction_reference() {
        let p = ContractionParams { alpha: 0.5, k: 1.0, eta_star: 0.1, r: 0.02 };
        let rep = contraction_iterate(&p, 0.8, 60).unwrap();
        assert!((rep.fixed_point.unwrap() - 0.14).abs() < 1e-15);
        assert!((rep.trajectory[60] - 0.14).abs() < 1e-9);
        let flat = contraction_iterate(&ContractionParams { r: 0.0, ..p }, 0.1, 5).unwrap();
        assert!(flat.trajectory.iter().all(|&e| e == 0.1));
        let wide = contraction_iterate(&ContractionParams { alpha: 2.0, ..p }, 0.5, 3).unwrap();
        assert!(!wide.contractive && wide.fixed_point.is_none());
    }

    #[test]
    fn identical_prototypes_have_zero_margin() {
        let protos = BTreeMap::from([(1, vec![1.0, 2.0]), (2, vec![1.0, 2.0])]);
        let emb = vec![(vec![0.3, -1.0], 1), (vec![2.0, 0.5], 2)];
        assert_eq!(margin_gain(&protos, &emb).unwrap().gain, Some(0.0));
    }

    #[test]
    fn single_class_has_no_cross_term() {
        let protos = BTreeMap::from([(1, vec![1.0, 0.0])]);
        let r = margin_gain(&protos, &[(vec![1.0, 1.0], 1)]).unwrap();
        assert!(r.gain.is_none());
    }

    #[test]
    fn kappa_rejects_unnormalized() {
        assert!(kappa_report(&Tensor::filled(&[1, 3], 0.5)).is_err());
    }

    #[test]
    fn suite_passes() {
        let rep = run_theory_suite(7, 100).unwrap();
        assert!(rep.all_passed(), "{}", rep.summary());
    }
}
