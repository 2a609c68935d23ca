//! Partition function estimators.
//!
//! All of them target `Z(q) = Σᵢ exp(uᵢ)` with `uᵢ = vᵢ·q` and produce an
//! [`Estimate`] whose primary representation is `log Ẑ`; every sum of
//! exponentials is max-shifted so scores up to `u = 700` stay finite.
//!
//! * [`exact_z`] — the `O(N·d)` ground truth.
//! * [`estimate_nmimps`] — head-only sum over the retrieved top-k; a
//!   deterministic underestimate.
//! * [`estimate_mimps`] — head sum plus `(N-k)/l` times the tail-sample
//!   sum; unbiased given an exact head. With `k = 0` this degenerates to
//!   the plain uniform importance sampler ([`estimate_uniform`]).
//! * [`estimate_mince`] — treats `Z` as the single parameter of a
//!   noise-contrastive objective whose data samples are the head and whose
//!   noise is the uniform tail; maximized by a bracketed Halley iteration.
//! * [`predict_prob`] — converts a score to a probability using any of the
//!   above as the normalizer.

use std::collections::HashSet;

use crate::dataset::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::numeric::{dot, log_add_exp, log_sum_exp};
use crate::oracle::{TailSample, TopKResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Exact,
    Uniform,
    Nmimps,
    Mimps,
    Mince,
    Fmbe,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Uniform => "uniform",
            Method::Nmimps => "nmimps",
            Method::Mimps => "mimps",
            Method::Mince => "mince",
            Method::Fmbe => "fmbe",
        }
    }
}

/// Head/tail sizes plus solver knobs for one estimate.
#[derive(Clone, Copy, Debug)]
pub struct EstimatorConfig {
    pub k: usize,
    pub l: usize,
    pub seed: u64,
    /// Tolerance of the MINCE root: the solver stops once the bracket on
    /// log Z is narrower than this (equivalently, relative tolerance on Z).
    pub mince_tol: f64,
    pub mince_max_iter: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            k: 100,
            l: 100,
            seed: 0,
            mince_tol: 1e-10,
            mince_max_iter: 100,
        }
    }
}

/// Solver/clamp bookkeeping attached to an estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Diagnostics {
    pub iterations: usize,
    /// Root finder hit its iteration budget before the bracket collapsed.
    pub not_converged: bool,
    /// The raw estimate was non-positive and was clamped to the floor.
    pub clamped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    log_z_hat: f64,
    method: Method,
    diagnostics: Diagnostics,
}

impl Estimate {
    pub(crate) fn new(log_z_hat: f64, method: Method, diagnostics: Diagnostics) -> Estimate {
        debug_assert!(log_z_hat.is_finite());
        Estimate {
            log_z_hat,
            method,
            diagnostics,
        }
    }

    /// `log Ẑ`; always finite.
    pub fn log_z_hat(&self) -> f64 {
        self.log_z_hat
    }

    /// `Ẑ = exp(log Ẑ)`; may round to `inf`/`0` outside f64 range, the log
    /// form is the primary representation.
    pub fn z_hat(&self) -> f64 {
        self.log_z_hat.exp()
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn diagnostics(&self) -> Diagnostics {
        self.diagnostics
    }
}

/// Exact partition function by max-shifted log-sum-exp over all N scores.
pub fn exact_z(v: &EmbeddingMatrix, q: &[f64]) -> Result<Estimate> {
    if q.len() != v.dim() {
        return Err(Error::DimMismatch {
            expected: v.dim(),
            got: q.len(),
        });
    }
    let scores: Vec<f64> = (0..v.n_vectors()).map(|i| dot(v.row(i), q)).collect();
    Ok(Estimate::new(
        log_sum_exp(&scores),
        Method::Exact,
        Diagnostics::default(),
    ))
}

/// Head-only estimator: `Ẑ = Σ_{s ∈ head} exp(s)`. Never exceeds the true
/// `Z`, and reaches it exactly at `k = N`.
pub fn estimate_nmimps(head: &TopKResult) -> Result<Estimate> {
    if head.is_empty() {
        return Err(Error::invalid("head", "NMIMPS needs a non-empty head"));
    }
    Ok(Estimate::new(
        log_sum_exp(head.scores()),
        Method::Nmimps,
        Diagnostics::default(),
    ))
}

/// Head sum plus importance-weighted tail:
/// `Ẑ = Σ_head exp(u) + (N-k)/l · Σ_tail exp(u)`.
///
/// `k = 0` (empty head) gives the uniform estimator; `l = 0` is only legal
/// when the head already covers all N vectors.
pub fn estimate_mimps(head: &TopKResult, tail: &TailSample, n_total: usize) -> Result<Estimate> {
    mimps_impl(head, tail, n_total, Method::Mimps)
}

/// Uniform importance sampling over all N vectors (MIMPS with `k = 0`).
pub fn estimate_uniform(tail: &TailSample, n_total: usize) -> Result<Estimate> {
    mimps_impl(&TopKResult::empty(), tail, n_total, Method::Uniform)
}

fn mimps_impl(
    head: &TopKResult,
    tail: &TailSample,
    n_total: usize,
    method: Method,
) -> Result<Estimate> {
    let k = head.k();
    let l = tail.len();
    if k + l == 0 {
        return Err(Error::invalid("head/tail", "k + l must be >= 1"));
    }
    if k > n_total || l > n_total - k {
        return Err(Error::invalid(
            "head/tail",
            format!("k={k}, l={l} inconsistent with N={n_total}"),
        ));
    }
    let head_set: HashSet<usize> = head.indices().iter().copied().collect();
    if let Some(&overlap) = tail.indices().iter().find(|i| head_set.contains(i)) {
        return Err(Error::HeadTailOverlap { index: overlap });
    }
    if l == 0 {
        if k < n_total {
            return Err(Error::invalid(
                "l",
                format!("l = 0 requires k = N, got k={k}, N={n_total}"),
            ));
        }
        return Ok(Estimate::new(
            log_sum_exp(head.scores()),
            method,
            Diagnostics::default(),
        ));
    }
    let tail_scores = tail.scores().ok_or(Error::MissingTailScores)?;
    let log_weight = ((n_total - k) as f64).ln() - (l as f64).ln();
    let log_tail = log_weight + log_sum_exp(tail_scores);
    let log_head = log_sum_exp(head.scores());
    Ok(Estimate::new(
        log_add_exp(log_head, log_tail),
        method,
        Diagnostics::default(),
    ))
}

/// MIPS-based noise contrastive estimation.
///
/// With `aᵢ = exp(uᵢ)·k(N-k)/l` over the k head scores and
/// `bⱼ = exp(uⱼ)·k(N-k)/l` over the l tail scores, the NCE objective
/// simplifies to `-J(Z) = Σᵢ log(Z/aᵢ + 1) + Σⱼ log(bⱼ/Z + 1)`, and its
/// maximizer is the unique root of
///
/// `g(Z) = Σᵢ Z/(Z+aᵢ) - Σⱼ bⱼ/(Z+bⱼ)`,
///
/// which climbs strictly from `-l` to `k`. The solver works on
/// `t = log Z`, where every term becomes a logistic
/// (`Z/(Z+a) = σ(t - log a)`, `b/(Z+b) = σ(log b - t)`): same root, same
/// monotonicity, and no overflow for any score f64 can hold. Iteration is
/// Halley's method (the derivatives come cheap in this form) inside a
/// guaranteed bracket with bisection fallback.
pub fn estimate_mince(
    head: &TopKResult,
    tail: &TailSample,
    n_total: usize,
    config: &EstimatorConfig,
) -> Result<Estimate> {
    let k = head.k();
    let l = tail.len();
    if k == 0 || l == 0 {
        return Err(Error::invalid("head/tail", "MINCE needs k >= 1 and l >= 1"));
    }
    if k >= n_total {
        return Err(Error::invalid(
            "k",
            format!("MINCE needs k < N for a noise distribution, got k={k}, N={n_total}"),
        ));
    }
    let head_set: HashSet<usize> = head.indices().iter().copied().collect();
    if let Some(&overlap) = tail.indices().iter().find(|i| head_set.contains(i)) {
        return Err(Error::HeadTailOverlap { index: overlap });
    }
    let tail_scores = tail.scores().ok_or(Error::MissingTailScores)?;

    // log of the shared scale k(N-k)/l applied to both sample kinds
    let log_scale = (k as f64).ln() + ((n_total - k) as f64).ln() - (l as f64).ln();
    let log_a: Vec<f64> = head.scores().iter().map(|u| u + log_scale).collect();
    let log_b: Vec<f64> = tail_scores.iter().map(|u| u + log_scale).collect();

    let t0 = log_sum_exp(head.scores());
    let sol = solve_nce_root(&log_a, &log_b, t0, config.mince_tol, config.mince_max_iter);
    Ok(Estimate::new(
        sol.t,
        Method::Mince,
        Diagnostics {
            iterations: sol.iterations,
            not_converged: !sol.converged,
            clamped: false,
        },
    ))
}

pub(crate) struct NceRoot {
    pub t: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// g and its first two derivatives with respect to t = log Z.
fn nce_g(log_a: &[f64], log_b: &[f64], t: f64) -> (f64, f64, f64) {
    let mut g = 0.0;
    let mut g1 = 0.0;
    let mut g2 = 0.0;
    for &la in log_a {
        let s = sigmoid(t - la);
        let sp = s * (1.0 - s);
        g += s;
        g1 += sp;
        g2 += sp * (1.0 - 2.0 * s);
    }
    for &lb in log_b {
        let s = sigmoid(lb - t);
        let sp = s * (1.0 - s);
        g -= s;
        g1 += sp;
        g2 -= sp * (1.0 - 2.0 * s);
    }
    (g, g1, g2)
}

pub(crate) fn solve_nce_root(
    log_a: &[f64],
    log_b: &[f64],
    t0: f64,
    tol: f64,
    max_iter: usize,
) -> NceRoot {
    let eval = |t: f64| nce_g(log_a, log_b, t);

    // expand a bracket [lo, hi] with g(lo) < 0 < g(hi) around t0
    let (g0, _, _) = eval(t0);
    if g0 == 0.0 {
        return NceRoot {
            t: t0,
            iterations: 0,
            converged: true,
        };
    }
    let mut lo;
    let mut hi;
    let mut step = 1.0;
    if g0 > 0.0 {
        hi = t0;
        lo = t0 - step;
        while eval(lo).0 > 0.0 && step < 1e12 {
            step *= 2.0;
            lo -= step;
        }
    } else {
        lo = t0;
        hi = t0 + step;
        while eval(hi).0 < 0.0 && step < 1e12 {
            step *= 2.0;
            hi += step;
        }
    }

    let mut t = 0.5 * (lo + hi);
    for iter in 1..=max_iter {
        let (g, g1, g2) = eval(t);
        if g == 0.0 {
            return NceRoot {
                t,
                iterations: iter,
                converged: true,
            };
        }
        if g > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        if hi - lo <= tol {
            return NceRoot {
                t: 0.5 * (lo + hi),
                iterations: iter,
                converged: true,
            };
        }
        // Halley step; fall back to bisection if it leaves the bracket
        let denom = 2.0 * g1 * g1 - g * g2;
        let mut t_next = if denom != 0.0 && denom.is_finite() {
            t - 2.0 * g * g1 / denom
        } else {
            f64::NAN
        };
        if !t_next.is_finite() || t_next <= lo || t_next >= hi {
            t_next = 0.5 * (lo + hi);
        }
        t = t_next;
    }
    NceRoot {
        t: 0.5 * (lo + hi),
        iterations: max_iter,
        converged: false,
    }
}

/// `p(class) = exp(u_class) / Ẑ`, computed in the log domain.
pub fn predict_prob(
    v: &EmbeddingMatrix,
    q: &[f64],
    class_index: usize,
    z_source: &Estimate,
) -> Result<f64> {
    if q.len() != v.dim() {
        return Err(Error::DimMismatch {
            expected: v.dim(),
            got: q.len(),
        });
    }
    if class_index >= v.n_vectors() {
        return Err(Error::IndexOutOfRange {
            index: class_index,
            n: v.n_vectors(),
        });
    }
    let u = dot(v.row(class_index), q);
    Ok((u - z_source.log_z_hat()).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthesize_gaussian;
    use crate::dataset::EmbeddingMatrix;
    use crate::oracle::{exact_top_k, sample_tail};

    fn basis_pair() -> EmbeddingMatrix {
        EmbeddingMatrix::new(2, vec![1.0, 0.0, 0.0, 1.0], Vec::new()).unwrap()
    }

    #[test]
    fn exact_z_zero_query_is_n() {
        let v = synthesize_gaussian(37, 5, 1.0, 3).unwrap();
        let z = exact_z(&v, &[0.0; 5]).unwrap();
        assert!((z.log_z_hat() - 37f64.ln()).abs() < 1e-13);
        assert!((z.z_hat() - 37.0).abs() < 1e-10);
    }

    #[test]
    fn exact_z_single_class() {
        let v = EmbeddingMatrix::new(1, vec![1.0], Vec::new()).unwrap();
        for &t in &[-3.0, 0.5, 12.0] {
            let z = exact_z(&v, &[t]).unwrap();
            assert!((z.log_z_hat() - t).abs() < 1e-14);
        }
    }

    #[test]
    fn exact_z_matches_compensated_sum() {
        // independent oracle: Kahan-compensated direct summation
        let v = synthesize_gaussian(50, 4, 1.0, 77).unwrap();
        let queries = synthesize_gaussian(10, 4, 1.0, 78).unwrap();
        for qi in 0..10 {
            let q = queries.row(qi);
            let mut sum = 0.0f64;
            let mut c = 0.0f64;
            for i in 0..v.n_vectors() {
                let y = dot(v.row(i), q).exp() - c;
                let t = sum + y;
                c = (t - sum) - y;
                sum = t;
            }
            let z = exact_z(&v, q).unwrap();
            assert!(
                (z.z_hat() - sum).abs() <= 1e-12 * sum,
                "query {qi}: {} vs {sum}",
                z.z_hat()
            );
        }
    }

    #[test]
    fn exact_z_finite_at_u_700() {
        let v = EmbeddingMatrix::new(1, vec![1.0], Vec::new()).unwrap();
        let z = exact_z(&v, &[700.0]).unwrap();
        assert!(z.log_z_hat().is_finite());
        assert_eq!(z.log_z_hat(), 700.0);
    }

    #[test]
    fn nmimps_full_head_is_exact() {
        let v = synthesize_gaussian(40, 6, 0.7, 5).unwrap();
        let q = v.row(3).to_vec();
        let head = exact_top_k(&v, &q, 40).unwrap();
        let nm = estimate_nmimps(&head).unwrap();
        let ex = exact_z(&v, &q).unwrap();
        assert!((nm.log_z_hat() - ex.log_z_hat()).abs() < 1e-12);
    }

    #[test]
    fn nmimps_hand_example() {
        let v = basis_pair();
        let head = exact_top_k(&v, &[1.0, 0.0], 1).unwrap();
        let nm = estimate_nmimps(&head).unwrap();
        assert!((nm.z_hat() - 1f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn nmimps_monotone_in_k_and_below_exact() {
        let v = synthesize_gaussian(60, 5, 0.8, 12).unwrap();
        let q = v.row(0).to_vec();
        let exact = exact_z(&v, &q).unwrap().log_z_hat();
        let mut prev = f64::NEG_INFINITY;
        for k in 1..=60 {
            let head = exact_top_k(&v, &q, k).unwrap();
            let nm = estimate_nmimps(&head).unwrap().log_z_hat();
            assert!(nm >= prev, "k={k}");
            assert!(nm <= exact + 1e-12, "k={k}");
            prev = nm;
        }
    }

    #[test]
    fn mimps_boundary_equals_exact() {
        let v = synthesize_gaussian(30, 4, 0.9, 8).unwrap();
        let q = v.row(1).to_vec();
        let head = exact_top_k(&v, &q, 30).unwrap();
        let est = estimate_mimps(&head, &TailSample::empty(), 30).unwrap();
        let ex = exact_z(&v, &q).unwrap();
        assert!((est.log_z_hat() - ex.log_z_hat()).abs() < 1e-12);
    }

    #[test]
    fn mimps_rejects_overlap_and_bad_l() {
        let v = synthesize_gaussian(30, 4, 0.9, 8).unwrap();
        let q = v.row(1).to_vec();
        let head = exact_top_k(&v, &q, 5).unwrap();
        // exclude everything except two head members, forcing an overlap
        let keep: HashSet<usize> = head.indices()[..2].iter().copied().collect();
        let exclude: Vec<usize> = (0..30).filter(|i| !keep.contains(i)).collect();
        let forced = sample_tail(&v, &exclude, 2, 1, Some(&q)).unwrap();
        assert!(matches!(
            estimate_mimps(&head, &forced, 30),
            Err(Error::HeadTailOverlap { .. })
        ));
        // l = 0 with k < N
        let empty = TailSample::empty();
        assert!(estimate_mimps(&head, &empty, 30).is_err());
    }

    #[test]
    fn mimps_unbiased_over_resamplings() {
        let v = synthesize_gaussian(200, 6, 0.5, 99).unwrap();
        let q = v.row(17).to_vec();
        let k = 20;
        let l = 20;
        let head = exact_top_k(&v, &q, k).unwrap();
        let z_true = exact_z(&v, &q).unwrap().z_hat();
        let reps = 4000;
        let mut vals = Vec::with_capacity(reps);
        for seed in 0..reps {
            let tail = sample_tail(&v, head.indices(), l, seed as u64, Some(&q)).unwrap();
            vals.push(estimate_mimps(&head, &tail, 200).unwrap().z_hat());
        }
        let mean = vals.iter().sum::<f64>() / reps as f64;
        let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps as f64 - 1.0);
        let se = (var / reps as f64).sqrt();
        assert!(
            (mean - z_true).abs() <= 3.0 * se,
            "mean {mean}, true {z_true}, se {se}"
        );
    }

    #[test]
    fn uniform_is_mimps_k0() {
        let v = synthesize_gaussian(100, 4, 0.6, 13).unwrap();
        let q = v.row(2).to_vec();
        let tail = sample_tail(&v, &[], 30, 7, Some(&q)).unwrap();
        let est = estimate_uniform(&tail, 100).unwrap();
        assert_eq!(est.method(), Method::Uniform);
        // (N/l)·Σ exp(u) computed directly
        let direct: f64 =
            tail.scores().unwrap().iter().map(|u| u.exp()).sum::<f64>() * (100.0 / 30.0);
        assert!((est.z_hat() - direct).abs() < 1e-9 * direct);
    }

    #[test]
    fn mince_symmetric_single_sample_root() {
        // k = l = 1 with a₁ = b₁ = c: g(Z) = (Z-c)/(Z+c), root Z = c
        let log_a = vec![2.5];
        let log_b = vec![2.5];
        let sol = solve_nce_root(&log_a, &log_b, 0.0, 1e-12, 100);
        assert!(sol.converged);
        assert!((sol.t - 2.5).abs() < 1e-10);
    }

    #[test]
    fn mince_matches_grid_scan_oracle() {
        // independent oracle: maximize J on a dense grid, then golden-section
        let v = synthesize_gaussian(300, 5, 0.6, 31).unwrap();
        for trial in 0..10u64 {
            let qi = (trial as usize * 13) % 300;
            let q = v.row(qi).to_vec();
            let k = 1 + (trial as usize % 7);
            let l = 10 + (trial as usize * 11) % 100;
            let head = exact_top_k(&v, &q, k).unwrap();
            let tail = sample_tail(&v, head.indices(), l, trial, Some(&q)).unwrap();
            let cfg = EstimatorConfig::default();
            let est = estimate_mince(&head, &tail, 300, &cfg).unwrap();
            assert!(!est.diagnostics().not_converged);

            let log_scale = (k as f64).ln() + ((300 - k) as f64).ln() - (l as f64).ln();
            let log_a: Vec<f64> = head.scores().iter().map(|u| u + log_scale).collect();
            let log_b: Vec<f64> =
                tail.scores().unwrap().iter().map(|u| u + log_scale).collect();
            let t_star = scan_maximize_j(&log_a, &log_b);
            assert!(
                (est.log_z_hat() - t_star).abs() < 1e-6,
                "trial {trial}: {} vs {t_star}",
                est.log_z_hat()
            );
        }
    }

    fn softplus(x: f64) -> f64 {
        if x > 35.0 {
            x
        } else if x < -35.0 {
            x.exp()
        } else {
            x.exp().ln_1p()
        }
    }

    /// J(t) maximization oracle: dense grid plus golden-section refinement.
    fn scan_maximize_j(log_a: &[f64], log_b: &[f64]) -> f64 {
        let j = |t: f64| -> f64 {
            let head: f64 = log_a.iter().map(|&la| softplus(t - la)).sum();
            let tail: f64 = log_b.iter().map(|&lb| softplus(lb - t)).sum();
            -(head + tail)
        };
        let lo0 = log_a
            .iter()
            .chain(log_b.iter())
            .cloned()
            .fold(f64::INFINITY, f64::min)
            - 30.0;
        let hi0 = log_a
            .iter()
            .chain(log_b.iter())
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
            + 30.0;
        let grid = 20_000;
        let mut best = lo0;
        let mut best_j = f64::NEG_INFINITY;
        for i in 0..=grid {
            let t = lo0 + (hi0 - lo0) * i as f64 / grid as f64;
            let val = j(t);
            if val > best_j {
                best_j = val;
                best = t;
            }
        }
        let width = (hi0 - lo0) / grid as f64;
        let (mut a, mut b) = (best - width, best + width);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - phi * (b - a);
            let d = a + phi * (b - a);
            if j(c) >= j(d) {
                b = d;
            } else {
                a = c;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn mince_handles_extreme_scores() {
        // scores near 700: Z-space arithmetic would overflow, t-space must not
        let log_scale = (5f64).ln() + (995f64).ln() - (50f64).ln();
        let log_a: Vec<f64> = [700.0, 699.5, 698.0, 690.0, 680.0]
            .iter()
            .map(|u| u + log_scale)
            .collect();
        let log_b: Vec<f64> = (0..50).map(|i| 600.0 - i as f64 + log_scale).collect();
        let sol = solve_nce_root(&log_a, &log_b, 700.0, 1e-10, 100);
        assert!(sol.converged);
        assert!(sol.t.is_finite());
        let (g, _, _) = super::nce_g(&log_a, &log_b, sol.t);
        assert!(g.abs() <= 1e-8 * 50.0, "g = {g}");
    }

    #[test]
    fn predict_prob_uniform_at_zero_query() {
        let v = synthesize_gaussian(25, 3, 1.0, 2).unwrap();
        let q = [0.0; 3];
        let z = exact_z(&v, &q).unwrap();
        for i in 0..25 {
            let p = predict_prob(&v, &q, i, &z).unwrap();
            assert!((p - 1.0 / 25.0).abs() < 1e-14);
        }
    }

    #[test]
    fn predict_prob_single_class_is_one() {
        let v = EmbeddingMatrix::new(2, vec![0.4, -0.2], Vec::new()).unwrap();
        let q = [1.3, 0.7];
        let z = exact_z(&v, &q).unwrap();
        let p = predict_prob(&v, &q, 0, &z).unwrap();
        assert!((p - 1.0).abs() < 1e-14);
    }

    #[test]
    fn predict_prob_hand_checked() {
        let v = basis_pair();
        let q = [1.0, 0.0];
        let z = exact_z(&v, &q).unwrap();
        let p = predict_prob(&v, &q, 0, &z).unwrap();
        let expected = 1f64.exp() / (1f64.exp() + 1.0);
        assert!((p - expected).abs() < 1e-14);
    }

    #[test]
    fn permutation_invariance() {
        let v = synthesize_gaussian(40, 3, 0.8, 50).unwrap();
        let q = v.row(5).to_vec();
        let mut perm_data = Vec::new();
        let perm: Vec<usize> = (0..40).rev().collect();
        for &i in &perm {
            perm_data.extend_from_slice(v.row(i));
        }
        let vp = EmbeddingMatrix::new(3, perm_data, Vec::new()).unwrap();
        let a = exact_z(&v, &q).unwrap().log_z_hat();
        let b = exact_z(&vp, &q).unwrap().log_z_hat();
        assert!((a - b).abs() < 1e-12);
    }
}
