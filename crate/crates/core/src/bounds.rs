//! Miscoverage-gap bounds and the numerics that check them.
//!
//! Closed forms: the changepoint bound `rho^k`, the Beta bound
//! `sqrt(2 − 2(1 − 2k/(n+k))^(k/2))`, and the Hellinger distance between two
//! Beta laws sharing `n = a + b`. Quadrature oracles integrate the total
//! variation and Hellinger distances directly with adaptive Simpson.

use serde::Serialize;

use crate::error::{Error, Result};

/// Lanczos coefficients for `g = 7`, nine terms.
const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0`, Lanczos approximation with reflection below 1/2.
pub fn ln_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::domain(format!("ln_gamma needs a positive argument, got {x}")));
    }
    Ok(ln_gamma_pos(x))
}

fn ln_gamma_pos(x: f64) -> f64 {
    use std::f64::consts::PI;
    if x < 0.5 {
        // Γ(x)Γ(1−x) = π / sin(πx), with sin(πx) > 0 on (0, 1/2).
        return (PI / (PI * x).sin()).ln() - ln_gamma_pos(1.0 - x);
    }
    let z = x - 1.0;
    let mut sum = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        sum += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    0.5 * (2.0 * PI).ln() + (z + 0.5) * t.ln() - t + sum.ln()
}

/// `ln B(m, n) = ln Γ(m) + ln Γ(n) − ln Γ(m + n)`.
pub fn log_beta_fn(m: f64, n: f64) -> Result<f64> {
    if !(m > 0.0 && n > 0.0) {
        return Err(Error::domain(format!(
            "beta function needs positive arguments, got ({m}, {n})"
        )));
    }
    Ok(ln_gamma(m)? + ln_gamma(n)? - ln_gamma(m + n)?)
}

/// `Beta(a, n − a)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BetaSpec {
    pub a: f64,
    pub n: f64,
}

impl BetaSpec {
    pub fn new(a: f64, n: f64) -> Result<Self> {
        if !(a > 0.0 && a < n && n.is_finite()) {
            return Err(Error::param(format!("Beta spec needs 0 < a < n, got a={a}, n={n}")));
        }
        Ok(BetaSpec { a, n })
    }

    /// From the usual shape pair `Beta(alpha, beta)`.
    pub fn from_shapes(alpha: f64, beta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::param(format!("Beta shape {beta} must be > 0")));
        }
        Self::new(alpha, alpha + beta)
    }

    pub fn b(&self) -> f64 {
        self.n - self.a
    }

    fn log_norm(&self) -> f64 {
        log_beta_fn(self.a, self.b()).expect("validated spec")
    }
}

/// Closed-form Hellinger distance between two Beta laws with the same `n`.
pub fn hellinger_beta(p: &BetaSpec, q: &BetaSpec) -> Result<f64> {
    if (p.n - q.n).abs() > 1e-12 * p.n.max(q.n) {
        return Err(Error::param(format!(
            "Hellinger closed form needs equal n, got {} and {}",
            p.n, q.n
        )));
    }
    let mid = 0.5 * (p.a + q.a);
    let log_ratio = log_beta_fn(mid, p.n - mid)? - 0.5 * (p.log_norm() + q.log_norm());
    // 1 − exp(x) without cancellation when the laws are close.
    let h2 = -log_ratio.exp_m1();
    Ok(h2.clamp(0.0, 1.0).sqrt())
}

/// Log-density of `spec` from `ln x` and `ln(1 − x)`.
fn log_density(spec: &BetaSpec, log_norm: f64, lx: f64, l1x: f64) -> f64 {
    (spec.a - 1.0) * lx + (spec.b() - 1.0) * l1x - log_norm
}

/// Absolute error target of the quadrature oracles.
pub const QUAD_TOL: f64 = 1e-8;
const PANELS: usize = 64;
const MAX_DEPTH: u32 = 30;

/// `∫₀¹ f` for an integrand built from Beta densities. Each half of the
/// interval is mapped from its endpoint by `s^r / 2`, with `r · shape ≥ 2`
/// for the smallest shape parameter on that side, so the mapped integrand
/// vanishes at the endpoint instead of blowing up. `f` receives
/// `(ln x, ln(1 − x), ln dx/ds)` and returns the mapped integrand.
fn integrate_beta(f: impl Fn(f64, f64, f64) -> f64, min_a: f64, min_b: f64, tol: f64) -> Result<f64> {
    let half = |r: f64, from_left: bool| {
        let f = &f;
        move |s: f64| {
            if s <= 0.0 {
                return 0.0;
            }
            let ls = s.ln();
            let near = r * ls - std::f64::consts::LN_2;
            let far = (-near.exp()).ln_1p();
            let lj = r.ln() + (r - 1.0) * ls - std::f64::consts::LN_2;
            if from_left {
                f(near, far, lj)
            } else {
                f(far, near, lj)
            }
        }
    };
    let (left, right) = (half((2.0 / min_a).max(1.0), true), half((2.0 / min_b).max(1.0), false));
    let panel_tol = tol / (2 * PANELS) as f64;
    let h = 1.0 / PANELS as f64;
    let (mut total, mut unresolved) = (0.0, 0.0);
    for g in [&left as &dyn Fn(f64) -> f64, &right] {
        for p in 0..PANELS {
            let (a, b) = (p as f64 * h, (p + 1) as f64 * h);
            let (fa, fb, fm) = (g(a), g(b), g(0.5 * (a + b)));
            let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
            let (v, err) = simpson(g, a, b, fa, fm, fb, whole, panel_tol, MAX_DEPTH);
            total += v;
            unresolved += err;
        }
    }
    if !total.is_finite() || unresolved > tol {
        return Err(Error::Quadrature {
            achieved: unresolved,
            tolerance: tol,
        });
    }
    Ok(total)
}

/// Adaptive Simpson with Richardson correction; returns the value and the
/// summed error estimate of intervals left unresolved at the depth limit.
#[allow(clippy::too_many_arguments)]
fn simpson(
    g: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> (f64, f64) {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (g(lm), g(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return (left + right + delta / 15.0, 0.0);
    }
    if depth == 0 {
        return (left + right + delta / 15.0, delta.abs() / 15.0);
    }
    let (lv, le) = simpson(g, a, m, fa, flm, fm, left, tol / 2.0, depth - 1);
    let (rv, re) = simpson(g, m, b, fm, frm, fb, right, tol / 2.0, depth - 1);
    (lv + rv, le + re)
}

/// `½ ∫ |f_p − f_q|` by quadrature; any two valid Beta laws.
pub fn tv_numeric(p: &BetaSpec, q: &BetaSpec) -> Result<f64> {
    if p == q {
        return Ok(0.0);
    }
    let (np, nq) = (p.log_norm(), q.log_norm());
    let v = integrate_beta(
        |lx, l1x, lj| ((log_density(p, np, lx, l1x) + lj).exp() - (log_density(q, nq, lx, l1x) + lj).exp()).abs(),
        p.a.min(q.a),
        p.b().min(q.b()),
        QUAD_TOL,
    )?;
    Ok((0.5 * v).clamp(0.0, 1.0))
}

/// `sqrt(½ ∫ (√f_p − √f_q)²)` by quadrature; any two valid Beta laws.
pub fn hellinger_numeric(p: &BetaSpec, q: &BetaSpec) -> Result<f64> {
    if p == q {
        return Ok(0.0);
    }
    let (np, nq) = (p.log_norm(), q.log_norm());
    let v = integrate_beta(
        |lx, l1x, lj| {
            let d = (0.5 * (log_density(p, np, lx, l1x) + lj)).exp() - (0.5 * (log_density(q, nq, lx, l1x) + lj)).exp();
            d * d
        },
        p.a.min(q.a),
        p.b().min(q.b()),
        QUAD_TOL,
    )?;
    Ok((0.5 * v).clamp(0.0, 1.0).sqrt())
}

/// `rho^k`.
pub fn changepoint_gap_bound(rho: f64, k: u64) -> Result<f64> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::param(format!("decay rho {rho} outside (0, 1]")));
    }
    Ok(match i32::try_from(k) {
        Ok(k) => rho.powi(k),
        Err(_) => rho.powf(k as f64),
    })
}

/// `sqrt(2 − 2(1 − 2k/(n+k))^(k/2))`, evaluated as
/// `sqrt(−2·expm1((k/2)·ln1p(−2k/(n+k))))`.
pub fn beta_gap_bound(n: f64, k: f64) -> Result<f64> {
    if !(k >= 0.0 && k.is_finite()) {
        return Err(Error::domain(format!("gap bound needs k >= 0, got {k}")));
    }
    if !(n > k) {
        return Err(Error::domain(format!("gap bound needs n > k, got n={n}, k={k}")));
    }
    let inner = (0.5 * k * (-2.0 * k / (n + k)).ln_1p()).exp_m1();
    Ok((-2.0 * inner).max(0.0).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LemmaCheck {
    pub lhs: f64,
    pub holds: bool,
}

/// Brute-force `Σ_k w_k · 1(Σ_i w_i · 1(t_i ≥ t_k) ≤ alpha)` against `alpha`.
pub fn weight_sum_lemma_check(alpha: f64, weights: &[f64], scores: &[f64]) -> Result<LemmaCheck> {
    if weights.len() != scores.len() {
        return Err(Error::Dimension {
            op: "weight_sum_lemma_check",
            left: vec![weights.len()],
            right: vec![scores.len()],
        });
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::param("lemma weights must be non-negative"));
    }
    let mut lhs = 0.0;
    for (k, &tk) in scores.iter().enumerate() {
        let tail: f64 = weights
            .iter()
            .zip(scores)
            .filter(|(_, &ti)| ti >= tk)
            .map(|(w, _)| w)
            .sum();
        if tail <= alpha {
            lhs += weights[k];
        }
    }
    Ok(LemmaCheck {
        lhs,
        holds: lhs <= alpha + 1e-12,
    })
}

pub const HIST_BINS: usize = 64;

/// Total variation between the 64-bin histograms of two score samples on
/// `[0, 1]`; scores outside the interval land in the edge bins.
pub fn histogram_tv(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::usage("histogram distance needs two nonempty samples"));
    }
    let hist = |xs: &[f64]| {
        let mut h = [0.0; HIST_BINS];
        for &x in xs {
            let bin = ((x * HIST_BINS as f64).floor().max(0.0) as usize).min(HIST_BINS - 1);
            h[bin] += 1.0 / xs.len() as f64;
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    Ok(0.5 * ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// Estimated weighted gap `Σ w̃_i · d̂_i` for a piecewise-stationary score
/// sequence. `segments[i]` labels the stationary block of point `i`; the
/// test point shares the block of the final calibration point. `d̂_i` is the
/// histogram distance between point `i`'s block and the final block, which
/// bounds the swap distance for point `i` because exchanging two points
/// from the same block leaves the joint law unchanged. Points in the final
/// block contribute zero. This is an estimator: finite blocks give a
/// positive bias even between identical laws.
pub fn empirical_gap(scores: &[f64], segments: &[usize], weights: &[f64]) -> Result<f64> {
    if scores.is_empty() || scores.len() != segments.len() || scores.len() != weights.len() {
        return Err(Error::Dimension {
            op: "empirical_gap",
            left: vec![scores.len(), segments.len()],
            right: vec![weights.len()],
        });
    }
    let last = *segments.last().expect("nonempty");
    let block = |id: usize| -> Vec<f64> {
        scores
            .iter()
            .zip(segments)
            .filter(|(_, &s)| s == id)
            .map(|(&x, _)| x)
            .collect()
    };
    let reference = block(last);
    let mut cache = std::collections::BTreeMap::new();
    let mut gap = 0.0;
    for (&seg, &w) in segments.iter().zip(weights) {
        if seg == last {
            continue;
        }
        let d = match cache.get(&seg) {
            Some(&d) => d,
            None => {
                let d = histogram_tv(&block(seg), &reference)?;
                cache.insert(seg, d);
                d
            }
        };
        gap += w * d;
    }
    Ok(gap)
}

/// `max(0, 1 − alpha − gap)`.
pub fn coverage_lower_bound(alpha: f64, gap: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param(format!("alpha {alpha} outside (0, 1)")));
    }
    if !(gap >= 0.0) {
        return Err(Error::param(format!("gap {gap} must be >= 0")));
    }
    Ok((1.0 - alpha - gap).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GapInputs {
    Changepoint { rho: f64, k: u64 },
    Beta { n: f64, k: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapBoundReport {
    pub alpha: f64,
    pub inputs: GapInputs,
    pub bound_value: f64,
    pub coverage_lower_bound: f64,
}

impl GapBoundReport {
    pub fn changepoint(alpha: f64, rho: f64, k: u64) -> Result<Self> {
        let bound_value = changepoint_gap_bound(rho, k)?;
        Ok(GapBoundReport {
            alpha,
            inputs: GapInputs::Changepoint { rho, k },
            bound_value,
            coverage_lower_bound: coverage_lower_bound(alpha, bound_value)?,
        })
    }

    pub fn beta(alpha: f64, n: f64, k: f64) -> Result<Self> {
        let bound_value = beta_gap_bound(n, k)?;
        Ok(GapBoundReport {
            alpha,
            inputs: GapInputs::Beta { n, k },
            bound_value,
            coverage_lower_bound: coverage_lower_bound(alpha, bound_value)?,
        })
    }
}

/// One cell of the Beta bound grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    pub n: f64,
    pub k: f64,
    pub a1: f64,
    pub a2: f64,
    pub tv_numeric: f64,
    pub hellinger: f64,
    pub beta_bound: f64,
    pub holds: bool,
}

/// Cells `(n, k, a1 = frac·n, a2 = a1 ± k)` with `0 < a2 < n`; `k = 0` gives
/// the single cell `a2 = a1`.
pub fn beta_grid(ns: &[f64], ks: &[f64], a1_fracs: &[f64]) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for &n in ns {
        for &k in ks {
            let bound = beta_gap_bound(n, k)?;
            for &frac in a1_fracs {
                let a1 = frac * n;
                let p = BetaSpec::new(a1, n)?;
                let mut seconds = vec![a1 - k];
                if k > 0.0 {
                    seconds.push(a1 + k);
                }
                for a2 in seconds.into_iter().filter(|&a2| a2 > 0.0 && a2 < n) {
                    let q = BetaSpec::new(a2, n)?;
                    let tv = tv_numeric(&p, &q)?;
                    rows.push(GridRow {
                        n,
                        k,
                        a1,
                        a2,
                        tv_numeric: tv,
                        hellinger: hellinger_beta(&p, &q)?,
                        beta_bound: bound,
                        holds: tv <= bound + QUAD_TOL,
                    });
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathcore::RngStream;
    use proptest::prelude::*;

    // Reference values computed with 50-digit arithmetic (mpmath).
    const B_25_15: f64 = 0.196_349_540_849_362_08; // π/16
    const H_22_31: f64 = 0.408_606_716_899_400_2;
    const GAP_100_5: f64 = 0.665_374_622_226_777_3;
    const LN_GAMMA_HALF: f64 = 0.572_364_942_924_700_1; // ln √π
    const LN_GAMMA_101: f64 = 363.739_375_555_563_5; // ln 100!

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn log_beta_values() {
        assert!(log_beta_fn(1.0, 1.0).unwrap().abs() < 1e-13);
        assert!(rel(log_beta_fn(2.0, 2.0).unwrap(), (1.0f64 / 6.0).ln()) < 1e-12);
        assert!(rel(log_beta_fn(2.5, 1.5).unwrap().exp(), B_25_15) < 1e-12);
        assert!(rel(ln_gamma(0.5).unwrap(), LN_GAMMA_HALF) < 1e-12);
        assert!(rel(ln_gamma(101.0).unwrap(), LN_GAMMA_101) < 1e-12);
        assert!(matches!(log_beta_fn(0.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(log_beta_fn(1.0, -2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn ln_gamma_factorial_oracle() {
        let mut ln_fact = 0.0f64;
        for n in 1..=170u32 {
            // ln Γ(n + 1) = Σ ln j
            ln_fact += (n as f64).ln();
            let g = ln_gamma(n as f64 + 1.0).unwrap();
            assert!(
                (g - ln_fact).abs() <= 1e-10 * ln_fact.max(1.0),
                "n={n}: {g} vs {ln_fact}"
            );
        }
    }

    #[test]
    fn hellinger_closed_form() {
        let p = BetaSpec::new(2.0, 4.0).unwrap();
        let q = BetaSpec::new(3.0, 4.0).unwrap();
        assert_eq!(hellinger_beta(&p, &p).unwrap(), 0.0);
        assert!((hellinger_beta(&p, &q).unwrap() - H_22_31).abs() < 1e-12);
        assert!((hellinger_numeric(&p, &q).unwrap() - H_22_31).abs() < 1e-6);
        let r = BetaSpec::new(2.0, 5.0).unwrap();
        assert!(matches!(hellinger_beta(&p, &r), Err(Error::Parameter(_))));
    }

    #[test]
    fn tv_examples() {
        let u = BetaSpec::from_shapes(1.0, 1.0).unwrap();
        let lin = BetaSpec::from_shapes(2.0, 1.0).unwrap();
        assert!(tv_numeric(&u, &u).unwrap().abs() < 1e-8);
        assert!((tv_numeric(&u, &lin).unwrap() - 0.25).abs() < 1e-8);
        // Density ½x^(−½) crosses 1 at x = ¼: TV = ∫₀^¼ (½x^(−½) − 1) = ¼.
        let root = BetaSpec::from_shapes(0.5, 1.0).unwrap();
        assert!((tv_numeric(&u, &root).unwrap() - 0.25).abs() < 1e-8);
        assert!(BetaSpec::new(3.0, 3.0).is_err());
    }

    #[test]
    fn changepoint_bound_values() {
        assert_eq!(changepoint_gap_bound(0.7, 0).unwrap(), 1.0);
        assert_eq!(changepoint_gap_bound(0.5, 3).unwrap(), 0.125);
        assert_eq!(changepoint_gap_bound(1.0, 1000).unwrap(), 1.0);
        assert!(changepoint_gap_bound(0.0, 1).is_err());
    }

    #[test]
    fn beta_bound_values() {
        assert_eq!(beta_gap_bound(100.0, 0.0).unwrap(), 0.0);
        assert!((beta_gap_bound(100.0, 5.0).unwrap() - GAP_100_5).abs() < 1e-12);
        // Direct evaluation of the closed form as a second route.
        let direct = |n: f64, k: f64| (2.0 - 2.0 * (1.0 - 2.0 * k / (n + k)).powf(k / 2.0)).sqrt();
        for n in [50.0, 100.0, 200.0] {
            let mut prev = 0.0;
            for k in 0..=10 {
                let b = beta_gap_bound(n, k as f64).unwrap();
                assert!(b >= prev);
                assert!((b - direct(n, k as f64)).abs() < 1e-12);
                prev = b;
            }
        }
        assert!(matches!(beta_gap_bound(5.0, 5.0), Err(Error::Domain(_))));
    }

    #[test]
    fn beta_bound_tracks_exponential_form() {
        for n in [100.0f64, 1000.0] {
            let kmax = n.sqrt().floor() as u32;
            for k in 1..=kmax {
                let k = k as f64;
                let b = beta_gap_bound(n, k).unwrap();
                let r = (1.0 - (-k * k / n).exp()).sqrt();
                assert!(b <= 2.0 * r && r <= 2.0 * b, "n={n} k={k}: {b} vs {r}");
            }
        }
    }

    #[test]
    fn lemma_examples() {
        let zero = weight_sum_lemma_check(0.1, &[0.0; 4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(zero.lhs, 0.0);
        assert!(zero.holds);
        let c = weight_sum_lemma_check(0.5, &[0.3, 0.3, 0.4], &[1.0, 2.0, 3.0]).unwrap();
        assert!((c.lhs - 0.4).abs() < 1e-15 && c.holds);
    }

    #[test]
    fn lower_bound_values() {
        assert!((coverage_lower_bound(0.1, 0.0).unwrap() - 0.9).abs() < 1e-15);
        let gap = changepoint_gap_bound(0.99, 160).unwrap();
        assert!((coverage_lower_bound(0.1, gap).unwrap() - 0.699_722_973_142_510_4).abs() < 1e-12);
        assert_eq!(coverage_lower_bound(0.1, 0.95).unwrap(), 0.0);
        let r = GapBoundReport::changepoint(0.1, 0.5, 3).unwrap();
        assert_eq!(r.bound_value, 0.125);
    }

    #[test]
    fn gap_estimator_cases() {
        let scores = [0.1, 0.2, 0.3, 0.1, 0.2, 0.3];
        let w = [1.0 / 7.0; 6];
        assert_eq!(empirical_gap(&scores, &[0, 0, 0, 1, 1, 1], &w).unwrap(), 0.0);
        assert_eq!(empirical_gap(&scores, &[0; 6], &w).unwrap(), 0.0);
        let shifted = [0.1, 0.1, 0.1, 0.9, 0.9, 0.9];
        let g = empirical_gap(&shifted, &[0, 0, 0, 1, 1, 1], &w).unwrap();
        assert!((g - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn grid_shape() {
        let rows = beta_grid(&[100.0], &[0.0, 5.0], &[0.5]).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!((rows[0].tv_numeric, rows[0].beta_bound), (0.0, 0.0));
        assert!(rows.iter().all(|r| r.holds));
    }

    proptest! {
        #[test]
        fn hellinger_is_symmetric(n in 2.0f64..300.0, u1 in 0.01f64..0.99, u2 in 0.01f64..0.99) {
            let p = BetaSpec::new(u1 * n, n).unwrap();
            let q = BetaSpec::new(u2 * n, n).unwrap();
            let (h1, h2) = (hellinger_beta(&p, &q).unwrap(), hellinger_beta(&q, &p).unwrap());
            prop_assert!((h1 - h2).abs() < 1e-14);
            prop_assert!((0.0..=1.0).contains(&h1));
        }

        #[test]
        fn lemma_holds_on_random_instances(seed in any::<u64>(), n in 1usize..30, alpha in 0.0f64..1.0) {
            let mut rng = RngStream::new(seed);
            let raw: Vec<f64> = (0..=n).map(|_| rng.uniform()).collect();
            let z: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let t: Vec<f64> = (0..=n).map(|_| (rng.uniform() * 5.0).floor()).collect();
            prop_assert!(weight_sum_lemma_check(alpha, &w, &t).unwrap().holds);
        }
    }

    #[test]
    fn quadrature_agrees_with_closed_form() {
        let mut rng = RngStream::new(17);
        for _ in 0..25 {
            let n = rng.uniform_range(2.0, 200.0);
            // Shapes below 1 put integrable singularities at the endpoints.
            let p = BetaSpec::new(n * rng.uniform_range(0.02, 0.98), n).unwrap();
            let q = BetaSpec::new(n * rng.uniform_range(0.02, 0.98), n).unwrap();
            let h = hellinger_beta(&p, &q).unwrap();
            assert!((hellinger_numeric(&p, &q).unwrap() - h).abs() < 1e-6);
            let tv = tv_numeric(&p, &q).unwrap();
            assert!(tv <= std::f64::consts::SQRT_2 * h + 1e-8);
            assert!(tv >= h * h - 1e-8, "TV is at least the squared Hellinger distance");
        }
    }
}
