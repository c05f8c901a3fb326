//! Minimum, integrated and normalized-integrated Bayes factors over the
//! discount parameter, with truncated-beta weighting and integrability
//! guards.

use statrs::function::beta::{beta_reg, ln_beta};

use crate::error::{Error, Result};

/// Truncated beta weight for the discount parameter.
#[derive(Debug, Clone)]
pub struct TruncatedBeta {
    pub a: f64,
    pub b: f64,
    pub lower: f64,
    pub upper: f64,
}

impl TruncatedBeta {
    pub fn new(a: f64, b: f64, lower: f64, upper: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::domain("beta shapes must be positive"));
        }
        if !(0.0 <= lower && lower < upper && upper <= 1.0) {
            return Err(Error::domain(format!(
                "truncation bounds must satisfy 0 <= lower < upper <= 1, got ({lower}, {upper})"
            )));
        }
        let mass = beta_reg(a, b, upper) - beta_reg(a, b, lower);
        if !(mass > 0.0) {
            return Err(Error::Degenerate("truncated beta carries no mass".into()));
        }
        Ok(TruncatedBeta { a, b, lower, upper })
    }

    /// Default weight for a `p x n` problem: shape `a` just above the
    /// known-V integrability edge `np/2` and `b` chosen so the untruncated
    /// mean equals `mean` (the reference settings use 0.7 and 0.3).
    pub fn default_for(p: usize, n: usize, mean: f64) -> Result<Self> {
        if !(mean > 0.0 && mean < 1.0) {
            return Err(Error::domain("target mean must lie in (0, 1)"));
        }
        let a = (n * p) as f64 / 2.0 + 1e-4;
        let b = a * (1.0 - mean) / mean;
        TruncatedBeta::new(a, b, 0.0, 1.0)
    }

    /// Normalized density on the truncation interval.
    pub fn pdf(&self, x: f64) -> f64 {
        if x <= self.lower || x >= self.upper || x <= 0.0 || x >= 1.0 {
            return 0.0;
        }
        let mass = beta_reg(self.a, self.b, self.upper) - beta_reg(self.a, self.b, self.lower);
        ((self.a - 1.0) * x.ln() + (self.b - 1.0) * (1.0 - x).ln() - ln_beta(self.a, self.b)).exp()
            / mass
    }
}

/// Which Bayes factor family an integrated summary refers to; carries the
/// dimensions that the integrability conditions depend on.
#[derive(Debug, Clone, Copy)]
pub enum Regime {
    KnownV { p: usize, n: usize },
    UnknownV { p: usize, n: usize, m_d: f64 },
}

/// Outcome of the integrability check.
#[derive(Debug, Clone, PartialEq)]
pub enum Guard {
    Ok,
    Violation(String),
}

/// Integrability conditions for the beta-weighted integral of the bound:
/// known V needs `a > np/2`; unknown V needs `a > 1` and the truncation to
/// start at or above `(2n + p)/m_d`.
pub fn integrability_guard(regime: Regime, weight: &TruncatedBeta) -> Guard {
    match regime {
        Regime::KnownV { p, n } => {
            let need = (n * p) as f64 / 2.0;
            if weight.a > need {
                Guard::Ok
            } else {
                Guard::Violation(format!(
                    "known-V integrability needs a > np/2 = {need}, got a = {}",
                    weight.a
                ))
            }
        }
        Regime::UnknownV { p, n, m_d } => {
            let low = (2.0 * n as f64 + p as f64) / m_d;
            if weight.a <= 1.0 {
                Guard::Violation(format!(
                    "unknown-V integrability needs a > 1, got a = {}",
                    weight.a
                ))
            } else if weight.lower < low {
                Guard::Violation(format!(
                    "unknown-V integrability needs lower >= (2n + p)/m_d = {low}, got {}",
                    weight.lower
                ))
            } else {
                Guard::Ok
            }
        }
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` by Newton iteration on the
/// Legendre recurrence.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        loop {
            let mut p0 = 1.0;
            let mut p1 = 0.0;
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j as f64 + 1.0);
            }
            let dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let z_old = z;
            z -= p0 / dp;
            if (z - z_old).abs() < 1e-15 {
                nodes[i] = -z;
                nodes[n - 1 - i] = z;
                let w = 2.0 / ((1.0 - z * z) * dp * dp);
                weights[i] = w;
                weights[n - 1 - i] = w;
                break;
            }
        }
    }
    (nodes, weights)
}

fn gl_panel<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, nodes: &[f64], weights: &[f64]) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    nodes
        .iter()
        .zip(weights)
        .map(|(&x, &w)| w * f(mid + half * x))
        .sum::<f64>()
        * half
}

/// Beta-weighted integral of `f` over the truncation interval.
///
/// Panels shrink geometrically toward the lower endpoint, where the bound may
/// grow; the innermost panel runs in the variable `u = sqrt(alpha - lower)`
/// so an integrable inverse-square-root growth becomes a bounded integrand.
/// Returns the integral and an error estimate from halving every panel.
pub fn quad_beta_weighted<F: Fn(f64) -> f64>(f: &F, weight: &TruncatedBeta) -> (f64, f64) {
    let g = |alpha: f64| f(alpha) * weight.pdf(alpha);
    let (lo, hi) = (weight.lower, weight.upper);
    let len = hi - lo;
    // geometric panel boundaries toward the lower endpoint, refined with
    // quantile cuts of the weight so concentrated densities stay resolved
    let mut cuts = vec![0.0, len / 64.0, len / 16.0, len / 4.0, len];
    let mass_lo = beta_reg(weight.a, weight.b, lo);
    let mass = beta_reg(weight.a, weight.b, hi) - mass_lo;
    for q in [0.001, 0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99, 0.999] {
        let target = mass_lo + q * mass;
        let (mut a, mut b) = (lo, hi);
        for _ in 0..80 {
            let mid = 0.5 * (a + b);
            if beta_reg(weight.a, weight.b, mid) < target {
                a = mid;
            } else {
                b = mid;
            }
        }
        cuts.push(0.5 * (a + b) - lo);
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).expect("finite cut"));
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-13 * len);
    let (nodes, weights_gl) = gauss_legendre(32);

    let integrate = |splits: usize| -> f64 {
        let mut total = 0.0;
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b - a <= 0.0 {
                continue;
            }
            for s in 0..splits {
                let sa = a + (b - a) * s as f64 / splits as f64;
                let sb = a + (b - a) * (s + 1) as f64 / splits as f64;
                if w[0] == 0.0 {
                    // first panel family: substitute alpha = lo + u^2
                    let (ua, ub) = (sa.sqrt(), sb.sqrt());
                    let fu = |u: f64| 2.0 * u * g(lo + u * u);
                    total += gl_panel(&fu, ua, ub, &nodes, &weights_gl);
                } else {
                    let fa = |d: f64| g(lo + d);
                    total += gl_panel(&fa, sa, sb, &nodes, &weights_gl);
                }
            }
        }
        total
    };

    let coarse = integrate(1);
    let fine = integrate(2);
    (fine, (fine - coarse).abs())
}

/// Integrated Bayes factor: the beta-weighted average of `H(alpha)` minus
/// one, with its quadrature error estimate.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct IbfOutcome {
    pub value: f64,
    pub error_estimate: f64,
}

/// Beta-weighted integrated Bayes factor. Fails with the guard's description
/// when the integrability conditions do not hold.
pub fn integrated_bf<F: Fn(f64) -> f64>(
    bf: &F,
    weight: &TruncatedBeta,
    regime: Regime,
) -> Result<IbfOutcome> {
    if let Guard::Violation(msg) = integrability_guard(regime, weight) {
        return Err(Error::domain(msg));
    }
    let (integral, err) = quad_beta_weighted(bf, weight);
    Ok(IbfOutcome {
        value: integral - 1.0,
        error_estimate: err,
    })
}

/// Normalized integrated Bayes factor `(int H pi - 1) / (int kappa pi - 1)`.
pub fn normalized_ibf<F: Fn(f64) -> f64, G: Fn(f64) -> f64>(
    bf: &F,
    kappa: &G,
    weight: &TruncatedBeta,
    regime: Regime,
) -> Result<f64> {
    if let Guard::Violation(msg) = integrability_guard(regime, weight) {
        return Err(Error::domain(msg));
    }
    let (num, _) = quad_beta_weighted(bf, weight);
    let (den, _) = quad_beta_weighted(kappa, weight);
    let den = den - 1.0;
    if den.abs() <= 1e-12 {
        return Err(Error::Degenerate(
            "normalizer integral equals one: kappa is constant at 1".into(),
        ));
    }
    Ok((num - 1.0) / den)
}

/// Global minimum of the Bayes factor over `[lo, hi]`: a 256-point
/// log-spaced scan followed by golden-section refinement in the bracketing
/// interval. Returns `(argmin, min)`.
pub fn minimum_bf<F: Fn(f64) -> f64>(bf: &F, lo: f64, hi: f64) -> Result<(f64, f64)> {
    if !(lo > 0.0 && lo < hi && hi <= 1.0) {
        return Err(Error::domain(format!(
            "minimum needs 0 < lo < hi <= 1, got ({lo}, {hi})"
        )));
    }
    const GRID: usize = 256;
    let (ln_lo, ln_hi) = (lo.ln(), hi.ln());
    let mut xs = Vec::with_capacity(GRID);
    for i in 0..GRID {
        xs.push((ln_lo + (ln_hi - ln_lo) * i as f64 / (GRID - 1) as f64).exp());
    }
    let mut best = 0;
    let mut best_v = f64::INFINITY;
    for (i, &x) in xs.iter().enumerate() {
        let v = bf(x);
        if v < best_v {
            best_v = v;
            best = i;
        }
    }
    let mut a = xs[best.saturating_sub(1)];
    let mut b = xs[(best + 1).min(GRID - 1)];
    // golden-section refinement
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = bf(c);
    let mut fd = bf(d);
    for _ in 0..200 {
        if b - a < 1e-12 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = bf(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = bf(d);
        }
    }
    let xm = 0.5 * (a + b);
    let fm = bf(xm);
    if fm <= best_v {
        Ok((xm, fm))
    } else {
        Ok((xs[best], best_v))
    }
}
