//! Sequential rolling-window detection pipeline: prior propagation,
//! covariance estimation, per-time Bayes factors, robust summaries,
//! calibrated decisions and report assembly.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::bayesfactor::{self, BFEvaluation};
use crate::bfdist::{self, CalibrationResult, Decision};
use crate::classical::{elementwise_scan, ClassicalReport, ScanTest};
use crate::conjugate;
use crate::core::{KnownVModel, MatrixSeries, NIWModel};
use crate::error::{Error, Result};
use crate::matdist;
use crate::robust::{self, Regime, TruncatedBeta};

/// Ridge added to estimated covariances, relative to their mean diagonal.
const COV_RIDGE: f64 = 1e-8;

/// Inference regime driving the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DetectorRegime {
    KnownV,
    Niw,
}

/// Source of the likelihood row covariance.
#[derive(Debug, Clone)]
pub enum SigmaSource {
    /// Least-squares residual covariance over each window.
    LeastSquares,
    UserSupplied(DMatrix<f64>),
}

/// Source of the column covariance in the known-V regime.
#[derive(Debug, Clone)]
pub enum VSource {
    Identity,
    UserSupplied(DMatrix<f64>),
    /// One flip-flop pass of the residual column covariance per window.
    Estimate,
}

/// Detector configuration.
#[derive(Debug, Clone)]
pub struct DetectorConfig {
    pub window: usize,
    pub regime: DetectorRegime,
    pub tau: f64,
    pub beta: f64,
    /// Prior precision; defaults to the window length.
    pub phi: Option<f64>,
    /// Discount grid for per-time sensitivity curves.
    pub alpha_grid: Option<Vec<f64>>,
    /// Target prior means of the two robust beta weights.
    pub robust_means: (f64, f64),
    pub sigma_source: SigmaSource,
    pub v_source: VSource,
    /// Estimate covariances on the first window only.
    pub freeze_covariances: bool,
    pub classical_levels: Vec<f64>,
    pub classical_bonferroni: bool,
    /// NIW prior hyperparameters `(rho, psi_scale, extra_dof)`: the prior is
    /// `IW(psi_scale * I, 2n + 1 + extra_dof)`.
    pub niw_prior: (f64, f64, f64),
    /// Monte Carlo draws for the unknown-V threshold calibration.
    pub mc_draws: usize,
    pub seed: u64,
}

impl DetectorConfig {
    pub fn new(window: usize, tau: f64, beta: f64) -> Result<Self> {
        if window < 2 {
            return Err(Error::domain("window must hold at least 2 observations"));
        }
        if !(tau > 0.0 && tau < 1.0) || !(beta > 0.0 && beta < 1.0) {
            return Err(Error::domain("tau and beta must lie in (0, 1)"));
        }
        Ok(DetectorConfig {
            window,
            regime: DetectorRegime::KnownV,
            tau,
            beta,
            phi: None,
            alpha_grid: None,
            robust_means: (0.7, 0.3),
            sigma_source: SigmaSource::LeastSquares,
            v_source: VSource::Identity,
            freeze_covariances: false,
            classical_levels: vec![0.01, 0.05],
            classical_bonferroni: false,
            niw_prior: (1.0, 1.0, 2.0),
            mc_draws: 4_000,
            seed: 0,
        })
    }
}

/// Per-time scored record.
#[derive(Debug, Clone, Serialize)]
pub struct TimePointReport {
    pub t: i64,
    pub log_h: f64,
    pub h: f64,
    pub log_kappa: f64,
    pub kappa: f64,
    pub decision: Decision,
    pub jeffreys_label: String,
    pub mbf: f64,
    pub mbf_alpha: f64,
    /// Integrated BF under the primary and secondary beta weights.
    pub ibf: f64,
    pub ibf_secondary: f64,
    pub nibf: f64,
    pub nibf_secondary: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curve: Option<Vec<BFEvaluation>>,
    /// Flagged entries at this time under the first classical level.
    pub classical_count: usize,
}

/// Full detector output.
#[derive(Debug, Clone, Serialize)]
pub struct DecisionReport {
    pub p: usize,
    pub n: usize,
    pub window: usize,
    pub phi: f64,
    pub regime: DetectorRegime,
    pub calibration: CalibrationResult,
    pub points: Vec<TimePointReport>,
    pub classical: ClassicalReport,
}

impl DecisionReport {
    /// Tidy CSV: one `t,metric,value` row per numeric metric. Decisions are
    /// encoded as -1 (reject), 0 (inconclusive), +1 (accept).
    pub fn write_tidy_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "metric", "value"])?;
        for pt in &self.points {
            let decision_code = match pt.decision {
                Decision::RejectNull => -1.0,
                Decision::Inconclusive => 0.0,
                Decision::AcceptNull => 1.0,
            };
            let rows: [(&str, f64); 12] = [
                ("log_h", pt.log_h),
                ("h", pt.h),
                ("log_kappa", pt.log_kappa),
                ("kappa", pt.kappa),
                ("h_lower", self.calibration.h_lower),
                ("h_upper", self.calibration.h_upper),
                ("decision", decision_code),
                ("mbf", pt.mbf),
                ("ibf", pt.ibf),
                ("nibf", pt.nibf),
                ("classical_count", pt.classical_count as f64),
                ("alpha_star", self.calibration.alpha_star),
            ];
            for (metric, value) in rows {
                wtr.write_record([pt.t.to_string(), metric.to_string(), format!("{value}")])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Optional sensitivity curves as tidy CSV (`t,alpha,log_h,log_kappa`).
    pub fn write_curve_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "alpha", "log_h", "log_kappa"])?;
        for pt in &self.points {
            if let Some(curve) = &pt.curve {
                for ev in curve {
                    wtr.write_record([
                        pt.t.to_string(),
                        format!("{}", ev.alpha),
                        format!("{}", ev.log_h),
                        format!("{}", ev.log_kappa),
                    ])?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Residual row covariance over the window, weighted by `V^-1` across
/// columns, ridge-shrunk to keep it positive definite.
fn estimate_sigma_l(window: &MatrixSeries, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = window.p();
    let y_bar = window.mean()?;
    let chol_v = matdist::cholesky(v, "column covariance")?;
    let mut acc = DMatrix::zeros(p, p);
    for o in window.obs() {
        let r = &o.y - &y_bar;
        // r V^-1 r' = (r L_v^-T)(r L_v^-T)'
        let w = matdist::solve_lower(&chol_v, &r.transpose())?.transpose();
        acc += &w * w.transpose();
    }
    let denom = (window.len() * window.n()) as f64;
    let mut sigma = acc / denom;
    let ridge = COV_RIDGE * sigma.trace() / p as f64;
    for i in 0..p {
        sigma[(i, i)] += ridge;
    }
    let sigma = (&sigma + sigma.transpose()) / 2.0;
    if !crate::core::validate_spd(&sigma, crate::core::SPD_SYMMETRY_TOL)? {
        return Err(Error::Degenerate(
            "estimated row covariance is not positive definite after shrinkage".into(),
        ));
    }
    Ok(sigma)
}

/// Residual column covariance given a row covariance (flip-flop step).
fn estimate_v(window: &MatrixSeries, sigma_l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = window.n();
    let y_bar = window.mean()?;
    let chol_s = matdist::cholesky(sigma_l, "row covariance")?;
    let mut acc = DMatrix::zeros(n, n);
    for o in window.obs() {
        let r = &o.y - &y_bar;
        let w = matdist::solve_lower(&chol_s, &r)?;
        acc += w.transpose() * &w;
    }
    let denom = (window.len() * window.p()) as f64;
    let mut v = acc / denom;
    let ridge = COV_RIDGE * v.trace() / n as f64;
    for i in 0..n {
        v[(i, i)] += ridge;
    }
    let v = (&v + v.transpose()) / 2.0;
    if !crate::core::validate_spd(&v, crate::core::SPD_SYMMETRY_TOL)? {
        return Err(Error::Degenerate(
            "estimated column covariance is not positive definite after shrinkage".into(),
        ));
    }
    Ok(v)
}

fn covariances_for_window(
    window: &MatrixSeries,
    config: &DetectorConfig,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = window.n();
    match (&config.sigma_source, &config.v_source) {
        (SigmaSource::UserSupplied(s), VSource::Identity) => {
            Ok((s.clone(), DMatrix::identity(n, n)))
        }
        (SigmaSource::UserSupplied(s), VSource::UserSupplied(v)) => Ok((s.clone(), v.clone())),
        (SigmaSource::UserSupplied(s), VSource::Estimate) => {
            let v = estimate_v(window, s)?;
            Ok((s.clone(), v))
        }
        (SigmaSource::LeastSquares, VSource::Identity) => {
            let v = DMatrix::identity(n, n);
            Ok((estimate_sigma_l(window, &v)?, v))
        }
        (SigmaSource::LeastSquares, VSource::UserSupplied(v)) => {
            Ok((estimate_sigma_l(window, v)?, v.clone()))
        }
        (SigmaSource::LeastSquares, VSource::Estimate) => {
            // one flip-flop pass starting from the identity column scale
            let v0 = DMatrix::identity(n, n);
            let s1 = estimate_sigma_l(window, &v0)?;
            let v1 = estimate_v(window, &s1)?;
            let s2 = estimate_sigma_l(window, &v1)?;
            Ok((s2, v1))
        }
    }
}

/// Robust summaries of one scored observation.
struct RobustSummaries {
    mbf: f64,
    mbf_alpha: f64,
    ibf: f64,
    ibf_secondary: f64,
    nibf: f64,
    nibf_secondary: f64,
}

fn robust_summaries<F, G>(
    bf: F,
    kappa: G,
    regime: Regime,
    lower: f64,
    means: (f64, f64),
    p: usize,
    n: usize,
) -> Result<RobustSummaries>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let hi = 1.0 - 1e-9;
    let (mbf_alpha, mbf) = robust::minimum_bf(&bf, lower.max(1e-6), hi)?;
    let weight_for = |mean: f64| -> Result<TruncatedBeta> {
        let base = TruncatedBeta::default_for(p, n, mean)?;
        TruncatedBeta::new(base.a, base.b, lower, 1.0)
    };
    let w1 = weight_for(means.0)?;
    let w2 = weight_for(means.1)?;
    let ibf = robust::integrated_bf(&bf, &w1, regime)?.value;
    let ibf_secondary = robust::integrated_bf(&bf, &w2, regime)?.value;
    let nibf = robust::normalized_ibf(&bf, &kappa, &w1, regime)?;
    let nibf_secondary = robust::normalized_ibf(&bf, &kappa, &w2, regime)?;
    Ok(RobustSummaries {
        mbf,
        mbf_alpha,
        ibf,
        ibf_secondary,
        nibf,
        nibf_secondary,
    })
}

/// Run the sequential pipeline over the series.
///
/// For each position past the window, the posterior is fitted on the
/// trailing window with the prior mean carried from the previous window's
/// posterior mean (the first window starts from its own sample mean), the
/// covariances are re-estimated (unless frozen or supplied), and the next
/// observation is scored. Thresholds depend only on `(p, n, phi, window)`
/// in the known-V regime and are calibrated once per run.
pub fn run_sequential(series: &MatrixSeries, config: &DetectorConfig) -> Result<DecisionReport> {
    let (len, w) = (series.len(), config.window);
    if len <= w {
        return Err(Error::domain(format!(
            "series length {len} must exceed the window length {w}"
        )));
    }
    let phi = config.phi.unwrap_or(w as f64);

    let classical = elementwise_scan(
        series,
        ScanTest::Gesd { max_outliers: None },
        &config.classical_levels,
        config.classical_bonferroni,
    )?;

    match config.regime {
        DetectorRegime::KnownV => run_known_v(series, config, phi, classical),
        DetectorRegime::Niw => run_niw(series, config, phi, classical),
    }
}

fn run_known_v(
    series: &MatrixSeries,
    config: &DetectorConfig,
    phi: f64,
    classical: ClassicalReport,
) -> Result<DecisionReport> {
    let (p, n, len, w) = (series.p(), series.n(), series.len(), config.window);
    let mut frozen_cov: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
    let mut prior_mean: Option<DMatrix<f64>> = None;
    let mut calibration: Option<CalibrationResult> = None;
    let mut points = Vec::with_capacity(len - w);

    for pos in w..len {
        let window = series.window(pos - w, pos)?;
        let (sigma_l, v) = match (&frozen_cov, config.freeze_covariances) {
            (Some(c), true) => c.clone(),
            _ => {
                let c = covariances_for_window(&window, config)?;
                if config.freeze_covariances {
                    frozen_cov = Some(c.clone());
                }
                c
            }
        };
        let m0 = prior_mean.clone().unwrap_or(window.mean()?);
        let model = KnownVModel::new(m0, sigma_l, v, phi)?;
        let post = conjugate::update_known_v(&model, &window)?;
        prior_mean = Some(post.m_star.clone());

        let cal = match &calibration {
            Some(c) => c.clone(),
            None => {
                let c = bfdist::calibrate(&post, &model, config.tau, config.beta, (0.05, 0.999))?;
                calibration = Some(c.clone());
                c
            }
        };

        let y = &series.get(pos).y;
        let ev = bayesfactor::bf_known_v(y, &post, &model, cal.alpha_star)?;
        let outcome = bfdist::decide_log(ev.log_h, &cal);

        let bf = |a: f64| {
            bayesfactor::bf_known_v(y, &post, &model, a.clamp(1e-6, 1.0))
                .map(|e| e.log_h.exp())
                .unwrap_or(f64::INFINITY)
        };
        let kap = |a: f64| {
            bayesfactor::log_kappa_known_v(&post, &model, a.clamp(1e-6, 1.0))
                .map(f64::exp)
                .unwrap_or(f64::INFINITY)
        };
        let rs = robust_summaries(
            bf,
            kap,
            Regime::KnownV { p, n },
            0.0,
            config.robust_means,
            p,
            n,
        )?;

        let curve = match &config.alpha_grid {
            Some(grid) => {
                let evs: Result<Vec<BFEvaluation>> = grid
                    .iter()
                    .map(|&a| bayesfactor::bf_known_v(y, &post, &model, a))
                    .collect();
                Some(
                    evs?.into_iter()
                        .map(|mut e| {
                            e.t = series.get(pos).t;
                            e
                        })
                        .collect(),
                )
            }
            None => None,
        };

        points.push(TimePointReport {
            t: series.get(pos).t,
            log_h: ev.log_h,
            h: ev.log_h.exp(),
            log_kappa: ev.log_kappa,
            kappa: ev.log_kappa.exp(),
            decision: outcome.decision,
            jeffreys_label: outcome.jeffreys_label.to_string(),
            mbf: rs.mbf,
            mbf_alpha: rs.mbf_alpha,
            ibf: rs.ibf,
            ibf_secondary: rs.ibf_secondary,
            nibf: rs.nibf,
            nibf_secondary: rs.nibf_secondary,
            curve,
            classical_count: classical.levels[0].per_time_counts[pos],
        });
    }

    Ok(DecisionReport {
        p,
        n,
        window: w,
        phi,
        regime: DetectorRegime::KnownV,
        calibration: calibration.expect("at least one window evaluated"),
        points,
        classical,
    })
}

fn run_niw(
    series: &MatrixSeries,
    config: &DetectorConfig,
    phi: f64,
    classical: ClassicalReport,
) -> Result<DecisionReport> {
    let (p, n, len, w) = (series.p(), series.n(), series.len(), config.window);
    let (rho, psi_scale, extra_dof) = config.niw_prior;
    let m_dof = 2.0 * n as f64 + 1.0 + extra_dof;
    let mut frozen_sigma: Option<DMatrix<f64>> = None;
    let mut prior_mean: Option<DMatrix<f64>> = None;
    let mut calibration: Option<CalibrationResult> = None;
    let mut points = Vec::with_capacity(len - w);

    for pos in w..len {
        let window = series.window(pos - w, pos)?;
        let sigma_l = match (
            &frozen_sigma,
            config.freeze_covariances,
            &config.sigma_source,
        ) {
            (Some(s), true, _) => s.clone(),
            (_, _, SigmaSource::UserSupplied(s)) => s.clone(),
            _ => {
                let v0 = nalgebra::DMatrix::identity(n, n);
                let s = estimate_sigma_l(&window, &v0)?;
                if config.freeze_covariances {
                    frozen_sigma = Some(s.clone());
                }
                s
            }
        };
        let m0 = prior_mean.clone().unwrap_or(window.mean()?);
        let model = NIWModel::new(
            m0,
            sigma_l,
            phi,
            rho,
            DMatrix::identity(n, n) * psi_scale,
            m_dof,
        )?;
        let post = conjugate::update_niw(&model, &window)?;
        prior_mean = Some(post.m_star.clone());

        let low = conjugate::alpha_low(p, n, post.m_star_dof + p as f64);
        let cal = match &calibration {
            Some(c) => c.clone(),
            None => {
                let c = bfdist::calibrate_unknown_v_mc(
                    &post,
                    &model,
                    config.tau,
                    config.beta,
                    (low + 1e-3, 0.999),
                    config.mc_draws,
                    config.seed,
                )?;
                calibration = Some(c.clone());
                c
            }
        };

        let y = &series.get(pos).y;
        let ev = bayesfactor::bf_unknown_v(y, &post, &model, cal.alpha_star.max(low + 1e-6))?;
        let outcome = bfdist::decide_log(ev.log_h, &cal);

        let clamp = move |a: f64| a.clamp(low + 1e-6, 1.0);
        let bf = |a: f64| {
            bayesfactor::bf_unknown_v(y, &post, &model, clamp(a))
                .map(|e| e.log_h.exp())
                .unwrap_or(f64::INFINITY)
        };
        let kap = |a: f64| {
            bayesfactor::log_kappa_unknown_v(&post, &model, clamp(a))
                .map(f64::exp)
                .unwrap_or(f64::INFINITY)
        };
        let m_d = post.m_star_dof + p as f64;
        let rs = robust_summaries(
            bf,
            kap,
            Regime::UnknownV { p, n, m_d },
            low + 1e-4,
            config.robust_means,
            p,
            n,
        )?;

        let curve = match &config.alpha_grid {
            Some(grid) => {
                let evs: Result<Vec<BFEvaluation>> = grid
                    .iter()
                    .filter(|&&a| a > low)
                    .map(|&a| bayesfactor::bf_unknown_v(y, &post, &model, a))
                    .collect();
                Some(
                    evs?.into_iter()
                        .map(|mut e| {
                            e.t = series.get(pos).t;
                            e
                        })
                        .collect(),
                )
            }
            None => None,
        };

        points.push(TimePointReport {
            t: series.get(pos).t,
            log_h: ev.log_h,
            h: ev.log_h.exp(),
            log_kappa: ev.log_kappa,
            kappa: ev.log_kappa.exp(),
            decision: outcome.decision,
            jeffreys_label: outcome.jeffreys_label.to_string(),
            mbf: rs.mbf,
            mbf_alpha: rs.mbf_alpha,
            ibf: rs.ibf,
            ibf_secondary: rs.ibf_secondary,
            nibf: rs.nibf,
            nibf_secondary: rs.nibf_secondary,
            curve,
            classical_count: classical.levels[0].per_time_counts[pos],
        });
    }

    Ok(DecisionReport {
        p,
        n,
        window: w,
        phi,
        regime: DetectorRegime::Niw,
        calibration: calibration.expect("at least one window evaluated"),
        points,
        classical,
    })
}

/// Bayes factor and bound over a discount grid at one evaluable position,
/// for sensitivity plots.
pub fn bf_alpha_curve(
    series: &MatrixSeries,
    config: &DetectorConfig,
    pos: usize,
    grid: &[f64],
) -> Result<Vec<BFEvaluation>> {
    let (len, w) = (series.len(), config.window);
    if pos < w || pos >= len {
        return Err(Error::domain(format!(
            "position {pos} must lie in [{w}, {len}) to be evaluable"
        )));
    }
    let phi = config.phi.unwrap_or(w as f64);
    let window = series.window(pos - w, pos)?;
    let (sigma_l, v) = covariances_for_window(&window, config)?;
    let model = KnownVModel::new(window.mean()?, sigma_l, v, phi)?;
    let post = conjugate::update_known_v(&model, &window)?;
    let y = &series.get(pos).y;
    grid.iter()
        .map(|&a| {
            let mut ev = bayesfactor::bf_known_v(y, &post, &model, a)?;
            ev.t = series.get(pos).t;
            Ok(ev)
        })
        .collect()
}
