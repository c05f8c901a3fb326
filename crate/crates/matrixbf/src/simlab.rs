//! Size/power simulation protocol: scenario generation with planted
//! outliers, replicated detection runs, and the three-outcome probability
//! estimators.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bfdist::{self, CalibrationResult};
use crate::conjugate;
use crate::core::{KnownVModel, MatrixObs, MatrixSeries};
use crate::error::{Error, Result};
use crate::matdist::{matnorm_draw, MatNormParams};
use crate::parallel;

/// Placement of the planted outlier entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MaskKind {
    /// Every entry of the matrix.
    AllEntries,
    /// The intersection of `rows` random rows and `cols` random columns.
    RowColPattern { rows: usize, cols: usize },
    /// `count` entries drawn uniformly without replacement.
    RandomEntries { count: usize },
}

/// One simulation cell.
#[derive(Debug, Clone, Serialize)]
pub struct Scenario {
    pub p: usize,
    pub n: usize,
    /// Series length (the reference protocol uses 100).
    pub t_len: usize,
    /// 1-based position of the contaminated observation (reference: 80).
    pub outlier_time: usize,
    /// Outlier magnitude added to the masked entries.
    pub u: f64,
    pub mask: MaskKind,
    pub replications: usize,
    pub seed: u64,
}

impl Scenario {
    /// Case 1 of the reference protocol: a moderate 30 x 10 matrix.
    pub fn case1(u: f64, mask: MaskKind, replications: usize, seed: u64) -> Self {
        Scenario {
            p: 30,
            n: 10,
            t_len: 100,
            outlier_time: 80,
            u,
            mask,
            replications,
            seed,
        }
    }

    /// Case 2: a large 50 x 50 matrix.
    pub fn case2(u: f64, mask: MaskKind, replications: usize, seed: u64) -> Self {
        Scenario {
            p: 50,
            n: 50,
            t_len: 100,
            outlier_time: 80,
            u,
            mask,
            replications,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.p == 0 || self.n == 0 || self.t_len < 3 {
            return Err(Error::domain("scenario shape or length too small"));
        }
        if self.outlier_time == 0 || self.outlier_time > self.t_len {
            return Err(Error::domain("outlier time outside the series"));
        }
        if self.replications == 0 {
            return Err(Error::domain("at least one replication required"));
        }
        match self.mask {
            MaskKind::RowColPattern { rows, cols } => {
                if rows == 0 || rows > self.p || cols == 0 || cols > self.n {
                    return Err(Error::domain("mask pattern outside the matrix shape"));
                }
            }
            MaskKind::RandomEntries { count } => {
                if count == 0 || count > self.p * self.n {
                    return Err(Error::domain("mask entry count outside the matrix size"));
                }
            }
            MaskKind::AllEntries => {}
        }
        Ok(())
    }
}

/// Binary outlier mask drawn according to the scenario's mask kind.
pub fn draw_mask(sc: &Scenario, rng: &mut impl Rng) -> DMatrix<f64> {
    match sc.mask {
        MaskKind::AllEntries => DMatrix::from_element(sc.p, sc.n, 1.0),
        MaskKind::RowColPattern { rows, cols } => {
            let rs = sample_without_replacement(sc.p, rows, rng);
            let cs = sample_without_replacement(sc.n, cols, rng);
            let mut m = DMatrix::zeros(sc.p, sc.n);
            for &i in &rs {
                for &j in &cs {
                    m[(i, j)] = 1.0;
                }
            }
            m
        }
        MaskKind::RandomEntries { count } => {
            let picks = sample_without_replacement(sc.p * sc.n, count, rng);
            let mut m = DMatrix::zeros(sc.p, sc.n);
            for &k in &picks {
                m[(k / sc.n, k % sc.n)] = 1.0;
            }
            m
        }
    }
}

fn sample_without_replacement(pool: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    // partial Fisher-Yates
    let mut idx: Vec<usize> = (0..pool).collect();
    for i in 0..k {
        let j = rng.gen_range(i..pool);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Parameters and data of one generated replication.
pub struct GeneratedReplication {
    pub series: MatrixSeries,
    pub mean: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub mask: DMatrix<f64>,
}

/// Generate one replication: random mean and covariance factors, an i.i.d.
/// matrix-normal noise sequence, and the planted outlier `u * R` at the
/// scenario's outlier time (skipped when `u = 0`).
pub fn generate_scenario(sc: &Scenario, rng: &mut ChaCha8Rng) -> Result<GeneratedReplication> {
    sc.validate()?;
    let (p, n) = (sc.p, sc.n);
    let std_mat = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
        })
    };
    let mean = std_mat(p, n, rng);
    let s = std_mat(p, p, rng);
    let sigma = &s * s.transpose() + DMatrix::identity(p, p) * 1e-8;
    let g = std_mat(n, n, rng);
    let psi = &g * g.transpose() + DMatrix::identity(n, n) * 1e-8;
    let mask = draw_mask(sc, rng);

    let noise = MatNormParams::new(DMatrix::zeros(p, n), sigma.clone(), psi.clone())?;
    let mut obs = Vec::with_capacity(sc.t_len);
    for t in 1..=sc.t_len {
        let mut y = &mean + matnorm_draw(&noise, rng)?;
        if t == sc.outlier_time && sc.u != 0.0 {
            y += &mask * sc.u;
        }
        obs.push(MatrixObs { t: t as i64, y });
    }
    Ok(GeneratedReplication {
        series: MatrixSeries::from_obs(p, n, obs)?,
        mean,
        sigma,
        psi,
        mask,
    })
}

/// Estimated decision probabilities for one sampling condition.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ProbabilityTriple {
    /// `P(H > h_upper)` (accept).
    pub p_accept: f64,
    /// `P(h_lower < H < h_upper)` (inconclusive).
    pub p_inconclusive: f64,
    /// `P(H < h_lower)` (reject).
    pub p_reject: f64,
    /// Number of Bayes factors behind the estimates.
    pub count: usize,
}

impl ProbabilityTriple {
    fn from_logs(logs: &[f64], cal: &CalibrationResult) -> Self {
        let (lo, hi) = (cal.h_lower.ln(), cal.h_upper.ln());
        let reject = logs.iter().filter(|&&lh| lh < lo).count();
        let accept = logs.iter().filter(|&&lh| lh > hi).count();
        let total = logs.len();
        ProbabilityTriple {
            p_accept: accept as f64 / total as f64,
            p_inconclusive: (total - accept - reject) as f64 / total as f64,
            p_reject: reject as f64 / total as f64,
            count: total,
        }
    }

    /// Binomial standard error for one of the three estimates.
    pub fn standard_error(&self, prob: f64) -> f64 {
        (prob * (1.0 - prob) / self.count as f64).sqrt()
    }
}

/// Size/power estimates for one scenario cell.
#[derive(Debug, Clone, Serialize)]
pub struct PowerTable {
    pub scenario: Scenario,
    pub calibration: CalibrationResult,
    /// Estimates at the outlier time (one Bayes factor per replication).
    pub alternative: ProbabilityTriple,
    /// Estimates pooled over the clean scored times of every replication.
    pub null: ProbabilityTriple,
}

impl PowerTable {
    /// CSV in the reference layout: probability rows, condition columns.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["probability", "null", "alternative"])?;
        let rows = [
            (
                "P(H>h_upper)",
                self.null.p_accept,
                self.alternative.p_accept,
            ),
            (
                "P(h_lower<H<h_upper)",
                self.null.p_inconclusive,
                self.alternative.p_inconclusive,
            ),
            (
                "P(H<h_lower)",
                self.null.p_reject,
                self.alternative.p_reject,
            ),
        ];
        for (name, h0, h1) in rows {
            wtr.write_record([name.to_string(), format!("{h0}"), format!("{h1}")])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Thresholds for the simulation protocol: the production posterior after
/// `t_train` observations with prior precision `phi = t_train`, which
/// collapses the Bayes factor distribution regardless of the covariances.
pub fn calibrate_for_scenario(sc: &Scenario, tau: f64, beta: f64) -> Result<CalibrationResult> {
    let t_train = sc.outlier_time - 1;
    let phi = t_train as f64;
    let model = KnownVModel::new(
        DMatrix::zeros(sc.p, sc.n),
        DMatrix::identity(sc.p, sc.p),
        DMatrix::identity(sc.n, sc.n),
        phi,
    )?;
    let post =
        conjugate::update_known_v_from_stats(&model, Some(&DMatrix::zeros(sc.p, sc.n)), t_train)?;
    bfdist::calibrate(&post, &model, tau, beta, (0.05, 0.999))
}

/// Run the replications and estimate the decision probabilities.
///
/// Each replication fits the posterior on the observations before the
/// outlier time (prior mean at the training sample mean, prior precision
/// equal to the training count, true covariances treated as given) and then
/// scores every later observation against the calibrated thresholds. The
/// outlier-time Bayes factors form the alternative cell; the remaining
/// scored times are pooled as the null cell.
pub fn estimate_probabilities(sc: &Scenario, tau: f64, beta: f64) -> Result<PowerTable> {
    sc.validate()?;
    if sc.outlier_time < 3 || sc.outlier_time == sc.t_len {
        return Err(Error::domain(
            "the outlier time must leave room for training before and scoring after",
        ));
    }
    let cal = calibrate_for_scenario(sc, tau, beta)?;

    // pre-derived replication seeds keep the parallel run deterministic
    let mut master = ChaCha8Rng::seed_from_u64(sc.seed);
    let seeds: Vec<u64> = (0..sc.replications).map(|_| master.gen()).collect();

    let per_rep: Vec<Result<(f64, Vec<f64>)>> = parallel::map_collect(&seeds, |&seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rep = generate_scenario(sc, &mut rng)?;
        let t_train = sc.outlier_time - 1;
        let training = rep.series.window(0, t_train)?;
        let model = KnownVModel::new(
            training.mean()?,
            rep.sigma.clone(),
            rep.psi.clone(),
            t_train as f64,
        )?;
        let post = conjugate::update_known_v(&model, &training)?;
        let mut alt = f64::NAN;
        let mut null_logs = Vec::with_capacity(sc.t_len - sc.outlier_time);
        for pos in t_train..sc.t_len {
            let ev = crate::bayesfactor::bf_known_v(
                &rep.series.get(pos).y,
                &post,
                &model,
                cal.alpha_star,
            )?;
            if pos + 1 == sc.outlier_time {
                alt = ev.log_h;
            } else {
                null_logs.push(ev.log_h);
            }
        }
        Ok((alt, null_logs))
    });

    let mut alt_logs = Vec::with_capacity(sc.replications);
    let mut null_logs = Vec::new();
    for r in per_rep {
        let (alt, nulls) = r?;
        alt_logs.push(alt);
        null_logs.extend(nulls);
    }
    Ok(PowerTable {
        scenario: sc.clone(),
        calibration: cal.clone(),
        alternative: ProbabilityTriple::from_logs(&alt_logs, &cal),
        null: ProbabilityTriple::from_logs(&null_logs, &cal),
    })
}
