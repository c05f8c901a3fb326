//! The Bayes factor `H_t(alpha)`, its data-free upper bound `kappa_t(alpha)`,
//! normalizing constants, derivatives in `alpha`, and the acceptance
//! ellipsoid, for both inference regimes.
//!
//! All arithmetic runs in log space; `H` and `kappa` are exposed both as logs
//! (primary representation) and linear values, which may overflow to
//! infinity near the lower end of the discount domain at large `p`, `n`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::conjugate::alpha_low;
use crate::core::{KnownVModel, NIWModel, PosteriorKnownV, PosteriorNIW};
use crate::error::{Error, Result};
use crate::matdist::{self, log_multigamma, multidigamma_sum};

/// Smallest discount evaluated in the known-V regime; the analytic limit
/// `alpha -> 0+` is not a computable endpoint.
pub const ALPHA_MIN_KNOWN_V: f64 = 1e-6;
/// Offset above `alpha_low` enforced in the unknown-V regime.
pub const ALPHA_MARGIN_UNKNOWN_V: f64 = 1e-6;

/// One Bayes factor evaluation at `(t, alpha)`.
#[derive(Debug, Clone, Serialize)]
pub struct BFEvaluation {
    pub t: i64,
    pub alpha: f64,
    pub log_h: f64,
    pub log_kappa: f64,
}

impl BFEvaluation {
    pub fn h(&self) -> f64 {
        self.log_h.exp()
    }
    pub fn kappa(&self) -> f64 {
        self.log_kappa.exp()
    }
}

fn check_alpha_known_v(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::domain(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    Ok(alpha.max(ALPHA_MIN_KNOWN_V))
}

/// `log kappa` for the known-V regime, `(n/2) (log|Sigma_Ad| - log|Sigma_d|)`.
pub fn log_kappa_known_v(post: &PosteriorKnownV, model: &KnownVModel, alpha: f64) -> Result<f64> {
    let alpha = check_alpha_known_v(alpha)?;
    let n = model.n() as f64;
    let sigma_d = &model.sigma_l + &post.sigma_star;
    let sigma_ad = &model.sigma_l + &post.sigma_star / alpha;
    let ld_d = matdist::log_det(&matdist::cholesky(&sigma_d, "null predictive scale")?);
    let ld_ad = matdist::log_det(&matdist::cholesky(
        &sigma_ad,
        "alternative predictive scale",
    )?);
    Ok(0.5 * n * (ld_ad - ld_d))
}

/// Data-free upper bound on the Bayes factor, known-V regime.
pub fn kappa_known_v(post: &PosteriorKnownV, model: &KnownVModel, alpha: f64) -> Result<f64> {
    Ok(log_kappa_known_v(post, model, alpha)?.exp())
}

/// `tr[Sigma^-1 E V^-1 E'] = || L_sigma^-1 E L_v^-T ||_F^2`
fn quad_form_trace(sigma: &DMatrix<f64>, e: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<f64> {
    let chol_s = matdist::cholesky(sigma, "predictive scale")?;
    let chol_v = matdist::cholesky(v, "column covariance")?;
    let a = matdist::solve_lower(&chol_s, e)?;
    let w = matdist::solve_lower(&chol_v, &a.transpose())?;
    Ok(w.norm_squared())
}

/// Bayes factor for a single observation under the known-V regime.
pub fn bf_known_v(
    y: &DMatrix<f64>,
    post: &PosteriorKnownV,
    model: &KnownVModel,
    alpha: f64,
) -> Result<BFEvaluation> {
    let alpha = check_alpha_known_v(alpha)?;
    let (p, n) = (model.p(), model.n());
    if y.nrows() != p || y.ncols() != n {
        return Err(Error::shape(format!(
            "observation is {}x{}, model is {p}x{n}",
            y.nrows(),
            y.ncols()
        )));
    }
    let log_kappa = log_kappa_known_v(post, model, alpha)?;
    let e = y - &post.m_star;
    let sigma_d = &model.sigma_l + &post.sigma_star;
    let sigma_ad = &model.sigma_l + &post.sigma_star / alpha;
    let q_d = quad_form_trace(&sigma_d, &e, &model.v)?;
    let q_ad = quad_form_trace(&sigma_ad, &e, &model.v)?;
    let log_h = log_kappa - 0.5 * (q_d - q_ad);
    Ok(BFEvaluation {
        t: post.t_count as i64,
        alpha,
        log_h,
        log_kappa,
    })
}

/// Inverse normalizing constant of the discounted posterior, known-V regime
/// (returned as `log C`).
pub fn norm_const_known_v(post: &PosteriorKnownV, model: &KnownVModel, alpha: f64) -> Result<f64> {
    let alpha = check_alpha_known_v(alpha)?;
    let (p, n) = (model.p() as f64, model.n() as f64);
    let ld_star = matdist::log_det(&matdist::cholesky(&post.sigma_star, "posterior scale")?);
    let ld_v = matdist::log_det(&matdist::cholesky(&model.v, "column covariance")?);
    Ok(0.5 * n * p * alpha.ln()
        + 0.5 * (alpha - 1.0) * n * p * matdist::LN_2PI
        + 0.5 * (alpha - 1.0) * n * ld_star
        + 0.5 * (alpha - 1.0) * p * ld_v)
}

/// Derivative of the known-V Bayes factor in `alpha`, from the trace
/// expansion of the bound and the quadratic form.
pub fn bf_derivative_known_v(
    y: &DMatrix<f64>,
    post: &PosteriorKnownV,
    model: &KnownVModel,
    alpha: f64,
) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain(format!(
            "derivative needs alpha in (0, 1), got {alpha}"
        )));
    }
    let n = model.n() as f64;
    let e = y - &post.m_star;
    let sigma_d = &model.sigma_l + &post.sigma_star;
    let b_tilde = &model.sigma_l * alpha + &post.sigma_star;
    let chol_d = matdist::cholesky(&sigma_d, "null predictive scale")?;
    let chol_b = matdist::cholesky(&b_tilde, "discount-mixed scale")?;
    let chol_v = matdist::cholesky(&model.v, "column covariance")?;
    // A~ = E V^-1 E'
    let evt = matdist::solve_lower(&chol_v, &e.transpose())?;
    let a_tilde = evt.transpose() * &evt;
    let m1 = chol_d.solve(&post.sigma_star); // Sigma_d^-1 Sigma*
    let m2 = chol_b.solve(&a_tilde); // B~^-1 A~
    let m3 = chol_b.solve(&model.sigma_l); // B~^-1 Sigma_L
    let t1 = -n * matdist::trace_solve(&chol_b, &post.sigma_star);
    let t2 = alpha * (&m1 * &m2).trace();
    let t3 = alpha * (1.0 - alpha) * (&m1 * &m3 * &m2).trace();
    let h = bf_known_v(y, post, model, alpha)?.log_h.exp();
    Ok(h / (2.0 * alpha) * (t1 + t2 + t3))
}

fn check_alpha_unknown_v(alpha: f64, low: f64) -> Result<f64> {
    if !(alpha > low && alpha <= 1.0) {
        return Err(Error::domain(format!(
            "alpha must lie in (alpha_low, 1] with alpha_low = {low}, got {alpha}"
        )));
    }
    Ok(alpha.max(low + ALPHA_MARGIN_UNKNOWN_V).min(1.0))
}

/// Scalar bookkeeping shared by the unknown-V bound and Bayes factor.
struct NiwScalars {
    k_star: f64,
    k_d: f64,
    k_a_star: f64,
    k_a_d: f64,
    m_star: f64,
    m_d: f64,
    m_a_star: f64,
    m_a_d: f64,
    n: usize,
    p: usize,
}

impl NiwScalars {
    fn new(post: &PosteriorNIW, model: &NIWModel, alpha: f64) -> Self {
        let (p, n) = (model.p(), model.n());
        let m_d = post.m_star_dof + p as f64;
        NiwScalars {
            k_star: post.k_star,
            k_d: post.k_star + 1.0,
            k_a_star: alpha * post.k_star,
            k_a_d: alpha * post.k_star + 1.0,
            m_star: post.m_star_dof,
            m_d,
            m_a_star: alpha * m_d - p as f64,
            m_a_d: alpha * m_d,
            n,
            p,
        }
    }

    fn half(&self, x: f64) -> f64 {
        (x - self.n as f64 - 1.0) / 2.0
    }

    fn log_kappa(&self) -> Result<f64> {
        let np = (self.n * self.p) as f64;
        Ok(
            0.5 * np * (self.k_star.ln() + self.k_a_d.ln() - self.k_d.ln() - self.k_a_star.ln())
                + log_multigamma(self.n, self.half(self.m_d))?
                + log_multigamma(self.n, self.half(self.m_a_star))?
                - log_multigamma(self.n, self.half(self.m_star))?
                - log_multigamma(self.n, self.half(self.m_a_d))?,
        )
    }
}

/// `log kappa` for the unknown-V regime; diverges as `alpha` approaches
/// `(p + 2n)/m_d` from above.
pub fn log_kappa_unknown_v(post: &PosteriorNIW, model: &NIWModel, alpha: f64) -> Result<f64> {
    let low = alpha_low(model.p(), model.n(), post.m_star_dof + model.p() as f64);
    let alpha = check_alpha_unknown_v(alpha, low)?;
    NiwScalars::new(post, model, alpha).log_kappa()
}

/// Data-free upper bound on the Bayes factor, unknown-V regime.
pub fn kappa_unknown_v(post: &PosteriorNIW, model: &NIWModel, alpha: f64) -> Result<f64> {
    Ok(log_kappa_unknown_v(post, model, alpha)?.exp())
}

/// Column scatter of the centered observation, `(M* - Y)' Sigma_L^-1 (M* - Y)`.
fn column_scatter(
    y: &DMatrix<f64>,
    post_mean: &DMatrix<f64>,
    sigma_l: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let chol = matdist::cholesky(sigma_l, "likelihood row covariance")?;
    let w = matdist::solve_lower(&chol, &(post_mean - y))?;
    Ok(w.transpose() * &w)
}

/// Bayes factor for a single observation under the unknown-V regime.
pub fn bf_unknown_v(
    y: &DMatrix<f64>,
    post: &PosteriorNIW,
    model: &NIWModel,
    alpha: f64,
) -> Result<BFEvaluation> {
    let (p, n) = (model.p(), model.n());
    if y.nrows() != p || y.ncols() != n {
        return Err(Error::shape("observation shape mismatch"));
    }
    let low = alpha_low(p, n, post.m_star_dof + p as f64);
    let alpha = check_alpha_unknown_v(alpha, low)?;
    let s = NiwScalars::new(post, model, alpha);
    let log_kappa = s.log_kappa()?;

    let e_scatter = column_scatter(y, &post.m_star, &model.sigma_l)?;
    let psi_d = &post.psi_star + &e_scatter * (s.k_star / s.k_d);
    let psi_a_d = &post.psi_star * alpha + &e_scatter * (s.k_a_star / s.k_a_d);
    let ld_star = matdist::log_det(&matdist::cholesky(&post.psi_star, "posterior Psi")?);
    let ld_d = matdist::log_det(&matdist::cholesky(&psi_d, "null Psi update")?);
    let ld_a_d = matdist::log_det(&matdist::cholesky(&psi_a_d, "alternative Psi update")?);
    let ld_a_star = n as f64 * alpha.ln() + ld_star;

    // log G carries the Psi* powers; the data enters via the Psi_d ratio.
    let log_g = log_kappa + s.half(s.m_star) * ld_star - s.half(s.m_a_star) * ld_a_star;
    let log_h = log_g + s.half(s.m_a_d) * ld_a_d - s.half(s.m_d) * ld_d;
    Ok(BFEvaluation {
        t: post.t_count as i64,
        alpha,
        log_h,
        log_kappa,
    })
}

/// Inverse normalizing constant of the discounted posterior, unknown-V
/// regime (returned as `log C`).
pub fn norm_const_unknown_v(post: &PosteriorNIW, model: &NIWModel, alpha: f64) -> Result<f64> {
    let (p, n) = (model.p(), model.n());
    let low = alpha_low(p, n, post.m_star_dof + p as f64);
    let alpha = check_alpha_unknown_v(alpha, low)?;
    let s = NiwScalars::new(post, model, alpha);
    let (pf, nf) = (p as f64, n as f64);
    let ld_psi = matdist::log_det(&matdist::cholesky(&post.psi_star, "posterior Psi")?);
    let sigma_star = &model.sigma_l / post.k_star;
    let ld_sigma_star = matdist::log_det(&matdist::cholesky(&sigma_star, "posterior row scale")?);
    let ld_psi_a = nf * alpha.ln() + ld_psi;
    let ld_sigma_a = ld_sigma_star - pf * alpha.ln();
    Ok(s.half(s.m_a_star) * ld_psi_a
        + 0.5 * alpha * nf * pf * matdist::LN_2PI
        + 0.5 * alpha * nf * ld_sigma_star
        + alpha * s.half(s.m_star) * nf * std::f64::consts::LN_2
        + alpha * log_multigamma(n, s.half(s.m_star))?
        - 0.5 * nf * pf * matdist::LN_2PI
        - 0.5 * nf * ld_sigma_a
        - s.half(s.m_a_star) * nf * std::f64::consts::LN_2
        - log_multigamma(n, s.half(s.m_a_star))?
        - alpha * s.half(s.m_star) * ld_psi)
}

/// Derivative of the unknown-V Bayes factor in `alpha`, evaluated through the
/// log-derivative of the product-rule factors to avoid overflow.
pub fn bf_derivative_unknown_v(
    y: &DMatrix<f64>,
    post: &PosteriorNIW,
    model: &NIWModel,
    alpha: f64,
) -> Result<f64> {
    let (p, n) = (model.p(), model.n());
    let low = alpha_low(p, n, post.m_star_dof + p as f64);
    if !(alpha > low && alpha < 1.0) {
        return Err(Error::domain(format!(
            "derivative needs alpha in (alpha_low, 1) with alpha_low = {low}, got {alpha}"
        )));
    }
    let s = NiwScalars::new(post, model, alpha);
    let (pf, nf) = (p as f64, n as f64);
    let np = pf * nf;

    let e_scatter = column_scatter(y, &post.m_star, &model.sigma_l)?;
    let psi_a_d = &post.psi_star * alpha + &e_scatter * (s.k_a_star / s.k_a_d);
    let chol_a_d = matdist::cholesky(&psi_a_d, "alternative Psi update")?;
    let ld_a_d = matdist::log_det(&chol_a_d);
    let ld_star = matdist::log_det(&matdist::cholesky(&post.psi_star, "posterior Psi")?);
    let ld_a_star = nf * alpha.ln() + ld_star;

    let dlog_g = 0.5 * np * (s.k_star / s.k_a_d - 1.0 / alpha)
        + 0.5 * s.m_d * multidigamma_sum(n, s.half(s.m_a_star))?
        - 0.5 * s.m_d * multidigamma_sum(n, s.half(s.m_a_d))?
        - 0.5 * s.m_d * ld_a_star
        - s.half(s.m_a_star) * nf / alpha;

    let dpsi_a_d = &post.psi_star + &e_scatter * (s.k_star / (s.k_a_d * s.k_a_d));
    let dld_a_d = chol_a_d.solve(&dpsi_a_d).trace();
    let dlog_h = dlog_g + 0.5 * s.m_d * ld_a_d + s.half(s.m_a_d) * dld_a_d;

    let h = bf_unknown_v(y, post, model, alpha)?.log_h.exp();
    Ok(h * dlog_h)
}

/// Acceptance region of the known-V test: the set of observations with
/// `H(alpha) >= h0`, an ellipsoid centered at the posterior mean.
#[derive(Debug, Clone, Serialize)]
pub struct Ellipsoid {
    /// Row-major flattening of the posterior mean.
    pub center: Vec<f64>,
    /// Squared radius `2 log(kappa / h0)` in the standardized metric.
    pub radius_sq: f64,
    pub axes: Vec<EllipsoidAxis>,
    #[serde(skip)]
    sigma_h_inv: DMatrix<f64>,
    #[serde(skip)]
    v: DMatrix<f64>,
    #[serde(skip)]
    m_star: DMatrix<f64>,
}

/// One principal axis: the Kronecker eigenvalue of the row/column mode pair,
/// the full axis length `2 sqrt(radius_sq * eigenvalue)`, and the indices of
/// the contributing eigenvectors.
#[derive(Debug, Clone, Serialize)]
pub struct EllipsoidAxis {
    pub eigenvalue: f64,
    pub length: f64,
    pub row_mode: usize,
    pub col_mode: usize,
}

impl Ellipsoid {
    /// Membership test: `tr[Sigma_H^-1 (Y-M*) V^-1 (Y-M*)'] <= radius_sq`,
    /// with a small boundary tolerance.
    pub fn contains(&self, y: &DMatrix<f64>) -> Result<bool> {
        let e = y - &self.m_star;
        let chol_v = matdist::cholesky(&self.v, "column covariance")?;
        let sol = chol_v.solve(&e.transpose());
        let quad = (&self.sigma_h_inv * &e * sol).trace();
        Ok(quad <= self.radius_sq + 1e-9)
    }
}

/// Build the acceptance ellipsoid for threshold `0 < h0 <= kappa(alpha)`.
///
/// `h0 = kappa` degenerates to the single point `M*`; `h0 > kappa` is an
/// empty region and errors. The `p n x p n` Kronecker structure is kept
/// factored: axes pair the eigen modes of the standardized row scale and of
/// the column covariance.
pub fn acceptance_ellipsoid(
    post: &PosteriorKnownV,
    model: &KnownVModel,
    alpha: f64,
    h0: f64,
) -> Result<Ellipsoid> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain(format!(
            "ellipsoid needs alpha in (0, 1), got {alpha}"
        )));
    }
    if !(h0 > 0.0) {
        return Err(Error::domain("threshold h0 must be positive"));
    }
    let kappa = kappa_known_v(post, model, alpha)?;
    if h0 > kappa {
        return Err(Error::domain(format!(
            "empty acceptance region: h0 = {h0} exceeds kappa = {kappa}"
        )));
    }
    let sigma_d = &model.sigma_l + &post.sigma_star;
    let sigma_ad = &model.sigma_l + &post.sigma_star / alpha;
    let chol_d = matdist::cholesky(&sigma_d, "null predictive scale")?;
    let chol_ad = matdist::cholesky(&sigma_ad, "alternative predictive scale")?;
    let p = model.p();
    let eye = DMatrix::identity(p, p);
    let s_inv = chol_d.solve(&eye) - chol_ad.solve(&eye);
    let s_inv = (&s_inv + s_inv.transpose()) / 2.0;

    let radius_sq = 2.0 * (kappa / h0).ln();
    // eigenvalues of Sigma_H are reciprocals of those of its inverse
    let eig_s = nalgebra::SymmetricEigen::new(s_inv.clone());
    let eig_v = nalgebra::SymmetricEigen::new(model.v.clone());
    let mut axes = Vec::with_capacity(p * model.n());
    for i in 0..p {
        if !(eig_s.eigenvalues[i] > 0.0) {
            return Err(Error::Degenerate(
                "standardized scale is not positive definite".into(),
            ));
        }
        let gamma = 1.0 / eig_s.eigenvalues[i];
        for j in 0..model.n() {
            let xi = gamma * eig_v.eigenvalues[j];
            axes.push(EllipsoidAxis {
                eigenvalue: xi,
                length: 2.0 * (radius_sq * xi).max(0.0).sqrt(),
                row_mode: i,
                col_mode: j,
            });
        }
    }
    let mut center = Vec::with_capacity(p * model.n());
    for i in 0..p {
        for j in 0..model.n() {
            center.push(post.m_star[(i, j)]);
        }
    }
    Ok(Ellipsoid {
        center,
        radius_sq,
        axes,
        sigma_h_inv: s_inv,
        v: model.v.clone(),
        m_star: post.m_star.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{MatrixObs, MatrixSeries};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_spd(dim: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        &a * a.transpose() + DMatrix::identity(dim, dim) * 0.4
    }

    fn setup_known_v(
        p: usize,
        n: usize,
        t: usize,
        rng: &mut impl Rng,
    ) -> (KnownVModel, PosteriorKnownV) {
        let model = KnownVModel::new(
            DMatrix::from_fn(p, n, |_, _| rng.gen::<f64>() - 0.5),
            random_spd(p, rng),
            random_spd(n, rng),
            0.5 + rng.gen::<f64>() * 3.0,
        )
        .unwrap();
        let obs = (0..t)
            .map(|i| MatrixObs {
                t: i as i64 + 1,
                y: DMatrix::from_fn(p, n, |_, _| rng.gen::<f64>()),
            })
            .collect();
        let series = MatrixSeries::from_obs(p, n, obs).unwrap();
        let post = crate::conjugate::update_known_v(&model, &series).unwrap();
        (model, post)
    }

    fn setup_niw(p: usize, n: usize, t: usize, rng: &mut impl Rng) -> (NIWModel, PosteriorNIW) {
        let model = NIWModel::new(
            DMatrix::from_fn(p, n, |_, _| rng.gen::<f64>() - 0.5),
            random_spd(p, rng),
            1.0 + rng.gen::<f64>(),
            1.0,
            random_spd(n, rng),
            2.0 * n as f64 + 4.0 + rng.gen::<f64>() * 4.0,
        )
        .unwrap();
        let obs = (0..t)
            .map(|i| MatrixObs {
                t: i as i64 + 1,
                y: DMatrix::from_fn(p, n, |_, _| rng.gen::<f64>()),
            })
            .collect();
        let series = MatrixSeries::from_obs(p, n, obs).unwrap();
        let post = crate::conjugate::update_niw(&model, &series).unwrap();
        (model, post)
    }

    #[test]
    fn known_v_alpha_one_is_unit() {
        let mut rng = StdRng::seed_from_u64(1);
        let (model, post) = setup_known_v(3, 2, 4, &mut rng);
        let y = DMatrix::from_fn(3, 2, |_, _| rng.gen::<f64>());
        let ev = bf_known_v(&y, &post, &model, 1.0).unwrap();
        assert!(ev.log_h.abs() < 1e-12);
        assert!(ev.log_kappa.abs() < 1e-12);
    }

    #[test]
    fn known_v_bound_attained_at_posterior_mean() {
        let mut rng = StdRng::seed_from_u64(2);
        let (model, post) = setup_known_v(2, 3, 3, &mut rng);
        let ev = bf_known_v(&post.m_star.clone(), &post, &model, 0.3).unwrap();
        assert_relative_eq!(ev.log_h, ev.log_kappa, epsilon = 1e-12);
    }

    #[test]
    fn known_v_kappa_univariate_value() {
        // phi = 1, one absorbed observation, alpha = 0.5:
        // kappa = sqrt((0.5 * 2 + 1) / (0.5 * 3))
        let model = KnownVModel::new(
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            1.0,
        )
        .unwrap();
        let series = MatrixSeries::from_obs(
            1,
            1,
            vec![MatrixObs {
                t: 1,
                y: DMatrix::from_element(1, 1, 0.7),
            }],
        )
        .unwrap();
        let post = crate::conjugate::update_known_v(&model, &series).unwrap();
        let k = kappa_known_v(&post, &model, 0.5).unwrap();
        assert_relative_eq!(k, (2.0_f64 / 1.5).sqrt(), epsilon = 1e-10);
        assert_relative_eq!(k, 1.1547005, epsilon = 1e-7);
    }

    #[test]
    fn known_v_kappa_monotone_decreasing() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..5 {
            let p = rng.gen_range(1..6);
            let n = rng.gen_range(1..6);
            let (model, post) = setup_known_v(p, n, 3, &mut rng);
            let mut prev = f64::INFINITY;
            for i in 1..=1000 {
                let alpha = i as f64 / 1000.0;
                let lk = log_kappa_known_v(&post, &model, alpha).unwrap();
                assert!(lk <= prev + 1e-12, "kappa increased at alpha={alpha}");
                assert!(lk >= -1e-12, "kappa fell below 1 at alpha={alpha}");
                prev = lk;
            }
        }
    }

    #[test]
    fn known_v_h_below_kappa_on_random_inputs() {
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..200 {
            let p = rng.gen_range(1..5);
            let n = rng.gen_range(1..5);
            let (model, post) = setup_known_v(p, n, rng.gen_range(0..6), &mut rng);
            let y = DMatrix::from_fn(p, n, |_, _| rng.gen::<f64>() * 4.0 - 2.0);
            let alpha = rng.gen_range(0.01..1.0);
            let ev = bf_known_v(&y, &post, &model, alpha).unwrap();
            assert!(ev.log_h <= ev.log_kappa + 1e-12);
            assert!(ev.log_h.is_finite());
        }
    }

    #[test]
    fn norm_const_known_v_limits_and_univariate_form() {
        let mut rng = StdRng::seed_from_u64(5);
        let (model, post) = setup_known_v(2, 2, 3, &mut rng);
        assert!(norm_const_known_v(&post, &model, 1.0).unwrap().abs() < 1e-12);
        // alpha -> 0+ drives log C far negative (clamped at the domain edge)
        let c_small = norm_const_known_v(&post, &model, 1e-6).unwrap();
        assert!(c_small < -10.0);

        // univariate closed form (2 pi sigma*^2)^{(alpha-1)/2} alpha^{1/2}
        let model1 = KnownVModel::new(
            DMatrix::from_element(1, 1, 0.2),
            DMatrix::from_element(1, 1, 1.7),
            DMatrix::from_element(1, 1, 1.0),
            2.0,
        )
        .unwrap();
        let series = MatrixSeries::from_obs(
            1,
            1,
            (1..=3)
                .map(|t| MatrixObs {
                    t,
                    y: DMatrix::from_element(1, 1, t as f64 / 2.0),
                })
                .collect(),
        )
        .unwrap();
        let post1 = crate::conjugate::update_known_v(&model1, &series).unwrap();
        let s2 = post1.sigma_star[(0, 0)];
        for alpha in [0.2, 0.5, 0.9] {
            let want =
                0.5 * (alpha - 1.0) * (2.0 * std::f64::consts::PI * s2).ln() + 0.5 * alpha.ln();
            assert_relative_eq!(
                norm_const_known_v(&post1, &model1, alpha).unwrap(),
                want,
                epsilon = 1e-12
            );
        }
        // quadrature oracle: C(alpha)^-1 = int N(theta; m*, s2)^alpha dtheta
        let alpha = 0.37;
        let m = post1.m_star[(0, 0)];
        let mut acc = 0.0;
        let h = 1e-3;
        let lim = 40.0 * s2.sqrt();
        let mut x = m - lim;
        while x < m + lim {
            let pdf =
                (-0.5 * (x - m) * (x - m) / s2).exp() / (2.0 * std::f64::consts::PI * s2).sqrt();
            acc += pdf.powf(alpha) * h;
            x += h;
        }
        assert_relative_eq!(
            norm_const_known_v(&post1, &model1, alpha).unwrap(),
            -acc.ln(),
            epsilon = 1e-6
        );
    }

    #[test]
    fn known_v_derivative_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(6);
        for _ in 0..20 {
            let p = rng.gen_range(1..4);
            let n = rng.gen_range(1..4);
            let (model, post) = setup_known_v(p, n, 3, &mut rng);
            let y = DMatrix::from_fn(p, n, |_, _| rng.gen::<f64>() * 3.0 - 1.5);
            let alpha = rng.gen_range(0.15..0.9);
            let d = bf_derivative_known_v(&y, &post, &model, alpha).unwrap();
            let h = 1e-6;
            let hp = bf_known_v(&y, &post, &model, alpha + h)
                .unwrap()
                .log_h
                .exp();
            let hm = bf_known_v(&y, &post, &model, alpha - h)
                .unwrap()
                .log_h
                .exp();
            let fd = (hp - hm) / (2.0 * h);
            let scale = fd.abs().max(1e-8);
            assert!(
                ((d - fd) / scale).abs() < 1e-5,
                "derivative {d} vs finite difference {fd} (p={p}, n={n}, alpha={alpha})"
            );
        }
    }

    #[test]
    fn known_v_derivative_blows_down_at_zero() {
        let mut rng = StdRng::seed_from_u64(7);
        let (model, post) = setup_known_v(2, 2, 3, &mut rng);
        let y = DMatrix::from_fn(2, 2, |_, _| rng.gen::<f64>() + 2.0);
        let d = bf_derivative_known_v(&y, &post, &model, 1e-8).unwrap();
        assert!(
            d < -1e6,
            "derivative should diverge to -inf near 0, got {d}"
        );
    }

    #[test]
    fn unknown_v_alpha_one_is_unit_and_bound_holds() {
        let mut rng = StdRng::seed_from_u64(8);
        let (model, post) = setup_niw(2, 2, 3, &mut rng);
        let y = DMatrix::from_fn(2, 2, |_, _| rng.gen::<f64>());
        let ev = bf_unknown_v(&y, &post, &model, 1.0).unwrap();
        assert!(ev.log_h.abs() < 1e-10, "H(1) = {}", ev.log_h);
        assert!(ev.log_kappa.abs() < 1e-10);

        for _ in 0..1000 {
            let p = rng.gen_range(1..5);
            let n = rng.gen_range(1..5);
            let (model, post) = setup_niw(p, n, rng.gen_range(1..5), &mut rng);
            let low = alpha_low(p, n, post.m_star_dof + p as f64);
            let alpha = low + 1e-4 + rng.gen::<f64>() * (1.0 - low - 1e-4);
            let y = DMatrix::from_fn(p, n, |_, _| rng.gen::<f64>() * 4.0 - 2.0);
            let ev = bf_unknown_v(&y, &post, &model, alpha).unwrap();
            assert!(
                ev.log_h <= ev.log_kappa + 1e-10,
                "H exceeded kappa at p={p} n={n} alpha={alpha}"
            );
        }
    }

    #[test]
    fn unknown_v_kappa_diverges_near_lower_bound() {
        // p=2, n=2, m=10, T=3 has alpha_low = 1/3
        let mut rng = StdRng::seed_from_u64(9);
        let model = NIWModel::new(
            DMatrix::zeros(2, 2),
            random_spd(2, &mut rng),
            2.0,
            1.0,
            random_spd(2, &mut rng),
            10.0,
        )
        .unwrap();
        let series = MatrixSeries::from_obs(
            2,
            2,
            (1..=3)
                .map(|t| MatrixObs {
                    t,
                    y: DMatrix::from_fn(2, 2, |_, _| rng.gen()),
                })
                .collect(),
        )
        .unwrap();
        let post = crate::conjugate::update_niw(&model, &series).unwrap();
        let low = alpha_low(2, 2, post.m_star_dof + 2.0);
        assert_relative_eq!(low, 1.0 / 3.0, epsilon = 1e-14);
        let k = kappa_unknown_v(&post, &model, low + 1e-6).unwrap();
        assert!(k > 1e3, "kappa near the pole should exceed 1e3, got {k}");
        assert!(kappa_unknown_v(&post, &model, low).is_err());

        // monotone decreasing on a grid
        let mut prev = f64::INFINITY;
        for i in 0..1000 {
            let alpha = (low + 1e-5) + (1.0 - low - 1e-5) * i as f64 / 999.0;
            let lk = log_kappa_unknown_v(&post, &model, alpha).unwrap();
            assert!(lk <= prev + 1e-10, "kappa increased at alpha={alpha}");
            prev = lk;
        }
    }

    #[test]
    fn unknown_v_bf_matches_predictive_ratio() {
        // H equals the ratio of the two matrix-t predictive densities
        let mut rng = StdRng::seed_from_u64(10);
        for _ in 0..20 {
            let p = rng.gen_range(1..4);
            let n = rng.gen_range(1..4);
            let (model, post) = setup_niw(p, n, rng.gen_range(1..4), &mut rng);
            let low = alpha_low(p, n, post.m_star_dof + p as f64);
            let alpha = low + 0.05 + rng.gen::<f64>() * (0.95 - low - 0.05);
            let y = DMatrix::from_fn(p, n, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
            let pred = crate::conjugate::predictive_niw(&post, &model, alpha).unwrap();
            let want = pred.null_logpdf(&y).unwrap() - pred.alt_logpdf(&y).unwrap();
            let got = bf_unknown_v(&y, &post, &model, alpha).unwrap().log_h;
            assert!(
                (got - want).abs() < 1e-9,
                "log H {got} vs predictive ratio {want}"
            );
        }
    }

    #[test]
    fn unknown_v_scalar_matches_student_t_ratio() {
        // p = n = 1: ratio of two location-scale Student-t densities from the
        // normal-inverse-gamma marginalization
        let mut rng = StdRng::seed_from_u64(11);
        let (model, post) = setup_niw(1, 1, 4, &mut rng);
        let low = alpha_low(1, 1, post.m_star_dof + 1.0);
        for _ in 0..10 {
            let alpha = low + 0.05 + rng.gen::<f64>() * (0.95 - low - 0.05);
            let y = rng.gen::<f64>() * 4.0 - 2.0;
            let ym = DMatrix::from_element(1, 1, y);
            let pred = crate::conjugate::predictive_niw(&post, &model, alpha).unwrap();
            let t_logpdf = |nu: f64, scale_prod: f64| {
                use statrs::function::gamma::ln_gamma;
                let s2 = model.sigma_l[(0, 0)] * scale_prod / nu;
                let z = (y - post.m_star[(0, 0)]) / s2.sqrt();
                ln_gamma((nu + 1.0) / 2.0)
                    - ln_gamma(nu / 2.0)
                    - 0.5 * (nu * std::f64::consts::PI).ln()
                    - 0.5 * s2.ln()
                    - (nu + 1.0) / 2.0 * (1.0 + z * z / nu).ln()
            };
            let want = t_logpdf(pred.nu_null, pred.l_star[(0, 0)])
                - t_logpdf(pred.nu_alt, pred.l_a_star[(0, 0)]);
            let got = bf_unknown_v(&ym, &post, &model, alpha).unwrap().log_h;
            assert!(
                (got - want).abs() < 1e-10,
                "log H {got} vs scalar ratio {want}"
            );
        }
    }

    #[test]
    fn norm_const_unknown_v_limits_and_scalar_quadrature() {
        let mut rng = StdRng::seed_from_u64(12);
        let (model, post) = setup_niw(2, 2, 3, &mut rng);
        assert!(norm_const_unknown_v(&post, &model, 1.0).unwrap().abs() < 1e-10);
        let low = alpha_low(2, 2, post.m_star_dof + 2.0);
        let c_near = norm_const_unknown_v(&post, &model, low + 1e-6).unwrap();
        assert!(
            c_near < -5.0,
            "log C near the bound should be very negative, got {c_near}"
        );

        // n = 1 cross-check by quadrature of the powered joint density; the
        // mean integral is Gaussian and analytic, the variance integral is
        // numeric.
        let (model1, post1) = setup_niw(1, 1, 3, &mut rng);
        let alpha = 0.7;
        let got = norm_const_unknown_v(&post1, &model1, alpha).unwrap();
        let sigma_star = model1.sigma_l[(0, 0)] / post1.k_star;
        let a_ig = (post1.m_star_dof - 2.0) / 2.0;
        let b_ig = post1.psi_star[(0, 0)] / 2.0;
        use statrs::function::gamma::ln_gamma;
        let log_iw = |v: f64| a_ig * b_ig.ln() - ln_gamma(a_ig) - (a_ig + 1.0) * v.ln() - b_ig / v;
        let f = |v: f64| {
            (alpha * log_iw(v)
                + 0.5 * (1.0 - alpha) * (2.0 * std::f64::consts::PI * sigma_star * v).ln()
                - 0.5 * alpha.ln())
            .exp()
        };
        let m = 400_001;
        let h = 1.0 / (m - 1) as f64;
        let mut s = 0.0;
        for i in 1..m - 1 {
            let u = i as f64 * h;
            let v = u / (1.0 - u);
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(v) / ((1.0 - u) * (1.0 - u));
        }
        s *= h / 3.0;
        assert!(
            (got - (-s.ln())).abs() < 1e-5,
            "log C {got} vs quadrature {}",
            -s.ln()
        );
    }

    #[test]
    fn unknown_v_derivative_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..20 {
            let p = rng.gen_range(1..4);
            let n = rng.gen_range(1..4);
            let (model, post) = setup_niw(p, n, 3, &mut rng);
            let low = alpha_low(p, n, post.m_star_dof + p as f64);
            let base = (low + 0.1).max(0.2);
            let alpha = base + rng.gen::<f64>() * (0.9 - base).max(0.01);
            let y = DMatrix::from_fn(p, n, |_, _| rng.gen::<f64>() * 3.0 - 1.5);
            let d = bf_derivative_unknown_v(&y, &post, &model, alpha).unwrap();
            let h = 1e-6;
            let hp = bf_unknown_v(&y, &post, &model, alpha + h)
                .unwrap()
                .log_h
                .exp();
            let hm = bf_unknown_v(&y, &post, &model, alpha - h)
                .unwrap()
                .log_h
                .exp();
            let fd = (hp - hm) / (2.0 * h);
            let scale = fd.abs().max(1e-8);
            assert!(
                ((d - fd) / scale).abs() < 1e-4,
                "derivative {d} vs fd {fd} (p={p} n={n} alpha={alpha})"
            );
        }
    }

    #[test]
    fn unknown_v_derivative_finite_at_one_and_sign_change_for_outlier() {
        let mut rng = StdRng::seed_from_u64(14);
        let (model, post) = setup_niw(2, 2, 4, &mut rng);
        let d = bf_derivative_unknown_v(
            &DMatrix::from_fn(2, 2, |_, _| rng.gen()),
            &post,
            &model,
            1.0 - 1e-9,
        )
        .unwrap();
        assert!(d.is_finite());

        // an outlying observation forces H below one somewhere on the domain
        let y_out = &post.m_star + DMatrix::from_element(2, 2, 6.0);
        let low = alpha_low(2, 2, post.m_star_dof + 2.0);
        let mut signs = Vec::new();
        for i in 1..200 {
            let alpha = (low + 1e-3) + (1.0 - low - 2e-3) * i as f64 / 199.0;
            signs.push(
                bf_derivative_unknown_v(&y_out, &post, &model, alpha)
                    .unwrap()
                    .signum(),
            );
        }
        assert!(
            signs.windows(2).any(|w| w[0] != w[1]),
            "expected a stationary point on the domain for an outlying observation"
        );
    }

    #[test]
    fn ellipsoid_membership_equals_bf_threshold() {
        let mut rng = StdRng::seed_from_u64(15);
        for _ in 0..20 {
            let p = rng.gen_range(1..4);
            let n = rng.gen_range(1..4);
            let (model, post) = setup_known_v(p, n, 3, &mut rng);
            let alpha = rng.gen_range(0.1..0.9);
            let kappa = kappa_known_v(&post, &model, alpha).unwrap();
            let h0 = rng.gen_range(0.2..1.0) * kappa.min(2.0);
            let ell = acceptance_ellipsoid(&post, &model, alpha, h0).unwrap();
            for _ in 0..500 {
                let y = &post.m_star
                    + DMatrix::from_fn(p, n, |_, _| (rng.gen::<f64>() * 2.0 - 1.0) * 3.0);
                let inside = ell.contains(&y).unwrap();
                let h = bf_known_v(&y, &post, &model, alpha).unwrap().log_h.exp();
                if (h - h0).abs() > 1e-9 * h0.max(1.0) {
                    assert_eq!(inside, h >= h0, "membership mismatch: H={h}, h0={h0}");
                }
            }
        }
    }

    #[test]
    fn ellipsoid_degenerate_and_empty_cases() {
        let mut rng = StdRng::seed_from_u64(16);
        let (model, post) = setup_known_v(2, 2, 3, &mut rng);
        let alpha = 0.5;
        let kappa = kappa_known_v(&post, &model, alpha).unwrap();
        let ell = acceptance_ellipsoid(&post, &model, alpha, kappa).unwrap();
        assert!(ell.radius_sq.abs() < 1e-12);
        assert!(ell.contains(&post.m_star.clone()).unwrap());
        assert!(acceptance_ellipsoid(&post, &model, alpha, kappa * (1.0 + 1e-6)).is_err());
    }

    #[test]
    fn ellipsoid_univariate_interval_matches_bisection() {
        // the single axis half-length equals the bisection root of H(y) = h0
        let mut rng = StdRng::seed_from_u64(17);
        let (model, post) = setup_known_v(1, 1, 4, &mut rng);
        let alpha = 0.45;
        let kappa = kappa_known_v(&post, &model, alpha).unwrap();
        let h0 = 0.8 * kappa.min(1.2);
        let ell = acceptance_ellipsoid(&post, &model, alpha, h0).unwrap();
        let half_len = ell.axes[0].length / 2.0;
        let m = post.m_star[(0, 0)];
        let f = |y: f64| {
            bf_known_v(&DMatrix::from_element(1, 1, y), &post, &model, alpha)
                .unwrap()
                .log_h
                .exp()
                - h0
        };
        let (mut lo, mut hi) = (m, m + 50.0);
        assert!(f(lo) > 0.0 && f(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let root = 0.5 * (lo + hi);
        assert!(
            (root - m - half_len).abs() < 1e-8,
            "root offset {} vs axis {}",
            root - m,
            half_len
        );
    }
}
